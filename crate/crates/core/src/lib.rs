//! Online continual learning with a fixed simplex-ETF classifier.
//!
//! A small MLP is trained from a class-balanced replay memory to pull
//! L2-normalized features onto fixed equiangular classifier vectors with the
//! dot-regression loss. Two additions make the geometry usable online:
//!
//! * preparatory data ([`prep`]): rotated memory samples are trained towards
//!   classifier vectors that no seen class owns yet, so features of future
//!   classes do not start inside existing clusters;
//! * residual correction ([`residual`]): at inference, residuals
//!   `w_y − ĥ` stored during training are blended in from the query's nearest
//!   stored features.
//!
//! [`harness`] streams a dataset through the learner and records
//! anytime-inference metrics.

// `!(x > eps)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod etf;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod net;
pub mod numerics;
pub mod prep;
pub mod residual;
pub mod stream;

pub use error::{Error, Result};
pub use etf::EtfClassifier;
pub use harness::{run, RunConfig, RunResult};
