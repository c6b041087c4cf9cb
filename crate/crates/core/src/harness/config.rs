//! Run configuration: a flat TOML table, unknown keys rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer};

use crate::error::{Error, Result};
use crate::net::AdamConfig;
use crate::residual::CorrectionParams;
use crate::stream::{self, Dataset, ScheduleKind};
use crate::numerics::Rng;

/// Where stream samples come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Procedural glyphs (see [`stream::synth_glyphs`]).
    Synthetic,
    /// IDX image/label files.
    Idx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleName {
    Disjoint,
    Gaussian,
}

impl From<ScheduleName> for ScheduleKind {
    fn from(s: ScheduleName) -> Self {
        match s {
            ScheduleName::Disjoint => ScheduleKind::Disjoint,
            ScheduleName::Gaussian => ScheduleKind::Gaussian,
        }
    }
}

/// Training steps per stream sample.
///
/// Integer rates run that many steps per sample. A fractional rate `q < 1`
/// runs one step every `⌈1/q⌉` samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepRate {
    PerSample(u32),
    EveryN(u32),
}

impl StepRate {
    /// Steps to run after the `count`-th sample (1-based).
    pub fn steps_after(self, count: usize) -> usize {
        match self {
            StepRate::PerSample(n) => n as usize,
            StepRate::EveryN(p) => usize::from(count.is_multiple_of(p as usize)),
        }
    }

    /// Upper bound on steps after any one sample.
    pub fn max_steps(self) -> usize {
        match self {
            StepRate::PerSample(n) => n as usize,
            StepRate::EveryN(_) => 1,
        }
    }

    fn from_ratio(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::ConfigInvalid(format!(
                "iterations_per_sample must be positive, got {num}/{den}"
            )));
        }
        if num.is_multiple_of(den) {
            let n = u32::try_from(num / den)
                .map_err(|_| Error::ConfigInvalid("iterations_per_sample too large".into()))?;
            Ok(StepRate::PerSample(n))
        } else if num > den {
            Err(Error::ConfigInvalid(format!(
                "iterations_per_sample above 1 must be an integer, got {num}/{den}"
            )))
        } else {
            let p = u32::try_from(den.div_ceil(num))
                .map_err(|_| Error::ConfigInvalid("iterations_per_sample too small".into()))?;
            Ok(StepRate::EveryN(p))
        }
    }

    fn from_float(q: f64) -> Result<Self> {
        if !(q > 0.0) || !q.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "iterations_per_sample must be positive, got {q}"
            )));
        }
        if q.fract() == 0.0 {
            return Self::from_ratio(q as u64, 1);
        }
        if q > 1.0 {
            return Err(Error::ConfigInvalid(format!(
                "iterations_per_sample above 1 must be an integer, got {q}"
            )));
        }
        // 1/q of a decimal like 0.2 may land a hair above an integer
        let p = (1.0 / q - 1e-9).ceil();
        Ok(StepRate::EveryN(p as u32))
    }
}

impl std::str::FromStr for StepRate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::ConfigInvalid(format!("cannot parse iterations_per_sample {s:?}"));
        match s.split_once('/') {
            Some((a, b)) => {
                let num = a.trim().parse().map_err(|_| bad())?;
                let den = b.trim().parse().map_err(|_| bad())?;
                Self::from_ratio(num, den)
            }
            None => Self::from_float(s.parse().map_err(|_| bad())?),
        }
    }
}

impl fmt::Display for StepRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepRate::PerSample(n) => write!(f, "{n}"),
            StepRate::EveryN(p) => write!(f, "1/{p}"),
        }
    }
}

impl<'de> Deserialize<'de> for StepRate {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Float(f64),
            Text(String),
        }
        let parsed = match Raw::deserialize(de)? {
            Raw::Int(n) => StepRate::from_ratio(n, 1),
            Raw::Float(q) => StepRate::from_float(q),
            Raw::Text(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    /// Synthetic: number of classes. IDX: ignored (taken from the labels).
    pub n_classes: usize,
    /// Synthetic samples per class before the 80/20 split.
    pub per_class: usize,
    pub image_size: usize,
    pub noise_sd: f64,
    /// IDX train files. Without test files each class is split 80/20.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,

    pub schedule: ScheduleName,
    pub n_tasks: usize,
    pub sigma: f64,

    /// Feature dimension; the classifier has `d + 1` classes.
    pub d: usize,
    pub hidden: Vec<usize>,
    pub memory_capacity: usize,
    pub batch_size: usize,
    pub prep_fraction: f64,
    pub lambda: f64,
    pub k: usize,
    pub tau: f64,
    pub lr: f64,
    pub iterations_per_sample: StepRate,
    pub eval_period: usize,
    pub seeds: Vec<u64>,

    pub use_prep_data: bool,
    pub use_residual_correction: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            n_classes: 10,
            per_class: 625,
            image_size: 12,
            noise_sd: 1.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            schedule: ScheduleName::Disjoint,
            n_tasks: 5,
            sigma: 0.1,
            d: 16,
            hidden: vec![256, 128],
            memory_capacity: 500,
            batch_size: 16,
            prep_fraction: 0.5,
            lambda: 1.0,
            k: 15,
            tau: 0.9,
            lr: 3e-4,
            iterations_per_sample: StepRate::PerSample(1),
            eval_period: 200,
            seeds: vec![0, 1, 2],
            use_prep_data: true,
            use_residual_correction: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative IDX paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            for p in [
                &mut config.train_images,
                &mut config.train_labels,
                &mut config.test_images,
                &mut config.test_labels,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.dataset == DatasetKind::Synthetic && self.d + 1 < self.n_classes {
            return fail(format!(
                "d + 1 = {} classifier vectors cannot hold {} classes",
                self.d + 1,
                self.n_classes
            ));
        }
        if self.d == 0 {
            return fail("d must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.prep_fraction) {
            return fail(format!("prep_fraction must lie in [0, 1], got {}", self.prep_fraction));
        }
        if self.mem_batch() == 0 {
            return fail("prep_fraction leaves no memory samples in the batch".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.memory_capacity == 0 {
            return fail("memory_capacity must be at least 1".into());
        }
        if self.eval_period == 0 {
            return fail("eval_period must be at least 1".into());
        }
        if self.schedule == ScheduleName::Gaussian && !(self.sigma > 0.0) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.schedule == ScheduleName::Disjoint && self.n_tasks == 0 {
            return fail("n_tasks must be at least 1".into());
        }
        if self.dataset == DatasetKind::Idx
            && (self.train_images.is_none() || self.train_labels.is_none())
        {
            return fail("idx dataset needs train_images and train_labels".into());
        }
        if self.test_images.is_some() != self.test_labels.is_some() {
            return fail("test_images and test_labels must be given together".into());
        }
        self.correction().validate()
    }

    /// `⌈(1 − ρ)·B⌉`.
    pub fn mem_batch(&self) -> usize {
        ((1.0 - self.prep_fraction) * self.batch_size as f64).ceil() as usize
    }

    /// `B − B_mem`, or 0 with preparatory data disabled.
    pub fn prep_batch(&self) -> usize {
        if self.use_prep_data {
            self.batch_size - self.mem_batch()
        } else {
            0
        }
    }

    pub fn correction(&self) -> CorrectionParams {
        CorrectionParams {
            k: self.k,
            tau: self.tau,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Builds the dataset. Synthetic data depends on `seed`; IDX data does not.
    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        match self.dataset {
            DatasetKind::Synthetic => stream::synth_glyphs(
                self.n_classes,
                self.per_class,
                self.image_size,
                self.noise_sd,
                &mut Rng::stream(seed, super::streams::DATA),
            ),
            DatasetKind::Idx => {
                let (Some(ti), Some(tl)) = (&self.train_images, &self.train_labels) else {
                    return Err(Error::ConfigInvalid("missing IDX train paths".into()));
                };
                match (&self.test_images, &self.test_labels) {
                    (Some(vi), Some(vl)) => stream::load_idx_splits(ti, tl, vi, vl),
                    _ => stream::load_idx(ti, tl),
                }
            }
        }
    }
}
