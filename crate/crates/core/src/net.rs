//! Trainable feature extractor: a ReLU MLP backbone followed by a linear
//! projection, trained with the dot-regression loss against fixed ETF targets.
//!
//! Forward and backward passes are written out by hand over flat batch-major
//! buffers. The loss gradient is taken through the L2 normalization of the
//! model output, so training sees exactly the objective evaluated at
//! inference.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::etf::EtfClassifier;
use crate::numerics::{axpy, dot, norm, Mat, Rng, NORM_EPS};
use crate::stream::Image;

/// Tolerance on `|h_hat| = 1` for [`dr_loss`].
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Per-sample feature map `f = p ∘ g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_len: usize,
    layers: Vec<Dense>,
}

/// Activations recorded by [`Model::forward`]; `outputs[0]` is the input
/// batch and `outputs[l + 1]` the post-activation output of layer `l`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch: usize,
    outputs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: vec![0.0; l.weight.rows() * l.weight.cols()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.flat())
    }
}

impl Model {
    /// He-uniform initialised MLP: ReLU hidden layers of the given widths,
    /// then a linear projection to `dim`.
    pub fn new(input_len: usize, hidden: &[usize], dim: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_len;
        for (i, &width) in hidden.iter().chain(std::iter::once(&dim)).enumerate() {
            let bound = (6.0 / fan_in as f64).sqrt();
            let weight = Mat::from_vec(
                width,
                fan_in,
                (0..width * fan_in)
                    .map(|_| bound * (2.0 * rng.uniform() - 1.0))
                    .collect(),
            );
            let activation = if i < hidden.len() {
                Activation::Relu
            } else {
                Activation::Identity
            };
            layers.push(Dense {
                weight,
                bias: vec![0.0; width],
                activation,
            });
            fan_in = width;
        }
        Self { input_len, layers }
    }

    pub fn from_layers(input_len: usize, layers: Vec<Dense>) -> Result<Self> {
        let mut expected = input_len;
        if layers.is_empty() {
            return Err(Error::ConfigInvalid("model needs at least one layer".into()));
        }
        for l in &layers {
            if l.in_dim() != expected || l.bias.len() != l.out_dim() {
                return Err(Error::ShapeMismatch {
                    expected,
                    got: l.in_dim(),
                });
            }
            expected = l.out_dim();
        }
        Ok(Self { input_len, layers })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    /// Output feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    /// Mutable access to parameter `index` in [`Model::params_flat`] order.
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weight.rows() * l.weight.cols();
            if index < nw {
                return &mut l.weight.as_mut_slice()[index];
            }
            index -= nw;
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn check_inputs<'a, I>(&self, inputs: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        for x in inputs {
            if x.len() != self.input_len {
                return Err(Error::ShapeMismatch {
                    expected: self.input_len,
                    got: x.len(),
                });
            }
        }
        Ok(())
    }

    /// Pre-normalization features for a batch, with the cache needed by
    /// [`Model::backward`].
    pub fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
        self.check_inputs(inputs.iter().copied())?;
        let batch = inputs.len();
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(inputs.iter().flat_map(|x| x.iter().copied()).collect::<Vec<f64>>());
        for layer in &self.layers {
            let next = dense_forward(layer, outputs.last().unwrap(), batch);
            outputs.push(next);
        }
        let d = self.dim();
        let features = outputs
            .last()
            .unwrap()
            .chunks_exact(d.max(1))
            .take(batch)
            .map(<[f64]>::to_vec)
            .collect();
        Ok((features, ForwardCache { batch, outputs }))
    }

    /// Features without keeping a cache.
    pub fn features(&self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(inputs.iter().copied())?;
        let batch = inputs.len();
        let mut act: Vec<f64> = inputs.iter().flat_map(|x| x.iter().copied()).collect();
        for layer in &self.layers {
            act = dense_forward(layer, &act, batch);
        }
        Ok(act.chunks_exact(self.dim().max(1)).take(batch).map(<[f64]>::to_vec).collect())
    }

    /// Back-propagates `grad_features` (one row per sample, w.r.t. the
    /// pre-normalization features) into parameter gradients.
    pub fn backward(&self, cache: &ForwardCache, grad_features: &[Vec<f64>]) -> Gradients {
        let batch = cache.batch;
        assert_eq!(grad_features.len(), batch, "one feature gradient per sample");
        let mut grads = Gradients::zeros_like(self);
        let mut upstream: Vec<f64> = grad_features.iter().flatten().copied().collect();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let (in_dim, out_dim) = (layer.in_dim(), layer.out_dim());
            let output = &cache.outputs[li + 1];
            let input = &cache.outputs[li];
            if layer.activation == Activation::Relu {
                for (g, &a) in upstream.iter_mut().zip(output) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let g = &mut grads.layers[li];
            for b in 0..batch {
                let dz = &upstream[b * out_dim..(b + 1) * out_dim];
                let x = &input[b * in_dim..(b + 1) * in_dim];
                for (o, &dzo) in dz.iter().enumerate() {
                    if dzo != 0.0 {
                        axpy(dzo, x, &mut g.weight[o * in_dim..(o + 1) * in_dim]);
                        g.bias[o] += dzo;
                    }
                }
            }
            if li > 0 {
                let mut down = vec![0.0; batch * in_dim];
                for b in 0..batch {
                    let dz = &upstream[b * out_dim..(b + 1) * out_dim];
                    let dx = &mut down[b * in_dim..(b + 1) * in_dim];
                    for (o, &dzo) in dz.iter().enumerate() {
                        if dzo != 0.0 {
                            axpy(dzo, layer.weight.row(o), dx);
                        }
                    }
                }
                upstream = down;
            }
        }
        grads
    }

    pub fn all_finite(&self) -> bool {
        self.params_flat().iter().all(|p| p.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.input_len as u32).to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
            out.push(match l.activation {
                Activation::Identity => 0,
                Activation::Relu => 1,
            });
            for v in l.weight.as_slice().iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let input_len = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let activation = match r.take(1)?[0] {
                0 => Activation::Identity,
                1 => Activation::Relu,
                t => return Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
            };
            let weight = (0..in_dim * out_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let bias = (0..out_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            layers.push(Dense {
                weight: Mat::from_vec(out_dim, in_dim, weight),
                bias,
                activation,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Self::from_layers(input_len, layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"EARLMODL";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn dense_forward(layer: &Dense, input: &[f64], batch: usize) -> Vec<f64> {
    let (in_dim, out_dim) = (layer.in_dim(), layer.out_dim());
    let mut out = vec![0.0; batch * out_dim];
    for b in 0..batch {
        let x = &input[b * in_dim..(b + 1) * in_dim];
        let y = &mut out[b * out_dim..(b + 1) * out_dim];
        for (o, yo) in y.iter_mut().enumerate() {
            let z = layer.bias[o] + dot(layer.weight.row(o), x);
            *yo = match layer.activation {
                Activation::Relu => z.max(0.0),
                Activation::Identity => z,
            };
        }
    }
    out
}

/// Dot-regression loss `½ (w_yᵀ ĥ − 1)²` for a unit-norm feature.
pub fn dr_loss(h_hat: &[f64], label: usize, etf: &EtfClassifier) -> Result<f64> {
    if label >= etf.num_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: etf.num_classes(),
        });
    }
    let n = norm(h_hat);
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::UnnormalizedInput { norm: n });
    }
    let s = dot(etf.vector(label), h_hat);
    Ok(0.5 * (s - 1.0) * (s - 1.0))
}

/// Labelled images drawn for one training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Image>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<Image>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::BatchLengthMismatch {
                inputs: inputs.len(),
                labels: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_slices(&self) -> Vec<&[f64]> {
        self.inputs.iter().map(|im| im.data.as_slice()).collect()
    }

    fn check_labels(&self, classes: usize) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return Err(Error::BatchLengthMismatch {
                inputs: self.inputs.len(),
                labels: self.labels.len(),
            });
        }
        match self.labels.iter().find(|&&y| y >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Gradients,
    second: Gradients,
}

impl AdamState {
    pub fn new(model: &Model, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Gradients::zeros_like(model),
            second: Gradients::zeros_like(model),
        }
    }

    /// One bias-corrected Adam update of `model` with `grads`.
    pub fn apply(&mut self, model: &mut Model, grads: &Gradients) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for (li, layer) in model.layers.iter_mut().enumerate() {
            let g = &grads.layers[li];
            let (m, v) = (&mut self.first.layers[li], &mut self.second.layers[li]);
            update(layer.weight.as_mut_slice(), &g.weight, &mut m.weight, &mut v.weight);
            update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
    }
}

/// Loss terms of the joint objective, evaluated before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss_real: f64,
    pub loss_prep: f64,
    /// Normalized features of the memory batch, in batch order.
    pub mem_features: Vec<Vec<f64>>,
}

/// Joint objective `mean_mem L_DR + λ · mean_prep L_DR` and its gradient.
/// An empty prep batch contributes nothing.
pub fn joint_loss_and_grad(
    model: &Model,
    mem: &Batch,
    prep: &Batch,
    etf: &EtfClassifier,
    lambda: f64,
) -> Result<(StepReport, Gradients)> {
    if mem.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let classes = etf.num_classes();
    mem.check_labels(classes)?;
    prep.check_labels(classes)?;
    let mut inputs = mem.input_slices();
    inputs.extend(prep.input_slices());
    let labels: Vec<usize> = mem.labels.iter().chain(&prep.labels).copied().collect();
    let (features, cache) = model.forward(&inputs)?;

    let mem_weight = 1.0 / mem.len() as f64;
    let prep_weight = if prep.is_empty() {
        0.0
    } else {
        lambda / prep.len() as f64
    };
    let mut loss_real = 0.0;
    let mut loss_prep = 0.0;
    let mut grad_features = Vec::with_capacity(features.len());
    let mut mem_features = Vec::with_capacity(mem.len());
    for (i, (f, &y)) in features.iter().zip(&labels).enumerate() {
        let n = norm(f);
        if !(n > NORM_EPS) {
            return Err(Error::DegenerateNorm { norm: n });
        }
        let h: Vec<f64> = f.iter().map(|x| x / n).collect();
        let w = etf.vector(y);
        let s = dot(w, &h);
        let loss = 0.5 * (s - 1.0) * (s - 1.0);
        let is_mem = i < mem.len();
        let weight = if is_mem { mem_weight } else { prep_weight };
        // d/df of ½(wᵀf/|f| − 1)² = (s − 1)/|f| · (w − s ĥ)
        let coeff = weight * (s - 1.0) / n;
        grad_features.push(w.iter().zip(&h).map(|(wi, hi)| coeff * (wi - s * hi)).collect());
        if is_mem {
            loss_real += loss;
            mem_features.push(h);
        } else {
            loss_prep += loss;
        }
    }
    loss_real *= mem_weight;
    if !prep.is_empty() {
        loss_prep /= prep.len() as f64;
    }
    let grads = model.backward(&cache, &grad_features);
    Ok((
        StepReport {
            loss_real,
            loss_prep,
            mem_features,
        },
        grads,
    ))
}

/// Computes the joint loss and applies one Adam step. Reported losses and
/// features are those of the model before the update.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    mem: &Batch,
    prep: &Batch,
    etf: &EtfClassifier,
    lambda: f64,
) -> Result<StepReport> {
    let (report, grads) = joint_loss_and_grad(model, mem, prep, etf, lambda)?;
    adam.apply(model, &grads);
    Ok(report)
}

/// Scalar joint loss (forward only).
pub fn joint_loss(
    model: &Model,
    mem: &Batch,
    prep: &Batch,
    etf: &EtfClassifier,
    lambda: f64,
) -> Result<f64> {
    let mean_dr = |batch: &Batch| -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let feats = model.features(&batch.input_slices())?;
        let mut total = 0.0;
        for (f, &y) in feats.iter().zip(&batch.labels) {
            let n = norm(f);
            if !(n > NORM_EPS) {
                return Err(Error::DegenerateNorm { norm: n });
            }
            let s = dot(etf.vector(y), f) / n;
            total += 0.5 * (s - 1.0) * (s - 1.0);
        }
        Ok(total / batch.len() as f64)
    };
    Ok(mean_dr(mem)? + lambda * mean_dr(prep)?)
}

/// Step for central differences.
pub const GRAD_CHECK_EPS: f64 = 1e-5;
/// Denominator floor so near-zero gradients compare on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest relative discrepancy between the analytic gradient of the joint
/// loss and central finite differences, over every parameter.
pub fn grad_check(
    model: &Model,
    mem: &Batch,
    prep: &Batch,
    etf: &EtfClassifier,
    lambda: f64,
) -> Result<f64> {
    let (_, grads) = joint_loss_and_grad(model, mem, prep, etf, lambda)?;
    let indices: Vec<usize> = (0..model.num_params()).collect();
    grad_check_against(model, mem, prep, etf, lambda, &grads, &indices)
}

/// As [`grad_check`] but on a random subset of at most `max_params`
/// parameters, for models too large to probe exhaustively.
pub fn grad_check_sampled(
    model: &Model,
    mem: &Batch,
    prep: &Batch,
    etf: &EtfClassifier,
    lambda: f64,
    max_params: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let (_, grads) = joint_loss_and_grad(model, mem, prep, etf, lambda)?;
    let mut indices: Vec<usize> = (0..model.num_params()).collect();
    rng.shuffle(&mut indices);
    indices.truncate(max_params);
    grad_check_against(model, mem, prep, etf, lambda, &grads, &indices)
}

/// Compares a supplied gradient against finite differences at `indices`
/// (positions in [`Model::params_flat`] order).
pub fn grad_check_against(
    model: &Model,
    mem: &Batch,
    prep: &Batch,
    etf: &EtfClassifier,
    lambda: f64,
    analytic: &Gradients,
    indices: &[usize],
) -> Result<f64> {
    let flat = analytic.flat();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let original = *probe.param_mut(i);
        *probe.param_mut(i) = original + GRAD_CHECK_EPS;
        let plus = joint_loss(&probe, mem, prep, etf, lambda)?;
        *probe.param_mut(i) = original - GRAD_CHECK_EPS;
        let minus = joint_loss(&probe, mem, prep, etf, lambda)?;
        *probe.param_mut(i) = original;
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_EPS);
        let a = flat[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
