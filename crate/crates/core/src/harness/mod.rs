//! Streams a dataset through the learner and records anytime metrics.
//!
//! Per arriving sample: predict it (online accuracy), update the seen set and
//! episodic memory, run the scheduled training steps, and evaluate on the
//! seen-class test split every `eval_period` samples and at the end.

mod config;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

pub use config::{DatasetKind, RunConfig, ScheduleName, StepRate};
pub use report::{emit_csv, emit_svg, write_csv, write_svg, CSV_HEADER};

use crate::error::{Error, Result};
use crate::etf::EtfClassifier;
use crate::memory::EpisodicMemory;
use crate::metrics::{self, AccuracyTrace, NcReport, OnlineHits, TracePoint};
use crate::net::{joint_loss_and_grad, AdamState, Batch, Model};
use crate::numerics::{l2_normalize, Rng};
use crate::prep::{make_prep_batch, NegTransformSet, PrepMapping};
use crate::residual::{predict, CorrectionParams, ResidualMemory};
use crate::stream::{self, Dataset, Image, ScheduleKind, StreamSchedule};

/// RNG stream ids; one per consumer so switching a component off leaves the
/// others' draws unchanged.
pub(crate) mod streams {
    pub const DATA: u64 = 1;
    pub const SCHEDULE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const MEMORY: u64 = 4;
    pub const RETRIEVE: u64 = 5;
    pub const PREP: u64 = 6;
    pub const MAPPING: u64 = 7;
}

const EVAL_CHUNK: usize = 256;

/// One evaluation on the seen-class test split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    /// Stream samples consumed.
    pub step: usize,
    pub test_acc: f64,
    /// Online accuracy over the stream so far.
    pub aoa_running: f64,
    /// Absent with fewer than two seen classes.
    pub nc: Option<NcReport>,
    /// Mean memory-batch DR loss over the steps since the previous row.
    pub loss_real: Option<f64>,
    /// Mean prep-batch DR loss over the steps since the previous row that
    /// had a non-empty prep batch.
    pub loss_prep: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    /// Stream samples consumed when the step ran.
    pub position: usize,
    pub loss_real: f64,
    pub loss_prep: Option<f64>,
}

/// How often each optional component ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub train_steps: usize,
    pub mapping_updates: usize,
    pub prep_samples: usize,
    pub residual_stores: usize,
    pub corrections: usize,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub total_samples: usize,
    pub task_boundaries: Vec<usize>,
    pub trace: AccuracyTrace,
    pub rows: Vec<EvalRow>,
    pub online: Vec<OnlineHits>,
    pub aoa: f64,
    pub a_auc: f64,
    pub a_last: f64,
    pub forgetting: f64,
    pub losses: Vec<StepLoss>,
    /// Training steps run right after each stream sample, in arrival order.
    pub steps_after_sample: Vec<usize>,
    pub counters: Counters,
    /// Model after the last training step.
    pub model: Model,
    /// Residual memory after the last training step (empty with RC off).
    pub residuals: ResidualMemory,
    pub wall_clock: Duration,
}

impl RunResult {
    /// Equality of everything except wall-clock time.
    pub fn same_outcome(&self, other: &RunResult) -> bool {
        self.seed == other.seed
            && self.schedule == other.schedule
            && self.total_samples == other.total_samples
            && self.task_boundaries == other.task_boundaries
            && self.trace == other.trace
            && self.rows == other.rows
            && self.online == other.online
            && self.aoa.to_bits() == other.aoa.to_bits()
            && self.a_auc.to_bits() == other.a_auc.to_bits()
            && self.a_last.to_bits() == other.a_last.to_bits()
            && self.forgetting.to_bits() == other.forgetting.to_bits()
            && self.losses == other.losses
            && self.steps_after_sample == other.steps_after_sample
            && self.counters == other.counters
            && self.model == other.model
            && self.residuals == other.residuals
    }
}

/// Builds the dataset for `seed` and runs one stream over it.
pub fn run(config: &RunConfig, seed: u64) -> Result<RunResult> {
    config.validate()?;
    let ds = config.dataset(seed)?;
    run_on(config, &ds, seed)
}

pub fn build_schedule(config: &RunConfig, ds: &Dataset, seed: u64) -> Result<StreamSchedule> {
    let mut rng = Rng::stream(seed, streams::SCHEDULE);
    match config.schedule {
        ScheduleName::Disjoint => stream::disjoint_schedule(ds, config.n_tasks, &mut rng),
        ScheduleName::Gaussian => stream::gaussian_schedule(ds, config.sigma, &mut rng),
    }
}

/// Runs one stream over an already built dataset.
pub fn run_on(config: &RunConfig, ds: &Dataset, seed: u64) -> Result<RunResult> {
    config.validate()?;
    ds.validate()?;
    let started = Instant::now();
    let etf = EtfClassifier::new(config.d);
    if ds.num_classes > etf.num_classes() {
        return Err(Error::ConfigInvalid(format!(
            "dataset has {} classes but d = {} supports {}",
            ds.num_classes,
            config.d,
            etf.num_classes()
        )));
    }
    let schedule = build_schedule(config, ds, seed)?;

    let mut learner = Learner::new(config, ds.input_len(), &etf, seed);
    let mut online = Vec::with_capacity(schedule.len());
    let mut trace = AccuracyTrace::default();
    let mut rows = Vec::new();
    let mut losses = Vec::new();
    let mut steps_after_sample = Vec::with_capacity(schedule.len());
    let mut window = LossWindow::default();
    let mut hits = OnlineHits::default();

    for (pos, &idx) in schedule.order.iter().enumerate() {
        let count = pos + 1;
        let (x, y) = (&ds.images[idx], ds.labels[idx]);

        let correct = learner.infer(&x.data)? == Some(y);
        online.push(OnlineHits {
            evaluated: 1,
            correct: usize::from(correct),
        });
        hits.evaluated += 1;
        hits.correct += usize::from(correct);

        learner.observe(x, y);

        let steps = config.iterations_per_sample.steps_after(count);
        for _ in 0..steps {
            let loss = learner.train_step(count)?;
            window.add(&loss);
            losses.push(loss);
        }
        steps_after_sample.push(steps);

        if count % config.eval_period == 0 || count == schedule.len() {
            let eval = learner.evaluate(ds)?;
            trace.push(TracePoint {
                position: count,
                accuracy: eval.accuracy,
                per_class: eval.per_class,
            });
            let (loss_real, loss_prep) = window.take();
            rows.push(EvalRow {
                step: count,
                test_acc: eval.accuracy,
                aoa_running: hits.correct as f64 / hits.evaluated as f64,
                nc: eval.nc,
                loss_real,
                loss_prep,
            });
        }
    }

    let total = schedule.len();
    let (aoa, a_auc, a_last, forgetting) = if trace.is_empty() {
        (0.0, 0.0, 0.0, 0.0)
    } else {
        (
            metrics::aoa(&online)?,
            metrics::a_auc(&trace, total)?,
            metrics::a_last(&trace)?,
            metrics::forgetting(&trace)?,
        )
    };
    Ok(RunResult {
        seed,
        schedule: schedule.kind,
        total_samples: total,
        task_boundaries: schedule.task_boundaries,
        trace,
        rows,
        online,
        aoa,
        a_auc,
        a_last,
        forgetting,
        losses,
        steps_after_sample,
        counters: learner.counters,
        model: learner.model,
        residuals: learner.residuals,
        wall_clock: started.elapsed(),
    })
}

/// Model, memories and optimizer state of one run.
struct Learner<'a> {
    config: &'a RunConfig,
    etf: &'a EtfClassifier,
    model: Model,
    adam: AdamState,
    memory: EpisodicMemory,
    residuals: ResidualMemory,
    mapping: PrepMapping,
    transforms: NegTransformSet,
    seen: BTreeSet<usize>,
    correction: CorrectionParams,
    rng_memory: Rng,
    rng_retrieve: Rng,
    rng_prep: Rng,
    rng_mapping: Rng,
    counters: Counters,
}

struct Evaluation {
    accuracy: f64,
    per_class: BTreeMap<usize, f64>,
    nc: Option<NcReport>,
}

impl<'a> Learner<'a> {
    fn new(config: &'a RunConfig, input_len: usize, etf: &'a EtfClassifier, seed: u64) -> Self {
        let model = Model::new(
            input_len,
            &config.hidden,
            config.d,
            &mut Rng::stream(seed, streams::INIT),
        );
        let transforms = NegTransformSet::rotations();
        Self {
            config,
            etf,
            adam: AdamState::new(&model, config.adam()),
            model,
            memory: EpisodicMemory::new(config.memory_capacity),
            residuals: ResidualMemory::new(),
            mapping: PrepMapping::new(etf.num_classes(), transforms.len()),
            transforms,
            seen: BTreeSet::new(),
            correction: config.correction(),
            rng_memory: Rng::stream(seed, streams::MEMORY),
            rng_retrieve: Rng::stream(seed, streams::RETRIEVE),
            rng_prep: Rng::stream(seed, streams::PREP),
            rng_mapping: Rng::stream(seed, streams::MAPPING),
            counters: Counters::default(),
        }
    }

    fn observe(&mut self, x: &Image, y: usize) {
        if self.seen.insert(y) && self.config.use_prep_data {
            self.mapping.update_mapping(y, &mut self.rng_mapping);
            self.counters.mapping_updates += 1;
        }
        self.memory.update(x.clone(), y, &mut self.rng_memory);
    }

    fn train_step(&mut self, position: usize) -> Result<StepLoss> {
        let mem = self.memory.retrieve(self.config.mem_batch(), &mut self.rng_retrieve)?;
        let prep = match self.config.prep_batch() {
            0 => Batch::default(),
            n => make_prep_batch(
                &self.memory,
                &self.mapping,
                &self.transforms,
                n,
                &mut self.rng_prep,
            )?,
        };
        self.counters.prep_samples += prep.len();
        let (report, grads) =
            joint_loss_and_grad(&self.model, &mem, &prep, self.etf, self.config.lambda)?;
        if self.config.use_residual_correction {
            for (h, &y) in report.mem_features.iter().zip(&mem.labels) {
                self.residuals.store(h, y, self.etf)?;
                self.counters.residual_stores += 1;
            }
        }
        self.adam.apply(&mut self.model, &grads);
        self.counters.train_steps += 1;
        Ok(StepLoss {
            position,
            loss_real: report.loss_real,
            loss_prep: (!prep.is_empty()).then_some(report.loss_prep),
        })
    }

    /// Predicted label of one input, `None` when nothing is predictable
    /// (no seen class yet, or a degenerate feature).
    fn infer(&mut self, input: &[f64]) -> Result<Option<usize>> {
        if self.seen.is_empty() {
            return Ok(None);
        }
        let f = self.model.features(&[input])?.pop().expect("one feature");
        self.classify(&f)
    }

    fn classify(&mut self, feature: &[f64]) -> Result<Option<usize>> {
        let Ok(h) = l2_normalize(feature) else {
            return Ok(None);
        };
        let h = if self.config.use_residual_correction && !self.residuals.is_empty() {
            self.counters.corrections += 1;
            self.residuals.correct(&h, self.correction)?
        } else {
            h
        };
        match predict(self.etf, &h, &self.seen) {
            Ok(y) => Ok(Some(y)),
            Err(Error::ZeroVector) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn evaluate(&mut self, ds: &Dataset) -> Result<Evaluation> {
        let test: Vec<usize> = ds
            .test
            .iter()
            .copied()
            .filter(|i| self.seen.contains(&ds.labels[*i]))
            .collect();
        let mut per_class_hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        let mut features: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for chunk in test.chunks(EVAL_CHUNK) {
            let inputs: Vec<&[f64]> = chunk.iter().map(|&i| ds.images[i].data.as_slice()).collect();
            let feats = self.model.features(&inputs)?;
            for (f, &i) in feats.iter().zip(chunk) {
                let y = ds.labels[i];
                let hit = self.classify(f)? == Some(y);
                let e = per_class_hits.entry(y).or_default();
                e.0 += usize::from(hit);
                e.1 += 1;
                if let Ok(h) = l2_normalize(f) {
                    features.entry(y).or_default().push(h);
                }
            }
        }
        let (correct, total) = per_class_hits
            .values()
            .fold((0, 0), |(c, t), &(hc, ht)| (c + hc, t + ht));
        let accuracy = if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        };
        let per_class = per_class_hits
            .into_iter()
            .map(|(y, (c, t))| (y, c as f64 / t as f64))
            .collect();
        let nc = if features.len() >= 2 {
            metrics::nc_report(&features, self.etf).ok()
        } else {
            None
        };
        Ok(Evaluation {
            accuracy,
            per_class,
            nc,
        })
    }
}

#[derive(Default)]
struct LossWindow {
    real: (f64, usize),
    prep: (f64, usize),
}

impl LossWindow {
    fn add(&mut self, loss: &StepLoss) {
        self.real.0 += loss.loss_real;
        self.real.1 += 1;
        if let Some(p) = loss.loss_prep {
            self.prep.0 += p;
            self.prep.1 += 1;
        }
    }

    fn take(&mut self) -> (Option<f64>, Option<f64>) {
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        let out = (mean(self.real), mean(self.prep));
        *self = Self::default();
        out
    }
}

/// The three configurations of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoResidual,
    Vanilla,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoResidual, Variant::Vanilla];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "EARL",
            Variant::NoResidual => "-RC",
            Variant::Vanilla => "-RC & PDT",
        }
    }

    pub fn apply(self, config: &RunConfig) -> RunConfig {
        let mut c = config.clone();
        (c.use_prep_data, c.use_residual_correction) = match self {
            Variant::Full => (true, true),
            Variant::NoResidual => (true, false),
            Variant::Vanilla => (false, false),
        };
        c
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub results: Vec<RunResult>,
}

impl AblationRow {
    pub fn summary(&self, metric: impl Fn(&RunResult) -> f64) -> Summary {
        Summary::of(&self.results.iter().map(metric).collect::<Vec<_>>())
    }
}

/// Runs every variant on every seed in `config.seeds`. Each seed's dataset
/// is built once and shared by the variants.
pub fn ablate(config: &RunConfig) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let mut rows: Vec<AblationRow> = Variant::ALL
        .iter()
        .map(|&variant| AblationRow {
            variant,
            results: Vec::new(),
        })
        .collect();
    for &seed in &config.seeds {
        let ds = config.dataset(seed)?;
        for row in &mut rows {
            row.results.push(run_on(&row.variant.apply(config), &ds, seed)?);
        }
    }
    Ok(rows)
}

/// Mean real-sample DR loss over the first `window` training steps after
/// each task boundary, or `None` for runs without boundaries.
pub fn post_boundary_loss(result: &RunResult, window: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &b in &result.task_boundaries {
        let after = result.losses.iter().filter(|l| l.position > b).take(window);
        for l in after {
            sum += l.loss_real;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}
