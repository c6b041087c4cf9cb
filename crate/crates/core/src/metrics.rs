//! Anytime-inference metrics and neural-collapse diagnostics.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::etf::EtfClassifier;
use crate::numerics::{norm, pinv, Mat, NORM_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    /// Stream samples consumed when the evaluation ran.
    pub position: usize,
    pub accuracy: f64,
    pub per_class: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyTrace {
    pub points: Vec<TracePoint>,
}

impl AccuracyTrace {
    pub fn push(&mut self, point: TracePoint) {
        debug_assert!(self
            .points
            .last()
            .is_none_or(|p| p.position < point.position));
        self.points.push(point);
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }
}

/// Trapezoidal area under accuracy vs. `position / total_samples`,
/// normalized by the covered span.
pub fn a_auc(trace: &AccuracyTrace, total_samples: usize) -> Result<f64> {
    let pts = &trace.points;
    match pts.len() {
        0 => Err(Error::EmptyTrace),
        1 => Ok(pts[0].accuracy),
        _ => {
            let total = total_samples.max(1) as f64;
            let x = |p: &TracePoint| p.position as f64 / total;
            let area: f64 = pts
                .windows(2)
                .map(|w| (x(&w[1]) - x(&w[0])) * 0.5 * (w[0].accuracy + w[1].accuracy))
                .sum();
            let span = x(&pts[pts.len() - 1]) - x(&pts[0]);
            Ok(area / span)
        }
    }
}

pub fn a_last(trace: &AccuracyTrace) -> Result<f64> {
    trace.points.last().map(|p| p.accuracy).ok_or(Error::EmptyTrace)
}

/// Online hits for one block of stream samples, each predicted before any
/// training step that used it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OnlineHits {
    pub evaluated: usize,
    pub correct: usize,
}

pub fn aoa(hits: &[OnlineHits]) -> Result<f64> {
    let evaluated: usize = hits.iter().map(|h| h.evaluated).sum();
    if hits.is_empty() || evaluated == 0 {
        return Err(Error::EmptyInput);
    }
    let correct: usize = hits.iter().map(|h| h.correct).sum();
    Ok(correct as f64 / evaluated as f64)
}

/// Mean over classes evaluated before the final point of
/// `max(historical accuracy) − final accuracy`, the max including the final
/// evaluation so the value is never negative.
pub fn forgetting(trace: &AccuracyTrace) -> Result<f64> {
    let (last, earlier) = trace.points.split_last().ok_or(Error::EmptyTrace)?;
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for p in earlier {
        for (&c, &acc) in &p.per_class {
            let e = best.entry(c).or_insert(acc);
            *e = e.max(acc);
        }
    }
    let drops: Vec<f64> = best
        .iter()
        .filter_map(|(c, &peak)| last.per_class.get(c).map(|&fin| peak.max(fin) - fin))
        .collect();
    if drops.is_empty() {
        return Ok(0.0);
    }
    Ok(drops.iter().sum::<f64>() / drops.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NcReport {
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
}

/// Neural-collapse diagnostics over the classes present in
/// `features_by_class` (keys are ETF labels).
///
/// * NC1 = `tr(Σ_W Σ_B†) / K̃`
/// * NC2 = `‖MMᵀ/‖MMᵀ‖_F − (I − J/K̃)/√(K̃−1)‖_F`, rows of `M` the
///   normalized centred class means
/// * NC3 = same with `W̃Mᵀ`, `W̃` the classifier rows of those classes
pub fn nc_report(
    features_by_class: &BTreeMap<usize, Vec<Vec<f64>>>,
    etf: &EtfClassifier,
) -> Result<NcReport> {
    nc_report_with(features_by_class, etf.vectors())
}

/// As [`nc_report`] against an arbitrary classifier, one row per label.
pub fn nc_report_with(
    features_by_class: &BTreeMap<usize, Vec<Vec<f64>>>,
    classifier: &Mat,
) -> Result<NcReport> {
    let classes: Vec<(&usize, &Vec<Vec<f64>>)> = features_by_class
        .iter()
        .filter(|(_, f)| !f.is_empty())
        .collect();
    if classes.len() < 2 {
        return Err(Error::TooFewClasses);
    }
    let d = classifier.cols();
    if let Some((&label, _)) = classes.iter().find(|(&l, _)| l >= classifier.rows()) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: classifier.rows(),
        });
    }
    let kt = classes.len();
    for (_, feats) in &classes {
        if let Some(f) = feats.iter().find(|f| f.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: f.len(),
            });
        }
    }

    let means: Vec<Vec<f64>> = classes
        .iter()
        .map(|(_, feats)| {
            let mut m = vec![0.0; d];
            for f in feats.iter() {
                for (mi, fi) in m.iter_mut().zip(f) {
                    *mi += fi;
                }
            }
            m.iter().map(|v| v / feats.len() as f64).collect()
        })
        .collect();
    let mut global = vec![0.0; d];
    for m in &means {
        for (g, v) in global.iter_mut().zip(m) {
            *g += v / kt as f64;
        }
    }

    let mut sigma_w = Mat::zeros(d, d);
    let mut sigma_b = Mat::zeros(d, d);
    let add_outer = |acc: &mut Mat, v: &[f64], scale: f64| {
        for i in 0..d {
            for j in 0..d {
                acc[(i, j)] += scale * v[i] * v[j];
            }
        }
    };
    for ((_, feats), mean) in classes.iter().zip(&means) {
        let scale = 1.0 / (kt as f64 * feats.len() as f64);
        for f in feats.iter() {
            let diff: Vec<f64> = f.iter().zip(mean).map(|(a, b)| a - b).collect();
            add_outer(&mut sigma_w, &diff, scale);
        }
    }
    let mut centred = Vec::with_capacity(kt);
    for ((&label, _), mean) in classes.iter().zip(&means) {
        let c: Vec<f64> = mean.iter().zip(&global).map(|(a, b)| a - b).collect();
        add_outer(&mut sigma_b, &c, 1.0 / kt as f64);
        let n = norm(&c);
        if !(n > NORM_EPS) {
            return Err(Error::DegenerateClassMean { label });
        }
        centred.push(c.iter().map(|v| v / n).collect::<Vec<f64>>());
    }
    let nc1 = sigma_w.matmul(&pinv(&sigma_b)).trace() / kt as f64;

    let m = Mat::from_rows(&centred);
    let target = simplex_target(kt);
    let deviation = |g: Mat| {
        let fro = g.frobenius();
        g.scale(1.0 / fro).sub(&target).frobenius()
    };
    let nc2 = deviation(m.matmul(&m.transpose()));
    let w = Mat::from_rows(
        &classes
            .iter()
            .map(|(&label, _)| classifier.row(label).to_vec())
            .collect::<Vec<_>>(),
    );
    let nc3 = deviation(w.matmul(&m.transpose()));
    Ok(NcReport {
        nc1: nc1.max(0.0),
        nc2,
        nc3,
    })
}

/// `(I − J/K) / √(K−1)`
fn simplex_target(k: usize) -> Mat {
    let kf = k as f64;
    let s = 1.0 / (kf - 1.0).sqrt();
    let mut t = Mat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            t[(i, j)] = s * (if i == j { 1.0 } else { 0.0 } - 1.0 / kf);
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{householder_qr, Rng};

    fn point(position: usize, accuracy: f64) -> TracePoint {
        TracePoint {
            position,
            accuracy,
            per_class: BTreeMap::new(),
        }
    }

    fn trace(points: Vec<TracePoint>) -> AccuracyTrace {
        AccuracyTrace { points }
    }

    #[test]
    fn auc_examples() {
        let t = trace((1..=7).map(|i| point(i * i * 10, 0.7)).collect());
        assert!((a_auc(&t, 1000).unwrap() - 0.7).abs() < 1e-12);

        let n = 11;
        let ramp = trace((0..n).map(|i| point(i * 100, i as f64 / (n - 1) as f64)).collect());
        let v = a_auc(&ramp, 1000).unwrap();
        assert!((v - 0.5).abs() <= 1.0 / (2.0 * n as f64));

        assert_eq!(a_auc(&trace(vec![point(5, 0.42)]), 10).unwrap(), 0.42);
        assert!(matches!(a_auc(&trace(vec![]), 10), Err(Error::EmptyTrace)));
    }

    #[test]
    fn auc_unchanged_by_linear_refinement() {
        let mut rng = Rng::new(1);
        let coarse: Vec<TracePoint> = (0..6).map(|i| point(i * 200, rng.uniform())).collect();
        let mut fine = Vec::new();
        for w in coarse.windows(2) {
            fine.push(w[0].clone());
            fine.push(point((w[0].position + w[1].position) / 2, 0.5 * (w[0].accuracy + w[1].accuracy)));
        }
        fine.push(coarse.last().unwrap().clone());
        let a = a_auc(&trace(coarse), 1000).unwrap();
        let b = a_auc(&trace(fine), 1000).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn last_and_online_accuracy() {
        assert_eq!(a_last(&trace(vec![point(1, 0.2), point(2, 0.9)])).unwrap(), 0.9);
        assert_eq!(a_last(&trace(vec![point(1, 0.5)])).unwrap(), 0.5);
        let hits = [
            OnlineHits { evaluated: 10, correct: 5 },
            OnlineHits { evaluated: 10, correct: 7 },
        ];
        assert!((aoa(&hits).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(aoa(&[OnlineHits { evaluated: 4, correct: 4 }]).unwrap(), 1.0);
        assert!(matches!(aoa(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn forgetting_examples() {
        let pc = |v: &[(usize, f64)]| v.iter().copied().collect::<BTreeMap<_, _>>();
        let monotone = trace(vec![
            TracePoint { position: 1, accuracy: 0.0, per_class: pc(&[(0, 0.2)]) },
            TracePoint { position: 2, accuracy: 0.0, per_class: pc(&[(0, 0.5), (1, 0.1)]) },
            TracePoint { position: 3, accuracy: 0.0, per_class: pc(&[(0, 0.9), (1, 0.4)]) },
        ]);
        assert_eq!(forgetting(&monotone).unwrap(), 0.0);
        let drop = trace(vec![
            TracePoint { position: 1, accuracy: 0.0, per_class: pc(&[(0, 0.8)]) },
            TracePoint { position: 2, accuracy: 0.0, per_class: pc(&[(0, 0.5)]) },
        ]);
        assert!((forgetting(&drop).unwrap() - 0.3).abs() < 1e-15);
    }

    fn etf_features(etf: &EtfClassifier, classes: &[usize], per: usize, noise: f64, rng: &mut Rng) -> BTreeMap<usize, Vec<Vec<f64>>> {
        classes
            .iter()
            .map(|&c| {
                let feats = (0..per)
                    .map(|_| etf.vector(c).iter().map(|v| v + noise * rng.normal()).collect())
                    .collect();
                (c, feats)
            })
            .collect()
    }

    #[test]
    fn perfect_collapse_is_zero() {
        let etf = EtfClassifier::new(8);
        let all: Vec<usize> = (0..9).collect();
        let r = nc_report(&etf_features(&etf, &all, 3, 0.0, &mut Rng::new(0)), &etf).unwrap();
        assert!(r.nc1 < 1e-8 && r.nc2 < 1e-8 && r.nc3 < 1e-8, "{r:?}");
        // a subset of vertices is itself a centred simplex aligned with W
        let r = nc_report(&etf_features(&etf, &[1, 4, 6], 3, 0.0, &mut Rng::new(0)), &etf).unwrap();
        assert!(r.nc1 < 1e-8 && r.nc2 < 1e-8 && r.nc3 < 1e-8, "{r:?}");
    }

    #[test]
    fn nc1_grows_with_noise_and_ignores_scale() {
        let etf = EtfClassifier::new(8);
        let all: Vec<usize> = (0..9).collect();
        let mut prev = 0.0;
        for noise in [0.01, 0.1, 0.5] {
            let feats = etf_features(&etf, &all, 20, noise, &mut Rng::new(3));
            let r = nc_report(&feats, &etf).unwrap();
            assert!(r.nc1 > prev, "noise {noise}: {} <= {prev}", r.nc1);
            prev = r.nc1;

            let scaled: BTreeMap<usize, Vec<Vec<f64>>> = feats
                .iter()
                .map(|(&c, fs)| (c, fs.iter().map(|f| f.iter().map(|v| 3.5 * v).collect()).collect()))
                .collect();
            let rs = nc_report(&scaled, &etf).unwrap();
            assert!((rs.nc1 - r.nc1).abs() < 1e-8 * r.nc1.max(1.0));
        }
    }

    fn random_rotation(d: usize, rng: &mut Rng) -> Mat {
        let g = Mat::from_vec(d, d, (0..d * d).map(|_| rng.normal()).collect());
        householder_qr(&g).0
    }

    #[test]
    fn rotated_simplex_breaks_duality_only() {
        let etf = EtfClassifier::new(6);
        let rot = random_rotation(6, &mut Rng::new(9));
        let feats: BTreeMap<usize, Vec<Vec<f64>>> =
            (0..7).map(|c| (c, vec![rot.matvec(etf.vector(c))])).collect();
        let r = nc_report(&feats, &etf).unwrap();
        assert!(r.nc2 < 1e-8, "{r:?}");
        assert!(r.nc3 > 1e-3, "{r:?}");
    }

    #[test]
    fn invariant_under_joint_rotation() {
        let etf = EtfClassifier::new(5);
        let mut rng = Rng::new(12);
        let feats = etf_features(&etf, &[0, 1, 2, 3], 6, 0.2, &mut rng);
        let base = nc_report(&feats, &etf).unwrap();
        let rot = random_rotation(5, &mut rng);
        let rotated: BTreeMap<usize, Vec<Vec<f64>>> = feats
            .iter()
            .map(|(&c, fs)| (c, fs.iter().map(|f| rot.matvec(f)).collect()))
            .collect();
        let rotated_w = etf.vectors().matmul(&rot.transpose());
        let r = nc_report_with(&rotated, &rotated_w).unwrap();
        assert!((r.nc1 - base.nc1).abs() < 1e-8 * base.nc1.max(1.0));
        assert!((r.nc2 - base.nc2).abs() < 1e-10);
        assert!((r.nc3 - base.nc3).abs() < 1e-10);
    }

    #[test]
    fn degenerate_inputs() {
        let etf = EtfClassifier::new(3);
        let one: BTreeMap<usize, Vec<Vec<f64>>> = [(0, vec![vec![1.0, 0.0, 0.0]])].into();
        assert!(matches!(nc_report(&one, &etf), Err(Error::TooFewClasses)));
        let same: BTreeMap<usize, Vec<Vec<f64>>> =
            [(0, vec![vec![1.0, 0.0, 0.0]]), (1, vec![vec![1.0, 0.0, 0.0]])].into();
        assert!(matches!(nc_report(&same, &etf), Err(Error::DegenerateClassMean { .. })));
    }
}
