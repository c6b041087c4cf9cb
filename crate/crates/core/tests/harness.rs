use std::collections::BTreeSet;

use earl_core::harness::{
    self, emit_csv, run, run_on, write_csv, write_svg, RunConfig, RunResult, StepRate, Variant,
    CSV_HEADER,
};
use earl_core::metrics::{self, OnlineHits, TracePoint};
use earl_core::net::Model;
use earl_core::numerics::{l2_normalize, Rng};
use earl_core::residual::predict;
use earl_core::stream::synth_glyphs;
use earl_core::EtfClassifier;

fn toy() -> RunConfig {
    RunConfig {
        n_classes: 2,
        per_class: 31,
        image_size: 8,
        n_tasks: 2,
        d: 4,
        hidden: vec![16],
        memory_capacity: 20,
        batch_size: 4,
        eval_period: 10,
        ..RunConfig::default()
    }
}

fn small() -> RunConfig {
    RunConfig {
        n_classes: 4,
        per_class: 60,
        image_size: 8,
        n_tasks: 2,
        d: 6,
        hidden: vec![32, 16],
        memory_capacity: 40,
        batch_size: 8,
        eval_period: 25,
        ..RunConfig::default()
    }
}

#[test]
fn toy_stream_trains_each_sample_at_most_ceil_q_times() {
    for (q, per_sample_cap) in [("1", 1), ("3", 3), ("\"1/4\"", 1)] {
        let text = format!(
            "n_classes = 2\nper_class = 31\nimage_size = 8\nn_tasks = 2\nd = 4\nhidden = [16]\n\
             memory_capacity = 20\nbatch_size = 4\neval_period = 10\niterations_per_sample = {q}\n"
        );
        let config = RunConfig::from_toml(&text).unwrap();
        let r = run(&config, 0).unwrap();
        assert_eq!(r.total_samples, 50);
        assert!(!r.trace.is_empty());
        assert!(r.steps_after_sample.iter().all(|&s| s <= per_sample_cap));
        assert_eq!(r.counters.train_steps, r.steps_after_sample.iter().sum::<usize>());
        assert_eq!(r.losses.len(), r.counters.train_steps);
    }
    let quarter = RunConfig {
        iterations_per_sample: StepRate::EveryN(4),
        ..toy()
    };
    assert_eq!(run(&quarter, 0).unwrap().counters.train_steps, 12);
}

#[test]
fn trace_positions_follow_eval_period() {
    let r = run(&toy(), 3).unwrap();
    let positions: Vec<usize> = r.trace.points.iter().map(|p| p.position).collect();
    assert_eq!(positions, vec![10, 20, 30, 40, 50]);
    assert_eq!(r.rows.len(), 5);
    assert_eq!(r.a_last, r.trace.points[4].accuracy);
}

#[test]
fn online_hits_cover_every_stream_sample_once() {
    let r = run(&small(), 1).unwrap();
    assert_eq!(r.online.len(), r.total_samples);
    assert!(r.online.iter().all(|h| h.evaluated == 1));
    assert_eq!(r.aoa, metrics::aoa(&r.online).unwrap());
    let last = r.rows.last().unwrap();
    assert!((last.aoa_running - r.aoa).abs() < 1e-15);
}

#[test]
fn flags_off_touch_no_prep_or_residual_code() {
    let off = run(&Variant::Vanilla.apply(&small()), 0).unwrap();
    assert_eq!(off.counters.prep_samples, 0);
    assert_eq!(off.counters.mapping_updates, 0);
    assert_eq!(off.counters.residual_stores, 0);
    assert_eq!(off.counters.corrections, 0);
    assert!(off.losses.iter().all(|l| l.loss_prep.is_none()));

    let on = run(&Variant::Full.apply(&small()), 0).unwrap();
    assert!(on.counters.prep_samples > 0);
    assert_eq!(on.counters.mapping_updates, 4);
    assert_eq!(on.counters.residual_stores, 4 * on.counters.train_steps);
    assert!(on.counters.corrections > 0);
}

#[test]
fn residual_correction_does_not_change_training() {
    let config = small();
    let ds = config.dataset(2).unwrap();
    let with = run_on(&Variant::Full.apply(&config), &ds, 2).unwrap();
    let without = run_on(&Variant::NoResidual.apply(&config), &ds, 2).unwrap();
    assert_eq!(with.losses, without.losses);
}

#[test]
fn same_config_and_seed_is_bit_identical() {
    let a = run(&small(), 5).unwrap();
    let b = run(&small(), 5).unwrap();
    assert!(a.same_outcome(&b));
    let c = run(&small(), 6).unwrap();
    assert!(!a.same_outcome(&c));
}

#[test]
fn gaussian_stream_has_no_boundaries() {
    let config = RunConfig {
        schedule: harness::ScheduleName::Gaussian,
        ..small()
    };
    let r = run(&config, 0).unwrap();
    assert!(r.task_boundaries.is_empty());
    assert_eq!(harness::post_boundary_loss(&r, 200), None);
}

#[test]
fn too_many_classes_for_d_is_rejected() {
    let config = RunConfig { d: 2, ..small() };
    assert!(run(&config, 0).is_err());
}

fn parse_csv(text: &str) -> Vec<Vec<Option<f64>>> {
    text.lines()
        .skip(1)
        .map(|line| {
            line.split(',')
                .map(|f| (!f.is_empty()).then(|| f.parse::<f64>().unwrap()))
                .collect()
        })
        .collect()
}

#[test]
fn csv_round_trip() {
    let r = run(&small(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.csv");
    emit_csv(&r, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    let rows = parse_csv(&text);
    assert_eq!(rows.len(), r.rows.len());
    for (parsed, row) in rows.iter().zip(&r.rows) {
        assert_eq!(parsed.len(), 8);
        let want = [
            Some(row.step as f64),
            Some(row.test_acc),
            Some(row.aoa_running),
            row.nc.map(|n| n.nc1),
            row.nc.map(|n| n.nc2),
            row.nc.map(|n| n.nc3),
            row.loss_real,
            row.loss_prep,
        ];
        for (got, want) in parsed.iter().zip(want) {
            match (got, want) {
                (Some(g), Some(w)) => assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0)),
                (None, None) => {}
                other => panic!("field mismatch {other:?}"),
            }
        }
    }
}

#[test]
fn csv_row_count_matches_trace() {
    let mut r = run(&toy(), 0).unwrap();
    r.rows.truncate(3);
    let mut out = Vec::new();
    write_csv(&r, &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), 4);

    r.rows.clear();
    let mut out = Vec::new();
    write_csv(&r, &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), format!("{CSV_HEADER}\n"));
}

fn constant_trace(mut r: RunResult, acc: f64) -> RunResult {
    for p in &mut r.trace.points {
        p.accuracy = acc;
    }
    r
}

fn polylines(svg: &str) -> Vec<(String, Vec<(f64, f64)>)> {
    let doc = roxmltree::Document::parse(svg).expect("well-formed SVG");
    doc.descendants()
        .filter(|n| n.has_tag_name("polyline"))
        .map(|n| {
            let pts = n
                .attribute("points")
                .unwrap()
                .split_whitespace()
                .map(|p| {
                    let (x, y) = p.split_once(',').unwrap();
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect();
            (n.attribute("stroke").unwrap().to_string(), pts)
        })
        .collect()
}

#[test]
fn svg_constant_trace_is_horizontal() {
    let r = constant_trace(run(&toy(), 0).unwrap(), 0.6);
    let svg = write_svg(&[r], &["flat".into()]).unwrap();
    let lines = polylines(&svg);
    assert_eq!(lines.len(), 1);
    let ys: BTreeSet<String> = lines[0].1.iter().map(|(_, y)| format!("{y:.2}")).collect();
    assert_eq!(ys.len(), 1);
    let xs: Vec<f64> = lines[0].1.iter().map(|(x, _)| *x).collect();
    assert!(xs.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn svg_two_traces_are_styled_apart_and_mark_boundaries() {
    let a = run(&toy(), 0).unwrap();
    let b = run(&toy(), 1).unwrap();
    let labels = vec!["EARL".to_string(), "-RC & PDT".to_string()];
    let svg = write_svg(&[a, b], &labels).unwrap();
    let lines = polylines(&svg);
    assert_eq!(lines.len(), 2);
    assert_ne!(lines[0].0, lines[1].0);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let markers = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("task-boundary"))
        .count();
    assert_eq!(markers, 1);
    let texts: Vec<&str> = doc.descendants().filter_map(|n| n.text()).collect();
    assert!(texts.contains(&"-RC & PDT"));
}

#[test]
fn svg_needs_a_result() {
    assert!(write_svg(&[], &[]).is_err());
}

#[test]
fn untrained_model_is_at_chance_online() {
    let ds = synth_glyphs(10, 125, 12, 1.0, &mut Rng::new(11)).unwrap();
    let etf = EtfClassifier::new(16);
    let seen: BTreeSet<usize> = (0..10).collect();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    Rng::new(12).shuffle(&mut order);
    let mut accs = Vec::new();
    for seed in 0..5 {
        let model = Model::new(ds.input_len(), &[256, 128], 16, &mut Rng::new(seed));
        let hits: Vec<OnlineHits> = order[..1000]
            .iter()
            .map(|&i| {
                let f = model.features(&[&ds.images[i].data]).unwrap().pop().unwrap();
                let h = l2_normalize(&f).unwrap();
                let y = predict(&etf, &h, &seen).unwrap();
                OnlineHits {
                    evaluated: 1,
                    correct: usize::from(y == ds.labels[i]),
                }
            })
            .collect();
        accs.push(metrics::aoa(&hits).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.1).abs() <= 0.05, "untrained online accuracy {accs:?}");
}

#[test]
fn trace_points_report_seen_classes_only() {
    let r = run(&small(), 0).unwrap();
    let first: &TracePoint = &r.trace.points[0];
    // first task holds classes 0 and 1
    assert!(first.per_class.keys().all(|&c| c < 2));
    let last = r.trace.points.last().unwrap();
    assert_eq!(last.per_class.len(), 4);
}

#[test]
fn last_trace_point_matches_standalone_evaluation() {
    for variant in [Variant::Full, Variant::Vanilla] {
        let config = variant.apply(&small());
        let ds = config.dataset(4).unwrap();
        let r = run_on(&config, &ds, 4).unwrap();
        let etf = EtfClassifier::new(config.d);
        let seen: BTreeSet<usize> = (0..4).collect();
        let (mut correct, mut total) = (0usize, 0usize);
        let mut per_class = std::collections::BTreeMap::<usize, (usize, usize)>::new();
        for &i in &ds.test {
            let f = r.model.features(&[&ds.images[i].data]).unwrap().pop().unwrap();
            let mut h = l2_normalize(&f).unwrap();
            if config.use_residual_correction {
                h = r.residuals.correct(&h, config.correction()).unwrap();
            }
            let y = ds.labels[i];
            let hit = usize::from(predict(&etf, &h, &seen).unwrap() == y);
            correct += hit;
            total += 1;
            let e = per_class.entry(y).or_default();
            e.0 += hit;
            e.1 += 1;
        }
        assert_eq!(r.a_last, correct as f64 / total as f64);
        let last = r.trace.points.last().unwrap();
        for (c, (hit, n)) in per_class {
            assert_eq!(last.per_class[&c], hit as f64 / n as f64);
        }
    }
}
