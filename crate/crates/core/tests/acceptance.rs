//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! `cargo test --release --test acceptance -- --nocapture`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2s_stereo::bench::run_bench;
use s2s_stereo::check::{run_suite, CheckOptions, SuiteReport};
use s2s_stereo::config::{BenchConfig, Preset, RunConfig};
use s2s_stereo::data::synth_rds;
use s2s_stereo::params::ParameterStore;
use s2s_stereo::train::{hits_at_disparity, train_loop, EvalRecord, TrainOutputs};

// Training targets on the 32 held-out toy samples.
const MAX_THREE_PX_ERROR: f64 = 10.0;
const MAX_EPE: f64 = 1.5;
const MIN_OCC_IOU: f64 = 0.6;
const TRAIN_STEPS: usize = 600;
const TRAIN_BUDGET_S: f64 = 30.0 * 60.0;

// Range generalization: supervision stops below D_CAP, probes sit at PROBE_DISPARITY.
const D_CAP: f64 = 8.0;
const PROBE_DISPARITY: usize = 12;
const PROBE_SCENES: u64 = 16;
const PROBE_TOLERANCE_PX: f64 = 3.0;
const MIN_PROBE_HIT_RATE: f64 = 0.5;

// Memory model agreement and stride scaling.
const MEMORY_MODEL_TOLERANCE: f64 = 0.05;
const STRIDE_SCALING_TOLERANCE: f64 = 0.15;
// Divisible by every stride so that strided rows are exact.
const BENCH_HEIGHT: usize = 24;

struct Line {
    criterion: usize,
    passed: bool,
    detail: String,
}

fn suites(criterion: usize, names: &[&str], budget_s: Option<f64>) -> Line {
    let opts = CheckOptions::default();
    let reports: Vec<SuiteReport> = names.iter().map(|n| run_suite(n, &opts).unwrap()).collect();
    let seconds: f64 = reports.iter().map(|r| r.seconds).sum();
    let mut passed = reports.iter().all(|r| r.passed);
    let mut parts: Vec<String> = reports
        .iter()
        .map(|r| {
            let mut s = format!("{} {:.2e}/{:.0e} over {}", r.name, r.max_error, r.tolerance, r.cases);
            if let Some(c) = &r.counterexample {
                s.push_str(&format!(" [{c}]"));
            }
            s
        })
        .collect();
    if let Some(b) = budget_s {
        passed &= seconds < b;
        parts.push(format!("{seconds:.1} s < {b} s"));
    }
    Line {
        criterion,
        passed,
        detail: parts.join("; "),
    }
}

fn train_toy(d_cap: Option<f64>) -> (ParameterStore<f32>, RunConfig, EvalRecord, f64) {
    let mut cfg = RunConfig::preset(Preset::Toy);
    cfg.train.steps = TRAIN_STEPS;
    cfg.train.d_cap = d_cap;
    let d = &cfg.data;
    let train = d.sampler.samples(d.train_seed, d.train_count).unwrap();
    let val = d.sampler.samples(d.val_seed, d.val_count).unwrap();
    let mut store: ParameterStore<f32> = cfg.model.init(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed)).unwrap();
    let started = Instant::now();
    let outcome = train_loop(&mut store, &cfg.model, &cfg.train, &cfg.weights, &train, &val, &TrainOutputs::default()).unwrap();
    let seconds = started.elapsed().as_secs_f64();
    let last = outcome.records.last().unwrap().clone();
    (store, cfg, last, seconds)
}

fn training() -> Line {
    let (_, cfg, r, seconds) = train_toy(None);
    let (e, epe, iou) = (r.three_px_error.unwrap(), r.epe.unwrap(), r.occ_iou.unwrap());
    let passed = cfg.data.train_count == 128
        && cfg.data.val_count == 32
        && e <= MAX_THREE_PX_ERROR
        && epe <= MAX_EPE
        && iou >= MIN_OCC_IOU
        && seconds <= TRAIN_BUDGET_S;
    Line {
        criterion: 6,
        passed,
        detail: format!("{TRAIN_STEPS} steps: 3 px {e:.2} %, EPE {epe:.3}, IOU {iou:.3}, {seconds:.0} s"),
    }
}

fn range_generalization() -> Line {
    let (store, cfg, r, _) = train_toy(Some(D_CAP));
    let probes: Vec<_> = (0..PROBE_SCENES)
        .map(|k| synth_rds(&cfg.data.sampler.probe(5000 + k, PROBE_DISPARITY).unwrap()).unwrap())
        .collect();
    let (hits, total) =
        hits_at_disparity(&store, &cfg.model, &probes, PROBE_DISPARITY as f64, PROBE_TOLERANCE_PX).unwrap();
    let rate = hits as f64 / total.max(1) as f64;
    Line {
        criterion: 7,
        passed: total > 0 && rate >= MIN_PROBE_HIT_RATE,
        detail: format!(
            "d_cap {D_CAP}: {hits}/{total} pixels at disparity {PROBE_DISPARITY} within {PROBE_TOLERANCE_PX} px ({:.1} %); in-range 3 px {:.2} %",
            100.0 * rate,
            r.three_px_error.unwrap()
        ),
    }
}

fn memory() -> Line {
    let model = RunConfig::preset(Preset::Toy).model.transformer;
    let bench = BenchConfig {
        height: BENCH_HEIGHT,
        repetitions: 1,
        ..Default::default()
    };
    let rows = run_bench::<f32>(&model, &bench, 0).unwrap();
    let mut passed = rows.len() == 9 && model.layers >= 2;
    let (mut model_err, mut scale_err) = (0.0f64, 0.0f64);
    for row in &rows {
        let Some(p) = &row.point else {
            passed = false;
            continue;
        };
        let predicted = row.predicted_bits as f64 / 8.0;
        model_err = model_err.max((p.eager_peak_bytes as f64 - predicted).abs() / predicted);
        passed &= p.recompute_peak_bytes < p.eager_peak_bytes;
        let base = rows.iter().find(|b| b.i_w == row.i_w && b.s == 1).and_then(|b| b.point.as_ref());
        if let Some(b) = base {
            let ratio = p.eager_peak_bytes as f64 / b.eager_peak_bytes as f64;
            scale_err = scale_err.max((ratio * (row.s as f64).powi(3) - 1.0).abs());
        }
    }
    passed &= model_err <= MEMORY_MODEL_TOLERANCE && scale_err <= STRIDE_SCALING_TOLERANCE;
    let memory_suite = suites(8, &["memory_model"], None);
    Line {
        criterion: 8,
        passed: passed && memory_suite.passed,
        detail: format!(
            "grid 64/128/256 × 1/2/3 at height {BENCH_HEIGHT}: model error {model_err:.3}, 1/s³ deviation {scale_err:.3}, recompute peak below eager; {}",
            memory_suite.detail
        ),
    }
}

#[test]
fn acceptance() {
    let lines = vec![
        suites(1, &["attention_equivalence", "attention_position_count"], Some(60.0)),
        suites(2, &["gradients_ops", "gradients_pipeline"], Some(300.0)),
        suites(3, &["sinkhorn_10", "sinkhorn_200", "sinkhorn_assignment"], Some(60.0)),
        suites(4, &["mask_forbidden", "uniqueness"], None),
        suites(5, &["regression_hand", "regression_window"], None),
        training(),
        range_generalization(),
        memory(),
        suites(9, &["recompute"], None),
        suites(10, &["formats"], None),
    ];
    for l in &lines {
        println!("{} criterion {:>2}: {}", if l.passed { "PASS" } else { "FAIL" }, l.criterion, l.detail);
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.passed).map(|l| l.criterion).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
