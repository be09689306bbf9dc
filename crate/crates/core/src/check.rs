//! Verification suites: finite-difference gradients, attention equivalence,
//! Sinkhorn marginals and assignments, masking, regression, file formats,
//! recompute equivalence and the attention memory model.

use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check_params_with, grad_check_with, ExecMode, Graph, Mask, Var};
use crate::bench::{bench_point, MemoryModel};
use crate::config::{Preset, RunConfig};
use crate::data::{decode_pfm, decode_pgm, encode_pfm, encode_pgm, synth_rds, SceneSampler, StereoSample};
use crate::error::{Error, Result};
use crate::features::extract;
use crate::head::{regress_graph, regress_raw, upsample_full, window_weights};
use crate::model::{forward, standardize, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};
use crate::train::{loss_and_gradients, sample_loss, LossWeights};
use crate::transformer::{
    attention_report, attention_scores_efficient, attention_scores_naive, build_attention_mask, sample_stride,
    PosTerms, RelPosTable, TransformerConfig,
};
use crate::transport::{
    assignment_bruteforce, augment_dustbins, dustbin_marginals, sinkhorn, sinkhorn_graph, OTConfig,
};

/// Every suite in execution order.
pub const SUITES: &[&str] = &[
    "gradients_ops",
    "gradients_pipeline",
    "attention_equivalence",
    "attention_position_count",
    "sinkhorn_10",
    "sinkhorn_200",
    "sinkhorn_assignment",
    "mask_forbidden",
    "uniqueness",
    "regression_hand",
    "regression_window",
    "formats",
    "recompute",
    "memory_model",
];

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckOptions {
    pub seed: u64,
    /// Corrupts the multiplication gradient in every analytic pass.
    pub fault_injection: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    /// Largest error over all cases, in the suite's own unit.
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
    /// Seed and description of the worst failing case.
    pub counterexample: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

impl CheckReport {
    pub fn suite(&self, name: &str) -> Option<&SuiteReport> {
        self.suites.iter().find(|s| s.name == name)
    }
}

/// Running maximum of case errors against one tolerance.
struct Tally {
    tolerance: f64,
    max_error: f64,
    cases: usize,
    worst_failure: Option<(f64, String)>,
}

impl Tally {
    fn new(tolerance: f64) -> Self {
        Self {
            tolerance,
            max_error: 0.0,
            cases: 0,
            worst_failure: None,
        }
    }

    fn record(&mut self, error: f64, seed: u64, what: impl FnOnce() -> String) {
        self.cases += 1;
        // NaN counts as a failure larger than anything finite.
        let e = if error.is_nan() { f64::INFINITY } else { error };
        self.max_error = self.max_error.max(e);
        if e > self.tolerance && self.worst_failure.as_ref().map_or(true, |(w, _)| e > *w) {
            self.worst_failure = Some((e, format!("seed {seed}: {}", what())));
        }
    }

    fn finish(self, name: &str, started: Instant) -> SuiteReport {
        SuiteReport {
            name: name.to_string(),
            passed: self.worst_failure.is_none() && self.cases > 0,
            max_error: self.max_error,
            tolerance: self.tolerance,
            cases: self.cases,
            counterexample: self.worst_failure.map(|(_, s)| s),
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

fn case_seed(base: u64, suite: u64, case: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (suite << 32) ^ case as u64
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sizes agree")
}

/// Runs one suite by name.
pub fn run_suite(name: &str, opts: &CheckOptions) -> Result<SuiteReport> {
    let started = Instant::now();
    let tally = match name {
        "gradients_ops" => gradients_ops(opts)?,
        "gradients_pipeline" => gradients_pipeline(opts)?,
        "attention_equivalence" => attention_equivalence(opts)?,
        "attention_position_count" => attention_position_count(opts)?,
        "sinkhorn_10" => sinkhorn_marginals(opts, 10, 1e-3)?,
        "sinkhorn_200" => sinkhorn_marginals(opts, 200, 1e-6)?,
        "sinkhorn_assignment" => sinkhorn_assignment(opts)?,
        "mask_forbidden" => mask_forbidden(opts)?,
        "uniqueness" => uniqueness(opts)?,
        "regression_hand" => regression_hand()?,
        "regression_window" => regression_window(opts)?,
        "formats" => formats(opts)?,
        "recompute" => recompute(opts)?,
        "memory_model" => memory_model()?,
        other => {
            return Err(Error::Config(format!(
                "unknown suite {other:?} (known: {})",
                SUITES.join(", ")
            )))
        }
    };
    Ok(tally.finish(name, started))
}

/// Runs every suite; the report passes only if all suites pass.
pub fn run_all(opts: &CheckOptions) -> Result<CheckReport> {
    let suites = SUITES.iter().map(|s| run_suite(s, opts)).collect::<Result<Vec<_>>>()?;
    Ok(CheckReport {
        passed: suites.iter().all(|s| s.passed),
        suites,
    })
}

/// `Σ w ⊙ y` with fixed random weights.
fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y).to_vec(), -1.0, 1.0);
    let w = g.input(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpCase = fn(&mut Graph<'_, f64>, Var, &[usize], u64) -> Result<Var>;
type ShapeOf = fn(&mut ChaCha8Rng) -> Vec<usize>;

fn op_cases() -> Vec<(&'static str, OpCase, ShapeOf)> {
    vec![
        ("arithmetic", |g, x, _, _| {
            let c = g.add_scalar(x, 3.0)?;
            let a = g.mul(x, x)?;
            let b = g.sub(a, x)?;
            let d = g.div(b, c)?;
            g.add(d, x)
        }, |r| vec![r.gen_range(1..5), r.gen_range(1..5)]),
        ("exp_log_scale", |g, x, _, _| {
            let e = g.exp(x)?;
            let s = g.scale(e, 0.7)?;
            let l = g.add_scalar(s, 1.0)?;
            g.log(l)
        }, |r| vec![r.gen_range(1..7)]),
        ("relu_sigmoid", |g, x, _, _| {
            let s = g.sigmoid(x)?;
            let r = g.relu(x)?;
            g.add(s, r)
        }, |r| vec![r.gen_range(1..4), r.gen_range(1..6)]),
        ("bias_mean", |g, x, s, _| {
            let n = *s.last().expect("rank ≥ 1");
            let b = g.input(Tensor::from_f64(vec![n], &(0..n).map(|i| i as f64 * 0.1).collect::<Vec<_>>())?)?;
            let y = g.add_bias_last(x, b)?;
            let y2 = g.mul(y, y)?;
            let m = g.mean(y2)?;
            g.reshape(m, vec![1])
        }, |r| vec![r.gen_range(1..4), r.gen_range(1..5)]),
        ("matmul_transpose", |g, x, s, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xt = g.transpose_last2(x)?;
            let y = g.matmul(x, xt)?;
            let w = g.input(rand_tensor(&mut rng, vec![s[2], 2], -1.0, 1.0))?;
            let z = g.matmul(x, w)?;
            g.matmul(y, z)
        }, |r| vec![r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)]),
        ("softmax_masked", |g, x, s, _| {
            let mask = Rc::new(build_attention_mask(s[1]));
            g.softmax_last(x, Some(mask))
        }, |r| {
            let m = r.gen_range(1..6);
            vec![r.gen_range(1..3), m, m]
        }),
        ("logsumexp_expand", |g, x, s, _| {
            let l = g.logsumexp_last(x)?;
            let e = g.add_expand_last(x, l)?;
            let c = g.logsumexp_last(e)?;
            let c2 = g.reshape(c, vec![s[0], s[1]])?;
            let xt = g.transpose_last2(x)?;
            g.add_expand_mid(xt, c2)
        }, |r| {
            let m = r.gen_range(1..5);
            vec![r.gen_range(1..3), m, m]
        }),
        ("slice_concat", |g, x, s, _| {
            let n = s[1];
            let a = g.slice_last(x, 0, n / 2)?;
            let b = g.slice_last(x, n / 2, n - n / 2)?;
            let bb = g.mul(b, b)?;
            let c = g.concat_last(&[bb, a])?;
            let c0 = g.concat0(&[c, x])?;
            g.exp(c0)
        }, |r| vec![r.gen_range(1..4), r.gen_range(2..7)]),
        ("masked_fill", |g, x, s, _| {
            let mask = Rc::new(Mask::from_fn(s[1], s[2], |i, j| (i + j) % 3 != 0));
            let y = g.masked_fill(x, mask, 4.0)?;
            g.mul(y, y)
        }, |r| vec![r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4)]),
        ("conv2d", |g, x, s, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = g.input(rand_tensor(&mut rng, vec![2, s[0], 3, 3], -1.0, 1.0))?;
            let b = g.input(rand_tensor(&mut rng, vec![2], -1.0, 1.0))?;
            g.conv2d(x, w, b)
        }, |r| vec![r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..6)]),
        ("relative_attention", |g, q, s, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, c) = (s[1], s[2]);
            let k = g.input(rand_tensor(&mut rng, s.to_vec(), -1.0, 1.0))?;
            let table = g.input(RelPosTable::new(w, c)?.tensor())?;
            let wq = g.leaf(rand_tensor(&mut rng, vec![c, c], -1.0, 1.0))?;
            let wk = g.input(rand_tensor(&mut rng, vec![c, c], -1.0, 1.0))?;
            attention_scores_efficient(g, q, k, Some(PosTerms { table, wq, wk }))
        }, |r| vec![r.gen_range(1..3), r.gen_range(2..6), r.gen_range(1..4)]),
        ("sinkhorn_dustbins", |g, x, s, _| {
            let n = s[1];
            let phi = g.input(Tensor::scalar(0.3).reshape(vec![1])?)?;
            let aug = augment_dustbins(g, x, phi)?;
            let marg = dustbin_marginals(n);
            sinkhorn_graph(g, aug, &marg, &marg, &OTConfig::default())
        }, |r| {
            let n = r.gen_range(2..5);
            vec![1, n, n]
        }),
        ("regression", |g, x, s, _| {
            // Strictly positive coupling entries.
            let t = g.exp(x)?;
            let (d, o) = regress_graph(g, t, s[0] + 1)?;
            g.add(d, o)
        }, |r| {
            let m = r.gen_range(3..7);
            vec![r.gen_range(1..3), m, m]
        }),
        ("sample_upsample", |g, x, s, _| {
            let st = 2;
            let lines = sample_stride(g, x, st)?;
            let sum = g.sum(lines)?;
            let hs = g.shape(lines)[0];
            let ws = g.shape(lines)[1];
            let first = g.reshape(lines, vec![hs * ws, s[0]])?;
            let col = g.slice_last(first, 0, 1)?;
            let plane = g.reshape(col, vec![hs, ws])?;
            let up = upsample_full(g, plane, st, s[1], s[2])?;
            let total = g.sum(up)?;
            g.add(total, sum)
        }, |r| vec![r.gen_range(1..3), r.gen_range(3..7), r.gen_range(3..8)]),
    ]
}

fn gradients_ops(opts: &CheckOptions) -> Result<Tally> {
    let mut tally = Tally::new(1e-4);
    for (c, (name, build, shape_of)) in op_cases().into_iter().enumerate() {
        for trial in 0..5 {
            let seed = case_seed(opts.seed, 1, c * 100 + trial);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = shape_of(&mut rng);
            let point = rand_tensor(&mut rng, shape.clone(), -1.0, 1.0);
            let (build_seed, proj_seed) = (rng.gen(), rng.gen());
            let r = grad_check_with(
                |g, x| {
                    let y = build(g, x, &shape, build_seed)?;
                    project(g, y, proj_seed)
                },
                &point,
                1e-5,
                opts.fault_injection,
            )?;
            tally.record(r.max_rel_error, seed, || {
                format!(
                    "{name} shape {shape:?}: coordinate {} analytic {} numeric {}",
                    r.worst, r.analytic[r.worst], r.numeric[r.worst]
                )
            });
        }
    }
    Ok(tally)
}

/// Adds uniform noise of amplitude `amp` to every parameter, so that layers
/// initialized to exact zeros (output projections) carry signal.
pub fn jitter<F: Scalar>(store: &mut ParameterStore<F>, amp: f64, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
    for n in names {
        for v in store.by_name_mut(&n).expect("listed name").data_mut() {
            *v = F::from_f64(v.as_f64() + rng.gen_range(-amp..amp));
        }
    }
}

fn toy_sample(height: usize, width: usize, max_disparity: usize, seed: u64) -> Result<StereoSample> {
    let sampler = SceneSampler {
        height,
        width,
        min_disparity: 1,
        max_disparity,
        max_layers: 1,
        min_size: height.min(width) / 2,
        max_size: height.min(width) * 3 / 4,
        ..Default::default()
    };
    synth_rds(&sampler.sample(seed)?)
}

fn toy_model() -> ModelConfig {
    RunConfig::preset(Preset::Toy).model
}

/// Smallest gradient magnitude sampled by the pipeline gradient check.
pub const PIPELINE_GRAD_FLOOR: f64 = 1e-5;

fn gradients_pipeline(opts: &CheckOptions) -> Result<Tally> {
    let mut tally = Tally::new(1e-4);
    let model = toy_model();
    for c in 0..2 {
        let seed = case_seed(opts.seed, 2, c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = toy_sample(8, 16, 4, rng.gen())?;
        let mut store: ParameterStore<f64> = model.init(&mut rng)?;
        jitter(&mut store, 0.05, &mut rng);
        let weights = LossWeights::default();
        // Central differences at eps 1e-5 carry ~1e-10 of absolute roundoff,
        // so coordinates are drawn where the relative error is meaningful.
        let (_, _, grads) = loss_and_gradients(&store, &sample, &model, &weights, None, ExecMode::Eager)?;
        let eligible: Vec<_> = store
            .iter()
            .zip(&grads)
            .flat_map(|((id, _, _), g)| {
                let g = g.as_ref().map(|t| t.data().to_vec()).unwrap_or_default();
                g.into_iter()
                    .enumerate()
                    .filter(|(_, v)| v.abs() >= PIPELINE_GRAD_FLOOR)
                    .map(move |(i, _)| (id, i))
            })
            .collect();
        let selection: Vec<_> = eligible.choose_multiple(&mut rng, 25).copied().collect();
        let r = grad_check_params_with(
            |g| Ok(sample_loss(g, &sample, &model, &weights, None)?.total),
            &store,
            &selection,
            1e-5,
            opts.fault_injection,
        )?;
        tally.record(r.max_rel_error, seed, || {
            let (id, i) = selection[r.worst];
            format!(
                "{}[{i}]: analytic {} numeric {}",
                store.name(id),
                r.analytic[r.worst],
                r.numeric[r.worst]
            )
        });
    }
    Ok(tally)
}

/// One random attention instance: per-head efficient and naive scores and
/// the number of projected offset vectors each path materialized.
struct AttentionCase {
    w: usize,
    heads: usize,
    max_rel_error: f64,
    efficient_vectors: usize,
    naive_vectors: usize,
}

fn attention_case(seed: u64) -> Result<AttentionCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rng.gen_range(2..=64);
    let heads = *[1, 2, 4].choose(&mut rng).expect("non-empty");
    let c_h = rng.gen_range(2..=6);
    let rows = rng.gen_range(1..=2);
    let table = RelPosTable::new(w, heads * c_h)?.tensor::<f64>();
    let store = ParameterStore::<f64>::new();
    let mut g = Graph::new(&store).frozen();
    let mut worst: f64 = 0.0;
    let mut naive_vectors = 0;
    for h in 0..heads {
        let q = rand_tensor(&mut rng, vec![rows, w, c_h], -1.0, 1.0);
        let k = rand_tensor(&mut rng, vec![rows, w, c_h], -1.0, 1.0);
        let wq = rand_tensor(&mut rng, vec![c_h, c_h], -1.0, 1.0);
        let wk = rand_tensor(&mut rng, vec![c_h, c_h], -1.0, 1.0);
        let slice: Vec<f64> = table
            .data()
            .chunks(heads * c_h)
            .flat_map(|r| r[h * c_h..(h + 1) * c_h].iter().copied())
            .collect();
        let t_h = Tensor::new(vec![2 * w - 1, c_h], slice)?;
        let pos = PosTerms {
            table: g.input(t_h.clone())?,
            wq: g.input(wq.clone())?,
            wk: g.input(wk.clone())?,
        };
        let (qv, kv) = (g.input(q.clone())?, g.input(k.clone())?);
        let eff = attention_scores_efficient(&mut g, qv, kv, Some(pos))?;
        let eff = g.value(eff).clone();
        for r in 0..rows {
            let line = |t: &Tensor<f64>| Tensor::new(vec![w, c_h], t.data()[r * w * c_h..(r + 1) * w * c_h].to_vec());
            let (naive, n) = attention_scores_naive(&line(&q)?, &line(&k)?, Some((&t_h, &wq, &wk)))?;
            naive_vectors += n;
            let e = &eff.data()[r * w * w..(r + 1) * w * w];
            let scale = naive.max_abs().max(1e-12);
            let diff = e.iter().zip(naive.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(diff / scale);
        }
    }
    let efficient_vectors = g.tracker().borrow().position_vectors();
    Ok(AttentionCase {
        w,
        heads,
        max_rel_error: worst,
        efficient_vectors,
        naive_vectors,
    })
}

fn attention_equivalence(opts: &CheckOptions) -> Result<Tally> {
    let mut tally = Tally::new(1e-5);
    for c in 0..60 {
        let seed = case_seed(opts.seed, 3, c);
        let a = attention_case(seed)?;
        tally.record(a.max_rel_error, seed, || format!("W_s = {}, N_h = {}", a.w, a.heads));
    }
    Ok(tally)
}

/// The efficient path projects `2W_s − 1` offsets per head and line batch;
/// the error is the absolute deviation from that count.
fn attention_position_count(opts: &CheckOptions) -> Result<Tally> {
    let mut tally = Tally::new(0.0);
    for c in 0..20 {
        let seed = case_seed(opts.seed, 4, c);
        let a = attention_case(seed)?;
        let expected = a.heads * (2 * a.w - 1);
        tally.record((a.efficient_vectors as f64 - expected as f64).abs(), seed, || {
            format!(
                "W_s = {}, N_h = {}: {} vectors, expected {expected} (naive path: {})",
                a.w, a.heads, a.efficient_vectors, a.naive_vectors
            )
        });
    }
    Ok(tally)
}

fn sinkhorn_marginals(opts: &CheckOptions, iterations: usize, tolerance: f64) -> Result<Tally> {
    let mut tally = Tally::new(tolerance);
    let cfg = OTConfig {
        gamma: 1.0,
        iterations,
        log_domain: true,
    };
    for c in 0..50 {
        let seed = case_seed(opts.seed, 5 + iterations as u64, c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = rand_tensor(&mut rng, vec![5, 5], 0.0, 1.0);
        let a = vec![0.2; 5];
        let t = sinkhorn(&cost, &a, &a, &cfg)?;
        let (ra, cb) = t.marginal_errors();
        tally.record(ra + cb, seed, || format!("row error {ra:e}, column error {cb:e}"));
    }
    Ok(tally)
}

/// Row-argmax of the coupling at small γ against the exact assignment on
/// costs whose optimum beats every other permutation by a clear margin.
/// The error counts rows where the two disagree.
fn sinkhorn_assignment(opts: &CheckOptions) -> Result<Tally> {
    let mut tally = Tally::new(0.0);
    let cfg = OTConfig {
        gamma: 0.05,
        iterations: 200,
        log_domain: true,
    };
    for c in 0..20 {
        let seed = case_seed(opts.seed, 6, c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=5);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut cost = rand_tensor(&mut rng, vec![n, n], 1.0, 2.0);
        for (i, &j) in perm.iter().enumerate() {
            cost.data_mut()[i * n + j] = rng.gen_range(0.0..0.3);
        }
        let (best, _) = assignment_bruteforce(&cost)?;
        let marg = vec![1.0 / n as f64; n];
        let t = sinkhorn(&cost, &marg, &marg, &cfg)?;
        let argmax: Vec<usize> = t
            .t
            .data()
            .chunks(n)
            .map(|r| (0..n).fold(0, |k, j| if r[j] > r[k] { j } else { k }))
            .collect();
        let wrong = argmax.iter().zip(&best).filter(|(a, b)| a != b).count();
        tally.record(wrong as f64, seed, || format!("n = {n}: argmax {argmax:?}, optimum {best:?}"));
    }
    Ok(tally)
}

/// Trained-looking parameters: the toy initialization plus noise.
fn jittered_toy(seed: u64) -> Result<(ModelConfig, ParameterStore<f64>, StereoSample)> {
    let model = toy_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store: ParameterStore<f64> = model.init(&mut rng)?;
    jitter(&mut store, 0.2, &mut rng);
    let sample = toy_sample(8, 24, 6, rng.gen())?;
    Ok((model, store, sample))
}

/// Final cross-attention mass on pairs with `j > i`, summed over heads,
/// rows and sources; must be exactly 0.
fn mask_forbidden(opts: &CheckOptions) -> Result<Tally> {
    let mut tally = Tally::new(0.0);
    for c in 0..5 {
        let seed = case_seed(opts.seed, 7, c);
        let (model, store, sample) = jittered_toy(seed)?;
        let mut g = Graph::new(&store).frozen();
        let (l, r) = sample.images::<f64>()?;
        let (l, r) = (g.input(standardize(&l))?, g.input(standardize(&r))?);
        let fl = extract(&mut g, l, &model.extractor)?;
        let fr = extract(&mut g, r, &model.extractor)?;
        let s = model.transformer.stride;
        let (ll, rl) = (sample_stride(&mut g, fl, s)?, sample_stride(&mut g, fr, s)?);
        let rep = attention_report(&mut g, ll, rl, &model.transformer, true)?;
        let last = rep
            .layers
            .get(&(model.transformer.layers - 1))
            .and_then(|m| m.get("cross_final"))
            .ok_or_else(|| Error::Contract("final cross attention missing from report".into()))?;
        let w = last.w_s;
        let alpha = last.attention.as_ref().expect("requested");
        let mass: f64 = alpha
            .chunks(w)
            .enumerate()
            .map(|(row, a)| {
                let i = row % w;
                a[i + 1..].iter().map(|v| v.abs()).sum::<f64>()
            })
            .sum();
        // The coupling must not move mass onto forbidden pairs either.
        let mut g = Graph::new(&store).frozen();
        let (l, r) = sample.images::<f64>()?;
        let (l, r) = (g.input(l)?, g.input(r)?);
        let v = forward(&mut g, l, r, &model)?;
        let t = g.value(v.coupling);
        let m = t.shape()[1];
        let coupled: f64 = t
            .data()
            .chunks(m)
            .enumerate()
            .map(|(row, a)| {
                let i = row % m;
                if i + 1 >= m { 0.0 } else { a[i + 1..m - 1].iter().map(|v| v.abs()).sum::<f64>() }
            })
            .sum();
        tally.record(mass + coupled, seed, || {
            format!("attention mass {mass:e}, coupling mass {coupled:e} on forbidden pairs")
        });
    }
    Ok(tally)
}

/// Non-dustbin column masses of the unscaled coupling `T` against their
/// marginal; the error is the largest excess.
fn uniqueness(opts: &CheckOptions) -> Result<Tally> {
    let mut tally = Tally::new(1e-3);
    for c in 0..5 {
        let seed = case_seed(opts.seed, 8, c);
        let (model, store, sample) = jittered_toy(seed)?;
        let mut g = Graph::new(&store).frozen();
        let (l, r) = sample.images::<f64>()?;
        let (l, r) = (g.input(l)?, g.input(r)?);
        let v = forward(&mut g, l, r, &model)?;
        let t = g.value(v.coupling);
        let m = t.shape()[1];
        let ws = m - 1;
        let scale = 2.0 * ws as f64;
        let marginal = dustbin_marginals(ws)[0];
        let mut excess: f64 = f64::NEG_INFINITY;
        for b in t.data().chunks(m * m) {
            for j in 0..ws {
                let col: f64 = (0..m).map(|i| b[i * m + j]).sum::<f64>() / scale;
                excess = excess.max(col - marginal);
            }
        }
        tally.record(excess.max(0.0), seed, || format!("column mass exceeds its marginal by {excess:e}"));
    }
    Ok(tally)
}

fn row_coupling(w: usize, row: usize, entries: &[(usize, f64)]) -> Tensor<f64> {
    let m = w + 1;
    let mut t = vec![0.0; m * m];
    for i in 0..w {
        t[i * m + w] = 1.0;
    }
    let mut rest = 1.0;
    for &(j, v) in entries {
        t[row * m + j] = v;
        rest -= v;
    }
    t[row * m + w] = rest;
    Tensor::new(vec![m, m], t).expect("sizes agree")
}

/// Delta, dustbin and windowed cases with exact expected outputs.
fn regression_hand() -> Result<Tally> {
    let mut tally = Tally::new(1e-12);
    let cases: [(&str, Tensor<f64>, usize, f64, f64); 3] = [
        ("delta at offset 3", row_coupling(8, 5, &[(2, 1.0)]), 5, 3.0, 0.0),
        ("all mass in the dustbin", row_coupling(8, 5, &[]), 5, 0.0, 1.0),
        ("window 0.2/0.5/0.1", row_coupling(8, 4, &[(2, 0.2), (3, 0.5), (4, 0.1)]), 4, 1.125, 0.2),
    ];
    for (name, t, i, d, o) in cases {
        let r = regress_raw(&t, 1)?;
        let (gd, go) = (r.disparity.data()[i], r.occlusion.data()[i]);
        let err = (gd - d).abs().max((go - o).abs());
        tally.record(err, 0, || format!("{name}: disparity {gd} occlusion {go}, expected {d} and {o}"));
    }
    Ok(tally)
}

fn regression_window(opts: &CheckOptions) -> Result<Tally> {
    let mut tally = Tally::new(1e-6);
    for c in 0..50 {
        let seed = case_seed(opts.seed, 9, c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(3..20);
        let batch = rng.gen_range(1..4);
        let mut t = rand_tensor(&mut rng, vec![batch, m, m], 0.0, 1.0);
        for row in t.data_mut().chunks_mut(m) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let windows = window_weights(&t)?;
        let err = windows
            .iter()
            .flatten()
            .map(|(_, w)| (w.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        tally.record(err, seed, || format!("{batch}×{m}×{m} coupling"));
    }
    Ok(tally)
}

/// Round trips of PFM, checkpoint and PGM plus a big-endian PFM fixture;
/// the error counts mismatching cases.
fn formats(opts: &CheckOptions) -> Result<Tally> {
    let mut tally = Tally::new(0.0);
    for c in 0..20 {
        let seed = case_seed(opts.seed, 10, c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let map = Tensor::<f32>::new(vec![h, w], (0..h * w).map(|_| rng.gen_range(-1e3f32..1e3)).collect())?;
        let back = decode_pfm(&encode_pfm(&map)?)?;
        let same = back.shape() == map.shape()
            && back.data().iter().zip(map.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        tally.record(f64::from(u8::from(!same)), seed, || format!("PFM {h}×{w} round trip differs"));

        let mut store = ParameterStore::<f32>::new();
        store.register_uniform("a", vec![h, w], h, w, &mut rng)?;
        store.register_uniform("b.c", vec![w], w, 1, &mut rng)?;
        let back = ParameterStore::<f32>::from_bytes(&store.to_bytes())?;
        let same = back.to_bytes() == store.to_bytes()
            && back.iter().zip(store.iter()).all(|(x, y)| {
                x.1 == y.1 && x.2.shape() == y.2.shape() && x.2.data().iter().zip(y.2.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            });
        tally.record(f64::from(u8::from(!same)), seed, || "checkpoint round trip differs".into());

        let img = rand_tensor(&mut rng, vec![h, w], 0.0, 1.0);
        let once = decode_pgm(&encode_pgm(&img)?)?;
        let twice = decode_pgm(&encode_pgm(&once)?)?;
        let quantized = once.data().iter().zip(img.data()).all(|(q, v)| (q - v).abs() <= 0.5 / 255.0 + 1e-12);
        let same = twice == once && quantized;
        tally.record(f64::from(u8::from(!same)), seed, || format!("PGM {h}×{w} round trip differs"));
    }
    // Big-endian file, rows stored bottom to top.
    let mut fixture = b"Pf\n2 2\n1.0\n".to_vec();
    for v in [3.0f32, 4.0, 1.0, 2.0] {
        fixture.extend_from_slice(&v.to_be_bytes());
    }
    let parsed = decode_pfm(&fixture)?;
    let ok = parsed.shape() == [2, 2] && parsed.data() == [1.0, 2.0, 3.0, 4.0];
    tally.record(f64::from(u8::from(!ok)), 0, || format!("big-endian fixture parsed as {:?}", parsed.data()));
    Ok(tally)
}

/// Recompute against eager parameter gradients in 32-bit on the toy
/// pipeline; the error is the largest elementwise difference relative to
/// the largest eager gradient of that parameter.
fn recompute(opts: &CheckOptions) -> Result<Tally> {
    let mut tally = Tally::new(1e-6);
    let model = toy_model();
    let weights = LossWeights::default();
    for c in 0..2 {
        let seed = case_seed(opts.seed, 11, c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store: ParameterStore<f32> = model.init(&mut rng)?;
        jitter(&mut store, 0.05, &mut rng);
        let sample = toy_sample(16, 32, 8, rng.gen())?;
        let (_, le, ge) = loss_and_gradients(&store, &sample, &model, &weights, None, ExecMode::Eager)?;
        let (_, lr, gr) = loss_and_gradients(&store, &sample, &model, &weights, None, ExecMode::Recompute)?;
        let mut worst = ((le - lr).abs() / le.abs().max(1e-12), "loss".to_string());
        for ((id, name, _), (a, b)) in store.iter().zip(ge.iter().zip(&gr)) {
            let e = match (a, b) {
                (Some(a), Some(b)) => a.max_abs_diff(b) / a.max_abs().max(1e-12),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            };
            if e > worst.0 {
                worst = (e, format!("{name} (#{})", id.0));
            }
        }
        tally.record(worst.0, seed, || format!("largest difference in {}", worst.1));
    }
    Ok(tally)
}

/// Eager attention-score bytes against the memory model on small grids;
/// the error is the relative deviation. A recompute peak that is not
/// strictly below eager counts as an infinite error.
fn memory_model() -> Result<Tally> {
    let mut tally = Tally::new(0.05);
    let base = TransformerConfig {
        layers: 2,
        heads: 2,
        channels: 4,
        ..Default::default()
    };
    for (c, (w, s)) in [16, 32].into_iter().flat_map(|w| (1..=3).map(move |s| (w, s))).enumerate() {
        let cfg = TransformerConfig { stride: s, ..base.clone() };
        let height = 6;
        let p = bench_point::<f32>(&cfg, height, w, 1, c as u64)?;
        let predicted = MemoryModel::for_transformer(&cfg, height, w, 32)?.bits() as f64;
        let measured = (p.eager_peak_bytes * 8) as f64;
        let mut err = (measured - predicted).abs() / predicted;
        if p.recompute_peak_bytes >= p.eager_peak_bytes {
            err = f64::INFINITY;
        }
        tally.record(err, c as u64, || {
            format!(
                "I_w = {w}, s = {s}: measured {measured} bits, predicted {predicted}, recompute peak {} bytes",
                p.recompute_peak_bytes
            )
        });
    }
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_a_config_error() {
        assert!(matches!(run_suite("nope", &CheckOptions::default()), Err(Error::Config(_))));
    }

    #[test]
    fn tally_reports_the_worst_failure() {
        let mut t = Tally::new(1.0);
        t.record(0.5, 1, || "fine".into());
        t.record(3.0, 2, || "bad".into());
        t.record(2.0, 3, || "less bad".into());
        t.record(f64::NAN, 4, || "nan".into());
        let r = t.finish("x", Instant::now());
        assert!(!r.passed);
        assert_eq!(r.cases, 4);
        assert_eq!(r.counterexample.as_deref(), Some("seed 4: nan"));
    }

    #[test]
    fn fast_suites_pass() {
        let opts = CheckOptions::default();
        for name in ["regression_hand", "regression_window", "formats", "sinkhorn_10", "sinkhorn_assignment"] {
            let r = run_suite(name, &opts).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn fault_injection_breaks_operation_gradients() {
        let opts = CheckOptions {
            seed: 0,
            fault_injection: true,
        };
        let r = run_suite("gradients_ops", &opts).unwrap();
        assert!(!r.passed);
        assert!(r.counterexample.is_some());
    }
}
