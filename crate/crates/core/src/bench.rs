//! Attention memory model and the width × stride memory/speed bench.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ExecMode, Graph, MemCategory};
use crate::config::BenchConfig;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{run_transformer, sample_stride, strided_len, TransformerConfig};

/// Attention memory in bits: `bits · I_h · I_w² · N_h · N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub i_h: usize,
    pub i_w: usize,
    pub heads: usize,
    /// Number of attention maps `N` per head.
    pub layers: usize,
    pub element_bits: usize,
}

impl MemoryModel {
    pub fn new(i_h: usize, i_w: usize, heads: usize, layers: usize, element_bits: usize) -> Result<Self> {
        if [i_h, i_w, heads, layers, element_bits].contains(&0) {
            return Err(Error::Config("memory model sizes must all be positive".into()));
        }
        Ok(Self {
            i_h,
            i_w,
            heads,
            layers,
            element_bits,
        })
    }

    pub fn bits(&self) -> u128 {
        [self.element_bits, self.i_h, self.i_w, self.i_w, self.heads, self.layers]
            .iter()
            .map(|&v| v as u128)
            .product()
    }

    /// The same model on the grid sampled with stride `s`.
    pub fn strided(&self, s: usize) -> Self {
        Self {
            i_h: strided_len(self.i_h, s),
            i_w: strided_len(self.i_w, s),
            ..*self
        }
    }

    /// Model for one transformer configuration, counting every score map
    /// the implementation computes as one of the `N`.
    pub fn for_transformer(cfg: &TransformerConfig, i_h: usize, i_w: usize, element_bits: usize) -> Result<Self> {
        Ok(Self::new(i_h, i_w, cfg.heads, cfg.attention_maps(), element_bits)?.strided(cfg.stride))
    }
}

/// Peak tracked attention-score bytes and timing of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub eager_peak_bytes: u64,
    pub recompute_peak_bytes: u64,
    pub median_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub i_w: usize,
    pub s: usize,
    pub predicted_bits: u128,
    /// `None` when the configuration exceeds the memory limit.
    pub point: Option<BenchPoint>,
}

fn random_features<F: Scalar>(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<F> {
    let data = (0..c * h * w).map(|_| F::from_f64(rng.gen_range(-1.0..1.0))).collect();
    Tensor::new(vec![c, h, w], data).expect("sizes agree")
}

/// Forward and backward through the transformer; returns the peak of
/// tracked attention-score bytes.
fn pass<F: Scalar>(
    store: &ParameterStore<F>,
    cfg: &TransformerConfig,
    left: &Tensor<F>,
    right: &Tensor<F>,
    mode: ExecMode,
) -> Result<u64> {
    let mut g = Graph::new(store).with_mode(mode);
    let (l, r) = (g.input(left.clone())?, g.input(right.clone())?);
    let (ls, rs) = (sample_stride(&mut g, l, cfg.stride)?, sample_stride(&mut g, r, cfg.stride)?);
    let out = run_transformer(&mut g, ls, rs, cfg)?;
    let loss = g.sum(out.scores)?;
    g.backward(loss)?;
    let peak = g.tracker().borrow().peak(MemCategory::AttentionScores);
    Ok(peak as u64)
}

/// Measures one configuration on random `C_e × height × width` features.
pub fn bench_point<F: Scalar>(
    cfg: &TransformerConfig,
    height: usize,
    width: usize,
    repetitions: usize,
    seed: u64,
) -> Result<BenchPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    cfg.register(&mut store, &mut rng)?;
    let left = random_features::<F>(&mut rng, cfg.channels, height, width);
    let right = random_features::<F>(&mut rng, cfg.channels, height, width);
    let recompute_peak_bytes = pass(&store, cfg, &left, &right, ExecMode::Recompute)?;
    let mut eager_peak_bytes = 0;
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions.max(1) {
        let t = Instant::now();
        eager_peak_bytes = pass(&store, cfg, &left, &right, ExecMode::Eager)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchPoint {
        eager_peak_bytes,
        recompute_peak_bytes,
        median_ms: median(&times),
    })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Runs every `(width, stride)` pair of `bench` with the layer layout of `base`.
pub fn run_bench<F: Scalar>(base: &TransformerConfig, bench: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &w in &bench.widths {
        for &s in &bench.strides {
            if s >= w {
                return Err(Error::Config(format!("stride {s} must be smaller than width {w}")));
            }
            let cfg = TransformerConfig {
                stride: s,
                ..base.clone()
            };
            let model = MemoryModel::for_transformer(&cfg, bench.height, w, F::BITS)?;
            let predicted_bits = model.bits();
            let point = if predicted_bits / 8 > bench.memory_limit_bytes as u128 {
                None
            } else {
                Some(bench_point::<F>(&cfg, bench.height, w, bench.repetitions, seed)?)
            };
            rows.push(BenchRow {
                i_w: w,
                s,
                predicted_bits,
                point,
            });
        }
    }
    Ok(rows)
}

/// CSV with columns `I_w,s,predicted_bits,measured_bytes,median_ms`.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("I_w,s,predicted_bits,measured_bytes,median_ms\n");
    for r in rows {
        match &r.point {
            Some(p) => writeln!(
                out,
                "{},{},{},{},{:.3}",
                r.i_w, r.s, r.predicted_bits, p.eager_peak_bytes, p.median_ms
            ),
            None => writeln!(out, "{},{},{},OOM,OOM", r.i_w, r.s, r.predicted_bits),
        }
        .expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_at_full_resolution_example() {
        let m = MemoryModel::new(540, 960, 8, 6, 32).unwrap();
        assert_eq!(m.bits(), 764_411_904_000);
        let doubled = MemoryModel { i_w: 1920, ..m };
        assert_eq!(doubled.bits(), 4 * m.bits());
        assert!(MemoryModel::new(0, 1, 1, 1, 32).is_err());
    }

    #[test]
    fn strided_model_uses_sample_counts() {
        let m = MemoryModel::new(10, 10, 1, 1, 32).unwrap().strided(3);
        assert_eq!((m.i_h, m.i_w), (4, 4));
    }

    #[test]
    fn measured_bytes_match_the_model() {
        let cfg = TransformerConfig {
            layers: 2,
            heads: 2,
            channels: 4,
            ..Default::default()
        };
        for s in 1..=3 {
            let c = TransformerConfig { stride: s, ..cfg.clone() };
            let p = bench_point::<f32>(&c, 6, 12, 1, 0).unwrap();
            let m = MemoryModel::for_transformer(&c, 6, 12, 32).unwrap();
            assert_eq!(p.eager_peak_bytes as u128 * 8, m.bits());
            assert!(p.recompute_peak_bytes < p.eager_peak_bytes);
        }
    }

    #[test]
    fn oversized_rows_are_marked() {
        let bench = BenchConfig {
            widths: vec![16],
            strides: vec![1],
            height: 4,
            repetitions: 1,
            memory_limit_bytes: 10,
        };
        let cfg = TransformerConfig {
            channels: 4,
            ..Default::default()
        };
        let rows = run_bench::<f32>(&cfg, &bench, 0).unwrap();
        assert!(rows[0].point.is_none());
        assert!(to_csv(&rows).lines().nth(1).unwrap().ends_with(",OOM,OOM"));
    }
}
