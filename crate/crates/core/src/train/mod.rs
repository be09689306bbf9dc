//! Losses, optimizer, training loop and evaluation metrics.

mod losses;
mod metrics;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ExecMode, Graph, Var};
use crate::data::{augment_asym, AugmentConfig, StereoSample};
use crate::error::{Error, Result};
use crate::model::{forward, predict, ForwardVars, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

pub use losses::{
    bce_occ, disparity_mask, occlusion_mask, rr_loss, rr_targets, smooth_l1, total_loss, total_loss_graph,
    LossComponents, LossWeights, RrTarget, BCE_EPS, PROB_FLOOR,
};
pub use metrics::{eval_metrics, MetricsReport, BAD_PIXEL_PX, CORRECT_PX};
pub use optim::AdamW;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Rate of the extractor, transformer and dustbin parameters.
    pub lr: f64,
    /// Rate of the context adjustment layer.
    pub lr_cal: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Pixels with ground truth at or above this disparity are left out of
    /// every loss term.
    pub d_cap: Option<f64>,
    /// Re-run transformer layers on backward instead of keeping them.
    pub recompute: bool,
    /// Evaluate and log every this many steps.
    pub eval_every: usize,
    pub augment_strength: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_cal: 2e-4,
            weight_decay: 1e-4,
            steps: 200,
            batch_size: 1,
            seed: 0,
            d_cap: None,
            recompute: false,
            eval_every: 50,
            augment_strength: 0.0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lr_cal > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch size and evaluation interval must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_strength) {
            return Err(Error::Config("augmentation strength must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate of every parameter in store order.
    pub fn rates<F: Scalar>(&self, store: &ParameterStore<F>) -> Vec<f64> {
        store
            .iter()
            .map(|(_, name, _)| if name.starts_with("cal.") { self.lr_cal } else { self.lr })
            .collect()
    }
}

/// Forward pass plus every loss term of one sample.
pub struct SampleLoss {
    pub vars: ForwardVars,
    pub parts: [Var; 4],
    pub total: Var,
    /// Matched positions whose target lies beyond the sampled line.
    pub excluded: usize,
}

pub fn sample_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    sample: &StereoSample,
    model: &ModelConfig,
    weights: &LossWeights,
    d_cap: Option<f64>,
) -> Result<SampleLoss> {
    let (l, r) = sample.images::<F>()?;
    let (l, r) = (g.input(l)?, g.input(r)?);
    let vars = forward(g, l, r, model)?;
    let (targets, excluded) = rr_targets(sample, model.transformer.stride, d_cap);
    let rr = rr_loss(g, vars.coupling, &targets)?;
    let dmask = disparity_mask(sample, d_cap);
    let d1_raw = smooth_l1(g, vars.raw_disparity, &sample.gt_disparity, &dmask)?;
    let d1_final = smooth_l1(g, vars.disparity, &sample.gt_disparity, &dmask)?;
    let be = bce_occ(g, vars.occlusion, &sample.gt_occlusion, &occlusion_mask(sample, d_cap))?;
    let parts = [rr, d1_raw, d1_final, be];
    let total = total_loss_graph(g, parts, weights)?;
    Ok(SampleLoss {
        vars,
        parts,
        total,
        excluded,
    })
}

/// Loss components, total and parameter gradients of one sample.
pub fn loss_and_gradients<F: Scalar>(
    store: &ParameterStore<F>,
    sample: &StereoSample,
    model: &ModelConfig,
    weights: &LossWeights,
    d_cap: Option<f64>,
    mode: ExecMode,
) -> Result<(LossComponents, f64, Vec<Option<Tensor<F>>>)> {
    let mut g = Graph::new(store).with_mode(mode);
    let sl = sample_loss(&mut g, sample, model, weights, d_cap)?;
    let comps = LossComponents::from_array(sl.parts.map(|p| g.value(p).item().as_f64()));
    let total = g.value(sl.total).item().as_f64();
    let grads = g.backward(sl.total)?.into_params();
    Ok((comps, total, grads))
}

/// Per-sample and pooled metrics of the current parameters.
pub fn evaluate<F: Scalar>(
    store: &ParameterStore<F>,
    model: &ModelConfig,
    samples: &[StereoSample],
) -> Result<(MetricsReport, Vec<MetricsReport>)> {
    let per = samples
        .iter()
        .map(|s| {
            let (l, r) = s.images::<F>()?;
            let (out, _) = predict(store, model, &l, &r)?;
            eval_metrics(
                &out.disparity.to_f64_vec(),
                &out.occlusion.to_f64_vec(),
                s.gt_disparity.data(),
                &s.gt_occlusion,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricsReport::aggregate(&per), per))
}

/// Counts non-occluded pixels with ground truth exactly `disparity` and,
/// of those, the ones whose final prediction lies within `tolerance` px.
pub fn hits_at_disparity<F: Scalar>(
    store: &ParameterStore<F>,
    model: &ModelConfig,
    samples: &[StereoSample],
    disparity: f64,
    tolerance: f64,
) -> Result<(usize, usize)> {
    let (mut hits, mut total) = (0, 0);
    for s in samples {
        let (l, r) = s.images::<F>()?;
        let (out, _) = predict(store, model, &l, &r)?;
        for (k, (&gt, &occ)) in s.gt_disparity.data().iter().zip(&s.gt_occlusion).enumerate() {
            if occ || gt != disparity {
                continue;
            }
            total += 1;
            if (out.disparity.data()[k].as_f64() - gt).abs() <= tolerance {
                hits += 1;
            }
        }
    }
    Ok((hits, total))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub three_px_error: Option<f64>,
    pub epe: Option<f64>,
    pub occ_iou: Option<f64>,
    /// Mean training loss since the previous record.
    pub loss: Option<f64>,
    pub rr: Option<f64>,
    pub d1_raw: Option<f64>,
    pub d1_final: Option<f64>,
    pub be_final: Option<f64>,
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    /// Total loss of every step.
    pub losses: Vec<f64>,
    pub records: Vec<EvalRecord>,
    pub skipped_steps: usize,
    pub excluded_targets: usize,
}

/// Where the loop writes its log and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub metrics_log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

struct Log(Option<std::fs::File>);

impl Log {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(Log(match path {
            Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
            None => None,
        }))
    }

    fn write(&mut self, rec: &EvalRecord, path: Option<&Path>) -> Result<()> {
        if let (Some(f), Some(p)) = (&mut self.0, path) {
            let line = serde_json::to_string(rec)?;
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

/// Trains `store` in place for `cfg.steps` steps and returns the loss trace
/// and evaluation records.
///
/// A record is written at step 0, every `eval_every` steps and at the last
/// step; metrics are computed on `val` when it is non-empty. A non-finite
/// loss stops training with [`Error::Diverged`] after the last good
/// parameters are saved.
pub fn train_loop<F: Scalar>(
    store: &mut ParameterStore<F>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
    train: &[StereoSample],
    val: &[StereoSample],
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    model.validate()?;
    if train.is_empty() && cfg.steps > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let mode = if cfg.recompute { ExecMode::Recompute } else { ExecMode::Eager };
    let rates = cfg.rates(store);
    let mut opt = AdamW::new(store, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Log::open(outputs.metrics_log.as_deref())?;
    let mut out = TrainOutcome::default();
    let mut window: Vec<(f64, LossComponents)> = Vec::new();

    let save = |store: &ParameterStore<F>| -> Result<()> {
        match &outputs.checkpoint {
            Some(p) => store.save(p),
            None => Ok(()),
        }
    };
    let mut record = |store: &ParameterStore<F>, step: usize, window: &mut Vec<(f64, LossComponents)>, out: &mut TrainOutcome| -> Result<()> {
        let metrics = if val.is_empty() { None } else { Some(evaluate(store, model, val)?.0) };
        let n = window.len() as f64;
        let mean = |f: &dyn Fn(&(f64, LossComponents)) -> f64| (n > 0.0).then(|| window.iter().map(f).sum::<f64>() / n);
        let rec = EvalRecord {
            step,
            three_px_error: metrics.as_ref().map(|m| m.three_px_error),
            epe: metrics.as_ref().map(|m| m.epe),
            occ_iou: metrics.as_ref().map(|m| m.occ_iou),
            loss: mean(&|w| w.0),
            rr: mean(&|w| w.1.rr),
            d1_raw: mean(&|w| w.1.d1_raw),
            d1_final: mean(&|w| w.1.d1_final),
            be_final: mean(&|w| w.1.be_final),
            skipped_steps: out.skipped_steps,
        };
        window.clear();
        log.write(&rec, outputs.metrics_log.as_deref())?;
        out.records.push(rec);
        save(store)
    };

    record(store, 0, &mut window, &mut out)?;
    for step in 1..=cfg.steps {
        let mut acc: Vec<Option<Tensor<F>>> = Vec::new();
        let mut step_loss = 0.0;
        let mut step_comps = [0.0; 4];
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let idx = order.pop().expect("refilled above");
            let aug_seed: u64 = rng.gen();
            let sample = if cfg.augment_strength > 0.0 {
                augment_asym(&train[idx], &cfg.augment, cfg.augment_strength, aug_seed)?
            } else {
                train[idx].clone()
            };
            let result = loss_and_gradients(store, &sample, model, weights, cfg.d_cap, mode);
            let (comps, total, grads) = match result {
                Ok(v) => v,
                Err(Error::NonFinite { op }) => {
                    save(store)?;
                    return Err(Error::Diverged {
                        step,
                        detail: format!("non-finite value in {op}"),
                    });
                }
                Err(e) => return Err(e),
            };
            out.excluded_targets += rr_targets(&sample, model.transformer.stride, cfg.d_cap).1;
            step_loss += total / cfg.batch_size as f64;
            for (a, c) in step_comps.iter_mut().zip(comps.as_array()) {
                *a += c / cfg.batch_size as f64;
            }
            if acc.is_empty() {
                acc = grads;
            } else {
                for (a, g) in acc.iter_mut().zip(grads) {
                    match (a.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *a = Some(g),
                        _ => {}
                    }
                }
            }
        }
        if cfg.batch_size > 1 {
            let k = F::from_f64(1.0 / cfg.batch_size as f64);
            for t in acc.iter_mut().flatten() {
                t.data_mut().iter_mut().for_each(|v| *v = *v * k);
            }
        }
        if !opt.step(store, &acc, &rates)? {
            out.skipped_steps = opt.skipped();
        }
        out.losses.push(step_loss);
        window.push((step_loss, LossComponents::from_array(step_comps)));
        if step % cfg.eval_every == 0 || step == cfg.steps {
            record(store, step, &mut window, &mut out)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_rds, SceneSampler};
    use crate::features::ExtractorConfig;
    use crate::head::CALConfig;
    use crate::transformer::TransformerConfig;
    use crate::transport::OTConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig {
                layers: 2,
                kernel: 3,
                hidden: 4,
                channels: 4,
                image_channels: 1,
            },
            transformer: TransformerConfig {
                layers: 2,
                heads: 2,
                channels: 4,
                ..Default::default()
            },
            ot: OTConfig::default(),
            cal: CALConfig {
                blocks: 1,
                hidden: 2,
                expansion: 2,
                kernel: 3,
            },
        }
    }

    fn data(n: u64) -> Vec<StereoSample> {
        let s = SceneSampler {
            height: 6,
            width: 16,
            min_disparity: 1,
            max_disparity: 4,
            max_layers: 1,
            min_size: 3,
            max_size: 5,
            ..Default::default()
        };
        (0..n).map(|i| synth_rds(&s.sample(i).unwrap()).unwrap()).collect()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            lr_cal: 1e-3,
            steps: 6,
            eval_every: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let model = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store: ParameterStore<f32> = model.init(&mut rng).unwrap();
        let init = store.to_bytes();
        let dir = tempfile::tempdir().unwrap();
        let outputs = TrainOutputs {
            metrics_log: Some(dir.path().join("m.jsonl")),
            checkpoint: Some(dir.path().join("c.bin")),
        };
        let cfg = TrainConfig { steps: 0, ..quick() };
        let o = train_loop(&mut store, &model, &cfg, &LossWeights::default(), &data(2), &data(1), &outputs).unwrap();
        assert_eq!(o.records.len(), 1);
        assert_eq!(store.to_bytes(), init);
        assert_eq!(std::fs::read(dir.path().join("c.bin")).unwrap(), init);
    }

    #[test]
    fn deterministic_logs() {
        let model = tiny();
        let run = || {
            let mut store: ParameterStore<f32> = model.init(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let o = train_loop(&mut store, &model, &quick(), &LossWeights::default(), &data(3), &data(1), &TrainOutputs::default()).unwrap();
            (o.losses, o.records, store.to_bytes())
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 3);
        assert!(a.0.iter().all(|l| l.is_finite() && *l >= 0.0));
    }

    #[test]
    fn batches_average_gradients() {
        let model = tiny();
        let mut store: ParameterStore<f64> = model.init(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            steps: 2,
            ..quick()
        };
        let o = train_loop(&mut store, &model, &cfg, &LossWeights::default(), &data(4), &[], &TrainOutputs::default()).unwrap();
        assert_eq!(o.losses.len(), 2);
        assert!(o.records.iter().all(|r| r.epe.is_none()));
    }

    #[test]
    fn capped_pixels_do_not_affect_the_loss() {
        let model = tiny();
        let store: ParameterStore<f64> = model.init(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let s = data(1).remove(0);
        let cap = 3.0;
        let mut t = s.clone();
        for d in t.gt_disparity.data_mut() {
            if *d >= cap {
                *d += 1.0;
            }
        }
        let w = LossWeights::default();
        let (_, a, _) = loss_and_gradients(&store, &s, &model, &w, Some(cap), ExecMode::Eager).unwrap();
        let (_, b, _) = loss_and_gradients(&store, &t, &model, &w, Some(cap), ExecMode::Eager).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_keeps_last_good_checkpoint() {
        let model = tiny();
        let mut store: ParameterStore<f32> = model.init(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("c.bin");
        store.by_name_mut("ot.phi").unwrap().data_mut()[0] = f32::INFINITY;
        let good = store.to_bytes();
        let outputs = TrainOutputs {
            metrics_log: None,
            checkpoint: Some(ckpt.clone()),
        };
        let r = train_loop(&mut store, &model, &quick(), &LossWeights::default(), &data(2), &[], &outputs);
        assert!(matches!(r, Err(Error::Diverged { step: 1, .. })), "{r:?}");
        assert_eq!(std::fs::read(&ckpt).unwrap(), good);
    }
}
