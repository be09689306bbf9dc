//! End-to-end assembly: features, epipolar transformer, optimal transport,
//! regression, upsampling and context adjustment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{extract, ExtractorConfig};
use crate::head::{context_adjust, regress_graph, regress_raw, upsample_full, CALConfig, DisparityOutput};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{run_transformer, sample_stride, strided_len, TransformerConfig};
use crate::transformer::build_attention_mask;
use crate::transport::{
    augment_dustbins, augment_with_dustbins, dustbin_marginals, sinkhorn, sinkhorn_graph, CostMatrix, OTConfig,
};

/// Name of the learnable dustbin cost.
pub const PHI: &str = "ot.phi";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub transformer: TransformerConfig,
    pub ot: OTConfig,
    pub cal: CALConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        self.transformer.validate()?;
        self.cal.validate()?;
        if self.extractor.channels != self.transformer.channels {
            return Err(Error::Config(format!(
                "extractor emits {} channels but the transformer expects {}",
                self.extractor.channels, self.transformer.channels
            )));
        }
        if !(self.ot.gamma > 0.0) || self.ot.iterations == 0 {
            return Err(Error::Config("OT needs γ > 0 and at least one iteration".into()));
        }
        Ok(())
    }

    /// Registers every parameter in a fixed order; `φ` starts at 1.
    pub fn register<F: Scalar, R: Rng>(&self, store: &mut ParameterStore<F>, rng: &mut R) -> Result<()> {
        self.validate()?;
        self.extractor.register(store, rng)?;
        self.transformer.register(store, rng)?;
        store.register(PHI, Tensor::from_f64(vec![1], &[1.0])?)?;
        self.cal.register(store, self.extractor.image_channels, rng)?;
        Ok(())
    }

    pub fn init<F: Scalar, R: Rng>(&self, rng: &mut R) -> Result<ParameterStore<F>> {
        let mut store = ParameterStore::new();
        self.register(&mut store, rng)?;
        Ok(store)
    }
}

/// Graph handles of every intermediate the losses and diagnostics read.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Row-normalized coupling `[H_s, W_s+1, W_s+1]`.
    pub coupling: Var,
    pub raw_disparity_strided: Var,
    pub raw_occlusion_strided: Var,
    pub raw_disparity: Var,
    pub raw_occlusion: Var,
    pub disparity: Var,
    pub occlusion: Var,
}

/// Runs the model on images `[C_img, H, W]`.
pub fn forward<'p, F: Scalar>(g: &mut Graph<'p, F>, left: Var, right: Var, cfg: &ModelConfig) -> Result<ForwardVars> {
    cfg.validate()?;
    let (sl, sr) = (g.shape(left).to_vec(), g.shape(right).to_vec());
    if sl.len() != 3 || sl != sr || sl[0] != cfg.extractor.image_channels {
        return Err(Error::dim("forward", format!("left {sl:?}, right {sr:?}")));
    }
    let (h, w, s) = (sl[1], sl[2], cfg.transformer.stride);
    let nl = g.input(standardize(g.value(left)))?;
    let nr = g.input(standardize(g.value(right)))?;
    let fl = extract(g, nl, &cfg.extractor)?;
    let fr = extract(g, nr, &cfg.extractor)?;
    let ll = sample_stride(g, fl, s)?;
    let rl = sample_stride(g, fr, s)?;
    let tf = run_transformer(g, ll, rl, &cfg.transformer)?;

    let ws = strided_len(w, s);
    let cost = g.scale(tf.scores, -1.0)?;
    let phi = g.param_named(PHI)?;
    let aug = augment_dustbins(g, cost, phi)?;
    let marg = dustbin_marginals(ws);
    let t = sinkhorn_graph(g, aug, &marg, &marg, &cfg.ot)?;
    let coupling = g.scale(t, 2.0 * ws as f64)?;

    let (rd, ro) = regress_graph(g, coupling, s)?;
    let raw_disparity = upsample_full(g, rd, s, h, w)?;
    let raw_occlusion = upsample_full(g, ro, s, h, w)?;
    let (disparity, occlusion) = context_adjust(g, raw_disparity, raw_occlusion, left, &cfg.cal)?;
    Ok(ForwardVars {
        coupling,
        raw_disparity_strided: rd,
        raw_occlusion_strided: ro,
        raw_disparity,
        raw_occlusion,
        disparity,
        occlusion,
    })
}

/// Zero mean and unit variance per channel; a flat channel is only centered.
/// Images are treated as constants, so no gradient flows back through this.
pub fn standardize<F: Scalar>(image: &Tensor<F>) -> Tensor<F> {
    let c = image.shape()[0];
    let n = image.len() / c.max(1);
    let mut out = image.clone();
    for ch in out.data_mut().chunks_mut(n.max(1)) {
        let mean = ch.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        let var = ch.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var.sqrt() > 1e-6 { 1.0 / var.sqrt() } else { 1.0 };
        for v in ch.iter_mut() {
            *v = F::from_f64((v.as_f64() - mean) * scale);
        }
    }
    out
}

/// Inference without gradient bookkeeping. Images are `[C_img, H, W]`.
pub fn predict<F: Scalar>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    left: &Tensor<F>,
    right: &Tensor<F>,
) -> Result<(DisparityOutput<F>, Tensor<F>)> {
    let mut g = Graph::new(store).frozen();
    let (l, r) = (g.input(left.clone())?, g.input(right.clone())?);
    let v = forward(&mut g, l, r, cfg)?;
    let coupling = g.value(v.coupling).clone();
    let raw = regress_raw(&coupling, cfg.transformer.stride)?;
    Ok((
        DisparityOutput {
            disparity: g.value(v.disparity).clone(),
            occlusion: g.value(v.occlusion).clone(),
            raw_disparity: g.value(v.raw_disparity).clone(),
            raw_occlusion: g.value(v.raw_occlusion).clone(),
            raw,
        },
        coupling,
    ))
}

/// Learning-free matcher on raw intensities, sharing the transport and
/// regression stages with the model: the cost of pair `(i, j)` on a row is
/// the squared difference of the horizontal 5-pixel windows around them.
/// Images are `[H, W]`; returns raw disparity and occlusion, both `[H, W]`.
pub fn match_intensities(
    left: &Tensor<f64>,
    right: &Tensor<f64>,
    ot: &OTConfig,
    dustbin_cost: f64,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if left.rank() != 2 || left.shape() != right.shape() || left.shape()[1] < 2 {
        return Err(Error::dim(
            "match_intensities",
            format!("left {:?}, right {:?}", left.shape(), right.shape()),
        ));
    }
    let (h, w) = (left.shape()[0], left.shape()[1]);
    let mask = build_attention_mask(w);
    let marg = dustbin_marginals(w);
    let (mut disp, mut occ) = (Vec::with_capacity(h * w), Vec::with_capacity(h * w));
    for y in 0..h {
        let row = |t: &Tensor<f64>, x: isize| t.data()[y * w + x.clamp(0, w as isize - 1) as usize];
        let mut cost = Vec::with_capacity(w * w);
        for i in 0..w as isize {
            for j in 0..w as isize {
                cost.push((-2..=2).map(|dx| (row(left, i + dx) - row(right, j + dx)).powi(2)).sum::<f64>());
            }
        }
        let cm = CostMatrix::new(Tensor::new(vec![w, w], cost)?, Some(mask.clone()))?;
        let aug = augment_with_dustbins(&cm, dustbin_cost)?;
        let t = sinkhorn(&aug.values, &marg, &marg, ot)?;
        let scaled = t.t.map(|v| v * 2.0 * w as f64);
        let r = regress_raw(&scaled, 1)?;
        disp.extend_from_slice(r.disparity.data());
        occ.extend_from_slice(r.occlusion.data());
    }
    Ok((Tensor::new(vec![h, w], disp)?, Tensor::new(vec![h, w], occ)?))
}
