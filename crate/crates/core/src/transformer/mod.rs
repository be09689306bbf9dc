//! Alternating self- and cross-attention along epipolar lines.
//!
//! Lines are processed as batches `[H_s, W_s, C_e]`: every sampled row is an
//! independent sequence and all rows share the parameters. Each non-final
//! layer runs self-attention on both images and then cross-attention in both
//! directions (right attends to left, then left attends to the updated
//! right). The final layer runs self-attention and exports the left→right
//! cross scores, averaged over heads and masked, without a softmax.

mod attention;
mod relpos;
mod sample;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mask, SegmentFn, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

pub use attention::{
    attention_scores_efficient, attention_scores_naive, attention_span, build_attention_mask, mha_forward,
    project_head, project_qkv, AttentionInputs, PosTerms,
};
pub use relpos::RelPosTable;
pub use sample::{sample_stride, sampled_lines, strided_len, SampledLine};

/// Value written into forbidden score entries.
pub const FORBIDDEN_SCORE: f64 = -1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Number of layers `N`; the last one is the masked score layer.
    pub layers: usize,
    pub heads: usize,
    /// Descriptor width `C_e`.
    pub channels: usize,
    /// Attention stride `s`.
    pub stride: usize,
    pub use_mask: bool,
    pub use_relative_encoding: bool,
    /// Also mask the cross-attention of non-final layers.
    #[serde(default)]
    pub mask_all_cross: bool,
    /// Include the position terms in the exported final cross scores. In that
    /// layer the relative offset is the disparity itself, so the terms can
    /// learn a prior over the disparities seen in training.
    #[serde(default = "yes")]
    pub final_position_terms: bool,
}

fn yes() -> bool {
    true
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            channels: 16,
            stride: 1,
            use_mask: true,
            use_relative_encoding: true,
            mask_all_cross: false,
            final_position_terms: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.stride == 0 || self.channels == 0 {
            return Err(Error::Config("layers, heads, stride and channels must be ≥ 1".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "C_e = {} is not divisible by N_h = {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Score maps computed per forward pass and row batch: self-attention on
    /// both images and two cross directions per non-final layer, plus two
    /// self maps and one cross map in the final layer, each for `N_h` heads.
    pub fn attention_maps(&self) -> usize {
        4 * (self.layers - 1) + 3
    }

    fn register_block<F: Scalar, R: Rng>(
        &self,
        store: &mut ParameterStore<F>,
        prefix: &str,
        qk_only: bool,
        rng: &mut R,
    ) -> Result<()> {
        let c_h = self.head_dim();
        for h in 0..self.heads {
            let names: &[&str] = if qk_only { &["q", "k"] } else { &["q", "k", "v"] };
            for n in names {
                store.register_uniform(format!("{prefix}.h{h}.w{n}"), vec![c_h, c_h], c_h, c_h, rng)?;
                store.register_zeros(format!("{prefix}.h{h}.b{n}"), vec![c_h])?;
            }
        }
        if !qk_only {
            let c = self.channels;
            // Zero output projection: every layer starts as the identity map.
            store.register_zeros(format!("{prefix}.wo"), vec![c, c])?;
            store.register_zeros(format!("{prefix}.bo"), vec![c])?;
        }
        Ok(())
    }

    pub fn register<F: Scalar, R: Rng>(&self, store: &mut ParameterStore<F>, rng: &mut R) -> Result<()> {
        self.validate()?;
        for l in 0..self.layers {
            self.register_block(store, &format!("tf.l{l}.self"), false, rng)?;
            self.register_block(store, &format!("tf.l{l}.cross"), l + 1 == self.layers, rng)?;
        }
        Ok(())
    }
}

/// Which image attends to which.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    LeftToRight,
    RightToLeft,
}

/// Pre-softmax scores of one batch of lines, `[rows, heads, W_s, W_s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTensor<F> {
    pub side: Side,
    pub values: Tensor<F>,
}

pub struct TransformerOutput {
    /// Head-averaged left→right scores `[H_s, W_s, W_s]` (source left sample
    /// `i`, target right sample `j`); forbidden entries hold
    /// [`FORBIDDEN_SCORE`] when the mask is enabled.
    pub scores: Var,
    pub left: Var,
    pub right: Var,
}

type Collector = Option<Vec<(usize, &'static str, Vec<Var>)>>;

struct LayerCtx<F> {
    cfg: TransformerConfig,
    table: Option<Rc<Tensor<F>>>,
    mask: Rc<Mask>,
}

impl<F: Scalar> LayerCtx<F> {
    fn inputs<'p>(&self, g: &mut Graph<'p, F>, mask: Option<Rc<Mask>>) -> Result<AttentionInputs> {
        let table = match &self.table {
            Some(t) => Some(g.input((**t).clone())?),
            None => None,
        };
        Ok(AttentionInputs { table, mask })
    }

    fn self_pair<'p>(
        &self,
        g: &mut Graph<'p, F>,
        l: usize,
        left: Var,
        right: Var,
        col: &mut Collector,
    ) -> Result<(Var, Var)> {
        let inp = self.inputs(g, None)?;
        let prefix = format!("tf.l{l}.self");
        let (left, al) = mha_forward(g, left, left, &prefix, self.cfg.heads, &inp)?;
        let (right, ar) = mha_forward(g, right, right, &prefix, self.cfg.heads, &inp)?;
        if let Some(c) = col {
            c.push((l, "self_left", al));
            c.push((l, "self_right", ar));
        }
        Ok((left, right))
    }

    fn layer<'p>(&self, g: &mut Graph<'p, F>, l: usize, left: Var, right: Var, col: &mut Collector) -> Result<(Var, Var)> {
        let (left, right) = self.self_pair(g, l, left, right, col)?;
        let prefix = format!("tf.l{l}.cross");
        let masked = self.cfg.use_mask && self.cfg.mask_all_cross;
        let rl = self.inputs(g, masked.then(|| Rc::new(self.mask.transpose())))?;
        let (right, ar) = mha_forward(g, right, left, &prefix, self.cfg.heads, &rl)?;
        let lr = self.inputs(g, masked.then(|| self.mask.clone()))?;
        let (left, al) = mha_forward(g, left, right, &prefix, self.cfg.heads, &lr)?;
        if let Some(c) = col {
            c.push((l, "cross_right_to_left", ar));
            c.push((l, "cross_left_to_right", al));
        }
        Ok((left, right))
    }

    fn final_layer<'p>(
        &self,
        g: &mut Graph<'p, F>,
        left: Var,
        right: Var,
        col: &mut Collector,
    ) -> Result<(Var, Var, Var)> {
        let l = self.cfg.layers - 1;
        let (left, right) = self.self_pair(g, l, left, right, col)?;
        let prefix = format!("tf.l{l}.cross");
        let mut inp = self.inputs(g, None)?;
        if !self.cfg.final_position_terms {
            inp.table = None;
        }
        let c_h = self.cfg.head_dim();
        let mut sum: Option<Var> = None;
        let mut per_head = Vec::new();
        for h in 0..self.cfg.heads {
            let p = |n: &str| format!("{prefix}.h{h}.{n}");
            let (wq, bq) = (g.param_named(&p("wq"))?, g.param_named(&p("bq"))?);
            let (wk, bk) = (g.param_named(&p("wk"))?, g.param_named(&p("bk"))?);
            let q = project_head(g, left, h, c_h, wq, bq)?;
            let k = project_head(g, right, h, c_h, wk, bk)?;
            let s = attention::head_scores(g, q, k, &prefix, h, c_h, inp.table)?;
            g.mark_attention_scores(s);
            per_head.push(s);
            sum = Some(match sum {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        let mut scores = g.scale(sum.expect("heads ≥ 1"), 1.0 / self.cfg.heads as f64)?;
        if self.cfg.use_mask {
            scores = g.masked_fill(scores, self.mask.clone(), FORBIDDEN_SCORE)?;
        }
        if let Some(c) = col {
            let m = self.cfg.use_mask.then(|| self.mask.clone());
            let alphas = per_head
                .iter()
                .map(|&s| g.softmax_last(s, m.clone()))
                .collect::<Result<Vec<_>>>()?;
            c.push((l, "cross_final", alphas));
        }
        Ok((scores, left, right))
    }
}

fn context<F: Scalar>(g: &Graph<'_, F>, left: Var, right: Var, cfg: &TransformerConfig) -> Result<LayerCtx<F>> {
    cfg.validate()?;
    let (sl, sr) = (g.shape(left), g.shape(right));
    if sl.len() != 3 || sl != sr || sl[2] != cfg.channels {
        return Err(Error::dim(
            "run_transformer",
            format!("left {sl:?}, right {sr:?}, C_e = {}", cfg.channels),
        ));
    }
    let w = sl[1];
    let table = if cfg.use_relative_encoding {
        Some(Rc::new(RelPosTable::new(w, cfg.channels)?.tensor()))
    } else {
        None
    };
    Ok(LayerCtx {
        cfg: cfg.clone(),
        table,
        mask: Rc::new(build_attention_mask(w)),
    })
}

/// Runs all layers on sampled lines `left`, `right` (`[H_s, W_s, C_e]`).
///
/// Every layer is a checkpoint segment, so in recompute mode only layer
/// boundaries stay alive between forward and backward.
pub fn run_transformer<'p, F: Scalar>(
    g: &mut Graph<'p, F>,
    left: Var,
    right: Var,
    cfg: &TransformerConfig,
) -> Result<TransformerOutput> {
    let ctx = Rc::new(context(g, left, right, cfg)?);
    let (mut left, mut right) = (left, right);
    for l in 0..cfg.layers - 1 {
        let c = ctx.clone();
        let f: SegmentFn<'p, F> = Rc::new(move |g: &mut Graph<'p, F>, ins: &[Var]| {
            let (a, b) = c.layer(g, l, ins[0], ins[1], &mut None)?;
            Ok(vec![a, b])
        });
        let out = g.checkpoint(&[left, right], f)?;
        (left, right) = (out[0], out[1]);
    }
    let c = ctx.clone();
    let f: SegmentFn<'p, F> = Rc::new(move |g: &mut Graph<'p, F>, ins: &[Var]| {
        let (s, a, b) = c.final_layer(g, ins[0], ins[1], &mut None)?;
        Ok(vec![s, a, b])
    });
    let out = g.checkpoint(&[left, right], f)?;
    Ok(TransformerOutput {
        scores: out[0],
        left: out[1],
        right: out[2],
    })
}

/// Attention of one direction in one layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectionReport {
    pub heads: usize,
    pub rows: usize,
    pub w_s: usize,
    /// Span of every `(head, row, source)` attention row, flattened.
    pub spans: Vec<usize>,
    pub mean_span: f64,
    /// Normalized attention `[heads, rows, W_s, W_s]`, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<f64>>,
}

/// Per-layer attention keyed by layer index and direction.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AttentionReport {
    pub layers: BTreeMap<usize, BTreeMap<String, DirectionReport>>,
}

/// Eagerly evaluates the transformer and records every attention map.
pub fn attention_report<F: Scalar>(
    g: &mut Graph<'_, F>,
    left: Var,
    right: Var,
    cfg: &TransformerConfig,
    include_attention: bool,
) -> Result<AttentionReport> {
    let ctx = context(g, left, right, cfg)?;
    let mut col: Collector = Some(Vec::new());
    let (mut l_v, mut r_v) = (left, right);
    for l in 0..cfg.layers - 1 {
        (l_v, r_v) = ctx.layer(g, l, l_v, r_v, &mut col)?;
    }
    ctx.final_layer(g, l_v, r_v, &mut col)?;
    let mut report = AttentionReport::default();
    for (layer, dir, alphas) in col.unwrap_or_default() {
        let shape = g.shape(alphas[0]).to_vec();
        let (rows, w) = (shape[0], shape[2]);
        let mut spans = Vec::new();
        let mut all = Vec::new();
        for &a in &alphas {
            let v = g.value(a).to_f64_vec();
            spans.extend(v.chunks(w).map(attention_span));
            if include_attention {
                all.extend(v);
            }
        }
        let mean_span = spans.iter().sum::<usize>() as f64 / spans.len().max(1) as f64;
        report.layers.entry(layer).or_default().insert(
            dir.to_string(),
            DirectionReport {
                heads: alphas.len(),
                rows,
                w_s: w,
                spans,
                mean_span,
                attention: include_attention.then_some(all),
            },
        );
    }
    Ok(report)
}

/// Splits a batch of head-stacked score maps into a [`ScoreTensor`].
pub fn score_tensor<F: Scalar>(side: Side, per_head: &[&Tensor<F>]) -> Result<ScoreTensor<F>> {
    let s = per_head
        .first()
        .ok_or_else(|| Error::dim("score_tensor", "no heads"))?
        .shape()
        .to_vec();
    if s.len() != 3 || per_head.iter().any(|t| t.shape() != s) {
        return Err(Error::dim("score_tensor", format!("{s:?}")));
    }
    let (rows, w) = (s[0], s[1]);
    let heads = per_head.len();
    let mut data = Vec::with_capacity(rows * heads * w * w);
    for r in 0..rows {
        for t in per_head {
            data.extend_from_slice(&t.data()[r * w * w..(r + 1) * w * w]);
        }
    }
    Ok(ScoreTensor {
        side,
        values: Tensor::new(vec![rows, heads, w, s[2]], data)?,
    })
}

#[cfg(test)]
mod tests;
