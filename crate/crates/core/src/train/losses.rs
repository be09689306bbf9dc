//! Relative response, smooth-L1 and occlusion cross-entropy losses.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Var};
use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::strided_len;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-20;
/// Clamp margin of the occlusion cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rr: f64,
    pub d1_raw: f64,
    pub d1_final: f64,
    pub be_final: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rr: 1.0,
            d1_raw: 1.0,
            d1_final: 1.0,
            be_final: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 4] {
        [self.rr, self.d1_raw, self.d1_final, self.be_final]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rr: f64,
    pub d1_raw: f64,
    pub d1_final: f64,
    pub be_final: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 4] = ["rr", "d1_raw", "d1_final", "be_final"];

    pub fn as_array(&self) -> [f64; 4] {
        [self.rr, self.d1_raw, self.d1_final, self.be_final]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            rr: v[0],
            d1_raw: v[1],
            d1_final: v[2],
            be_final: v[3],
        }
    }
}

fn check_finite(values: [f64; 4]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            op: format!("loss component {}", LossComponents::NAMES[i]),
        }),
        None => Ok(()),
    }
}

/// Weighted sum of the four components.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    check_finite(c.as_array())?;
    Ok(c.as_array().iter().zip(w.as_array()).map(|(c, w)| c * w).sum())
}

/// Graph form of [`total_loss`]; components are scalar vars in
/// [`LossComponents::NAMES`] order.
pub fn total_loss_graph<F: Scalar>(g: &mut Graph<'_, F>, parts: [Var; 4], w: &LossWeights) -> Result<Var> {
    check_finite(parts.map(|p| g.value(p).item().as_f64()))?;
    let mut acc: Option<Var> = None;
    for (p, wt) in parts.into_iter().zip(w.as_array()) {
        let term = g.scale(p, wt)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("four components"))
}

/// Supervision of one sampled left position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RrTarget {
    /// Matched at a fractional position on the sampled line.
    Matched(f64),
    /// Occluded or projecting outside the image: supervised on the dustbin.
    Unmatched,
    /// Excluded from the loss.
    Ignored,
}

/// Relative response targets for a sample at stride `s`, `[H_s·W_s]`
/// row-major, and the number of positions excluded because their target lies
/// beyond the sampled line.
pub fn rr_targets(sample: &StereoSample, s: usize, d_cap: Option<f64>) -> (Vec<RrTarget>, usize) {
    let (hs, ws) = (strided_len(sample.height, s), strided_len(sample.width, s));
    let mut out = Vec::with_capacity(hs * ws);
    let mut beyond = 0;
    for r in 0..hs {
        for i in 0..ws {
            let px = (r * s) * sample.width + i * s;
            let d = sample.gt_disparity.data()[px];
            let target = (i * s) as f64 - d;
            out.push(if d_cap.is_some_and(|c| d >= c) {
                RrTarget::Ignored
            } else if sample.gt_occlusion[px] || target < 0.0 {
                RrTarget::Unmatched
            } else if target / s as f64 > (ws - 1) as f64 {
                beyond += 1;
                RrTarget::Ignored
            } else {
                RrTarget::Matched(target / s as f64)
            });
        }
    }
    (out, beyond)
}

/// Pixels supervised by the disparity terms: not occluded and below `d_cap`.
pub fn disparity_mask(sample: &StereoSample, d_cap: Option<f64>) -> Vec<bool> {
    sample
        .gt_disparity
        .data()
        .iter()
        .zip(&sample.gt_occlusion)
        .map(|(&d, &o)| !o && d_cap.map_or(true, |c| d < c))
        .collect()
}

/// Pixels supervised by the occlusion term: below `d_cap`.
pub fn occlusion_mask(sample: &StereoSample, d_cap: Option<f64>) -> Vec<bool> {
    sample
        .gt_disparity
        .data()
        .iter()
        .map(|&d| d_cap.map_or(true, |c| d < c))
        .collect()
}

/// One term of the relative response loss: entry weights and normalizer.
struct RrTerm {
    entries: [(usize, f64); 2],
    norm: f64,
}

struct RrLoss {
    terms: Vec<RrTerm>,
}

impl RrLoss {
    fn response<F: Scalar>(t: &Tensor<F>, term: &RrTerm) -> f64 {
        term.entries.iter().map(|&(k, w)| w * t.data()[k].as_f64()).sum()
    }
}

impl<F: Scalar> CustomOp<F> for RrLoss {
    fn name(&self) -> &'static str {
        "rr_loss"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let t = inputs[0];
        let gv = grad.item().as_f64();
        let mut gt = vec![0.0f64; t.len()];
        for term in &self.terms {
            let r = Self::response(t, term);
            if r <= PROB_FLOOR {
                continue;
            }
            for &(k, w) in &term.entries {
                gt[k] -= gv * w / (r * term.norm);
            }
        }
        Ok(vec![Some(Tensor::new(
            t.shape().to_vec(),
            gt.into_iter().map(F::from_f64).collect(),
        )?)])
    }
}

/// Relative response loss of a row-normalized coupling `[H_s, W_s+1, W_s+1]`:
/// the mean of `−log t*` over matched positions, where `t*` linearly
/// interpolates the two nearest samples, plus the mean of `−log t_φ` over
/// unmatched positions. An empty set contributes zero.
pub fn rr_loss<F: Scalar>(g: &mut Graph<'_, F>, coupling: Var, targets: &[RrTarget]) -> Result<Var> {
    let s = g.shape(coupling).to_vec();
    if s.len() != 3 || s[1] != s[2] || s[0] * (s[1] - 1) != targets.len() {
        return Err(Error::dim(
            "rr_loss",
            format!("coupling {s:?} with {} targets", targets.len()),
        ));
    }
    let (m, ws) = (s[1], s[1] - 1);
    let n_m = targets.iter().filter(|t| matches!(t, RrTarget::Matched(_))).count() as f64;
    let n_u = targets.iter().filter(|t| matches!(t, RrTarget::Unmatched)).count() as f64;
    let mut terms = Vec::new();
    for (idx, t) in targets.iter().enumerate() {
        let (b, i) = (idx / ws, idx % ws);
        let row = (b * m + i) * m;
        match *t {
            RrTarget::Matched(u) => {
                let j0 = (u.floor() as usize).min(ws - 1);
                let frac = u - j0 as f64;
                let j1 = (j0 + 1).min(ws - 1);
                terms.push(RrTerm {
                    entries: [(row + j0, 1.0 - frac), (row + j1, frac)],
                    norm: n_m,
                });
            }
            RrTarget::Unmatched => terms.push(RrTerm {
                entries: [(row + ws, 1.0), (row + ws, 0.0)],
                norm: n_u,
            }),
            RrTarget::Ignored => {}
        }
    }
    let tv = g.value(coupling);
    let value: f64 = terms
        .iter()
        .map(|term| -RrLoss::response(tv, term).max(PROB_FLOOR).ln() / term.norm)
        .sum();
    g.custom(&[coupling], Tensor::scalar(F::from_f64(value)), Rc::new(RrLoss { terms }))
}

struct SmoothL1 {
    diff: Vec<f64>,
    valid: Vec<bool>,
    count: usize,
}

impl<F: Scalar> CustomOp<F> for SmoothL1 {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let gv = grad.item().as_f64() / self.count.max(1) as f64;
        let data = self
            .diff
            .iter()
            .zip(&self.valid)
            .map(|(&x, &ok)| F::from_f64(if ok { gv * x.clamp(-1.0, 1.0) } else { 0.0 }))
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), data)?)])
    }
}

/// Mean smooth-L1 (transition at 1 px) over `valid` pixels; zero when no
/// pixel is valid.
pub fn smooth_l1<F: Scalar>(g: &mut Graph<'_, F>, pred: Var, gt: &Tensor<f64>, valid: &[bool]) -> Result<Var> {
    let p = g.value(pred);
    if p.shape() != gt.shape() || valid.len() != gt.len() {
        return Err(Error::dim(
            "smooth_l1",
            format!("pred {:?}, gt {:?}, {} mask entries", p.shape(), gt.shape(), valid.len()),
        ));
    }
    let diff: Vec<f64> = p.data().iter().zip(gt.data()).map(|(a, b)| a.as_f64() - b).collect();
    let count = valid.iter().filter(|&&v| v).count();
    let sum: f64 = diff
        .iter()
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .map(|(&x, _)| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 })
        .sum();
    let value = if count == 0 { 0.0 } else { sum / count as f64 };
    let op = SmoothL1 {
        diff,
        valid: valid.to_vec(),
        count,
    };
    g.custom(&[pred], Tensor::scalar(F::from_f64(value)), Rc::new(op))
}

struct Bce {
    labels: Vec<bool>,
    valid: Vec<bool>,
    count: usize,
}

impl<F: Scalar> CustomOp<F> for Bce {
    fn name(&self) -> &'static str {
        "bce_occ"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let gv = grad.item().as_f64() / self.count.max(1) as f64;
        let data = inputs[0]
            .data()
            .iter()
            .zip(self.labels.iter().zip(&self.valid))
            .map(|(&p, (&y, &ok))| {
                let p = p.as_f64();
                let inside = p > BCE_EPS && p < 1.0 - BCE_EPS;
                let y = if y { 1.0 } else { 0.0 };
                F::from_f64(if ok && inside { gv * (p - y) / (p * (1.0 - p)) } else { 0.0 })
            })
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), data)?)])
    }
}

/// Mean binary cross-entropy over `valid` pixels with predictions clamped to
/// `[ε, 1 − ε]`.
pub fn bce_occ<F: Scalar>(g: &mut Graph<'_, F>, pred: Var, labels: &[bool], valid: &[bool]) -> Result<Var> {
    let p = g.value(pred);
    if labels.len() != p.len() || valid.len() != p.len() {
        return Err(Error::dim(
            "bce_occ",
            format!("pred {:?}, {} labels, {} mask entries", p.shape(), labels.len(), valid.len()),
        ));
    }
    let count = valid.iter().filter(|&&v| v).count();
    let sum: f64 = p
        .data()
        .iter()
        .zip(labels.iter().zip(valid))
        .filter(|(_, (_, &ok))| ok)
        .map(|(&p, (&y, _))| {
            let p = p.as_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    let value = if count == 0 { 0.0 } else { sum / count as f64 };
    let op = Bce {
        labels: labels.to_vec(),
        valid: valid.to_vec(),
        count,
    };
    g.custom(&[pred], Tensor::scalar(F::from_f64(value)), Rc::new(op))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;
    use crate::params::ParameterStore;

    fn eval(f: impl FnOnce(&mut Graph<'_, f64>) -> Result<Var>) -> f64 {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    fn coupling(ws: usize, rows: &[&[(usize, f64)]]) -> Tensor<f64> {
        let m = ws + 1;
        let mut t = vec![0.0; m * m];
        for (i, entries) in rows.iter().enumerate() {
            for &(j, v) in *entries {
                t[i * m + j] = v;
            }
        }
        Tensor::new(vec![1, m, m], t).unwrap()
    }

    #[test]
    fn rr_cases() {
        // Row 0: all mass on its true target 0; row 1: occluded with full dustbin mass.
        let t = coupling(3, &[&[(0, 1.0)], &[(3, 1.0)], &[]]);
        let targets = [RrTarget::Matched(0.0), RrTarget::Unmatched, RrTarget::Ignored];
        let l = eval(|g| {
            let c = g.input(t.clone())?;
            rr_loss(g, c, &targets)
        });
        assert!(l.abs() < 1e-12);

        let t = coupling(3, &[&[(0, 0.4), (1, 0.4)], &[], &[]]);
        let targets = [RrTarget::Matched(0.5), RrTarget::Ignored, RrTarget::Ignored];
        let l = eval(|g| {
            let c = g.input(t.clone())?;
            rr_loss(g, c, &targets)
        });
        assert!((l - (-(0.4f64).ln())).abs() < 1e-12);
        assert!((l - 0.916).abs() < 1e-3);
    }

    #[test]
    fn rr_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let point = Tensor::new(vec![2, 5, 5], (0..50).map(|_| rng.gen_range(0.05..1.0)).collect()).unwrap();
        let targets = [
            RrTarget::Matched(0.0),
            RrTarget::Matched(1.25),
            RrTarget::Unmatched,
            RrTarget::Matched(3.0),
            RrTarget::Ignored,
            RrTarget::Matched(2.5),
            RrTarget::Unmatched,
            RrTarget::Matched(0.75),
        ];
        let r = grad_check(|g, t| rr_loss(g, t, &targets), &point, 1e-6).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn smooth_l1_cases() {
        let run = |pred: Vec<f64>, gt: Vec<f64>, valid: Vec<bool>| {
            eval(|g| {
                let n = pred.len();
                let p = g.input(Tensor::new(vec![n], pred)?)?;
                smooth_l1(g, p, &Tensor::new(vec![n], gt)?, &valid)
            })
        };
        assert_eq!(run(vec![1.0, 2.0], vec![1.0, 2.0], vec![true, true]), 0.0);
        assert_eq!(run(vec![1.5], vec![1.0], vec![true]), 0.125);
        assert_eq!(run(vec![4.0], vec![1.0], vec![true]), 2.5);
        assert_eq!(run(vec![4.0, 9.0], vec![1.0, 0.0], vec![true, false]), 2.5);
        assert_eq!(run(vec![4.0], vec![1.0], vec![false]), 0.0);
    }

    #[test]
    fn bce_cases() {
        let run = |p: f64, y: bool| {
            eval(|g| {
                let v = g.input(Tensor::new(vec![1], vec![p])?)?;
                bce_occ(g, v, &[y], &[true])
            })
        };
        assert!(run(1.0, true) < 1e-6);
        assert!((run(0.5, true) - 2f64.ln()).abs() < 1e-12);
        assert!((run(0.5, false) - 2f64.ln()).abs() < 1e-12);
        assert!((run(0.9, false) - 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn pointwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let point = Tensor::new(vec![12], (0..12).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
        let gt = Tensor::new(vec![12], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let valid: Vec<bool> = (0..12).map(|i| i % 4 != 0).collect();
        let labels: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let r = grad_check(|g, p| smooth_l1(g, p, &gt, &valid), &point, 1e-6).unwrap();
        assert!(r.max_rel_error <= 1e-4);
        let r = grad_check(|g, p| bce_occ(g, p, &labels, &valid), &point, 1e-6).unwrap();
        assert!(r.max_rel_error <= 1e-4);
    }

    #[test]
    fn total_loss_cases() {
        let c = LossComponents::from_array([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(total_loss(&c, &LossWeights::default()).unwrap(), 10.0);
        let zero = LossWeights {
            rr: 0.0,
            d1_raw: 0.0,
            d1_final: 0.0,
            be_final: 0.0,
        };
        assert_eq!(total_loss(&c, &zero).unwrap(), 0.0);
        let bad = LossComponents::from_array([1.0, 2.0, f64::NAN, 4.0]);
        match total_loss(&bad, &LossWeights::default()) {
            Err(Error::NonFinite { op }) => assert!(op.contains("d1_final")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn targets_follow_occlusion_and_cap() {
        let s = crate::data::synth_rds(&crate::data::SceneSpec {
            height: 4,
            width: 12,
            background_disparity: 3,
            layers: vec![],
            density: 0.5,
            smooth: false,
            seed: 1,
        })
        .unwrap();
        let (t, beyond) = rr_targets(&s, 1, None);
        assert_eq!(beyond, 0);
        assert_eq!(t[0], RrTarget::Unmatched);
        assert_eq!(t[5], RrTarget::Matched(2.0));
        let (t, _) = rr_targets(&s, 2, None);
        assert_eq!(t[2], RrTarget::Matched(0.5));
        let (t, _) = rr_targets(&s, 1, Some(3.0));
        assert!(t.iter().all(|&x| x == RrTarget::Ignored));
        assert!(disparity_mask(&s, Some(3.0)).iter().all(|&v| !v));
        assert_eq!(occlusion_mask(&s, None).len(), 48);
    }
}
