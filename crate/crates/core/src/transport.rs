//! Entropy-regularized optimal transport with dustbins, solved by unrolled
//! Sinkhorn iterations inside the autodiff graph.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Mask, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

/// Cost assigned to forbidden pairs before solving.
pub const MASKED_COST: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OTConfig {
    /// Entropy weight `γ`.
    pub gamma: f64,
    pub iterations: usize,
    pub log_domain: bool,
}

impl Default for OTConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            iterations: 10,
            log_domain: true,
        }
    }
}

impl OTConfig {
    pub fn validate<F: Scalar>(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("γ must be positive, got {}", self.gamma)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("Sinkhorn needs at least one iteration".into()));
        }
        if !self.log_domain && F::BITS < 64 {
            return Err(Error::Config("exp-domain Sinkhorn requires 64-bit precision".into()));
        }
        Ok(())
    }
}

/// A square matching cost with optional forbidden entries.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix<F> {
    pub values: Tensor<F>,
    pub mask: Option<Mask>,
}

impl<F: Scalar> CostMatrix<F> {
    /// Wraps `values`; forbidden entries (if `mask` is given) are replaced by
    /// [`MASKED_COST`]. Allowed entries must be finite.
    pub fn new(mut values: Tensor<F>, mask: Option<Mask>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] != values.shape()[1] {
            return Err(Error::dim("cost_matrix", format!("{:?}", values.shape())));
        }
        let n = values.shape()[0];
        if let Some(m) = &mask {
            if m.rows() != n || m.cols() != n {
                return Err(Error::dim("cost_matrix", format!("mask {}x{} for n={n}", m.rows(), m.cols())));
            }
        }
        for (idx, v) in values.data_mut().iter_mut().enumerate() {
            let allowed = mask.as_ref().map_or(true, |m| m.allowed(idx / n, idx % n));
            if !allowed {
                *v = F::from_f64(MASKED_COST);
            } else if !v.is_finite() {
                return Err(Error::NonFinite { op: "cost_matrix".into() });
            }
        }
        Ok(Self { values, mask })
    }

    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Cost matrix grown by one dustbin row and column holding `φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedCost<F> {
    pub values: Tensor<F>,
}

struct AugmentDustbins {
    batch: usize,
    n: usize,
}

impl AugmentDustbins {
    fn forward<F: Scalar>(&self, cost: &[F], phi: F) -> Vec<F> {
        let (n, m) = (self.n, self.n + 1);
        let mut out = vec![phi; self.batch * m * m];
        for b in 0..self.batch {
            for i in 0..n {
                let src = &cost[(b * n + i) * n..(b * n + i + 1) * n];
                out[(b * m + i) * m..(b * m + i) * m + n].copy_from_slice(src);
            }
        }
        out
    }
}

impl<F: Scalar> CustomOp<F> for AugmentDustbins {
    fn name(&self) -> &'static str {
        "augment_dustbins"
    }

    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let (n, m) = (self.n, self.n + 1);
        let mut gc = Vec::with_capacity(self.batch * n * n);
        let mut gphi = F::zero();
        for b in 0..self.batch {
            for i in 0..m {
                for j in 0..m {
                    let v = grad.data()[(b * m + i) * m + j];
                    if i < n && j < n {
                        gc.push(v);
                    } else {
                        gphi = gphi + v;
                    }
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(vec![self.batch, n, n], gc)?),
            Some(Tensor::new(vec![1], vec![gphi])?),
        ])
    }
}

/// Graph form of [`augment_with_dustbins`] for a batch `[B, n, n]` and a
/// one-element `φ`.
pub fn augment_dustbins<F: Scalar>(g: &mut Graph<'_, F>, cost: Var, phi: Var) -> Result<Var> {
    let s = g.shape(cost).to_vec();
    if s.len() != 3 || s[1] != s[2] || g.value(phi).len() != 1 {
        return Err(Error::dim("augment_dustbins", format!("cost {s:?}, φ {:?}", g.shape(phi))));
    }
    let op = AugmentDustbins { batch: s[0], n: s[1] };
    let v = op.forward(g.value(cost).data(), g.value(phi).item());
    let v = Tensor::new(vec![s[0], s[1] + 1, s[1] + 1], v)?;
    g.custom(&[cost, phi], v, Rc::new(op))
}

pub fn augment_with_dustbins<F: Scalar>(cost: &CostMatrix<F>, phi: f64) -> Result<AugmentedCost<F>> {
    if !phi.is_finite() {
        return Err(Error::Parameter(format!("dustbin cost φ = {phi} is not finite")));
    }
    let n = cost.n();
    let op = AugmentDustbins { batch: 1, n };
    let v = op.forward(cost.values.data(), F::from_f64(phi));
    Ok(AugmentedCost {
        values: Tensor::new(vec![n + 1, n + 1], v)?,
    })
}

/// Marginals for `n` samples plus a dustbin: mass 1 per sample and `n` for
/// the dustbin, normalized to total 1.
pub fn dustbin_marginals(n: usize) -> Vec<f64> {
    let total = 2.0 * n as f64;
    let mut m = vec![1.0 / total; n + 1];
    m[n] = n as f64 / total;
    m
}

fn check_marginals(a: &[f64], b: &[f64]) -> Result<()> {
    if a.iter().chain(b).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Contract("marginals must be strictly positive".into()));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-9 * sa {
        return Err(Error::Marginal { row: sa, col: sb });
    }
    Ok(())
}

fn tile<F: Scalar>(v: &[f64], batch: usize, f: impl Fn(f64) -> f64) -> Vec<F> {
    (0..batch).flat_map(|_| v.iter().map(|&x| F::from_f64(f(x)))).collect()
}

/// Coupling `T` for a batch of costs `[B, m, n]` and marginals `a` (length
/// `m`), `b` (length `n`), shared by every batch item.
///
/// The log-domain form alternates `f = log a − LSE_j(Z + g)` and
/// `g = log b − LSE_i(Z + f)` with `Z = −cost/γ`, starting from `g = 0`, and
/// returns `exp(Z + f + g)`. The exp-domain form alternates the equivalent
/// multiplicative scalings.
pub fn sinkhorn_graph<F: Scalar>(g: &mut Graph<'_, F>, cost: Var, a: &[f64], b: &[f64], cfg: &OTConfig) -> Result<Var> {
    cfg.validate::<F>()?;
    check_marginals(a, b)?;
    let s = g.shape(cost).to_vec();
    if s.len() != 3 || s[1] != a.len() || s[2] != b.len() {
        return Err(Error::dim(
            "sinkhorn",
            format!("cost {s:?} with marginals of length {} and {}", a.len(), b.len()),
        ));
    }
    let (batch, m, n) = (s[0], s[1], s[2]);
    let z = g.scale(cost, -1.0 / cfg.gamma)?;
    if cfg.log_domain {
        let log_a = g.input(Tensor::new(vec![batch, m], tile(a, batch, f64::ln))?)?;
        let log_b = g.input(Tensor::new(vec![batch, n], tile(b, batch, f64::ln))?)?;
        let zt = g.transpose_last2(z)?;
        let mut gv: Option<Var> = None;
        let mut fv = log_a;
        for _ in 0..cfg.iterations {
            let zg = match gv {
                Some(gv) => g.add_expand_mid(z, gv)?,
                None => z,
            };
            let lse = g.logsumexp_last(zg)?;
            fv = g.sub(log_a, lse)?;
            let zf = g.add_expand_mid(zt, fv)?;
            let lse = g.logsumexp_last(zf)?;
            gv = Some(g.sub(log_b, lse)?);
        }
        let zg = g.add_expand_mid(z, gv.expect("iterations ≥ 1"))?;
        let log_t = g.add_expand_last(zg, fv)?;
        g.exp(log_t)
    } else {
        let k = g.exp(z)?;
        let kt = g.transpose_last2(k)?;
        let av = g.input(Tensor::new(vec![batch, m, 1], tile(a, batch, |x| x))?)?;
        let bv = g.input(Tensor::new(vec![batch, n, 1], tile(b, batch, |x| x))?)?;
        let mut v = g.input(Tensor::full(vec![batch, n, 1], F::one()))?;
        let mut u = av;
        for _ in 0..cfg.iterations {
            let kv = g.matmul(k, v)?;
            u = g.div(av, kv)?;
            let ku = g.matmul(kt, u)?;
            v = g.div(bv, ku)?;
        }
        let vt = g.transpose_last2(v)?;
        let uv = g.matmul(u, vt)?;
        g.mul(k, uv)
    }
}

/// Soft assignment for one cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling<F> {
    pub t: Tensor<F>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl<F: Scalar> Coupling<F> {
    pub fn row_sums(&self) -> Vec<f64> {
        let n = self.t.shape()[1];
        self.t.data().chunks(n).map(|r| r.iter().map(|v| v.as_f64()).sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let n = self.t.shape()[1];
        let mut c = vec![0.0; n];
        for row in self.t.data().chunks(n) {
            for (acc, v) in c.iter_mut().zip(row) {
                *acc += v.as_f64();
            }
        }
        c
    }

    /// L1 distances of the row and column sums from `a` and `b`.
    pub fn marginal_errors(&self) -> (f64, f64) {
        let l1 = |x: Vec<f64>, y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>();
        (l1(self.row_sums(), &self.a), l1(self.col_sums(), &self.b))
    }
}

/// Solves a single `[m, n]` problem outside any training graph.
pub fn sinkhorn<F: Scalar>(cost: &Tensor<F>, a: &[f64], b: &[f64], cfg: &OTConfig) -> Result<Coupling<F>> {
    if cost.rank() != 2 {
        return Err(Error::dim("sinkhorn", format!("{:?}", cost.shape())));
    }
    let store = ParameterStore::<F>::new();
    let mut g = Graph::new(&store).frozen();
    let (m, n) = (cost.shape()[0], cost.shape()[1]);
    let c = g.input(cost.clone().reshape(vec![1, m, n])?)?;
    let t = sinkhorn_graph(&mut g, c, a, b, cfg)?;
    Ok(Coupling {
        t: g.value(t).clone().reshape(vec![m, n])?,
        a: a.to_vec(),
        b: b.to_vec(),
    })
}

/// Exact minimum-cost permutation by enumeration; `perm[i]` is the column
/// assigned to row `i`. Ties resolve to the lexicographically first.
pub fn assignment_bruteforce(cost: &Tensor<f64>) -> Result<(Vec<usize>, f64)> {
    if cost.rank() != 2 || cost.shape()[0] != cost.shape()[1] {
        return Err(Error::dim("assignment_bruteforce", format!("{:?}", cost.shape())));
    }
    let n = cost.shape()[0];
    if n > 8 {
        return Err(Error::SizeGuard(format!("brute-force assignment limited to n ≤ 8, got {n}")));
    }
    fn rec(c: &[f64], n: usize, row: usize, used: &mut [bool], cur: &mut Vec<usize>, acc: f64, best: &mut (Vec<usize>, f64)) {
        if row == n {
            if acc < best.1 {
                *best = (cur.clone(), acc);
            }
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(c, n, row + 1, used, cur, acc + c[row * n + j], best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (Vec::new(), f64::INFINITY);
    rec(cost.data(), n, 0, &mut vec![false; n], &mut Vec::with_capacity(n), 0.0, &mut best);
    Ok(best)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    #[test]
    fn augmentation_cases() {
        let c = CostMatrix::new(Tensor::<f64>::from_f64(vec![1, 1], &[2.5]).unwrap(), None).unwrap();
        let a = augment_with_dustbins(&c, 0.75).unwrap();
        assert_eq!(a.values.data(), &[2.5, 0.75, 0.75, 0.75]);
        let z = CostMatrix::new(Tensor::<f64>::zeros(vec![1, 1]), None).unwrap();
        assert!(augment_with_dustbins(&z, 0.0).unwrap().values.data().iter().all(|&v| v == 0.0));
        assert!(matches!(augment_with_dustbins(&c, f64::NAN), Err(Error::Parameter(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..9).map(|_| rng.gen()).collect();
        let c = CostMatrix::new(Tensor::<f64>::from_f64(vec![3, 3], &vals).unwrap(), None).unwrap();
        let a = augment_with_dustbins(&c, -1.0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let e = if i < 3 && j < 3 { vals[i * 3 + j] } else { -1.0 };
                assert_eq!(a.values.data()[i * 4 + j], e);
            }
        }
    }

    #[test]
    fn zero_cost_gives_uniform_plan() {
        let n = 4;
        let c = sinkhorn(&Tensor::<f64>::zeros(vec![n, n]), &uniform(n), &uniform(n), &OTConfig::default()).unwrap();
        assert!(c.t.data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn diagonal_cost_recovers_identity() {
        for n in 2..=5 {
            let mut d = vec![10.0; n * n];
            (0..n).for_each(|i| d[i * n + i] = 0.0);
            let cost = Tensor::<f64>::from_f64(vec![n, n], &d).unwrap();
            let cfg = OTConfig {
                gamma: 0.05,
                iterations: 200,
                log_domain: true,
            };
            let c = sinkhorn(&cost, &uniform(n), &uniform(n), &cfg).unwrap();
            let (perm, total) = assignment_bruteforce(&cost).unwrap();
            assert_eq!(perm, (0..n).collect::<Vec<_>>());
            assert_eq!(total, 0.0);
            for i in 0..n {
                let row = &c.t.data()[i * n..(i + 1) * n];
                let k = (0..n).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
                assert_eq!(k, perm[i]);
            }
        }
    }

    #[test]
    fn bruteforce_cases() {
        let (p, c) = assignment_bruteforce(&Tensor::<f64>::from_f64(vec![2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!((p, c), (vec![0, 1], 0.0));
        let (p, c) = assignment_bruteforce(&Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        assert_eq!((p, c), (vec![1, 0], 0.0));
        assert!(matches!(
            assignment_bruteforce(&Tensor::zeros(vec![9, 9])),
            Err(Error::SizeGuard(_))
        ));
    }

    #[test]
    fn marginal_mismatch_rejected() {
        let r = sinkhorn(&Tensor::<f64>::zeros(vec![2, 2]), &[0.5, 0.5], &[0.5, 0.6], &OTConfig::default());
        assert!(matches!(r, Err(Error::Marginal { .. })));
    }

    #[test]
    fn exp_domain_agrees_and_is_refused_in_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..2.0)).collect();
        let cost = Tensor::<f64>::from_f64(vec![5, 5], &vals).unwrap();
        let mut cfg = OTConfig::default();
        let log = sinkhorn(&cost, &uniform(5), &uniform(5), &cfg).unwrap();
        cfg.log_domain = false;
        let exp = sinkhorn(&cost, &uniform(5), &uniform(5), &cfg).unwrap();
        assert!(log.t.max_abs_diff(&exp.t) < 1e-12);
        assert!(matches!(
            sinkhorn(&cost.cast::<f32>(), &uniform(5), &uniform(5), &cfg),
            Err(Error::Config(_))
        ));
        cfg.gamma = 1e-3;
        let big = Tensor::<f64>::from_f64(vec![2, 2], &[-5.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            sinkhorn(&big, &uniform(2), &uniform(2), &cfg),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn masked_entries_carry_no_mass() {
        let n = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = Mask::from_fn(n, n, |i, j| j <= i);
        let c = CostMatrix::new(Tensor::<f64>::from_f64(vec![n, n], &vals).unwrap(), Some(mask.clone())).unwrap();
        let aug = augment_with_dustbins(&c, 1.0).unwrap();
        let m = dustbin_marginals(n);
        let t = sinkhorn(&aug.values, &m, &m, &OTConfig::default()).unwrap();
        for i in 0..n {
            for j in 0..n {
                if !mask.allowed(i, j) {
                    assert!(t.t.data()[i * (n + 1) + j] < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gradients_through_unrolled_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let point = Tensor::<f64>::from_f64(vec![1, 4, 4], &(0..16).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
        let wt = Tensor::<f64>::from_f64(vec![1, 5, 5], &w).unwrap();
        for log_domain in [true, false] {
            let cfg = OTConfig {
                log_domain,
                ..Default::default()
            };
            let m = dustbin_marginals(4);
            // Differentiate w.r.t. the cost entries.
            let r = grad_check(
                |g, x| {
                    let phi = g.input(Tensor::from_f64(vec![1], &[0.3])?)?;
                    let aug = augment_dustbins(g, x, phi)?;
                    let t = sinkhorn_graph(g, aug, &m, &m, &cfg)?;
                    let wv = g.input(wt.clone())?;
                    let p = g.mul(t, wv)?;
                    g.sum(p)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-4, "cost, log={log_domain}: {}", r.max_rel_error);
            // And w.r.t. φ.
            let r = grad_check(
                |g, phi| {
                    let c = g.input(point.clone())?;
                    let aug = augment_dustbins(g, c, phi)?;
                    let t = sinkhorn_graph(g, aug, &m, &m, &cfg)?;
                    let wv = g.input(wt.clone())?;
                    let p = g.mul(t, wv)?;
                    g.sum(p)
                },
                &Tensor::from_f64(vec![1], &[0.3]).unwrap(),
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-4, "φ, log={log_domain}: {}", r.max_rel_error);
        }
    }
}
