//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Nodes are appended in execution order, so the node list is already a
//! topological order and [`Graph::backward`] walks it once in reverse.
//!
//! Checkpoint segments ([`Graph::checkpoint`]) run a pure sub-computation in
//! a throwaway child graph when the graph is in [`ExecMode::Recompute`]: only
//! the segment outputs survive the forward pass and the segment is re-executed
//! during backward. Gradient accumulation inside a recomputed segment follows
//! exactly the same order as eager execution, so both modes produce
//! bit-identical gradients.

use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::kernels;
use crate::autodiff::mask::Mask;
use crate::autodiff::memory::{MemCategory, MemoryTracker, SharedTracker};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{numel, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecMode {
    /// Every intermediate stays alive until the graph is dropped.
    #[default]
    Eager,
    /// Checkpoint segments drop their intermediates after the forward pass
    /// and are re-executed on backward.
    Recompute,
}

/// A pure sub-computation that can be re-executed on backward.
pub type SegmentFn<'p, F> = Rc<dyn Fn(&mut Graph<'p, F>, &[Var]) -> Result<Vec<Var>> + 'p>;

/// A differentiable operation defined outside the core op set.
///
/// The caller computes the forward value and pushes it with
/// [`Graph::custom`]; the graph calls `backward` with the upstream gradient.
pub trait CustomOp<F: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradient for each input, in the order the inputs were given.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_out: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>>;
}

enum Op<'p, F: Scalar> {
    Input,
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    AddBiasLast(Var, Var),
    Sum(Var),
    Mean(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    TransposeLast2(Var),
    Reshape(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    Concat0(Vec<Var>),
    Softmax(Var),
    LogSumExpLast(Var),
    AddExpandLast(Var, Var),
    AddExpandMid(Var, Var),
    MaskedFill {
        x: Var,
        mask: Rc<Mask>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Rc<dyn CustomOp<F> + 'p>,
    },
    Segment {
        inputs: Vec<Var>,
        f: SegmentFn<'p, F>,
        n_out: usize,
    },
    SegmentOut {
        seg: Var,
        index: usize,
    },
}

struct Node<'p, F: Scalar> {
    value: Tensor<F>,
    op: Op<'p, F>,
    requires_grad: bool,
    tracked: Option<MemCategory>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    params: Vec<Option<Tensor<F>>>,
    leaves: HashMap<Var, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> &[Option<Tensor<F>>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Option<Tensor<F>>> {
        self.params
    }
}

pub struct Graph<'p, F: Scalar> {
    params: &'p ParameterStore<F>,
    nodes: Vec<Node<'p, F>>,
    tracker: SharedTracker,
    mode: ExecMode,
    params_require_grad: bool,
    fault_injection: bool,
}

impl<'p, F: Scalar> Drop for Graph<'p, F> {
    fn drop(&mut self) {
        let mut t = self.tracker.borrow_mut();
        for n in &self.nodes {
            if let Some(cat) = n.tracked {
                t.release(cat, n.value.size_bytes());
            }
        }
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ParameterStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            tracker: Rc::new(std::cell::RefCell::new(MemoryTracker::default())),
            mode: ExecMode::Eager,
            params_require_grad: true,
            fault_injection: false,
        }
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    /// Parameters enter the graph as constants; no parameter gradients are produced.
    pub fn frozen(mut self) -> Self {
        self.params_require_grad = false;
        self
    }

    /// Deliberately corrupts the gradient rules of elementwise multiplication
    /// and of the right matrix-product operand.
    /// Used as a negative control for the gradient checker.
    pub fn with_fault_injection(mut self, on: bool) -> Self {
        self.fault_injection = on;
        self
    }

    pub fn with_tracker(mut self, tracker: SharedTracker) -> Self {
        self.tracker = tracker;
        self
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn tracker(&self) -> SharedTracker {
        self.tracker.clone()
    }

    pub fn params(&self) -> &'p ParameterStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn child(&self) -> Graph<'p, F> {
        Graph {
            params: self.params,
            nodes: Vec::new(),
            tracker: self.tracker.clone(),
            mode: ExecMode::Eager,
            params_require_grad: self.params_require_grad,
            fault_injection: self.fault_injection,
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<'p, F>, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        let tracked = match op {
            Op::Input | Op::Leaf | Op::Param(_) => None,
            _ => {
                self.tracker
                    .borrow_mut()
                    .alloc(MemCategory::Intermediate, value.size_bytes());
                Some(MemCategory::Intermediate)
            }
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Re-files a node's buffer under [`MemCategory::AttentionScores`].
    pub fn mark_attention_scores(&mut self, v: Var) {
        let node = &mut self.nodes[v.0];
        if node.tracked == Some(MemCategory::AttentionScores) {
            return;
        }
        let bytes = node.value.size_bytes();
        let mut t = self.tracker.borrow_mut();
        if let Some(cat) = node.tracked {
            t.release(cat, bytes);
        }
        t.alloc(MemCategory::AttentionScores, bytes);
        node.tracked = Some(MemCategory::AttentionScores);
    }

    // ---- leaves ----------------------------------------------------------

    /// A constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t, Op::Input, false, "input")
    }

    /// A differentiable leaf whose gradient is reported in [`Gradients::leaf`].
    pub fn leaf(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t, Op::Leaf, true, "leaf")
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let t = self.params.get(id).clone();
        let rg = self.params_require_grad;
        self.push(t, Op::Param(id), rg, self.params.name(id).to_string().as_str())
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        self.param(id)
    }

    // ---- elementwise -----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip_map(a, b, |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Div(a, b), rg, "div")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = F::from_f64(c);
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = F::from_f64(c);
        let v = self.value(x).map(|e| e + c);
        let rg = self.rg(&[x]);
        self.push(v, Op::AddScalar(x), rg, "add_scalar")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| if e > F::zero() { e } else { F::zero() });
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| F::one() / (F::one() + (-e).exp()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(F::exp);
        let rg = self.rg(&[x]);
        self.push(v, Op::Exp(x), rg, "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(F::ln);
        let rg = self.rg(&[x]);
        self.push(v, Op::Log(x), rg, "log")
    }

    /// `x[.., j] + b[j]` for `b` of length equal to the last axis of `x`.
    pub fn add_bias_last(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(b) != [n] {
            return Err(Error::dim(
                "add_bias_last",
                format!("bias {:?} for input {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (e, &bv) in row.iter_mut().zip(&bias) {
                *e = *e + bv;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(v, Op::AddBiasLast(x, b), rg, "add_bias_last")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(F::zero(), |a, &v| a + v);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let s = t.data().iter().fold(F::zero(), |a, &v| a + v) / F::from_f64(t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, "mean")
    }

    // ---- linear algebra --------------------------------------------------

    /// Matrix product. Supports `[m,k]·[k,n]`, batched `[B,m,k]·[B,k,n]` and
    /// `[B,m,k]·[k,n]` with the right operand shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::dim("matmul", format!("{sa:?} x {sb:?}"));
        let (batch, m, k, n, shared_b, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(bad());
                }
                (1, sa[0], sa[1], sb[1], true, vec![sa[0], sb[1]])
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(bad());
                }
                (sa[0], sa[1], sa[2], sb[2], false, vec![sa[0], sa[1], sb[2]])
            }
            (3, 2) => {
                if sa[2] != sb[0] {
                    return Err(bad());
                }
                (sa[0], sa[1], sa[2], sb[1], true, vec![sa[0], sa[1], sb[1]])
            }
            _ => return Err(bad()),
        };
        let mut out = vec![F::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let bsl = if shared_b {
                    db
                } else {
                    &db[bi * k * n..(bi + 1) * k * n]
                };
                kernels::gemm_nn(
                    &da[bi * m * k..(bi + 1) * m * k],
                    bsl,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
            "matmul",
        )
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("transpose_last2", format!("{s:?}")));
        }
        let v = transpose_last2(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::TransposeLast2(x), rg, "transpose")
    }

    // ---- shape -----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(v, Op::Reshape(x), rg, "reshape")
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::dim("slice_last", "scalar input"))?;
        if start + len > n {
            return Err(Error::dim(
                "slice_last",
                format!("[{start}, {}) of {n}", start + len),
            ));
        }
        let data: Vec<F> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data)?, Op::SliceLast { x, start }, rg, "slice_last")
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::dim("concat_last", "no inputs"))?).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if &s[..s.len() - 1] != lead {
                return Err(Error::dim("concat_last", format!("{first:?} vs {s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let rows = numel(lead);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(xs);
        self.push(Tensor::new(shape, data)?, Op::ConcatLast(xs.to_vec()), rg, "concat_last")
    }

    /// Concatenation along the leading axis (channel axis of `C×H×W` maps).
    pub fn concat0(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::dim("concat0", "no inputs"))?).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::dim("concat0", format!("{first:?} vs {s:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let rg = self.rg(xs);
        self.push(Tensor::new(shape, data)?, Op::Concat0(xs.to_vec()), rg, "concat0")
    }

    // ---- normalization ---------------------------------------------------

    fn check_mask(&self, op: &'static str, x: Var, mask: &Mask) -> Result<(usize, usize)> {
        let s = self.shape(x);
        let n = *s.last().ok_or_else(|| Error::dim(op, "scalar input"))?;
        let m = if s.len() >= 2 { s[s.len() - 2] } else { 1 };
        if mask.rows() != m || mask.cols() != n {
            return Err(Error::dim(
                op,
                format!("mask {}x{} for input {s:?}", mask.rows(), mask.cols()),
            ));
        }
        Ok((m, n))
    }

    /// Softmax over the last axis. Masked entries are excluded from the
    /// normalization (treated as negative infinity) and come out exactly 0.
    pub fn softmax_last(&mut self, x: Var, mask: Option<Rc<Mask>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::dim("softmax", "scalar input"))?;
        let m = match &mask {
            Some(mk) => self.check_mask("softmax", x, mk)?.0,
            None => 1,
        };
        let mut out = vec![F::zero(); numel(&s)];
        for (si, (row, orow)) in self
            .value(x)
            .data()
            .chunks(n)
            .zip(out.chunks_mut(n))
            .enumerate()
        {
            let allowed = |j: usize| mask.as_ref().map_or(true, |mk| mk.allowed(si % m, j));
            let mut mx = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > mx {
                    mx = v;
                }
            }
            if mx == F::neg_infinity() {
                return Err(Error::DegenerateSlice {
                    op: "softmax",
                    slice: si,
                });
            }
            let mut total = F::zero();
            for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if allowed(j) {
                    *o = (v - mx).exp();
                    total = total + *o;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / total;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(s, out)?, Op::Softmax(x), rg, "softmax")
    }

    /// `log Σ_j exp(x[.., j])`, dropping the last axis.
    pub fn logsumexp_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::dim("logsumexp", "scalar input"))?;
        let out: Vec<F> = self
            .value(x)
            .data()
            .chunks(n)
            .map(|row| {
                let mx = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
                let total = row.iter().fold(F::zero(), |a, &v| a + (v - mx).exp());
                mx + total.ln()
            })
            .collect();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(s[..s.len() - 1].to_vec(), out)?,
            Op::LogSumExpLast(x),
            rg,
            "logsumexp",
        )
    }

    /// `x[.., j] + v[..]`.
    pub fn add_expand_last(&mut self, x: Var, v: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::dim("add_expand_last", "scalar input"))?;
        if self.shape(v) != &s[..s.len() - 1] {
            return Err(Error::dim(
                "add_expand_last",
                format!("{:?} onto {s:?}", self.shape(v)),
            ));
        }
        let mut out = self.value(x).clone();
        let vd = self.value(v).data();
        for (row, &add) in out.data_mut().chunks_mut(n).zip(vd) {
            row.iter_mut().for_each(|e| *e = *e + add);
        }
        let rg = self.rg(&[x, v]);
        self.push(out, Op::AddExpandLast(x, v), rg, "add_expand_last")
    }

    /// `x[b, i, j] + v[b, j]` for `x: [B, m, n]`, `v: [B, n]`.
    pub fn add_expand_mid(&mut self, x: Var, v: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(v) != [s[0], s[2]] {
            return Err(Error::dim(
                "add_expand_mid",
                format!("{:?} onto {s:?}", self.shape(v)),
            ));
        }
        let (m, n) = (s[1], s[2]);
        let mut out = self.value(x).clone();
        let vd = self.value(v).data();
        for (bi, mat) in out.data_mut().chunks_mut(m * n).enumerate() {
            let vrow = &vd[bi * n..(bi + 1) * n];
            for row in mat.chunks_mut(n) {
                for (e, &a) in row.iter_mut().zip(vrow) {
                    *e = *e + a;
                }
            }
        }
        let rg = self.rg(&[x, v]);
        self.push(out, Op::AddExpandMid(x, v), rg, "add_expand_mid")
    }

    /// Replaces forbidden entries with a constant; they pass no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: Rc<Mask>, value: f64) -> Result<Var> {
        let (m, n) = self.check_mask("masked_fill", x, &mask)?;
        let fill = F::from_f64(value);
        let mut out = self.value(x).clone();
        for (si, row) in out.data_mut().chunks_mut(n).enumerate() {
            for (j, e) in row.iter_mut().enumerate() {
                if !mask.allowed(si % m, j) {
                    *e = fill;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::MaskedFill { x, mask }, rg, "masked_fill")
    }

    // ---- convolution -----------------------------------------------------

    /// Same-padded stride-1 convolution of a `C_in×H×W` map.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::dim("conv2d", format!("input {sx:?}, kernels {sw:?}")));
        }
        if sw[2] % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel size {} is even", sw[2])));
        }
        if sw[1] != sx[0] {
            return Err(Error::dim(
                "conv2d",
                format!("kernels expect {} channels, input has {}", sw[1], sx[0]),
            ));
        }
        if sb != [sw[0]] {
            return Err(Error::dim("conv2d", format!("bias {sb:?} for {} outputs", sw[0])));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let mut out = vec![F::zero(); cout * h * wd];
        kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &mut out,
            cin,
            cout,
            h,
            wd,
            k,
        );
        let rg = self.rg(&[x, w, b]);
        self.push(Tensor::new(vec![cout, h, wd], out)?, Op::Conv2d { x, w, b }, rg, "conv2d")
    }

    // ---- extension points ------------------------------------------------

    pub fn custom(&mut self, inputs: &[Var], value: Tensor<F>, op: Rc<dyn CustomOp<F> + 'p>) -> Result<Var> {
        let rg = self.rg(inputs);
        let name = op.name();
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
            name,
        )
    }

    /// Runs `f` as a checkpoint segment.
    ///
    /// In eager mode this is a plain call. In recompute mode `f` runs in a
    /// child graph whose intermediates are released as soon as the outputs
    /// are copied out; backward re-executes `f` and rejects the segment if
    /// the recomputed outputs differ from the recorded ones.
    pub fn checkpoint(&mut self, inputs: &[Var], f: SegmentFn<'p, F>) -> Result<Vec<Var>> {
        if self.mode == ExecMode::Eager {
            return f(self, inputs);
        }
        let mut seen = inputs.to_vec();
        seen.sort();
        seen.dedup();
        if seen.len() != inputs.len() {
            return Err(Error::Contract("checkpoint inputs must be distinct".into()));
        }
        let outputs: Vec<(Tensor<F>, bool)> = {
            let mut sub = self.child();
            let leaves = inputs
                .iter()
                .map(|&v| {
                    let rg = self.requires_grad(v);
                    sub.push(self.value(v).clone(), Op::Leaf, rg, "segment_input")
                })
                .collect::<Result<Vec<_>>>()?;
            let outs = f(&mut sub, &leaves)?;
            outs.iter()
                .map(|&o| (sub.value(o).clone(), sub.requires_grad(o)))
                .collect()
        };
        let any_rg = outputs.iter().any(|o| o.1);
        let seg = self.push(
            Tensor::zeros(vec![0]),
            Op::Segment {
                inputs: inputs.to_vec(),
                f,
                n_out: outputs.len(),
            },
            any_rg,
            "segment",
        )?;
        outputs
            .into_iter()
            .enumerate()
            .map(|(index, (value, rg))| self.push(value, Op::SegmentOut { seg, index }, rg, "segment"))
            .collect()
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every parameter and leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), F::one()));
        let mut params = vec![None; self.params.len()];
        let grads = self.backward_core(grads, &mut params)?;
        let leaves = grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) => Some((Var(i), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { params, leaves })
    }

    fn backward_core(
        &self,
        mut grads: Vec<Option<Tensor<F>>>,
        param_grads: &mut [Option<Tensor<F>>],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let mut seg_grads: HashMap<usize, Vec<Option<Tensor<F>>>> = HashMap::new();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if let Op::Segment { inputs, f, n_out } = &node.op {
                if let Some(out_grads) = seg_grads.remove(&idx) {
                    self.recompute_segment(idx, inputs, f, *n_out, out_grads, &mut grads, param_grads)?;
                }
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Input => {}
                Op::Leaf => grads[idx] = Some(g),
                Op::Param(id) => accumulate(&mut param_grads[id.0], g),
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *b, g.map(|e| -e));
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let fault = if self.fault_injection {
                        F::from_f64(1.5)
                    } else {
                        F::one()
                    };
                    let ga = zip(&g, self.value(*b), |x, y| x * y * fault);
                    let gb = zip(&g, self.value(*a), |x, y| x * y * fault);
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = zip(&g, tb, |x, y| x / y);
                    let gb = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(ta.data())
                            .zip(tb.data())
                            .map(|((&gv, &av), &bv)| -gv * av / (bv * bv))
                            .collect(),
                    )?;
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    self.acc(&mut grads, *x, g.map(|e| e * c));
                }
                Op::AddScalar(x) => self.acc(&mut grads, *x, g),
                Op::Relu(x) => {
                    let gx = zip(&g, self.value(*x), |gv, xv| if xv > F::zero() { gv } else { F::zero() });
                    self.acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = zip(&g, y, |gv, yv| gv * yv * (F::one() - yv));
                    self.acc(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = zip(&g, y, |gv, yv| gv * yv);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Log(x) => {
                    let gx = zip(&g, self.value(*x), |gv, xv| gv / xv);
                    self.acc(&mut grads, *x, gx);
                }
                Op::AddBiasLast(x, b) => {
                    let n = self.shape(*b)[0];
                    let mut gb = vec![F::zero(); n];
                    for row in g.data().chunks(n) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    self.acc(&mut grads, *b, Tensor::new(vec![n], gb)?);
                    self.acc(&mut grads, *x, g);
                }
                Op::Sum(x) => {
                    let s = self.shape(*x).to_vec();
                    self.acc(&mut grads, *x, Tensor::full(s, g.item()));
                }
                Op::Mean(x) => {
                    let t = self.value(*x);
                    let v = g.item() / F::from_f64(t.len() as f64);
                    self.acc(&mut grads, *x, Tensor::full(t.shape().to_vec(), v));
                }
                Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    shared_b,
                } => {
                    let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                    let (da, db) = (self.value(a).data(), self.value(b).data());
                    let gd = g.data();
                    if self.requires_grad(a) {
                        let mut ga = vec![F::zero(); batch * m * k];
                        for bi in 0..batch {
                            let bsl = if *shared_b { db } else { &db[bi * k * n..(bi + 1) * k * n] };
                            kernels::gemm_nt(
                                &gd[bi * m * n..(bi + 1) * m * n],
                                bsl,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        let s = self.shape(a).to_vec();
                        self.acc(&mut grads, a, Tensor::new(s, ga)?);
                    }
                    if self.requires_grad(b) {
                        let mut gb = vec![F::zero(); self.value(b).len()];
                        for bi in 0..batch {
                            let off = if *shared_b { 0 } else { bi * k * n };
                            kernels::gemm_tn(
                                &da[bi * m * k..(bi + 1) * m * k],
                                &gd[bi * m * n..(bi + 1) * m * n],
                                &mut gb[off..off + k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        if self.fault_injection {
                            gb.iter_mut().for_each(|v| *v = *v * F::from_f64(1.5));
                        }
                        let s = self.shape(b).to_vec();
                        self.acc(&mut grads, b, Tensor::new(s, gb)?);
                    }
                }
                Op::TransposeLast2(x) => {
                    self.acc(&mut grads, *x, transpose_last2(&g));
                }
                Op::Reshape(x) => {
                    let s = self.shape(*x).to_vec();
                    self.acc(&mut grads, *x, g.reshape(s)?);
                }
                Op::SliceLast { x, start } => {
                    let s = self.shape(*x).to_vec();
                    let n = *s.last().unwrap();
                    let len = *g.shape().last().unwrap();
                    let mut gx = Tensor::zeros(s);
                    for (dst, src) in gx.data_mut().chunks_mut(n).zip(g.data().chunks(len)) {
                        dst[*start..*start + len].copy_from_slice(src);
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::ConcatLast(xs) => {
                    let total = *g.shape().last().unwrap();
                    let mut off = 0;
                    for &x in xs {
                        let s = self.shape(x).to_vec();
                        let w = *s.last().unwrap();
                        let data: Vec<F> = g
                            .data()
                            .chunks(total)
                            .flat_map(|row| row[off..off + w].iter().copied())
                            .collect();
                        off += w;
                        self.acc(&mut grads, x, Tensor::new(s, data)?);
                    }
                }
                Op::Concat0(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let s = self.shape(x).to_vec();
                        let len = numel(&s);
                        let data = g.data()[off..off + len].to_vec();
                        off += len;
                        self.acc(&mut grads, x, Tensor::new(s, data)?);
                    }
                }
                Op::Softmax(x) => {
                    let n = *y.shape().last().unwrap();
                    let mut gx = vec![F::zero(); y.len()];
                    for ((yr, gr), out) in y.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot = yr.iter().zip(gr).fold(F::zero(), |a, (&yv, &gv)| a + yv * gv);
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
                }
                Op::LogSumExpLast(x) => {
                    let tx = self.value(*x);
                    let n = *tx.shape().last().unwrap();
                    let mut gx = vec![F::zero(); tx.len()];
                    for (r, (row, out)) in tx.data().chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                        let (lse, gv) = (y.data()[r], g.data()[r]);
                        for (o, &v) in out.iter_mut().zip(row) {
                            *o = gv * (v - lse).exp();
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(tx.shape().to_vec(), gx)?);
                }
                Op::AddExpandLast(x, v) => {
                    let n = *g.shape().last().unwrap();
                    let gv: Vec<F> = g
                        .data()
                        .chunks(n)
                        .map(|row| row.iter().fold(F::zero(), |a, &e| a + e))
                        .collect();
                    let sv = self.shape(*v).to_vec();
                    self.acc(&mut grads, *v, Tensor::new(sv, gv)?);
                    self.acc(&mut grads, *x, g);
                }
                Op::AddExpandMid(x, v) => {
                    let s = g.shape().to_vec();
                    let (bsz, m, n) = (s[0], s[1], s[2]);
                    let mut gv = vec![F::zero(); bsz * n];
                    for bi in 0..bsz {
                        let acc = &mut gv[bi * n..(bi + 1) * n];
                        for i in 0..m {
                            let row = &g.data()[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for (a, &e) in acc.iter_mut().zip(row) {
                                *a = *a + e;
                            }
                        }
                    }
                    self.acc(&mut grads, *v, Tensor::new(vec![bsz, n], gv)?);
                    self.acc(&mut grads, *x, g);
                }
                Op::MaskedFill { x, mask } => {
                    let n = mask.cols();
                    let m = mask.rows();
                    let mut gx = g;
                    for (si, row) in gx.data_mut().chunks_mut(n).enumerate() {
                        for (j, e) in row.iter_mut().enumerate() {
                            if !mask.allowed(si % m, j) {
                                *e = F::zero();
                            }
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Conv2d { x, w, b } => {
                    let (sx, sw) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                    let mut gi = vec![F::zero(); numel(&sx)];
                    let mut gk = vec![F::zero(); numel(&sw)];
                    let mut gb = vec![F::zero(); sw[0]];
                    kernels::conv2d_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        g.data(),
                        &mut gi,
                        &mut gk,
                        &mut gb,
                        sx[0],
                        sw[0],
                        sx[1],
                        sx[2],
                        sw[2],
                    );
                    self.acc(&mut grads, *b, Tensor::new(vec![sw[0]], gb)?);
                    self.acc(&mut grads, *w, Tensor::new(sw, gk)?);
                    self.acc(&mut grads, *x, Tensor::new(sx, gi)?);
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
                    let gs = op.backward(&ins, y, &g)?;
                    if gs.len() != inputs.len() {
                        return Err(Error::Contract(format!(
                            "{} returned {} gradients for {} inputs",
                            op.name(),
                            gs.len(),
                            inputs.len()
                        )));
                    }
                    for (&v, gv) in inputs.iter().zip(gs) {
                        if let Some(gv) = gv {
                            self.acc(&mut grads, v, gv);
                        }
                    }
                }
                Op::SegmentOut { seg, index } => {
                    let n_out = match &self.nodes[seg.0].op {
                        Op::Segment { n_out, .. } => *n_out,
                        _ => unreachable!("segment output without segment"),
                    };
                    seg_grads.entry(seg.0).or_insert_with(|| vec![None; n_out])[*index] = Some(g);
                }
                Op::Segment { .. } => unreachable!(),
            }
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn recompute_segment(
        &self,
        idx: usize,
        inputs: &[Var],
        f: &SegmentFn<'p, F>,
        n_out: usize,
        out_grads: Vec<Option<Tensor<F>>>,
        grads: &mut [Option<Tensor<F>>],
        param_grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let mut sub = self.child();
        let leaves = inputs
            .iter()
            .map(|&v| {
                let rg = self.requires_grad(v);
                sub.push(self.value(v).clone(), Op::Leaf, rg, "segment_input")
            })
            .collect::<Result<Vec<_>>>()?;
        let outs = f(&mut sub, &leaves)?;
        if outs.len() != n_out {
            return Err(Error::Contract("segment output count changed on recompute".into()));
        }
        for (k, &o) in outs.iter().enumerate() {
            if sub.value(o) != self.value(Var(idx + 1 + k)) {
                return Err(Error::Contract(
                    "checkpoint segment is not deterministic: recomputed output differs".into(),
                ));
            }
        }
        let mut sub_grads: Vec<Option<Tensor<F>>> = vec![None; sub.nodes.len()];
        // Segment inputs continue accumulating from the outer running sum so the
        // summation order matches eager execution exactly.
        for (&lv, &v) in leaves.iter().zip(inputs) {
            sub_grads[lv.0] = grads[v.0].take();
        }
        for (&o, g) in outs.iter().zip(out_grads) {
            if let Some(g) = g {
                accumulate(&mut sub_grads[o.0], g);
            }
        }
        let mut res = sub.backward_core(sub_grads, param_grads)?;
        for (&lv, &v) in leaves.iter().zip(inputs) {
            grads[v.0] = res[lv.0].take();
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if self.nodes[v.0].requires_grad {
            accumulate(&mut grads[v.0], g);
        }
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn zip<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn transpose_last2<F: Scalar>(t: &Tensor<F>) -> Tensor<F> {
    let s = t.shape();
    let r = s.len();
    let (m, n) = (s[r - 2], s[r - 1]);
    let batch = numel(&s[..r - 2]);
    let mut out = vec![F::zero(); t.len()];
    let d = t.data();
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = d[base + i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out).expect("same count")
}
