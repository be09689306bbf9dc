//! Per-head projections, relative-position attention scores and multi-head
//! attention with a residual connection.

use std::rc::Rc;

use crate::autodiff::{CustomOp, Graph, Mask, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Projection of one head's channel slice: `x[.., h·C_h..(h+1)·C_h]·W + b`.
pub fn project_head<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: Var,
    head: usize,
    c_h: usize,
    w: Var,
    b: Var,
) -> Result<Var> {
    let xs = g.slice_last(x, head * c_h, c_h)?;
    let y = g.matmul(xs, w)?;
    g.add_bias_last(y, b)
}

/// Query, key and value of head `head` for a source and a target line batch.
/// Parameters are looked up under `{prefix}.h{head}.{wq,bq,wk,bk,wv,bv}`.
pub fn project_qkv<F: Scalar>(
    g: &mut Graph<'_, F>,
    source: Var,
    target: Var,
    prefix: &str,
    head: usize,
    c_h: usize,
) -> Result<(Var, Var, Var)> {
    let p = |n: &str| format!("{prefix}.h{head}.{n}");
    let (wq, bq) = (g.param_named(&p("wq"))?, g.param_named(&p("bq"))?);
    let (wk, bk) = (g.param_named(&p("wk"))?, g.param_named(&p("bk"))?);
    let (wv, bv) = (g.param_named(&p("wv"))?, g.param_named(&p("bv"))?);
    let q = project_head(g, source, head, c_h, wq, bq)?;
    let k = project_head(g, target, head, c_h, wk, bk)?;
    let v = project_head(g, target, head, c_h, wv, bv)?;
    Ok((q, k, v))
}

/// Relative-position inputs of one head: its slice of the encoding table
/// (`[2W−1, C_h]`, row `r` holding offset `r − (W−1)`) and the head's query
/// and key projection matrices.
#[derive(Clone, Copy, Debug)]
pub struct PosTerms {
    pub table: Var,
    pub wq: Var,
    pub wk: Var,
}

/// Reads the diagonal pattern of a relative-offset product.
///
/// With `A: [B, W, 2W−1]`, the row variant returns `out[b,i,j] = A[b,i,i−j+W−1]`
/// and the column variant `out[b,i,j] = A[b,j,i−j+W−1]`.
struct RelGather {
    w: usize,
    by_column: bool,
}

impl RelGather {
    fn src_index(&self, b: usize, i: usize, j: usize) -> usize {
        let w = self.w;
        let r = i + w - 1 - j;
        let row = if self.by_column { j } else { i };
        (b * w + row) * (2 * w - 1) + r
    }

    fn forward<F: Scalar>(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let w = self.w;
        let batch = a.shape()[0];
        let mut out = Vec::with_capacity(batch * w * w);
        for b in 0..batch {
            for i in 0..w {
                for j in 0..w {
                    out.push(a.data()[self.src_index(b, i, j)]);
                }
            }
        }
        Tensor::new(vec![batch, w, w], out)
    }
}

impl<F: Scalar> CustomOp<F> for RelGather {
    fn name(&self) -> &'static str {
        "rel_gather"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let w = self.w;
        let batch = inputs[0].shape()[0];
        let mut ga = Tensor::zeros(inputs[0].shape().to_vec());
        let gd = grad.data();
        for b in 0..batch {
            for i in 0..w {
                for j in 0..w {
                    let s = self.src_index(b, i, j);
                    ga.data_mut()[s] = ga.data()[s] + gd[(b * w + i) * w + j];
                }
            }
        }
        Ok(vec![Some(ga)])
    }
}

fn rel_gather<F: Scalar>(g: &mut Graph<'_, F>, a: Var, w: usize, by_column: bool) -> Result<Var> {
    let op = RelGather { w, by_column };
    let v = op.forward(g.value(a))?;
    g.custom(&[a], v, Rc::new(op))
}

fn check_table(rows: usize, w: usize) -> Result<()> {
    if rows != 2 * w - 1 {
        return Err(Error::Index(format!(
            "relative offsets span ±{} but the table has {rows} rows (needs {})",
            w - 1,
            2 * w - 1
        )));
    }
    Ok(())
}

/// Scaled pre-softmax scores `[B, W, W]` for queries `q` and keys `k` (both
/// `[B, W, C_h]`).
///
/// With position terms the data-position and position-data products are
/// formed once against all `2W−1` projected offsets and then read off along
/// diagonals, so position memory grows linearly in `W`.
pub fn attention_scores_efficient<F: Scalar>(
    g: &mut Graph<'_, F>,
    q: Var,
    k: Var,
    pos: Option<PosTerms>,
) -> Result<Var> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq.len() != 3 || sq != sk {
        return Err(Error::dim("attention_scores", format!("q {sq:?}, k {sk:?}")));
    }
    let (w, c_h) = (sq[1], sq[2]);
    let kt = g.transpose_last2(k)?;
    let mut s = g.matmul(q, kt)?;
    if let Some(p) = pos {
        let ts = g.shape(p.table).to_vec();
        if ts.len() != 2 || ts[1] != c_h {
            return Err(Error::dim("attention_scores", format!("table {ts:?} for C_h={c_h}")));
        }
        check_table(ts[0], w)?;
        g.tracker().borrow_mut().add_position_vectors(ts[0]);
        let kr = g.matmul(p.table, p.wk)?;
        let qr = g.matmul(p.table, p.wq)?;
        let krt = g.transpose_last2(kr)?;
        let qrt = g.transpose_last2(qr)?;
        let a = g.matmul(q, krt)?;
        let d2p = rel_gather(g, a, w, false)?;
        let b = g.matmul(k, qrt)?;
        let p2d = rel_gather(g, b, w, true)?;
        s = g.add(s, d2p)?;
        s = g.add(s, p2d)?;
    }
    g.scale(s, 1.0 / (c_h as f64).sqrt())
}

/// Reference per-pair evaluation of the three-term relative score for one
/// line: `q, k: [W, C_h]`, optional `(table [2W−1, C_h], W_Q, W_K)`.
///
/// Every `(i, j)` pair projects its own offset encoding, materialising `W²`
/// position vectors; the count is returned alongside the scores.
pub fn attention_scores_naive<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    pos: Option<(&Tensor<F>, &Tensor<F>, &Tensor<F>)>,
) -> Result<(Tensor<F>, usize)> {
    if q.rank() != 2 || q.shape() != k.shape() {
        return Err(Error::dim("attention_scores_naive", format!("q {:?}, k {:?}", q.shape(), k.shape())));
    }
    let (w, c) = (q.shape()[0], q.shape()[1]);
    let (qd, kd) = (q.to_f64_vec(), k.to_f64_vec());
    let project = |e: &[f64], m: &Tensor<F>| -> Vec<f64> {
        let md = m.data();
        (0..c)
            .map(|o| (0..c).map(|i| e[i] * md[i * c + o].as_f64()).sum())
            .collect()
    };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let mut out = Vec::with_capacity(w * w);
    let mut vectors = 0;
    for i in 0..w {
        for j in 0..w {
            let (qi, kj) = (&qd[i * c..(i + 1) * c], &kd[j * c..(j + 1) * c]);
            let mut s = dot(qi, kj);
            if let Some((table, wq, wk)) = pos {
                let half = (table.shape()[0] as isize - 1) / 2;
                let r = i as isize - j as isize + half;
                if table.shape()[0] % 2 == 0 || r < 0 || r >= table.shape()[0] as isize {
                    return Err(Error::Index(format!(
                        "offset {} outside a table of {} rows",
                        i as isize - j as isize,
                        table.shape()[0]
                    )));
                }
                let r = r as usize;
                let e: Vec<f64> = table.data()[r * c..(r + 1) * c].iter().map(|v| v.as_f64()).collect();
                let kp = project(&e, wk);
                let qp = project(&e, wq);
                vectors += 1;
                s += dot(qi, &kp) + dot(&qp, kj);
            }
            out.push(F::from_f64(s / (c as f64).sqrt()));
        }
    }
    Ok((Tensor::new(vec![w, w], out)?, vectors))
}

/// Mask allowing target sample `j` for source sample `i` iff `j ≤ i`, i.e.
/// the right-image match lies at or left of the left-image pixel.
pub fn build_attention_mask(w_s: usize) -> Mask {
    Mask::from_fn(w_s, w_s, |i, j| j <= i)
}

/// Width (in samples) of the support of `alpha` strictly above the uniform
/// level `1/W`; 0 if no entry qualifies.
pub fn attention_span(alpha: &[f64]) -> usize {
    let u = 1.0 / alpha.len() as f64;
    let above: Vec<usize> = alpha
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > u)
        .map(|(i, _)| i)
        .collect();
    match (above.first(), above.last()) {
        (Some(lo), Some(hi)) => hi - lo + 1,
        _ => 0,
    }
}

/// Inputs shared by all heads of one attention block.
#[derive(Clone)]
pub struct AttentionInputs {
    /// Full encoding table `[2W−1, C_e]`, or `None` without relative encoding.
    pub table: Option<Var>,
    pub mask: Option<Rc<Mask>>,
}

/// Multi-head attention of `source` over `target` (both `[B, W, C_e]`) with a
/// residual: `source + W_O·concat(α_h V_h) + b_O`.
///
/// Returns the updated source and the per-head normalized attention.
pub fn mha_forward<F: Scalar>(
    g: &mut Graph<'_, F>,
    source: Var,
    target: Var,
    prefix: &str,
    heads: usize,
    inputs: &AttentionInputs,
) -> Result<(Var, Vec<Var>)> {
    let (ss, st) = (g.shape(source).to_vec(), g.shape(target).to_vec());
    if ss.len() != 3 || ss[2] != st[2] || ss[0] != st[0] {
        return Err(Error::dim("mha_forward", format!("source {ss:?}, target {st:?}")));
    }
    let c_e = ss[2];
    let c_h = c_e / heads;
    let mut ctx = Vec::with_capacity(heads);
    let mut alphas = Vec::with_capacity(heads);
    for h in 0..heads {
        let (q, k, v) = project_qkv(g, source, target, prefix, h, c_h)?;
        let scores = head_scores(g, q, k, prefix, h, c_h, inputs.table)?;
        g.mark_attention_scores(scores);
        let alpha = g.softmax_last(scores, inputs.mask.clone())?;
        ctx.push(g.matmul(alpha, v)?);
        alphas.push(alpha);
    }
    let cat = if heads == 1 { ctx[0] } else { g.concat_last(&ctx)? };
    let wo = g.param_named(&format!("{prefix}.wo"))?;
    let bo = g.param_named(&format!("{prefix}.bo"))?;
    let o = g.matmul(cat, wo)?;
    let o = g.add_bias_last(o, bo)?;
    Ok((g.add(source, o)?, alphas))
}

/// Scores of head `h`, including position terms when a table is given.
pub(crate) fn head_scores<F: Scalar>(
    g: &mut Graph<'_, F>,
    q: Var,
    k: Var,
    prefix: &str,
    h: usize,
    c_h: usize,
    table: Option<Var>,
) -> Result<Var> {
    let pos = match table {
        Some(t) => {
            let table = g.slice_last(t, h * c_h, c_h)?;
            let wq = g.param_named(&format!("{prefix}.h{h}.wq"))?;
            let wk = g.param_named(&format!("{prefix}.h{h}.wk"))?;
            Some(PosTerms { table, wq, wk })
        }
        None => None,
    };
    attention_scores_efficient(g, q, k, pos)
}
