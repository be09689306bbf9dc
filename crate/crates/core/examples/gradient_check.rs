//! Finite-difference check of a small attention block, with and without a
//! deliberately corrupted gradient rule.

use s2s_stereo::autodiff::{grad_check_with, Graph, Var};
use s2s_stereo::transformer::build_attention_mask;
use s2s_stereo::Tensor;

fn attention(g: &mut Graph<'_, f64>, x: Var) -> s2s_stereo::Result<Var> {
    let xt = g.transpose_last2(x)?;
    let scores = g.matmul(x, xt)?;
    let mask = std::rc::Rc::new(build_attention_mask(g.shape(x)[1]));
    let alpha = g.softmax_last(scores, Some(mask))?;
    let out = g.matmul(alpha, x)?;
    let sq = g.mul(out, out)?;
    g.sum(sq)
}

fn main() -> s2s_stereo::Result<()> {
    let data: Vec<f64> = (0..24).map(|k| ((k * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let point = Tensor::new(vec![2, 4, 3], data)?;
    for fault in [false, true] {
        let r = grad_check_with(attention, &point, 1e-5, fault)?;
        println!(
            "fault injection {fault:5}: max relative error {:.3e} at coordinate {} (analytic {:.6}, numeric {:.6})",
            r.max_rel_error, r.worst, r.analytic[r.worst], r.numeric[r.worst]
        );
    }
    Ok(())
}
