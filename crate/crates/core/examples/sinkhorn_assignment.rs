//! Entropy-regularized transport: marginal convergence and, at small γ,
//! agreement with the exact assignment.

use s2s_stereo::transport::{assignment_bruteforce, augment_with_dustbins, dustbin_marginals, sinkhorn, CostMatrix, OTConfig};
use s2s_stereo::Tensor;

fn main() -> s2s_stereo::Result<()> {
    let cost = Tensor::from_f64(
        vec![4, 4],
        &[
            0.1, 1.2, 1.5, 1.1, //
            1.3, 1.4, 0.2, 1.6, //
            1.2, 0.1, 1.9, 1.0, //
            1.8, 1.1, 1.3, 0.3,
        ],
    )?;
    let uniform = vec![0.25; 4];
    for iterations in [1, 10, 200] {
        let cfg = OTConfig {
            iterations,
            ..Default::default()
        };
        let (row, col) = sinkhorn(&cost, &uniform, &uniform, &cfg)?.marginal_errors();
        println!("γ = 1, {iterations:>3} iterations: marginal L1 errors rows {row:.2e}, columns {col:.2e}");
    }

    let sharp = OTConfig {
        gamma: 0.05,
        iterations: 200,
        log_domain: true,
    };
    let t = sinkhorn(&cost, &uniform, &uniform, &sharp)?;
    let argmax: Vec<usize> = t
        .t
        .data()
        .chunks(4)
        .map(|r| (0..4).fold(0, |k, j| if r[j] > r[k] { j } else { k }))
        .collect();
    let (best, total) = assignment_bruteforce(&cost)?;
    println!("γ = 0.05 row argmax {argmax:?}, optimal permutation {best:?} (cost {total:.2})");

    // With dustbins an expensive row prefers to stay unmatched.
    let mut values = cost.clone();
    values.data_mut()[12..16].iter_mut().for_each(|v| *v += 5.0);
    let aug = augment_with_dustbins(&CostMatrix::new(values, None)?, 1.0)?;
    let marg = dustbin_marginals(4);
    let t = sinkhorn(&aug.values, &marg, &marg, &sharp)?;
    let last = &t.t.data()[15..20];
    println!("row 3 with dustbin: {:?}", last.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    Ok(())
}
