//! Relative-position attention scores: the linear-memory implementation
//! against the per-pair reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2s_stereo::autodiff::Graph;
use s2s_stereo::params::ParameterStore;
use s2s_stereo::transformer::{attention_scores_efficient, attention_scores_naive, PosTerms, RelPosTable};
use s2s_stereo::Tensor;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> s2s_stereo::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = 8;
    println!("{:>4} {:>14} {:>16} {:>14}", "W_s", "max |diff|", "naive vectors", "tracked");
    for w in [2, 8, 16, 32, 64] {
        let (q, k) = (random(&mut rng, vec![w, c]), random(&mut rng, vec![w, c]));
        let (wq, wk) = (random(&mut rng, vec![c, c]), random(&mut rng, vec![c, c]));
        let table = RelPosTable::new(w, c)?.tensor::<f64>();
        let (naive, vectors) = attention_scores_naive(&q, &k, Some((&table, &wq, &wk)))?;

        let store = ParameterStore::new();
        let mut g = Graph::new(&store).frozen();
        let qv = g.input(q.reshape(vec![1, w, c])?)?;
        let kv = g.input(k.reshape(vec![1, w, c])?)?;
        let pos = PosTerms {
            table: g.input(table)?,
            wq: g.input(wq)?,
            wk: g.input(wk)?,
        };
        let s = attention_scores_efficient(&mut g, qv, kv, Some(pos))?;
        let diff = g.value(s).clone().reshape(vec![w, w])?.max_abs_diff(&naive);
        let tracked = g.tracker().borrow().position_vectors();
        println!("{w:>4} {diff:>14.3e} {vectors:>16} {tracked:>14}");
    }
    Ok(())
}
