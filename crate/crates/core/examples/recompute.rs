//! Eager against recompute-on-backward execution of the toy model: equal
//! gradients, lower peak of live attention scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2s_stereo::autodiff::{ExecMode, Graph, MemCategory};
use s2s_stereo::config::{Preset, RunConfig};
use s2s_stereo::params::ParameterStore;
use s2s_stereo::train::sample_loss;

fn main() -> s2s_stereo::Result<()> {
    let cfg = RunConfig::preset(Preset::Toy);
    let store: ParameterStore<f32> = cfg.model.init(&mut ChaCha8Rng::seed_from_u64(0))?;
    let sample = cfg.data.sampler.samples(0, 1)?.remove(0);
    let mut results = Vec::new();
    for mode in [ExecMode::Eager, ExecMode::Recompute] {
        let mut g = Graph::new(&store).with_mode(mode);
        let sl = sample_loss(&mut g, &sample, &cfg.model, &cfg.weights, None)?;
        let grads = g.backward(sl.total)?.into_params();
        let peak = g.tracker().borrow().peak(MemCategory::AttentionScores);
        println!("{mode:?}: loss {:.6}, peak attention-score bytes {peak}", g.value(sl.total).item());
        results.push(grads);
    }
    let identical = results[0] == results[1];
    println!("parameter gradients identical: {identical}");
    Ok(())
}
