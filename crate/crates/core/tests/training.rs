use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2s_stereo::config::{Preset, RunConfig};
use s2s_stereo::params::ParameterStore;
use s2s_stereo::train::{train_loop, TrainOutputs};

/// Means of consecutive non-overlapping windows.
fn window_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses.chunks_exact(window).map(|c| c.iter().sum::<f64>() / window as f64).collect()
}

#[test]
fn smoothed_training_loss_decreases_on_a_small_toy_set() {
    let mut cfg = RunConfig::preset(Preset::Toy);
    cfg.train.steps = 200;
    cfg.train.eval_every = 200;
    let d = &cfg.data;
    let train = d.sampler.samples(d.train_seed, 16).unwrap();
    let val = d.sampler.samples(d.val_seed, 2).unwrap();
    let mut store: ParameterStore<f32> = cfg.model.init(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed)).unwrap();
    let outcome = train_loop(&mut store, &cfg.model, &cfg.train, &cfg.weights, &train, &val, &TrainOutputs::default()).unwrap();
    assert_eq!(outcome.losses.len(), 200);

    let means = window_means(&outcome.losses, 20);
    println!("window-20 mean losses: {means:.3?}");
    for w in means.windows(2) {
        assert!(w[1] < w[0], "smoothed loss rose: {means:?}");
    }
}
