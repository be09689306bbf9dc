//! Trains the toy preset on random-dot scenes and reports held-out metrics.
//!
//! Usage: `cargo run --release --example train_toy -- [steps] [d_cap]`
//!
//! With a `d_cap`, pixels at or beyond that disparity are left out of the
//! loss and the run ends with a probe at disparity 12.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2s_stereo::config::{Preset, RunConfig};
use s2s_stereo::data::synth_rds;
use s2s_stereo::params::ParameterStore;
use s2s_stereo::train::{hits_at_disparity, train_loop, TrainOutputs};

fn main() -> s2s_stereo::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::preset(Preset::Toy);
    if let Some(steps) = args.next() {
        cfg.train.steps = steps.parse().expect("steps must be an integer");
    }
    cfg.train.d_cap = args.next().map(|c| c.parse().expect("d_cap must be a number"));

    let d = &cfg.data;
    let train = d.sampler.samples(d.train_seed, d.train_count)?;
    let val = d.sampler.samples(d.val_seed, d.val_count)?;
    let mut store: ParameterStore<f32> = cfg.model.init(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;

    let started = Instant::now();
    let outcome = train_loop(
        &mut store,
        &cfg.model,
        &cfg.train,
        &cfg.weights,
        &train,
        &val,
        &TrainOutputs::default(),
    )?;
    for r in &outcome.records {
        println!(
            "step {:>5}  3px {:>6.2} %  EPE {:.3}  IOU {:.3}  loss {}",
            r.step,
            r.three_px_error.unwrap_or(f64::NAN),
            r.epe.unwrap_or(f64::NAN),
            r.occ_iou.unwrap_or(f64::NAN),
            r.loss.map_or("-".to_string(), |l| format!("{l:.3}")),
        );
    }
    println!("trained in {:.1} s", started.elapsed().as_secs_f64());

    if cfg.train.d_cap.is_some() {
        let probes = (0..16)
            .map(|k| synth_rds(&d.sampler.probe(5000 + k, 12)?))
            .collect::<s2s_stereo::Result<Vec<_>>>()?;
        let (hits, total) = hits_at_disparity(&store, &cfg.model, &probes, 12.0, 3.0)?;
        println!(
            "disparity 12: {hits}/{total} pixels within 3 px ({:.1} %)",
            100.0 * hits as f64 / total.max(1) as f64
        );
    }
    Ok(())
}
