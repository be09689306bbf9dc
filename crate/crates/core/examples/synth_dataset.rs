//! Writes a small random-dot dataset with its manifest, then reads it back.
//!
//! Usage: `cargo run --release --example synth_dataset -- [out_dir] [count]`

use std::path::PathBuf;

use s2s_stereo::data::{load_samples, write_dataset, SceneSampler};

fn main() -> s2s_stereo::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "rds_demo".into()));
    let count: usize = args.next().map_or(4, |c| c.parse().expect("count must be an integer"));

    let sampler = SceneSampler::default();
    let samples = sampler.samples(0, count)?;
    let manifest = write_dataset(&dir, "train", &samples, 0, serde_json::to_value(&sampler)?)?;
    println!("wrote {}", manifest.display());

    let back = load_samples(&manifest)?;
    for (k, (a, b)) in samples.iter().zip(&back).enumerate() {
        let occluded = a.gt_occlusion.iter().filter(|&&o| o).count();
        let max_d = a.gt_disparity.max_abs();
        println!(
            "sample {k}: {}×{}, max disparity {max_d}, {occluded} occluded pixels, disparity round trip exact: {}",
            a.height,
            a.width,
            a.gt_disparity == b.gt_disparity
        );
    }
    Ok(())
}
