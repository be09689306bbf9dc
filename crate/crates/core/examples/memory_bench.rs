//! Attention memory: the closed-form model against tracked buffers, and
//! timing of eager and recompute passes.
//!
//! Usage: `cargo run --release --example memory_bench -- [height]`

use s2s_stereo::bench::{run_bench, to_csv, MemoryModel};
use s2s_stereo::config::BenchConfig;
use s2s_stereo::transformer::TransformerConfig;

fn main() -> s2s_stereo::Result<()> {
    let full = MemoryModel::new(540, 960, 8, 6, 32)?;
    println!(
        "960×540, 8 heads, 6 maps, 32-bit: {} bits ({:.1} GB)",
        full.bits(),
        full.bits() as f64 / 8e9
    );

    let height = std::env::args().nth(1).map_or(16, |h| h.parse().expect("height must be an integer"));
    let cfg = TransformerConfig {
        layers: 2,
        heads: 2,
        channels: 16,
        ..Default::default()
    };
    let bench = BenchConfig {
        widths: vec![64, 128],
        strides: vec![1, 2, 3],
        height,
        repetitions: 3,
        ..Default::default()
    };
    print!("{}", to_csv(&run_bench::<f32>(&cfg, &bench, 0)?));
    Ok(())
}
