//! Winner-take-all window regression of disparity and occlusion from a
//! coupling with dustbins.

use s2s_stereo::head::regress_raw;
use s2s_stereo::Tensor;

fn main() -> s2s_stereo::Result<()> {
    // Eight samples plus a dustbin; row 4 spreads its mass over targets
    // 2, 3 and 4 and leaves 0.2 in the dustbin, row 5 matches target 2
    // exactly, every other row is fully unmatched.
    let (w, m) = (8, 9);
    let mut t = vec![0.0; m * m];
    for i in 0..w {
        t[i * m + w] = 1.0;
    }
    t[4 * m..4 * m + m].copy_from_slice(&[0.0, 0.0, 0.2, 0.5, 0.1, 0.0, 0.0, 0.0, 0.2]);
    t[5 * m + 2] = 1.0;
    t[5 * m + w] = 0.0;
    let r = regress_raw(&Tensor::new(vec![m, m], t)?, 1)?;
    for i in 0..w {
        println!(
            "pixel {i}: disparity {:.3}, occlusion {:.3}, window mass {:.3}",
            r.disparity.data()[i],
            r.occlusion.data()[i],
            r.confidence.data()[i]
        );
    }
    Ok(())
}
