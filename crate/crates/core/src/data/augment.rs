use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::StereoSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Photometric perturbation at full strength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Brightness offsets are drawn from `U(−b, b)`.
    pub max_brightness: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_brightness: 0.1,
            noise_sigma: 0.05,
        }
    }
}

fn perturb(img: &Tensor<f64>, rng: &mut ChaCha8Rng, brightness: f64, noise: &Normal<f64>) -> Result<Tensor<f64>> {
    let offset = if brightness > 0.0 { rng.gen_range(-brightness..=brightness) } else { 0.0 };
    let data = img
        .data()
        .iter()
        .map(|&v| (v + offset + noise.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(img.shape().to_vec(), data)
}

/// Independent brightness offset and Gaussian noise on each image, both
/// scaled by `strength ∈ [0, 1]`. Ground truth is untouched.
pub fn augment_asym(sample: &StereoSample, cfg: &AugmentConfig, strength: f64, seed: u64) -> Result<StereoSample> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Config(format!("augmentation strength {strength} outside [0, 1]")));
    }
    if strength == 0.0 {
        return Ok(sample.clone());
    }
    let noise = Normal::new(0.0, cfg.noise_sigma * strength)
        .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let b = cfg.max_brightness * strength;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = perturb(&sample.left, &mut rng, b, &noise)?;
    let right = perturb(&sample.right, &mut rng, b, &noise)?;
    Ok(StereoSample {
        left,
        right,
        ..sample.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize) -> StereoSample {
        StereoSample {
            height: h,
            width: w,
            left: Tensor::full(vec![h, w], 0.5),
            right: Tensor::full(vec![h, w], 0.5),
            gt_disparity: Tensor::full(vec![h, w], 2.0),
            gt_occlusion: vec![false; h * w],
        }
    }

    #[test]
    fn zero_strength_is_identity() {
        let s = gray(4, 4);
        assert_eq!(augment_asym(&s, &AugmentConfig::default(), 0.0, 9).unwrap(), s);
    }

    #[test]
    fn deterministic_and_ground_truth_untouched() {
        let s = gray(8, 8);
        let a = augment_asym(&s, &AugmentConfig::default(), 0.7, 3).unwrap();
        assert_eq!(a, augment_asym(&s, &AugmentConfig::default(), 0.7, 3).unwrap());
        assert_ne!(a.left, a.right);
        assert_eq!(a.gt_disparity, s.gt_disparity);
        assert_eq!(a.gt_occlusion, s.gt_occlusion);
    }

    #[test]
    fn noise_level_matches_configuration() {
        let s = gray(64, 64);
        let cfg = AugmentConfig {
            max_brightness: 0.1,
            noise_sigma: 0.04,
        };
        let a = augment_asym(&s, &cfg, 1.0, 11).unwrap();
        for (img, orig) in [(&a.left, &s.left), (&a.right, &s.right)] {
            let d: Vec<f64> = img.data().iter().zip(orig.data()).map(|(x, y)| x - y).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
            assert!((var.sqrt() / 0.04 - 1.0).abs() < 0.1, "{}", var.sqrt());
        }
    }

    #[test]
    fn strength_out_of_range() {
        assert!(augment_asym(&gray(2, 2), &AugmentConfig::default(), 1.5, 0).is_err());
    }
}
