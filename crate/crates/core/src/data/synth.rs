use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StereoSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fronto-parallel rectangle at constant disparity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub disparity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background_disparity: usize,
    /// Painted in order, so later (nearer) layers cover earlier ones.
    pub layers: Vec<Layer>,
    /// Probability of a white dot.
    pub density: f64,
    /// Apply a 3×3 box filter to the dot fields.
    pub smooth: bool,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Spec("image must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(Error::Spec(format!("dot density {} outside [0, 1]", self.density)));
        }
        let mut prev = self.background_disparity;
        for d in std::iter::once(self.background_disparity).chain(self.layers.iter().map(|l| l.disparity)) {
            if d >= self.width {
                return Err(Error::Spec(format!("disparity {d} exceeds image width {}", self.width)));
            }
            if d < prev {
                return Err(Error::Spec(format!(
                    "layers must be ordered by disparity (nearer = larger), got {d} after {prev}"
                )));
            }
            prev = d;
        }
        Ok(())
    }

    /// Integer disparity of every left pixel, row-major.
    pub fn disparity_map(&self) -> Vec<usize> {
        let (h, w) = (self.height, self.width);
        let mut d = vec![self.background_disparity; h * w];
        for l in &self.layers {
            for y in l.y.min(h)..(l.y + l.height).min(h) {
                for x in l.x.min(w)..(l.x + l.width).min(w) {
                    d[y * w + x] = l.disparity;
                }
            }
        }
        d
    }
}

/// Outcome of projecting every left pixel into the right image.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    /// Left column that wins each right pixel, row-major `H·W`.
    pub winner: Vec<Option<usize>>,
    /// Right image content carried over from the left image.
    pub right: Vec<Option<f64>>,
    /// Left pixels that are out of bounds or hidden by a nearer pixel.
    pub occlusion: Vec<bool>,
}

/// Z-buffered forward warp: left pixel `x` lands on `x − d(x)`, and the
/// largest disparity wins each right pixel.
pub fn forward_warp_oracle(gt_disparity: &Tensor<f64>, left: &Tensor<f64>) -> Result<WarpResult> {
    if gt_disparity.rank() != 2 || gt_disparity.shape() != left.shape() {
        return Err(Error::dim(
            "forward_warp_oracle",
            format!("disparity {:?}, image {:?}", gt_disparity.shape(), left.shape()),
        ));
    }
    let (h, w) = (left.shape()[0], left.shape()[1]);
    let d = gt_disparity.data();
    if d.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
        return Err(Error::Spec("forward warping needs non-negative integer disparities".into()));
    }
    let mut winner: Vec<Option<usize>> = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = d[y * w + x] as usize;
            if dx > x {
                continue;
            }
            let slot = &mut winner[y * w + x - dx];
            match *slot {
                Some(prev) if d[y * w + prev] >= dx as f64 => {}
                _ => *slot = Some(x),
            }
        }
    }
    let mut occlusion = vec![true; h * w];
    let mut right = vec![None; h * w];
    for y in 0..h {
        for xr in 0..w {
            if let Some(xl) = winner[y * w + xr] {
                occlusion[y * w + xl] = false;
                right[y * w + xr] = Some(left.data()[y * w + xl]);
            }
        }
    }
    Ok(WarpResult {
        winner,
        right,
        occlusion,
    })
}

fn dot_field(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64, smooth: bool) -> Vec<f64> {
    let dots: Vec<f64> = (0..h * w).map(|_| if rng.gen_bool(density) { 1.0 } else { 0.0 }).collect();
    if !smooth {
        return dots;
    }
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        dots[y * w + x]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += at(y + dy, x + dx);
                }
            }
            out[y as usize * w + x as usize] = s / 9.0;
        }
    }
    out
}

/// Random-dot stereogram with exact disparity and occlusion.
///
/// Right pixels that receive no left pixel are filled from an independent
/// dot field drawn with the same settings.
pub fn synth_rds(spec: &SceneSpec) -> Result<StereoSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let left = dot_field(&mut rng, h, w, spec.density, spec.smooth);
    let fill = dot_field(&mut rng, h, w, spec.density, spec.smooth);
    let disp: Vec<f64> = spec.disparity_map().into_iter().map(|d| d as f64).collect();
    let left = Tensor::new(vec![h, w], left)?;
    let gt_disparity = Tensor::new(vec![h, w], disp)?;
    let warp = forward_warp_oracle(&gt_disparity, &left)?;
    let right: Vec<f64> = warp.right.iter().zip(&fill).map(|(r, &f)| r.unwrap_or(f)).collect();
    Ok(StereoSample {
        height: h,
        width: w,
        left,
        right: Tensor::new(vec![h, w], right)?,
        gt_disparity,
        gt_occlusion: warp.occlusion,
    })
}

/// Draws layered-square scenes: a background plane plus squares in front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSampler {
    pub height: usize,
    pub width: usize,
    pub min_disparity: usize,
    pub max_disparity: usize,
    pub max_layers: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub density: f64,
    pub smooth: bool,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            height: 32,
            width: 64,
            min_disparity: 2,
            max_disparity: 10,
            max_layers: 2,
            min_size: 8,
            max_size: 16,
            density: 0.5,
            smooth: false,
        }
    }
}

impl SceneSampler {
    pub fn validate(&self) -> Result<()> {
        if self.min_disparity > self.max_disparity || self.max_disparity >= self.width {
            return Err(Error::Spec(format!(
                "disparity range {}..={} invalid for width {}",
                self.min_disparity, self.max_disparity, self.width
            )));
        }
        if self.min_size == 0 || self.min_size > self.max_size || self.max_size > self.height.min(self.width) {
            return Err(Error::Spec(format!(
                "square sizes {}..={} do not fit a {}x{} image",
                self.min_size, self.max_size, self.height, self.width
            )));
        }
        Ok(())
    }

    /// `count` samples with scene seeds `first_seed, first_seed + 1, …`.
    pub fn samples(&self, first_seed: u64, count: usize) -> Result<Vec<StereoSample>> {
        (0..count as u64)
            .map(|k| synth_rds(&self.sample(first_seed.wrapping_add(k))?))
            .collect()
    }

    /// Probe scene: a background from the lower half of the range and one
    /// square of side 10 to 16 at exactly `disparity`, placed so that its
    /// matches stay inside the right image.
    pub fn probe(&self, seed: u64, disparity: usize) -> Result<SceneSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mid = self.min_disparity + (self.max_disparity - self.min_disparity) / 2;
        let size = rng.gen_range(10..=16).min(self.height).min(self.width.saturating_sub(disparity + 2));
        if size == 0 || disparity + 2 + size > self.width {
            return Err(Error::Spec(format!(
                "disparity {disparity} leaves no room for a probe square in width {}",
                self.width
            )));
        }
        let spec = SceneSpec {
            height: self.height,
            width: self.width,
            background_disparity: rng.gen_range(self.min_disparity..=mid),
            layers: vec![Layer {
                x: rng.gen_range(disparity + 2..=self.width - size),
                y: rng.gen_range(0..=self.height - size),
                width: size,
                height: size,
                disparity,
            }],
            density: self.density,
            smooth: self.smooth,
            seed: rng.gen(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Scene for `seed`. The background takes the lower half of the
    /// disparity range and each square lies in front of it.
    pub fn sample(&self, seed: u64) -> Result<SceneSpec> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mid = self.min_disparity + (self.max_disparity - self.min_disparity) / 2;
        let bg = rng.gen_range(self.min_disparity..=mid);
        let n = if self.max_layers == 0 { 0 } else { rng.gen_range(1..=self.max_layers) };
        let mut layers: Vec<Layer> = (0..n)
            .map(|_| {
                let size = rng.gen_range(self.min_size..=self.max_size);
                Layer {
                    x: rng.gen_range(0..=self.width - size),
                    y: rng.gen_range(0..=self.height - size),
                    width: size,
                    height: size,
                    disparity: rng.gen_range(bg..=self.max_disparity),
                }
            })
            .collect();
        layers.sort_by_key(|l| l.disparity);
        Ok(SceneSpec {
            height: self.height,
            width: self.width,
            background_disparity: bg,
            layers,
            density: self.density,
            smooth: self.smooth,
            seed: rng.gen(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(h: usize, w: usize, d: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            height: h,
            width: w,
            background_disparity: d,
            layers: vec![],
            density: 0.5,
            smooth: false,
            seed,
        }
    }

    fn row(d: &[f64]) -> WarpResult {
        let n = d.len();
        let disp = Tensor::new(vec![1, n], d.to_vec()).unwrap();
        let img = Tensor::new(vec![1, n], (0..n).map(|i| i as f64).collect()).unwrap();
        forward_warp_oracle(&disp, &img).unwrap()
    }

    #[test]
    fn zero_disparity_copies_left() {
        let s = synth_rds(&flat(6, 9, 0, 1)).unwrap();
        assert_eq!(s.left, s.right);
        assert!(s.gt_occlusion.iter().all(|&o| !o));
    }

    #[test]
    fn constant_shift() {
        let d = 3;
        let s = synth_rds(&flat(5, 12, d, 2)).unwrap();
        for y in 0..5 {
            for x in 0..12 {
                assert_eq!(s.gt_occlusion[y * 12 + x], x < d);
                if x >= d {
                    assert_eq!(s.right.data()[y * 12 + x - d], s.left.data()[y * 12 + x]);
                }
            }
        }
    }

    #[test]
    fn foreground_square_occludes_band() {
        let spec = SceneSpec {
            layers: vec![Layer {
                x: 20,
                y: 4,
                width: 8,
                height: 8,
                disparity: 6,
            }],
            ..flat(16, 40, 2, 3)
        };
        let s = synth_rds(&spec).unwrap();
        for y in 4..12 {
            let occ: Vec<usize> = (2..40).filter(|&x| s.gt_occlusion[y * 40 + x]).collect();
            assert_eq!(occ, vec![16, 17, 18, 19]);
        }
        let y = 0;
        assert!((2..40).all(|x| !s.gt_occlusion[y * 40 + x]));
    }

    #[test]
    fn warp_rows() {
        let r = row(&[0.0, 0.0, 0.0]);
        assert_eq!(r.winner, vec![Some(0), Some(1), Some(2)]);
        assert!(r.occlusion.iter().all(|&o| !o));

        let r = row(&[2.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.occlusion, vec![true, false, false, false]);
        assert_eq!(r.winner, vec![None, Some(1), Some(2), Some(3)]);

        // Pixels 2 and 3 (d=3) land on −1 and 0; pixel 3 beats pixel 0 at 0.
        let r = row(&[0.0, 0.0, 3.0, 3.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.winner, vec![Some(3), Some(1), None, None, Some(4), Some(5), Some(6)]);
        assert_eq!(r.occlusion, vec![true, false, true, false, false, false, false]);
    }

    #[test]
    fn spec_errors() {
        assert!(matches!(synth_rds(&flat(4, 8, 8, 0)), Err(Error::Spec(_))));
        let bad = SceneSpec {
            layers: vec![Layer {
                x: 0,
                y: 0,
                width: 2,
                height: 2,
                disparity: 1,
            }],
            ..flat(4, 8, 3, 0)
        };
        assert!(matches!(bad.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn sampler_is_deterministic_and_in_range() {
        let s = SceneSampler::default();
        for seed in 0..20 {
            let a = s.sample(seed).unwrap();
            assert_eq!(a, s.sample(seed).unwrap());
            a.validate().unwrap();
            let d = a.disparity_map();
            assert!(d.iter().all(|&v| (2..=10).contains(&v)));
            assert_eq!(synth_rds(&a).unwrap(), synth_rds(&a).unwrap());
        }
    }
}
