//! Synthetic random-dot stereograms, image file formats and dataset manifests.

mod augment;
mod formats;
mod manifest;
mod synth;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use augment::{augment_asym, AugmentConfig};
pub use formats::{decode_pfm, decode_pgm, encode_pfm, encode_pgm, read_pfm, read_pgm, write_pfm, write_pgm};
pub use manifest::{load_samples, write_dataset, DatasetManifest, SampleFiles};
pub use synth::{forward_warp_oracle, synth_rds, Layer, SceneSampler, SceneSpec, WarpResult};

/// Rectified grayscale pair with ground truth in the left frame.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub height: usize,
    pub width: usize,
    /// `[H, W]`, values in `[0, 1]`.
    pub left: Tensor<f64>,
    pub right: Tensor<f64>,
    /// `d = x_L − x_R ≥ 0` in pixels, `[H, W]`.
    pub gt_disparity: Tensor<f64>,
    /// Row-major `H·W` flags.
    pub gt_occlusion: Vec<bool>,
}

impl StereoSample {
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        let shape = [self.height, self.width];
        if self.left.shape() != shape
            || self.right.shape() != shape
            || self.gt_disparity.shape() != shape
            || self.gt_occlusion.len() != n
        {
            return Err(Error::dim(
                "stereo_sample",
                format!(
                    "{}x{} with left {:?}, right {:?}, disparity {:?}, {} occlusion flags",
                    self.height,
                    self.width,
                    self.left.shape(),
                    self.right.shape(),
                    self.gt_disparity.shape(),
                    self.gt_occlusion.len()
                ),
            ));
        }
        if self.gt_disparity.data().iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::Spec("ground-truth disparity must be non-negative".into()));
        }
        Ok(())
    }

    /// Images as network inputs `[1, H, W]`.
    pub fn images<F: Scalar>(&self) -> Result<(Tensor<F>, Tensor<F>)> {
        let shape = vec![1, self.height, self.width];
        Ok((
            self.left.cast::<F>().reshape(shape.clone())?,
            self.right.cast::<F>().reshape(shape)?,
        ))
    }

    pub fn occlusion_tensor(&self) -> Tensor<f64> {
        let v: Vec<f64> = self.gt_occlusion.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.height, self.width], v).expect("validated shape")
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
