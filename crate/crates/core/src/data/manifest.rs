use std::path::Path;

use serde::{Deserialize, Serialize};

use super::formats::{read_pfm, read_pgm, write_pfm, write_pgm};
use super::{write_atomic, StereoSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// File names of one sample, relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub left: String,
    pub right: String,
    pub disp: String,
    pub occ: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<SampleFiles>,
    pub seed: u64,
    /// Generator settings, kept verbatim.
    pub spec: serde_json::Value,
    pub split: String,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

/// Writes every sample as PGM images, a PFM disparity map and a PGM
/// occlusion mask, then `<split>.json` in `dir`. Returns the manifest path.
pub fn write_dataset(
    dir: &Path,
    split: &str,
    samples: &[StereoSample],
    seed: u64,
    spec: serde_json::Value,
) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        let name = |kind: &str, ext: &str| format!("{split}_{i:05}_{kind}.{ext}");
        let f = SampleFiles {
            left: name("left", "pgm"),
            right: name("right", "pgm"),
            disp: name("disp", "pfm"),
            occ: name("occ", "pgm"),
        };
        write_pgm(&s.left, &dir.join(&f.left))?;
        write_pgm(&s.right, &dir.join(&f.right))?;
        write_pfm(&s.gt_disparity.cast(), &dir.join(&f.disp))?;
        write_pgm(&s.occlusion_tensor(), &dir.join(&f.occ))?;
        files.push(f);
    }
    let path = dir.join(format!("{split}.json"));
    DatasetManifest {
        samples: files,
        seed,
        spec,
        split: split.to_string(),
    }
    .save(&path)?;
    Ok(path)
}

/// Loads every sample a manifest references.
pub fn load_samples(manifest: &Path) -> Result<Vec<StereoSample>> {
    let m = DatasetManifest::load(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    m.samples
        .iter()
        .map(|f| {
            let left = read_pgm(&dir.join(&f.left))?;
            let right = read_pgm(&dir.join(&f.right))?;
            let disp: Tensor<f64> = read_pfm(&dir.join(&f.disp))?.cast();
            let occ = read_pgm(&dir.join(&f.occ))?;
            let (height, width) = (left.shape()[0], left.shape()[1]);
            let s = StereoSample {
                height,
                width,
                left,
                right,
                gt_disparity: disp,
                gt_occlusion: occ.data().iter().map(|&v| v >= 0.5).collect(),
            };
            s.validate()?;
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_rds, SceneSampler};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sampler = SceneSampler::default();
        let samples: Vec<_> = (0..3).map(|i| synth_rds(&sampler.sample(i).unwrap()).unwrap()).collect();
        let spec = serde_json::to_value(&sampler).unwrap();
        let p = write_dataset(dir.path(), "train", &samples, 5, spec).unwrap();
        let m = DatasetManifest::load(&p).unwrap();
        assert_eq!(m.samples.len(), 3);
        assert_eq!(m.split, "train");
        assert_eq!(load_samples(&p).unwrap(), samples);
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_dataset(dir.path(), "val", &[], 0, serde_json::Value::Null).unwrap();
        assert!(load_samples(&p).unwrap().is_empty());
    }
}
