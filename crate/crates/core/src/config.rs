//! Run configuration: named presets plus JSON overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SceneSampler;
use crate::error::{Error, Result};
use crate::features::ExtractorConfig;
use crate::head::CALConfig;
use crate::model::ModelConfig;
use crate::train::{LossWeights, TrainConfig};
use crate::transformer::TransformerConfig;
use crate::transport::OTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Six layers, `C_e = 128`, eight heads, stride 3.
    Paper,
    /// Paper preset with stride 4, half the heads and twice the head width.
    Lightweight,
    /// Desk-scale model for 64×32 random-dot scenes.
    Toy,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "lightweight" => Ok(Self::Lightweight),
            "toy" => Ok(Self::Toy),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected paper, lightweight or toy)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Validation scenes start this far above the training seed.
pub const VAL_SEED_OFFSET: u64 = 1 << 32;

/// Where samples come from: manifests on disk, or scenes drawn on the fly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub sampler: SceneSampler,
    pub train_count: usize,
    pub val_count: usize,
    /// Scene seeds are `train_seed..train_seed + train_count`, and likewise
    /// for validation.
    pub train_seed: u64,
    pub val_seed: u64,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sampler: SceneSampler::default(),
            train_count: 128,
            val_count: 32,
            train_seed: 0,
            val_seed: VAL_SEED_OFFSET,
            train_manifest: None,
            val_manifest: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub height: usize,
    pub repetitions: usize,
    /// Attention buffers larger than this are reported as OOM instead of run.
    pub memory_limit_bytes: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256],
            strides: vec![1, 2, 3],
            height: 32,
            repetitions: 20,
            memory_limit_bytes: 1 << 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub data: DataConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self {
                preset: Some(p),
                precision: Precision::F32,
                model: ModelConfig {
                    extractor: ExtractorConfig {
                        channels: 128,
                        hidden: 64,
                        ..Default::default()
                    },
                    transformer: TransformerConfig {
                        layers: 6,
                        heads: 8,
                        channels: 128,
                        stride: 3,
                        ..Default::default()
                    },
                    ot: OTConfig::default(),
                    cal: CALConfig::default(),
                },
                train: TrainConfig::default(),
                weights: LossWeights::default(),
                data: DataConfig::default(),
                bench: BenchConfig::default(),
            },
            Preset::Lightweight => {
                let mut c = Self::preset(Preset::Paper);
                c.preset = Some(p);
                c.model.transformer.stride = 4;
                c.model.transformer.heads /= 2;
                c
            }
            Preset::Toy => Self {
                preset: Some(p),
                precision: Precision::F32,
                model: ModelConfig {
                    extractor: ExtractorConfig {
                        layers: 3,
                        kernel: 3,
                        hidden: 16,
                        channels: 16,
                        image_channels: 1,
                    },
                    transformer: TransformerConfig {
                        layers: 2,
                        heads: 2,
                        channels: 16,
                        stride: 1,
                        final_position_terms: false,
                        ..Default::default()
                    },
                    ot: OTConfig::default(),
                    cal: CALConfig {
                        blocks: 2,
                        hidden: 8,
                        expansion: 2,
                        kernel: 3,
                    },
                },
                train: TrainConfig {
                    lr: 2e-3,
                    lr_cal: 2e-3,
                    steps: 600,
                    eval_every: 100,
                    ..Default::default()
                },
                weights: LossWeights::default(),
                data: DataConfig::default(),
                bench: BenchConfig::default(),
            },
        }
    }

    /// Resolves a JSON document: its `preset` key (or `fallback`) picks the
    /// base configuration and every other key overrides it, recursively.
    pub fn from_value(doc: Value, fallback: Preset) -> Result<Self> {
        let preset = match doc.get("preset") {
            Some(Value::String(s)) => s.parse()?,
            Some(Value::Null) | None => fallback,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
        };
        let mut base = serde_json::to_value(Self::preset(preset))?;
        merge(&mut base, doc);
        base["preset"] = serde_json::to_value(preset)?;
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, fallback: Preset) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_value(serde_json::from_str(&text)?, fallback)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.weights.validate()?;
        self.data.sampler.validate()?;
        if self.bench.repetitions == 0 || self.bench.widths.contains(&0) || self.bench.strides.contains(&0) {
            return Err(Error::Config("bench widths, strides and repetitions must be positive".into()));
        }
        Ok(())
    }
}

/// Objects merge key by key; any other value replaces the target.
pub fn merge(target: &mut Value, patch: Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                match t.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        t.insert(k, v);
                    }
                }
            }
        }
        (t, p) => *t = p,
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    #[test]
    fn presets_follow_their_definitions() {
        let p = RunConfig::preset(Preset::Paper);
        let t = &p.model.transformer;
        assert_eq!((t.layers, t.channels, t.heads, t.stride), (6, 128, 8, 3));
        let l = RunConfig::preset(Preset::Lightweight);
        let lt = &l.model.transformer;
        assert_eq!((lt.stride, lt.heads, lt.channels), (4, 4, 128));
        assert_eq!(lt.head_dim(), 2 * t.head_dim());
        let toy = RunConfig::preset(Preset::Toy);
        let tt = &toy.model.transformer;
        assert_eq!((tt.layers, tt.channels, tt.heads, tt.stride), (2, 16, 2, 1));
        for c in [p, l, toy] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn explicit_keys_override_the_preset() {
        let doc = json!({"preset": "toy", "train": {"steps": 7}, "model": {"ot": {"gamma": 0.5}}});
        let c = RunConfig::from_value(doc, Preset::Paper).unwrap();
        assert_eq!(c.preset, Some(Preset::Toy));
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.model.ot.gamma, 0.5);
        // Untouched siblings keep the preset values.
        assert_eq!(c.train.lr, RunConfig::preset(Preset::Toy).train.lr);
        assert_eq!(c.model.ot.iterations, 10);
    }

    #[test]
    fn fallback_preset_and_round_trip() {
        let c = RunConfig::from_value(json!({}), Preset::Lightweight).unwrap();
        assert_eq!(c, RunConfig::preset(Preset::Lightweight));
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(RunConfig::from_value(v, Preset::Toy).unwrap(), c);
    }

    #[test]
    fn bad_documents_are_rejected() {
        assert!(RunConfig::from_value(json!({"preset": "huge"}), Preset::Toy).is_err());
        assert!(RunConfig::from_value(json!({"trian": {}}), Preset::Toy).is_err());
        let bad_heads = json!({"model": {"transformer": {"heads": 3}}});
        assert!(RunConfig::from_value(bad_heads, Preset::Toy).is_err());
    }
}
