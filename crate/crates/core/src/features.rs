//! Shared-weight per-pixel descriptor extraction: a stride-1 conv tower.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Number of conv layers `L_f`.
    pub layers: usize,
    pub kernel: usize,
    pub hidden: usize,
    /// Descriptor width `C_e`.
    pub channels: usize,
    /// Input image channels.
    pub image_channels: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            kernel: 3,
            hidden: 32,
            channels: 16,
            image_channels: 1,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("extractor needs at least one layer".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "extractor kernel size {} must be odd",
                self.kernel
            )));
        }
        if self.channels == 0 || self.hidden == 0 || self.image_channels == 0 {
            return Err(Error::Config("extractor widths must be positive".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let cin = if l == 0 { self.image_channels } else { self.hidden };
                let cout = if l + 1 == self.layers { self.channels } else { self.hidden };
                (cin, cout)
            })
            .collect()
    }

    pub fn register<F: Scalar, R: Rng>(&self, store: &mut ParameterStore<F>, rng: &mut R) -> Result<()> {
        self.validate()?;
        let k = self.kernel;
        for (l, (cin, cout)) in self.widths().into_iter().enumerate() {
            store.register_uniform(
                format!("fe.conv{l}.w"),
                vec![cout, cin, k, k],
                cin * k * k,
                cout * k * k,
                rng,
            )?;
            store.register_zeros(format!("fe.conv{l}.b"), vec![cout])?;
        }
        Ok(())
    }
}

/// Maps an image `[C_img, H, W]` to descriptors `[C_e, H, W]`.
pub fn extract<F: Scalar>(g: &mut Graph<'_, F>, image: Var, cfg: &ExtractorConfig) -> Result<Var> {
    let mut x = image;
    for l in 0..cfg.layers {
        let w = g.param_named(&format!("fe.conv{l}.w"))?;
        let b = g.param_named(&format!("fe.conv{l}.b"))?;
        x = g.conv2d(x, w, b)?;
        if l + 1 < cfg.layers {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}
