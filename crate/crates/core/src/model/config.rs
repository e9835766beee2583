use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::ConvSpec;

/// Final activation of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// `max(0, min(x, 1))` after depth-to-space; the quantization-robust head.
    ClippedRelu,
    /// No output activation. Only used as the ablation baseline.
    Linear,
}

impl OutputHead {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputHead::ClippedRelu => "clipped_relu",
            OutputHead::Linear => "linear",
        }
    }
}

impl std::str::FromStr for OutputHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clipped_relu" | "clipped" => Ok(OutputHead::ClippedRelu),
            "linear" => Ok(OutputHead::Linear),
            other => Err(Error::InvalidConfig(format!("unknown output head {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scale: usize,
    pub feature_channels: usize,
    pub num_gblocks: usize,
    pub gblock_groups: usize,
    pub skip_channels: usize,
    pub head: OutputHead,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale: 3,
            feature_channels: 32,
            num_gblocks: 3,
            gblock_groups: 4,
            skip_channels: 32,
            head: OutputHead::ClippedRelu,
        }
    }
}

/// A named convolution layer of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub conv: ConvSpec,
}

pub const IMAGE_CHANNELS: usize = 3;

impl ModelConfig {
    pub fn with_head(self, head: OutputHead) -> Self {
        ModelConfig { head, ..self }
    }

    /// Channels of the last convolution: three colours per sub-pixel.
    pub fn head_channels(&self) -> usize {
        IMAGE_CHANNELS * self.scale * self.scale
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scale) {
            return Err(Error::InvalidConfig(format!("scale must be 2, 3 or 4, got {}", self.scale)));
        }
        if self.feature_channels == 0 || self.skip_channels == 0 || self.gblock_groups == 0 {
            return Err(Error::InvalidConfig("channel and group counts must be positive".into()));
        }
        if !self.feature_channels.is_multiple_of(self.gblock_groups) {
            return Err(Error::InvalidConfig(format!(
                "feature_channels ({}) must be divisible by gblock_groups ({})",
                self.feature_channels, self.gblock_groups
            )));
        }
        Ok(())
    }

    /// Convolution layers in execution order.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let f = self.feature_channels;
        let layer = |name: String, conv: ConvSpec| LayerSpec { name, conv };
        let mut layers = vec![layer("conv_in".into(), ConvSpec::new(3, IMAGE_CHANNELS, f, 1))];
        for i in 0..self.num_gblocks {
            layers.push(layer(format!("gblock{i}.grouped"), ConvSpec::new(3, f, f, self.gblock_groups)));
            layers.push(layer(format!("gblock{i}.pointwise"), ConvSpec::new(1, f, f, 1)));
        }
        layers.push(layer("skip".into(), ConvSpec::new(1, IMAGE_CHANNELS, self.skip_channels, 1)));
        layers.push(layer("fuse".into(), ConvSpec::new(1, f + self.skip_channels, f, 1)));
        layers.push(layer("head".into(), ConvSpec::new(3, f, self.head_channels(), 1)));
        Ok(layers)
    }
}

/// Exact number of weights and biases.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(config.layers()?.iter().map(|l| l.conv.param_count()).sum())
}
