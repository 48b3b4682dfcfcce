//! Architecture hyperparameters shared by the encoder, fusion and decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Total downsampling of the deepest stage.
pub const MAX_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dims: [usize; 4],
    pub depths: [usize; 4],
    pub num_heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub use_fe: bool,
    pub use_caf: bool,
    /// The enhanced stage-3 map also feeds stage 4; otherwise it is only reported.
    pub fe_feeds_next_stage: bool,
    pub fe_spatial_reduction: usize,
    pub fe_dilation: usize,
    pub fe_channel_reduction: usize,
    pub caf_reduction: usize,
    pub caf_min_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            embed_dims: [32, 64, 160, 256],
            depths: [2, 2, 2, 2],
            num_heads: [1, 2, 5, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
            decoder_dim: 128,
            use_fe: true,
            use_caf: true,
            fe_feeds_next_stage: true,
            fe_spatial_reduction: 16,
            fe_dilation: 4,
            fe_channel_reduction: 16,
            caf_reduction: 8,
            caf_min_channels: 8,
        }
    }

    /// Smallest configuration; used for gradient checks and overfit runs.
    pub fn tiny() -> Self {
        Self {
            embed_dims: [4, 8, 16, 32],
            depths: [1, 1, 1, 1],
            num_heads: [1, 1, 2, 2],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 2,
            decoder_dim: 8,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..4 {
            let (d, h) = (self.embed_dims[s], self.num_heads[s]);
            if d == 0 || h == 0 || d % h != 0 {
                return Err(Error::Config(format!(
                    "stage {}: embed dim {d} not divisible by {h} heads",
                    s + 1
                )));
            }
            if self.depths[s] == 0 || self.sr_ratios[s] == 0 {
                return Err(Error::Config(format!(
                    "stage {}: depth and sr ratio must be at least 1",
                    s + 1
                )));
            }
        }
        if self.mlp_ratio == 0 || self.decoder_dim == 0 {
            return Err(Error::Config("mlp_ratio and decoder_dim must be positive".into()));
        }
        if self.fe_spatial_reduction == 0
            || self.fe_channel_reduction == 0
            || self.fe_dilation == 0
            || self.caf_reduction == 0
        {
            return Err(Error::Config("reduction ratios and dilation must be positive".into()));
        }
        Ok(())
    }

    /// Checks an input size against the stride pyramid and the attention
    /// reduction windows.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(MAX_STRIDE) || !w.is_multiple_of(MAX_STRIDE) {
            return Err(Error::shape(
                "forward",
                format!("input {h}x{w} is not a multiple of {MAX_STRIDE}; pad or resize the image first"),
            ));
        }
        for s in 0..4 {
            let (sh, sw) = stage_hw(h, w, s);
            let r = self.sr_ratios[s];
            if r > 1 && (sh < r || sw < r) {
                return Err(Error::shape(
                    "forward",
                    format!("stage {} map {sh}x{sw} is smaller than its reduction window {r}", s + 1),
                ));
            }
        }
        Ok(())
    }

    pub fn fe_spatial_channels(&self) -> usize {
        (self.embed_dims[2] / self.fe_spatial_reduction).max(1)
    }

    pub fn fe_channel_hidden(&self) -> usize {
        (self.embed_dims[2] / self.fe_channel_reduction).max(1)
    }

    pub fn caf_mid_channels(&self, stage: usize) -> usize {
        (2 * self.embed_dims[stage] / self.caf_reduction).max(self.caf_min_channels)
    }
}

/// Spatial size of stage `s` (0-based) for an `h x w` input.
pub fn stage_hw(h: usize, w: usize, s: usize) -> (usize, usize) {
    let f = 4 << s;
    (h / f, w / f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_input_with_guidance() {
        let err = ModelConfig::tiny().check_input(48, 64).unwrap_err();
        assert!(err.to_string().contains("pad or resize"));
        ModelConfig::tiny().check_input(64, 32).unwrap();
    }

    #[test]
    fn rejects_heads_not_dividing_dims() {
        let mut c = ModelConfig::tiny();
        c.num_heads[1] = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_with_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"use_fe": false}"#).unwrap();
        assert!(!c.use_fe);
        assert_eq!(c.embed_dims, ModelConfig::desk().embed_dims);
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
