//! Architecture and loss configuration, including the two named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder layout: a stride-2 stem plus four inverted-residual stages, one
/// per remaining feature scale (strides 4, 8, 16, 32).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub stage_repeats: Vec<usize>,
    pub expansion: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stem_channels: 16,
            stage_channels: vec![24, 32, 64, 96],
            stage_strides: vec![2, 2, 2, 2],
            stage_repeats: vec![2, 3, 7, 9],
            expansion: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 4
            || self.stage_strides.len() != 4
            || self.stage_repeats.len() != 4
        {
            return Err(Error::Param(
                "encoder needs exactly 4 stages beyond the stem (5 feature scales)".into(),
            ));
        }
        let product: usize = 2 * self.stage_strides.iter().product::<usize>();
        if product != 32 {
            return Err(Error::Param(format!(
                "encoder stride product must be 32, got {product}"
            )));
        }
        if self.stem_channels == 0
            || self.stage_channels.iter().any(|&c| c == 0)
            || self.stage_repeats.iter().any(|&r| r == 0)
            || self.expansion == 0
        {
            return Err(Error::Param("encoder widths, repeats, expansion must be positive".into()));
        }
        Ok(())
    }

    /// Channel width of the stride-32 bottleneck.
    pub fn bottleneck_channels(&self) -> usize {
        *self.stage_channels.last().unwrap()
    }
}

/// Pyramid pooling head configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MpspConfig {
    pub scales: Vec<usize>,
    pub branch_channels: usize,
    pub n_bins: usize,
    pub n_classes: usize,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for MpspConfig {
    fn default() -> Self {
        MpspConfig {
            scales: vec![1, 2, 3, 6],
            branch_channels: 24,
            n_bins: 64,
            n_classes: 25,
            d_min: 0.1,
            d_max: 10.0,
        }
    }
}

impl MpspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Param(format!(
                "pooling scales must be nonempty and strictly increasing, got {:?}",
                self.scales
            )));
        }
        if self.scales[0] == 0 {
            return Err(Error::Param("pooling scale 0 is invalid".into()));
        }
        if self.n_bins < 2 {
            return Err(Error::Param(format!("need at least 2 depth bins, got {}", self.n_bins)));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::Param(format!(
                "depth range requires 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if self.branch_channels == 0 || self.n_classes == 0 {
            return Err(Error::Param("branch channels and class count must be positive".into()));
        }
        Ok(())
    }
}

/// Decoder geometry: four depth blocks, causal conv kernel, scan state size.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    pub n_dmb: usize,
    pub conv1d_kernel: usize,
    pub state_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_dmb: 4,
            conv1d_kernel: 3,
            state_dim: 8,
        }
    }
}

/// Loss weights: scale-invariance factor, loss scale, and the regression
/// weight in the combined objective. `use_cls` switches the auxiliary scene
/// classification term (off for outdoor-style data).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub use_cls: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.85,
            alpha: 10.0,
            beta: 0.1,
            use_cls: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Param(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::Param("alpha and beta must be positive".into()));
        }
        Ok(())
    }
}

/// Full architecture description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub profile: String,
    pub encoder: EncoderConfig,
    pub projection_dim: usize,
    pub mpsp: MpspConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub input_height: usize,
    pub input_width: usize,
}

impl ModelConfig {
    /// The base preset: projection width 24, pooling scales (1, 2, 3, 6).
    pub fn lmdepth() -> Self {
        ModelConfig {
            profile: "lmdepth".into(),
            encoder: EncoderConfig::default(),
            projection_dim: 24,
            mpsp: MpspConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossConfig::default(),
            input_height: 64,
            input_width: 64,
        }
    }

    /// The small preset: projection width 16, pooling scales (1, 6).
    pub fn lmdepth_s() -> Self {
        let mut cfg = Self::lmdepth();
        cfg.profile = "lmdepth-s".into();
        cfg.projection_dim = 16;
        cfg.mpsp.scales = vec![1, 6];
        cfg
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "lmdepth" => Some(Self::lmdepth()),
            "lmdepth-s" => Some(Self::lmdepth_s()),
            _ => None,
        }
    }

    /// Resolve a `--config` argument: a preset name or a TOML file path.
    pub fn resolve(spec: &str) -> Result<Self> {
        if let Some(cfg) = Self::preset(spec) {
            return Ok(cfg);
        }
        let text = std::fs::read_to_string(spec)
            .map_err(|e| Error::Io(format!("cannot read config {spec}: {e}")))?;
        let cfg: ModelConfig =
            toml::from_str(&text).map_err(|e| Error::Format(format!("config {spec}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mpsp.validate()?;
        self.loss.validate()?;
        if self.projection_dim == 0 {
            return Err(Error::Param("projection dim must be positive".into()));
        }
        if self.decoder.n_dmb != 4 {
            return Err(Error::Param(format!(
                "decoder is defined for 4 depth blocks, got {}",
                self.decoder.n_dmb
            )));
        }
        if self.decoder.conv1d_kernel < 1 || self.decoder.state_dim < 1 {
            return Err(Error::Param("decoder kernel and state dim must be >= 1".into()));
        }
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % 32 != 0
            || self.input_width % 32 != 0
        {
            return Err(Error::Param(format!(
                "input dims must be positive multiples of 32, got {}x{}",
                self.input_height, self.input_width
            )));
        }
        Ok(())
    }

    /// Channel count of the fused pyramid map.
    pub fn fused_channels(&self) -> usize {
        self.encoder.bottleneck_channels() + self.mpsp.scales.len() * self.mpsp.branch_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_variants() {
        let base = ModelConfig::lmdepth();
        assert_eq!(base.projection_dim, 24);
        assert_eq!(base.mpsp.scales, vec![1, 2, 3, 6]);
        let small = ModelConfig::lmdepth_s();
        assert_eq!(small.projection_dim, 16);
        assert_eq!(small.mpsp.scales, vec![1, 6]);
        base.validate().unwrap();
        small.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ModelConfig::lmdepth();
        let text = cfg.to_toml();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invalid_input_dims_rejected() {
        let mut cfg = ModelConfig::lmdepth();
        cfg.input_height = 65;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn decreasing_scales_rejected() {
        let mut cfg = ModelConfig::lmdepth();
        cfg.mpsp.scales = vec![3, 2];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fused_channel_arithmetic() {
        // C=96 bottleneck, scales (1,2,3,6), branch 24 -> 96 + 4*24 = 192.
        assert_eq!(ModelConfig::lmdepth().fused_channels(), 192);
        assert_eq!(ModelConfig::lmdepth_s().fused_channels(), 96 + 2 * 24);
    }
}
