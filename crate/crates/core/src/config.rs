//! Flat TOML run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::SynthConfig;
use crate::decoder::DecoderConfig;
use crate::error::{config, Error, Result};
use crate::likelihood::{FlowConfig, LikelihoodMode, DEFAULT_SCORE_A};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Every key accepted in a config file. Missing keys take the defaults below;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    /// `[H, W]` of the model input patch.
    pub input_size: [usize; 2],
    pub keypoints: usize,
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,

    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_points: usize,
    pub decoder_levels: usize,
    pub decoder_dim: usize,
    pub decoder_ffn: usize,

    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub likelihood: LikelihoodMode,
    pub lambda: f64,
    pub noisy_refs: bool,
    pub aux_loss: bool,

    pub lr: f64,
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub val_every: usize,

    /// Keypoint score half-width in normalized box units.
    pub score_a: f64,
    /// Growth factor from instance box to square crop box.
    pub crop_padding: f64,
    /// PCK threshold as a fraction of the box diagonal.
    pub pck_alpha: f64,

    /// Scenes written by `synth`.
    pub synth_count: usize,
    /// `[H, W]` of synthetic scenes.
    pub synth_image_size: [usize; 2],
    pub synth_figures: usize,

    pub dataset: Option<PathBuf>,
    pub val_dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let s = SynthConfig::default();
        Self {
            seed: 0,
            input_size: [m.backbone.input_size.0, m.backbone.input_size.1],
            keypoints: m.backbone.keypoints,
            backbone_channels: m.backbone.channels,
            backbone_strides: m.backbone.strides,
            decoder_layers: m.decoder.layers,
            decoder_heads: m.decoder.heads,
            decoder_points: m.decoder.points,
            decoder_levels: m.decoder.levels,
            decoder_dim: m.decoder.dim,
            decoder_ffn: m.decoder.ffn_dim,
            flow_layers: m.flow.layers,
            flow_hidden: m.flow.hidden,
            likelihood: m.likelihood,
            lambda: m.lambda,
            noisy_refs: m.noisy_refs,
            aux_loss: m.aux_loss,
            lr: t.lr,
            lr_milestones: t.lr_milestones,
            lr_decay: t.lr_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            batch_size: t.batch_size,
            steps: t.steps,
            val_every: t.val_every,
            score_a: DEFAULT_SCORE_A,
            crop_padding: 1.25,
            pck_alpha: 0.5,
            synth_count: 32,
            synth_image_size: [s.image_size.0, s.image_size.1],
            synth_figures: s.figures,
            dataset: None,
            val_dataset: None,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Parses `text`, applies `key = value` overrides (values in TOML
    /// syntax, bare words taken as strings) and validates the result.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            table.insert(key.clone(), parse_value(raw));
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_size: (self.input_size[0], self.input_size[1]),
                channels: self.backbone_channels.clone(),
                strides: self.backbone_strides.clone(),
                keypoints: self.keypoints,
                embed_dim: self.decoder_dim,
            },
            decoder: DecoderConfig {
                layers: self.decoder_layers,
                heads: self.decoder_heads,
                points: self.decoder_points,
                levels: self.decoder_levels,
                dim: self.decoder_dim,
                ffn_dim: self.decoder_ffn,
            },
            flow: FlowConfig { layers: self.flow_layers, hidden: self.flow_hidden },
            likelihood: self.likelihood,
            lambda: self.lambda,
            aux_loss: self.aux_loss,
            noisy_refs: self.noisy_refs,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_milestones: self.lr_milestones.clone(),
            lr_decay: self.lr_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            val_every: self.val_every,
            seed: self.seed,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            keypoints: self.keypoints,
            image_size: (self.synth_image_size[0], self.synth_image_size[1]),
            figures: self.synth_figures,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()?;
        self.synth().validate()?;
        if !(self.score_a > 0.0) {
            return config(format!("score_a must be positive, got {}", self.score_a));
        }
        if !(self.crop_padding >= 1.0) || !self.crop_padding.is_finite() {
            return config(format!("crop_padding must be at least 1, got {}", self.crop_padding));
        }
        if !(self.pck_alpha > 0.0) {
            return config(format!("pck_alpha must be positive, got {}", self.pck_alpha));
        }
        if self.synth_count == 0 {
            return config("synth_count must be positive");
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model(), ModelConfig::default());
        assert_eq!(cfg.train(), TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("stepz = 3", &[]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("", &[("nope".into(), "1".into())]), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_win_over_file() {
        let cfg = RunConfig::parse("steps = 10\nlikelihood = \"residual\"", &[("steps".into(), "20".into())]).unwrap();
        assert_eq!(cfg.steps, 20);
        assert_eq!(cfg.likelihood, LikelihoodMode::Residual);
        let cfg = RunConfig::parse("", &[("out_dir".into(), "runs/a".into())]).unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("runs/a"));
    }

    #[test]
    fn invalid_values_fail_before_work() {
        for bad in ["lambda = -1.0", "decoder_dim = 30", "score_a = 0.0", "beta1 = 1.0", "input_size = [60, 64]"] {
            assert!(matches!(RunConfig::parse(bad, &[]), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig { steps: 7, dataset: Some("d".into()), ..Default::default() };
        assert_eq!(RunConfig::parse(&cfg.to_toml(), &[]).unwrap(), cfg);
    }
}
