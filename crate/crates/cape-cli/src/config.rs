//! Run configuration: one JSON file, every field a documented key, CLI flags
//! override file values.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result, bail};
use cape_core::model::ModelConfig;
use cape_core::synth::SynthSettings;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub image_size: usize,
    pub channels: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mask_variance: f64,
    pub sigma_heatmap: f64,
    pub lambda_heatmap: f64,
    /// Train/evaluate with the adjacency forced to zero (no-graph control).
    pub disable_graph: bool,

    // episodes
    pub n_shots: usize,
    pub seed: u64,

    // optimizer
    pub learning_rate: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,

    // synthetic data
    pub train_categories: usize,
    pub val_categories: usize,
    pub test_categories: usize,
    pub keypoints_min: usize,
    pub keypoints_max: usize,
    pub edge_density: f64,
    /// Fraction of keypoints grouped into identical-appearance twin pairs
    /// (same intensity, same degree) so skeleton context is required to
    /// tell them apart.
    pub twin_fraction: f64,
    pub noise_std: f64,
    pub stroke_width: f64,
    pub node_radius: f64,
    /// Instances rendered per category by `gen-data`.
    pub instances_per_category: usize,

    // evaluation
    pub eval_episodes_per_category: usize,
    pub val_episodes_per_category: usize,
    pub pck_threshold: f64,

    // data source: an annotation file (images resolved relative to it), or
    // none for in-memory synthetic episodes
    pub annotations: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 128,
            channels: 64,
            encoder_layers: 3,
            decoder_layers: 3,
            heads: 4,
            mask_variance: 0.25,
            sigma_heatmap: 2.0,
            lambda_heatmap: 2.0,
            disable_graph: false,
            n_shots: 1,
            seed: 17,
            learning_rate: 1e-3,
            decay_epochs: vec![20, 22],
            decay_factor: 0.1,
            batch_size: 4,
            epochs: 24,
            episodes_per_epoch: 240,
            train_categories: 20,
            val_categories: 5,
            test_categories: 10,
            keypoints_min: 4,
            keypoints_max: 8,
            edge_density: 0.25,
            twin_fraction: 0.4,
            noise_std: 0.05,
            stroke_width: 2.0,
            node_radius: 3.0,
            instances_per_category: 12,
            eval_episodes_per_category: 20,
            val_episodes_per_category: 6,
            pck_threshold: 0.2,
            annotations: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.n_shots != 1 && self.n_shots != 5 {
            bail!("n_shots must be 1 or 5, got {}", self.n_shots);
        }
        if self.epochs == 0 || self.episodes_per_epoch == 0 || self.batch_size == 0 {
            bail!("epochs, episodes_per_epoch, and batch_size must be positive");
        }
        if self.batch_size > self.episodes_per_epoch {
            bail!("batch_size exceeds episodes_per_epoch");
        }
        if let Some(&e) = self.decay_epochs.iter().find(|&&e| e >= self.epochs) {
            bail!("decay epoch {e} must be below total epochs {}", self.epochs);
        }
        if !(0.0 < self.decay_factor && self.decay_factor <= 1.0) {
            bail!("decay_factor must be in (0, 1]");
        }
        if self.learning_rate <= 0.0 {
            bail!("learning_rate must be positive");
        }
        if self.keypoints_min < 3 || self.keypoints_min > self.keypoints_max || self.keypoints_max > 68 {
            bail!(
                "keypoint range must satisfy 3 <= min <= max <= 68, got {}..{}",
                self.keypoints_min,
                self.keypoints_max
            );
        }
        if self.train_categories == 0 || self.val_categories == 0 || self.test_categories == 0 {
            bail!("split category counts must be >= 1");
        }
        if self.pck_threshold <= 0.0 {
            bail!("pck_threshold must be positive");
        }
        if self.eval_episodes_per_category == 0 || self.val_episodes_per_category == 0 {
            bail!("evaluation episode counts must be >= 1");
        }
        if self.instances_per_category < self.n_shots + 1 {
            bail!(
                "instances_per_category {} cannot support {}-shot episodes",
                self.instances_per_category,
                self.n_shots
            );
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            channels: self.channels,
            heads: self.heads,
            encoder_blocks: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            in_channels: 1,
            mask_variance: self.mask_variance,
            sigma_heatmap: self.sigma_heatmap,
            lambda_heatmap: self.lambda_heatmap,
            disable_graph: self.disable_graph,
        }
    }

    pub fn synth_settings(&self) -> SynthSettings {
        SynthSettings {
            k_range: (self.keypoints_min, self.keypoints_max),
            edge_density: self.edge_density,
            twin_fraction: self.twin_fraction,
            stroke_width: self.stroke_width,
            node_radius: self.node_radius,
        }
    }

    /// Learning rate after the decay schedule up to (and excluding) `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate * self.decay_factor.powi(decays as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_shot_count_is_rejected() {
        let cfg = RunConfig {
            n_shots: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn decay_epochs_must_precede_end() {
        let cfg = RunConfig {
            epochs: 10,
            decay_epochs: vec![10],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn learning_rate_schedule_applies_tenfold_decays() {
        let cfg = RunConfig {
            learning_rate: 1e-3,
            decay_epochs: vec![4, 8],
            epochs: 10,
            ..Default::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 1e-3);
        assert_eq!(cfg.learning_rate_at(4), 1e-4);
        assert!((cfg.learning_rate_at(9) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn json_roundtrip_preserves_config() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>("{\"lr\": 0.1}");
        assert!(err.is_err());
    }
}
