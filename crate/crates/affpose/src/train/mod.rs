//! Joint end-to-end training (detection loss plus pose-denoising loss),
//! checkpointing, evaluation, and inference.
//!
//! The experiment configuration is a JSON file covering data generation,
//! the split, text embeddings, both network branches, the noise schedule,
//! and the optimizer. Two named profiles are provided: full-scale defaults,
//! and a desk profile small enough to train on one CPU in minutes.

mod checkpoint;
mod eval;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EpochLoss, RngCursor};
pub use eval::{evaluate, infer, EvalOptions, EvalReports, InferenceResult};
pub use model::{prepare_dataset, register_model_params, train, training_label_set, PreparedDataset, PreparedObject};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::synth::SynthConfig;
use crate::diffusion::denoiser::DenoiserConfig;
use crate::diffusion::{make_linear_schedule, NoiseSchedule};
use crate::embeddings::{EmbeddingTable, TextProvider};
use crate::encoder::{EncoderConfig, SaLevelConfig};
use crate::error::{Error, Result};
use crate::numerics::adam::AdamConfig;

/// Where label embeddings come from: deterministic hashed unit vectors
/// (open vocabulary, no external model) or a table imported from file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EmbeddingMode {
    Hashed { dimension: usize, seed: u64 },
    Imported { path: String },
}

impl EmbeddingMode {
    pub fn provider(&self) -> Result<TextProvider> {
        match self {
            EmbeddingMode::Hashed { dimension, seed } => Ok(TextProvider::Hashed {
                dimension: *dimension,
                seed: *seed,
            }),
            EmbeddingMode::Imported { path } => Ok(TextProvider::Imported {
                table: EmbeddingTable::load(Path::new(path))?,
            }),
        }
    }
}

/// Noise-schedule and condition-dropout settings for the diffusion branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSettings {
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Probability of training a step with both conditions dropped.
    pub p_uncond: f64,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        DiffusionSettings {
            t_count: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            p_uncond: 0.05,
        }
    }
}

/// Complete experiment description; serialized as the config file the CLI
/// consumes. Every field has a default, so partial config files work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; every stream (init, epochs, sampling) derives from it.
    pub seed: u64,
    /// Dataset manifest consumed by `train`/`eval` and written by `gen-data`.
    pub dataset_path: String,
    /// Generation parameters used by `gen-data`.
    pub synth: SynthConfig,
    pub split_seed: u64,
    /// Train/val/test fractions; must sum to 1.
    pub split_ratios: [f64; 3],
    pub embeddings: EmbeddingMode,
    pub encoder: EncoderConfig,
    /// Width of the unified context vector fusing cloud and text features.
    pub context_dim: usize,
    /// Width of the sinusoidal timestep features (even).
    pub time_dim: usize,
    /// Output widths of the denoiser's three downscaling layers.
    pub denoiser_widths: [usize; 3],
    pub diffusion: DiffusionSettings,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Guidance weight used by evaluation and inference unless overridden.
    pub guidance: f64,
    /// Generated poses per (object, affordance) pair during evaluation.
    pub eval_poses_per_pair: usize,
}

impl Default for ExperimentConfig {
    /// Full-scale defaults: 1000-step schedule, 200 epochs, batch 32,
    /// learning rate 1e-3, weight decay 1e-4, guidance 0.2, 200 evaluation
    /// poses per pair.
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset_path: "data/dataset.json".into(),
            synth: SynthConfig::default(),
            split_seed: 1,
            split_ratios: [0.7, 0.1, 0.2],
            embeddings: EmbeddingMode::Hashed {
                dimension: 512,
                seed: 17,
            },
            encoder: EncoderConfig {
                levels: vec![
                    SaLevelConfig {
                        centroids: 512,
                        radius: 0.1,
                        group_size: 32,
                        mlp: vec![64, 64, 128],
                    },
                    SaLevelConfig {
                        centroids: 128,
                        radius: 0.25,
                        group_size: 32,
                        mlp: vec![128, 128, 256],
                    },
                ],
                fp_mlp: vec![256, 512],
                global_mlp: vec![512],
            },
            context_dim: 128,
            time_dim: 64,
            denoiser_widths: [64, 128, 256],
            diffusion: DiffusionSettings::default(),
            optimizer: AdamConfig::default(),
            epochs: 200,
            batch_size: 32,
            guidance: 0.2,
            eval_poses_per_pair: 200,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale profile: 200 synthetic objects, 64-dimensional hashed
    /// embeddings, narrow networks, a 200-step schedule, and 50 epochs, so
    /// the full pipeline trains on one CPU within minutes.
    pub fn desk_profile() -> Self {
        ExperimentConfig {
            dataset_path: "data/desk.json".into(),
            embeddings: EmbeddingMode::Hashed {
                dimension: 64,
                seed: 17,
            },
            encoder: EncoderConfig {
                levels: vec![
                    SaLevelConfig {
                        centroids: 192,
                        radius: 0.1,
                        group_size: 12,
                        mlp: vec![32, 32, 64],
                    },
                    SaLevelConfig {
                        centroids: 48,
                        radius: 0.25,
                        group_size: 12,
                        mlp: vec![64, 64, 128],
                    },
                ],
                fp_mlp: vec![96, 64],
                global_mlp: vec![96],
            },
            context_dim: 64,
            time_dim: 32,
            denoiser_widths: [32, 64, 128],
            diffusion: DiffusionSettings {
                t_count: 200,
                ..DiffusionSettings::default()
            },
            optimizer: AdamConfig {
                // Small batches plus a higher step size: at 200 objects the
                // run sees few batches per epoch, so it leans on step count
                // rather than batch averaging to converge inside 50 epochs.
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            epochs: 50,
            batch_size: 4,
            ..ExperimentConfig::default()
        }
    }

    /// The denoiser architecture implied by this config once the text
    /// dimension is known (hashed mode fixes it; imported mode takes it from
    /// the loaded table).
    pub fn denoiser_config(&self, text_dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            cloud_dim: self.encoder.global_dim(),
            text_dim,
            context_dim: self.context_dim,
            time_dim: self.time_dim,
            down_widths: self.denoiser_widths,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(
            self.diffusion.t_count,
            self.diffusion.beta_start,
            self.diffusion.beta_end,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.encoder.validate()?;
        self.schedule()?;
        self.optimizer.validate()?;
        if !(self.diffusion.p_uncond >= 0.0 && self.diffusion.p_uncond < 1.0) {
            return Err(Error::Usage(format!(
                "condition-dropout probability must be in [0, 1), got {}",
                self.diffusion.p_uncond
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Usage(format!(
                "epochs ({}) and batch size ({}) must be at least 1",
                self.epochs, self.batch_size
            )));
        }
        if !self.guidance.is_finite() {
            return Err(Error::Usage(format!(
                "guidance weight must be finite, got {}",
                self.guidance
            )));
        }
        if self.eval_poses_per_pair == 0 {
            return Err(Error::Usage(
                "eval_poses_per_pair must be at least 1".into(),
            ));
        }
        let ratio_sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|&r| r < 0.0) || (ratio_sum - 1.0).abs() > 1e-9 {
            return Err(Error::Usage(format!(
                "split ratios must be non-negative and sum to 1, got {:?}",
                self.split_ratios
            )));
        }
        if let EmbeddingMode::Hashed { dimension, .. } = &self.embeddings {
            if *dimension != self.encoder.point_dim() {
                return Err(Error::Usage(format!(
                    "text dimension {} must match the per-point feature dimension {} \
                     for the correlation head",
                    dimension,
                    self.encoder.point_dim()
                )));
            }
            self.denoiser_config(*dimension).validate()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: ExperimentConfig =
            serde_json::from_slice(&bytes).map_err(|e| Error::Json {
                what: format!("experiment config {}", path.display()),
                source: e,
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Json {
            what: "experiment config".into(),
            source: e,
        })?;
        crate::data::atomic_write(path, &json)
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip_through_json() {
        for config in [
            ExperimentConfig::default(),
            ExperimentConfig::desk_profile(),
            test_support::tiny_config(),
        ] {
            config.validate().unwrap();
            let json = serde_json::to_string(&config).unwrap();
            let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(back, config);
        }
    }

    #[test]
    fn partial_config_files_fill_in_defaults() {
        let config: ExperimentConfig =
            serde_json::from_str(r#"{"epochs": 7, "guidance": 0.5}"#).unwrap();
        assert_eq!(config.epochs, 7);
        assert_eq!(config.guidance, 0.5);
        assert_eq!(config.batch_size, ExperimentConfig::default().batch_size);
    }

    #[test]
    fn validation_rejects_inconsistent_configs() {
        let mut bad = test_support::tiny_config();
        bad.diffusion.p_uncond = 1.5;
        assert!(bad.validate().is_err());

        let mut bad = test_support::tiny_config();
        bad.split_ratios = [0.5, 0.5, 0.5];
        assert!(bad.validate().is_err());

        let mut bad = test_support::tiny_config();
        bad.embeddings = EmbeddingMode::Hashed {
            dimension: 99,
            seed: 17,
        };
        assert!(bad.validate().is_err(), "text dim must match point dim");

        let mut bad = test_support::tiny_config();
        bad.epochs = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn desk_profile_keeps_contract_values() {
        let desk = ExperimentConfig::desk_profile();
        assert_eq!(desk.synth.total(), 200);
        assert_eq!(desk.epochs, 50);
        assert_eq!(desk.diffusion.t_count, 200);
        assert_eq!(
            desk.embeddings,
            EmbeddingMode::Hashed {
                dimension: 64,
                seed: 17
            }
        );
        assert_eq!(desk.encoder.point_dim(), 64);
        assert_eq!(desk.guidance, 0.2);
        assert_eq!(desk.eval_poses_per_pair, 200);
        assert_eq!(desk.diffusion.p_uncond, 0.05);
        desk.validate().expect("desk profile must validate");
    }
}
