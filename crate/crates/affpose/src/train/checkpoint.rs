//! Checkpoint container: configuration snapshot, epoch cursor, training
//! label set, loss history, and every parameter.
//!
//! On-disk layout (see docs/formats.md):
//!
//! ```text
//! APCKPT 1\n
//! <single-line JSON metadata>\n
//! PARAMS 1\n
//! ... parameter container ...
//! ```
//!
//! Reloading reproduces the parameter store bit-for-bit, so a reloaded
//! checkpoint evaluates identically to the in-memory one.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::io::{read_params, write_params};
use crate::numerics::params::ParamStore;

use super::ExperimentConfig;

const CHECKPOINT_MAGIC: &str = "APCKPT 1";

/// Mean branch losses over one epoch's items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean detection loss (summed per-point negative log-likelihood).
    pub affordance: f64,
    /// Mean pose noise-regression loss.
    pub pose: f64,
}

/// Where the deterministic randomness stands: every stream derives from the
/// seed, and epoch streams are indexed by epoch, so (seed, next_epoch) fully
/// describes the training rng state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ExperimentConfig,
    epoch: usize,
    labels: Vec<String>,
    rng: RngCursor,
    loss_history: Vec<EpochLoss>,
}

/// A trained (or in-training) model with everything needed to evaluate,
/// infer, and account for how it got here.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Training label set (sorted, background included) the detection loss
    /// used; evaluation queries this same set.
    pub labels: Vec<String>,
    pub rng: RngCursor,
    pub loss_history: Vec<EpochLoss>,
    pub store: ParamStore<f32>,
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        config: checkpoint.config.clone(),
        epoch: checkpoint.epoch,
        labels: checkpoint.labels.clone(),
        rng: checkpoint.rng.clone(),
        loss_history: checkpoint.loss_history.clone(),
    };
    let meta_json = serde_json::to_string(&meta).map_err(|e| Error::Json {
        what: "checkpoint metadata".into(),
        source: e,
    })?;
    let mut bytes = Vec::new();
    writeln!(bytes, "{CHECKPOINT_MAGIC}").expect("vec write");
    writeln!(bytes, "{meta_json}").expect("vec write");
    write_params(&checkpoint.store, &mut bytes)?;
    crate::data::atomic_write(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!(
            "{}: not a checkpoint (expected `{CHECKPOINT_MAGIC}`, found `{}`)",
            path.display(),
            line.trim_end()
        )));
    }
    line.clear();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let meta: CheckpointMeta = serde_json::from_str(line.trim_end()).map_err(|e| Error::Json {
        what: format!("checkpoint metadata in {}", path.display()),
        source: e,
    })?;
    let store = read_params(&mut reader)?;
    Ok(Checkpoint {
        config: meta.config,
        epoch: meta.epoch,
        labels: meta.labels,
        rng: meta.rng,
        loss_history: meta.loss_history,
        store,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::tiny_config;
    use super::super::{register_model_params, training_label_set};
    use super::*;
    use crate::data::synth::generate_synthetic;

    fn sample_checkpoint() -> Checkpoint {
        let config = tiny_config();
        let records = generate_synthetic(&config.synth, 5).unwrap();
        let mut store = ParamStore::new();
        register_model_params(&mut store, &config, 16).unwrap();
        Checkpoint {
            labels: training_label_set(&records),
            config,
            epoch: 2,
            rng: RngCursor {
                seed: 0,
                next_epoch: 2,
            },
            loss_history: vec![
                EpochLoss {
                    epoch: 0,
                    affordance: 170.25,
                    pose: 7.5,
                },
                EpochLoss {
                    epoch: 1,
                    affordance: 150.125,
                    pose: 6.25,
                },
            ],
            store,
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_for_bit() {
        let ckpt = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.epoch, ckpt.epoch);
        assert_eq!(back.labels, ckpt.labels);
        assert_eq!(back.rng, ckpt.rng);
        assert_eq!(back.loss_history, ckpt.loss_history);
        assert_eq!(back.store.len(), ckpt.store.len());
        for i in 0..ckpt.store.len() {
            assert_eq!(back.store.name_at(i), ckpt.store.name_at(i));
            assert_eq!(
                back.store.value_at(i).as_slice(),
                ckpt.store.value_at(i).as_slice(),
                "parameter {} changed across save/load",
                ckpt.store.name_at(i)
            );
        }
    }

    #[test]
    fn wrong_magic_is_rejected_with_a_clear_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"PARAMS 1\n0\nDATA\n").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("APCKPT"));
    }
}
