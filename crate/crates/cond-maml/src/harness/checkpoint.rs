//! Versioned, self-describing checkpoint files.
//!
//! A checkpoint is a JSON document carrying the model layout, every parameter
//! tensor flattened row-major, the training iteration it was taken at, and a
//! snapshot of the episode RNG. Floats round-trip losslessly (serde_json
//! prints shortest-round-trip decimal), so save → load → save is
//! byte-identical and a loaded parameter set is bitwise the one saved.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{Group, MLPConfig, ParamValues};

/// Current on-disk format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Full state of a `ChaCha8Rng`, as strings so the JSON stays integer-exact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, lowercase hex.
    pub seed: String,
    /// 128-bit word position, decimal.
    pub word_pos: String,
    /// 64-bit stream id, decimal.
    pub stream: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            word_pos: rng.get_word_pos().to_string(),
            stream: rng.get_stream().to_string(),
        }
    }

    /// A state equivalent to `ChaCha8Rng::seed_from_u64(seed)` before any
    /// draws.
    pub fn fresh(seed: u64) -> RngState {
        RngState::capture(&ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.seed.len() != 64 || !self.seed.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Checkpoint(format!(
                "rng seed must be 64 hex digits, got {:?}",
                self.seed
            )));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in seed.iter_mut().enumerate() {
            *chunk = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .expect("hex digits checked above");
        }
        let word_pos: u128 = self.word_pos.parse().map_err(|_| {
            Error::Checkpoint(format!("rng word_pos is not an integer: {:?}", self.word_pos))
        })?;
        let stream: u64 = self.stream.parse().map_err(|_| {
            Error::Checkpoint(format!("rng stream is not an integer: {:?}", self.stream))
        })?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// One parameter tensor, flattened row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// A saved training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: MLPConfig,
    pub params: Vec<CheckpointEntry>,
    pub iteration: usize,
    pub rng_state: RngState,
}

impl Checkpoint {
    pub fn from_values(values: &ParamValues, iteration: usize, rng_state: RngState) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: values.config.clone(),
            params: values
                .entries
                .iter()
                .map(|(name, group, tensor)| CheckpointEntry {
                    name: name.clone(),
                    group: *group,
                    shape: tensor.shape().to_vec(),
                    values: tensor.data().to_vec(),
                })
                .collect(),
            iteration,
            rng_state,
        }
    }

    /// Checks version and the parameter table against the embedded model
    /// layout, reporting the first mismatched entry by name.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} unsupported (this build reads version {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        self.model.validate()?;
        let widths = self.model.widths();
        let layers = widths.len() - 1;
        let mut expected: Vec<(String, Group, Vec<usize>)> = Vec::with_capacity(2 * layers);
        for layer in 1..=layers {
            let group = if layer == layers { Group::Cls } else { Group::Emb };
            expected.push((
                format!("w{layer}"),
                group,
                vec![widths[layer - 1], widths[layer]],
            ));
            expected.push((format!("b{layer}"), group, vec![widths[layer]]));
        }
        if self.params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "model {:?} expects {} parameter entries, checkpoint has {}",
                self.model,
                expected.len(),
                self.params.len()
            )));
        }
        for (entry, (name, group, shape)) in self.params.iter().zip(&expected) {
            if &entry.name != name {
                return Err(Error::Checkpoint(format!(
                    "entry {:?} out of place: expected {:?}",
                    entry.name, name
                )));
            }
            if &entry.group != group {
                return Err(Error::Checkpoint(format!(
                    "entry {:?}: expected group {group}, found {}",
                    entry.name, entry.group
                )));
            }
            if &entry.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "entry {:?}: expected shape {shape:?}, found {:?}",
                    entry.name, entry.shape
                )));
            }
            let numel: usize = shape.iter().product();
            if entry.values.len() != numel {
                return Err(Error::Checkpoint(format!(
                    "entry {:?}: shape {shape:?} needs {numel} values, found {}",
                    entry.name,
                    entry.values.len()
                )));
            }
            if let Some(bad) = entry.values.iter().find(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "entry {:?} contains non-finite value {bad}",
                    entry.name
                )));
            }
        }
        Ok(())
    }

    /// Reconstructs the parameter set; bitwise equal to the values saved.
    pub fn to_values(&self) -> Result<ParamValues> {
        self.validate()?;
        let entries = self
            .params
            .iter()
            .map(|e| {
                Tensor::new(e.shape.clone(), e.values.clone())
                    .map(|t| (e.name.clone(), e.group, t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamValues {
            config: self.model.clone(),
            entries,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.validate()?;
    let json = serde_json::to_string_pretty(ckpt)
        .map_err(|e| Error::Checkpoint(format!("serialize failed: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| {
        Error::Checkpoint(format!("{} is not a readable checkpoint: {e}", path.display()))
    })?;
    ckpt.validate()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;
    use rand::RngCore;

    fn small_values(seed: u64) -> ParamValues {
        let cfg = MLPConfig {
            input_dim: 3,
            hidden_dims: vec![4],
            n_classes: 2,
            seed,
        };
        ParamValues::init(&cfg, &mut rng(seed)).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical_and_values_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let vals = small_values(3);
        let ckpt = Checkpoint::from_values(&vals, 17, RngState::fresh(3));

        let first = dir.path().join("a.json");
        let second = dir.path().join("b.json");
        save_checkpoint(&ckpt, &first).unwrap();
        let loaded = load_checkpoint(&first).unwrap();
        save_checkpoint(&loaded, &second).unwrap();

        let bytes_a = std::fs::read(&first).unwrap();
        let bytes_b = std::fs::read(&second).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(loaded.to_values().unwrap(), vals);
        assert_eq!(loaded.iteration, 17);
    }

    #[test]
    fn rng_state_round_trips_mid_stream() {
        let mut source = rng(99);
        source.next_u64();
        source.next_u64();
        source.next_u64();
        let state = RngState::capture(&source);
        let mut restored = state.restore().unwrap();
        let mut original = source.clone();
        for _ in 0..16 {
            assert_eq!(original.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn validation_names_the_first_mismatched_entry() {
        let vals = small_values(5);
        let good = Checkpoint::from_values(&vals, 0, RngState::fresh(5));

        let mut wrong_shape = good.clone();
        wrong_shape.params[2].shape = vec![4, 3];
        let msg = wrong_shape.validate().unwrap_err().to_string();
        assert!(msg.contains("w2"), "{msg}");
        assert!(msg.contains("[4, 2]"), "{msg}");

        let mut wrong_name = good.clone();
        wrong_name.params[1].name = "bias1".to_string();
        let msg = wrong_name.validate().unwrap_err().to_string();
        assert!(msg.contains("bias1"), "{msg}");

        let mut wrong_group = good.clone();
        wrong_group.params[0].group = Group::Cls;
        let msg = wrong_group.validate().unwrap_err().to_string();
        assert!(msg.contains("w1"), "{msg}");

        let mut wrong_version = good.clone();
        wrong_version.format_version = 9;
        let msg = wrong_version.validate().unwrap_err().to_string();
        assert!(msg.contains("version 9"), "{msg}");

        let mut bad_value = good.clone();
        bad_value.params[3].values[0] = f64::NAN;
        assert!(bad_value.validate().is_err());
    }

    #[test]
    fn corrupt_and_missing_files_are_descriptive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, "{ not json").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("checkpoint"), "{err}");

        let missing = load_checkpoint(&dir.path().join("nope.json")).unwrap_err();
        assert_eq!(missing.exit_code(), 3);
    }
}
