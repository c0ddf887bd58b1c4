use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Hyper, ModelParams, Weights};
use super::train::{TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::masking::MaskConfig;

pub const CHECKPOINT_FORMAT: &str = "emg-intent-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    hyper: Hyper,
    class_names: Vec<String>,
    sample_rate_hz: u32,
    train_config: Option<TrainConfig>,
    mask_config: Option<MaskConfig>,
    train_log: Option<TrainLog>,
    arrays: Vec<NamedArray>,
}

/// A trained model with the metadata needed to reuse or reproduce it.
/// Stored as JSON; every float is written in shortest round-trip form so the
/// file reloads bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub class_names: Vec<String>,
    pub sample_rate_hz: u32,
    pub train_config: Option<TrainConfig>,
    pub mask_config: Option<MaskConfig>,
    pub train_log: Option<TrainLog>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let arrays = self
            .params
            .weights
            .blocks(true)
            .into_iter()
            .map(|b| NamedArray {
                name: b.name,
                shape: b.shape,
                data: b.data.to_vec(),
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            hyper: self.params.hyper,
            class_names: self.class_names.clone(),
            sample_rate_hz: self.sample_rate_hz,
            train_config: self.train_config.clone(),
            mask_config: self.mask_config.clone(),
            train_log: self.train_log.clone(),
            arrays,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(s)?)
    }

    fn from_file(file: CheckpointFile) -> Result<Self> {
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                found: file.format,
                expected: CHECKPOINT_FORMAT.into(),
            });
        }
        file.hyper.validate()?;
        if file.class_names.len() != file.hyper.classes {
            return Err(Error::Schema(format!(
                "{} class names for a {}-class model",
                file.class_names.len(),
                file.hyper.classes
            )));
        }
        let mut weights = Weights::zeros(&file.hyper);
        {
            let mut blocks = weights.blocks_mut(true);
            if blocks.len() != file.arrays.len() {
                return Err(Error::Schema(format!(
                    "checkpoint holds {} arrays, architecture needs {}",
                    file.arrays.len(),
                    blocks.len()
                )));
            }
            for (dst, src) in blocks.iter_mut().zip(&file.arrays) {
                if dst.name != src.name || dst.data.len() != src.data.len() {
                    return Err(Error::Schema(format!(
                        "array {:?} ({} values) does not match expected {:?} ({} values)",
                        src.name,
                        src.data.len(),
                        dst.name,
                        dst.data.len()
                    )));
                }
                dst.data.copy_from_slice(&src.data);
            }
        }
        Ok(Self {
            params: ModelParams {
                hyper: file.hyper,
                weights,
            },
            class_names: file.class_names,
            sample_rate_hz: file.sample_rate_hz,
            train_config: file.train_config,
            mask_config: file.mask_config,
            train_log: file.train_log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_json()?.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reloads_exactly() {
        let hyper = Hyper {
            d_model: 8,
            heads: 2,
            layers: 1,
            ff_dim: 16,
            window_len: 4,
            channels: 2,
            classes: 3,
            ..Default::default()
        };
        let params = ModelParams::init(hyper, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ck = Checkpoint {
            params,
            class_names: vec!["a".into(), "b".into(), "c".into()],
            sample_rate_hz: 200,
            train_config: Some(TrainConfig::default()),
            mask_config: Some(MaskConfig::default()),
            train_log: None,
        };
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_unknown_format() {
        let bad = r#"{"format":"other/9","hyper":{"d_model":8,"heads":2,"layers":1,"ff_dim":16,"dropout":0.0,"window_len":4,"channels":2,"classes":3,"positional":"sinusoidal"},"class_names":[],"sample_rate_hz":200,"train_config":null,"mask_config":null,"train_log":null,"arrays":[]}"#;
        assert!(matches!(Checkpoint::from_json(bad), Err(Error::Format { .. })));
    }
}
