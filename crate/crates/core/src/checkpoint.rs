//! Versioned checkpoint container: magic, header length, JSON header,
//! then little-endian `f32` tensor payloads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::train::{Adam, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"APGNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    epoch: usize,
    model: ModelConfig,
    train: TrainConfig,
    learning_rate: f64,
    best_monitor: Option<f64>,
    bad_epochs: usize,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

/// Parameters, optimizer state and the configuration that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ParamStore<f32>,
    pub state: TrainState<f32>,
}

/// Short digest of the model and training configuration.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(model, train)).expect("configs serialize");
    hex::encode(&Sha256::digest(&json)[..8])
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.model_config, &self.train_config)
    }

    /// Rebuilds the network structure around the stored parameters.
    pub fn model(&self) -> Result<Model> {
        Ok(Model::new::<f32>(self.model_config.clone(), 0)?.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut payload: Vec<&Array2<f32>> = Vec::new();
        for (id, p) in self.params.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
            });
            payload.push(&p.value);
            for (prefix, moments) in [("adam.m.", &self.state.adam.m), ("adam.v.", &self.state.adam.v)] {
                let m = &moments[id.index()];
                tensors.push(TensorEntry {
                    name: format!("{prefix}{}", p.name),
                    shape: [m.nrows(), m.ncols()],
                });
                payload.push(m);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config_hash: self.config_hash(),
            epoch: self.state.epoch,
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            learning_rate: self.state.learning_rate,
            best_monitor: self.state.best_monitor.is_finite().then_some(self.state.best_monitor),
            bad_epochs: self.state.bad_epochs,
            adam_step: self.state.adam.step,
            tensors,
        };
        let header = serde_json::to_vec_pretty(&header)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let write = |w: &mut BufWriter<File>, bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(&mut w, MAGIC)?;
        write(&mut w, &(header.len() as u64).to_le_bytes())?;
        write(&mut w, &header)?;
        for t in payload {
            for &x in t.iter() {
                write(&mut w, &x.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 26 {
            return Err(bad("header too large"));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| bad(&format!("malformed header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", header.format_version)));
        }
        if config_hash(&header.model, &header.train) != header.config_hash {
            return Err(bad("configuration hash mismatch"));
        }

        let (_, mut params) = Model::new::<f32>(header.model.clone(), 0)?;
        let mut adam = Adam::new(&params);
        let mut seen = vec![false; params.len()];
        for entry in &header.tensors {
            let count = entry.shape[0] * entry.shape[1];
            let mut bytes = vec![0u8; count * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| bad(&format!("truncated payload for {}", entry.name)))?;
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let value = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), values).expect("shape matches count");
            let (slot, name) = if let Some(n) = entry.name.strip_prefix("adam.m.") {
                (1, n)
            } else if let Some(n) = entry.name.strip_prefix("adam.v.") {
                (2, n)
            } else {
                (0, entry.name.as_str())
            };
            let id = params
                .id(name)
                .ok_or_else(|| bad(&format!("unexpected tensor {}", entry.name)))?;
            if params.get(id).dim() != value.dim() {
                return Err(bad(&format!("tensor {} has shape {:?}", entry.name, entry.shape)));
            }
            match slot {
                0 => {
                    *params.get_mut(id) = value;
                    seen[id.index()] = true;
                }
                1 => adam.m[id.index()] = value,
                _ => adam.v[id.index()] = value,
            }
        }
        if let Some(missing) = params.ids().find(|id| !seen[id.index()]) {
            return Err(bad(&format!("missing tensor {}", params.name(missing))));
        }
        adam.step = header.adam_step;
        Ok(Checkpoint {
            model_config: header.model,
            train_config: header.train,
            params,
            state: TrainState {
                epoch: header.epoch,
                learning_rate: header.learning_rate,
                best_monitor: header.best_monitor.unwrap_or(f64::INFINITY),
                bad_epochs: header.bad_epochs,
                adam,
            },
        })
    }
}
