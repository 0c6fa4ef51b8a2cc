//! Binary checkpoint archive.
//!
//! Layout: the 8-byte magic `MMSEGCK\x01`, a little-endian `u64` header
//! length, a JSON header, then every tensor as raw little-endian `f32` in
//! header order. Tensor names carry a `param/`, `adam_m/` or `adam_v/` prefix.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetworkConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::nn::Tensor;

const MAGIC: &[u8; 8] = b"MMSEGCK\x01";

/// First and second moment estimates of the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Loop bookkeeping needed to resume or audit a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epoch: usize,
    pub global_step: u64,
    pub learning_rate: f64,
    pub best_val_loss: Option<f64>,
    pub rng_seed: u64,
    /// ChaCha word position, as a decimal string (it does not fit in JSON numbers).
    pub rng_word_pos: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub params: ParameterStore,
    pub optimizer: Option<OptimizerState>,
    pub training: Option<TrainingState>,
    /// Free-form run configuration, stored verbatim.
    pub run_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// In `f32` elements from the start of the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    seed: u64,
    network: NetworkConfig,
    run_config: Option<serde_json::Value>,
    training: Option<TrainingState>,
    optimizer_step: Option<u64>,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(network: NetworkConfig, params: ParameterStore) -> Self {
        Self {
            network,
            params,
            optimizer: None,
            training: None,
            run_config: None,
        }
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.params.iter().map(|(n, t)| (format!("param/{n}"), t)).collect();
        if let Some(opt) = &self.optimizer {
            out.extend(opt.m.iter().map(|(n, t)| (format!("adam_m/{n}"), t)));
            out.extend(opt.v.iter().map(|(n, t)| (format!("adam_v/{n}"), t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.named_tensors();
        let mut offset = 0;
        let entries = tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            version: self.params.version.clone(),
            seed: self.params.seed,
            network: self.network.clone(),
            run_config: self.run_config.clone(),
            training: self.training.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let data = &bytes[16 + hlen..];
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if data.len() != 4 * total {
            return Err(Error::Integrity(format!(
                "checkpoint data holds {} bytes, header describes {}",
                data.len(),
                4 * total
            )));
        }
        let mut params = BTreeMap::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = data
                .get(4 * e.offset..4 * (e.offset + n))
                .ok_or_else(|| Error::Integrity(format!("tensor {} out of range", e.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(&e.shape, values)?;
            let (kind, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("unprefixed tensor name {}", e.name)))?;
            let slot = match kind {
                "param" => &mut params,
                "adam_m" => &mut m,
                "adam_v" => &mut v,
                _ => return Err(Error::Format(format!("unknown tensor kind {kind}"))),
            };
            if slot.insert(name.to_string(), t).is_some() {
                return Err(Error::Integrity(format!("duplicate tensor {}", e.name)));
            }
        }
        let params = ParameterStore::from_tensors(header.version, header.seed, params);
        params.check_layout(&header.network)?;
        let optimizer = match header.optimizer_step {
            Some(step) => {
                for moments in [&m, &v] {
                    let same = moments.len() == params.len()
                        && moments
                            .iter()
                            .all(|(n, t)| params.get(n).is_some_and(|p| p.shape() == t.shape()));
                    if !same {
                        return Err(Error::Checkpoint("optimizer moments do not match the parameters".into()));
                    }
                }
                Some(OptimizerState { step, m, v })
            }
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(Error::Checkpoint("moments present without an optimizer step".into())),
        };
        Ok(Self {
            network: header.network,
            params,
            optimizer,
            training: header.training,
            run_config: header.run_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
