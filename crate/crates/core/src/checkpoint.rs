//! Checkpoint files: the magic `DANCKPT1`, a little-endian `u64` header
//! length, a JSON header (model description, training config, tensor
//! table) and the tensors as raw little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{Expert, ExpertConfig, TaskTag};
use crate::gating::DanNet;
use crate::image::write_atomic;
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::train::{Adam, TrainConfig};

pub const MAGIC: &[u8; 8] = b"DANCKPT1";

const DEHAZE: &str = "dehaze/";
const DESNOW: &str = "desnow/";
const AGN: &str = "agn/";
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Expert { task: TaskTag, config: ExpertConfig },
    Dan { dehaze: ExpertConfig, desnow: ExpertConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    model: Model,
    train: Option<TrainConfig>,
    iteration: u64,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

/// Named `f32` tensors plus enough description to rebuild the model.
/// Optimiser moments are stored as tensors under `adam.m/` and `adam.v/`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub iteration: u64,
    pub adam_step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn push_store<T: Real>(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, store: &ParamStore<T>) {
    for (name, t) in store.iter() {
        out.push((format!("{}{}", prefix, name), t.cast()));
    }
}

fn push_adam<T: Real>(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, store: &ParamStore<T>, adam: &Adam<T>) {
    for ((name, m), v) in store.names().iter().zip(adam.first_moments()).zip(adam.second_moments()) {
        out.push((format!("{}{}{}", MOMENT_M, prefix, name), m.cast()));
        out.push((format!("{}{}{}", MOMENT_V, prefix, name), v.cast()));
    }
}

impl Checkpoint {
    pub fn from_expert<T: Real>(e: &Expert<T>, train: Option<&TrainConfig>, iteration: u64, adam: Option<&Adam<T>>) -> Self {
        let mut tensors = Vec::new();
        push_store(&mut tensors, "", &e.params);
        if let Some(a) = adam {
            push_adam(&mut tensors, "", &e.params, a);
        }
        Self {
            model: Model::Expert {
                task: e.task,
                config: e.config,
            },
            train: train.cloned(),
            iteration,
            adam_step: adam.map_or(0, |a| a.step_count()),
            tensors,
        }
    }

    /// One file holding both experts and the gate; moments, if given, are
    /// those of the gate parameters.
    pub fn from_dan<T: Real>(d: &DanNet<T>, train: Option<&TrainConfig>, iteration: u64, adam: Option<&Adam<T>>) -> Self {
        let mut tensors = Vec::new();
        push_store(&mut tensors, DEHAZE, &d.dehaze.params);
        push_store(&mut tensors, DESNOW, &d.desnow.params);
        push_store(&mut tensors, AGN, &d.gate_params);
        if let Some(a) = adam {
            push_adam(&mut tensors, AGN, &d.gate_params, a);
        }
        Self {
            model: Model::Dan {
                dehaze: d.dehaze.config,
                desnow: d.desnow.config,
            },
            train: train.cloned(),
            iteration,
            adam_step: adam.map_or(0, |a| a.step_count()),
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies `prefix`-named tensors into a freshly built store, requiring an
    /// exact match of names and shapes.
    fn fill_store<T: Real>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{}{}", prefix, store.names()[id.index()]);
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", name)))?;
            store
                .set(id, t.cast())
                .map_err(|e| Error::Checkpoint(format!("{}: {}", name, e)))?;
        }
        let expected = store.len();
        let present = self
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix) && !n.starts_with("adam."))
            .count();
        if present != expected {
            return Err(Error::Checkpoint(format!(
                "{} tensors under {:?}, model has {}",
                present, prefix, expected
            )));
        }
        Ok(())
    }

    fn adam_for<T: Real>(&self, prefix: &str, store: &ParamStore<T>, cfg: &TrainConfig) -> Result<Option<Adam<T>>> {
        let first = format!("{}{}{}", MOMENT_M, prefix, store.names().first().map_or("", |s| s.as_str()));
        if self.tensor(&first).is_none() {
            return Ok(None);
        }
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in store.names() {
            for (tag, out) in [(MOMENT_M, &mut m), (MOMENT_V, &mut v)] {
                let key = format!("{}{}{}", tag, prefix, name);
                let t = self
                    .tensor(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", key)))?;
                out.push(t.cast());
            }
        }
        Adam::restore(store, cfg.adam(), self.adam_step, m, v).map(Some)
    }

    pub fn to_expert<T: Real>(&self) -> Result<Expert<T>> {
        let Model::Expert { task, config } = self.model else {
            return Err(Error::Checkpoint("file holds a gated mixture, not an expert".into()));
        };
        let mut e = Expert::build(config, task, 0)?;
        self.fill_store("", &mut e.params)?;
        Ok(e)
    }

    /// The expert's optimiser state, when the file has one.
    pub fn expert_adam<T: Real>(&self, e: &Expert<T>) -> Result<Option<Adam<T>>> {
        let cfg = self.train.clone().unwrap_or_default();
        self.adam_for("", &e.params, &cfg)
    }

    pub fn to_dan<T: Real>(&self) -> Result<DanNet<T>> {
        let Model::Dan { dehaze, desnow } = self.model else {
            return Err(Error::Checkpoint("file holds a single expert, not a gated mixture".into()));
        };
        let mut d = DanNet::new(
            Expert::build(dehaze, TaskTag::Dehaze, 0)?,
            Expert::build(desnow, TaskTag::Desnow, 0)?,
            0,
        )?;
        self.fill_store(DEHAZE, &mut d.dehaze.params)?;
        self.fill_store(DESNOW, &mut d.desnow.params)?;
        self.fill_store(AGN, &mut d.gate_params)?;
        Ok(d)
    }

    pub fn gate_adam<T: Real>(&self, d: &DanNet<T>) -> Result<Option<Adam<T>>> {
        let cfg = self.train.clone().unwrap_or_default();
        self.adam_for(AGN, &d.gate_params, &cfg)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len();
        }
        let header = Header {
            format: String::from_utf8_lossy(MAGIC).into_owned(),
            model: self.model.clone(),
            train: self.train.clone(),
            iteration: self.iteration,
            adam_step: self.adam_step,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |offset: usize, detail: String| Error::Format {
            what: "checkpoint",
            offset,
            detail,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad(0, "missing DANCKPT1 magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(8, format!("header length {} exceeds file", len)))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..data_start]).map_err(|e| bad(16, format!("header: {}", e)))?;
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + 4 * n > data.len() {
                return Err(bad(data_start + e.offset, format!("tensor {} out of place", e.name)));
            }
            let vals = data[e.offset..e.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, vals)?));
            expected += 4 * n;
        }
        if expected != data.len() {
            return Err(bad(data_start + expected, "trailing bytes after last tensor".into()));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            iteration: header.iteration,
            adam_step: header.adam_step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::InFile {
            path: path.to_path_buf(),
            source: Box::new(e),
        })
    }
}
