//! Checkpoint files: a JSON manifest describing every tensor plus a raw
//! little-endian blob of 64-bit floats.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::AdamW;
use crate::params::{Group, ParamId, ParameterStore};
use crate::rng::StreamRng;
use crate::synth::Target;

pub const FORMAT: &str = "tamer-checkpoint-v1";
pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "checkpoint.bin";

/// Position of a seeded ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Word position, as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &StreamRng) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<StreamRng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Data(format!("bad rng word position '{}'", self.word_pos)))?;
        let mut rng = StreamRng::seed_from_u64(self.seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub store: ParameterStore,
    pub optimizer: Option<AdamW>,
    /// `None` for checkpoints not produced by training.
    pub best_valid_auprc: Option<f64>,
    pub epoch: usize,
    pub rng: Option<RngState>,
    /// Per-feature LOCF defaults (training-set means).
    pub impute_defaults: Vec<f64>,
    pub target: Target,
    /// Seed of the train/valid/test split the model was trained on.
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: Group,
    pub shape: [usize; 2],
    /// Offset into the blob, in `f64` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub weight_decay: f64,
    pub step: u64,
    /// Offsets (in elements) of the first and second moment of every
    /// tensor, in tensor order.
    pub first_moment: Vec<usize>,
    pub second_moment: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub little_endian: bool,
    pub config: ModelConfig,
    pub input_dim: usize,
    pub target: Target,
    pub epoch: usize,
    pub best_valid_auprc: Option<f64>,
    pub rng: Option<RngState>,
    pub impute_defaults: Vec<f64>,
    pub split_seed: u64,
    pub groups: Vec<Group>,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerEntry>,
    pub blob_elements: usize,
    pub blob_sha256: String,
}

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.extension().is_some_and(|e| e == "json") {
        (path.to_path_buf(), path.with_extension("bin"))
    } else {
        (path.join(MANIFEST_FILE), path.join(BLOB_FILE))
    }
}

fn push(blob: &mut Vec<u8>, a: &Array2<f64>) {
    for v in a.iter() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    /// Manifest and blob bytes.
    pub fn encode(&self) -> Result<(CheckpointManifest, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(self.store.len());
        for (_, p) in self.store.iter() {
            let (r, c) = p.value.dim();
            tensors.push(TensorEntry {
                name: p.name.clone(),
                group: p.group,
                shape: [r, c],
                offset: blob.len() / 8,
                len: r * c,
            });
            push(&mut blob, &p.value);
        }
        let optimizer = match &self.optimizer {
            Some(opt) => {
                if opt.ids != self.store.ids() {
                    return Err(Error::Contract("optimizer slots must cover every tensor in order".into()));
                }
                let mut first = Vec::new();
                for m in &opt.m {
                    first.push(blob.len() / 8);
                    push(&mut blob, m);
                }
                let mut second = Vec::new();
                for v in &opt.v {
                    second.push(blob.len() / 8);
                    push(&mut blob, v);
                }
                Some(OptimizerEntry {
                    weight_decay: opt.weight_decay,
                    step: opt.step,
                    first_moment: first,
                    second_moment: second,
                })
            }
            None => None,
        };
        let manifest = CheckpointManifest {
            format: FORMAT.into(),
            little_endian: true,
            config: self.config.clone(),
            input_dim: self.input_dim,
            target: self.target,
            epoch: self.epoch,
            best_valid_auprc: self.best_valid_auprc,
            rng: self.rng.clone(),
            impute_defaults: self.impute_defaults.clone(),
            split_seed: self.split_seed,
            groups: Group::ALL.to_vec(),
            tensors,
            optimizer,
            blob_elements: blob.len() / 8,
            blob_sha256: hex::encode(Sha256::digest(&blob)),
        };
        Ok((manifest, blob))
    }

    /// Writes `checkpoint.json` and `checkpoint.bin` into `dir` (or next
    /// to `dir` when it names a `.json` file).
    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        let (json, bin) = paths(path);
        if let Some(parent) = json.parent() {
            fs::create_dir_all(parent)?;
        }
        let (manifest, blob) = self.encode()?;
        fs::write(&bin, &blob)?;
        fs::write(&json, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (json, bin) = paths(path);
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&json)?)?;
        let blob = fs::read(&bin)?;
        Self::decode(&manifest, &blob)
    }

    pub fn decode(manifest: &CheckpointManifest, blob: &[u8]) -> Result<Self> {
        if manifest.format != FORMAT || !manifest.little_endian {
            return Err(Error::Data(format!("unsupported checkpoint format '{}'", manifest.format)));
        }
        if blob.len() != manifest.blob_elements * 8 {
            return Err(Error::Data("checkpoint blob length disagrees with manifest".into()));
        }
        if hex::encode(Sha256::digest(blob)) != manifest.blob_sha256 {
            return Err(Error::Data("checkpoint blob hash mismatch".into()));
        }
        let read = |offset: usize, shape: (usize, usize)| -> Result<Array2<f64>> {
            let len = shape.0 * shape.1;
            let bytes = blob
                .get(offset * 8..(offset + len) * 8)
                .ok_or_else(|| Error::Data("tensor extends past blob".into()))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(Array2::from_shape_vec(shape, data).expect("length matches shape"))
        };
        let mut store = ParameterStore::new();
        for t in &manifest.tensors {
            if t.len != t.shape[0] * t.shape[1] {
                return Err(Error::Data(format!("tensor {} length disagrees with shape", t.name)));
            }
            store.add(t.name.clone(), t.group, read(t.offset, (t.shape[0], t.shape[1]))?);
        }
        let optimizer = match &manifest.optimizer {
            Some(o) => {
                if o.first_moment.len() != store.len() || o.second_moment.len() != store.len() {
                    return Err(Error::Data("optimizer slots do not cover every tensor".into()));
                }
                let shape = |i: usize| store.get(ParamId(i)).dim();
                Some(AdamW {
                    weight_decay: o.weight_decay,
                    step: o.step,
                    ids: store.ids(),
                    m: o.first_moment.iter().enumerate().map(|(i, &off)| read(off, shape(i))).collect::<Result<_>>()?,
                    v: o.second_moment.iter().enumerate().map(|(i, &off)| read(off, shape(i))).collect::<Result<_>>()?,
                })
            }
            None => None,
        };
        Ok(Self {
            config: manifest.config.clone(),
            input_dim: manifest.input_dim,
            store,
            optimizer,
            best_valid_auprc: manifest.best_valid_auprc,
            epoch: manifest.epoch,
            rng: manifest.rng.clone(),
            impute_defaults: manifest.impute_defaults.clone(),
            target: manifest.target,
            split_seed: manifest.split_seed,
        })
    }

    /// Rebuilds the model layout from the config and fills it with the
    /// stored weights, checking names, groups and shapes.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), self.input_dim)?;
        if model.store.len() != self.store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, config expects {}",
                self.store.len(),
                model.store.len()
            )));
        }
        for (id, p) in self.store.iter() {
            let e = model.store.entry(id);
            if e.name != p.name || e.group != p.group || e.value.dim() != p.value.dim() {
                return Err(Error::Data(format!("tensor {} does not match the model layout", p.name)));
            }
            *model.store.get_mut(id) = p.value.clone();
        }
        Ok(model)
    }

    /// Checkpoint of `model`'s current weights without optimizer state.
    pub fn from_model(model: &Model, impute_defaults: &[f64], target: Target, split_seed: u64) -> Self {
        Self {
            config: model.config.clone(),
            input_dim: model.input_dim,
            store: model.store.clone(),
            optimizer: None,
            best_valid_auprc: None,
            epoch: 0,
            rng: None,
            impute_defaults: impute_defaults.to_vec(),
            target,
            split_seed,
        }
    }
}
