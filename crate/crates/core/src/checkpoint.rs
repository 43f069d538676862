//! Versioned checkpoint container.
//!
//! ```text
//! b"CRESNETC" | version: u32 LE | manifest length: u64 LE | manifest (JSON)
//! | tensor payload (little-endian, dtype from the manifest) | SHA-256 of all preceding bytes
//! ```
//!
//! The manifest names every tensor with its shape and payload offset and
//! carries the architecture, BN hyper-parameters, epoch and training log.

use std::path::Path;

use cresnet_tensor::{BnMode, Scalar, Sgd};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::{TrainConfig, TrainLog, Trainer};

pub const MAGIC: &[u8; 8] = b"CRESNETC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Section {
    Param,
    BnMean,
    BnVar,
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    section: Section,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BnEntry {
    name: String,
    eps: f64,
    momentum: f64,
    initialized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub endianness: String,
    pub spec: ArchitectureSpec,
    pub classes: usize,
    pub epoch: usize,
    pub config: Option<TrainConfig>,
    pub log: Option<TrainLog>,
    bn: Vec<BnEntry>,
    tensors: Vec<TensorEntry>,
}

fn encode<T: Scalar>(v: T, out: &mut Vec<u8>) {
    match T::NAME {
        "f32" => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
        _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
    }
}

fn decode<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    match T::NAME {
        "f32" => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        _ => bytes
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    }
}

fn width<T: Scalar>() -> usize {
    if T::NAME == "f32" {
        4
    } else {
        8
    }
}

struct Writer {
    payload: Vec<u8>,
    tensors: Vec<TensorEntry>,
}

impl Writer {
    fn push<T: Scalar>(&mut self, name: &str, section: Section, shape: &[usize], data: &[T]) {
        let offset = self.payload.len();
        data.iter().for_each(|&v| encode(v, &mut self.payload));
        self.tensors.push(TensorEntry {
            name: name.into(),
            section,
            shape: shape.to_vec(),
            offset,
            len: self.payload.len() - offset,
        });
    }
}

/// Training state carried alongside the model.
#[derive(Debug, Clone, Default)]
pub struct Extras<'a> {
    pub epoch: usize,
    pub config: Option<&'a TrainConfig>,
    pub log: Option<&'a TrainLog>,
}

pub fn to_bytes<T: Scalar>(model: &Model<T>, optimizer: Option<&Sgd<T>>, extras: Extras<'_>) -> Vec<u8> {
    let mut w = Writer {
        payload: Vec::new(),
        tensors: Vec::new(),
    };
    for (_, p) in model.params().iter() {
        w.push(&p.name, Section::Param, p.tensor.shape(), p.tensor.data());
    }
    let mut bn = Vec::new();
    for (name, s) in model.bn_states() {
        w.push(name, Section::BnMean, &[s.channels()], &s.running_mean);
        w.push(name, Section::BnVar, &[s.channels()], &s.running_var);
        bn.push(BnEntry {
            name: name.into(),
            eps: s.eps.as_f64(),
            momentum: s.momentum.as_f64(),
            initialized: s.initialized,
        });
    }
    if let Some(opt) = optimizer {
        for ((_, p), v) in model.params().iter().zip(opt.velocities()) {
            w.push(&p.name, Section::Velocity, p.tensor.shape(), v);
        }
    }
    let manifest = Manifest {
        dtype: T::NAME.into(),
        endianness: "little".into(),
        spec: model.spec().clone(),
        classes: model.classes(),
        epoch: extras.epoch,
        config: extras.config.cloned(),
        log: extras.log.cloned(),
        bn,
        tensors: w.tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER + json.len() + w.payload.len() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Validates framing and checksum; returns the manifest and payload.
fn split(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < HEADER + DIGEST || &bytes[..8] != MAGIC {
        return Err(Error::CheckpointMismatch("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CheckpointChecksum);
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let Some(json) = body.get(HEADER..HEADER + mlen) else {
        return Err(Error::CheckpointMismatch("manifest length exceeds file".into()));
    };
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::CheckpointMismatch(format!("manifest: {e}")))?;
    Ok((manifest, &body[HEADER + mlen..]))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(&bytes)?.0)
}

/// A model rebuilt from a checkpoint, with any optimizer state.
#[derive(Debug, Clone)]
pub struct Restored<T> {
    pub model: Model<T>,
    pub velocities: Option<Vec<Vec<T>>>,
    pub manifest: Manifest,
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Restored<T>> {
    let (manifest, payload) = split(bytes)?;
    if manifest.dtype != T::NAME || manifest.endianness != "little" {
        return Err(Error::CheckpointMismatch(format!(
            "stored as {} {}-endian, requested {}",
            manifest.dtype,
            manifest.endianness,
            T::NAME
        )));
    }
    let mut model = Model::<T>::build(&manifest.spec, manifest.classes, 0)?;
    let mismatch = |m: String| Error::CheckpointMismatch(m);
    let read = |e: &TensorEntry| -> Result<Vec<T>> {
        let numel: usize = e.shape.iter().product();
        let bytes = payload
            .get(e.offset..e.offset + e.len)
            .filter(|b| b.len() == numel * width::<T>())
            .ok_or_else(|| mismatch(format!("tensor {} has a bad extent", e.name)))?;
        Ok(decode(bytes))
    };

    let mut params_seen = 0;
    let mut velocities: Vec<Option<Vec<T>>> = vec![None; model.params().len()];
    for e in &manifest.tensors {
        match e.section {
            Section::Param | Section::Velocity => {
                let id = model
                    .param_id(&e.name)
                    .ok_or_else(|| mismatch(format!("unknown parameter {}", e.name)))?;
                let p = model.params_mut().get_mut(id);
                if p.tensor.shape() != e.shape.as_slice() {
                    return Err(mismatch(format!("{} has shape {:?}, model expects {:?}", e.name, e.shape, p.tensor.shape())));
                }
                let data = read(e)?;
                if e.section == Section::Param {
                    p.tensor.data_mut().copy_from_slice(&data);
                    params_seen += 1;
                } else {
                    velocities[id.0] = Some(data);
                }
            }
            Section::BnMean | Section::BnVar => {
                let data = read(e)?;
                let (_, state) = model
                    .bn_states_mut()
                    .find(|(n, _)| *n == e.name)
                    .ok_or_else(|| mismatch(format!("unknown BN layer {}", e.name)))?;
                if state.channels() != data.len() {
                    return Err(mismatch(format!("BN layer {} has {} channels", e.name, data.len())));
                }
                if e.section == Section::BnMean {
                    state.running_mean = data;
                } else {
                    state.running_var = data;
                }
            }
        }
    }
    if params_seen != model.params().len() {
        return Err(mismatch(format!(
            "{params_seen} of {} parameters present",
            model.params().len()
        )));
    }
    for b in &manifest.bn {
        if let Some((_, s)) = model.bn_states_mut().find(|(n, _)| *n == b.name) {
            s.eps = T::from_f64_lossy(b.eps);
            s.momentum = T::from_f64_lossy(b.momentum);
            s.initialized = b.initialized;
        }
    }
    let velocities = if velocities.iter().all(Option::is_some) {
        Some(velocities.into_iter().map(Option::unwrap).collect())
    } else if velocities.iter().all(Option::is_none) {
        None
    } else {
        return Err(mismatch("optimizer state covers only some parameters".into()));
    };
    model.set_mode(BnMode::Train);
    Ok(Restored {
        model,
        velocities,
        manifest,
    })
}

/// Writes atomically via a sibling temporary file.
pub fn save<T: Scalar>(path: impl AsRef<Path>, model: &Model<T>, optimizer: Option<&Sgd<T>>, extras: Extras<'_>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(model, optimizer, extras)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Restored<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

impl<T: Scalar> Trainer<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save(
            path,
            &self.model,
            Some(&self.optimizer),
            Extras {
                epoch: self.epochs_done(),
                config: Some(&self.config),
                log: Some(&self.log),
            },
        )
    }

    /// Restores a trainer saved with [`Trainer::save`]. `epochs` overrides
    /// the stored target epoch count when given.
    pub fn resume(path: impl AsRef<Path>, epochs: Option<usize>) -> Result<Self> {
        let r = load::<T>(path)?;
        let (Some(mut config), Some(log), Some(vel)) = (r.manifest.config, r.manifest.log, r.velocities) else {
            return Err(Error::CheckpointMismatch("checkpoint holds no training state".into()));
        };
        if let Some(e) = epochs {
            config.epochs = e;
        }
        let dataset = log.dataset.clone();
        let mut t = Trainer::new(r.model, config, &dataset)?;
        t.log = log;
        t.log.config = t.config.clone();
        t.optimizer.velocities_mut().clone_from_slice(&vel);
        Ok(t)
    }
}
