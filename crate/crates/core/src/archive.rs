//! Weights archives: a safetensors file of `f32` parameters keyed by their
//! dotted names, with the model kind and configuration stored as JSON under
//! the `config` metadata key.
//!
//! A model's fingerprint is the SHA-256 of its archive bytes.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedder::{Embedder, EmbedderConfig};
use crate::error::{Error, Result};
use crate::localizer::{Detector, DetectorConfig};
use crate::nn::Parameters;

const CONFIG_KEY: &str = "config";

#[derive(Serialize, Deserialize)]
struct Header<C> {
    kind: String,
    config: C,
}

/// A model that can be rebuilt from its configuration and a name → tensor map.
pub trait Archived: Parameters<f32> + Sized {
    const KIND: &'static str;
    type Config: Serialize + DeserializeOwned;

    fn config(&self) -> &Self::Config;
    fn from_config(config: Self::Config) -> Result<Self>;
}

impl Archived for Detector<f32> {
    const KIND: &'static str = "detector";
    type Config = DetectorConfig;

    fn config(&self) -> &DetectorConfig {
        &self.config
    }

    fn from_config(config: DetectorConfig) -> Result<Self> {
        Detector::new(config, 0)
    }
}

impl Archived for Embedder<f32> {
    const KIND: &'static str = "embedder";
    type Config = EmbedderConfig;

    fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    fn from_config(config: EmbedderConfig) -> Result<Self> {
        Ok(Embedder::new(config, 0))
    }
}

pub fn to_bytes<M: Archived>(model: &M) -> Result<Vec<u8>> {
    let mut raw: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    model.visit("", &mut |name, p| {
        let bytes = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
        raw.push((name.to_string(), p.shape.clone(), bytes));
    });
    let views = raw
        .iter()
        .map(|(n, s, b)| TensorView::new(Dtype::F32, s.clone(), b).map(|v| (n.as_str(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Archive(e.to_string()))?;
    let header = Header { kind: M::KIND.to_string(), config: model.config() };
    let meta = HashMap::from([(CONFIG_KEY.to_string(), serde_json::to_string(&header)?)]);
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Archive(e.to_string()))
}

pub fn from_bytes<M: Archived>(bytes: &[u8]) -> Result<M> {
    let err = |m: String| Error::Archive(m);
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| err(e.to_string()))?;
    let header_json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(CONFIG_KEY))
        .ok_or_else(|| err("missing config metadata".into()))?;
    let header: Header<M::Config> = serde_json::from_str(header_json).map_err(|e| err(e.to_string()))?;
    if header.kind != M::KIND {
        return Err(err(format!("archive holds a {}, expected a {}", header.kind, M::KIND)));
    }
    let tensors = SafeTensors::deserialize(bytes).map_err(|e| err(e.to_string()))?;
    let mut model = M::from_config(header.config)?;
    let mut failure = None;
    let mut used = 0usize;
    model.visit_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        match tensors.tensor(name) {
            Err(_) => failure = Some(format!("missing tensor {name}")),
            Ok(t) if t.dtype() != Dtype::F32 || t.shape() != p.shape.as_slice() => {
                failure = Some(format!("tensor {name} has {:?} {:?}, expected F32 {:?}", t.dtype(), t.shape(), p.shape))
            }
            Ok(t) => {
                for (v, b) in p.value.iter_mut().zip(t.data().chunks_exact(4)) {
                    *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
                }
                used += 1;
            }
        }
    });
    if let Some(f) = failure {
        return Err(err(f));
    }
    if used != tensors.len() {
        return Err(err(format!("archive has {} tensors, model uses {used}", tensors.len())));
    }
    let mut finite = true;
    model.visit("", &mut |_, p| finite &= p.value.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(err("non-finite weights".into()));
    }
    Ok(model)
}

/// Hex SHA-256 of archive bytes.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the archive and returns its fingerprint.
pub fn save<M: Archived>(model: &M, path: &Path) -> Result<String> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(fingerprint(&bytes))
}

/// Loads an archive and returns the model with its fingerprint.
pub fn load<M: Archived>(path: &Path) -> Result<(M, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = from_bytes(&bytes).map_err(|e| match e {
        Error::Archive(m) => Error::Archive(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok((model, fingerprint(&bytes)))
}
