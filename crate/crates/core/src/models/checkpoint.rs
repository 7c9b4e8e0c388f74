//! Checkpoint file: `WLCK1` magic, u64-LE manifest length, JSON manifest,
//! then for every parameter in manifest order its values, Adam first moments
//! and Adam second moments as f64-LE.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, ModelSpec, WaeModel};
use crate::diffcore::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"WLCK1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    adam_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: ModelSpec,
    step: u64,
    params: Vec<ParamEntry>,
    /// Opaque training state (rng streams, epoch position, config).
    #[serde(default)]
    state: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: WaeModel,
    pub step: u64,
    pub state: serde_json::Value,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &WaeModel,
    step: u64,
    state: &serde_json::Value,
) -> Result<(), ModelError> {
    let manifest = Manifest {
        spec: model.spec.clone(),
        step,
        params: model
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                adam_step: p.step,
            })
            .collect(),
        state: state.clone(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + 13 + model.params.num_scalars() * 24);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in model.params.iter() {
        for block in [p.tensor.data(), &p.first_moment, &p.second_moment] {
            for v in block {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path)?;
    let fail = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(fail("missing WLCK1 magic"));
    }
    let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let body = bytes.get(13..13 + len).ok_or_else(|| fail("manifest truncated"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut model = WaeModel::new(manifest.spec.clone(), 0)?;
    if model.params.len() != manifest.params.len() {
        return Err(fail("parameter count does not match the model spec"));
    }
    let mut floats = bytes[13 + len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    if !(bytes.len() - 13 - len).is_multiple_of(8) {
        return Err(fail("payload is not a whole number of f64 values"));
    }
    for (p, entry) in model.params.iter_mut().zip(&manifest.params) {
        if p.name != entry.name || p.tensor.shape() != entry.shape.as_slice() {
            return Err(ModelError::Checkpoint(format!(
                "parameter {} {:?} does not match manifest entry {} {:?}",
                p.name,
                p.tensor.shape(),
                entry.name,
                entry.shape
            )));
        }
        let n = p.tensor.numel();
        let mut read = || -> Result<Vec<f64>, ModelError> {
            let v: Vec<f64> = floats.by_ref().take(n).collect();
            if v.len() == n {
                Ok(v)
            } else {
                Err(fail("payload truncated"))
            }
        };
        p.tensor = Tensor::new(&entry.shape, read()?)?.with_requires_grad();
        p.first_moment = read()?;
        p.second_moment = read()?;
        p.step = entry.adam_step;
    }
    if floats.next().is_some() {
        return Err(fail("trailing payload"));
    }
    Ok(Checkpoint {
        model,
        step: manifest.step,
        state: manifest.state,
    })
}
