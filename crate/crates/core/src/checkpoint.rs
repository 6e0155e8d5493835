//! Model checkpoints.
//!
//! Layout: a little-endian `u64` header length, a JSON header, then every
//! parameter value as little-endian `f64` in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Normalizer, Schema};
use crate::networks::{NbmModel, NetConfig, NetError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub schema: Schema,
    pub net_config: NetConfig,
    pub normalizer: Normalizer,
    pub params: Vec<ParamEntry>,
}

pub fn to_bytes(model: &NbmModel) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        schema: model.schema.clone(),
        net_config: model.config().clone(),
        normalizer: model.normalizer.clone(),
        params: model
            .params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + 8 * model.params.numel());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    for (_, p) in model.params.iter() {
        for v in p.value.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &str) -> Result<NbmModel, CheckpointError> {
    let bad = |message: String| CheckpointError::Format {
        path: path.to_string(),
        message,
    };
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad("truncated header length".into()))?;
    let len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| bad("header length overflows".into()))?;
    let json = bytes
        .get(8..8usize.saturating_add(len))
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut model = NbmModel::new(&header.net_config, header.schema, header.normalizer, 0)?;
    let expected: Vec<ParamEntry> = model
        .params
        .iter()
        .map(|(_, p)| ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect();
    if expected != header.params {
        return Err(bad(
            "parameter layout does not match the network configuration".into(),
        ));
    }
    let blob = &bytes[8 + len..];
    if blob.len() != 8 * model.params.numel() {
        return Err(bad(format!(
            "expected {} parameter bytes, found {}",
            8 * model.params.numel(),
            blob.len()
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.value_mut(id).data_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(model)
}

pub fn save(model: &NbmModel, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<NbmModel, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes, &path.display().to_string())
}
