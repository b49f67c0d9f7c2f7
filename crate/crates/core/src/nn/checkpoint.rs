//! Safetensors archives with a JSON header describing the model.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, View};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::DEVICE;
use crate::error::{Error, Result};

/// Bumped whenever a stored layout changes incompatibly.
pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "voxshield";

#[derive(Serialize, Deserialize)]
struct Header<M> {
    format_version: u32,
    kind: String,
    meta: M,
}

struct Raw {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Raw {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

/// Writes `tensors` (stored as f32) with `meta` under the given model kind.
pub fn save<M: Serialize>(path: &Path, kind: &str, tensors: &BTreeMap<String, Tensor>, meta: &M) -> Result<()> {
    let mut raws = BTreeMap::new();
    for (name, t) in tensors {
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        raws.insert(
            name.clone(),
            Raw {
                shape: t.dims().to_vec(),
                bytes,
            },
        );
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
    };
    let info = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header)?)]);
    let bytes = safetensors::serialize(raws.iter().map(|(k, v)| (k.as_str(), v)), Some(info))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an archive written by [`save`], checking kind and version.
pub fn load<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<(BTreeMap<String, Tensor>, M)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, metadata) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let raw_header = metadata
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{}: no model header", path.display())))?;
    let header: Header<M> = serde_json::from_str(raw_header)?;
    if header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{}: expected a {kind} checkpoint, found {}",
            path.display(),
            header.kind
        )));
    }
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} unsupported",
            path.display(),
            header.format_version
        )));
    }
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected f32 data")));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::from_vec(values, view.shape(), &DEVICE)?);
    }
    Ok((tensors, header.meta))
}
