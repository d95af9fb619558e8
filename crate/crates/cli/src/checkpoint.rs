//! Model checkpoints.
//!
//! Layout: the magic line `ABLB1\n`, the byte length of a JSON header as
//! decimal digits followed by `\n`, the header itself, then every parameter
//! as little-endian `f32` in manifest order. The header records the model
//! configuration, the tensor manifest and a checksum of the parameters.

use std::path::Path;

use ablb_core::model::{manifest, Params, TensorSpec};
use ablb_core::{ModelConfig, ModelState};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::io::write_atomic;

pub const MAGIC: &[u8] = b"ABLB1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorSpec>,
    /// FNV-1a of the parameter bits, hex.
    checksum: String,
}

/// Decoding failure at a byte offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatError {
    pub offset: usize,
    pub message: String,
}

fn fail<T>(offset: usize, message: impl Into<String>) -> Result<T, FormatError> {
    Err(FormatError {
        offset,
        message: message.into(),
    })
}

pub fn encode(model: &ModelState) -> Vec<u8> {
    let header = Header {
        config: *model.config(),
        tensors: manifest(model.config()),
        checksum: format!("{:016x}", model.params().checksum()),
    };
    let json = serde_json::to_vec(&header).expect("serializable header");
    let mut out = Vec::with_capacity(json.len() + 4 * model.params().num_params() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(format!("{}\n", json.len()).as_bytes());
    out.extend_from_slice(&json);
    for t in model.params().tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelState, FormatError> {
    if !bytes.starts_with(MAGIC) {
        return fail(0, "not an ablb checkpoint (bad magic)");
    }
    let mut pos = MAGIC.len();
    let nl = match bytes[pos..].iter().take(21).position(|&b| b == b'\n') {
        Some(i) => pos + i,
        None => return fail(pos, "missing header length line"),
    };
    let len: usize = match std::str::from_utf8(&bytes[pos..nl]).ok().and_then(|s| s.parse().ok()) {
        Some(n) => n,
        None => return fail(pos, "header length is not a decimal number"),
    };
    pos = nl + 1;
    if bytes.len() - pos < len {
        return fail(bytes.len(), format!("truncated header: {len} bytes declared"));
    }
    let header: Header = match serde_json::from_slice(&bytes[pos..pos + len]) {
        Ok(h) => h,
        Err(e) => return fail(pos + e.column().saturating_sub(1), format!("bad header: {e}")),
    };
    if let Err(e) = header.config.validate() {
        return fail(pos, e.to_string());
    }
    if header.tensors != manifest(&header.config) {
        return fail(pos, "tensor manifest does not match the model configuration");
    }
    pos += len;
    let mut params = Params::<f32>::zeros(&header.config);
    for (t, spec) in params.tensors_mut().into_iter().zip(&header.tensors) {
        let need = 4 * spec.numel();
        if bytes.len() - pos < need {
            return fail(bytes.len(), format!("truncated data in tensor {}", spec.name));
        }
        for (v, c) in t.iter_mut().zip(bytes[pos..pos + need].chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().expect("4-byte chunk"));
        }
        pos += need;
    }
    if pos != bytes.len() {
        return fail(pos, format!("{} trailing bytes", bytes.len() - pos));
    }
    let checksum = format!("{:016x}", params.checksum());
    if checksum != header.checksum {
        return fail(pos, format!("checksum mismatch: header {}, data {checksum}", header.checksum));
    }
    ModelState::from_params(params).or_else(|e| fail(pos, e.to_string()))
}

pub fn save(model: &ModelState, path: &Path) -> AppResult<()> {
    write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> AppResult<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&bytes).map_err(|e| AppError::Checkpoint {
        path: path.display().to_string(),
        offset: e.offset,
        message: e.message,
    })
}
