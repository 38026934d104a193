//! Checkpoint file: an 8-byte little-endian header length, a JSON header
//! holding the model config and per-tensor offsets, then every parameter as
//! a little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset in values (not bytes) from the start of the data section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    let ctx = || path.display().to_string();
    let mut offset = 0;
    let tensors = params
        .config()
        .tensor_shapes()
        .into_iter()
        .map(|(name, rows, cols)| {
            let e = TensorEntry {
                name,
                rows,
                cols,
                offset,
            };
            offset += rows * cols;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: *params.config(),
        tensors,
    })?;
    let mut bytes = Vec::with_capacity(8 + header.len() + offset * 4);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for t in params.tensors() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    f.write_all(&bytes).map_err(|e| Error::io(ctx(), e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let ctx = || path.display().to_string();
    let mut bytes = vec![];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(ctx(), e))?;
    let truncated = || Error::Data(format!("{}: truncated checkpoint", ctx()));
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(truncated)?.try_into().unwrap();
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let header_end = 8usize.checked_add(hlen).ok_or_else(truncated)?;
    let header: Header = serde_json::from_slice(bytes.get(8..header_end).ok_or_else(truncated)?)
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", ctx())))?;
    let data = &bytes[header_end..];
    let expected = header.config.tensor_shapes();
    if expected.len() != header.tensors.len() {
        return Err(Error::Data(format!("{}: tensor count mismatch", ctx())));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for ((name, rows, cols), e) in expected.iter().zip(&header.tensors) {
        if *name != e.name || *rows != e.rows || *cols != e.cols {
            return Err(Error::Data(format!("{}: unexpected tensor {}", ctx(), e.name)));
        }
        let start = e.offset * 4;
        let chunk = data
            .get(start..start + rows * cols * 4)
            .ok_or_else(truncated)?;
        let vals = chunk
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        tensors.push(Matrix::from_vec(*rows, *cols, vals)?);
    }
    ModelParams::from_tensors(header.config, tensors)
}

/// Loss curve as `step,loss` CSV.
pub fn loss_curve_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in curve {
        s.push_str(&format!("{step},{loss}\n"));
    }
    s
}
