//! On-disk formats shared by every artifact: atomic writes, raw `f32`
//! blobs and the tensor dump (`<path>` raw little-endian data plus
//! `<path>.json` describing shape and layout).

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_f32_blob(path: &Path, values: &[f32]) -> Result<()> {
    write_atomic(path, &f32_to_le_bytes(values))
}

pub fn read_f32_blob(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{} is not a whole number of f32 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
}

pub fn write_tensor(path: &Path, tensor: &ArrayD<f32>) -> Result<()> {
    let data: Vec<f32> = tensor.as_standard_layout().iter().copied().collect();
    write_f32_blob(path, &data)?;
    let header = TensorHeader {
        shape: tensor.shape().to_vec(),
        dtype: "f32".into(),
        order: "row-major".into(),
    };
    write_atomic(
        &crate::model::sidecar_path(path),
        serde_json::to_string(&header)?.as_bytes(),
    )
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f32>> {
    let side = crate::model::sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: TensorHeader = serde_json::from_str(&text)?;
    if header.dtype != "f32" || header.order != "row-major" {
        return Err(Error::Format(format!(
            "unsupported tensor layout {}/{}",
            header.dtype, header.order
        )));
    }
    let data = read_f32_blob(path)?;
    ArrayD::from_shape_vec(IxDyn(&header.shape), data)
        .map_err(|e| Error::Format(format!("tensor payload does not match header: {e}")))
}

/// JSON number for a finite value, `null` otherwise. Pairs with an error
/// flag at the call site.
pub fn finite_or_null(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v)
        .map(serde_json::Value::Number)
        .unwrap_or(serde_json::Value::Null)
}
