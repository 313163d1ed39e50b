//! Dataset ingestion: MNIST (IDX, optionally gzipped) and CIFAR-10
//! (binary batches), read from `$PARETO_DATA_DIR/<name>/`.
//!
//! When the directory holds a `SHA256SUMS` manifest every listed file is
//! verified before parsing.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::Array4;
use sha2::{Digest, Sha256};
use unirobust_core::data::Dataset;
use unirobust_core::model::Batch;
use unirobust_core::{Error, Result};

pub const DATA_DIR_ENV: &str = "PARETO_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

impl DatasetName {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            DatasetName::Mnist => [1, 28, 28],
            DatasetName::Cifar10 => [3, 32, 32],
        }
    }

    /// Inverse of [`input_shape`](Self::input_shape).
    pub fn from_input_shape(shape: [usize; 3]) -> Option<Self> {
        [DatasetName::Mnist, DatasetName::Cifar10]
            .into_iter()
            .find(|d| d.input_shape() == shape)
    }
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar10" => Ok(DatasetName::Cifar10),
            other => Err(Error::usage(format!("unknown dataset `{other}` (mnist, cifar10)"))),
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_manifest(dir: &Path) -> Result<HashMap<String, String>> {
    let path = dir.join("SHA256SUMS");
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some(hash), Some(name)) => {
                out.insert(name.trim_start_matches('*').to_string(), hash.to_lowercase());
            }
            _ => return Err(Error::Format(format!("bad line in {}: `{line}`", path.display()))),
        }
    }
    Ok(out)
}

/// Reads a file, checking it against the manifest entry if there is one.
fn read_verified(dir: &Path, name: &str, manifest: &HashMap<String, String>) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if let Some(expected) = manifest.get(name) {
        let actual = sha256_hex(&bytes);
        if &actual != expected {
            return Err(Error::input(format!(
                "checksum mismatch for {}: expected {expected}, got {actual}",
                path.display()
            )));
        }
    }
    Ok(bytes)
}

fn maybe_gunzip(bytes: Vec<u8>, name: &str) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{name}: bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<usize> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX file of unsigned bytes. Returns `(dims, payload)`.
pub fn parse_idx(bytes: &[u8], name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(Error::Format(format!("{name}: not an unsigned-byte IDX file")));
    }
    let rank = bytes[3] as usize;
    let dims: Vec<usize> = (0..rank).map(|k| be_u32(bytes, 4 + 4 * k)).collect::<Result<_>>()?;
    let start = 4 + 4 * rank;
    let count: usize = dims.iter().product();
    if bytes.len() != start + count {
        return Err(Error::Format(format!(
            "{name}: payload has {} bytes, header promises {count}",
            bytes.len() - start
        )));
    }
    Ok((dims, bytes[start..].to_vec()))
}

fn find_file(dir: &Path, stems: &[&str]) -> Option<String> {
    stems
        .iter()
        .flat_map(|s| [format!("{s}.gz"), s.to_string()])
        .find(|n| dir.join(n).exists())
}

fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let (img_stem, lbl_stem) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let missing = |stem: &str| Error::input(format!("{} not found under {}", stem, dir.display()));
    let img_name = find_file(dir, &[img_stem]).ok_or_else(|| missing(img_stem))?;
    let lbl_name = find_file(dir, &[lbl_stem]).ok_or_else(|| missing(lbl_stem))?;
    let img = maybe_gunzip(read_verified(dir, &img_name, &manifest)?, &img_name)?;
    let lbl = maybe_gunzip(read_verified(dir, &lbl_name, &manifest)?, &lbl_name)?;
    let (idims, pixels) = parse_idx(&img, &img_name)?;
    let (ldims, labels) = parse_idx(&lbl, &lbl_name)?;
    if idims.len() != 3 || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(Error::Format(format!(
            "MNIST shapes disagree: images {idims:?}, labels {ldims:?}"
        )));
    }
    let images = Array4::from_shape_vec((idims[0], 1, idims[1], idims[2]), pixels)
        .map_err(|e| Error::Format(e.to_string()))?
        .mapv(|p| p as f32 / 255.0);
    Dataset::new(images, labels.into_iter().map(usize::from).collect(), 10)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary records (label byte + 3072 channel-major pixels).
pub fn parse_cifar(bytes: &[u8], name: &str) -> Result<(Array4<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!("{name}: not a whole number of CIFAR records")));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::input(format!("{name}: label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    let images = Array4::from_shape_vec((n, 3, 32, 32), pixels).map_err(|e| Error::Format(e.to_string()))?;
    Ok((images, labels))
}

fn load_cifar(dir: &Path, split: Split) -> Result<Dataset> {
    let dir = if dir.join("cifar-10-batches-bin").is_dir() {
        dir.join("cifar-10-batches-bin")
    } else {
        dir.to_path_buf()
    };
    let manifest = read_manifest(&dir)?;
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|k| format!("data_batch_{k}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut all_images = Vec::new();
    let mut all_labels = Vec::new();
    for name in &names {
        let bytes = read_verified(&dir, name, &manifest)?;
        let (images, labels) = parse_cifar(&bytes, name)?;
        all_images.push(images);
        all_labels.extend(labels);
    }
    let views: Vec<_> = all_images.iter().map(|a| a.view()).collect();
    let images = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Format(e.to_string()))?;
    Dataset::new(images, all_labels, 10)
}

/// Loads one split from `root/<name>/`.
pub fn load_dataset_from(root: &Path, name: DatasetName, split: Split) -> Result<Dataset> {
    let dir = root.join(name.as_str());
    match name {
        DatasetName::Mnist => load_mnist(&dir, split),
        DatasetName::Cifar10 => load_cifar(&dir, split),
    }
}

/// Loads one split from `$PARETO_DATA_DIR/<name>/`.
pub fn load_dataset(name: DatasetName, split: Split) -> Result<Dataset> {
    load_dataset_from(&data_root(), name, split)
}

/// Batches of `data` in a seeded shuffled order.
pub fn batch_stream(data: &Dataset, batch_size: usize, seed: u64) -> impl Iterator<Item = Batch> + '_ {
    let order = data.shuffled_order(seed);
    let bs = batch_size.max(1);
    (0..order.len())
        .step_by(bs)
        .map(move |start| data.select(&order[start..(start + bs).min(order.len())]))
}
