//! On-disk tensor container: `manifest.json` plus one raw blob `tensors.bin`.
//!
//! The blob is the concatenation of row-major little-endian IEEE-754
//! matrices with no padding. The manifest is UTF-8 JSON with exactly the keys
//! `format_version` and `entries`; each entry has exactly `name`, `rows`,
//! `cols`, `dtype`, `group`, `byte_offset`, `byte_length`.
//!
//! Calibration data uses the same container. An entry named after a layer
//! holds either raw activations (`group = "activations"`, `M x B`, one sample
//! per column) or a precomputed covariance (`group = "covariance:<B>"`,
//! `M x M`, `B` = number of samples it was accumulated from).

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

pub const ACTIVATIONS_GROUP: &str = "activations";
pub const COVARIANCE_GROUP_PREFIX: &str = "covariance:";

/// Relative asymmetry a covariance payload may carry.
pub const COVARIANCE_SYMMETRY_RTOL: f64 = 1e-10;
/// Most negative eigenvalue allowed, relative to the largest.
pub const COVARIANCE_PSD_RTOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: u64,
    pub cols: u64,
    pub dtype: Dtype,
    pub group: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl TensorManifest {
    /// Checks names, lengths and byte ranges against a blob of `blob_len` bytes.
    pub fn validate(&self, blob_len: u64) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.name.is_empty() {
                return Err(Error::EmptyName);
            }
            if !seen.insert(e.name.as_str()) {
                return Err(Error::DuplicateName(e.name.clone()));
            }
            let expected = e
                .rows
                .checked_mul(e.cols)
                .and_then(|n| n.checked_mul(e.dtype.size()));
            if expected != Some(e.byte_length) {
                return Err(Error::InconsistentEntry {
                    name: e.name.clone(),
                    detail: format!(
                        "byte_length {} != {} x {} x {}",
                        e.byte_length,
                        e.rows,
                        e.cols,
                        e.dtype.size()
                    ),
                });
            }
            if e.byte_offset.checked_add(e.byte_length).is_none() {
                return Err(Error::InconsistentEntry {
                    name: e.name.clone(),
                    detail: "byte range overflows".into(),
                });
            }
        }
        let mut ranges: Vec<&ManifestEntry> =
            self.entries.iter().filter(|e| e.byte_length > 0).collect();
        ranges.sort_by_key(|e| (e.byte_offset, e.byte_length));
        for pair in ranges.windows(2) {
            if pair[0].byte_offset + pair[0].byte_length > pair[1].byte_offset {
                return Err(Error::OverlappingEntries {
                    first: pair[0].name.clone(),
                    second: pair[1].name.clone(),
                });
            }
        }
        let needed = self
            .entries
            .iter()
            .map(|e| e.byte_offset + e.byte_length)
            .max()
            .unwrap_or(0);
        if needed > blob_len {
            return Err(Error::TruncatedBlob {
                expected: needed,
                actual: blob_len,
            });
        }
        Ok(())
    }
}

/// A named dense matrix with its layer group and storage dtype.
///
/// Values are held in f64 regardless of `dtype`; `F32` entries are rounded
/// to nearest on write and widened exactly on read.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub group: String,
    pub dtype: Dtype,
    pub matrix: Matrix<f64>,
}

impl WeightTensor {
    pub fn new(name: impl Into<String>, group: impl Into<String>, matrix: Matrix<f64>) -> Self {
        Self {
            name: name.into(),
            group: group.into(),
            dtype: Dtype::F64,
            matrix,
        }
    }

    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        self.dtype = dtype;
        self
    }

    /// Enforces the layer invariants: at least one row and column, finite entries.
    pub fn check_layer(&self) -> Result<()> {
        if self.matrix.rows() == 0 || self.matrix.cols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "layer `{}` has empty shape {}x{}",
                self.name,
                self.matrix.rows(),
                self.matrix.cols()
            )));
        }
        if !self.matrix.is_finite() {
            return Err(Error::NonFinite(format!("layer `{}`", self.name)));
        }
        Ok(())
    }
}

/// Writes `entries` into directory `dir` (created if missing).
pub fn write_container(entries: &[WeightTensor], dir: &Path) -> Result<TensorManifest> {
    let mut seen = HashSet::new();
    let mut manifest = TensorManifest {
        format_version: FORMAT_VERSION,
        entries: Vec::with_capacity(entries.len()),
    };
    let mut blob = Vec::new();
    for t in entries {
        if t.name.is_empty() {
            return Err(Error::EmptyName);
        }
        if !seen.insert(t.name.as_str()) {
            return Err(Error::DuplicateName(t.name.clone()));
        }
        if !t.matrix.is_finite() {
            return Err(Error::NonFinite(format!("entry `{}`", t.name)));
        }
        let offset = blob.len() as u64;
        match t.dtype {
            Dtype::F64 => {
                for &x in t.matrix.as_slice() {
                    blob.extend_from_slice(&x.to_le_bytes());
                }
            }
            Dtype::F32 => {
                for &x in t.matrix.as_slice() {
                    let y = x as f32;
                    if !y.is_finite() {
                        return Err(Error::NonFinite(format!("entry `{}` as f32", t.name)));
                    }
                    blob.extend_from_slice(&y.to_le_bytes());
                }
            }
        }
        manifest.entries.push(ManifestEntry {
            name: t.name.clone(),
            rows: t.matrix.rows() as u64,
            cols: t.matrix.cols() as u64,
            dtype: t.dtype,
            group: t.group.clone(),
            byte_offset: offset,
            byte_length: blob.len() as u64 - offset,
        });
    }

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    serde_json::to_writer_pretty(&mut file, &manifest)?;
    file.write_all(b"\n")
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<TensorManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads every entry of the container in `dir`, in manifest order.
pub fn read_container(dir: &Path) -> Result<Vec<WeightTensor>> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    manifest.validate(blob.len() as u64)?;

    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let bytes = &blob[e.byte_offset as usize..(e.byte_offset + e.byte_length) as usize];
        let data: Vec<f64> = match e.dtype {
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("entry `{}`", e.name)));
        }
        out.push(WeightTensor {
            name: e.name.clone(),
            group: e.group.clone(),
            dtype: e.dtype,
            matrix: Matrix::from_vec(e.rows as usize, e.cols as usize, data),
        });
    }
    Ok(out)
}

/// Empirical second-moment matrix `X Xᵀ` of a calibration batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance<T> {
    pub matrix: Matrix<T>,
    pub sample_count: usize,
}

impl<T: Scalar> Covariance<T> {
    /// Wraps a precomputed matrix after symmetrizing it.
    pub fn from_matrix(matrix: &Matrix<T>, sample_count: usize) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::ShapeMismatch(format!(
                "covariance must be square, got {}x{}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite("covariance".into()));
        }
        Ok(Self {
            matrix: matrix.symmetrized(),
            sample_count,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: Matrix::identity(dim),
            sample_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }
}

/// `X Xᵀ` for samples stored as the columns of `samples` (`M x B`).
pub fn covariance_from_activations<T: Scalar>(samples: &Matrix<T>) -> Result<Covariance<T>> {
    if samples.cols() == 0 {
        return Err(Error::InvalidArgument(
            "activation batch needs at least one sample column".into(),
        ));
    }
    if !samples.is_finite() {
        return Err(Error::NonFinite("activation batch".into()));
    }
    Ok(Covariance {
        matrix: samples.matmul_t(samples).symmetrized(),
        sample_count: samples.cols(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationPayload {
    RawActivations(Matrix<f64>),
    Covariance(Covariance<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub layer_name: String,
    pub payload: CalibrationPayload,
}

impl CalibrationRecord {
    pub fn validate(&self) -> Result<()> {
        let invalid = |detail: String| Error::InvalidCovariance {
            layer: self.layer_name.clone(),
            detail,
        };
        match &self.payload {
            CalibrationPayload::RawActivations(x) => {
                if x.cols() == 0 {
                    return Err(invalid("raw activations need at least one column".into()));
                }
                if !x.is_finite() {
                    return Err(invalid("non-finite activation".into()));
                }
            }
            CalibrationPayload::Covariance(c) => {
                let m = &c.matrix;
                if !m.is_square() {
                    return Err(invalid(format!("shape {}x{}", m.rows(), m.cols())));
                }
                if !m.is_finite() {
                    return Err(invalid("non-finite entry".into()));
                }
                let asym = m.asymmetry();
                if asym > COVARIANCE_SYMMETRY_RTOL {
                    return Err(invalid(format!("asymmetry {asym:e} exceeds tolerance")));
                }
                let (values, _) = symmetric_eigen(m)?;
                let top = values.first().copied().unwrap_or(0.0).max(0.0);
                let bottom = values.last().copied().unwrap_or(0.0);
                if bottom < -COVARIANCE_PSD_RTOL * top {
                    return Err(invalid(format!(
                        "eigenvalue {bottom:e} below -{COVARIANCE_PSD_RTOL:e} x {top:e}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Validates and normalizes to a [`Covariance`].
    pub fn into_covariance(self) -> Result<Covariance<f64>> {
        self.validate()?;
        match self.payload {
            CalibrationPayload::RawActivations(x) => covariance_from_activations(&x),
            CalibrationPayload::Covariance(c) => Covariance::from_matrix(&c.matrix, c.sample_count),
        }
    }

    fn to_tensor(&self) -> WeightTensor {
        match &self.payload {
            CalibrationPayload::RawActivations(x) => {
                WeightTensor::new(&self.layer_name, ACTIVATIONS_GROUP, x.clone())
            }
            CalibrationPayload::Covariance(c) => WeightTensor::new(
                &self.layer_name,
                format!("{COVARIANCE_GROUP_PREFIX}{}", c.sample_count),
                c.matrix.clone(),
            ),
        }
    }

    fn from_tensor(t: WeightTensor) -> Result<Self> {
        let payload = if t.group == ACTIVATIONS_GROUP {
            CalibrationPayload::RawActivations(t.matrix)
        } else if let Some(count) = t.group.strip_prefix(COVARIANCE_GROUP_PREFIX) {
            let sample_count = count.parse().map_err(|_| Error::InconsistentEntry {
                name: t.name.clone(),
                detail: format!("bad sample count in group `{}`", t.group),
            })?;
            CalibrationPayload::Covariance(Covariance {
                matrix: t.matrix,
                sample_count,
            })
        } else {
            return Err(Error::InconsistentEntry {
                name: t.name.clone(),
                detail: format!("unknown calibration group `{}`", t.group),
            });
        };
        Ok(Self {
            layer_name: t.name,
            payload,
        })
    }
}

pub fn write_calibration(records: &[CalibrationRecord], dir: &Path) -> Result<TensorManifest> {
    let tensors: Vec<WeightTensor> = records.iter().map(CalibrationRecord::to_tensor).collect();
    write_container(&tensors, dir)
}

pub fn read_calibration(dir: &Path) -> Result<Vec<CalibrationRecord>> {
    read_container(dir)?
        .into_iter()
        .map(CalibrationRecord::from_tensor)
        .collect()
}
