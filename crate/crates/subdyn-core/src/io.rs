//! On-disk formats for operators, tensors, scattering kernels, and run
//! artifacts: JSON where humans look, little-endian binary blobs where they
//! don't, CSV for time series. All writers are deterministic so identical
//! inputs produce bit-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{FockSpace, SecondQuantizedOperator, Statistics};
use crate::linalg::CMat;
use crate::modes::{ModeBasis, Potential, PotentialTensor};
use crate::scattering::PairBasis;

// ---------------------------------------------------------------------------
// binary blobs: packed little-endian f64 pairs (re, im)

pub fn write_complex_blob(path: &Path, data: &[Complex64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 * data.len());
    for z in data {
        bytes.extend_from_slice(&z.re.to_le_bytes());
        bytes.extend_from_slice(&z.im.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_complex_blob(path: &Path) -> Result<Vec<Complex64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::InvalidInput(format!(
            "blob {} has {} bytes, not a multiple of 16",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[0..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..16].try_into().unwrap()),
            )
        })
        .collect())
}

fn matrix_to_row_major(m: &CMat) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn matrix_from_row_major(data: &[Complex64], rows: usize, cols: usize) -> Result<CMat> {
    if data.len() != rows * cols {
        return Err(Error::InvalidInput(format!(
            "blob holds {} entries, expected {rows}x{cols}",
            data.len()
        )));
    }
    Ok(CMat::from_fn(rows, cols, |i, j| data[i * cols + j]))
}

// ---------------------------------------------------------------------------
// mode basis + potential tensor: JSON metadata plus a row-major tensor blob

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorHeader {
    pub basis: ModeBasis,
    pub potential: Potential,
    /// Tensor entry count; the blob is row-major over (l1, l2, f2, f1).
    pub entries: usize,
    /// Blob file name, relative to the header's directory.
    pub blob: String,
}

/// Writes `<name>.json` + `<name>.bin` into `dir`; returns the header path.
pub fn write_tensor(
    dir: &Path,
    name: &str,
    basis: &ModeBasis,
    tensor: &PotentialTensor,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let blob_name = format!("{name}.bin");
    write_complex_blob(&dir.join(&blob_name), &tensor.coefficients)?;
    let header = TensorHeader {
        basis: basis.clone(),
        potential: tensor.potential.clone(),
        entries: tensor.coefficients.len(),
        blob: blob_name,
    };
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&header)?)?;
    Ok(path)
}

pub fn read_tensor(header_path: &Path) -> Result<(ModeBasis, PotentialTensor)> {
    let header: TensorHeader = serde_json::from_str(&fs::read_to_string(header_path)?)?;
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    let data = read_complex_blob(&dir.join(&header.blob))?;
    if data.len() != header.entries {
        return Err(Error::InvalidInput(
            "tensor blob length disagrees with its header".into(),
        ));
    }
    let modes = header.basis.len();
    if data.len() != modes.pow(4) {
        return Err(Error::InvalidInput(format!(
            "tensor blob holds {} entries, expected {}^4",
            data.len(),
            modes
        )));
    }
    Ok((
        header.basis,
        PotentialTensor {
            modes,
            potential: header.potential,
            coefficients: data,
        },
    ))
}

// ---------------------------------------------------------------------------
// sparse Fock-space operators: JSON header + binary COO triplet blob

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpaceDescriptor {
    pub statistics: Statistics,
    pub modes: usize,
    pub n_max: usize,
    pub dim: usize,
}

impl SpaceDescriptor {
    pub fn of(space: &FockSpace) -> Self {
        Self {
            statistics: space.statistics,
            modes: space.modes,
            n_max: space.n_max,
            dim: space.dim(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatorHeader {
    pub space: SpaceDescriptor,
    pub dim: usize,
    pub sector_shift: i64,
    pub hermitian: bool,
    pub nnz: usize,
    pub blob: String,
}

/// COO triplets packed as (u64 row, u64 col, f64 re, f64 im), little-endian.
pub fn write_operator(
    dir: &Path,
    name: &str,
    space: &FockSpace,
    op: &SecondQuantizedOperator,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut nnz = 0usize;
    for (i, row) in op.rows.iter().enumerate() {
        for &(j, z) in row {
            bytes.extend_from_slice(&(i as u64).to_le_bytes());
            bytes.extend_from_slice(&(j as u64).to_le_bytes());
            bytes.extend_from_slice(&z.re.to_le_bytes());
            bytes.extend_from_slice(&z.im.to_le_bytes());
            nnz += 1;
        }
    }
    let blob_name = format!("{name}.coo");
    fs::write(dir.join(&blob_name), bytes)?;
    let header = OperatorHeader {
        space: SpaceDescriptor::of(space),
        dim: op.dim,
        sector_shift: op.sector_shift,
        hermitian: op.hermitian,
        nnz,
        blob: blob_name,
    };
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&header)?)?;
    Ok(path)
}

pub fn read_operator(header_path: &Path) -> Result<(OperatorHeader, SecondQuantizedOperator)> {
    let header: OperatorHeader = serde_json::from_str(&fs::read_to_string(header_path)?)?;
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = fs::read(dir.join(&header.blob))?;
    if bytes.len() != 32 * header.nnz {
        return Err(Error::InvalidInput(
            "operator blob length disagrees with its header".into(),
        ));
    }
    let mut op = SecondQuantizedOperator::zeros(header.dim, header.sector_shift);
    for t in bytes.chunks_exact(32) {
        let i = u64::from_le_bytes(t[0..8].try_into().unwrap()) as usize;
        let j = u64::from_le_bytes(t[8..16].try_into().unwrap()) as usize;
        let re = f64::from_le_bytes(t[16..24].try_into().unwrap());
        let im = f64::from_le_bytes(t[24..32].try_into().unwrap());
        if i >= header.dim || j >= header.dim {
            return Err(Error::InvalidInput("operator triplet out of range".into()));
        }
        op.add_entry(i, j, Complex64::new(re, im));
    }
    op.hermitian = header.hermitian;
    Ok((header, op))
}

// ---------------------------------------------------------------------------
// pair-basis scattering kernels: JSON header + row-major matrix blob

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TMatrixHeader {
    pub z_re: f64,
    pub z_im: f64,
    pub epsilon: f64,
    pub occupations: Vec<f64>,
    pub basis: PairBasis,
    pub rows: usize,
    pub cols: usize,
    pub blob: String,
}

pub fn write_t_matrix(
    dir: &Path,
    name: &str,
    z: Complex64,
    epsilon: f64,
    occupations: &[f64],
    basis: &PairBasis,
    t: &CMat,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let blob_name = format!("{name}.bin");
    write_complex_blob(&dir.join(&blob_name), &matrix_to_row_major(t))?;
    let header = TMatrixHeader {
        z_re: z.re,
        z_im: z.im,
        epsilon,
        occupations: occupations.to_vec(),
        basis: basis.clone(),
        rows: t.nrows(),
        cols: t.ncols(),
        blob: blob_name,
    };
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&header)?)?;
    Ok(path)
}

pub fn read_t_matrix(header_path: &Path) -> Result<(TMatrixHeader, CMat)> {
    let header: TMatrixHeader = serde_json::from_str(&fs::read_to_string(header_path)?)?;
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    let data = read_complex_blob(&dir.join(&header.blob))?;
    let t = matrix_from_row_major(&data, header.rows, header.cols)?;
    Ok((header, t))
}

// ---------------------------------------------------------------------------
// generator dumps: a JSON manifest naming one matrix blob per labelled part

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub label: String,
    pub rows: usize,
    pub cols: usize,
    pub blob: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub name: String,
    pub matrices: Vec<MatrixEntry>,
}

/// Writes one blob per labelled matrix plus `<name>.json` listing them.
pub fn write_labeled_matrices(
    dir: &Path,
    name: &str,
    parts: &[(&str, &CMat)],
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut matrices = Vec::with_capacity(parts.len());
    for (label, m) in parts {
        let blob_name = format!("{name}_{label}.bin");
        write_complex_blob(&dir.join(&blob_name), &matrix_to_row_major(m))?;
        matrices.push(MatrixEntry {
            label: (*label).to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            blob: blob_name,
        });
    }
    let manifest = GeneratorManifest {
        name: name.to_string(),
        matrices,
    };
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn read_labeled_matrices(manifest_path: &Path) -> Result<Vec<(String, CMat)>> {
    let manifest: GeneratorManifest =
        serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .matrices
        .iter()
        .map(|e| {
            let data = read_complex_blob(&dir.join(&e.blob))?;
            Ok((e.label.clone(), matrix_from_row_major(&data, e.rows, e.cols)?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CSV time series: (t, observable label, value)

/// Writes a `t,observable,value` CSV. Labels must be plain identifiers: no
/// commas, quotes, or line breaks, so the file needs no quoting rules.
pub fn write_time_series(path: &Path, rows: &[(f64, &str, f64)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = fs::File::create(path)?;
    writeln!(out, "t,observable,value")?;
    for (t, label, value) in rows {
        if label.contains([',', '"', '\n', '\r']) {
            return Err(Error::InvalidInput(format!(
                "observable label {label:?} is not CSV-safe"
            )));
        }
        writeln!(out, "{t},{label},{value}")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// run manifests: config echo, residual summary, and any error record

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Echo of the scenario configuration as parsed.
    pub config: serde_json::Value,
    /// Named scalar results and residuals (sorted keys for stable output).
    pub residuals: BTreeMap<String, f64>,
    /// Paths of files written by the run, relative to the output directory.
    pub artifacts: Vec<String>,
    pub error: Option<ErrorRecord>,
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}
