//! Dataset ingestion, latent sampling and checkpoint persistence.
//!
//! Training vectors are always stored as columns of a `dim × count` matrix.
//!
//! File formats:
//!
//! - CSV: comma separated numbers, one training vector per column (or per
//!   row when loaded transposed).
//! - rawf64: `b"MMDD"`, `dim: u32`, `count: u32`, then `dim·count`
//!   column-major `f64`, all little endian.
//! - IDX: the big-endian ubyte container used by MNIST; the first dimension
//!   counts items and the remaining dimensions are flattened row-major.
//!
//! Checkpoints are a little-endian binary container:
//!
//! ```text
//! b"MMDG" | version: u32 | n: u32 | m: u32 | k: u32
//! A (m×n) | a (m) | B (k×m) | b (k) | M (k×(m+1)) | N (m×(n+1))   row-major f64
//! iteration: u64
//! ```
//!
//! accompanied by a `<path>.json` sidecar holding the training configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorParams, NetShape};
use crate::kernel::SampleSet;
use crate::trainer::{GradPower, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Rawf64,
    Idx,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "rawf64" => Ok(Self::Rawf64),
            "idx" => Ok(Self::Idx),
            other => Err(Error::InvalidParameter(format!(
                "unknown data format {other:?}"
            ))),
        }
    }
}

impl DataFormat {
    /// Guesses the format from a file name: `.csv`, IDX-style names
    /// (`*-ubyte`, `.idx`, `.idx3`) and everything else as rawf64.
    pub fn infer(path: &Path) -> Self {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if name.ends_with(".csv") {
            Self::Csv
        } else if name.ends_with("ubyte") || name.contains(".idx") {
            Self::Idx
        } else {
            Self::Rawf64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// Values are validated to lie in `[0, 1]`.
    #[default]
    None,
    /// Global affine map of `[min, max]` onto `[0, 1]`.
    Minmax,
    /// Division by 255.
    Fixed255,
}

impl FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "minmax" => Ok(Self::Minmax),
            "fixed255" => Ok(Self::Fixed255),
            other => Err(Error::InvalidParameter(format!(
                "unknown scale mode {other:?}"
            ))),
        }
    }
}

/// Training vectors in `[0, 1]`, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: DMatrix<f64>,
    source_path: PathBuf,
    scale: ScaleMode,
}

impl Dataset {
    /// Wraps in-memory columns, applying `scale` and validating the range.
    pub fn from_columns(columns: DMatrix<f64>, scale: ScaleMode) -> Result<Self> {
        Self::build(columns, scale, PathBuf::new())
    }

    fn build(mut columns: DMatrix<f64>, scale: ScaleMode, source_path: PathBuf) -> Result<Self> {
        if columns.ncols() == 0 || columns.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        match scale {
            ScaleMode::None => {}
            ScaleMode::Fixed255 => columns /= 255.0,
            ScaleMode::Minmax => {
                let lo = columns.min();
                let hi = columns.max();
                let span = hi - lo;
                if span > 0.0 {
                    columns.apply(|x| *x = (*x - lo) / span);
                } else {
                    columns.fill(0.0);
                }
            }
        }
        let dim = columns.nrows();
        for (i, x) in columns.iter().enumerate() {
            if !(0.0..=1.0).contains(x) {
                return Err(Error::RangeViolation {
                    value: *x,
                    column: i / dim,
                    row: i % dim,
                });
            }
        }
        Ok(Self {
            columns,
            source_path,
            scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn count(&self) -> usize {
        self.columns.ncols()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.columns.as_slice()[i * d..(i + 1) * d]
    }

    /// Columns `start..start+len` as a block.
    pub fn block(&self, start: usize, len: usize) -> DMatrix<f64> {
        self.columns.columns(start, len).into_owned()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn source_path(&self) -> &Path {
        &self.source_path
    }

    pub fn scale(&self) -> ScaleMode {
        self.scale
    }

    pub fn to_sample_set(&self) -> SampleSet {
        SampleSet::new(self.columns.clone()).expect("dataset is non-empty")
    }
}

/// Loads a dataset; `transpose` applies to CSV only and reads one vector per row.
pub fn load_dataset(
    path: impl AsRef<Path>,
    format: DataFormat,
    scale: ScaleMode,
    transpose: bool,
) -> Result<Dataset> {
    let path = path.as_ref();
    let columns = match format {
        DataFormat::Csv => read_csv_matrix(path, transpose)?,
        DataFormat::Rawf64 => read_rawf64(path)?,
        DataFormat::Idx => read_idx(path)?,
    };
    Dataset::build(columns, scale, path.to_path_buf())
}

fn parse_error(path: &Path, location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location,
        message: message.into(),
    }
}

fn read_csv_matrix(path: &Path, transpose: bool) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| parse_error(path, "open".into(), e.to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_error(path, format!("line {line}"), e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(i, field)| {
                field.parse::<f64>().map_err(|_| {
                    parse_error(
                        path,
                        format!("line {line}, field {}", i + 1),
                        format!("not a number: {field:?}"),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_error(
                    path,
                    format!("line {line}"),
                    format!("expected {} fields, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (nr, nc) = (rows.len(), rows[0].len());
    Ok(if transpose {
        DMatrix::from_fn(nc, nr, |r, c| rows[c][r])
    } else {
        DMatrix::from_fn(nr, nc, |r, c| rows[r][c])
    })
}

const RAW_MAGIC: &[u8; 4] = b"MMDD";

fn read_u32_le(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_rawf64(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if bytes.len() < 12 || &bytes[..4] != RAW_MAGIC {
        return Err(parse_error(path, "offset 0".into(), "missing MMDD header"));
    }
    let dim = read_u32_le(&bytes, 4) as usize;
    let count = read_u32_le(&bytes, 8) as usize;
    let expected = 12 + dim * count * 8;
    if bytes.len() != expected {
        return Err(parse_error(
            path,
            format!("offset {}", bytes.len().min(expected)),
            format!(
                "expected {expected} bytes for {dim}×{count}, found {}",
                bytes.len()
            ),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>();
    Ok(DMatrix::from_vec(dim, count, data))
}

/// Writes columns in the rawf64 container.
pub fn write_rawf64(path: impl AsRef<Path>, columns: &DMatrix<f64>) -> Result<()> {
    let mut out = Vec::with_capacity(12 + columns.len() * 8);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(columns.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(columns.ncols() as u32).to_le_bytes());
    for x in columns.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes columns as CSV, one training vector per column.
pub fn write_csv(path: impl AsRef<Path>, columns: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for r in 0..columns.nrows() {
        let row: Vec<String> = columns.row(r).iter().map(|x| format!("{x:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_idx(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_error(path, "offset 0".into(), "bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(parse_error(
            path,
            "offset 2".into(),
            format!("unsupported IDX element type {:#04x}, only ubyte", bytes[2]),
        ));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(parse_error(
            path,
            "offset 3".into(),
            "IDX file has no dimensions",
        ));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(parse_error(
            path,
            format!("offset {}", bytes.len()),
            "truncated IDX header",
        ));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count = dims[0];
    let dim: usize = dims[1..].iter().product();
    let expected = header + count * dim;
    if bytes.len() != expected {
        return Err(parse_error(
            path,
            format!("offset {}", bytes.len().min(expected)),
            format!(
                "expected {expected} bytes for {count} items of {dim}, found {}",
                bytes.len()
            ),
        ));
    }
    let data = bytes[header..]
        .iter()
        .map(|b| *b as f64)
        .collect::<Vec<_>>();
    Ok(DMatrix::from_vec(dim, count, data))
}

/// `n × count` matrix of i.i.d. standard normal entries, filled column by column.
pub fn latent_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, count: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n, count);
    for x in z.iter_mut() {
        *x = StandardNormal.sample(rng);
    }
    z
}

/// Everything persisted by [`save_checkpoint`].
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: GeneratorParams,
    pub power: GradPower,
    pub iteration: u64,
}

const CKPT_MAGIC: &[u8; 4] = b"MMDG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Path of the JSON sidecar stored next to a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: TrainConfig,
    pub data_scale: ScaleMode,
    pub iteration: u64,
}

fn push_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

fn push_vector(out: &mut Vec<u8>, v: &DVector<f64>) {
    for x in v.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Writes the binary checkpoint and, when `sidecar` is given, its JSON companion.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &GeneratorParams,
    power: &GradPower,
    iteration: u64,
    sidecar: Option<&Sidecar>,
) -> Result<()> {
    let path = path.as_ref();
    let shape = params.shape();
    if power.output.shape() != params.output().shape()
        || power.hidden.shape() != params.hidden().shape()
    {
        return Err(Error::ShapeMismatch {
            expected: format!("power arrays for {shape}"),
            found: format!("{:?} / {:?}", power.output.shape(), power.hidden.shape()),
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for d in [shape.latent, shape.hidden, shape.output] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    push_row_major(&mut out, &params.hidden_weights());
    push_vector(&mut out, &params.hidden_bias());
    push_row_major(&mut out, &params.output_weights());
    push_vector(&mut out, &params.output_bias());
    push_row_major(&mut out, &power.output);
    push_row_major(&mut out, &power.hidden);
    out.extend_from_slice(&iteration.to_le_bytes());
    fs::write(path, out)?;
    if let Some(sidecar) = sidecar {
        fs::write(sidecar_path(path), serde_json::to_string_pretty(sidecar)?)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at offset {} (needed {n} more bytes)",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let raw = self.take(rows * cols * 8)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path.as_ref())?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic, expected MMDG".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let (n, m, k) = (
        cur.u32()? as usize,
        cur.u32()? as usize,
        cur.u32()? as usize,
    );
    let shape = NetShape::new(n, m, k).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let a_mat = cur.matrix(m, n)?;
    let a_bias = DVector::from_column_slice(cur.matrix(m, 1)?.as_slice());
    let b_mat = cur.matrix(k, m)?;
    let b_bias = DVector::from_column_slice(cur.matrix(k, 1)?.as_slice());
    let power = GradPower {
        output: cur.matrix(k, m + 1)?,
        hidden: cur.matrix(m, n + 1)?,
    };
    let iteration = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }
    let params = GeneratorParams::from_parts(a_mat, a_bias, b_mat, b_bias)?;
    debug_assert_eq!(params.shape(), shape);
    Ok(Checkpoint {
        params,
        power,
        iteration,
    })
}

/// Loads a checkpoint and checks it against the expected network shape.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: NetShape) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let found = ckpt.params.shape();
    if found != expected {
        return Err(Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(ckpt)
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<Sidecar> {
    let text = fs::read_to_string(sidecar_path(path.as_ref()))?;
    Ok(serde_json::from_str(&text)?)
}
