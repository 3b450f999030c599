//! Binary weight and embedding-matrix files, label CSVs and atomic writes.
//!
//! Embedding matrix (little-endian):
//! ```text
//! "SEME" | u32 version=1 | u32 rows | u32 cols | f32[rows*cols] row-major
//! ```
//! SAE weights (little-endian):
//! ```text
//! "SEMW" | u32 version=1 | u32 d | u32 s | f32 W_e[s*d] | f32 W_d[d*s] | f32 b_pre[d]
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};
use crate::sae::SaeWeights;

pub const MATRIX_MAGIC: &[u8; 4] = b"SEME";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"SEMW";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NanPolicy {
    #[default]
    Reject,
    Allow,
}

/// Row-major `f32` matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SemError::dim("embedding matrix payload", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Rows are rounded to `f32`. All rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(SemError::dim("embedding matrix row", cols, r.len()));
            }
            data.extend(r.iter().map(|&v| v as f32));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|&v| v as f64).collect())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MATRIX_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path, nan: NanPolicy) -> Result<Self> {
        let (rows, cols) = read_header(bytes, path, MATRIX_MAGIC)?;
        let expected = payload_len(path, &[rows as u64 * cols as u64])?;
        check_size(path, expected, bytes.len())?;
        let data = decode_f32(&bytes[HEADER_LEN..]);
        if nan == NanPolicy::Reject && data.iter().any(|v| !v.is_finite()) {
            return Err(SemError::format(path, "non-finite value in payload"));
        }
        Ok(Self {
            rows: rows as usize,
            cols: cols as usize,
            data,
        })
    }
}

fn read_header(bytes: &[u8], path: &Path, magic: &[u8; 4]) -> Result<(u32, u32)> {
    if bytes.len() < HEADER_LEN {
        return Err(SemError::format(
            path,
            format!("truncated header: expected {HEADER_LEN} bytes, got {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != magic {
        return Err(SemError::format(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[0..4]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(SemError::format(path, format!("unsupported version {version}")));
    }
    Ok((word(8), word(12)))
}

fn payload_len(path: &Path, element_counts: &[u64]) -> Result<u64> {
    element_counts
        .iter()
        .try_fold(HEADER_LEN as u64, |acc, n| n.checked_mul(4).and_then(|b| acc.checked_add(b)))
        .ok_or_else(|| SemError::format(path, "header dimensions overflow"))
}

fn check_size(path: &Path, expected: u64, actual: usize) -> Result<()> {
    if expected != actual as u64 {
        return Err(SemError::format(
            path,
            format!("payload size mismatch: expected {expected} bytes, got {actual}"),
        ));
    }
    Ok(())
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| SemError::io(path, e))
}

/// Reads only the header of an embedding-matrix file and checks the file size.
pub fn read_matrix_shape(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| SemError::io(path, e))?;
    let len = file.metadata().map_err(|e| SemError::io(path, e))?.len();
    let mut header = Vec::with_capacity(HEADER_LEN);
    Read::by_ref(&mut file)
        .take(HEADER_LEN as u64)
        .read_to_end(&mut header)
        .map_err(|e| SemError::io(path, e))?;
    let (rows, cols) = read_header(&header, path, MATRIX_MAGIC)?;
    let expected = payload_len(path, &[rows as u64 * cols as u64])?;
    if expected != len {
        return Err(SemError::format(
            path,
            format!("payload size mismatch: expected {expected} bytes, got {len}"),
        ));
    }
    Ok((rows as usize, cols as usize))
}

pub fn read_embedding_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    read_embedding_matrix_with(path, NanPolicy::Reject)
}

pub fn read_embedding_matrix_with(path: impl AsRef<Path>, nan: NanPolicy) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    EmbeddingMatrix::from_bytes(&read_file(path)?, path, nan)
}

pub fn write_embedding_matrix(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &matrix.to_bytes())
}

/// Serializes weights as `f32`. Weights produced by this crate are already
/// `f32`-representable, so save followed by load is bit-identical.
pub fn sae_weights_to_bytes(w: &SaeWeights) -> Vec<u8> {
    let (d, s) = (w.input_dim(), w.latent_dim());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (2 * s * d + d));
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(s as u32).to_le_bytes());
    let values = w
        .encoder()
        .rows()
        .into_iter()
        .flat_map(|r| r.to_vec())
        .chain(w.decoder().rows().into_iter().flat_map(|r| r.to_vec()))
        .chain(w.centering_bias().iter().copied());
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn sae_weights_from_bytes(bytes: &[u8], path: &Path) -> Result<SaeWeights> {
    let (d, s) = read_header(bytes, path, WEIGHTS_MAGIC)?;
    if d == 0 || s == 0 {
        return Err(SemError::format(path, format!("invalid dimensions d={d}, s={s}")));
    }
    let (d64, s64) = (d as u64, s as u64);
    let expected = payload_len(path, &[s64 * d64, d64 * s64, d64])?;
    check_size(path, expected, bytes.len())?;
    let vals: Vec<f64> = decode_f32(&bytes[HEADER_LEN..]).into_iter().map(f64::from).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(SemError::format(path, "non-finite weight"));
    }
    let (d, s) = (d as usize, s as usize);
    let n = s * d;
    let encoder = Array2::from_shape_vec((s, d), vals[..n].to_vec()).expect("shape checked");
    let decoder = Array2::from_shape_vec((d, s), vals[n..2 * n].to_vec()).expect("shape checked");
    let bias = Array1::from(vals[2 * n..].to_vec());
    SaeWeights::new(encoder, decoder, bias).map_err(|e| SemError::format(path, e.to_string()))
}

pub fn load_sae_weights(path: impl AsRef<Path>) -> Result<SaeWeights> {
    let path = path.as_ref();
    sae_weights_from_bytes(&read_file(path)?, path)
}

pub fn save_sae_weights(w: &SaeWeights, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &sae_weights_to_bytes(w))
}

/// Writes through a temporary file in the destination directory and renames
/// it into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| SemError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| SemError::io(path, e))?;
    tmp.flush().map_err(|e| SemError::io(path, e))?;
    tmp.persist(path).map_err(|e| SemError::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub index: usize,
    pub label: String,
    pub group: String,
}

/// Contents of an `index,label,group` CSV, ordered by `index`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelTable {
    pub rows: Vec<LabelRow>,
}

impl LabelTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.label.as_str()).collect()
    }

    pub fn groups(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.group.as_str()).collect()
    }

    /// Maps label strings to dense indices; see [`vocabulary`].
    pub fn label_indices(&self) -> (Vec<String>, Vec<usize>) {
        index_strings(&self.labels())
    }

    pub fn group_indices(&self) -> (Vec<String>, Vec<usize>) {
        index_strings(&self.groups())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| SemError::InvalidArgument(e.to_string()))?;
        }
        w.into_inner().map_err(|e| SemError::InvalidArgument(e.to_string()))
    }

    pub fn from_csv(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(bytes);
        let headers = rdr.headers().map_err(|e| SemError::format(path, e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["index", "label", "group"] {
            return Err(SemError::format(path, "label CSV header must be index,label,group"));
        }
        let mut rows: Vec<LabelRow> = Vec::new();
        for rec in rdr.deserialize() {
            rows.push(rec.map_err(|e| SemError::format(path, e.to_string()))?);
        }
        rows.sort_by_key(|r| r.index);
        for (i, r) in rows.iter().enumerate() {
            if r.index != i {
                return Err(SemError::format(path, format!("label indices must be 0..n, missing {i}")));
            }
        }
        Ok(Self { rows })
    }
}

/// Sorted vocabulary: numerically when every entry parses as an integer,
/// lexicographically otherwise.
pub fn vocabulary(values: &[&str]) -> Vec<String> {
    let uniq: BTreeSet<&str> = values.iter().copied().collect();
    let mut vocab: Vec<String> = uniq.into_iter().map(str::to_owned).collect();
    if vocab.iter().all(|v| v.parse::<i64>().is_ok()) {
        vocab.sort_by_key(|v| v.parse::<i64>().expect("checked"));
    }
    vocab
}

fn index_strings(values: &[&str]) -> (Vec<String>, Vec<usize>) {
    let vocab = vocabulary(values);
    let idx = values
        .iter()
        .map(|v| vocab.iter().position(|x| x == v).expect("value in vocabulary"))
        .collect();
    (vocab, idx)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelTable> {
    let path = path.as_ref();
    LabelTable::from_csv(&read_file(path)?, path)
}

pub fn write_labels(table: &LabelTable, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &table.to_csv()?)
}
