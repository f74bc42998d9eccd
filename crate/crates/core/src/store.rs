//! On-disk tensor format and the validated in-memory embedding matrix.
//!
//! `.ezt` layout (all integers little-endian):
//!
//! ```text
//! offset  size          field
//! 0       4             magic "EZPT"
//! 4       4             version (u32) = 1
//! 8       4             rows (u32)
//! 12      4             cols (u32)
//! 16      4*rows*cols   f32 payload, row-major, IEEE-754 little-endian
//! ```
//!
//! Row names live in a sibling `.names` file, UTF-8, one name per line,
//! every line terminated by LF.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EZPT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Rows whose norm is already this close to one are not rescaled on load.
/// Rescaled rows are rounded back to storage precision, whose relative error
/// (< 6e-8) stays well inside this band, so loading is idempotent.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Image,
    ClassText,
    ConceptText,
    /// Raw patch rows; normalized by the spatial pipeline, not at load.
    PatchGrid,
}

/// Row-major embedding matrix with one name per row.
///
/// Entries are held in f64 but are always representable in f32, the storage
/// precision, so `save` followed by `load` is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: DMatrix<f64>,
    names: Vec<String>,
    kind: EmbeddingKind,
    original_norms: Vec<f64>,
}

fn to_storage(x: f64) -> f64 {
    x as f32 as f64
}

impl EmbeddingMatrix {
    /// Validates and normalizes `data` (n x d) with `names` (length n).
    pub fn new(data: DMatrix<f64>, names: Vec<String>, kind: EmbeddingKind) -> Result<Self> {
        if names.len() != data.nrows() {
            return Err(Error::NameCountMismatch {
                rows: data.nrows(),
                names: names.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            // column-major position
            let (r, c) = (pos % data.nrows(), pos / data.nrows());
            return Err(Error::NonFinite {
                context: format!("embedding row {r} column {c}"),
            });
        }
        let mut data = data;
        let mut original_norms = Vec::with_capacity(data.nrows());
        for r in 0..data.nrows() {
            let norm = data.row(r).norm();
            original_norms.push(norm);
            if kind == EmbeddingKind::PatchGrid {
                data.row_mut(r).apply(|v| *v = to_storage(*v));
                continue;
            }
            if norm == 0.0 {
                return Err(Error::ZeroNorm { row: r });
            }
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                data.row_mut(r).apply(|v| *v = to_storage(*v / norm));
            } else {
                data.row_mut(r).apply(|v| *v = to_storage(*v));
            }
        }
        Ok(Self {
            data,
            names,
            kind,
            original_norms,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], names: Vec<String>, kind: EmbeddingKind) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: "embedding row length",
                    expected: cols,
                    found: rows[i].len(),
                });
            }
        }
        let data = DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]);
        Self::new(data, names, kind)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    /// Row norms as they were before load-time normalization.
    pub fn original_norms(&self) -> &[f64] {
        &self.original_norms
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn row_vec(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Sub-matrix of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        for &i in indices {
            if i >= self.nrows() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.nrows(),
                });
            }
        }
        let data = self.data.select_rows(indices.iter());
        Ok(Self {
            data,
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            kind: self.kind,
            original_norms: indices.iter().map(|&i| self.original_norms[i]).collect(),
        })
    }

    /// Stacks `other` below `self`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.nrows() > 0 && other.nrows() > 0 && self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                context: "concatenated embeddings",
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let cols = if self.nrows() > 0 { self.dim() } else { other.dim() };
        let n = self.nrows() + other.nrows();
        let data = DMatrix::from_fn(n, cols, |r, c| {
            if r < self.nrows() {
                self.data[(r, c)]
            } else {
                other.data[(r - self.nrows(), c)]
            }
        });
        let mut names = self.names.clone();
        names.extend(other.names.iter().cloned());
        let mut original_norms = self.original_norms.clone();
        original_norms.extend(other.original_norms.iter().copied());
        Ok(Self {
            data,
            names,
            kind: self.kind,
            original_norms,
        })
    }
}

/// Path of the names sidecar for a tensor file.
pub fn names_path(tensor_path: &Path) -> PathBuf {
    tensor_path.with_extension("names")
}

/// Raw tensor read: (rows, cols, row-major f32 payload).
pub fn read_tensor(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(malformed(format!(
            "file is {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(malformed("bad magic".into()));
    }
    let word = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = word(4);
    if version != VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| malformed("shape overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(malformed(format!(
            "payload is {} bytes, {rows}x{cols} needs {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((rows, cols, data))
}

pub fn write_tensor(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    debug_assert_eq!(data.len(), rows * cols);
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("dimension {v} exceeds u32")));
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&to_u32(rows)?.to_le_bytes());
    header.extend_from_slice(&to_u32(cols)?.to_le_bytes());
    let io = |e| Error::io(path, e);
    w.write_all(&header).map_err(io)?;
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_names(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let body = text.strip_suffix('\n').unwrap_or(&text);
    let names: Vec<String> = body.split('\n').map(str::to_owned).collect();
    if let Some(index) = names.iter().position(String::is_empty) {
        return Err(Error::InvalidName { index });
    }
    Ok(names)
}

pub fn write_names(path: &Path, names: &[String]) -> Result<()> {
    validate_names(names)?;
    let mut out = String::new();
    for n in names {
        out.push_str(n);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn validate_names(names: &[String]) -> Result<()> {
    match names
        .iter()
        .position(|n| n.is_empty() || n.contains('\n') || n.contains('\r'))
    {
        Some(index) => Err(Error::InvalidName { index }),
        None => Ok(()),
    }
}

/// Loads `path` plus its `.names` sidecar, validating and normalizing rows.
pub fn load_embeddings(path: &Path, kind: EmbeddingKind) -> Result<EmbeddingMatrix> {
    let (rows, cols, payload) = read_tensor(path)?;
    let names = read_names(&names_path(path))?;
    if names.len() != rows {
        return Err(Error::NameCountMismatch {
            rows,
            names: names.len(),
        });
    }
    let data = DMatrix::from_row_iterator(rows, cols, payload.iter().map(|&v| v as f64));
    EmbeddingMatrix::new(data, names, kind)
}

pub fn save_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    validate_names(&m.names)?;
    let payload: Vec<f32> = (0..m.nrows())
        .flat_map(|r| m.data.row(r).iter().map(|&v| v as f32).collect::<Vec<_>>())
        .collect();
    write_tensor(path, m.nrows(), m.dim(), &payload)?;
    write_names(&names_path(path), &m.names)
}

/// Binary object mask at arbitrary resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    cells: Vec<u8>,
    image_name: String,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, cells: Vec<u8>, image_name: impl Into<String>) -> Result<Self> {
        let image_name = image_name.into();
        if height == 0 || width == 0 {
            return Err(Error::InvalidMask {
                path: PathBuf::from(&image_name),
                reason: "mask must be at least 1x1".into(),
            });
        }
        if cells.len() != height * width {
            return Err(Error::DimensionMismatch {
                context: "mask cells",
                expected: height * width,
                found: cells.len(),
            });
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::InvalidMask {
                path: PathBuf::from(&image_name),
                reason: "mask entries must be 0 or 1".into(),
            });
        }
        Ok(Self {
            height,
            width,
            cells,
            image_name,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image_name(&self) -> &str {
        &self.image_name
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.width + c] == 1
    }

    /// Nearest-neighbour resize sampling each target cell at its centre.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        let mut cells = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = (((r as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for c in 0..width {
                let sc = (((c as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                cells.push(self.cells[sr * self.width + sc]);
            }
        }
        Self::new(height, width, cells, self.image_name.clone())
    }

    /// Reads a binary (P5) or plain (P2) graymap; any non-zero pixel is inside.
    pub fn from_pgm(path: &Path, image_name: impl Into<String>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let invalid = |reason: &str| Error::InvalidMask {
            path: path.to_path_buf(),
            reason: reason.to_owned(),
        };
        let mut pos = 0usize;
        let mut token = || -> Option<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token().ok_or_else(|| invalid("missing magic"))?;
        let mut num = |what: &str| -> Result<usize> {
            token()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| invalid(&format!("bad {what}")))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        let n = width * height;
        let cells: Vec<u8> = match magic.as_str() {
            "P5" => {
                // exactly one whitespace byte separates maxval from the raster
                let start = pos + 1;
                let wide = maxval > 255;
                let need = if wide { 2 * n } else { n };
                if bytes.len() < start + need {
                    return Err(invalid("truncated raster"));
                }
                let raster = &bytes[start..start + need];
                if wide {
                    raster
                        .chunks_exact(2)
                        .map(|p| u8::from(p[0] != 0 || p[1] != 0))
                        .collect()
                } else {
                    raster.iter().map(|&p| u8::from(p != 0)).collect()
                }
            }
            "P2" => {
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push(u8::from(num("pixel")? != 0));
                }
                v
            }
            _ => return Err(invalid("expected P2 or P5")),
        };
        Self::new(height, width, cells, image_name)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.cells.iter().map(|&c| if c == 1 { 255u8 } else { 0 }));
        out
    }
}
