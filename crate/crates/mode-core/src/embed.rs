//! Dense row-major embedding store and its on-disk format.
//!
//! Embeddings are 32-bit floats in memory and on disk; distance kernels
//! accumulate in 64-bit (see [`crate::kernels`]). The file format is fixed:
//!
//! ```text
//! magic "MODE" | u32 LE version = 1 | u8 flags | 3 reserved bytes
//! | u64 LE rows | u32 LE dim | rows * dim * f32 LE, row-major
//! ```
//!
//! Flag bit 0 records whether rows are unit-normalized. Reserved byte 0
//! carries the embedding-source tag (0 = unspecified): routing refuses to
//! compare embeddings from different tagged sources unless overridden,
//! so metadata embedded by one encoder is not silently scored against
//! cluster centers from another.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::ModeError;
use crate::Result;

/// File magic for embedding matrices.
pub const EMBED_MAGIC: [u8; 4] = *b"MODE";
/// Current embedding format version.
pub const EMBED_VERSION: u32 = 1;

/// Tolerance for treating a row as unit-length.
pub const UNIT_NORM_TOL: f32 = 1e-5;

/// A dense `rows x dim` matrix of f32 embeddings, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    unit_normalized: bool,
    source: u8,
}

/// Result of [`EmbeddingMatrix::normalize_rows`]: the normalized matrix plus
/// the indices of zero rows that were repaired to the first basis vector.
#[derive(Debug, Clone)]
pub struct NormalizeOutcome {
    pub matrix: EmbeddingMatrix,
    pub zero_rows: Vec<usize>,
}

impl EmbeddingMatrix {
    /// Build a matrix from a flat row-major buffer. `dim` must be positive
    /// and the buffer length must equal `rows * dim`; `rows` may be zero.
    pub fn from_vec(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(ModeError::Config("embedding dim must be >= 1".into()));
        }
        if data.len() != rows * dim {
            return Err(ModeError::ShapeMismatch {
                context: "embedding buffer".into(),
                left: format!("{rows}x{dim}"),
                right: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, dim, data, unit_normalized: false, source: 0 })
    }

    /// Build a matrix from row slices, all of equal length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(1);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(ModeError::DimensionMismatch {
                    context: "from_rows".into(),
                    left: dim,
                    right: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), dim, data)
    }

    /// An empty matrix with the given dim.
    pub fn empty(dim: usize) -> Self {
        Self { rows: 0, dim, data: Vec::new(), unit_normalized: false, source: 0 }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_unit_normalized(&self) -> bool {
        self.unit_normalized
    }

    /// Embedding-source tag (0 = unspecified).
    pub fn source(&self) -> u8 {
        self.source
    }

    /// Return the same matrix stamped with an embedding-source tag.
    pub fn with_source(mut self, source: u8) -> Self {
        self.source = source;
        self
    }

    /// Mark rows as unit-normalized without checking. Callers own the claim;
    /// [`EmbeddingMatrix::normalize_rows`] is the checked path.
    pub fn assert_unit_normalized(mut self) -> Self {
        self.unit_normalized = true;
        self
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Gather a subset of rows into a new matrix (labels and flags carried over).
    pub fn gather(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            dim: self.dim,
            data,
            unit_normalized: self.unit_normalized,
            source: self.source,
        }
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Unit-normalize every row. Zero rows (norm below f32 minimum positive)
    /// are replaced by the first standard basis vector and reported in the
    /// outcome so callers can decide whether that matters.
    pub fn normalize_rows(&self) -> NormalizeOutcome {
        let mut data = self.data.clone();
        let mut zero_rows = Vec::new();
        for i in 0..self.rows {
            let row = &mut data[i * self.dim..(i + 1) * self.dim];
            // Accumulate the squared norm in f64 to keep long rows stable.
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
            } else {
                row[0] = 1.0;
                for v in row.iter_mut().skip(1) {
                    *v = 0.0;
                }
                zero_rows.push(i);
            }
        }
        NormalizeOutcome {
            matrix: EmbeddingMatrix {
                rows: self.rows,
                dim: self.dim,
                data,
                unit_normalized: true,
                source: self.source,
            },
            zero_rows,
        }
    }

    /// Serialized byte size of this matrix in the embedding format.
    pub fn encoded_len(&self) -> u64 {
        24 + (self.rows as u64) * (self.dim as u64) * 4
    }

    /// Write the matrix in the embedding file format.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&EMBED_MAGIC)?;
        w.write_all(&EMBED_VERSION.to_le_bytes())?;
        let flags: u8 = if self.unit_normalized { 1 } else { 0 };
        w.write_all(&[flags, self.source, 0, 0])?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a matrix from the embedding file format, with distinct errors
    /// for bad magic, version mismatch, truncated payload, and trailing
    /// bytes.
    pub fn read_file(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let total = file.metadata()?.len();
        let mut r = BufReader::new(file);
        if total < 24 {
            return Err(ModeError::TruncatedPayload {
                path: path.into(),
                needed: 24,
                found: total,
            });
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != EMBED_MAGIC {
            return Err(ModeError::BadMagic {
                path: path.into(),
                expected: EMBED_MAGIC,
                found: magic,
            });
        }
        let version = read_u32(&mut r)?;
        if version != EMBED_VERSION {
            return Err(ModeError::VersionMismatch {
                path: path.into(),
                expected: EMBED_VERSION,
                found: version,
            });
        }
        let mut flags_reserved = [0u8; 4];
        r.read_exact(&mut flags_reserved)?;
        let rows = read_u64(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        if dim == 0 {
            return Err(ModeError::Config(format!("{}: dim 0 in header", path.display())));
        }
        let needed = 24 + (rows as u64) * (dim as u64) * 4;
        if total < needed {
            return Err(ModeError::TruncatedPayload { path: path.into(), needed, found: total });
        }
        if total > needed {
            return Err(ModeError::TrailingBytes { path: path.into(), extra: total - needed });
        }
        let mut payload = vec![0u8; rows * dim * 4];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            rows,
            dim,
            data,
            unit_normalized: flags_reserved[0] & 1 != 0,
            source: flags_reserved[1],
        })
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Distance measures used by the clustering and routing stages.
///
/// On unit vectors the two are interchangeable: squared Euclidean distance
/// equals `2 * (1 - cosine similarity)`, i.e. twice the cosine distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    SquaredEuclidean,
    CosineDistance,
}

impl DistanceKind {
    /// Scalar distance between two equal-length vectors, accumulated in f64.
    pub fn between(self, a: &[f32], b: &[f32]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        match self {
            DistanceKind::SquaredEuclidean => crate::kernels::sq_dist(a, b),
            DistanceKind::CosineDistance => {
                let mut dot = 0.0f64;
                let mut na = 0.0f64;
                let mut nb = 0.0f64;
                for (&x, &y) in a.iter().zip(b) {
                    dot += x as f64 * y as f64;
                    na += x as f64 * x as f64;
                    nb += y as f64 * y as f64;
                }
                if na == 0.0 || nb == 0.0 {
                    return 1.0;
                }
                1.0 - dot / (na.sqrt() * nb.sqrt())
            }
        }
    }
}
