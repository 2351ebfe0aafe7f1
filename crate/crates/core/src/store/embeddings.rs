//! The CEM1 embedding container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CEM1"  u32 version=1  u64 N  u32 d
//! N*d f32 values, row-major
//! u32 id count, then per id: u16 byte length + UTF-8 bytes
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CEM1";
pub const VERSION: u32 = 1;

const HEADER_LEN: u64 = 4 + 4 + 8 + 4;

/// An `N x d` table of `f32` features keyed by unique string ids.
///
/// Immutable once built; clones are cheap enough for desk-scale data and the
/// type is `Send + Sync` for shared read access.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    data: Array2<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, data: Array2<f32>) -> Result<Self> {
        let (n, d) = data.dim();
        if n == 0 {
            return Err(Error::InvalidMatrix("matrix has no rows".into()));
        }
        if d == 0 {
            return Err(Error::InvalidMatrix("dimension must be positive".into()));
        }
        if ids.len() != n {
            return Err(Error::InvalidMatrix(format!(
                "{} ids for {} rows",
                ids.len(),
                n
            )));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        for (i, row) in data.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("row {:?}", ids[i]),
                });
            }
        }
        // Row-major storage is part of the contract.
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Self { ids, data, index })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidMatrix("ragged rows".into()));
        }
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::InvalidMatrix(e.to_string()))?;
        Self::new(ids, data)
    }

    /// Stacks several matrices of equal dimension. Ids must stay unique
    /// unless `skip_duplicates` is set, in which case the first occurrence
    /// of an id wins.
    pub fn concat(parts: &[&EmbeddingMatrix], skip_duplicates: bool) -> Result<Self> {
        let d = parts
            .first()
            .map(|m| m.dim())
            .ok_or_else(|| Error::InvalidMatrix("nothing to concatenate".into()))?;
        let mut ids = Vec::new();
        let mut flat = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for m in parts {
            if m.dim() != d {
                return Err(Error::ShapeMismatch(format!(
                    "cannot stack dimension {} onto {d}",
                    m.dim()
                )));
            }
            for (id, row) in m.ids.iter().zip(m.data.rows()) {
                if !seen.insert(id.as_str()) {
                    if skip_duplicates {
                        continue;
                    }
                    return Err(Error::DuplicateId(id.clone()));
                }
                ids.push(id.clone());
                flat.extend(row.iter().copied());
            }
        }
        let data = Array2::from_shape_vec((ids.len(), d), flat)
            .map_err(|e| Error::InvalidMatrix(e.to_string()))?;
        Self::new(ids, data)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.data.row(i)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row_by_id(&self, id: &str) -> Option<ArrayView1<'_, f32>> {
        self.position(id).map(|i| self.data.row(i))
    }

    pub fn into_parts(self) -> (Vec<String>, Array2<f32>) {
        (self.ids, self.data)
    }

    /// Serialize to the CEM1 byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (n, d) = self.data.dim();
        let d32 = u32::try_from(d)
            .map_err(|_| Error::InvalidMatrix(format!("dimension {d} exceeds u32")))?;
        let count = u32::try_from(n)
            .map_err(|_| Error::InvalidMatrix(format!("{n} rows exceed the u32 id table")))?;
        let mut out =
            Vec::with_capacity(encoded_len(n, d, self.ids.iter().map(String::len)) as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&d32.to_le_bytes());
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&count.to_le_bytes());
        for id in &self.ids {
            let len = u16::try_from(id.len()).map_err(|_| {
                Error::InvalidMatrix(format!(
                    "id of {} bytes exceeds u16 length prefix",
                    id.len()
                ))
            })?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let magic = cur.take(4, 4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = cur.u32(HEADER_LEN)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let n = cur.u64(HEADER_LEN)?;
        let d = cur.u32(HEADER_LEN)? as u64;
        let payload = n
            .checked_mul(d)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| Error::InvalidMatrix(format!("N={n} d={d} overflows")))?;
        // Minimum size: header + payload + id count + one length prefix per id.
        let mut expected = HEADER_LEN + payload + 4 + 2 * n;
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len() as u64,
            });
        }
        let raw = cur.take(payload as usize, expected)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let count = cur.u32(expected)? as u64;
        if count != n {
            return Err(Error::InvalidMatrix(format!(
                "id table holds {count} ids for {n} rows"
            )));
        }
        let mut ids = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let len = cur.u16(expected)? as u64;
            expected += len;
            let raw = cur.take(len as usize, expected)?;
            let id = std::str::from_utf8(raw)
                .map_err(|e| Error::InvalidMatrix(format!("id is not UTF-8: {e}")))?;
            ids.push(id.to_owned());
        }
        if cur.remaining() > 0 {
            return Err(Error::TrailingBytes {
                extra: cur.remaining() as u64,
            });
        }
        let data = Array2::from_shape_vec((n as usize, d as usize), values)
            .map_err(|e| Error::InvalidMatrix(e.to_string()))?;
        Self::new(ids, data)
    }

    /// SHA-256 of the CEM1 encoding, hex encoded.
    pub fn checksum(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

/// Exact CEM1 file size for `n` rows of dimension `d` with the given id byte lengths.
pub fn encoded_len(n: usize, d: usize, id_lens: impl IntoIterator<Item = usize>) -> u64 {
    let ids: u64 = id_lens.into_iter().map(|l| 2 + l as u64).sum();
    HEADER_LEN + 4 * (n as u64) * (d as u64) + 4 + ids
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = m.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// `expected` is the total length implied by what has been parsed so far,
    /// reported when the buffer runs out.
    fn take(&mut self, len: usize, expected: u64) -> Result<&'a [u8]> {
        if self.remaining() < len {
            return Err(Error::Truncated {
                expected: expected.max((self.pos + len) as u64),
                actual: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u16(&mut self, expected: u64) -> Result<u16> {
        let b = self.take(2, expected)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, expected: u64) -> Result<u32> {
        let b = self.take(4, expected)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, expected: u64) -> Result<u64> {
        let b = self.take(8, expected)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
