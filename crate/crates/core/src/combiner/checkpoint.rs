//! Parameter checkpoints.
//!
//! ```text
//! "CCK1"  u32 version=1  u32 d  f64 dropout_rate  u8 mode  u32 section count
//! per section: u16 name length + UTF-8 name, u32 rows, u32 cols, rows*cols f32
//! ```
//!
//! All integers and floats little-endian; biases are stored as `1 x n`.

use std::fs;
use std::path::Path;

use super::params::{CombinerParams, TENSOR_NAMES};
use super::CombineMode;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CCK1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: CombinerParams<f32>,
    pub mode: CombineMode,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.d as u32).to_le_bytes());
        out.extend_from_slice(&self.params.dropout_rate.to_le_bytes());
        out.push(self.mode.code());
        out.extend_from_slice(&(TENSOR_NAMES.len() as u32).to_le_bytes());
        let shapes = self.params.shapes();
        for ((name, (rows, cols)), values) in
            TENSOR_NAMES.iter().zip(shapes).zip(self.params.tensors())
        {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(rows as u32).to_le_bytes());
            out.extend_from_slice(&(cols as u32).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(Error::InvalidMatrix("checkpoint dim is zero".into()));
        }
        let dropout_rate = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let mode_code = r.take(1)?[0];
        let mode = CombineMode::from_code(mode_code)
            .ok_or_else(|| Error::InvalidMatrix(format!("unknown mode code {mode_code}")))?;
        let count = r.u32()? as usize;
        if count != TENSOR_NAMES.len() {
            return Err(Error::InvalidMatrix(format!(
                "checkpoint has {count} sections, expected {}",
                TENSOR_NAMES.len()
            )));
        }

        let mut params = CombinerParams::<f32>::zeros(d);
        params.dropout_rate = dropout_rate;
        let shapes = params.shapes();
        for ((name, want), dst) in TENSOR_NAMES.iter().zip(shapes).zip(params.tensors_mut()) {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let found = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::InvalidMatrix(format!("section name: {e}")))?;
            if found != *name {
                return Err(Error::InvalidMatrix(format!(
                    "expected section {name:?}, found {found:?}"
                )));
            }
            let shape = (r.u32()? as usize, r.u32()? as usize);
            if shape != want {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {want:?}, found {shape:?}"
                )));
            }
            let raw = r.take(4 * shape.0 * shape.1)?;
            for (v, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::TrailingBytes {
                extra: (bytes.len() - r.pos) as u64,
            });
        }
        params.validate()?;
        Ok(Self { params, mode })
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
