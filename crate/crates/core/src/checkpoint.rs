//! Named-tensor checkpoint container.
//!
//! Layout (all integers unsigned 32-bit little-endian, values 64-bit
//! little-endian IEEE reals):
//!
//! ```text
//! "CRPARAM1"
//! repeated until end of file:
//!     name_len, name bytes (UTF-8)
//!     rank, dims[rank]
//!     values[product(dims)]
//! ```
//!
//! A rank-1 tensor with a zero dimension carries no values; such records are
//! used as markers (composer kind, provenance).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorgrad::{DenseMat, DenseVec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRPARAM1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dims,
            values,
        }
    }

    pub fn marker(name: impl Into<String>) -> Self {
        Self::new(name, vec![0], Vec::new())
    }

    pub fn to_mat(&self) -> Result<DenseMat> {
        match self.dims[..] {
            [r, c] => DenseMat::new(r, c, self.values.clone()),
            _ => Err(Error::Checkpoint(format!(
                "`{}` is not a matrix",
                self.name
            ))),
        }
    }

    pub fn to_vec(&self) -> Result<DenseVec> {
        match self.dims[..] {
            [_] => DenseVec::new(self.values.clone()),
            _ => Err(Error::Checkpoint(format!(
                "`{}` is not a vector",
                self.name
            ))),
        }
    }

    pub fn to_scalar(&self) -> Result<f64> {
        match (&self.dims[..], &self.values[..]) {
            ([1], [x]) => Ok(*x),
            _ => Err(Error::Checkpoint(format!(
                "`{}` is not a scalar",
                self.name
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<NamedTensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Names of marker records that start with `prefix`, with the prefix
    /// stripped.
    pub fn markers<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.tensors
            .iter()
            .filter(|t| t.values.is_empty())
            .filter_map(move |t| t.name.strip_prefix(prefix))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for t in &self.tensors {
            let expected: usize = t.dims.iter().product();
            if expected != t.values.len() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has dims {:?} but {} values",
                    t.name,
                    t.dims,
                    t.values.len()
                )));
            }
            put_u32(&mut out, t.name.len())?;
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.dims.len())?;
            for &d in &t.dims {
                put_u32(&mut out, d)?;
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC.as_slice())
            .ok_or_else(|| Error::Checkpoint("bad magic".into()))?;
        let mut r = Reader { buf: rest, pos: 0 };
        let mut tensors = Vec::new();
        while !r.done() {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` dims overflow")))?;
            let raw = r.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?,
            )?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("`{name}` holds {bad}")));
            }
            tensors.push(NamedTensor { name, dims, values });
        }
        Ok(Self { tensors })
    }

    /// Writes atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4-byte slice")) as usize)
    }
}
