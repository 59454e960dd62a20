//! `.fgrid` array container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"FGRD"            magic
//! u16                version (1)
//! u8                 dtype: 1 = f64, 2 = complex128 (re, im interleaved)
//! u8                 rank
//! u64 * rank         dims, slowest axis first
//! payload            product(dims) elements, C order
//! u64                metadata length in bytes
//! utf-8              metadata (TOML text)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid, C64};

pub const MAGIC: &[u8; 4] = b"FGRD";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Data {
    F64(Vec<f64>),
    C128(Vec<C64>),
}

impl Data {
    pub fn len(&self) -> usize {
        match self {
            Data::F64(v) => v.len(),
            Data::C128(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> u8 {
        match self {
            Data::F64(_) => 1,
            Data::C128(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: Data,
    pub metadata: String,
}

impl Array {
    pub fn new(dims: Vec<usize>, data: Data, metadata: impl Into<String>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::InvalidParameter(format!("rank {} too large", dims.len())));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidParameter(format!("dims {dims:?} hold {n} elements, data has {}", data.len())));
        }
        Ok(Self { dims, data, metadata: metadata.into() })
    }

    pub fn real(dims: Vec<usize>, data: Vec<f64>, metadata: impl Into<String>) -> Result<Self> {
        Self::new(dims, Data::F64(data), metadata)
    }

    pub fn complex(dims: Vec<usize>, data: Vec<C64>, metadata: impl Into<String>) -> Result<Self> {
        Self::new(dims, Data::C128(data), metadata)
    }

    /// Field as an `n x n` complex array; the grid goes into a `[grid]` table ahead of `metadata`.
    pub fn from_field(f: &Field, metadata: &str) -> Self {
        let g = f.grid;
        let head = format!("[grid]\nn = {}\nlength = {:?}\norigin = [{:?}, {:?}]\n", g.n, g.length, g.origin[0], g.origin[1]);
        let meta = if metadata.is_empty() { head } else { format!("{head}\n{metadata}") };
        Self { dims: vec![g.n, g.n], data: Data::C128(f.data.clone()), metadata: meta }
    }

    /// Inverse of [`Array::from_field`].
    pub fn to_field(&self) -> Result<Field> {
        let Data::C128(d) = &self.data else { return Err(Error::Format("field arrays are complex".into())) };
        if self.dims.len() != 2 || self.dims[0] != self.dims[1] {
            return Err(Error::Format(format!("field arrays are square, got {:?}", self.dims)));
        }
        let table: toml::Table = self.metadata.parse().map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let grid: Grid = table
            .get("grid")
            .cloned()
            .ok_or_else(|| Error::Format("metadata has no [grid] table".into()))?
            .try_into()
            .map_err(|e| Error::Format(format!("grid metadata: {e}")))?;
        let grid = Grid::new(grid.n, grid.length, grid.origin)?;
        if grid.n != self.dims[0] {
            return Err(Error::Format(format!("grid n {} does not match dims {:?}", grid.n, self.dims)));
        }
        Field::from_vec(grid, d.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.dims.len() + 16 * self.data.len() + self.metadata.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.code());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        match &self.data {
            Data::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Data::C128(v) => v.iter().for_each(|z| {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }),
        }
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let code = r.take(1)?[0];
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflows usize".into()))?);
        }
        let n = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| Error::Format("dims overflow".into()))?;
        let width = match code {
            1 => 8,
            2 => 16,
            c => return Err(Error::Format(format!("unknown dtype code {c}"))),
        };
        let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
        let f = |c: &[u8]| f64::from_le_bytes(c.try_into().unwrap());
        let data = if code == 1 {
            Data::F64(raw.chunks_exact(8).map(f).collect())
        } else {
            Data::C128(raw.chunks_exact(16).map(|c| C64::new(f(&c[..8]), f(&c[8..]))).collect())
        };
        let mlen = usize::try_from(r.u64()?).map_err(|_| Error::Format("metadata length overflows usize".into()))?;
        let metadata = String::from_utf8(r.take(mlen)?.to_vec()).map_err(|_| Error::Format("metadata is not utf-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { dims, data, metadata })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.b.len()).ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
