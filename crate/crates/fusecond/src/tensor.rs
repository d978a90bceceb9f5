//! `FUS3` tensor files.
//!
//! Layout (little-endian): magic `FUS3`, `u32` version (1), `u32` ndim in
//! `1..=4`, `ndim` x `u64` dims, then the row-major `f32` payload. The file
//! length must match the header exactly.

use std::fs;
use std::path::Path;

use fusecond_core::encoder::PixelGrid;
use fusecond_core::Matrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FUS3";
pub const VERSION: u32 = 1;
pub const MAX_DIMS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len = element_count(&dims)?;
        if len != data.len() {
            return Err(Error::Format(format!("dims {dims:?} need {len} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self { dims: vec![m.rows(), m.cols()], data: m.as_slice().iter().map(|&v| v as f32).collect() }
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self { dims: vec![v.len()], data: v.iter().map(|&x| x as f32).collect() }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let [rows, cols] = self.dims[..] else {
            return Err(Error::Format(format!("expected a 2-D tensor, got dims {:?}", self.dims)));
        };
        Ok(Matrix::from_vec(rows, cols, self.data.iter().map(|&v| f64::from(v)).collect())?)
    }

    pub fn to_vector(&self) -> Result<Vec<f64>> {
        if self.dims.len() != 1 {
            return Err(Error::Format(format!("expected a 1-D tensor, got dims {:?}", self.dims)));
        }
        Ok(self.data.iter().map(|&v| f64::from(v)).collect())
    }

    /// Reads an `H x W x C` tensor (or `H x W`, treated as one channel) as pixels.
    pub fn to_pixels(&self) -> Result<PixelGrid> {
        let (h, w, c) = match self.dims[..] {
            [h, w] => (h, w, 1),
            [h, w, c] => (h, w, c),
            _ => return Err(Error::Format(format!("pixel tensors are H x W x C, got dims {:?}", self.dims))),
        };
        Ok(PixelGrid::new(h, w, c, self.data.iter().map(|&v| f64::from(v)).collect())?)
    }

    pub fn from_pixels(p: &PixelGrid) -> Self {
        Self {
            dims: vec![p.height(), p.width(), p.channels()],
            data: p.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected FUS3".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported tensor version {version}")));
        }
        let ndim = r.u32()? as usize;
        if !(1..=MAX_DIMS).contains(&ndim) {
            return Err(Error::Format(format!("ndim {ndim} outside 1..={MAX_DIMS}")));
        }
        let dims = (0..ndim)
            .map(|_| {
                r.u64()
                    .and_then(|d| usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into())))
            })
            .collect::<Result<Vec<_>>>()?;
        let len = element_count(&dims)?;
        let payload = len.checked_mul(4).ok_or_else(|| Error::Format("dimension overflow".into()))?;
        if r.remaining() != payload {
            return Err(Error::Format(format!(
                "payload is {} bytes, header requires {payload}",
                r.remaining()
            )));
        }
        let data =
            r.take(payload)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { dims, data })
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_DIMS {
        return Err(Error::Format(format!("tensors need 1..={MAX_DIMS} dims, got {}", dims.len())));
    }
    if dims.contains(&0) {
        return Err(Error::Format(format!("zero-sized dimension in {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dimension overflow".into()))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
