//! "VTF1" tensor files: magic, u32-LE ndim, u32-LE dims, then a row-major
//! f32-LE payload. Values live as f64 in memory and f32 on disk.

use acformer_core::error::{Error, Result};
use acformer_core::io::atomic_write;
use acformer_core::kernel::Matrix;
use std::path::Path;

pub const TENSOR_MAGIC: &[u8; 4] = b"VTF1";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<TensorFile> {
        let count: usize = dims.iter().product();
        if dims.is_empty() || count != data.len() {
            return Err(Error::data(format!(
                "tensor dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(TensorFile { dims, data })
    }

    /// Narrowing f64 -> f32 conversion; on-disk precision is single.
    pub fn from_matrix(m: &Matrix) -> TensorFile {
        TensorFile {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.dims.len() != 2 {
            return Err(Error::data(format!(
                "expected a 2-d tensor, file has {} dims",
                self.dims.len()
            )));
        }
        Matrix::from_vec(
            self.dims[0],
            self.dims[1],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.dims.len() * 4 + self.data.len() * 4);
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TensorFile> {
        let take = |pos: usize, n: usize| -> Result<&[u8]> {
            bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::data(format!("tensor file truncated at byte {pos}")))
        };
        if take(0, 4)? != TENSOR_MAGIC {
            return Err(Error::data("not a tensor file (bad magic)"));
        }
        let ndim = u32::from_le_bytes(take(4, 4)?.try_into().unwrap()) as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::data(format!("unreasonable tensor rank {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut pos = 8;
        let mut count: u64 = 1;
        for _ in 0..ndim {
            let d = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
            pos += 4;
            count = count.saturating_mul(d as u64);
            dims.push(d);
        }
        let expected = pos as u64 + count * 4;
        if bytes.len() as u64 != expected {
            return Err(Error::data(format!(
                "tensor payload is {} bytes, dims {dims:?} need {}",
                bytes.len() - pos,
                count * 4
            )));
        }
        let mut data = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let v = f32::from_le_bytes(take(pos, 4)?.try_into().unwrap());
            pos += 4;
            if !v.is_finite() {
                return Err(Error::data("tensor file contains a non-finite value"));
            }
            data.push(v);
        }
        Ok(TensorFile { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<TensorFile> {
        TensorFile::from_bytes(&std::fs::read(path)?)
    }
}

/// Load a 2-d tensor file straight into a matrix.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    TensorFile::read(path)?.to_matrix()
}
