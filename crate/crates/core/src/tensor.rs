//! Dense row-major tensors and the `KTNS` binary container.
//!
//! Layout of a `KTNS` file:
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 4            | magic `KTNS`                              |
//! | 1            | version, `0x01`                           |
//! | 1            | dtype, `0` = f32 (`1` = f64 also accepted) |
//! | 1            | rank                                      |
//! | 8 × rank     | dims, u64 little-endian                   |
//! | rest         | row-major little-endian payload           |
//!
//! Values are held as `f64` in memory and narrowed to `f32` on write.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const KTNS_MAGIC: &[u8; 4] = b"KTNS";
pub const KTNS_VERSION: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1, 1],
            data: vec![value],
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            dims: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Build a `[rows, cols]` matrix from equal-length row slices.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            dims: vec![rows.len(), cols],
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dims flattened into rows; the last dim is the column count.
    /// A rank-0 or rank-1 tensor is treated as a single row.
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            0 | 1 => 1,
            _ => self.dims[..self.dims.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale_data(&self, k: f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Serialize to `KTNS` bytes.
    pub fn to_ktns_bytes(&self, dtype: DType) -> Vec<u8> {
        let width = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let mut out = Vec::with_capacity(7 + 8 * self.dims.len() + width * self.data.len());
        out.extend_from_slice(KTNS_MAGIC);
        out.push(KTNS_VERSION);
        out.push(dtype as u8);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            DType::F32 => {
                for &v in &self.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_ktns_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |message: String| Error::TensorFormat {
            path: origin.to_path_buf(),
            message,
        };
        if bytes.len() < 7 {
            return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != KTNS_MAGIC {
            return Err(bad("bad magic".into()));
        }
        if bytes[4] != KTNS_VERSION {
            return Err(bad(format!("unsupported version {}", bytes[4])));
        }
        let width = match bytes[5] {
            0 => 4,
            1 => 8,
            other => return Err(bad(format!("unsupported dtype {other}"))),
        };
        let rank = bytes[6] as usize;
        let header = 7 + 8 * rank;
        if bytes.len() < header {
            return Err(bad("truncated dims".into()));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|i| {
                let start = 7 + 8 * i;
                let raw: [u8; 8] = bytes[start..start + 8].try_into().expect("8-byte slice");
                u64::from_le_bytes(raw) as usize
            })
            .collect();
        let count: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() != count * width {
            return Err(bad(format!(
                "payload has {} bytes, dims {dims:?} need {}",
                payload.len(),
                count * width
            )));
        }
        let data = if width == 4 {
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect()
        } else {
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        };
        Ok(Tensor { dims, data })
    }

    pub fn write_ktns(&self, path: &Path) -> Result<()> {
        let bytes = self.to_ktns_bytes(DType::F32);
        let mut f = fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read_ktns(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Tensor::from_ktns_bytes(&bytes, path)
    }

    /// Round every value through f32, matching what a `KTNS` write/read produces.
    pub fn quantize_f32(&self) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}
