//! Dense row-major tensors and the `GSTN` binary encoding.
//!
//! Layout on disk: the four magic bytes `GSTN`, a `u8` version (always 1),
//! a `u8` rank, `rank` little-endian `u32` dimensions, then the payload as
//! little-endian `f32` values in row-major order.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const GSTN_MAGIC: &[u8; 4] = b"GSTN";
pub const GSTN_VERSION: u8 = 1;

/// A dense tensor of `f64` values stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {n} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { dims: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { dims: vec![data.len()], data }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap_or(&1)
    }

    /// Product of all but the last dimension.
    pub fn rows(&self) -> usize {
        if self.data.is_empty() {
            0
        } else {
            self.data.len() / self.cols()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self { dims: vec![c, r], data: out }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Encodes as a `GSTN` blob. Values are narrowed to `f32`.
    pub fn to_gstn(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(GSTN_MAGIC);
        out.push(GSTN_VERSION);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        out
    }

    /// Decodes a complete `GSTN` blob; trailing bytes are rejected.
    pub fn from_gstn(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::read_gstn_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor payload",
                bytes.len() - used
            )));
        }
        Ok(t)
    }

    /// Decodes a `GSTN` blob from the front of `bytes`, returning the tensor
    /// and the number of bytes consumed.
    pub fn read_gstn_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 6 {
            return Err(Error::Format("truncated GSTN header".into()));
        }
        if &bytes[..4] != GSTN_MAGIC {
            return Err(Error::Format("bad magic, expected GSTN".into()));
        }
        if bytes[4] != GSTN_VERSION {
            return Err(Error::Format(format!("unsupported GSTN version {}", bytes[4])));
        }
        let rank = bytes[5] as usize;
        let header = 6 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::Format("truncated GSTN dimensions".into()));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for i in 0..rank {
            let off = 6 + 4 * i;
            let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            if d == 0 {
                return Err(Error::Format(format!("dimension {i} is zero")));
            }
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
            dims.push(d);
        }
        if rank == 0 {
            dims.push(1);
        }
        let payload = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let end = header
            .checked_add(payload)
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        if bytes.len() < end {
            return Err(Error::Format(format!(
                "truncated GSTN payload: need {payload} bytes, have {}",
                bytes.len() - header
            )));
        }
        let data = bytes[header..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((Self { dims, data }, end))
    }

    pub fn write_gstn(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_gstn())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_gstn()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_gstn(&buf)
    }

    /// Rounds every element to the nearest `f32`, the storage precision of
    /// the on-disk format.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }
}
