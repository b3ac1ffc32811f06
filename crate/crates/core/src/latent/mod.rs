//! Latent tensors, a calibrated scalar-quantization codec that maps them to SI
//! vectors, synthetic datasets and quality metrics.

mod codec;
mod metrics;
mod synth;

pub use codec::{calibrate, LatentCodec, QuantizerParams};
pub use metrics::{ms_ssim, ms_ssim_with_range, psnr, vpl, Image, PerceptualMap, MS_SSIM_WEIGHTS};
pub use synth::{synth_dataset, synth_tensor, SynthConfig};

use std::io::{Read, Write};

#[derive(Debug, thiserror::Error)]
pub enum LatentError {
    #[error("invalid dimensions {0:?}")]
    InvalidDims([usize; 4]),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 4], [usize; 4]),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid quantizer: {0}")]
    InvalidQuantizer(String),
    #[error("SI vector mismatch: {0}")]
    SiMismatch(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Si(#[from] crate::si_transport::SiError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LatentError>;

/// Real tensor with dimensions `(h, w, f, c)`, stored row-major with the
/// channel index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(LatentError::InvalidDims(dims));
        }
        let expected = dims.iter().product();
        if data.len() != expected {
            return Err(LatentError::LengthMismatch { expected, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LatentError::NonFinite(i));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Result<Self> {
        Self::new(dims, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    pub fn channels(&self) -> usize {
        self.dims[3]
    }
    /// Number of `(h, w, f)` positions.
    pub fn positions(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn index(&self, h: usize, w: usize, f: usize, c: usize) -> usize {
        let [_, dw, df, dc] = self.dims;
        ((h * dw + w) * df + f) * dc + c
    }
    pub fn get(&self, h: usize, w: usize, f: usize, c: usize) -> f64 {
        self.data[self.index(h, w, f, c)]
    }
    pub fn set(&mut self, h: usize, w: usize, f: usize, c: usize, v: f64) {
        let i = self.index(h, w, f, c);
        self.data[i] = v;
    }

    /// Mean of the squared entries.
    pub fn power(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    pub fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(LatentError::DimMismatch(self.dims, other.dims));
        }
        Ok(())
    }

    /// Flat little-endian format: magic `GSCL`, version u16, four u64 dims,
    /// then the values as f64 in storage order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"GSCL")?;
        w.write_all(&1u16.to_le_bytes())?;
        for d in self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 38];
        r.read_exact(&mut head).map_err(|_| LatentError::Format("truncated header".into()))?;
        if &head[..4] != b"GSCL" {
            return Err(LatentError::Format("bad magic".into()));
        }
        if u16::from_le_bytes([head[4], head[5]]) != 1 {
            return Err(LatentError::Format("unsupported version".into()));
        }
        let mut dims = [0usize; 4];
        for (k, d) in dims.iter_mut().enumerate() {
            *d = u64::from_le_bytes(head[6 + 8 * k..14 + 8 * k].try_into().unwrap()) as usize;
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(LatentError::InvalidDims(dims))?;
        let mut buf = vec![0u8; 8 * n];
        r.read_exact(&mut buf).map_err(|_| LatentError::Format("truncated values".into()))?;
        let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(dims, data)
    }
}
