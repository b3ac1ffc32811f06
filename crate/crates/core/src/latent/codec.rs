use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LatentError, LatentTensor, Result};
use crate::si_transport::{SiVector, ERASED};

const LOW_PERCENTILE: f64 = 0.5;
const HIGH_PERCENTILE: f64 = 99.5;
/// Largest `digits * log2(q)` a feature may use; keeps cell indices exact in f64.
const MAX_FEATURE_BITS: f64 = 52.0;

/// Encoder/decoder pair between latent tensors and SI vectors.
pub trait LatentCodec {
    fn q(&self) -> u32;
    fn m_len(&self) -> usize;
    fn encode(&self, u: &LatentTensor) -> Result<SiVector>;
    fn decode(&self, s: &SiVector) -> Result<LatentTensor>;
}

/// Calibrated per-channel uniform quantizer with a digit allocation over
/// features.
///
/// Feature `(pos, c)` gets `base_digits` digits, plus one more if it is among
/// the first `extra_digits` features when features are ordered by channel
/// priority (highest variance first) and then by position. Digits of a
/// feature are consecutive in the SI vector, most significant first, and
/// features follow tensor storage order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerParams {
    pub version: u32,
    pub q: u32,
    pub m_len: usize,
    pub dims: [usize; 4],
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub channel_order: Vec<usize>,
    pub base_digits: usize,
    pub extra_digits: usize,
    #[serde(skip)]
    digits: Vec<u8>,
}

fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Fit per-channel bounds, means and variances on `dataset` and allocate
/// `m_len` base-`q` digits over the features.
pub fn calibrate(dataset: &[LatentTensor], q: u32, m_len: usize) -> Result<QuantizerParams> {
    let first = dataset.first().ok_or(LatentError::EmptyDataset)?;
    let dims = first.dims();
    for t in dataset {
        first.check_same_dims(t)?;
    }
    let c_count = dims[3];
    let mut lo = Vec::with_capacity(c_count);
    let mut hi = Vec::with_capacity(c_count);
    let mut mean = Vec::with_capacity(c_count);
    let mut variance = Vec::with_capacity(c_count);
    let mut vals = Vec::with_capacity(dataset.len() * first.positions());
    for c in 0..c_count {
        vals.clear();
        for t in dataset {
            vals.extend(t.data().iter().skip(c).step_by(c_count));
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        vals.sort_by(f64::total_cmp);
        let (mut l, mut h) = (percentile(&vals, LOW_PERCENTILE), percentile(&vals, HIGH_PERCENTILE));
        let guard = 4.0 * f64::EPSILON * l.abs().max(h.abs()).max(1.0);
        if h - l < guard {
            l -= guard;
            h += guard;
        }
        lo.push(l);
        hi.push(h);
        mean.push(m);
        variance.push(v);
    }
    QuantizerParams::new(q, m_len, dims, lo, hi, mean, variance)
}

impl QuantizerParams {
    /// Build from explicit per-channel statistics; the channel priority is
    /// by descending variance, ties to the lower index.
    pub fn new(
        q: u32,
        m_len: usize,
        dims: [usize; 4],
        lo: Vec<f64>,
        hi: Vec<f64>,
        mean: Vec<f64>,
        variance: Vec<f64>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(LatentError::InvalidDims(dims));
        }
        let mut channel_order: Vec<usize> = (0..dims[3].min(variance.len())).collect();
        channel_order.sort_by(|&a, &b| variance[b].total_cmp(&variance[a]).then(a.cmp(&b)));
        let features: usize = dims.iter().product();
        Self {
            version: 1,
            q,
            m_len,
            dims,
            lo,
            hi,
            mean,
            variance,
            channel_order,
            base_digits: m_len / features,
            extra_digits: m_len % features,
            digits: Vec::new(),
        }
        .finish()
    }

    /// Validate and derive the per-feature digit table.
    fn finish(mut self) -> Result<Self> {
        let c_count = self.dims[3];
        let features: usize = self.dims.iter().product();
        let bad = |m: &str| Err(LatentError::InvalidQuantizer(m.to_string()));
        if !(2..=crate::si_transport::MAX_Q).contains(&self.q) {
            return bad("q outside 2..=256");
        }
        if [&self.lo, &self.hi, &self.mean, &self.variance].iter().any(|v| v.len() != c_count) {
            return bad("per-channel vectors do not match the channel count");
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(l < h)) {
            return bad("lo must be below hi in every channel");
        }
        let mut seen = vec![false; c_count];
        for &c in &self.channel_order {
            if c >= c_count || std::mem::replace(&mut seen[c], true) {
                return bad("channel_order is not a permutation");
            }
        }
        if self.channel_order.len() != c_count {
            return bad("channel_order is not a permutation");
        }
        if self.base_digits * features + self.extra_digits != self.m_len || self.extra_digits >= features {
            return bad("digit allocation does not sum to m_len");
        }
        let max_digits = self.base_digits + usize::from(self.extra_digits > 0);
        if max_digits as f64 * f64::from(self.q).log2() > MAX_FEATURE_BITS {
            return bad("too many digits per feature");
        }
        let positions = features / c_count;
        let mut rank = vec![0usize; c_count];
        for (r, &c) in self.channel_order.iter().enumerate() {
            rank[c] = r;
        }
        self.digits = (0..features)
            .map(|f| {
                let priority = rank[f % c_count] * positions + f / c_count;
                (self.base_digits + usize::from(priority < self.extra_digits)) as u8
            })
            .collect();
        Ok(self)
    }

    /// Digits allocated to each feature, in storage order.
    pub fn digits(&self) -> &[u8] {
        &self.digits
    }

    pub fn feature_count(&self) -> usize {
        self.digits.len()
    }

    /// Width of one quantizer cell for a feature of channel `c` with `d`
    /// digits.
    pub fn cell_width(&self, c: usize, d: u8) -> f64 {
        (self.hi[c] - self.lo[c]) / f64::from(self.q).powi(i32::from(d))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("quantizer params serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text).map_err(|e| LatentError::Format(e.to_string()))?;
        if p.version != 1 {
            return Err(LatentError::Format(format!("unsupported quantizer version {}", p.version)));
        }
        p.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

impl LatentCodec for QuantizerParams {
    fn q(&self) -> u32 {
        self.q
    }

    fn m_len(&self) -> usize {
        self.m_len
    }

    /// Uniform index `floor((x - lo) / (hi - lo) * Q^d)`, clamped to the
    /// valid cells, written as `d` base-Q digits (1-based).
    fn encode(&self, u: &LatentTensor) -> Result<SiVector> {
        if u.dims() != self.dims {
            return Err(LatentError::DimMismatch(u.dims(), self.dims));
        }
        let c_count = self.dims[3];
        let q = u64::from(self.q);
        let mut out = Vec::with_capacity(self.m_len);
        for (f, (&x, &d)) in u.data().iter().zip(&self.digits).enumerate() {
            if d == 0 {
                continue;
            }
            let c = f % c_count;
            let cells = q.pow(u32::from(d));
            let t = (x - self.lo[c]) / (self.hi[c] - self.lo[c]);
            let idx = (t * cells as f64).floor().clamp(0.0, (cells - 1) as f64) as u64;
            let start = out.len();
            let mut v = idx;
            for _ in 0..d {
                out.push((v % q) as u16 + 1);
                v /= q;
            }
            out[start..].reverse();
        }
        Ok(SiVector::new(self.q, out)?)
    }

    /// Cell midpoints for intact features; the calibrated channel mean for
    /// features with an erased digit or no digits.
    fn decode(&self, s: &SiVector) -> Result<LatentTensor> {
        if s.m_len() != self.m_len || s.q() != self.q {
            return Err(LatentError::SiMismatch(format!(
                "got (M={}, Q={}), expected (M={}, Q={})",
                s.m_len(),
                s.q(),
                self.m_len,
                self.q
            )));
        }
        let c_count = self.dims[3];
        let q = u64::from(self.q);
        let sym = s.symbols();
        let mut pos = 0;
        let data = self
            .digits
            .iter()
            .enumerate()
            .map(|(f, &d)| {
                let c = f % c_count;
                let digits = &sym[pos..pos + d as usize];
                pos += d as usize;
                if d == 0 || digits.contains(&ERASED) {
                    return self.mean[c];
                }
                let idx = digits.iter().fold(0u64, |a, &x| a * q + u64::from(x - 1));
                self.lo[c] + (idx as f64 + 0.5) * self.cell_width(c, d)
            })
            .collect();
        LatentTensor::new(self.dims, data)
    }
}
