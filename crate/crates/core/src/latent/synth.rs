use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LatentError, LatentTensor, Result};
use crate::rng::{domain, Streams};

/// Gauss-Markov latent fields: unit-variance separable AR(1) noise along
/// `h`, `w` and `f`, scaled per channel by `exp(-scale_decay * c)` and shifted
/// by a per-channel mean drawn once per dataset seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dims: [usize; 4],
    pub rho_space: f64,
    pub rho_time: f64,
    pub scale_decay: f64,
    pub mean_spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { dims: [16, 16, 7, 128], rho_space: 0.8, rho_time: 0.9, scale_decay: 0.05, mean_spread: 0.5 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(LatentError::InvalidDims(self.dims));
        }
        let ok = |r: f64| (0.0..1.0).contains(&r);
        if !ok(self.rho_space) || !ok(self.rho_time) || !(self.scale_decay >= 0.0) || !(self.mean_spread >= 0.0) {
            return Err(LatentError::InvalidQuantizer(format!("invalid synthetic config {self:?}")));
        }
        Ok(())
    }

    pub fn channel_scale(&self, c: usize) -> f64 {
        (-self.scale_decay * c as f64).exp()
    }

    pub fn channel_means(&self, seed: u64) -> Vec<f64> {
        let mut rng = Streams::new(seed).rng(domain::DATASET, u64::MAX);
        (0..self.dims[3]).map(|_| self.mean_spread * rng.sample::<f64, _>(StandardNormal)).collect()
    }
}

/// In-place AR(1) filter along one axis given its stride and length.
fn ar_filter(data: &mut [f64], dims: [usize; 4], axis: usize, rho: f64) {
    let strides = [dims[1] * dims[2] * dims[3], dims[2] * dims[3], dims[3], 1];
    let (len, stride) = (dims[axis], strides[axis]);
    let innov = (1.0 - rho * rho).sqrt();
    for base in 0..data.len() {
        if (base / stride) % len != 0 {
            continue;
        }
        let mut prev = data[base];
        for k in 1..len {
            let i = base + k * stride;
            prev = rho * prev + innov * data[i];
            data[i] = prev;
        }
    }
}

/// Tensor `index` of the dataset generated from `seed`.
pub fn synth_tensor(cfg: &SynthConfig, seed: u64, index: u64) -> Result<LatentTensor> {
    cfg.validate()?;
    let mut rng = Streams::new(seed).rng(domain::DATASET, index);
    let n: usize = cfg.dims.iter().product();
    let mut data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    ar_filter(&mut data, cfg.dims, 0, cfg.rho_space);
    ar_filter(&mut data, cfg.dims, 1, cfg.rho_space);
    ar_filter(&mut data, cfg.dims, 2, cfg.rho_time);
    let means = cfg.channel_means(seed);
    let c_count = cfg.dims[3];
    let scales: Vec<f64> = (0..c_count).map(|c| cfg.channel_scale(c)).collect();
    for (i, v) in data.iter_mut().enumerate() {
        let c = i % c_count;
        *v = means[c] + scales[c] * *v;
    }
    LatentTensor::new(cfg.dims, data)
}

pub fn synth_dataset(cfg: &SynthConfig, count: usize, seed: u64) -> Result<Vec<LatentTensor>> {
    (0..count as u64).map(|i| synth_tensor(cfg, seed, i)).collect()
}
