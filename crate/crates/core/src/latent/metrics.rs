use rand::Rng;
use rand_distr::StandardNormal;

use super::{LatentError, LatentTensor, Result};
use crate::rng::{domain, stream};

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Mean squared difference between two latent tensors.
pub fn vpl(u: &LatentTensor, u_hat: &LatentTensor) -> Result<f64> {
    u.check_same_dims(u_hat)?;
    let sum: f64 = u.data().iter().zip(u_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / u.len() as f64)
}

/// `10 log10(peak^2 / MSE)`; `+inf` for identical inputs.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(LatentError::InvalidImage(format!("lengths {} and {}", a.len(), b.len())));
    }
    if !(peak > 0.0) {
        return Err(LatentError::InvalidImage(format!("peak {peak} must be positive")));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(LatentError::InvalidImage(format!("{height}x{width} with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    /// 2x2 average pooling, dropping an odd trailing row or column.
    fn downsample(&self) -> Self {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let s = self.at(2 * r, 2 * c) + self.at(2 * r + 1, 2 * c) + self.at(2 * r, 2 * c + 1) + self.at(2 * r + 1, 2 * c + 1);
                data.push(0.25 * s);
            }
        }
        Self { height: h, width: w, data }
    }
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - mid).powi(2) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Separable "valid" filtering.
fn filter(img: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..n).map(|i| k[i] * img[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean luminance and contrast-structure terms at one scale.
fn ssim_terms(a: &Image, b: &Image, win: &[f64], peak: f64) -> (f64, f64) {
    let (h, w) = (a.height, a.width);
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (mu_a, _, _) = filter(&a.data, h, w, win);
    let (mu_b, _, _) = filter(&b.data, h, w, win);
    let (saa, _, _) = filter(&prod(&a.data, &a.data), h, w, win);
    let (sbb, _, _) = filter(&prod(&b.data, &b.data), h, w, win);
    let (sab, _, _) = filter(&prod(&a.data, &b.data), h, w, win);
    let n = mu_a.len() as f64;
    let (mut l_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = saa[i] - ma * ma;
        let vb = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        l_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs_sum += (2.0 * cov + c2) / (va + vb + c2);
    }
    (l_sum / n, cs_sum / n)
}

/// Multi-scale SSIM for images with values in `[0, 1]`.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    ms_ssim_with_range(a, b, 1.0)
}

/// Multi-scale SSIM with dynamic range `peak`. Five dyadic scales need both
/// sides at least 176; smaller inputs use fewer scales with the leading
/// weights renormalized, and inputs under 11 pixels shrink the window.
pub fn ms_ssim_with_range(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(LatentError::InvalidImage(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if !(peak > 0.0) {
        return Err(LatentError::InvalidImage(format!("peak {peak} must be positive")));
    }
    let min_dim = a.height.min(a.width);
    let mut scales = 1;
    while scales < 5 && min_dim >> scales >= WINDOW {
        scales += 1;
    }
    let win_size = if min_dim >= WINDOW { WINDOW } else if min_dim % 2 == 1 { min_dim } else { min_dim - 1 };
    let win = gaussian_window(win_size);
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut result = 1.0;
    for (s, &wt) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let (l, cs) = ssim_terms(&x, &y, &win, peak);
        let wt = wt / total;
        result *= cs.max(0.0).powf(wt);
        if s + 1 == scales {
            result *= l.max(0.0).powf(wt);
        } else {
            x = x.downsample();
            y = y.downsample();
        }
    }
    Ok(result)
}

/// Fixed random linear map applied to the channel vector at every position,
/// with orthonormal rows. With `out_dim == C` it is an orthogonal map and
/// preserves squared distances.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualMap {
    in_dim: usize,
    out_dim: usize,
    rows: Vec<f64>,
}

impl PerceptualMap {
    pub fn identity(dim: usize) -> Self {
        let mut rows = vec![0.0; dim * dim];
        for i in 0..dim {
            rows[i * dim + i] = 1.0;
        }
        Self { in_dim: dim, out_dim: dim, rows }
    }

    /// Gram-Schmidt on Gaussian rows.
    pub fn random(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if out_dim == 0 || out_dim > in_dim {
            return Err(LatentError::InvalidQuantizer(format!("projection {in_dim} -> {out_dim}")));
        }
        let mut rng = stream(seed, domain::PROJECTION, 0);
        let mut rows: Vec<f64> = Vec::with_capacity(in_dim * out_dim);
        while rows.len() < in_dim * out_dim {
            let mut v: Vec<f64> = (0..in_dim).map(|_| rng.sample(StandardNormal)).collect();
            for r in rows.chunks(in_dim) {
                let d: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(x, a)| *x -= d * a);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                rows.extend(v.iter().map(|x| x / norm));
            }
        }
        Ok(Self { in_dim, out_dim, rows })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Mapped tensor with `out_dim` channels.
    pub fn apply(&self, u: &LatentTensor) -> Result<LatentTensor> {
        if u.channels() != self.in_dim {
            return Err(LatentError::InvalidQuantizer(format!("map expects {} channels, got {}", self.in_dim, u.channels())));
        }
        let mut out = Vec::with_capacity(u.positions() * self.out_dim);
        for v in u.data().chunks(self.in_dim) {
            for r in self.rows.chunks(self.in_dim) {
                out.push(r.iter().zip(v).map(|(a, b)| a * b).sum());
            }
        }
        let [h, w, f, _] = u.dims();
        LatentTensor::new([h, w, f, self.out_dim], out)
    }

    /// VPL measured after the map.
    pub fn vpl(&self, u: &LatentTensor, u_hat: &LatentTensor) -> Result<f64> {
        vpl(&self.apply(u)?, &self.apply(u_hat)?)
    }
}
