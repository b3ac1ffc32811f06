//! Shadowed-Rician fading and the amplify-and-forward satellite relay.
//!
//! The uplink gain `H_ts = eta_t * |h_ts|^2` follows the shadowed-Rician law
//! whose density, for integer shadowing order `m`, is the finite series
//!
//! ```text
//! f(z) = Lambda * sum_{k=0}^{m-1} zeta(k) / eta^(k+1) * z^k * exp(-(beta - delta) z / eta)
//! ```
//!
//! Samples are drawn from the physical model instead: a Nakagami-m
//! line-of-sight amplitude with spread `omega` plus a circular Gaussian
//! scatter term of total variance `2b`. The density and the sampler are
//! independent routes to the same distribution and are checked against each
//! other in the tests.
//!
//! All SNR arithmetic is linear; decibels appear only at I/O boundaries.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::quad;
use crate::rng::{domain, Streams};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ChannelError {
    #[error("invalid fading parameters: {0}")]
    InvalidFading(String),
    #[error("invalid link budget: {0}")]
    InvalidBudget(String),
    #[error("scale factor eta must be positive, got {0}")]
    InvalidScale(f64),
    #[error("gain value must be non-negative, got {0}")]
    NegativeGain(f64),
    #[error("at least one sample is required")]
    NoSamples,
}

pub type Result<T> = std::result::Result<T, ChannelError>;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * db_to_linear(dbm)
}

/// Shadowed-Rician shape parameters together with the series coefficients of
/// the gain density.
#[derive(Debug, Clone, PartialEq)]
pub struct FadingParams {
    m: u32,
    b: f64,
    omega: f64,
    lambda: f64,
    beta: f64,
    delta: f64,
    zeta: Vec<f64>,
}

impl FadingParams {
    pub fn new(m: u32, b: f64, omega: f64) -> Result<Self> {
        if m < 1 {
            return Err(ChannelError::InvalidFading(format!("m must be >= 1, got {m}")));
        }
        if !(b > 0.0) || !b.is_finite() {
            return Err(ChannelError::InvalidFading(format!("b must be > 0, got {b}")));
        }
        if !(omega >= 0.0) || !omega.is_finite() {
            return Err(ChannelError::InvalidFading(format!("omega must be >= 0, got {omega}")));
        }
        let mf = m as f64;
        let two_b = 2.0 * b;
        let lambda = (two_b * mf / (two_b * mf + omega)).powi(m as i32) / two_b;
        let beta = 1.0 / two_b;
        let delta = omega / (two_b * (two_b * mf + omega));
        // zeta(k) = (-1)^k (1-m)_k delta^k / (k!)^2, built incrementally:
        // zeta(k+1) / zeta(k) = -(1 - m + k) * delta / (k+1)^2.
        let mut zeta = Vec::with_capacity(m as usize);
        let mut z = 1.0;
        for k in 0..m {
            zeta.push(z);
            let kf = k as f64;
            z *= -(1.0 - mf + kf) * delta / ((kf + 1.0) * (kf + 1.0));
        }
        Ok(Self { m, b, omega, lambda, beta, delta, zeta })
    }

    /// Parameters used for the Ku-band LEO evaluation (m = 2, b = 0.063,
    /// omega = 0.0005).
    pub fn leo_default() -> Self {
        Self::new(2, 0.063, 0.0005).expect("valid defaults")
    }

    pub fn m(&self) -> u32 {
        self.m
    }
    pub fn b(&self) -> f64 {
        self.b
    }
    pub fn omega(&self) -> f64 {
        self.omega
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    /// `E[|h|^2]` of the physical model: scatter power plus LOS power.
    pub fn mean_power(&self) -> f64 {
        2.0 * self.b + self.omega
    }
}

/// Density of `H = eta * |h|^2` at `z`.
pub fn pdf_gain(params: &FadingParams, eta: f64, z: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(ChannelError::InvalidScale(eta));
    }
    if !(z >= 0.0) {
        return Err(ChannelError::NegativeGain(z));
    }
    Ok(pdf_unchecked(params, eta, z))
}

fn pdf_unchecked(params: &FadingParams, eta: f64, z: f64) -> f64 {
    let x = z / eta;
    let mut poly = 0.0;
    let mut xk = 1.0;
    for zeta in &params.zeta {
        poly += zeta * xk;
        xk *= x;
    }
    (params.lambda / eta * poly * (-(params.beta - params.delta) * x).exp()).max(0.0)
}

/// Closed-form CDF of `H = eta * |h|^2`, using the integer-order lower
/// incomplete gamma function term by term.
pub fn cdf_gain(params: &FadingParams, eta: f64, z: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(ChannelError::InvalidScale(eta));
    }
    if !(z >= 0.0) {
        return Err(ChannelError::NegativeGain(z));
    }
    let rate = params.beta - params.delta;
    let x = rate * z / eta;
    let mut total = 0.0;
    for (k, zeta) in params.zeta.iter().enumerate() {
        // gamma(k+1, x) = k! * (1 - e^-x * sum_{j<=k} x^j / j!)
        let mut term = 1.0;
        let mut partial = 1.0;
        let mut fact = 1.0;
        for j in 1..=k {
            term *= x / j as f64;
            partial += term;
            fact *= j as f64;
        }
        let lower = fact * (1.0 - (-x).exp() * partial);
        total += zeta * lower / rate.powi(k as i32 + 1);
    }
    Ok((params.lambda * total).clamp(0.0, 1.0))
}

/// Upper integration limit beyond which the density carries less than
/// `tail` probability mass.
fn upper_limit(params: &FadingParams, eta: f64, tail: f64) -> f64 {
    let scale = eta / (params.beta - params.delta);
    let mut upper = scale * (params.m as f64 + 1.0);
    loop {
        let mass = quad::integrate(|z| pdf_unchecked(params, eta, z), upper, 8.0 * upper, 1e-6, 1e-18);
        if mass < tail && pdf_unchecked(params, eta, upper) * upper < tail {
            return upper;
        }
        upper *= 2.0;
    }
}

/// `E[H]` by adaptive quadrature of the series density (relative tolerance
/// 1e-8, truncated where the tail mass drops below 1e-12).
pub fn mean_gain(params: &FadingParams, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(ChannelError::InvalidScale(eta));
    }
    let upper = upper_limit(params, eta, 1e-12);
    Ok(quad::integrate(|z| z * pdf_unchecked(params, eta, z), 0.0, upper, 1e-8, 1e-300))
}

/// Draw one realization of `eta * |h|^2` from the physical model.
pub fn sample_gain<R: Rng + ?Sized>(params: &FadingParams, eta: f64, rng: &mut R) -> f64 {
    // Nakagami-m LOS power with spread omega: Gamma(m, omega/m), drawn as a
    // sum of m exponentials.
    let mut los_power = 0.0;
    if params.omega > 0.0 {
        let mean_each = params.omega / params.m as f64;
        for _ in 0..params.m {
            let u: f64 = rng.random();
            los_power -= mean_each * (1.0 - u).ln();
        }
    }
    let amplitude = los_power.sqrt();
    let phase = 2.0 * PI * rng.random::<f64>();
    let sd = params.b.sqrt();
    let zr: f64 = rng.sample::<f64, _>(StandardNormal) * sd;
    let zi: f64 = rng.sample::<f64, _>(StandardNormal) * sd;
    let re = amplitude * phase.cos() + zr;
    let im = amplitude * phase.sin() + zi;
    eta * (re * re + im * im)
}

/// `n` gain samples from a seeded stream family, generated in parallel chunks.
pub fn sample_gains(params: &FadingParams, eta: f64, n: usize, seed: u64) -> Vec<f64> {
    const CHUNK: usize = 4096;
    let streams = Streams::new(seed);
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = streams.rng(domain::FADING, c as u64);
            let len = CHUNK.min(n - c * CHUNK);
            (0..len).map(move |_| sample_gain(params, eta, &mut rng)).collect::<Vec<_>>()
        })
        .collect()
}

/// Powers, gains and geometry of the two-hop relay link. All quantities are
/// linear (W, m, dimensionless).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    /// User transmit power.
    pub p_t: f64,
    /// Satellite maximum (forwarding) power.
    pub p_s: f64,
    pub g_t: f64,
    pub g_s: f64,
    pub g_r: f64,
    /// Carrier wavelength.
    pub lambda_c: f64,
    /// Path-loss exponent.
    pub alpha: f64,
    pub d_ts: f64,
    pub d_sr: f64,
    pub sigma2_s: f64,
    pub sigma2_r: f64,
}

impl LinkBudget {
    /// Ku-band defaults: 2.8 cm carrier, 1 W user, 30 W satellite, 3 dBi user
    /// antenna, 50 dBi satellite and ground antennas, -98 dBm noise, free-space
    /// exponent, both hops at `distance_m`.
    pub fn ku_band(distance_m: f64) -> Self {
        Self {
            p_t: 1.0,
            p_s: 30.0,
            g_t: db_to_linear(3.0),
            g_s: db_to_linear(50.0),
            g_r: db_to_linear(50.0),
            lambda_c: 0.028,
            alpha: 2.0,
            d_ts: distance_m,
            d_sr: distance_m,
            sigma2_s: dbm_to_watts(-98.0),
            sigma2_r: dbm_to_watts(-98.0),
        }
    }

    pub fn with_distance(&self, distance_m: f64) -> Self {
        Self { d_ts: distance_m, d_sr: distance_m, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("p_t", self.p_t),
            ("p_s", self.p_s),
            ("g_t", self.g_t),
            ("g_s", self.g_s),
            ("g_r", self.g_r),
            ("lambda_c", self.lambda_c),
            ("alpha", self.alpha),
            ("d_ts", self.d_ts),
            ("d_sr", self.d_sr),
            ("sigma2_s", self.sigma2_s),
            ("sigma2_r", self.sigma2_r),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ChannelError::InvalidBudget(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Uplink scale `eta_t = P_t G_t G_s (lambda/4pi)^alpha / sigma_s^2`.
    pub fn eta_t(&self) -> f64 {
        self.p_t * self.g_t * self.g_s * (self.lambda_c / (4.0 * PI)).powf(self.alpha) / self.sigma2_s
    }

    /// Downlink scale `eta_r = P_s G_s G_r (lambda/4pi)^alpha / sigma_r^2`, the
    /// normalisation under which `H_sr` enters the end-to-end SNR.
    pub fn eta_r(&self) -> f64 {
        self.p_s * self.g_s * self.g_r * (self.lambda_c / (4.0 * PI)).powf(self.alpha) / self.sigma2_r
    }
}

/// One draw of the two-hop channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrSample {
    pub h_ts: f64,
    pub h_sr: f64,
    pub gamma_tr: f64,
}

/// Relay amplification ratio `Psi = sqrt(P_s / (H_bar d_ts^-alpha sigma_s^2 + sigma_s^2))`.
pub fn amplification_ratio(budget: &LinkBudget, mean_gain: f64) -> Result<f64> {
    budget.validate()?;
    if !(mean_gain >= 0.0) {
        return Err(ChannelError::NegativeGain(mean_gain));
    }
    let s2 = budget.sigma2_s;
    Ok((budget.p_s / (mean_gain * budget.d_ts.powf(-budget.alpha) * s2 + s2)).sqrt())
}

/// End-to-end SNR of the amplify-and-forward link for gain realizations
/// `h_ts`, `h_sr` and amplification `psi`.
pub fn end_to_end_snr(budget: &LinkBudget, h_ts: f64, h_sr: f64, psi: f64) -> f64 {
    let path_ts = budget.d_ts.powf(-budget.alpha);
    let path_sr = budget.d_sr.powf(-budget.alpha);
    let relay = psi * psi * budget.sigma2_s * budget.sigma2_r / budget.p_s;
    let num = path_ts * path_sr * h_ts * h_sr * relay;
    let den = path_sr * h_sr * relay + budget.sigma2_r;
    num / den
}

/// The full relay: budget, per-hop fading and the amplification ratio derived
/// from the mean uplink gain.
#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteLink {
    budget: LinkBudget,
    uplink: FadingParams,
    downlink: FadingParams,
    psi: f64,
}

impl SatelliteLink {
    pub fn new(budget: LinkBudget, uplink: FadingParams, downlink: FadingParams) -> Result<Self> {
        budget.validate()?;
        let h_bar = mean_gain(&uplink, budget.eta_t())?;
        let psi = amplification_ratio(&budget, h_bar)?;
        Ok(Self { budget, uplink, downlink, psi })
    }

    /// Both hops share the same fading parameters.
    pub fn symmetric(budget: LinkBudget, fading: FadingParams) -> Result<Self> {
        Self::new(budget, fading.clone(), fading)
    }

    pub fn budget(&self) -> &LinkBudget {
        &self.budget
    }
    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SnrSample {
        let h_ts = sample_gain(&self.uplink, self.budget.eta_t(), rng);
        let h_sr = sample_gain(&self.downlink, self.budget.eta_r(), rng);
        SnrSample { h_ts, h_sr, gamma_tr: end_to_end_snr(&self.budget, h_ts, h_sr, self.psi) }
    }
}

/// Empirical CDF of the end-to-end SNR: sorted `(gamma_db, probability)`
/// pairs from `n_samples` independent channel draws.
pub fn snr_cdf(link: &SatelliteLink, n_samples: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if n_samples == 0 {
        return Err(ChannelError::NoSamples);
    }
    const CHUNK: usize = 4096;
    let streams = Streams::new(seed);
    let chunks = n_samples.div_ceil(CHUNK);
    let mut gammas: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = streams.rng(domain::SNR_CDF, c as u64);
            let len = CHUNK.min(n_samples - c * CHUNK);
            (0..len).map(move |_| link.sample(&mut rng).gamma_tr).collect::<Vec<_>>()
        })
        .collect();
    gammas.sort_by(f64::total_cmp);
    let n = n_samples as f64;
    Ok(gammas
        .into_iter()
        .enumerate()
        .map(|(i, g)| (linear_to_db(g), (i + 1) as f64 / n))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn rejects_invalid_params() {
        assert!(FadingParams::new(0, 0.1, 0.1).is_err());
        assert!(FadingParams::new(2, 0.0, 0.1).is_err());
        assert!(FadingParams::new(2, 0.1, -1.0).is_err());
        let p = FadingParams::leo_default();
        assert!(pdf_gain(&p, 0.0, 1.0).is_err());
        assert!(pdf_gain(&p, 1.0, -1.0).is_err());
    }

    #[test]
    fn pdf_at_zero_is_lambda_over_eta() {
        let p = FadingParams::leo_default();
        for eta in [1.0, 3.5] {
            let v = pdf_gain(&p, eta, 0.0).unwrap();
            assert!((v - p.lambda() / eta).abs() < 1e-15);
        }
    }

    #[test]
    fn zeta_matches_pochhammer_definition() {
        let p = FadingParams::new(4, 0.2, 0.7).unwrap();
        let d = p.delta();
        // (1-m)_k for m = 4: 1, -3, 6, -6
        let poch = [1.0, -3.0, 6.0, -6.0];
        let fact = [1.0, 1.0, 2.0, 6.0];
        for k in 0..4 {
            let want = (-1f64).powi(k as i32) * poch[k] * d.powi(k as i32) / (fact[k] * fact[k]);
            assert!((p.zeta()[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn omega_zero_reduces_to_exponential() {
        let p = FadingParams::new(3, 0.25, 0.0).unwrap();
        let eta: f64 = 2.0;
        let mean = 2.0 * 0.25 * eta;
        for z in [0.0, 0.3, 1.0, 4.0] {
            let want = (-z / mean).exp() / mean;
            assert!((pdf_gain(&p, eta, z).unwrap() - want).abs() < 1e-14);
        }
        let samples = sample_gains(&p, eta, 200_000, 9);
        let m = samples.iter().sum::<f64>() / samples.len() as f64;
        assert!((m - mean).abs() / mean < 0.01, "{m}");
    }

    #[test]
    fn cdf_is_consistent_with_mean_gain() {
        let p = FadingParams::leo_default();
        assert_eq!(cdf_gain(&p, 1.0, 0.0).unwrap(), 0.0);
        assert!((cdf_gain(&p, 1.0, 10.0).unwrap() - 1.0).abs() < 1e-12);
        let mean = mean_gain(&p, 1.0).unwrap();
        assert!((mean - 0.1265).abs() < 1e-6, "{mean}");
    }

    #[test]
    fn amplification_limits() {
        let b = LinkBudget::ku_band(600e3);
        let psi0 = amplification_ratio(&b, 0.0).unwrap();
        assert!((psi0 - (b.p_s / b.sigma2_s).sqrt()).abs() / psi0 < 1e-15);
        let doubled = LinkBudget { p_s: 2.0 * b.p_s, ..b.clone() };
        let r = amplification_ratio(&doubled, 3.0).unwrap() / amplification_ratio(&b, 3.0).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
        let bad = LinkBudget { sigma2_s: 0.0, ..b };
        assert!(amplification_ratio(&bad, 1.0).is_err());
    }

    #[test]
    fn snr_limits() {
        let b = LinkBudget::ku_band(600e3);
        let psi = amplification_ratio(&b, 1.0).unwrap();
        assert_eq!(end_to_end_snr(&b, 0.0, 5.0, psi), 0.0);
        let h_ts = 2.0e12;
        let limit = b.d_ts.powf(-b.alpha) * h_ts;
        let g = end_to_end_snr(&b, h_ts, 1e30, psi);
        assert!((g - limit).abs() / limit < 1e-9);
    }

    #[test]
    fn snr_is_monotone_in_both_gains() {
        let b = LinkBudget::ku_band(800e3);
        let link = SatelliteLink::symmetric(b.clone(), FadingParams::leo_default()).unwrap();
        let mut rng = stream(3, 99, 0);
        for _ in 0..2000 {
            let x: f64 = rng.random::<f64>() * 1e12;
            let y: f64 = rng.random::<f64>() * 1e12;
            let s: f64 = rng.random::<f64>() * 1e12;
            let (lo, hi) = if x < y { (x, y) } else { (y, x) };
            assert!(end_to_end_snr(&b, lo, s, link.psi()) <= end_to_end_snr(&b, hi, s, link.psi()));
            assert!(end_to_end_snr(&b, s, lo, link.psi()) <= end_to_end_snr(&b, s, hi, link.psi()));
        }
    }

    #[test]
    fn snr_cdf_is_sorted_and_deterministic() {
        let link = SatelliteLink::symmetric(LinkBudget::ku_band(600e3), FadingParams::leo_default()).unwrap();
        let a = snr_cdf(&link, 5000, 11).unwrap();
        let b = snr_cdf(&link, 5000, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 < w[1].1));
        assert_eq!(a.last().unwrap().1, 1.0);
        assert!(snr_cdf(&link, 0, 1).is_err());
        let one = snr_cdf(&link, 1, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].1, 1.0);
    }
}
