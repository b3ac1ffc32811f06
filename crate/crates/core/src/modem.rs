//! Gray-mapped QPSK over AWGN with soft demapping.
//!
//! Labeling: the first bit of each pair drives the in-phase component, the
//! second the quadrature component, and bit 0 maps to the positive level:
//!
//! ```text
//! 00 -> ( 1 + j) / sqrt 2      10 -> (-1 + j) / sqrt 2
//! 01 -> ( 1 - j) / sqrt 2      11 -> (-1 - j) / sqrt 2
//! ```
//!
//! LLRs are positive when bit 0 is more likely.

use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModemError {
    #[error("QPSK needs an even number of bits, got {0}")]
    OddBitCount(usize),
    #[error("SNR must be positive, got {0}")]
    NonPositiveSnr(f64),
}

#[inline]
fn level(bit: u8) -> f64 {
    if bit == 0 {
        FRAC_1_SQRT_2
    } else {
        -FRAC_1_SQRT_2
    }
}

pub fn qpsk_map(bits: &[u8]) -> Result<Vec<Complex64>, ModemError> {
    if bits.len() % 2 != 0 {
        return Err(ModemError::OddBitCount(bits.len()));
    }
    Ok(bits.chunks_exact(2).map(|p| Complex64::new(level(p[0]), level(p[1]))).collect())
}

/// Hard decisions on received samples.
pub fn hard_demap(symbols: &[Complex64]) -> Vec<u8> {
    symbols
        .iter()
        .flat_map(|s| [(s.re < 0.0) as u8, (s.im < 0.0) as u8])
        .collect()
}

/// Per-bit LLRs of received samples at per-symbol SNR `snr_linear`
/// (per-dimension noise variance `1 / (2 snr)`).
pub fn demap_llr(received: &[Complex64], snr_linear: f64) -> Result<Vec<f64>, ModemError> {
    if !(snr_linear > 0.0) {
        return Err(ModemError::NonPositiveSnr(snr_linear));
    }
    let sigma2 = 1.0 / (2.0 * snr_linear);
    let scale = 2.0 * FRAC_1_SQRT_2 / sigma2;
    Ok(received.iter().flat_map(|y| [scale * y.re, scale * y.im]).collect())
}

/// Add circular Gaussian noise at `snr_linear`.
pub fn add_awgn<R: Rng + ?Sized>(symbols: &[Complex64], snr_linear: f64, rng: &mut R) -> Result<Vec<Complex64>, ModemError> {
    if !(snr_linear > 0.0) {
        return Err(ModemError::NonPositiveSnr(snr_linear));
    }
    let sd = (1.0 / (2.0 * snr_linear)).sqrt();
    Ok(symbols
        .iter()
        .map(|s| {
            let nr: f64 = rng.sample(StandardNormal);
            let ni: f64 = rng.sample(StandardNormal);
            s + Complex64::new(sd * nr, sd * ni)
        })
        .collect())
}

/// Pass symbols through AWGN and return per-bit LLRs.
pub fn awgn_llr<R: Rng + ?Sized>(symbols: &[Complex64], snr_linear: f64, rng: &mut R) -> Result<Vec<f64>, ModemError> {
    let received = add_awgn(symbols, snr_linear, rng)?;
    demap_llr(&received, snr_linear)
}
