//! Sparse binary LDPC codes: construction, alist ingestion, systematic
//! encoding, sum-product decoding and Monte Carlo block error rate curves.

mod alist;
mod bler;
mod construct;
mod decoder;
mod encoder;
pub mod gf2;
mod matrix;

pub use alist::{load_alist, parse_alist, to_alist, AlistError};
pub use bler::{
    bler_lookup, check_monotone, estimate_bler, estimate_curve, BlerCache, BlerCurve, BlerPoint, MonotonicityReport,
};
pub use construct::generate_regular_code;
pub use decoder::{BpDecoder, DecodeOutcome, DEFAULT_MAX_ITERS, LLR_CLIP};
pub use encoder::Encoder;
pub use matrix::ParityCheckMatrix;

use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum LdpcError {
    #[error(transparent)]
    Alist(#[from] AlistError),
    #[error("infeasible degree profile: {0}")]
    InfeasibleProfile(String),
    #[error("invalid parity-check matrix: {0}")]
    InvalidMatrix(String),
    #[error("expected {expected} information bits, got {got}")]
    InfoLength { expected: usize, got: usize },
    #[error("expected {expected} LLRs, got {got}")]
    LlrLength { expected: usize, got: usize },
    #[error("BLER curve is empty")]
    EmptyCurve,
    #[error("invalid BLER curve: {0}")]
    InvalidCurve(String),
    #[error("at least one trial is required")]
    NoTrials,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LdpcError>;

/// A parity-check matrix bundled with its encoder and an identifier used for
/// cache keys and reporting.
#[derive(Debug, Clone)]
pub struct LdpcCode {
    id: String,
    h: Arc<ParityCheckMatrix>,
    encoder: Arc<Encoder>,
}

impl LdpcCode {
    pub fn new(id: impl Into<String>, h: ParityCheckMatrix) -> Self {
        let encoder = Encoder::new(&h);
        Self { id: id.into(), h: Arc::new(h), encoder: Arc::new(encoder) }
    }

    /// Regular code from [`generate_regular_code`] with a descriptive id.
    pub fn regular(n: usize, wc: usize, wr: usize, seed: u64) -> Result<Self> {
        let h = generate_regular_code(n, wc, wr, seed)?;
        Ok(Self::new(format!("regular-n{n}-wc{wc}-wr{wr}-s{seed}"), h))
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn h(&self) -> &ParityCheckMatrix {
        &self.h
    }
    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }
    /// Block length in bits.
    pub fn n(&self) -> usize {
        self.h.cols()
    }
    /// Information bits per block, `n - rank(H)`.
    pub fn k(&self) -> usize {
        self.encoder.k()
    }
    pub fn rate(&self) -> f64 {
        self.k() as f64 / self.n() as f64
    }
}
