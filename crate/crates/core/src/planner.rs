//! Capacity-constrained choice of quantization level `Q` and SI length `M`.

use std::path::Path;

use num_bigint::BigUint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::latent::{calibrate, vpl, LatentCodec, LatentError, LatentTensor};
use crate::rng::{domain, Streams};
use crate::si_transport::{partition, transmit, BlockSpec, ChannelMode, MaskMode, SiError};
use crate::stats::mean_ci;

pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("invalid plan config: {0}")]
    InvalidConfig(String),
    #[error("no feasible M for q={q}: budget {budget} bits < g*log2(q)")]
    Infeasible { q: u32, budget: u64 },
    #[error("no feasible candidate among {0:?}")]
    NoFeasibleCandidate(Vec<u32>),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("at least one trial is required")]
    NoTrials,
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Si(#[from] SiError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, PlanError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub b_blocks: usize,
    pub block_bits: usize,
    pub rate: f64,
    pub granularity: usize,
    pub q_candidates: Vec<u32>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { b_blocks: 85, block_bits: 16_200, rate: 0.5, granularity: 16 * 16 * 7, q_candidates: vec![2, 3, 4, 5] }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PlanError::InvalidConfig(m));
        if self.b_blocks == 0 || self.block_bits == 0 {
            return bad(format!("B={} and K={} must be positive", self.b_blocks, self.block_bits));
        }
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return bad(format!("rate {} outside (0, 1]", self.rate));
        }
        if self.granularity == 0 {
            return bad("granularity must be >= 1".into());
        }
        if let Some(q) = self.q_candidates.iter().find(|&&q| !(2..=crate::si_transport::MAX_Q).contains(&q)) {
            return bad(format!("candidate q={q} outside 2..=256"));
        }
        Ok(())
    }

    pub fn block_spec(&self) -> BlockSpec {
        BlockSpec::from_rate(self.block_bits, self.rate)
    }

    /// Total information bits `B * floor(K * R)`.
    pub fn budget_bits(&self) -> u64 {
        (self.b_blocks * self.block_spec().info_bits) as u64
    }
}

/// Exact test of `m * log2(q) <= budget`, i.e. `q^m <= 2^budget`.
pub fn fits_budget(q: u32, m: u64, budget: u64) -> bool {
    if q.is_power_of_two() {
        return m * u64::from(q.trailing_zeros()) <= budget;
    }
    let approx = m as f64 * f64::from(q).log2() - budget as f64;
    if approx.abs() > 1e-3 * (1.0 + budget as f64 * 1e-9) {
        return approx < 0.0;
    }
    BigUint::from(q).pow(m as u32).bits() <= budget
}

/// Largest multiple of `g` whose SI vector fits the bit budget.
pub fn m_star(q: u32, cfg: &PlanConfig) -> Result<usize> {
    cfg.validate()?;
    if q < 2 {
        return Err(PlanError::InvalidConfig(format!("q={q} must be >= 2")));
    }
    let budget = cfg.budget_bits();
    let g = cfg.granularity as u64;
    let mut k = (budget as f64 / f64::from(q).log2() / g as f64).floor() as u64;
    while k > 0 && !fits_budget(q, k * g, budget) {
        k -= 1;
    }
    while fits_budget(q, (k + 1) * g, budget) {
        k += 1;
    }
    if k == 0 {
        return Err(PlanError::Infeasible { q, budget });
    }
    Ok((k * g) as usize)
}

/// Monte Carlo estimate of the mean per-element squared latent error.
#[derive(Debug, Clone, PartialEq)]
pub struct JEstimate {
    pub mean: f64,
    pub half_width: f64,
    pub trials: usize,
}

impl JEstimate {
    fn from_samples(samples: &[f64]) -> Self {
        let (mean, half_width) = mean_ci(samples);
        Self { mean, half_width, trials: samples.len() }
    }
    pub fn ci_low(&self) -> f64 {
        self.mean - self.half_width
    }
    pub fn ci_high(&self) -> f64 {
        self.mean + self.half_width
    }
}

/// Per-trial squared errors for trials `start..end`. Trial `t` uses dataset
/// tensor `t mod D` and channel seed derived from `(seed, t)` alone, so
/// different `q` see the same channel realizations.
fn j_samples(
    q: u32,
    m: usize,
    cfg: &PlanConfig,
    mode: &ChannelMode,
    dataset: &[LatentTensor],
    range: std::ops::Range<u64>,
    seed: u64,
) -> Result<Vec<f64>> {
    let codec = calibrate(dataset, q, m)?;
    let layout = partition(m, cfg.b_blocks, q, cfg.block_spec(), MaskMode::Contiguous)?;
    let streams = Streams::new(seed);
    range
        .into_par_iter()
        .map(|t| {
            let u = &dataset[(t % dataset.len() as u64) as usize];
            let s = codec.encode(u)?;
            let channel_seed = streams.child(domain::PLANNER_TRIAL, t).seed();
            let (rx, _) = transmit(&s, &layout, mode, channel_seed)?;
            Ok(vpl(u, &codec.decode(&rx)?)?)
        })
        .collect()
}

/// `J(q, m)`: mean latent MSE through calibrate, encode, transmit and decode.
pub fn j_estimate(
    q: u32,
    m: usize,
    cfg: &PlanConfig,
    mode: &ChannelMode,
    dataset: &[LatentTensor],
    n_trials: usize,
    seed: u64,
) -> Result<JEstimate> {
    if dataset.is_empty() {
        return Err(PlanError::EmptyDataset);
    }
    if n_trials == 0 {
        return Err(PlanError::NoTrials);
    }
    let samples = j_samples(q, m, cfg, mode, dataset, 0..n_trials as u64, seed)?;
    Ok(JEstimate::from_samples(&samples))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanRow {
    pub q: u32,
    pub m_star: usize,
    pub j: JEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub rows: Vec<PlanRow>,
    pub q_star: u32,
    pub m_star: usize,
    /// Candidates skipped because no `M` fits the budget.
    pub infeasible: Vec<u32>,
}

#[derive(Serialize)]
struct PlanCsvRow {
    schema_version: u32,
    q: u32,
    m_star: usize,
    j_mean: f64,
    ci_low: f64,
    ci_high: f64,
    trials: usize,
    chosen: bool,
}

impl PlanResult {
    pub fn row(&self, q: u32) -> Option<&PlanRow> {
        self.rows.iter().find(|r| r.q == q)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        for r in &self.rows {
            w.serialize(PlanCsvRow {
                schema_version: CSV_SCHEMA_VERSION,
                q: r.q,
                m_star: r.m_star,
                j_mean: r.j.mean,
                ci_low: r.j.ci_low(),
                ci_high: r.j.ci_high(),
                trials: r.j.trials,
                chosen: r.q == self.q_star,
            })?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path).map_err(csv::Error::from)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QStarOptions {
    pub n_trials: usize,
    /// Stop once the leader is separated from every other candidate by two
    /// CI half-widths; trials are added in batches of this size.
    pub early_stop_batch: Option<usize>,
}

impl QStarOptions {
    pub fn fixed(n_trials: usize) -> Self {
        Self { n_trials, early_stop_batch: None }
    }
}

/// Index of the smallest mean; ties go to the earlier (smaller) `q`.
pub fn argmin_index(means: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &m) in means.iter().enumerate() {
        if best.is_none_or(|b| m < means[b]) {
            best = Some(i);
        }
    }
    best
}

fn separated(rows: &[(u32, usize, Vec<f64>)], best: usize) -> bool {
    let est: Vec<JEstimate> = rows.iter().map(|r| JEstimate::from_samples(&r.2)).collect();
    est.iter().enumerate().all(|(i, e)| {
        i == best || e.mean - est[best].mean > 2.0 * e.half_width.max(est[best].half_width)
    })
}

/// Enumerate candidates, estimate `J(q, M*(q))` for each and pick the argmin.
pub fn q_star(
    cfg: &PlanConfig,
    mode: &ChannelMode,
    dataset: &[LatentTensor],
    opts: QStarOptions,
    seed: u64,
) -> Result<PlanResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(PlanError::EmptyDataset);
    }
    if opts.n_trials == 0 {
        return Err(PlanError::NoTrials);
    }
    let mut cands = cfg.q_candidates.clone();
    cands.sort_unstable();
    cands.dedup();
    let mut infeasible = Vec::new();
    let mut rows: Vec<(u32, usize, Vec<f64>)> = Vec::new();
    for &q in &cands {
        match m_star(q, cfg) {
            Ok(m) => rows.push((q, m, Vec::new())),
            Err(PlanError::Infeasible { .. }) => infeasible.push(q),
            Err(e) => return Err(e),
        }
    }
    if rows.is_empty() {
        return Err(PlanError::NoFeasibleCandidate(cands));
    }
    let batch = opts.early_stop_batch.unwrap_or(opts.n_trials).max(1);
    let mut done = 0;
    while done < opts.n_trials {
        let end = (done + batch).min(opts.n_trials);
        for row in rows.iter_mut() {
            let s = j_samples(row.0, row.1, cfg, mode, dataset, done as u64..end as u64, seed)?;
            row.2.extend(s);
        }
        done = end;
        if opts.early_stop_batch.is_some() && rows.len() > 1 {
            let means: Vec<f64> = rows.iter().map(|r| JEstimate::from_samples(&r.2).mean).collect();
            if separated(&rows, argmin_index(&means).expect("nonempty")) {
                break;
            }
        }
    }
    let rows: Vec<PlanRow> =
        rows.into_iter().map(|(q, m_star, s)| PlanRow { q, m_star, j: JEstimate::from_samples(&s) }).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.j.mean).collect();
    let best = argmin_index(&means).expect("nonempty");
    Ok(PlanResult { q_star: rows[best].q, m_star: rows[best].m_star, rows, infeasible })
}
