use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::decoder::{BpDecoder, DEFAULT_MAX_ITERS};
use super::{LdpcCode, LdpcError, Result};
use crate::channel::db_to_linear;
use crate::modem::{awgn_llr, qpsk_map};
use crate::rng::{domain, stream};
use crate::stats::wilson_interval;

const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlerPoint {
    pub gamma_db: f64,
    pub bler: f64,
    pub trials: u64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl BlerPoint {
    pub fn from_counts(gamma_db: f64, errors: u64, trials: u64) -> Self {
        let (ci_low, ci_high) = wilson_interval(errors, trials);
        Self { gamma_db, bler: errors as f64 / trials as f64, trials, ci_low, ci_high }
    }

    /// A point with no sampling uncertainty, used for analytic curves.
    pub fn exact(gamma_db: f64, bler: f64) -> Self {
        Self { gamma_db, bler, trials: 1, ci_low: bler, ci_high: bler }
    }
}

/// Block error rate versus SNR for one code.
#[derive(Debug, Clone, PartialEq)]
pub struct BlerCurve {
    code_id: String,
    points: Vec<BlerPoint>,
}

impl BlerCurve {
    /// Validates `bler` in [0,1], `trials >= 1` and strictly increasing SNR.
    pub fn new(code_id: impl Into<String>, points: Vec<BlerPoint>) -> Result<Self> {
        for p in &points {
            if !(0.0..=1.0).contains(&p.bler) || !p.gamma_db.is_finite() {
                return Err(LdpcError::InvalidCurve(format!("bad point {p:?}")));
            }
            if p.trials == 0 {
                return Err(LdpcError::InvalidCurve(format!("zero trials at {} dB", p.gamma_db)));
            }
        }
        if points.windows(2).any(|w| w[1].gamma_db <= w[0].gamma_db) {
            return Err(LdpcError::InvalidCurve("gamma_db must be strictly increasing".into()));
        }
        Ok(Self { code_id: code_id.into(), points })
    }

    /// Ideal cliff: BLER 1 below `threshold_db`, 0 at and above it.
    pub fn step(threshold_db: f64) -> Self {
        let points = vec![BlerPoint::exact(threshold_db - 1e-9, 1.0), BlerPoint::exact(threshold_db, 0.0)];
        Self { code_id: format!("step-{threshold_db}"), points }
    }

    /// Constant BLER at every SNR.
    pub fn constant(p: f64) -> Result<Self> {
        Self::new(format!("const-{p}"), vec![BlerPoint::exact(0.0, p)])
    }

    pub fn code_id(&self) -> &str {
        &self.code_id
    }
    pub fn points(&self) -> &[BlerPoint] {
        &self.points
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, code_id: impl Into<String>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let points = r.deserialize().collect::<std::result::Result<Vec<BlerPoint>, _>>()?;
        Self::new(code_id, points)
    }

    /// SNR at which the log-odds interpolant crosses `target`, if the curve
    /// brackets it.
    pub fn crossing_db(&self, target: f64) -> Option<f64> {
        self.points.windows(2).find_map(|w| {
            let (a, b) = (w[0], w[1]);
            if (a.bler - target) * (b.bler - target) > 0.0 || a.bler == b.bler {
                return None;
            }
            let (la, lb, lt) = (logit(a.bler), logit(b.bler), logit(target));
            Some(a.gamma_db + (lt - la) / (lb - la) * (b.gamma_db - a.gamma_db))
        })
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(P_FLOOR, 1.0 - P_FLOOR);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Log-odds linear interpolation, clamped to the endpoint values.
pub fn bler_lookup(curve: &BlerCurve, gamma_db: f64) -> Result<f64> {
    let pts = &curve.points;
    let (first, last) = match (pts.first(), pts.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(LdpcError::EmptyCurve),
    };
    if gamma_db <= first.gamma_db {
        return Ok(first.bler);
    }
    if gamma_db >= last.gamma_db {
        return Ok(last.bler);
    }
    let i = pts.partition_point(|p| p.gamma_db <= gamma_db) - 1;
    let (a, b) = (pts[i], pts[i + 1]);
    if gamma_db == a.gamma_db || a.bler == b.bler {
        return Ok(a.bler);
    }
    let t = (gamma_db - a.gamma_db) / (b.gamma_db - a.gamma_db);
    Ok(sigmoid(logit(a.bler) + t * (logit(b.bler) - logit(a.bler))))
}

/// Monte Carlo BLER at one SNR with the default iteration cap.
pub fn estimate_bler(code: &LdpcCode, gamma_db: f64, n_trials: u64, seed: u64) -> Result<BlerPoint> {
    estimate_bler_with(code, gamma_db, n_trials, seed, DEFAULT_MAX_ITERS)
}

/// Runs encode, QPSK, AWGN and BP per trial. Trial `t` draws from its own
/// stream, independent of `gamma_db`, so points on a grid share randomness.
pub fn estimate_bler_with(code: &LdpcCode, gamma_db: f64, n_trials: u64, seed: u64, max_iters: usize) -> Result<BlerPoint> {
    if n_trials == 0 {
        return Err(LdpcError::NoTrials);
    }
    let snr = db_to_linear(gamma_db);
    let errors = (0..n_trials)
        .into_par_iter()
        .map_init(
            || BpDecoder::new(code.h()),
            |dec, t| -> Result<u64> {
                let mut rng = stream(seed, domain::BLER_TRIAL, t);
                let info: Vec<u8> = (0..code.k()).map(|_| rng.random::<bool>() as u8).collect();
                let cw = code.encoder().encode(&info)?;
                let sym = qpsk_map(&cw).map_err(|e| LdpcError::InvalidMatrix(e.to_string()))?;
                let llr = awgn_llr(&sym, snr, &mut rng).map_err(|e| LdpcError::InvalidMatrix(e.to_string()))?;
                let out = dec.decode(&llr, max_iters)?;
                if out.converged {
                    assert!(code.h().is_codeword(&out.bits), "converged decode with nonzero syndrome");
                }
                Ok(u64::from(!out.converged || out.bits != cw))
            },
        )
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(BlerPoint::from_counts(gamma_db, errors, n_trials))
}

pub fn estimate_curve(code: &LdpcCode, grid_db: &[f64], n_trials: u64, seed: u64) -> Result<BlerCurve> {
    let points = grid_db.iter().map(|&g| estimate_bler(code, g, n_trials, seed)).collect::<Result<Vec<_>>>()?;
    BlerCurve::new(code.id(), points)
}

/// Pairs `(i, j)` with `i < j` where the BLER at the higher SNR `j` is
/// significantly above the BLER at `i` (non-overlapping Wilson intervals).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonotonicityReport {
    pub violations: Vec<(usize, usize)>,
}

impl MonotonicityReport {
    pub fn is_monotone(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn check_monotone(curve: &BlerCurve) -> MonotonicityReport {
    let p = &curve.points;
    let mut violations = Vec::new();
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            if p[j].ci_low > p[i].ci_high {
                violations.push((i, j));
            }
        }
    }
    MonotonicityReport { violations }
}

/// On-disk cache of simulated curves keyed by code, modulation, trial count,
/// seed and SNR grid.
#[derive(Debug, Clone)]
pub struct BlerCache {
    dir: PathBuf,
}

impl BlerCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, code: &LdpcCode, grid_db: &[f64], n_trials: u64, seed: u64) -> PathBuf {
        let mut h = Sha256::new();
        h.update(code.id().as_bytes());
        h.update(b"\0qpsk\0");
        h.update(n_trials.to_le_bytes());
        h.update(seed.to_le_bytes());
        for g in grid_db {
            h.update(g.to_bits().to_le_bytes());
        }
        let digest = hex::encode(h.finalize());
        self.dir.join(format!("bler-{}-{}.csv", sanitize(code.id()), &digest[..16]))
    }

    /// Returns the cached curve and `true` on a hit, otherwise simulates,
    /// stores and returns `false`.
    pub fn get_or_estimate(&self, code: &LdpcCode, grid_db: &[f64], n_trials: u64, seed: u64) -> Result<(BlerCurve, bool)> {
        let path = self.path_for(code, grid_db, n_trials, seed);
        if path.exists() {
            if let Ok(c) = BlerCurve::read_csv(&path, code.id()) {
                if c.points.len() == grid_db.len() {
                    return Ok((c, true));
                }
            }
        }
        let curve = estimate_curve(code, grid_db, n_trials, seed)?;
        fs::create_dir_all(&self.dir)?;
        let tmp = path.with_extension("csv.tmp");
        curve.write_csv(&tmp)?;
        fs::rename(&tmp, &path)?;
        Ok((curve, false))
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}
