//! Denoising sampler, forward noising, the in-context concatenation loss and
//! low-rank adapters on a small trainable noise predictor.
//!
//! Tensors are [`LatentTensor`]s. In-context conditioning concatenates the
//! noisy target and the noisy condition along the `w` axis; the cut-off keeps
//! the first (target) half.

mod lora;
mod toy;

pub use lora::{lora_apply, read_adapters, write_adapters, LoraAdapter};
pub use toy::{
    draw_batch, grad_check, train_lora, Activation, Draw, GradCheckReport, CopySource, Head, LossTrace, TokenSpec, ToyConfig, ToyPredictor,
    TrainConfig,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::latent::{LatentError, LatentTensor};
use crate::rng::{domain, stream};

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid noise level {0}")]
    InvalidLevel(f64),
    #[error("target level {tau_prime} must be below current level {tau}")]
    NotDescending { tau: f64, tau_prime: f64 },
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 4], [usize; 4]),
    #[error("cannot cut off a tensor of odd width {0}")]
    OddWidth(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    InvalidStep(f64),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64, trace: LossTrace },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, GenError>;

/// Floor and ceiling of the cosine curve.
pub const ALPHA_MIN: f64 = 1e-5;

/// Signal-power fraction as a function of the noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaCurve {
    /// `cos²(πτ/2)` clipped to `[1e-5, 1]`.
    Cosine,
    /// Linear interpolation between `(τ, α)` knots.
    Piecewise { knots: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub curve: AlphaCurve,
    pub steps: usize,
}

impl AlphaSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        let s = Self { curve: AlphaCurve::Cosine, steps };
        s.validate()?;
        Ok(s)
    }

    pub fn piecewise(knots: Vec<(f64, f64)>, steps: usize) -> Result<Self> {
        let s = Self { curve: AlphaCurve::Piecewise { knots }, steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GenError::InvalidSchedule(m));
        if self.steps < 2 {
            return bad(format!("need at least 2 levels, got {}", self.steps));
        }
        if let AlphaCurve::Piecewise { knots } = &self.curve {
            if knots.len() < 2 {
                return bad("need at least two knots".into());
            }
            if knots[0] != (0.0, 1.0) {
                return bad(format!("first knot must be (0, 1), got {:?}", knots[0]));
            }
            let last = knots[knots.len() - 1];
            if last.0 != 1.0 || !(last.1 > 0.0 && last.1 <= 1e-4) {
                return bad(format!("last knot must be (1, α) with 0 < α ≤ 1e-4, got {last:?}"));
            }
            for w in knots.windows(2) {
                if !(w[1].0 > w[0].0) {
                    return bad(format!("knot levels not increasing at {:?}", w[1]));
                }
                if !(w[1].1 <= w[0].1 && w[1].1 > 0.0) {
                    return bad(format!("alpha not nonincreasing and positive at {:?}", w[1]));
                }
            }
        }
        Ok(())
    }

    /// `α_τ` for `τ ∈ [0, 1]`.
    pub fn alpha(&self, tau: f64) -> f64 {
        match &self.curve {
            AlphaCurve::Cosine => {
                let c = (std::f64::consts::FRAC_PI_2 * tau).cos();
                (c * c).clamp(ALPHA_MIN, 1.0)
            }
            AlphaCurve::Piecewise { knots } => {
                let i = knots.partition_point(|k| k.0 <= tau).clamp(1, knots.len() - 1);
                let ((t0, a0), (t1, a1)) = (knots[i - 1], knots[i]);
                if tau <= t0 {
                    return a0;
                }
                let x = ((tau - t0) / (t1 - t0)).min(1.0);
                a0 + x * (a1 - a0)
            }
        }
    }

    /// The `S` uniformly spaced levels `τ_i = i / (S − 1)`.
    pub fn levels(&self) -> Vec<f64> {
        let last = (self.steps - 1) as f64;
        (0..self.steps).map(|i| i as f64 / last).collect()
    }
}

fn check_level(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(GenError::InvalidLevel(tau));
    }
    Ok(())
}

fn check_dims(a: &LatentTensor, b: &LatentTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(GenError::DimMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// Standard normal tensor of the given dims drawn from `rng`.
pub(crate) fn gaussian_like<R: Rng>(dims: [usize; 4], rng: &mut R) -> LatentTensor {
    let mut t = LatentTensor::filled(dims, 0.0).expect("dims validated by caller");
    for v in t.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    t
}

/// `√α·u + √(1−α)·ε` elementwise.
pub(crate) fn mix(u: &LatentTensor, eps: &LatentTensor, alpha: f64) -> LatentTensor {
    let (sa, sn) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    let mut out = u.clone();
    for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = sa * *o + sn * e;
    }
    out
}

/// Noisy version of `u` at level `tau` together with the injected noise.
pub fn forward_noise(
    u: &LatentTensor,
    tau: f64,
    schedule: &AlphaSchedule,
    seed: u64,
) -> Result<(LatentTensor, LatentTensor)> {
    check_level(tau)?;
    let mut rng = stream(seed, domain::DIFFUSION, 0);
    let eps = gaussian_like(u.dims(), &mut rng);
    Ok((mix(u, &eps, schedule.alpha(tau)), eps))
}

/// Maps a noisy tensor at level `tau` to a noise estimate of the same dims.
pub trait NoisePredictor {
    fn predict(&self, x: &LatentTensor, tau: f64, cond: Option<&LatentTensor>) -> LatentTensor;
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, x: &LatentTensor, _tau: f64, _cond: Option<&LatentTensor>) -> LatentTensor {
        let mut out = x.clone();
        out.data_mut().fill(0.0);
        out
    }
}

/// Knows the clean target and returns the noise implied by the current
/// tensor: `(v − √α·u) / √(1−α)`. At `α = 1` it returns zero.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub target: LatentTensor,
    pub schedule: AlphaSchedule,
}

impl NoisePredictor for OraclePredictor {
    fn predict(&self, x: &LatentTensor, tau: f64, _cond: Option<&LatentTensor>) -> LatentTensor {
        let alpha = self.schedule.alpha(tau);
        let mut out = x.clone();
        if alpha >= 1.0 {
            out.data_mut().fill(0.0);
            return out;
        }
        let (sa, sn) = (alpha.sqrt(), (1.0 - alpha).sqrt());
        for (o, u) in out.data_mut().iter_mut().zip(self.target.data()) {
            *o = (*o - sa * u) / sn;
        }
        out
    }
}

/// Update rule used by [`ddim_step_with`]. `Faulty` perturbs the noise
/// coefficient by 1% and exists only so validation suites can prove they
/// catch a wrong step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepRule {
    #[default]
    Standard,
    Faulty,
}

/// One deterministic denoising step from `tau` down to `tau_prime`:
/// `v' = √(α'/α)·v − √((α'−α)/α)·ε̂(v, τ | c)`.
pub fn ddim_step(
    v: &LatentTensor,
    tau: f64,
    tau_prime: f64,
    schedule: &AlphaSchedule,
    predictor: &dyn NoisePredictor,
    cond: Option<&LatentTensor>,
) -> Result<LatentTensor> {
    ddim_step_with(v, tau, tau_prime, schedule, predictor, cond, StepRule::Standard)
}

pub fn ddim_step_with(
    v: &LatentTensor,
    tau: f64,
    tau_prime: f64,
    schedule: &AlphaSchedule,
    predictor: &dyn NoisePredictor,
    cond: Option<&LatentTensor>,
    rule: StepRule,
) -> Result<LatentTensor> {
    check_level(tau)?;
    check_level(tau_prime)?;
    if tau_prime >= tau {
        return Err(GenError::NotDescending { tau, tau_prime });
    }
    let (a, a2) = (schedule.alpha(tau), schedule.alpha(tau_prime));
    let eps = predictor.predict(v, tau, cond);
    check_dims(v, &eps)?;
    let keep = (a2 / a).sqrt();
    let mut drop = ((a2 - a).max(0.0) / a).sqrt();
    if rule == StepRule::Faulty {
        drop *= 1.01;
    }
    let mut out = v.clone();
    for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = keep * *o - drop * e;
    }
    Ok(out)
}

/// Starts from `N(0, I)` at `τ = 1` and steps down all levels to `τ = 0`.
pub fn sample(
    schedule: &AlphaSchedule,
    predictor: &dyn NoisePredictor,
    cond: Option<&LatentTensor>,
    dims: [usize; 4],
    seed: u64,
) -> Result<LatentTensor> {
    sample_with(schedule, predictor, cond, dims, seed, StepRule::Standard)
}

pub fn sample_with(
    schedule: &AlphaSchedule,
    predictor: &dyn NoisePredictor,
    cond: Option<&LatentTensor>,
    dims: [usize; 4],
    seed: u64,
    rule: StepRule,
) -> Result<LatentTensor> {
    schedule.validate()?;
    if dims.contains(&0) {
        return Err(LatentError::InvalidDims(dims).into());
    }
    let levels = schedule.levels();
    let mut v = gaussian_like(dims, &mut stream(seed, domain::SAMPLER, 0));
    for i in (1..levels.len()).rev() {
        v = ddim_step_with(&v, levels[i], levels[i - 1], schedule, predictor, cond, rule)?;
    }
    Ok(v)
}

/// Concatenation `x ⊕ y` along `w`.
pub fn concat_w(x: &LatentTensor, y: &LatentTensor) -> Result<LatentTensor> {
    check_dims(x, y)?;
    let [h, w, f, c] = x.dims();
    let row = w * f * c;
    let mut data = Vec::with_capacity(2 * x.len());
    for r in 0..h {
        data.extend_from_slice(&x.data()[r * row..(r + 1) * row]);
        data.extend_from_slice(&y.data()[r * row..(r + 1) * row]);
    }
    Ok(LatentTensor::new([h, 2 * w, f, c], data)?)
}

/// Cut-off: keeps the first half along `w`.
pub fn cut_off(x: &LatentTensor) -> Result<LatentTensor> {
    let [h, w2, f, c] = x.dims();
    if w2 % 2 != 0 {
        return Err(GenError::OddWidth(w2));
    }
    let row = w2 * f * c;
    let half = row / 2;
    let mut data = Vec::with_capacity(x.len() / 2);
    for r in 0..h {
        data.extend_from_slice(&x.data()[r * row..r * row + half]);
    }
    Ok(LatentTensor::new([h, w2 / 2, f, c], data)?)
}

/// Conditions a concatenation-based network on `û`: at each level the
/// condition is noised to that level, concatenated after the target, and the
/// network output is cut off to the target half. The condition noise is fresh
/// per level, drawn from a stream keyed by `cond_seed` and the level, so runs
/// are reproducible. Fresh noise matches the independent draws seen in
/// training; a single fixed draw would be carried coherently along the whole
/// trajectory.
pub struct InContext<'a, P: NoisePredictor + ?Sized> {
    pub net: &'a P,
    pub schedule: &'a AlphaSchedule,
    pub cond_seed: u64,
}

impl<'a, P: NoisePredictor + ?Sized> InContext<'a, P> {
    pub fn new(net: &'a P, schedule: &'a AlphaSchedule, cond_seed: u64) -> Self {
        Self { net, schedule, cond_seed }
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for InContext<'_, P> {
    /// Panics if `cond` is missing or its dims differ from `x`.
    fn predict(&self, x: &LatentTensor, tau: f64, cond: Option<&LatentTensor>) -> LatentTensor {
        let cond = cond.expect("in-context predictor needs a condition");
        let eta = gaussian_like(cond.dims(), &mut stream(self.cond_seed, domain::SAMPLER, 1 + tau.to_bits()));
        let c_tau = mix(cond, &eta, self.schedule.alpha(tau));
        let joint = concat_w(x, &c_tau).expect("condition dims must match the sample");
        cut_off(&self.net.predict(&joint, tau, None)).expect("even width by construction")
    }
}

/// Options of the in-context loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Number of `(τ, ε, η)` draws averaged per evaluation.
    pub batch: usize,
    /// Replace the noisy condition half by the injected target noise. Used by
    /// the constructed identity task.
    pub noise_hint: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { batch: 8, noise_hint: false }
    }
}

/// Joint input for one draw: `u_τ ⊕ û_τ` (or `u_τ ⊕ ε` with the noise hint).
pub(crate) fn joint_input(
    u: &LatentTensor,
    u_hat: &LatentTensor,
    d: &Draw,
    schedule: &AlphaSchedule,
    noise_hint: bool,
) -> Result<LatentTensor> {
    let alpha = schedule.alpha(d.tau);
    let u_tau = mix(u, &d.eps, alpha);
    let right = if noise_hint { d.eps.clone() } else { mix(u_hat, &d.eta, alpha) };
    concat_w(&u_tau, &right)
}

/// In-context loss `‖ε − Γ(ε_net(u_τ ⊕ û_τ, τ))‖²` summed over elements and
/// averaged over `opts.batch` draws with `τ ~ U(0, 1]`.
pub fn ic_concat_loss(
    u: &LatentTensor,
    u_hat: &LatentTensor,
    net: &dyn NoisePredictor,
    schedule: &AlphaSchedule,
    opts: LossOptions,
    seed: u64,
) -> Result<f64> {
    check_dims(u, u_hat)?;
    let draws = draw_batch(1, u.dims(), opts.batch, seed);
    ic_loss_on(u, u_hat, net, schedule, opts.noise_hint, &draws)
}

/// The same loss on explicit draws (the `pair` field is ignored).
pub fn ic_loss_on(
    u: &LatentTensor,
    u_hat: &LatentTensor,
    net: &dyn NoisePredictor,
    schedule: &AlphaSchedule,
    noise_hint: bool,
    draws: &[Draw],
) -> Result<f64> {
    check_dims(u, u_hat)?;
    if draws.is_empty() {
        return Err(GenError::Shape("empty batch".into()));
    }
    let mut total = 0.0;
    for d in draws {
        check_dims(u, &d.eps)?;
        let joint = joint_input(u, u_hat, d, schedule, noise_hint)?;
        let pred = cut_off(&net.predict(&joint, d.tau, None))?;
        total += d.eps.data().iter().zip(pred.data()).map(|(e, p)| (e - p) * (e - p)).sum::<f64>();
    }
    Ok(total / draws.len() as f64)
}
