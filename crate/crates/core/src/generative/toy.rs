//! A small in-context noise predictor with analytic adapter gradients.
//!
//! Every `(h, w, f)` position of the concatenated tensor is mapped to a token
//! made of the `(2R+1)²·C` patch around it in its own half and the same patch
//! at the mirrored position in the other half, zero padded at each half's
//! borders so patches never straddle the seam. With `modulated` the two
//! patches are repeated scaled by `cos(πτ/2)` and by `sin(πτ/2)`, which lets a
//! linear map apply level-dependent gains. The token ends with the level
//! embedding `cos(πτ/2)`, `sin(πτ/2)`. It goes through linear, activation,
//! linear and yields `C` outputs for that position. Both linear maps carry
//! low-rank adapters; only the adapters train.
//!
//! With [`Head::Noise`] the outputs are the noise estimates. With
//! [`Head::Denoiser`] they are clean-value estimates `F` computed from the
//! condition half only (the own-half patch is blanked), and the noise estimate
//! is `g(α)·(v − √α·F)` where `v` is the position's own value and
//! `g(α) = √(1−α) / ((1−α) + α·s²)` is the Gaussian-posterior gain for a
//! reference variance `s²`. The gains are bounded for all levels, which keeps
//! the loss well conditioned near `α = 1`. The head evaluates `α` on the
//! cosine curve of `τ`.
//!
//! Keeping `v` out of `F` matters for the sampler: its update removes noise
//! faster than the training marginals assume, so a network that trusts the
//! own-half values as evidence about the target would carry the initial noise
//! through to the output. With the skip path alone the trajectory contracts
//! onto `F`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lora::LoraAdapter;
use super::{gaussian_like, joint_input, AlphaSchedule, GenError, NoisePredictor, Result};
use crate::latent::LatentTensor;
use crate::rng::{domain, Streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Silu,
}

impl Activation {
    fn eval(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Identity => (z, 1.0),
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                (z * s, s * (1.0 + z * (1.0 - s)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Noise,
    Denoiser { ref_var: f64 },
}

impl Head {
    /// `(gain on v, gain on F)` at level `tau`; the noise estimate is
    /// `gv·v − gf·F`.
    fn gains(self, tau: f64) -> Option<(f64, f64)> {
        match self {
            Head::Noise => None,
            Head::Denoiser { ref_var } => {
                let c = (std::f64::consts::FRAC_PI_2 * tau).cos();
                let alpha = (c * c).clamp(super::ALPHA_MIN, 1.0);
                let g = (1.0 - alpha).sqrt() / ((1.0 - alpha) + alpha * ref_var);
                Some((g, alpha.sqrt() * g))
            }
        }
    }
}

/// Shape and initialisation of a randomly based toy predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub channels: usize,
    pub radius: usize,
    pub hidden: usize,
    pub rank: usize,
    pub activation: Activation,
    /// Standard deviation multiplier of the frozen base weights.
    pub base_scale: f64,
    /// Standard deviation multiplier of the initial `A` factors.
    pub adapter_scale: f64,
    pub modulated: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            radius: 1,
            hidden: 16,
            rank: 4,
            activation: Activation::Silu,
            base_scale: 0.5,
            adapter_scale: 1.0,
            modulated: true,
        }
    }
}

impl ToyConfig {
    pub fn tokens(&self) -> TokenSpec {
        TokenSpec { channels: self.channels, radius: self.radius, modulated: self.modulated }
    }
}

/// Token layout: patch radius, channel count and level modulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpec {
    pub channels: usize,
    pub radius: usize,
    pub modulated: bool,
}

impl TokenSpec {
    /// Values in one patch, `(2R+1)²·C`.
    pub fn patch_len(&self) -> usize {
        let side = 2 * self.radius + 1;
        side * side * self.channels
    }

    pub fn len(&self) -> usize {
        let copies = if self.modulated { 3 } else { 1 };
        copies * 2 * self.patch_len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Offset of the centre of channel 0 within a patch.
    pub fn centre(&self) -> usize {
        let side = 2 * self.radius + 1;
        (self.radius * side + self.radius) * self.channels
    }
}

/// Which centre value the constructed base of [`ToyPredictor::paired`] copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopySource {
    /// The position's own value.
    Own,
    /// The mirrored value in the other half.
    Mirror,
    /// The mirrored value scaled by `cos(πτ/2)`; needs a modulated token.
    MirrorCos,
}

/// One `(τ, ε, η)` draw of the in-context loss; `pair` selects the training
/// pair, `eps` noises the target and `eta` the condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub pair: usize,
    pub tau: f64,
    pub eps: LatentTensor,
    pub eta: LatentTensor,
}

/// Draws `batch` items with `τ ~ U(0, 1]`. Draw `j` uses its own stream so a
/// larger batch extends a smaller one.
pub fn draw_batch(n_pairs: usize, dims: [usize; 4], batch: usize, seed: u64) -> Vec<Draw> {
    let streams = Streams::new(seed);
    (0..batch)
        .map(|j| {
            let mut rng = streams.rng(domain::DIFFUSION, j as u64 + 1);
            let pair = if n_pairs > 1 { rng.random_range(0..n_pairs) } else { 0 };
            let tau = 1.0 - rng.random::<f64>();
            let eps = gaussian_like(dims, &mut rng);
            let eta = gaussian_like(dims, &mut rng);
            Draw { pair, tau, eps, eta }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPredictor {
    spec: TokenSpec,
    activation: Activation,
    head: Head,
    layer1: LoraAdapter,
    bias1: Vec<f64>,
    layer2: LoraAdapter,
    bias2: Vec<f64>,
}

/// Per-token forward values kept for the backward pass.
struct Cache {
    a1t: Vec<f64>,
    z_grad: Vec<f64>,
    act: Vec<f64>,
    a2h: Vec<f64>,
}

impl ToyPredictor {
    pub fn new(
        spec: TokenSpec,
        activation: Activation,
        layer1: LoraAdapter,
        bias1: Vec<f64>,
        layer2: LoraAdapter,
        bias2: Vec<f64>,
    ) -> Result<Self> {
        let (tl, channels) = (spec.len(), spec.channels);
        if channels == 0 {
            return Err(GenError::Shape("zero channels".into()));
        }
        if layer1.in_dim() != tl {
            return Err(GenError::Shape(format!("layer 1 input {} != token length {tl}", layer1.in_dim())));
        }
        if layer2.in_dim() != layer1.out_dim() || bias1.len() != layer1.out_dim() {
            return Err(GenError::Shape("hidden widths disagree".into()));
        }
        if layer2.out_dim() != channels || bias2.len() != channels {
            return Err(GenError::Shape(format!("output width must equal C={channels}")));
        }
        Ok(Self { spec, activation, head: Head::Noise, layer1, bias1, layer2, bias2 })
    }

    /// Gaussian base weights and standard adapter initialisation.
    pub fn random(cfg: &ToyConfig, seed: u64) -> Result<Self> {
        let tl = cfg.tokens().len();
        let mut rng = Streams::new(seed).rng(domain::LORA_INIT, 0);
        let mut gauss = |n: usize, sd: f64| -> Vec<f64> { (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect() };
        let w1 = gauss(cfg.hidden * tl, cfg.base_scale / (tl as f64).sqrt());
        let b1 = gauss(cfg.hidden, cfg.base_scale * 0.1);
        let w2 = gauss(cfg.channels * cfg.hidden, cfg.base_scale / (cfg.hidden as f64).sqrt());
        let b2 = gauss(cfg.channels, cfg.base_scale * 0.1);
        let mut rng = Streams::new(seed).rng(domain::LORA_INIT, 1);
        let l1 = LoraAdapter::init(cfg.hidden, tl, w1, cfg.rank, cfg.adapter_scale, &mut rng)?;
        let l2 = LoraAdapter::init(cfg.channels, cfg.hidden, w2, cfg.rank.min(cfg.channels), cfg.adapter_scale, &mut rng)?;
        Self::new(cfg.tokens(), cfg.activation, l1, b1, l2, b2)
    }

    /// Constructed base whose hidden layer holds `+x, −x` pairs of one centre
    /// value per channel and whose output layer subtracts them. With SiLU,
    /// `silu(x) − silu(−x) = x`, so the base copies the selected value
    /// exactly. Hidden width `2C`; adapters of rank `rank` on both layers.
    pub fn paired(spec: TokenSpec, rank: usize, source: CopySource, adapter_scale: f64, seed: u64) -> Result<Self> {
        let (tl, channels, patch) = (spec.len(), spec.channels, spec.patch_len());
        let offset = match source {
            CopySource::Own => 0,
            CopySource::Mirror => patch,
            CopySource::MirrorCos if spec.modulated => 3 * patch,
            CopySource::MirrorCos => return Err(GenError::Shape("cos-scaled copy needs a modulated token".into())),
        } + spec.centre();
        let hidden = 2 * channels;
        let mut w1 = vec![0.0; hidden * tl];
        let mut w2 = vec![0.0; channels * hidden];
        for c in 0..channels {
            w1[c * tl + offset + c] = 1.0;
            w1[(channels + c) * tl + offset + c] = -1.0;
            w2[c * hidden + c] = 1.0;
            w2[c * hidden + channels + c] = -1.0;
        }
        let mut rng = Streams::new(seed).rng(domain::LORA_INIT, 2);
        let l1 = LoraAdapter::init(hidden, tl, w1, rank.min(hidden), adapter_scale, &mut rng)?;
        let l2 = LoraAdapter::init(channels, hidden, w2, rank.min(channels), adapter_scale, &mut rng)?;
        Self::new(spec, Activation::Silu, l1, vec![0.0; hidden], l2, vec![0.0; channels])
    }

    pub fn with_head(mut self, head: Head) -> Result<Self> {
        if let Head::Denoiser { ref_var } = head {
            if !(ref_var > 0.0 && ref_var.is_finite()) {
                return Err(GenError::Shape(format!("reference variance {ref_var} must be positive")));
            }
        }
        self.head = head;
        Ok(self)
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn spec(&self) -> TokenSpec {
        self.spec
    }
    pub fn channels(&self) -> usize {
        self.spec.channels
    }
    pub fn activation(&self) -> Activation {
        self.activation
    }
    pub fn layers(&self) -> (&LoraAdapter, &LoraAdapter) {
        (&self.layer1, &self.layer2)
    }
    pub fn layers_mut(&mut self) -> (&mut LoraAdapter, &mut LoraAdapter) {
        (&mut self.layer1, &mut self.layer2)
    }

    /// Frozen plus trainable parameter count.
    pub fn param_count(&self) -> usize {
        let l = |a: &LoraAdapter| a.base().len() + a.trainable_count();
        l(&self.layer1) + l(&self.layer2) + self.bias1.len() + self.bias2.len()
    }

    /// Trainable entries in the order `A1, B1, A2, B2`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.layer1.trainable_count() + self.layer2.trainable_count());
        p.extend_from_slice(&self.layer1.a);
        p.extend_from_slice(&self.layer1.b);
        p.extend_from_slice(&self.layer2.a);
        p.extend_from_slice(&self.layer2.b);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.layer1.trainable_count() + self.layer2.trainable_count() {
            return Err(GenError::Shape(format!("{} parameters supplied", p.len())));
        }
        let mut rest = p;
        for dst in [&mut self.layer1.a, &mut self.layer1.b, &mut self.layer2.a, &mut self.layer2.b] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    fn token(&self, x: &LatentTensor, h: usize, w: usize, f: usize, tau: f64, out: &mut Vec<f64>) {
        let [dh, dw2, _, dc] = x.dims();
        let half = dw2 / 2;
        let (own0, other0) = if w < half { (0, half) } else { (half, 0) };
        let local = w - own0;
        let r = self.spec.radius as isize;
        out.clear();
        let blank_own = matches!(self.head, Head::Denoiser { .. });
        for base in [own0, other0] {
            if blank_own && base == own0 {
                out.extend(std::iter::repeat_n(0.0, self.spec.patch_len()));
                continue;
            }
            for oh in -r..=r {
                for ow in -r..=r {
                    let (hh, ww) = (h as isize + oh, local as isize + ow);
                    if hh < 0 || hh >= dh as isize || ww < 0 || ww >= half as isize {
                        out.extend(std::iter::repeat_n(0.0, dc));
                    } else {
                        let i = x.index(hh as usize, base + ww as usize, f, 0);
                        out.extend_from_slice(&x.data()[i..i + dc]);
                    }
                }
            }
        }
        let phase = std::f64::consts::FRAC_PI_2 * tau;
        let (co, si) = (phase.cos(), phase.sin());
        if self.spec.modulated {
            let n = out.len();
            for scale in [co, si] {
                for k in 0..n {
                    out.push(out[k] * scale);
                }
            }
        }
        out.push(co);
        out.push(si);
    }

    fn forward(&self, t: &[f64]) -> (Vec<f64>, Cache) {
        let (mut z, a1t) = self.layer1.forward_parts(t);
        let mut z_grad = Vec::with_capacity(z.len());
        for (zi, b) in z.iter_mut().zip(&self.bias1) {
            let (v, g) = self.activation.eval(*zi + b);
            *zi = v;
            z_grad.push(g);
        }
        let (mut y, a2h) = self.layer2.forward_parts(&z);
        for (yi, b) in y.iter_mut().zip(&self.bias2) {
            *yi += b;
        }
        (y, Cache { a1t, z_grad, act: z, a2h })
    }

    fn check_input(&self, x: &LatentTensor) {
        let [_, w2, _, c] = x.dims();
        assert!(w2 % 2 == 0, "toy predictor needs a concatenated tensor of even width, got {w2}");
        assert_eq!(c, self.spec.channels, "channel count mismatch");
    }

    /// Loss and gradient with respect to [`params`](Self::params) on explicit
    /// draws. Per-draw work runs in parallel; reduction is in draw order.
    pub fn loss_and_grad(
        &self,
        pairs: &[(LatentTensor, LatentTensor)],
        draws: &[Draw],
        schedule: &AlphaSchedule,
        noise_hint: bool,
    ) -> Result<(f64, Vec<f64>)> {
        self.loss_impl(pairs, draws, schedule, noise_hint, true)
    }

    /// Loss only.
    pub fn loss(
        &self,
        pairs: &[(LatentTensor, LatentTensor)],
        draws: &[Draw],
        schedule: &AlphaSchedule,
        noise_hint: bool,
    ) -> Result<f64> {
        Ok(self.loss_impl(pairs, draws, schedule, noise_hint, false)?.0)
    }

    fn loss_impl(
        &self,
        pairs: &[(LatentTensor, LatentTensor)],
        draws: &[Draw],
        schedule: &AlphaSchedule,
        noise_hint: bool,
        want_grad: bool,
    ) -> Result<(f64, Vec<f64>)> {
        if pairs.is_empty() {
            return Err(GenError::EmptyDataset);
        }
        if draws.is_empty() {
            return Err(GenError::Shape("empty batch".into()));
        }
        for (u, uh) in pairs {
            if u.dims() != uh.dims() {
                return Err(GenError::DimMismatch(u.dims(), uh.dims()));
            }
            if u.channels() != self.spec.channels {
                return Err(GenError::Shape(format!("tensor has {} channels, model {}", u.channels(), self.spec.channels)));
            }
        }
        let scale = 1.0 / draws.len() as f64;
        let per_draw: Vec<Result<(f64, Vec<f64>)>> = draws
            .par_iter()
            .map(|d| {
                let (u, uh) = pairs.get(d.pair).ok_or_else(|| GenError::Shape(format!("pair {} out of range", d.pair)))?;
                let joint = joint_input(u, uh, d, schedule, noise_hint)?;
                self.draw_loss(&joint, &d.eps, d.tau, scale, want_grad)
            })
            .collect();
        let n = if want_grad { self.layer1.trainable_count() + self.layer2.trainable_count() } else { 0 };
        let (mut loss, mut grad) = (0.0, vec![0.0; n]);
        for r in per_draw {
            let (l, g) = r?;
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((loss * scale, grad))
    }

    /// Squared error on the target half of one joint tensor; the gradient is
    /// scaled by `scale` (the batch average).
    fn draw_loss(
        &self,
        joint: &LatentTensor,
        eps: &LatentTensor,
        tau: f64,
        scale: f64,
        want_grad: bool,
    ) -> Result<(f64, Vec<f64>)> {
        let [dh, dw2, df, dc] = joint.dims();
        let (l1, l2) = (&self.layer1, &self.layer2);
        let (r1, r2) = (l1.rank(), l2.rank());
        let (ti, hid) = (l1.in_dim(), l1.out_dim());
        let mut grad = if want_grad { vec![0.0; l1.trainable_count() + l2.trainable_count()] } else { Vec::new() };
        let (o_a1, o_b1) = (0, l1.a.len());
        let o_a2 = o_b1 + l1.b.len();
        let o_b2 = o_a2 + l2.a.len();
        let mut t = Vec::with_capacity(ti);
        let mut loss = 0.0;
        let mut dy = vec![0.0; dc];
        let mut dz = vec![0.0; hid];
        let gains = self.head.gains(tau);
        for h in 0..dh {
            for w in 0..dw2 / 2 {
                for f in 0..df {
                    self.token(joint, h, w, f, tau, &mut t);
                    let (y, cache) = self.forward(&t);
                    let base = eps.index(h, w, f, 0);
                    let own = joint.index(h, w, f, 0);
                    for c in 0..dc {
                        let (pred, dpred) = match gains {
                            None => (y[c], 1.0),
                            Some((gv, gf)) => (gv * joint.data()[own + c] - gf * y[c], -gf),
                        };
                        let r = eps.data()[base + c] - pred;
                        loss += r * r;
                        dy[c] = -2.0 * r * scale * dpred;
                    }
                    if !want_grad {
                        continue;
                    }
                    // Layer 2: y = (W2 + B2 A2) act + b2.
                    let mut g2 = vec![0.0; r2];
                    for o in 0..dc {
                        for k in 0..r2 {
                            grad[o_b2 + o * r2 + k] += dy[o] * cache.a2h[k];
                            g2[k] += l2.b[o * r2 + k] * dy[o];
                        }
                    }
                    for k in 0..r2 {
                        if g2[k] != 0.0 {
                            for j in 0..hid {
                                grad[o_a2 + k * hid + j] += g2[k] * cache.act[j];
                            }
                        }
                    }
                    for j in 0..hid {
                        let mut s: f64 = (0..dc).map(|o| l2.base()[o * hid + j] * dy[o]).sum();
                        s += (0..r2).map(|k| l2.a[k * hid + j] * g2[k]).sum::<f64>();
                        dz[j] = s * cache.z_grad[j];
                    }
                    // Layer 1: z = (W1 + B1 A1) t + b1.
                    let mut g1 = vec![0.0; r1];
                    for o in 0..hid {
                        for k in 0..r1 {
                            grad[o_b1 + o * r1 + k] += dz[o] * cache.a1t[k];
                            g1[k] += l1.b[o * r1 + k] * dz[o];
                        }
                    }
                    for k in 0..r1 {
                        if g1[k] != 0.0 {
                            let row = &mut grad[o_a1 + k * ti..o_a1 + (k + 1) * ti];
                            for (g, tj) in row.iter_mut().zip(&t) {
                                *g += g1[k] * tj;
                            }
                        }
                    }
                }
            }
        }
        Ok((loss, grad))
    }

    pub fn save_adapters(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        super::write_adapters(&[&self.layer1, &self.layer2], &mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_adapters(&mut self, path: &Path) -> Result<()> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        super::read_adapters(&mut [&mut self.layer1, &mut self.layer2], f)
    }
}

impl NoisePredictor for ToyPredictor {
    /// `x` must be a concatenated tensor (even width) with `C` channels; the
    /// condition argument is unused because conditioning is in-context.
    fn predict(&self, x: &LatentTensor, tau: f64, _cond: Option<&LatentTensor>) -> LatentTensor {
        self.check_input(x);
        let [dh, dw, df, dc] = x.dims();
        let mut out = x.clone();
        let mut t = Vec::new();
        let gains = self.head.gains(tau);
        for h in 0..dh {
            for w in 0..dw {
                for f in 0..df {
                    self.token(x, h, w, f, tau, &mut t);
                    let (mut y, _) = self.forward(&t);
                    let i = x.index(h, w, f, 0);
                    if let Some((gv, gf)) = gains {
                        for (c, yc) in y.iter_mut().enumerate() {
                            *yc = gv * x.data()[i + c] - gf * *yc;
                        }
                    }
                    out.data_mut()[i..i + dc].copy_from_slice(&y);
                }
            }
        }
        out
    }
}

/// Per-step training losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    /// CSV with header `step,loss`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "loss"])?;
        for (i, l) in self.losses.iter().enumerate() {
            wr.write_record([i.to_string(), l.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub batch: usize,
    pub noise_hint: bool,
    /// Linearly anneal the step size to zero over the run.
    #[serde(default)]
    pub anneal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 500, step_size: 0.003, momentum: 0.9, batch: 8, noise_hint: false, anneal: false }
    }
}

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Heavy-ball gradient descent on the in-context loss. Step `s` draws its batch
/// from its own stream, so the trace is reproducible bit for bit. The returned
/// trace holds the batch loss measured before each update.
pub fn train_lora(
    model: &mut ToyPredictor,
    pairs: &[(LatentTensor, LatentTensor)],
    cfg: &TrainConfig,
    schedule: &AlphaSchedule,
    seed: u64,
) -> Result<LossTrace> {
    if pairs.is_empty() {
        return Err(GenError::EmptyDataset);
    }
    let dims = pairs[0].0.dims();
    let streams = Streams::new(seed);
    let mut params = model.params();
    let mut vel = vec![0.0; params.len()];
    let mut trace = LossTrace::default();
    for step in 0..cfg.steps {
        let draws = draw_batch(pairs.len(), dims, cfg.batch.max(1), streams.child(domain::LORA_TRAIN, step as u64).seed());
        let (loss, grad) = model.loss_and_grad(pairs, &draws, schedule, cfg.noise_hint)?;
        trace.losses.push(loss);
        if !(loss <= DIVERGENCE_LOSS) {
            return Err(GenError::Diverged { step, loss, trace });
        }
        let lr = if cfg.anneal { cfg.step_size * (1.0 - step as f64 / cfg.steps as f64) } else { cfg.step_size };
        for ((p, v), g) in params.iter_mut().zip(&mut vel).zip(&grad) {
            *v = cfg.momentum * *v - lr * g;
            *p += *v;
        }
        model.set_params(&params)?;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |g − n| / max(|g|, |n|, 1e-6)` over all adapter entries.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub entries: usize,
}

/// Central finite differences on every adapter entry against the analytic
/// gradient, at a fixed loss point given by `draws`.
pub fn grad_check(
    model: &ToyPredictor,
    pairs: &[(LatentTensor, LatentTensor)],
    draws: &[Draw],
    schedule: &AlphaSchedule,
    noise_hint: bool,
    h: f64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(GenError::InvalidStep(h));
    }
    let (_, analytic) = model.loss_and_grad(pairs, draws, schedule, noise_hint)?;
    let base = model.params();
    let numeric: Vec<f64> = (0..base.len())
        .into_par_iter()
        .map(|i| {
            let mut m = model.clone();
            let mut p = base.clone();
            p[i] = base[i] + h;
            m.set_params(&p)?;
            let up = m.loss(pairs, draws, schedule, noise_hint)?;
            p[i] = base[i] - h;
            m.set_params(&p)?;
            let down = m.loss(pairs, draws, schedule, noise_hint)?;
            Ok((up - down) / (2.0 * h))
        })
        .collect::<Result<_>>()?;
    let mut rep =
        GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, max_abs_analytic: 0.0, max_abs_numeric: 0.0, entries: base.len() };
    for (g, n) in analytic.iter().zip(&numeric) {
        let err = (g - n).abs();
        rep.max_abs_err = rep.max_abs_err.max(err);
        rep.max_rel_err = rep.max_rel_err.max(err / g.abs().max(n.abs()).max(1e-6));
        rep.max_abs_analytic = rep.max_abs_analytic.max(g.abs());
        rep.max_abs_numeric = rep.max_abs_numeric.max(n.abs());
    }
    Ok(rep)
}
