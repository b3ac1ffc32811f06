use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{BlerSource, CodeKind, E2eChannel, ExperimentConfig};
use super::run::{with_workers, RunContext, RunManifest, CSV_SCHEMA_VERSION};
use super::Result;
use crate::channel::{linear_to_db, snr_cdf, SatelliteLink};
use crate::generative::{
    concat_w, cut_off, ddim_step_with, draw_batch, forward_noise, grad_check, sample, train_lora, AlphaSchedule,
    CopySource, Head, InContext, NoisePredictor, StepRule, TokenSpec, ToyConfig, ToyPredictor, TrainConfig,
};
use crate::latent::{
    calibrate, ms_ssim_with_range, psnr, synth_tensor, vpl, Image, LatentCodec, LatentTensor, PerceptualMap,
};
use crate::ldpc::{bler_lookup, check_monotone, load_alist, to_alist, BlerCache, BlerCurve, LdpcCode};
use crate::planner::{m_star, q_star, PlanResult, QStarOptions};
use crate::rng::{domain, stream, Streams};
use crate::si_transport::{partition, transmit, BlockSpec, ChannelMode, SnrSource};
use crate::stats::mean_ci;

/// Purposes of the seeds derived from the master seed.
pub mod purpose {
    pub const DATASET: u64 = 0;
    pub const CALIBRATION: u64 = 1;
    pub const TEST_VIDEOS: u64 = 2;
    pub const CHANNEL: u64 = 3;
    pub const PLANNER: u64 = 4;
    pub const BLER: u64 = 5;
    pub const SNR: u64 = 6;
    pub const REFINE_DATA: u64 = 7;
    pub const REFINE_PAIRS: u64 = 8;
    pub const REFINE_INIT: u64 = 9;
    pub const REFINE_TRAIN: u64 = 10;
    pub const REFINE_COND: u64 = 11;
    pub const REFINE_SAMPLE: u64 = 12;
    pub const SAMPLER_CHECK: u64 = 13;
}

/// Seed for one purpose: `Streams(master).child(E2E, purpose)`.
pub fn derived_seed(master: u64, purpose: u64) -> u64 {
    Streams::new(master).child(domain::E2E, purpose).seed()
}

/// Seed of item `index` within a purpose, e.g. video `i`'s channel.
fn item_seed(master: u64, purpose: u64, index: u64) -> u64 {
    Streams::new(derived_seed(master, purpose)).child(domain::E2E, index).seed()
}

/// Tensors `0..count` of one split of the synthetic dataset. All splits
/// share one dataset seed, hence one set of channel means, and differ only
/// in their tensor indices.
pub fn dataset_split(cfg: &ExperimentConfig, split: u64, count: usize) -> Result<Vec<LatentTensor>> {
    let seed = derived_seed(cfg.seed, purpose::DATASET);
    let synth = cfg.latent.synth();
    Ok((0..count as u64).map(|i| synth_tensor(&synth, seed, (split << 32) | i)).collect::<std::result::Result<_, _>>()?)
}

fn km_label(d: f64) -> String {
    if d.fract() == 0.0 {
        format!("{d:.0}")
    } else {
        format!("{d}").replace('.', "p")
    }
}

/// The configured code: a generated regular code or an alist file. Alist
/// codes are identified by file stem and a hash of the matrix so caches
/// notice edits.
pub fn build_code(cfg: &ExperimentConfig) -> Result<LdpcCode> {
    let c = &cfg.code;
    match c.kind {
        CodeKind::Regular => Ok(LdpcCode::regular(c.n, c.wc, c.wr, c.seed)?),
        CodeKind::Alist => {
            let path = c.alist.as_ref().expect("validated");
            let h = load_alist(path)?;
            let digest = hex::encode(Sha256::digest(to_alist(&h).as_bytes()));
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(LdpcCode::new(format!("alist-{stem}-{}", &digest[..12]), h))
        }
    }
}

/// Curve from the configured source; simulation goes through the cache.
fn resolve_curve(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<BlerCurve> {
    match &cfg.bler.source {
        BlerSource::Step(t) => Ok(BlerCurve::step(*t)),
        BlerSource::File(p) => Ok(BlerCurve::read_csv(p, format!("file:{}", p.display()))?),
        BlerSource::Simulate => {
            let code = build_code(cfg)?;
            let dir = cfg.bler.cache_dir.clone().unwrap_or_else(|| ctx.root().join("cache"));
            let cache = BlerCache::new(dir);
            let seed = derived_seed(cfg.seed, purpose::BLER);
            let grid = &cfg.bler.grid_db;
            let path = cache.path_for(&code, grid, cfg.bler.trials, seed);
            let (curve, hit) = ctx.time("bler_simulation", || cache.get_or_estimate(&code, grid, cfg.bler.trials, seed))?;
            ctx.record_cache(&path, hit);
            Ok(curve)
        }
    }
}

enum ChannelPlan {
    Fixed(f64),
    Abstract(BlerCurve),
    Phy(LdpcCode, usize),
}

impl ChannelPlan {
    fn resolve(cfg: &ExperimentConfig, ctx: &mut RunContext, allow_phy: bool) -> Result<Self> {
        if let Some(p) = cfg.bler.force {
            return Ok(ChannelPlan::Fixed(p));
        }
        if allow_phy && cfg.e2e.channel == E2eChannel::FullPhy {
            return Ok(ChannelPlan::Phy(build_code(cfg)?, cfg.code.max_iters));
        }
        Ok(ChannelPlan::Abstract(resolve_curve(cfg, ctx)?))
    }

    fn mode<'a>(&'a self, link: &'a SatelliteLink) -> ChannelMode<'a> {
        match self {
            ChannelPlan::Fixed(p) => ChannelMode::Fixed { p: *p },
            ChannelPlan::Abstract(c) => ChannelMode::Abstract { curve: Some(c), snr: SnrSource::Link(link) },
            ChannelPlan::Phy(code, it) => ChannelMode::FullPhy { code, snr: SnrSource::Link(link), max_iters: *it },
        }
    }

    fn block_spec(&self, cfg: &ExperimentConfig) -> BlockSpec {
        match self {
            ChannelPlan::Phy(code, _) => BlockSpec::from_code(code),
            _ => BlockSpec::from_rate(cfg.layout.block_bits, cfg.layout.rate),
        }
    }
}

#[derive(Serialize)]
struct QuantityRow<'a> {
    schema_version: u32,
    distance_km: f64,
    quantity: &'a str,
    value: f64,
}

// ---------------------------------------------------------------- snr-cdf

pub struct SnrCdfReport {
    pub manifest: RunManifest,
    /// `(distance_km, [(gamma_db, cdf)])` in sweep order.
    pub curves: Vec<(f64, Vec<(f64, f64)>)>,
}

#[derive(Serialize)]
struct CdfRow {
    schema_version: u32,
    distance_km: f64,
    gamma_db: f64,
    cdf: f64,
}

/// Empirical end-to-end SNR CDF for every sweep distance: one CSV per
/// distance, a merged file and a per-distance link summary. Every distance
/// uses the same channel seed.
pub fn cmd_snr_cdf(cfg: &ExperimentConfig) -> Result<SnrCdfReport> {
    cfg.validate()?;
    with_workers(cfg.workers, || {
        let mut ctx = RunContext::create(cfg, "snr-cdf")?;
        let seed = derived_seed(cfg.seed, purpose::SNR);
        let mut curves = Vec::new();
        let mut summary = Vec::new();
        for &d in &cfg.sweep.distances_km {
            let link = cfg.link_at(d)?;
            let cdf = ctx.time(&format!("cdf_{}km", km_label(d)), || snr_cdf(&link, cfg.sweep.snr_samples, seed))?;
            let b = link.budget();
            let median = cdf[(cdf.len() - 1) / 2].0;
            for (q, v) in [
                ("eta_t_db", linear_to_db(b.eta_t())),
                ("eta_r_db", linear_to_db(b.eta_r())),
                ("psi", link.psi()),
                ("median_gamma_db", median),
            ] {
                summary.push(QuantityRow { schema_version: CSV_SCHEMA_VERSION, distance_km: d, quantity: q, value: v });
            }
            let rows = cdf.iter().map(|&(g, p)| CdfRow { schema_version: CSV_SCHEMA_VERSION, distance_km: d, gamma_db: g, cdf: p });
            ctx.write_csv(&format!("snr_cdf_{}km.csv", km_label(d)), rows)?;
            curves.push((d, cdf));
        }
        let merged = curves.iter().flat_map(|(d, c)| {
            c.iter().map(move |&(g, p)| CdfRow { schema_version: CSV_SCHEMA_VERSION, distance_km: *d, gamma_db: g, cdf: p })
        });
        ctx.write_csv("snr_cdf.csv", merged)?;
        ctx.write_csv("link_summary.csv", summary)?;
        ctx.write_text("config.toml", &cfg.to_toml())?;
        Ok(SnrCdfReport { manifest: ctx.finish()?, curves })
    })?
}

// ------------------------------------------------------------- bler-curve

pub struct BlerReport {
    pub manifest: RunManifest,
    pub curve: BlerCurve,
    pub monotone: bool,
    /// `Some(hit)` when the curve came from the simulation cache.
    pub cache_hit: Option<bool>,
    /// SNR at BLER 0.9 and 0.1 on the log-odds interpolant.
    pub crossing_90_db: Option<f64>,
    pub crossing_10_db: Option<f64>,
    /// `(distance_km, mean BLER over the SNR distribution)`.
    pub bler_by_distance: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct BlerRow<'a> {
    schema_version: u32,
    code_id: &'a str,
    gamma_db: f64,
    bler: f64,
    ci_low: f64,
    ci_high: f64,
    trials: u64,
    monotone_violation: bool,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    schema_version: u32,
    quantity: &'a str,
    value: f64,
}

/// BLER over the SNR grid with Wilson intervals, a CI-monotonicity flag, the
/// measured cliff location and the mean BLER at each sweep distance.
pub fn cmd_bler_curve(cfg: &ExperimentConfig) -> Result<BlerReport> {
    cfg.validate()?;
    with_workers(cfg.workers, || {
        let mut ctx = RunContext::create(cfg, "bler-curve")?;
        let curve = resolve_curve(cfg, &mut ctx)?;
        let cache_hit = ctx_cache_hit(&ctx);
        let report = check_monotone(&curve);
        let mut flagged = vec![false; curve.points().len()];
        for &(i, j) in &report.violations {
            flagged[i] = true;
            flagged[j] = true;
        }
        let rows = curve.points().iter().zip(&flagged).map(|(p, &f)| BlerRow {
            schema_version: CSV_SCHEMA_VERSION,
            code_id: curve.code_id(),
            gamma_db: p.gamma_db,
            bler: p.bler,
            ci_low: p.ci_low,
            ci_high: p.ci_high,
            trials: p.trials,
            monotone_violation: f,
        });
        ctx.write_csv("bler_curve.csv", rows)?;

        let seed = derived_seed(cfg.seed, purpose::SNR);
        let mut by_distance = Vec::new();
        for &d in &cfg.sweep.distances_km {
            let link = cfg.link_at(d)?;
            let cdf = ctx.time(&format!("bler_at_{}km", km_label(d)), || snr_cdf(&link, cfg.sweep.snr_samples, seed))?;
            let total = cdf.iter().map(|&(g, _)| bler_lookup(&curve, g)).sum::<std::result::Result<f64, _>>()?;
            by_distance.push((d, total / cdf.len() as f64));
        }
        let rows = by_distance.iter().map(|&(d, b)| QuantityRow {
            schema_version: CSV_SCHEMA_VERSION,
            distance_km: d,
            quantity: "mean_bler",
            value: b,
        });
        ctx.write_csv("bler_vs_distance.csv", rows)?;

        let (c90, c10) = (curve.crossing_db(0.9), curve.crossing_db(0.1));
        let nan = f64::NAN;
        let summary = [
            ("monotone", f64::from(u8::from(report.is_monotone()))),
            ("crossing_0.9_db", c90.unwrap_or(nan)),
            ("crossing_0.5_db", curve.crossing_db(0.5).unwrap_or(nan)),
            ("crossing_0.1_db", c10.unwrap_or(nan)),
            ("cliff_width_db", c90.zip(c10).map_or(nan, |(a, b)| b - a)),
        ];
        ctx.write_csv(
            "bler_summary.csv",
            summary.iter().map(|&(q, v)| SummaryRow { schema_version: CSV_SCHEMA_VERSION, quantity: q, value: v }),
        )?;
        ctx.write_text("config.toml", &cfg.to_toml())?;
        Ok(BlerReport {
            manifest: ctx.finish()?,
            monotone: report.is_monotone(),
            curve,
            cache_hit,
            crossing_90_db: c90,
            crossing_10_db: c10,
            bler_by_distance: by_distance,
        })
    })?
}

fn ctx_cache_hit(ctx: &RunContext) -> Option<bool> {
    ctx.cache_uses().last().map(|c| c.hit)
}

// ------------------------------------------------------------ optimize-qm

pub struct PlanReport {
    pub manifest: RunManifest,
    pub result: PlanResult,
    /// The argmin's interval lies below every other candidate's interval.
    pub separated: bool,
}

fn plan_options(cfg: &ExperimentConfig) -> QStarOptions {
    QStarOptions { n_trials: cfg.planner.trials, early_stop_batch: cfg.planner.early_stop_batch }
}

fn ci_separated(r: &PlanResult) -> bool {
    let best = r.row(r.q_star).expect("chosen row");
    r.rows.iter().all(|x| x.q == r.q_star || best.j.ci_high() < x.j.ci_low())
}

/// Full `J(Q, M*(Q))` table at the working distance (or under the forced
/// BLER) and the argmin.
pub fn cmd_optimize_qm(cfg: &ExperimentConfig) -> Result<PlanReport> {
    cfg.validate()?;
    with_workers(cfg.workers, || {
        let mut ctx = RunContext::create(cfg, "optimize-qm")?;
        let plan = ChannelPlan::resolve(cfg, &mut ctx, false)?;
        let link = cfg.link_at(cfg.sweep.distance_km)?;
        let calib = dataset_split(cfg, purpose::CALIBRATION, cfg.planner.dataset_size)?;
        let mode = plan.mode(&link);
        let seed = derived_seed(cfg.seed, purpose::PLANNER);
        let result = ctx.time("q_star", || q_star(&cfg.plan_config(), &mode, &calib, plan_options(cfg), seed))?;
        let separated = ci_separated(&result);
        result.save_csv(&ctx.artifact("plan.csv"))?;
        let summary = [
            ("distance_km", cfg.sweep.distance_km),
            ("forced_bler", cfg.bler.force.unwrap_or(f64::NAN)),
            ("q_star", f64::from(result.q_star)),
            ("m_star", result.m_star as f64),
            ("ci_separated", f64::from(u8::from(separated))),
            ("budget_bits", cfg.plan_config().budget_bits() as f64),
        ];
        ctx.write_csv(
            "plan_summary.csv",
            summary.iter().map(|&(q, v)| SummaryRow { schema_version: CSV_SCHEMA_VERSION, quantity: q, value: v }),
        )?;
        ctx.write_text("config.toml", &cfg.to_toml())?;
        Ok(PlanReport { manifest: ctx.finish()?, result, separated })
    })?
}

// ---------------------------------------------------------------- e2e-sim

const VIS_SEED: u64 = 0x5649_5355;
const VIS_MIN_SIDE: usize = 176;
const VIS_GAIN: f64 = 0.25;

/// Fixed linear latent-to-pixel map used for PSNR and MS-SSIM: a unit
/// channel-mixing vector, grey level `0.5 + 0.25 * (w . x)` per position and
/// frame, upsampled by pixel replication so the short side reaches 176 px
/// (five MS-SSIM scales). The map is the same for every run.
pub struct VisMap {
    map: PerceptualMap,
    dims: [usize; 4],
    scale: usize,
}

impl VisMap {
    pub fn new(dims: [usize; 4]) -> Result<Self> {
        let map = PerceptualMap::random(dims[3], 1, VIS_SEED)?;
        let scale = VIS_MIN_SIDE.div_ceil(dims[0].min(dims[1])).max(1);
        Ok(Self { map, dims, scale })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    /// Grey values at latent resolution, frame-major then row-major.
    pub fn grey(&self, u: &LatentTensor) -> Result<Vec<Vec<f64>>> {
        let p = self.map.apply(u)?;
        let [h, w, f, _] = self.dims;
        Ok((0..f)
            .map(|ff| {
                let mut g = Vec::with_capacity(h * w);
                for hh in 0..h {
                    for ww in 0..w {
                        g.push(0.5 + VIS_GAIN * p.get(hh, ww, ff, 0));
                    }
                }
                g
            })
            .collect())
    }

    fn upsample(&self, g: &[f64]) -> Result<Image> {
        let [h, w, _, _] = self.dims;
        let s = self.scale;
        let mut data = Vec::with_capacity(h * w * s * s);
        for y in 0..h * s {
            for x in 0..w * s {
                data.push(g[(y / s) * w + x / s]);
            }
        }
        Ok(Image::new(h * s, w * s, data)?)
    }

    /// PSNR over all frames, peak 1. Replication leaves the MSE unchanged,
    /// so it is computed at latent resolution.
    pub fn psnr(&self, a: &LatentTensor, b: &LatentTensor) -> Result<f64> {
        let (ga, gb) = (self.grey(a)?.concat(), self.grey(b)?.concat());
        Ok(psnr(&ga, &gb, 1.0)?)
    }

    /// Mean MS-SSIM over frames, dynamic range 1.
    pub fn ms_ssim(&self, a: &LatentTensor, b: &LatentTensor) -> Result<f64> {
        let (ga, gb) = (self.grey(a)?, self.grey(b)?);
        let mut total = 0.0;
        for (x, y) in ga.iter().zip(&gb) {
            total += ms_ssim_with_range(&self.upsample(x)?, &self.upsample(y)?, 1.0)?;
        }
        Ok(total / ga.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    WithoutRefinement,
    WithRefinement,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::WithoutRefinement => "without_refinement",
            Variant::WithRefinement => "with_refinement",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct E2eRecord {
    pub distance_km: f64,
    pub video: usize,
    pub variant: Variant,
    pub q: u32,
    pub m_len: usize,
    pub vpl: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub erased_fraction: f64,
    pub bler_used: f64,
}

pub struct E2eReport {
    pub manifest: RunManifest,
    pub records: Vec<E2eRecord>,
    /// Coded bits over RGB source bits, and over single-channel source bits.
    pub compression_rgb: f64,
    pub compression_single_channel: f64,
    /// Final training loss of the refinement model when it ran.
    pub refine_final_loss: Option<f64>,
}

impl E2eReport {
    pub fn mean_vpl(&self, distance_km: f64, variant: Variant) -> Option<f64> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.distance_km == distance_km && r.variant == variant)
            .map(|r| r.vpl)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Per-video `with - without` VPL differences at one distance.
    pub fn paired_vpl_diffs(&self, distance_km: f64) -> Vec<f64> {
        let pick = |variant| {
            self.records.iter().filter(move |r: &&E2eRecord| r.distance_km == distance_km && r.variant == variant)
        };
        pick(Variant::WithRefinement)
            .zip(pick(Variant::WithoutRefinement))
            .map(|(w, wo)| w.vpl - wo.vpl)
            .collect()
    }
}

type Metric = fn(&E2eRecord) -> f64;

#[derive(Serialize)]
struct MetricRow<'a> {
    schema_version: u32,
    distance_km: f64,
    video: usize,
    variant: &'a str,
    q: u32,
    m_len: usize,
    metric: &'a str,
    value: f64,
}

#[derive(Serialize)]
struct E2eSummaryRow<'a> {
    schema_version: u32,
    distance_km: f64,
    variant: &'a str,
    metric: &'a str,
    mean: f64,
    ci_half_width: f64,
    videos: usize,
}

#[derive(Serialize)]
struct CompressionRow<'a> {
    schema_version: u32,
    definition: &'a str,
    coded_bits: u64,
    source_bits: u64,
    rate: f64,
}

#[derive(Serialize)]
struct LossRow {
    schema_version: u32,
    step: usize,
    loss: f64,
}

fn resolve_qm(cfg: &ExperimentConfig, mode: &ChannelMode, calib: &[LatentTensor]) -> Result<(u32, usize)> {
    let plan = cfg.plan_config();
    match (cfg.quantizer.q.value(), cfg.quantizer.m.value()) {
        (Some(q), Some(m)) => Ok((q, m)),
        (Some(q), None) => Ok((q, m_star(q, &plan)?)),
        _ => {
            let r = q_star(&plan, mode, calib, plan_options(cfg), derived_seed(cfg.seed, purpose::PLANNER))?;
            Ok((r.q_star, r.m_star))
        }
    }
}

/// Trains the toy refinement model on pairs `(u, decode(transmit(encode u)))`
/// drawn through the working-distance channel, i.e. on the erasure
/// statistics it will see.
fn train_refiner(
    cfg: &ExperimentConfig,
    ctx: &mut RunContext,
    plan: &ChannelPlan,
    calib: &[LatentTensor],
    sched: &AlphaSchedule,
) -> Result<(ToyPredictor, f64)> {
    let r = &cfg.refine;
    let link = cfg.link_at(cfg.sweep.distance_km)?;
    let mode = plan.mode(&link);
    let (q, m) = resolve_qm(cfg, &mode, calib)?;
    let codec = calibrate(calib, q, m)?;
    let layout = partition(m, cfg.layout.b_blocks, q, plan.block_spec(cfg), cfg.layout.mask.into())?;
    let train = dataset_split(cfg, purpose::REFINE_DATA, r.train_videos)?;
    let mut pairs = Vec::with_capacity(train.len() * r.train_reps);
    for (i, u) in train.iter().enumerate() {
        let s = codec.encode(u)?;
        for rep in 0..r.train_reps {
            let seed = item_seed(cfg.seed, purpose::REFINE_PAIRS, (i * r.train_reps + rep) as u64);
            let (rx, _) = transmit(&s, &layout, &mode, seed)?;
            pairs.push((u.clone(), codec.decode(&rx)?));
        }
    }
    let spec = TokenSpec { channels: cfg.latent.dims[3], radius: r.radius, modulated: true };
    let init = derived_seed(cfg.seed, purpose::REFINE_INIT);
    let mut net = ToyPredictor::paired(spec, r.rank, CopySource::MirrorCos, r.adapter_scale, init)?
        .with_head(Head::Denoiser { ref_var: r.ref_var })?;
    let tc = TrainConfig {
        steps: r.steps,
        step_size: r.step_size,
        momentum: r.momentum,
        batch: r.batch,
        noise_hint: false,
        anneal: r.anneal,
    };
    let seed = derived_seed(cfg.seed, purpose::REFINE_TRAIN);
    let trace = ctx.time("refine_training", || train_lora(&mut net, &pairs, &tc, sched, seed))?;
    let rows = trace.losses.iter().enumerate().map(|(step, &loss)| LossRow { schema_version: CSV_SCHEMA_VERSION, step, loss });
    ctx.write_csv("refine_loss.csv", rows)?;
    net.save_adapters(&ctx.artifact("refine_adapters.bin"))?;
    Ok((net, trace.losses.last().copied().unwrap_or(f64::NAN)))
}

/// Encode, partition, transmit, decode and optionally refine every test
/// tensor at every sweep distance. Video `i` uses the same channel and
/// sampler seeds at every distance, so the sweep is a paired comparison.
pub fn cmd_e2e_sim(cfg: &ExperimentConfig) -> Result<E2eReport> {
    cfg.validate()?;
    with_workers(cfg.workers, || {
        let mut ctx = RunContext::create(cfg, "e2e-sim")?;
        let plan = ChannelPlan::resolve(cfg, &mut ctx, true)?;
        let calib = dataset_split(cfg, purpose::CALIBRATION, cfg.planner.dataset_size)?;
        let videos = dataset_split(cfg, purpose::TEST_VIDEOS, cfg.e2e.videos)?;
        let sched = cfg.schedule()?;
        let vis = VisMap::new(cfg.latent.dims)?;
        let refiner = if cfg.refine.enabled { Some(train_refiner(cfg, &mut ctx, &plan, &calib, &sched)?) } else { None };

        let mut records = Vec::new();
        for &d in &cfg.sweep.distances_km {
            let link = cfg.link_at(d)?;
            let mode = plan.mode(&link);
            let (q, m) = ctx.time(&format!("plan_{}km", km_label(d)), || resolve_qm(cfg, &mode, &calib))?;
            let codec = calibrate(&calib, q, m)?;
            let layout = partition(m, cfg.layout.b_blocks, q, plan.block_spec(cfg), cfg.layout.mask.into())?;
            let recs = ctx.time(&format!("videos_{}km", km_label(d)), || -> Result<Vec<E2eRecord>> {
                let mut out = Vec::new();
                for (i, u) in videos.iter().enumerate() {
                    let s = codec.encode(u)?;
                    let (rx, pattern) = transmit(&s, &layout, &mode, item_seed(cfg.seed, purpose::CHANNEL, i as u64))?;
                    let u_hat = codec.decode(&rx)?;
                    let record = |variant, r: &LatentTensor| -> Result<E2eRecord> {
                        Ok(E2eRecord {
                            distance_km: d,
                            video: i,
                            variant,
                            q,
                            m_len: m,
                            vpl: vpl(u, r)?,
                            psnr_db: vis.psnr(u, r)?,
                            ms_ssim: vis.ms_ssim(u, r)?,
                            erased_fraction: pattern.erased_fraction(),
                            bler_used: pattern.bler_used,
                        })
                    };
                    out.push(record(Variant::WithoutRefinement, &u_hat)?);
                    if let Some((net, _)) = &refiner {
                        let ic = InContext::new(net, &sched, item_seed(cfg.seed, purpose::REFINE_COND, i as u64));
                        let seed = item_seed(cfg.seed, purpose::REFINE_SAMPLE, i as u64);
                        let refined = sample(&sched, &ic, Some(&u_hat), u.dims(), seed)?;
                        out.push(record(Variant::WithRefinement, &refined)?);
                    }
                }
                Ok(out)
            })?;
            records.extend(recs);
        }

        let metric_rows = records.iter().flat_map(|r| {
            [
                ("vpl", r.vpl),
                ("psnr_db", r.psnr_db),
                ("ms_ssim", r.ms_ssim),
                ("erased_fraction", r.erased_fraction),
                ("bler_used", r.bler_used),
            ]
            .into_iter()
            .map(move |(metric, value)| MetricRow {
                schema_version: CSV_SCHEMA_VERSION,
                distance_km: r.distance_km,
                video: r.video,
                variant: r.variant.label(),
                q: r.q,
                m_len: r.m_len,
                metric,
                value,
            })
        });
        ctx.write_csv("e2e_metrics.csv", metric_rows)?;

        let mut summary = Vec::new();
        for &d in &cfg.sweep.distances_km {
            for variant in [Variant::WithoutRefinement, Variant::WithRefinement] {
                let sel: Vec<&E2eRecord> = records.iter().filter(|r| r.distance_km == d && r.variant == variant).collect();
                if sel.is_empty() {
                    continue;
                }
                let metrics: [(&str, Metric); 4] = [
                    ("vpl", |r| r.vpl),
                    ("psnr_db", |r| r.psnr_db),
                    ("ms_ssim", |r| r.ms_ssim),
                    ("erased_fraction", |r| r.erased_fraction),
                ];
                for (metric, get) in metrics {
                    let vals: Vec<f64> = sel.iter().map(|r| get(r)).collect();
                    let (mean, half) = mean_ci(&vals);
                    summary.push(E2eSummaryRow {
                        schema_version: CSV_SCHEMA_VERSION,
                        distance_km: d,
                        variant: variant.label(),
                        metric,
                        mean,
                        ci_half_width: half,
                        videos: vals.len(),
                    });
                }
            }
        }
        ctx.write_csv("e2e_summary.csv", summary)?;

        let v = &cfg.e2e.video;
        let coded = (cfg.layout.b_blocks * cfg.layout.block_bits) as u64;
        let single = (v.height * v.width * v.frames * v.bit_depth) as u64;
        let rgb = single * v.colour_channels as u64;
        let (compression_rgb, compression_single_channel) = (coded as f64 / rgb as f64, coded as f64 / single as f64);
        let rows = [
            CompressionRow { schema_version: CSV_SCHEMA_VERSION, definition: "rgb", coded_bits: coded, source_bits: rgb, rate: compression_rgb },
            CompressionRow {
                schema_version: CSV_SCHEMA_VERSION,
                definition: "single_channel",
                coded_bits: coded,
                source_bits: single,
                rate: compression_single_channel,
            },
        ];
        ctx.write_csv("compression.csv", rows)?;
        ctx.write_text("config.toml", &cfg.to_toml())?;
        Ok(E2eReport {
            manifest: ctx.finish()?,
            records,
            compression_rgb,
            compression_single_channel,
            refine_final_loss: refiner.map(|(_, l)| l),
        })
    })?
}

// ---------------------------------------------------------- sampler-check

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub metric: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

pub struct SamplerReport {
    pub manifest: RunManifest,
    pub checks: Vec<CheckResult>,
}

impl SamplerReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.check == name)
    }
}

#[derive(Serialize)]
struct CheckRow<'a> {
    schema_version: u32,
    check: &'a str,
    metric: &'a str,
    value: f64,
    threshold: f64,
    passed: bool,
}

/// Returns a fixed noise tensor regardless of input.
struct InjectedNoise(LatentTensor);

impl NoisePredictor for InjectedNoise {
    fn predict(&self, _x: &LatentTensor, _tau: f64, _cond: Option<&LatentTensor>) -> LatentTensor {
        self.0.clone()
    }
}

fn gauss<R: Rng>(dims: [usize; 4], rng: &mut R) -> Result<LatentTensor> {
    let n = dims.iter().product();
    Ok(LatentTensor::new(dims, (0..n).map(|_| rng.sample(StandardNormal)).collect())?)
}

pub const IDENTITY_CASES: u64 = 100;
pub const IDENTITY_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;

/// Exact-noise identity, cut-off round trip and adapter gradient check.
/// `rule` selects the step used by the identity check; `StepRule::Faulty`
/// must make it fail.
pub fn cmd_sampler_check(cfg: &ExperimentConfig, rule: StepRule) -> Result<SamplerReport> {
    cfg.validate()?;
    with_workers(cfg.workers, || {
        let mut ctx = RunContext::create(cfg, "sampler-check")?;
        let sched = cfg.schedule()?;
        let seed = derived_seed(cfg.seed, purpose::SAMPLER_CHECK);
        let mut checks = Vec::new();

        let worst = ctx.time("identity", || -> Result<f64> {
            let mut worst: f64 = 0.0;
            for i in 0..IDENTITY_CASES {
                let mut rng = stream(seed, domain::SAMPLER, i);
                let u = gauss([3, 4, 2, 2], &mut rng)?;
                let tau = 1.0 - rng.random::<f64>();
                let (v, eps) = forward_noise(&u, tau, &sched, rng.random())?;
                let out = ddim_step_with(&v, tau, 0.0, &sched, &InjectedNoise(eps), None, rule)?;
                let num: f64 = out.data().iter().zip(u.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                worst = worst.max((num / (u.power() * u.len() as f64)).sqrt());
            }
            Ok(worst)
        })?;
        checks.push(CheckResult {
            check: "exact_noise_identity".into(),
            metric: "max_relative_error".into(),
            value: worst,
            threshold: IDENTITY_TOL,
            passed: worst <= IDENTITY_TOL,
        });

        let mismatches = ctx.time("cut_off_round_trip", || -> Result<f64> {
            let mut bad = 0u32;
            for i in 0..IDENTITY_CASES {
                let mut rng = stream(seed, domain::SAMPLER, 1000 + i);
                let dims = [rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..4)];
                let (x, y) = (gauss(dims, &mut rng)?, gauss(dims, &mut rng)?);
                if cut_off(&concat_w(&x, &y)?)? != x {
                    bad += 1;
                }
            }
            Ok(f64::from(bad))
        })?;
        checks.push(CheckResult {
            check: "cut_off_round_trip".into(),
            metric: "mismatches".into(),
            value: mismatches,
            threshold: 0.0,
            passed: mismatches == 0.0,
        });

        let rel = ctx.time("gradient_check", || -> Result<f64> {
            let dims = [3, 3, 2, 2];
            let tc = ToyConfig { channels: 2, radius: 1, hidden: 6, rank: 2, modulated: true, ..Default::default() };
            let mut net = ToyPredictor::random(&tc, seed)?;
            let mut rng = stream(seed, domain::LORA_INIT, 1);
            let (l1, l2) = net.layers_mut();
            for b in l1.b.iter_mut().chain(l2.b.iter_mut()) {
                *b = 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            let net = net.with_head(Head::Denoiser { ref_var: cfg.refine.ref_var })?;
            let pairs = vec![(gauss(dims, &mut rng)?, gauss(dims, &mut rng)?), (gauss(dims, &mut rng)?, gauss(dims, &mut rng)?)];
            let draws = draw_batch(pairs.len(), dims, 8, seed);
            Ok(grad_check(&net, &pairs, &draws, &sched, false, GRAD_STEP)?.max_rel_err)
        })?;
        checks.push(CheckResult {
            check: "adapter_gradients".into(),
            metric: "max_relative_error".into(),
            value: rel,
            threshold: GRAD_TOL,
            passed: rel < GRAD_TOL,
        });

        let rows = checks.iter().map(|c| CheckRow {
            schema_version: CSV_SCHEMA_VERSION,
            check: &c.check,
            metric: &c.metric,
            value: c.value,
            threshold: c.threshold,
            passed: c.passed,
        });
        ctx.write_csv("sampler_check.csv", rows)?;
        ctx.write_text("config.toml", &cfg.to_toml())?;
        Ok(SamplerReport { manifest: ctx.finish()?, checks })
    })?
}
