use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{db_to_linear, dbm_to_watts, FadingParams, LinkBudget, SatelliteLink};
use crate::generative::AlphaSchedule;
use crate::latent::SynthConfig;
use crate::planner::{fits_budget, m_star, PlanConfig};
use crate::si_transport::{partition, BlockSpec, MaskMode, MAX_Q};

use super::{HarnessError, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
/// Largest bits one feature may carry in the latent codec.
const MAX_FEATURE_BITS: f64 = 52.0;

/// One validation failure, addressed by its dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Either the literal string `"auto"` or a concrete value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOr<T> {
    Auto(Auto),
    Value(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Auto {
    Auto,
}

impl<T: Copy> AutoOr<T> {
    pub fn value(&self) -> Option<T> {
        match self {
            AutoOr::Auto(_) => None,
            AutoOr::Value(v) => Some(*v),
        }
    }
}

/// Where BLER values come from: Monte Carlo on the configured code, a curve
/// file, or an ideal cliff at a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BlerSource {
    Simulate,
    File(PathBuf),
    Step(f64),
}

impl TryFrom<String> for BlerSource {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "simulate" {
            return Ok(BlerSource::Simulate);
        }
        if let Some(p) = s.strip_prefix("file:") {
            if p.is_empty() {
                return Err("file: needs a path".into());
            }
            return Ok(BlerSource::File(PathBuf::from(p)));
        }
        if let Some(t) = s.strip_prefix("step:") {
            return t.parse::<f64>().map(BlerSource::Step).map_err(|e| format!("step threshold {t:?}: {e}"));
        }
        Err(format!("unknown BLER source {s:?} (simulate | file:<path> | step:<threshold_db>)"))
    }
}

impl From<BlerSource> for String {
    fn from(b: BlerSource) -> String {
        match b {
            BlerSource::Simulate => "simulate".into(),
            BlerSource::File(p) => format!("file:{}", p.display()),
            BlerSource::Step(t) => format!("step:{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkSection {
    pub p_t_w: f64,
    pub p_s_w: f64,
    pub g_t_dbi: f64,
    pub g_s_dbi: f64,
    pub g_r_dbi: f64,
    pub wavelength_m: f64,
    pub path_loss_exponent: f64,
    pub noise_s_dbm: f64,
    pub noise_r_dbm: f64,
}

impl Default for LinkSection {
    fn default() -> Self {
        Self {
            p_t_w: 1.0,
            p_s_w: 30.0,
            g_t_dbi: 3.0,
            g_s_dbi: 50.0,
            g_r_dbi: 50.0,
            wavelength_m: 0.028,
            path_loss_exponent: 2.0,
            noise_s_dbm: -98.0,
            noise_r_dbm: -98.0,
        }
    }
}

impl LinkSection {
    /// Linear budget with both hops at `distance_km`.
    pub fn budget(&self, distance_km: f64) -> LinkBudget {
        LinkBudget {
            p_t: self.p_t_w,
            p_s: self.p_s_w,
            g_t: db_to_linear(self.g_t_dbi),
            g_s: db_to_linear(self.g_s_dbi),
            g_r: db_to_linear(self.g_r_dbi),
            lambda_c: self.wavelength_m,
            alpha: self.path_loss_exponent,
            d_ts: distance_km * 1e3,
            d_sr: distance_km * 1e3,
            sigma2_s: dbm_to_watts(self.noise_s_dbm),
            sigma2_r: dbm_to_watts(self.noise_r_dbm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FadingSection {
    pub m: u32,
    pub b: f64,
    pub omega: f64,
}

impl Default for FadingSection {
    fn default() -> Self {
        Self { m: 2, b: 0.063, omega: 0.0005 }
    }
}

impl FadingSection {
    pub fn params(&self) -> Result<FadingParams> {
        Ok(FadingParams::new(self.m, self.b, self.omega)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub distances_km: Vec<f64>,
    /// Working distance for single-distance commands (optimize-qm and the
    /// refinement training channel).
    pub distance_km: f64,
    pub snr_samples: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { distances_km: vec![400.0, 600.0, 800.0, 1000.0], distance_km: 600.0, snr_samples: 100_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Regular,
    Alist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodeSection {
    pub kind: CodeKind,
    pub n: usize,
    pub wc: usize,
    pub wr: usize,
    pub seed: u64,
    pub alist: Option<PathBuf>,
    pub max_iters: usize,
}

impl Default for CodeSection {
    fn default() -> Self {
        Self { kind: CodeKind::Regular, n: 4096, wc: 3, wr: 6, seed: 1, alist: None, max_iters: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlerSection {
    pub source: BlerSource,
    pub grid_db: Vec<f64>,
    pub trials: u64,
    /// Defaults to `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// Forces every block to be erased with this probability, bypassing the
    /// channel.
    pub force: Option<f64>,
}

impl Default for BlerSection {
    fn default() -> Self {
        Self {
            source: BlerSource::Simulate,
            grid_db: (0..12).map(|i| 0.5 + 0.15 * f64::from(i)).map(|g| (g * 100.0).round() / 100.0).collect(),
            trials: 2000,
            cache_dir: None,
            force: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Contiguous,
    Strided,
}

impl From<MaskKind> for MaskMode {
    fn from(m: MaskKind) -> MaskMode {
        match m {
            MaskKind::Contiguous => MaskMode::Contiguous,
            MaskKind::Strided => MaskMode::Strided,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSection {
    pub b_blocks: usize,
    pub block_bits: usize,
    pub rate: f64,
    pub granularity: usize,
    pub mask: MaskKind,
}

impl Default for LayoutSection {
    fn default() -> Self {
        Self { b_blocks: 85, block_bits: 16_200, rate: 0.5, granularity: 16 * 16 * 7, mask: MaskKind::Contiguous }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerSection {
    pub q: AutoOr<u32>,
    pub m: AutoOr<usize>,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self { q: AutoOr::Auto(Auto::Auto), m: AutoOr::Auto(Auto::Auto) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSection {
    pub q_candidates: Vec<u32>,
    pub trials: usize,
    pub early_stop_batch: Option<usize>,
    pub dataset_size: usize,
}

impl Default for PlannerSection {
    fn default() -> Self {
        Self { q_candidates: vec![2, 3, 4, 5], trials: 64, early_stop_batch: None, dataset_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentSection {
    pub dims: [usize; 4],
    pub rho_space: f64,
    pub rho_time: f64,
    pub scale_decay: f64,
    pub mean_spread: f64,
}

impl Default for LatentSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            dims: s.dims,
            rho_space: s.rho_space,
            rho_time: s.rho_time,
            scale_decay: s.scale_decay,
            mean_spread: s.mean_spread,
        }
    }
}

impl LatentSection {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            dims: self.dims,
            rho_space: self.rho_space,
            rho_time: self.rho_time,
            scale_decay: self.scale_decay,
            mean_spread: self.mean_spread,
        }
    }

    pub fn features(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { steps: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum E2eChannel {
    Abstract,
    FullPhy,
}

/// Source video geometry, used only to report compression rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoSection {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub colour_channels: usize,
    pub bit_depth: usize,
}

impl Default for VideoSection {
    fn default() -> Self {
        Self { height: 512, width: 512, frames: 49, colour_channels: 3, bit_depth: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct E2eSection {
    pub videos: usize,
    pub channel: E2eChannel,
    pub video: VideoSection,
}

impl Default for E2eSection {
    fn default() -> Self {
        Self { videos: 8, channel: E2eChannel::Abstract, video: VideoSection::default() }
    }
}

/// The toy refinement model and its training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSection {
    pub enabled: bool,
    pub train_videos: usize,
    pub train_reps: usize,
    pub radius: usize,
    pub rank: usize,
    pub adapter_scale: f64,
    pub ref_var: f64,
    pub steps: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub batch: usize,
    pub anneal: bool,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self {
            enabled: false,
            train_videos: 32,
            train_reps: 4,
            radius: 1,
            rank: 4,
            adapter_scale: 1.0,
            ref_var: 0.3,
            steps: 1500,
            step_size: 0.0003,
            momentum: 0.9,
            batch: 8,
            anneal: true,
        }
    }
}

/// Everything a harness command needs. Parsed from TOML; unknown keys are
/// rejected and missing keys take the documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Rayon worker cap; 0 uses every core. Never affects results.
    pub workers: usize,
    pub link: LinkSection,
    pub fading: FadingSection,
    /// Downlink fading; the uplink parameters when absent.
    pub downlink_fading: Option<FadingSection>,
    pub sweep: SweepSection,
    pub code: CodeSection,
    pub bler: BlerSection,
    pub layout: LayoutSection,
    pub quantizer: QuantizerSection,
    pub planner: PlannerSection,
    pub latent: LatentSection,
    pub schedule: ScheduleSection,
    pub e2e: E2eSection,
    pub refine: RefineSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 2025,
            output_dir: PathBuf::from("gsc-out"),
            workers: 0,
            link: LinkSection::default(),
            fading: FadingSection::default(),
            downlink_fading: None,
            sweep: SweepSection::default(),
            code: CodeSection::default(),
            bler: BlerSection::default(),
            layout: LayoutSection::default(),
            quantizer: QuantizerSection::default(),
            planner: PlannerSection::default(),
            latent: LatentSection::default(),
            schedule: ScheduleSection::default(),
            e2e: E2eSection::default(),
            refine: RefineSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` where `key` is a dotted path such as
    /// `layout.b_blocks`. The value is read as a TOML value, falling back to
    /// a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let bad = |m: String| HarnessError::Override(format!("{assignment}: {m}"));
        let (key, raw) = assignment.split_once('=').ok_or_else(|| bad("expected key=value".into()))?;
        let (key, raw) = (key.trim(), raw.trim());
        if key.is_empty() {
            return Err(bad("empty key".into()));
        }
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Table::try_from(&*self).map_err(|e| bad(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let mut table = &mut root;
        for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
            let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry.as_table_mut().ok_or_else(|| bad(format!("{} is not a table", parts[..=i].join("."))))?;
        }
        table.insert(parts[parts.len() - 1].to_string(), value);
        *self = root.try_into().map_err(|e: toml::de::Error| bad(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 over the canonical TOML with `output_dir` and `workers`
    /// cleared: neither changes any result.
    pub fn hash(&self) -> String {
        let canon = Self { output_dir: PathBuf::new(), workers: 0, ..self.clone() };
        hex::encode(Sha256::digest(canon.to_toml().as_bytes()))
    }

    pub fn downlink(&self) -> &FadingSection {
        self.downlink_fading.as_ref().unwrap_or(&self.fading)
    }

    pub fn link_at(&self, distance_km: f64) -> Result<SatelliteLink> {
        Ok(SatelliteLink::new(self.link.budget(distance_km), self.fading.params()?, self.downlink().params()?)?)
    }

    pub fn plan_config(&self) -> PlanConfig {
        PlanConfig {
            b_blocks: self.layout.b_blocks,
            block_bits: self.layout.block_bits,
            rate: self.layout.rate,
            granularity: self.layout.granularity,
            q_candidates: self.planner.q_candidates.clone(),
        }
    }

    pub fn schedule(&self) -> Result<AlphaSchedule> {
        Ok(AlphaSchedule::cosine(self.schedule.steps)?)
    }

    /// Every cross-module constraint, checked before any compute. Returns
    /// all failures at once.
    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Invalid(issues))
        }
    }

    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut push = |path: &str, message: String| out.push(ConfigIssue { path: path.into(), message });
        let pos = |v: f64| v > 0.0 && v.is_finite();

        if self.schema_version != CONFIG_SCHEMA_VERSION {
            push("schema_version", format!("unsupported version {} (expected {CONFIG_SCHEMA_VERSION})", self.schema_version));
        }

        let l = &self.link;
        for (name, v) in [
            ("p_t_w", l.p_t_w),
            ("p_s_w", l.p_s_w),
            ("wavelength_m", l.wavelength_m),
            ("path_loss_exponent", l.path_loss_exponent),
        ] {
            if !pos(v) {
                push(&format!("link.{name}"), format!("must be positive and finite, got {v}"));
            }
        }
        for (name, v) in [
            ("g_t_dbi", l.g_t_dbi),
            ("g_s_dbi", l.g_s_dbi),
            ("g_r_dbi", l.g_r_dbi),
            ("noise_s_dbm", l.noise_s_dbm),
            ("noise_r_dbm", l.noise_r_dbm),
        ] {
            if !v.is_finite() {
                push(&format!("link.{name}"), format!("must be finite, got {v}"));
            }
        }
        for (path, f) in [("fading", Some(&self.fading)), ("downlink_fading", self.downlink_fading.as_ref())] {
            if let Some(f) = f {
                if let Err(e) = f.params() {
                    push(path, e.to_string());
                }
            }
        }

        let s = &self.sweep;
        if s.distances_km.is_empty() {
            push("sweep.distances_km", "at least one distance is required".into());
        }
        if let Some(d) = s.distances_km.iter().find(|&&d| !pos(d)) {
            push("sweep.distances_km", format!("distance {d} must be positive"));
        }
        if !pos(s.distance_km) {
            push("sweep.distance_km", format!("must be positive, got {}", s.distance_km));
        }
        if s.snr_samples == 0 {
            push("sweep.snr_samples", "must be >= 1".into());
        }

        let c = &self.code;
        match c.kind {
            CodeKind::Regular => {
                if c.n == 0 || c.wc < 2 || c.wr <= c.wc || (c.n * c.wc) % c.wr != 0 {
                    push("code", format!("no regular ({}, {}) code of length {}", c.wc, c.wr, c.n));
                }
            }
            CodeKind::Alist => {
                if c.alist.as_ref().is_none_or(|p| p.as_os_str().is_empty()) {
                    push("code.alist", "kind = \"alist\" needs a path".into());
                }
            }
        }
        if c.max_iters == 0 {
            push("code.max_iters", "must be >= 1".into());
        }

        let b = &self.bler;
        if b.source == BlerSource::Simulate {
            if b.grid_db.is_empty() {
                push("bler.grid_db", "simulation needs at least one SNR point".into());
            }
            if b.grid_db.iter().any(|g| !g.is_finite()) || b.grid_db.windows(2).any(|w| w[1] <= w[0]) {
                push("bler.grid_db", "must be finite and strictly increasing".into());
            }
            if b.trials == 0 {
                push("bler.trials", "must be >= 1".into());
            }
        }
        if let BlerSource::Step(t) = b.source {
            if !t.is_finite() {
                push("bler.source", format!("step threshold {t} must be finite"));
            }
        }
        if let Some(p) = b.force {
            if !(0.0..=1.0).contains(&p) {
                push("bler.force", format!("probability {p} outside [0, 1]"));
            }
        }

        let plan = self.plan_config();
        let mut layout_ok = true;
        if let Err(e) = plan.validate() {
            push("layout", e.to_string());
            layout_ok = false;
        } else if plan.block_spec().info_bits == 0 {
            push("layout.rate", "floor(K*R) must be at least one bit".into());
            layout_ok = false;
        }

        let features = self.latent.features();
        let q = self.quantizer.q.value();
        if let Some(q) = q {
            if !(2..=MAX_Q).contains(&q) {
                push("quantizer.q", format!("{q} outside 2..={MAX_Q}"));
            }
        }
        let q_ok = q.is_none_or(|q| (2..=MAX_Q).contains(&q));
        match (q, self.quantizer.m.value()) {
            (None, Some(_)) => push("quantizer.m", "a fixed M needs a fixed Q".into()),
            (Some(q), Some(m)) if q_ok && layout_ok => {
                if let Some(msg) = capacity_issue(q, m, &plan, self.layout.mask.into(), features) {
                    push("quantizer.m", msg);
                }
            }
            (Some(q), None) if q_ok && layout_ok => match m_star(q, &plan) {
                Ok(m) => {
                    if let Some(msg) = capacity_issue(q, m, &plan, self.layout.mask.into(), features) {
                        push("quantizer.m", format!("auto M*={m}: {msg}"));
                    }
                }
                Err(e) => push("quantizer.q", e.to_string()),
            },
            (None, None) if layout_ok => {
                let p = &self.planner;
                if p.q_candidates.is_empty() {
                    push("planner.q_candidates", "at least one candidate is required".into());
                }
                if p.q_candidates.iter().all(|&q| m_star(q, &plan).is_err()) {
                    push("planner.q_candidates", "no candidate fits the bit budget".into());
                }
            }
            _ => {}
        }

        let p = &self.planner;
        if p.trials == 0 {
            push("planner.trials", "must be >= 1".into());
        }
        if p.dataset_size == 0 {
            push("planner.dataset_size", "must be >= 1".into());
        }
        if p.early_stop_batch == Some(0) {
            push("planner.early_stop_batch", "must be >= 1 when set".into());
        }

        if let Err(e) = self.latent.synth().validate() {
            push("latent", e.to_string());
        }
        if let Err(e) = self.schedule() {
            push("schedule.steps", e.to_string());
        }

        let e = &self.e2e;
        if e.videos == 0 {
            push("e2e.videos", "must be >= 1".into());
        }
        let v = &e.video;
        if [v.height, v.width, v.frames, v.colour_channels, v.bit_depth].contains(&0) {
            push("e2e.video", "all source video dimensions must be positive".into());
        }
        if e.channel == E2eChannel::FullPhy && c.kind == CodeKind::Regular && c.n != self.layout.block_bits {
            push("e2e.channel", format!("full_phy needs code.n ({}) == layout.block_bits ({})", c.n, self.layout.block_bits));
        }
        if e.channel == E2eChannel::FullPhy && self.bler.force.is_none() && q.is_none() {
            push("e2e.channel", "full_phy needs a fixed quantizer.q; the planner searches Q on the abstract channel".into());
        }

        let r = &self.refine;
        if r.enabled {
            let ch = self.latent.dims[3];
            if r.rank == 0 || r.rank > ch {
                push("refine.rank", format!("{} outside 1..={ch}", r.rank));
            }
            for (name, n) in [("train_videos", r.train_videos), ("train_reps", r.train_reps), ("batch", r.batch)] {
                if n == 0 {
                    push(&format!("refine.{name}"), "must be >= 1".into());
                }
            }
            if !pos(r.step_size) {
                push("refine.step_size", format!("must be positive, got {}", r.step_size));
            }
            if !(0.0..1.0).contains(&r.momentum) {
                push("refine.momentum", format!("{} outside [0, 1)", r.momentum));
            }
            if !pos(r.ref_var) {
                push("refine.ref_var", format!("must be positive, got {}", r.ref_var));
            }
            if !pos(r.adapter_scale) {
                push("refine.adapter_scale", format!("must be positive, got {}", r.adapter_scale));
            }
        }
        out
    }
}

/// Why `(q, m)` cannot be carried by the layout, if it cannot.
fn capacity_issue(q: u32, m: usize, plan: &PlanConfig, mask: MaskMode, features: usize) -> Option<String> {
    let budget = plan.budget_bits();
    if m == 0 {
        return Some("M must be >= 1".into());
    }
    if !fits_budget(q, m as u64, budget) {
        return Some(format!(
            "M*log2(Q) = {:.1} bits exceeds the budget B*floor(K*R) = {budget}",
            m as f64 * f64::from(q).log2()
        ));
    }
    if m % plan.granularity != 0 {
        return Some(format!("M={m} is not a multiple of the granularity {}", plan.granularity));
    }
    let digits = m.div_ceil(features);
    if digits as f64 * f64::from(q).log2() > MAX_FEATURE_BITS {
        return Some(format!("{digits} digits per feature exceed {MAX_FEATURE_BITS} bits"));
    }
    if let Err(e) = partition(m, plan.b_blocks, q, BlockSpec::from_rate(plan.block_bits, plan.rate), mask) {
        return Some(format!("no feasible partition: {e}"));
    }
    None
}
