//! Experiment configuration, orchestration and CSV output.
//!
//! Each command validates the whole [`ExperimentConfig`] first, then writes
//! long-format CSVs (first column `schema_version`) and a
//! [`RunManifest`] into `<output_dir>/<command>/`. CSVs carry no timestamps
//! and every random draw comes from a stream derived from the master seed,
//! so a rerun with the same config and seed is byte-identical.

mod commands;
mod config;
mod run;

pub use commands::{
    build_code, dataset_split, cmd_bler_curve, cmd_e2e_sim, cmd_optimize_qm, cmd_sampler_check, cmd_snr_cdf, derived_seed,
    BlerReport, CheckResult, E2eRecord, E2eReport, PlanReport, SamplerReport, SnrCdfReport, Variant, VisMap, purpose,
};
pub use config::{
    Auto, AutoOr, BlerSection, BlerSource, CodeKind, CodeSection, ConfigIssue, E2eChannel, E2eSection, ExperimentConfig,
    FadingSection, LatentSection, LayoutSection, LinkSection, MaskKind, PlannerSection, QuantizerSection, RefineSection,
    ScheduleSection, SweepSection, VideoSection, CONFIG_SCHEMA_VERSION,
};
pub use run::{
    list_files, module_versions, with_workers, CacheUse, RunContext, RunManifest, StageTiming, CSV_SCHEMA_VERSION,
    MANIFEST_NAME,
};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override {0}")]
    Override(String),
    #[error("invalid config:\n{}", .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ConfigIssue>),
    #[error("{dir} holds files no earlier run listed: {files:?}")]
    DirtyOutput { dir: PathBuf, files: Vec<String> },
    #[error("manifest disagrees with the directory: missing {missing:?}, orphans {orphans:?}")]
    ManifestMismatch { missing: Vec<String>, orphans: Vec<String> },
    #[error("worker pool: {0}")]
    Workers(String),
    #[error(transparent)]
    Channel(#[from] crate::channel::ChannelError),
    #[error(transparent)]
    Ldpc(#[from] crate::ldpc::LdpcError),
    #[error(transparent)]
    Si(#[from] crate::si_transport::SiError),
    #[error(transparent)]
    Latent(#[from] crate::latent::LatentError),
    #[error(transparent)]
    Plan(#[from] crate::planner::PlanError),
    #[error(transparent)]
    Gen(#[from] crate::generative::GenError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
