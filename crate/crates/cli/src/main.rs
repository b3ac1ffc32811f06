use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gsc_core::generative::StepRule;
use gsc_core::harness::{
    cmd_bler_curve, cmd_e2e_sim, cmd_optimize_qm, cmd_sampler_check, cmd_snr_cdf, ExperimentConfig, Variant,
};

/// Link-level simulator for generative semantic video transport over a
/// satellite relay.
#[derive(Parser)]
#[command(name = "gsc", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for all cores. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// `section.key=value`, repeatable. Applied after --config.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Empirical end-to-end SNR CDF per relay distance.
    SnrCdf,
    /// LDPC block error rate over the SNR grid, and mean BLER per distance.
    BlerCurve,
    /// Quantizer alphabet and SI length minimising the expected latent loss.
    OptimizeQm,
    /// End-to-end latent transport with and without refinement.
    E2eSim,
    /// Sampler and gradient self-checks; exits nonzero on failure.
    SamplerCheck {
        /// Use a deliberately wrong denoising step; the check must fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Print the effective config as TOML.
    ShowConfig,
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let cfg = load(&cli.common)?;
    let out = |cmd: &str| cfg.output_dir.join(cmd).display().to_string();
    match cli.command {
        Command::ShowConfig => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
        }
        Command::SnrCdf => {
            let r = cmd_snr_cdf(&cfg)?;
            for (d, c) in &r.curves {
                let median = c[(c.len() - 1) / 2].0;
                println!("{d:>7.0} km  median SNR {median:6.2} dB");
            }
            println!("wrote {}", out("snr-cdf"));
        }
        Command::BlerCurve => {
            let r = cmd_bler_curve(&cfg)?;
            for p in r.curve.points() {
                println!("{:6.2} dB  BLER {:.4}  [{:.4}, {:.4}]", p.gamma_db, p.bler, p.ci_low, p.ci_high);
            }
            println!("monotone within CIs: {}", r.monotone);
            for (d, b) in &r.bler_by_distance {
                println!("{d:>7.0} km  mean BLER {b:.3}");
            }
            if let Some(hit) = r.cache_hit {
                println!("cache {}", if hit { "hit" } else { "miss" });
            }
            println!("wrote {}", out("bler-curve"));
        }
        Command::OptimizeQm => {
            let r = cmd_optimize_qm(&cfg)?;
            for row in &r.result.rows {
                println!("Q={:<3} M*={:<8} J={:.5} +- {:.5}", row.q, row.m_star, row.j.mean, row.j.half_width);
            }
            println!("Q*={} M*={} (intervals separated: {})", r.result.q_star, r.result.m_star, r.separated);
            println!("wrote {}", out("optimize-qm"));
        }
        Command::E2eSim => {
            let r = cmd_e2e_sim(&cfg)?;
            for &d in &cfg.sweep.distances_km {
                let without = r.mean_vpl(d, Variant::WithoutRefinement).unwrap_or(f64::NAN);
                match r.mean_vpl(d, Variant::WithRefinement) {
                    Some(with) => println!("{d:>7.0} km  VPL {without:.5}  refined {with:.5}"),
                    None => println!("{d:>7.0} km  VPL {without:.5}"),
                }
            }
            println!(
                "compression {:.3}% (RGB), {:.3}% (single channel)",
                100.0 * r.compression_rgb,
                100.0 * r.compression_single_channel
            );
            println!("wrote {}", out("e2e-sim"));
        }
        Command::SamplerCheck { inject_fault } => {
            let rule = if inject_fault { StepRule::Faulty } else { StepRule::Standard };
            let r = cmd_sampler_check(&cfg, rule)?;
            for c in &r.checks {
                let verdict = if c.passed { "PASS" } else { "FAIL" };
                println!("{verdict} {:<22} {} = {:.3e} (threshold {:.0e})", c.check, c.metric, c.value, c.threshold);
            }
            println!("wrote {}", out("sampler-check"));
            return Ok(r.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
