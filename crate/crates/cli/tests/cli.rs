use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn gsc(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsc"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] = &[
    "--override",
    "latent.dims=[4, 4, 2, 4]",
    "--override",
    "layout.b_blocks=8",
    "--override",
    "layout.block_bits=256",
    "--override",
    "layout.granularity=32",
    "--override",
    "quantizer.q=4",
    "--override",
    "bler.source=step:1.2",
    "--override",
    "sweep.snr_samples=500",
    "--override",
    "e2e.videos=3",
];

#[test]
fn sampler_check_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let ok = gsc(tmp.path(), &["sampler-check"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert_eq!(stdout(&ok).matches("PASS").count(), 3);
    let bad = gsc(tmp.path(), &["sampler-check", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("FAIL exact_noise_identity"));
}

#[test]
fn invalid_config_is_reported_with_field_paths() {
    let tmp = TempDir::new().unwrap();
    let o = gsc(tmp.path(), &["--override", "layout.rate=3.0", "--override", "planner.trials=0", "snr-cdf"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("layout") && err.contains("planner.trials"), "{err}");
    assert!(!tmp.path().join("snr-cdf").exists());
}

#[test]
fn config_file_and_flags_combine() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "seed = 5\n[sweep]\ndistances_km = [700.0]\n").unwrap();
    let o = gsc(tmp.path(), &["--config", cfg.to_str().unwrap(), "--seed", "9", "--workers", "1", "show-config"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("seed = 9"));
    assert!(text.contains("distances_km = [700.0]"));
    assert!(text.contains("workers = 1"));
}

#[test]
fn subcommands_write_their_directories() {
    let tmp = TempDir::new().unwrap();
    for cmd in ["snr-cdf", "e2e-sim"] {
        let mut args = SMALL.to_vec();
        args.push(cmd);
        let o = gsc(tmp.path(), &args);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(tmp.path().join(cmd).join("manifest.toml").is_file());
    }
    let o = gsc(tmp.path(), &[SMALL, &["--override", "bler.force=0.0", "--override", "quantizer.q=\"auto\"", "optimize-qm"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("Q*="));
}
