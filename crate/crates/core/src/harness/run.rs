use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::{HarnessError, Result};

pub const MANIFEST_NAME: &str = "manifest.toml";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Version of every long-format CSV the harness writes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Versions of the modules whose output formats a run depends on.
pub fn module_versions() -> BTreeMap<String, String> {
    [
        ("crate", env!("CARGO_PKG_VERSION")),
        ("harness_csv", "1"),
        ("planner_csv", "1"),
        ("quantizer_params", "1"),
        ("lora_checkpoint", "1"),
        ("si_container", "1"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheUse {
    pub path: String,
    pub hit: bool,
}

/// What a run produced. `files` are relative to the command directory and
/// list every file in it except the manifest itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub module_versions: BTreeMap<String, String>,
    pub stages: Vec<StageTiming>,
    pub files: Vec<String>,
    #[serde(default)]
    pub cache: Vec<CacheUse>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn stage_seconds(&self, name: &str) -> Option<f64> {
        self.stages.iter().find(|s| s.name == name).map(|s| s.seconds)
    }
}

/// Output directory of one command run, `<output_dir>/<command>`.
///
/// Files from a previous run listed in its manifest are removed first; any
/// other file already present is an error, so the new manifest always lists
/// exactly what is on disk.
pub struct RunContext {
    root: PathBuf,
    dir: PathBuf,
    command: String,
    config_hash: String,
    seed: u64,
    files: BTreeSet<String>,
    stages: Vec<StageTiming>,
    cache: Vec<CacheUse>,
}

impl RunContext {
    pub fn create(cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        let root = cfg.output_dir.clone();
        let dir = root.join(command);
        fs::create_dir_all(&dir)?;
        let manifest = dir.join(MANIFEST_NAME);
        if manifest.exists() {
            let old = RunManifest::load(&manifest)?;
            for f in &old.files {
                let p = dir.join(f);
                if p.is_file() {
                    fs::remove_file(p)?;
                }
            }
            fs::remove_file(&manifest)?;
        }
        let leftover = list_files(&dir)?;
        if !leftover.is_empty() {
            return Err(HarnessError::DirtyOutput { dir, files: leftover.into_iter().collect() });
        }
        Ok(Self {
            root,
            dir,
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            files: BTreeSet::new(),
            stages: Vec::new(),
            cache: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Registers `name` as an artifact and returns its path.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        self.files.insert(name.to_string());
        self.dir.join(name)
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let mut w = csv::Writer::from_path(self.artifact(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        fs::write(self.artifact(name), text)?;
        Ok(())
    }

    /// Runs `f` and records its wall time under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.stages.push(StageTiming { name: stage.to_string(), seconds: t.elapsed().as_secs_f64() });
        out
    }

    pub fn record_cache(&mut self, path: &Path, hit: bool) {
        self.cache.push(CacheUse { path: path.display().to_string(), hit });
    }

    pub fn cache_uses(&self) -> &[CacheUse] {
        &self.cache
    }

    /// Writes the manifest and checks it against the directory listing.
    pub fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            module_versions: module_versions(),
            stages: self.stages,
            files: self.files.iter().cloned().collect(),
            cache: self.cache,
        };
        let text = toml::to_string(&manifest).map_err(|e| HarnessError::Parse(e.to_string()))?;
        fs::write(self.dir.join(MANIFEST_NAME), text)?;
        let mut on_disk = list_files(&self.dir)?;
        on_disk.remove(MANIFEST_NAME);
        if on_disk != self.files {
            return Err(HarnessError::ManifestMismatch {
                missing: self.files.difference(&on_disk).cloned().collect(),
                orphans: on_disk.difference(&self.files).cloned().collect(),
            });
        }
        Ok(manifest)
    }
}

/// Relative paths of all files below `dir`, with `/` separators.
pub fn list_files(dir: &Path) -> Result<BTreeSet<String>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeSet<String>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                let rel = path.strip_prefix(base).expect("below base");
                out.insert(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = BTreeSet::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// Runs `f` on a pool of at most `workers` threads (0 means the global
/// pool). Results never depend on the worker count.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Workers(e.to_string()))?;
    Ok(pool.install(f))
}
