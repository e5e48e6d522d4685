//! Run directory plumbing: lock file, append-only manifest, artifact locations, seeds and
//! content hashes.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{hash_json, ExperimentConfig};
use crate::error::{config, io_err, CliError, Result};

pub const CACHE_ENV: &str = "ANOMALY_RECON_CACHE";
pub const MANIFEST_FILE: &str = "run_manifest.jsonl";
pub const LOCK_FILE: &str = ".lock";

/// Seed for a named random stream, derived from the experiment seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Core(anomaly_recon_core::Error::MissingArtifact(path.to_path_buf())),
        _ => io_err(path)(e),
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash over every file below `dir` (relative path and content), in sorted order.
pub fn dir_sha256(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(file_sha256(&dir.join(&rel))?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Core(anomaly_recon_core::Error::MissingArtifact(dir.to_path_buf())),
        _ => io_err(dir)(e),
    })?;
    for entry in entries {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("below root").to_string_lossy().replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Core(anomaly_recon_core::Error::MissingArtifact(path.to_path_buf())),
        _ => io_err(path)(e),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Exclusive ownership of an output directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        ensure_dir(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(io_err(&path))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    /// Training stopped before its last step; a later invocation resumes it.
    Partial,
    /// Inputs unchanged since a completed run; nothing was recomputed.
    Skipped,
}

/// One line of the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ManifestEvent {
    Configured {
        config_hash: String,
        config: Value,
        time_unix: u64,
    },
    Stage {
        stage: String,
        status: StageStatus,
        input_hash: String,
        /// Artifact name -> `{path, sha256}`.
        artifacts: Value,
        metrics: Value,
        started_unix: u64,
        finished_unix: u64,
    },
}

/// Append-only JSON-lines log of a run: the config it belongs to and every stage outcome.
#[derive(Debug)]
pub struct RunManifest {
    path: PathBuf,
    pub events: Vec<ManifestEvent>,
}

impl RunManifest {
    /// Opens (or starts) the manifest in `dir`. A run directory belongs to one config; a different
    /// config is refused unless `force`, which appends a new `configured` event.
    pub fn open(dir: &Path, cfg: &ExperimentConfig, force: bool) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let mut events = Vec::new();
        if path.exists() {
            let f = File::open(&path).map_err(io_err(&path))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(io_err(&path))?;
                if !line.trim().is_empty() {
                    events.push(serde_json::from_str(&line)?);
                }
            }
        }
        let mut m = Self { path, events };
        let hash = cfg.hash();
        match m.config_hash() {
            Some(stored) if stored == hash => {}
            Some(stored) if !force => {
                return Err(config(format!(
                    "{} belongs to config {}, not {}; use another output_dir or pass --force",
                    dir.display(),
                    &stored[..12],
                    &hash[..12]
                )))
            }
            _ => {
                let config = serde_json::to_value(cfg)?;
                if hash_json(&config) != hash {
                    return Err(config_mismatch());
                }
                m.append(ManifestEvent::Configured { config_hash: hash, config, time_unix: now_unix() })?;
                write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
            }
        }
        Ok(m)
    }

    /// Hash of the config the run currently belongs to, checked against the stored config.
    pub fn config_hash(&self) -> Option<&str> {
        self.events.iter().rev().find_map(|e| match e {
            ManifestEvent::Configured { config_hash, .. } => Some(config_hash.as_str()),
            _ => None,
        })
    }

    pub fn verify(&self) -> Result<()> {
        for e in &self.events {
            if let ManifestEvent::Configured { config_hash, config, .. } = e {
                if &hash_json(config) != config_hash {
                    return Err(config_mismatch());
                }
            }
        }
        Ok(())
    }

    pub fn append(&mut self, event: ManifestEvent) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io_err(&self.path))?;
        let line = serde_json::to_string(&event)?;
        writeln!(f, "{line}").map_err(io_err(&self.path))?;
        f.sync_all().map_err(io_err(&self.path))?;
        self.events.push(event);
        Ok(())
    }

    pub fn record(&mut self, stage: &str, outcome: &StageOutcome, started_unix: u64) -> Result<()> {
        self.append(ManifestEvent::Stage {
            stage: stage.to_string(),
            status: outcome.status.clone(),
            input_hash: outcome.input_hash.clone(),
            artifacts: outcome.artifacts.clone(),
            metrics: outcome.metrics.clone(),
            started_unix,
            finished_unix: now_unix(),
        })
    }

    /// Latest event of `stage`.
    pub fn last_stage(&self, stage: &str) -> Option<&ManifestEvent> {
        self.events.iter().rev().find(|e| matches!(e, ManifestEvent::Stage { stage: s, .. } if s == stage))
    }
}

fn config_mismatch() -> CliError {
    config("stored config does not match its recorded hash")
}

/// What a stage reports back to the manifest.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub status: StageStatus,
    pub input_hash: String,
    pub artifacts: Value,
    pub metrics: Value,
}

/// Completion record kept beside a stage's artifacts; a rerun with the same input hash whose
/// artifacts still hash the same is a no-op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub stage: String,
    pub input_hash: String,
    /// Artifact name -> sha256; artifacts are files or directories relative to the record.
    pub artifacts: std::collections::BTreeMap<String, String>,
    pub metrics: Value,
}

impl CompletionRecord {
    pub fn path(dir: &Path, stage: &str) -> PathBuf {
        dir.join(format!("{}.done.json", stage.replace('/', "_")))
    }

    /// The record in `dir` if it matches `input_hash` and its artifacts are intact.
    pub fn find_valid(dir: &Path, stage: &str, input_hash: &str) -> Result<Option<Self>> {
        let path = Self::path(dir, stage);
        if !path.exists() {
            return Ok(None);
        }
        let rec: Self = read_json(&path)?;
        if rec.input_hash != input_hash {
            return Ok(None);
        }
        for (name, sha) in &rec.artifacts {
            let p = dir.join(name);
            let actual = if p.is_dir() {
                dir_sha256(&p)?
            } else if p.exists() {
                file_sha256(&p)?
            } else {
                return Ok(None);
            };
            if &actual != sha {
                return Ok(None);
            }
        }
        Ok(Some(rec))
    }

    pub fn new(dir: &Path, stage: &str, input_hash: &str, names: &[&str], metrics: Value) -> Result<Self> {
        let mut artifacts = std::collections::BTreeMap::new();
        for name in names {
            let p = dir.join(name);
            let sha = if p.is_dir() { dir_sha256(&p)? } else { file_sha256(&p)? };
            artifacts.insert(name.to_string(), sha);
        }
        Ok(Self { stage: stage.to_string(), input_hash: input_hash.to_string(), artifacts, metrics })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&Self::path(dir, &self.stage), self)
    }

    pub fn outcome(&self, dir: &Path, status: StageStatus) -> StageOutcome {
        let artifacts = self
            .artifacts
            .iter()
            .map(|(name, sha)| (name.clone(), json!({ "path": dir.join(name), "sha256": sha })))
            .collect::<serde_json::Map<_, _>>();
        StageOutcome {
            status,
            input_hash: self.input_hash.clone(),
            artifacts: Value::Object(artifacts),
            metrics: self.metrics.clone(),
        }
    }
}

/// Where a run keeps its inputs and outputs.
#[derive(Clone, Debug)]
pub struct Layout {
    pub output: PathBuf,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub scores: PathBuf,
    pub reports: PathBuf,
}

impl Layout {
    /// With `ANOMALY_RECON_CACHE` set, datasets and checkpoints live below the cache root keyed by
    /// their input hashes, so runs with identical inputs share them.
    pub fn new(cfg: &ExperimentConfig, cache: Option<PathBuf>) -> Self {
        let output = cfg.output_dir.clone();
        let ds_hash = dataset_hash(cfg);
        let dataset = match (&cfg.dataset.dir, &cache) {
            (Some(d), _) => d.clone(),
            (None, Some(c)) => c.join("datasets").join(&ds_hash[..16]),
            (None, None) => output.join("dataset"),
        };
        let checkpoints = match &cache {
            Some(c) => c.join("checkpoints").join(&cfg.hash()[..16]),
            None => output.join("checkpoints"),
        };
        Self { scores: output.join("scores"), reports: output.join("reports"), output, dataset, checkpoints }
    }

    pub fn from_env(cfg: &ExperimentConfig) -> Self {
        let cache = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        Self::new(cfg, cache)
    }
}

/// Hash of everything that determines the generated dataset.
pub fn dataset_hash(cfg: &ExperimentConfig) -> String {
    let mut ds = serde_json::to_value(&cfg.dataset).expect("dataset config serializes");
    ds["dir"] = Value::Null;
    hash_json(&json!({ "seed": cfg.seed, "dataset": ds, "template_points": cfg.preprocess.template_points, "format": 1 }))
}
