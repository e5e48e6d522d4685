//! Experiment configuration: profile defaults, file overrides, validation and hashing.
//!
//! A config file (TOML, or JSON when the extension is `.json`) only lists the keys it changes;
//! everything else comes from the selected profile. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use anomaly_recon_core::data_pipeline::{AbnormalityClass, AnomalyConfig, PhantomConfig};
use anomaly_recon_core::discriminative::{DiscArch, TripletConfig};
use anomaly_recon_core::fidelity::SegArch;
use anomaly_recon_core::reconstruction::{AeReduction, LatentSearchConfig, ReconArch, ReconHyper};
use anomaly_recon_core::volume::ANATOMY_CLASSES;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{config, io_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

/// Abnormal volumes of one class in the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestAnomalies {
    pub class: AbnormalityClass,
    pub volumes: usize,
    /// Lesions per volume, inclusive.
    pub count_range: (usize, usize),
    pub radius_range: (f64, f64),
}

impl TestAnomalies {
    pub fn anomaly_config(&self) -> AnomalyConfig {
        AnomalyConfig::new(self.class, self.count_range, self.radius_range)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Defaults to `<cache>/datasets/<hash>` or `<output_dir>/dataset`.
    pub dir: Option<PathBuf>,
    /// Template for every generated phantom; its `seed` and `anomaly` fields are set per volume.
    pub phantom: PhantomConfig,
    pub train_volumes: usize,
    /// Normal volumes with anatomy labels for the segmentation network.
    pub seg_volumes: usize,
    /// Train / validation / test fractions of the segmentation volumes.
    pub seg_split: [f64; 3],
    pub normal_test_volumes: usize,
    pub test_anomalies: Vec<TestAnomalies>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub spacing: [f64; 3],
    pub size: usize,
    pub template_points: usize,
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    pub arch: ReconArch,
    pub hyper: ReconHyper,
    pub batch_size: usize,
    pub epochs: usize,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    pub arch: DiscArch,
    pub triplet: TripletConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegConfig {
    pub arch: SegArch,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub checkpoint_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZscoreRegion {
    /// Statistics over the whole slice.
    Image,
    /// Statistics over the slice's body mask; the rest gets the minimum normalized value.
    Body,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    pub stride: usize,
    pub zscore_region: ZscoreRegion,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub preprocess: PreprocessConfig,
    pub recon: ReconConfig,
    pub disc: DiscConfig,
    pub seg: SegConfig,
    pub latent_search: LatentSearchConfig,
    pub scoring: ScoringConfig,
}

fn desk() -> ExperimentConfig {
    let anomalies = |class, volumes| TestAnomalies { class, volumes, count_range: (1, 2), radius_range: (3.0, 5.0) };
    ExperimentConfig {
        profile: Profile::Desk,
        seed: 7,
        output_dir: PathBuf::from("runs/desk"),
        dataset: DatasetConfig {
            dir: None,
            phantom: PhantomConfig::default(),
            train_volumes: 40,
            seg_volumes: 20,
            seg_split: [0.7, 0.15, 0.15],
            normal_test_volumes: 4,
            test_anomalies: vec![
                anomalies(AbnormalityClass::MetastaticTumor, 10),
                anomalies(AbnormalityClass::Cavity, 10),
            ],
        },
        preprocess: PreprocessConfig { spacing: [2.0, 1.0, 1.0], size: 64, template_points: 1001, augment: true },
        recon: ReconConfig {
            arch: ReconArch::desk(),
            hyper: ReconHyper { ae_reduction: AeReduction::Sum, ..ReconHyper::default() },
            batch_size: 16,
            epochs: 40,
            checkpoint_every: 100,
        },
        disc: DiscConfig {
            arch: DiscArch::desk(),
            triplet: TripletConfig::with_patch_size(DiscArch::desk().patch_size),
            lr: 1e-3,
            batch_size: 16,
            steps: 2000,
            checkpoint_every: 250,
        },
        seg: SegConfig { arch: SegArch::desk(), lr: 3e-3, batch_size: 8, steps: 1000, checkpoint_every: 250 },
        latent_search: LatentSearchConfig::default(),
        scoring: ScoringConfig { stride: 4, zscore_region: ZscoreRegion::Image, batch_size: 32 },
    }
}

fn paper() -> ExperimentConfig {
    let anomalies = |class, volumes| TestAnomalies { class, volumes, count_range: (1, 3), radius_range: (4.0, 15.0) };
    let phantom = PhantomConfig {
        shape: [64, 256, 256],
        spacing: [2.5, 1.0, 1.0],
        head_axes: [70.0, 95.0, 77.0],
        skull_thickness: 6.0,
        ventricle_axes: [17.0, 30.0, 8.0],
        eye_radius: 12.0,
        center_jitter: 5.0,
        ..PhantomConfig::default()
    };
    let disc_arch = DiscArch::paper();
    ExperimentConfig {
        profile: Profile::Paper,
        seed: 7,
        output_dir: PathBuf::from("runs/paper"),
        dataset: DatasetConfig {
            dir: None,
            phantom,
            train_volumes: 200,
            seg_volumes: 60,
            seg_split: [0.7, 0.15, 0.15],
            normal_test_volumes: 20,
            test_anomalies: vec![
                anomalies(AbnormalityClass::MetastaticTumor, 20),
                anomalies(AbnormalityClass::ExtracranialTumor, 20),
                anomalies(AbnormalityClass::Cavity, 20),
                anomalies(AbnormalityClass::StructuralChange, 20),
            ],
        },
        preprocess: PreprocessConfig { spacing: [1.0, 1.0, 1.0], size: 256, template_points: 1001, augment: true },
        recon: ReconConfig {
            arch: ReconArch::paper(),
            hyper: ReconHyper::default(),
            batch_size: 120,
            epochs: 200,
            checkpoint_every: 100,
        },
        disc: DiscConfig {
            triplet: TripletConfig::with_patch_size(disc_arch.patch_size),
            arch: disc_arch,
            lr: 1e-4,
            batch_size: 64,
            steps: 20000,
            checkpoint_every: 500,
        },
        // Full-size filter plan, but only the 6 anatomy classes the phantoms carry.
        seg: SegConfig {
            arch: SegArch { classes: ANATOMY_CLASSES.len(), ..SegArch::paper() },
            lr: 1e-4,
            batch_size: 16,
            steps: 20000,
            checkpoint_every: 500,
        },
        latent_search: LatentSearchConfig::default(),
        scoring: ScoringConfig { stride: 4, zscore_region: ZscoreRegion::Image, batch_size: 32 },
    }
}

impl ExperimentConfig {
    pub fn defaults(profile: Profile) -> Self {
        match profile {
            Profile::Desk => desk(),
            Profile::Paper => paper(),
        }
    }

    /// Reads `path`, overlays it on the defaults of the chosen profile (`profile` argument, else
    /// the file's `profile` key, else desk), applies `seed` and validates.
    pub fn load(path: &Path, profile: Option<Profile>, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => config(format!("config file {} does not exist", path.display())),
            _ => io_err(path)(e),
        })?;
        let overrides: Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))?
        } else {
            let t: toml::Table = toml::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))?;
            serde_json::to_value(t).map_err(|e| config(e.to_string()))?
        };
        let mut cfg = Self::from_overrides(overrides, profile)?;
        if cfg.output_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(dir) = cfg.dataset.dir.as_mut().filter(|d| d.is_relative()) {
            *dir = path.parent().unwrap_or(Path::new(".")).join(&*dir);
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_overrides(overrides: Value, profile: Option<Profile>) -> Result<Self> {
        let Value::Object(map) = &overrides else {
            return Err(config("config root must be a table"));
        };
        let profile = match (profile, map.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| config(format!("profile: {e}")))?,
            (None, None) => Profile::Desk,
        };
        let mut base = serde_json::to_value(Self::defaults(profile))?;
        merge(&mut base, &overrides, "")?;
        base["profile"] = serde_json::to_value(profile)?;
        serde_json::from_value(base).map_err(|e| config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let wrap = |what: &'static str| move |e: anomaly_recon_core::Error| config(format!("{what}: {e}"));
        d.phantom.validate().map_err(wrap("dataset.phantom"))?;
        for t in &d.test_anomalies {
            let p = PhantomConfig { anomaly: Some(t.anomaly_config()), ..d.phantom.clone() };
            p.validate().map_err(wrap("dataset.test_anomalies"))?;
        }
        if d.train_volumes == 0 {
            return Err(config("dataset.train_volumes must be positive"));
        }
        if d.seg_split.iter().any(|f| !(*f >= 0.0)) || (d.seg_split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config("dataset.seg_split must be three non-negative fractions summing to 1"));
        }
        let (seg_train, _, _) = self.seg_split_counts();
        if seg_train == 0 {
            return Err(config("dataset.seg_volumes leaves no segmentation training volume"));
        }
        let p = &self.preprocess;
        if p.spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || p.size == 0 || p.template_points < 2 {
            return Err(config("preprocess needs positive spacing, size and at least 2 template points"));
        }
        self.recon.arch.validate().map_err(wrap("recon.arch"))?;
        self.recon.hyper.validate().map_err(wrap("recon.hyper"))?;
        if self.recon.arch.image_size != p.size {
            return Err(config(format!("recon.arch.image_size {} differs from preprocess.size {}", self.recon.arch.image_size, p.size)));
        }
        self.disc.arch.validate().map_err(wrap("disc.arch"))?;
        self.disc.triplet.validate().map_err(wrap("disc.triplet"))?;
        if self.disc.triplet.patch_size != self.disc.arch.patch_size || self.disc.arch.patch_size > p.size {
            return Err(config("disc.triplet.patch_size must equal disc.arch.patch_size and fit in a slice"));
        }
        self.seg.arch.validate().map_err(wrap("seg.arch"))?;
        if self.seg.arch.classes != ANATOMY_CLASSES.len() {
            return Err(config(format!("seg.arch.classes must be {} (phantom anatomy classes)", ANATOMY_CLASSES.len())));
        }
        if p.size % (1 << self.seg.arch.filters.len().saturating_sub(1)) != 0 {
            return Err(config("preprocess.size must be divisible by the segmentation network's downsampling"));
        }
        let rate_ok = |v: f64| v.is_finite() && v >= 0.0;
        if !rate_ok(self.disc.lr) || !rate_ok(self.seg.lr) || !rate_ok(self.latent_search.lr) {
            return Err(config("learning rates must be finite and non-negative"));
        }
        if !(self.latent_search.divergence_factor > 1.0) {
            return Err(config("latent_search.divergence_factor must exceed 1"));
        }
        let counts = [
            self.recon.batch_size,
            self.recon.epochs,
            self.recon.checkpoint_every,
            self.disc.batch_size,
            self.disc.checkpoint_every,
            self.seg.batch_size,
            self.seg.checkpoint_every,
            self.scoring.stride,
            self.scoring.batch_size,
        ];
        if counts.contains(&0) {
            return Err(config("batch sizes, epochs, checkpoint intervals and stride must be positive"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(config("output_dir must be set"));
        }
        Ok(())
    }

    /// Volumes of the segmentation split assigned to (train, validation, test).
    pub fn seg_split_counts(&self) -> (usize, usize, usize) {
        let n = self.dataset.seg_volumes;
        let val = ((n as f64 * self.dataset.seg_split[1]).round() as usize).min(n);
        let test = ((n as f64 * self.dataset.seg_split[2]).round() as usize).min(n - val);
        (n - val - test, val, test)
    }

    /// Hash of the full resolved config.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to toml")
    }
}

/// SHA-256 of the canonical JSON text of `v` (object keys sorted).
pub fn hash_json(v: &Value) -> String {
    hex::encode(Sha256::digest(canonical(v).as_bytes()))
}

fn canonical(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<_> = m.keys().collect();
            keys.sort();
            let body: Vec<String> =
                keys.iter().map(|k| format!("{}:{}", Value::String((*k).clone()), canonical(&m[k.as_str()]))).collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

fn merge(base: &mut Value, over: &Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(config(format!("unknown key `{key}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}
