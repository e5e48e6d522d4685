//! Phantom dataset generation and preprocessed access to its splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anomaly_recon_core::data_pipeline::{
    generate_phantom, preprocess_anatomy, preprocess_intensity, preprocess_mask, preprocess_volume, AbnormalityClass,
    AnomalySummary, IntensityTemplate, Phantom, PhantomConfig,
};
use anomaly_recon_core::volume::{
    all_label_keys, read_labels, read_volume, write_labels, write_volume, LabelVolume, Slice, Volume, ABNORMALITY_CLASSES,
};
use anomaly_recon_core::Error as CoreError;
use log::{debug, info};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError, Result};
use crate::run::{dataset_hash, derive_seed, ensure_dir, read_json, write_json, CompletionRecord, StageOutcome, StageStatus};

pub const MANIFEST: &str = "manifest.json";
pub const TEMPLATE: &str = "template.json";
pub const STAGE: &str = "gen-phantom";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    SegTrain,
    SegVal,
    SegTest,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    /// Injected class for abnormal test volumes.
    pub class: Option<AbnormalityClass>,
    pub slices: usize,
    /// Axial slices with at least one abnormality voxel.
    pub abnormal_slices: usize,
    pub anomalies: Vec<AnomalySummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_hash: String,
    pub volumes: Vec<VolumeEntry>,
    /// Abnormal slices per split.
    pub abnormal_slices: BTreeMap<String, usize>,
    /// Lesions per class in the test split.
    pub test_lesions: BTreeMap<String, usize>,
    /// Abnormal volumes per class in the test split.
    pub test_volumes: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> impl Iterator<Item = &VolumeEntry> {
        self.volumes.iter().filter(move |v| v.split == split)
    }
}

fn split_key(s: Split) -> String {
    serde_json::to_value(s).expect("split serializes").as_str().expect("string").to_string()
}

fn plan(cfg: &ExperimentConfig) -> Vec<(String, Split, Option<&crate::config::TestAnomalies>)> {
    let d = &cfg.dataset;
    let mut out = Vec::new();
    for i in 0..d.train_volumes {
        out.push((format!("train_{i:03}"), Split::Train, None));
    }
    let (st, sv, ss) = cfg.seg_split_counts();
    for (split, n, tag) in [(Split::SegTrain, st, "segtrain"), (Split::SegVal, sv, "segval"), (Split::SegTest, ss, "segtest")] {
        for i in 0..n {
            out.push((format!("{tag}_{i:03}"), split, None));
        }
    }
    for i in 0..d.normal_test_volumes {
        out.push((format!("test_normal_{i:03}"), Split::Test, None));
    }
    for t in &d.test_anomalies {
        for i in 0..t.volumes {
            out.push((format!("test_{}_{i:03}", t.class.key()), Split::Test, Some(t)));
        }
    }
    out
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(io_err(dir)(e)),
    }
}

/// Lesion placement can fail on an unlucky draw; abnormal volumes then redraw with a fresh seed.
const PLACEMENT_ATTEMPTS: usize = 20;

fn generate(cfg: &ExperimentConfig, id: &str, anomaly: Option<&crate::config::TestAnomalies>) -> Result<(u64, Phantom)> {
    let mut attempt = 0;
    loop {
        let label = if attempt == 0 { format!("phantom/{id}") } else { format!("phantom/{id}/{attempt}") };
        let seed = derive_seed(cfg.seed, &label);
        let pc = PhantomConfig { seed, anomaly: anomaly.map(|t| t.anomaly_config()), ..cfg.dataset.phantom.clone() };
        match generate_phantom(&pc) {
            Ok(p) => return Ok((seed, p)),
            Err(CoreError::InvalidArgument(msg)) if anomaly.is_some() && attempt + 1 < PLACEMENT_ATTEMPTS => {
                debug!("{id}: {msg}; redrawing");
                attempt += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Writes the phantom dataset to `dir`. Identical inputs are a no-op; any other non-empty
/// directory is refused unless `force`.
pub fn gen_phantom(cfg: &ExperimentConfig, dir: &Path, force: bool) -> Result<StageOutcome> {
    let hash = dataset_hash(cfg);
    if let Some(rec) = CompletionRecord::find_valid(dir, STAGE, &hash)? {
        info!("dataset in {} is up to date", dir.display());
        return Ok(rec.outcome(dir, StageStatus::Skipped));
    }
    if is_nonempty_dir(dir)? {
        if !force {
            return Err(CliError::NotEmpty(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    let vol_dir = dir.join("volumes");
    ensure_dir(&vol_dir)?;
    let mut entries = Vec::new();
    let mut train_vols = Vec::new();
    for (id, split, anomaly) in plan(cfg) {
        let (seed, mut p) = generate(cfg, &id, anomaly)?;
        p.volume.id = id.clone();
        let any = p.labels.any_abnormality(p.volume.shape());
        let abnormal_slices = any.axis_iter(Axis(0)).filter(|s| s.iter().any(|v| *v != 0)).count();
        write_volume(&vol_dir, &p.volume)?;
        write_labels(&vol_dir, &id, &p.labels, p.volume.spacing)?;
        entries.push(VolumeEntry {
            id,
            split,
            seed,
            class: anomaly.map(|t| t.class),
            slices: p.volume.shape()[0],
            abnormal_slices,
            anomalies: p.anomalies,
        });
        if split == Split::Train {
            train_vols.push(p.volume);
        }
    }
    let refs: Vec<&Volume> = train_vols.iter().collect();
    let template = IntensityTemplate::from_volumes(&refs, cfg.preprocess.template_points)?;
    write_json(&dir.join(TEMPLATE), &template)?;

    let mut abnormal_slices = BTreeMap::new();
    let mut test_lesions = BTreeMap::new();
    let mut test_volumes = BTreeMap::new();
    for e in &entries {
        *abnormal_slices.entry(split_key(e.split)).or_insert(0) += e.abnormal_slices;
        if e.split == Split::Test {
            for a in &e.anomalies {
                *test_lesions.entry(a.class.key().to_string()).or_insert(0) += 1;
            }
            if let Some(c) = e.class {
                *test_volumes.entry(c.key().to_string()).or_insert(0) += 1;
            }
        }
    }
    let manifest = DatasetManifest { dataset_hash: hash.clone(), volumes: entries, abnormal_slices, test_lesions, test_volumes };
    write_json(&dir.join(MANIFEST), &manifest)?;
    let metrics = json!({
        "volumes": manifest.volumes.len(),
        "abnormal_slices": manifest.abnormal_slices,
        "test_lesions": manifest.test_lesions,
    });
    let rec = CompletionRecord::new(dir, STAGE, &hash, &[MANIFEST, TEMPLATE, "volumes"], metrics)?;
    rec.write(dir)?;
    info!("wrote {} phantoms to {}", manifest.volumes.len(), dir.display());
    Ok(rec.outcome(dir, StageStatus::Completed))
}

/// Read access to a generated dataset on the preprocessing grid.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub template: IntensityTemplate,
    pub spacing: [f64; 3],
    pub size: usize,
}

impl Dataset {
    /// Opens the dataset that `cfg` describes; it must have been generated from the same inputs.
    pub fn open(cfg: &ExperimentConfig, dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join(MANIFEST))?;
        if manifest.dataset_hash != dataset_hash(cfg) {
            return Err(CliError::Config(format!(
                "dataset in {} was generated from a different config; rerun gen-phantom --force",
                dir.display()
            )));
        }
        let template = read_json(&dir.join(TEMPLATE))?;
        Ok(Self { dir: dir.to_path_buf(), manifest, template, spacing: cfg.preprocess.spacing, size: cfg.preprocess.size })
    }

    fn vol_dir(&self) -> PathBuf {
        self.dir.join("volumes")
    }

    pub fn volume(&self, id: &str) -> Result<Volume> {
        Ok(read_volume(&self.vol_dir(), id)?)
    }

    pub fn labels(&self, id: &str) -> Result<LabelVolume> {
        let keys = all_label_keys();
        Ok(read_labels(&self.vol_dir(), id, keys.iter().map(|s| s.as_str()))?)
    }

    pub fn slices(&self, id: &str) -> Result<Vec<Slice>> {
        Ok(preprocess_volume(&self.volume(id)?, &self.template, self.spacing, self.size)?)
    }

    pub fn split_slices(&self, split: Split) -> Result<Vec<Slice>> {
        let mut out = Vec::new();
        for e in self.manifest.ids(split) {
            out.extend(self.slices(&e.id)?);
        }
        Ok(out)
    }

    /// Slices of `split` paired with their anatomy label maps.
    pub fn anatomy_slices(&self, split: Split) -> Result<Vec<(Slice, Array2<u8>)>> {
        let mut out = Vec::new();
        for e in self.manifest.ids(split) {
            let v = self.volume(&e.id)?;
            let maps = preprocess_anatomy(&self.labels(&e.id)?, v.spacing, self.spacing, self.size)?;
            for s in preprocess_volume(&v, &self.template, self.spacing, self.size)? {
                let lab = maps[s.index_k].clone();
                out.push((s, lab));
            }
        }
        Ok(out)
    }

    /// Intensity-normalized volume on the slice grid (background 0).
    pub fn intensity(&self, id: &str) -> Result<Volume> {
        Ok(preprocess_intensity(&self.volume(id)?, &self.template, self.spacing, self.size)?)
    }

    /// Per-class abnormality masks on the slice grid; classes absent from the volume are omitted.
    pub fn abnormality_masks(&self, id: &str) -> Result<BTreeMap<String, Array3<u8>>> {
        let v = self.volume(id)?;
        let labels = self.labels(id)?;
        let mut out = BTreeMap::new();
        for class in ABNORMALITY_CLASSES {
            if labels.mask(class).is_some_and(|m| m.iter().any(|x| *x != 0)) {
                let planes = preprocess_mask(&labels, Some(class), v.spacing, self.spacing, self.size)?;
                out.insert(class.to_string(), stack(&planes)?);
            }
        }
        Ok(out)
    }

    pub fn anatomy(&self, id: &str) -> Result<Array3<u8>> {
        let v = self.volume(id)?;
        stack(&preprocess_anatomy(&self.labels(id)?, v.spacing, self.spacing, self.size)?)
    }
}

pub fn stack<T: Clone>(planes: &[Array2<T>]) -> Result<Array3<T>> {
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| CliError::Core(anomaly_recon_core::Error::InvalidArgument(e.to_string())))
}
