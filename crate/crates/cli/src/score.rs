//! Scoring stage: reconstruct every test slice with one recon variant, embed co-located patches
//! and persist per-volume abnormality maps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anomaly_recon_core::checkpoint::{disc_from_checkpoint, read_checkpoint, recon_from_checkpoint};
use anomaly_recon_core::data_pipeline::slices_to_batch;
use anomaly_recon_core::reconstruction::{latent_search, reconstruct, TrainingMode};
use anomaly_recon_core::scoring::{abnormality_map, body_mask, volume_assemble, zscore_normalize, Normalization, ScoreMap};
use anomaly_recon_core::volume::{read_array, write_array, VolumeHeader};
use anomaly_recon_core::Error as CoreError;
use log::info;
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{hash_json, ExperimentConfig, ZscoreRegion};
use crate::dataset::{Dataset, Split};
use crate::error::{io_err, CliError, Result};
use crate::run::{dataset_hash, ensure_dir, file_sha256, write_json, CompletionRecord, Layout, StageOutcome, StageStatus};
use crate::train::TrainStage;

pub const INDEX: &str = "index.json";
pub const SEARCH_LOG: &str = "latent_search.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
pub enum Variant {
    #[value(name = "vae")]
    #[serde(rename = "vae")]
    Vae,
    #[value(name = "introvae")]
    #[serde(rename = "introvae")]
    Introvae,
    #[value(name = "introvae+latsearch")]
    #[serde(rename = "introvae+latsearch")]
    IntrovaeLatsearch,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Self::Vae, Self::Introvae, Self::IntrovaeLatsearch];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vae => "vae",
            Self::Introvae => "introvae",
            Self::IntrovaeLatsearch => "introvae+latsearch",
        }
    }

    /// Directory name (no `+`).
    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Vae => "vae",
            Self::Introvae => "introvae",
            Self::IntrovaeLatsearch => "introvae_latsearch",
        }
    }

    pub fn recon_stage(self) -> TrainStage {
        match self {
            Self::Vae => TrainStage::ReconVae,
            Self::Introvae | Self::IntrovaeLatsearch => TrainStage::ReconIntrovae,
        }
    }

    fn mode(self) -> TrainingMode {
        match self {
            Self::Vae => TrainingMode::Vae,
            Self::Introvae | Self::IntrovaeLatsearch => TrainingMode::IntroVae,
        }
    }

    pub fn stage_name(self) -> String {
        format!("score/{}", self.dir_name())
    }

    pub fn dir(self, layout: &Layout) -> PathBuf {
        layout.scores.join(self.dir_name())
    }
}

/// Contents of a variant's score directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreIndex {
    pub variant: Variant,
    pub stride: usize,
    pub zscore_region: ZscoreRegion,
    /// Volume id -> axial indices that were scored (the others were empty slices).
    pub volumes: BTreeMap<String, Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub volume: String,
    pub index_k: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub diverged: bool,
}

/// Artifact names inside a variant directory.
pub fn zscored_id(id: &str) -> String {
    id.to_string()
}

pub fn raw_id(id: &str) -> String {
    format!("{id}_raw")
}

pub fn recon_id(id: &str) -> String {
    format!("{id}_recon")
}

pub fn region_id(id: &str) -> String {
    format!("{id}_region")
}

/// Requires a finished training stage and returns its checkpoint path.
pub fn trained_checkpoint(cfg: &ExperimentConfig, layout: &Layout, stage: TrainStage) -> Result<PathBuf> {
    let path = stage.checkpoint_path(layout);
    if !path.exists() {
        return Err(CliError::Core(CoreError::MissingArtifact(path)));
    }
    if CompletionRecord::find_valid(&layout.checkpoints, stage.name(), &stage.input_hash(cfg))?.is_none() {
        return Err(CliError::Core(CoreError::UntrainedModel(format!(
            "{} has not finished training for this config; run `train {}` first",
            path.display(),
            stage.name()
        ))));
    }
    Ok(path)
}

pub fn input_hash(cfg: &ExperimentConfig, layout: &Layout, variant: Variant) -> Result<String> {
    let recon = trained_checkpoint(cfg, layout, variant.recon_stage())?;
    let disc = trained_checkpoint(cfg, layout, TrainStage::Disc)?;
    let search = (variant == Variant::IntrovaeLatsearch).then(|| cfg.latent_search.clone());
    Ok(hash_json(&json!({
        "variant": variant.name(),
        "recon": file_sha256(&recon)?,
        "disc": file_sha256(&disc)?,
        "dataset": dataset_hash(cfg),
        "preprocess": cfg.preprocess,
        "scoring": cfg.scoring,
        "latent_search": search,
    })))
}

fn write_map(dir: &Path, name: &str, data: &Array3<f64>, spacing: [f64; 3], norm: Option<Normalization>, stride: Option<usize>) -> Result<()> {
    let (k, i, j) = data.dim();
    let header = VolumeHeader { normalization: norm.map(|n| n.key().to_string()), stride, ..VolumeHeader::new([k, i, j], spacing) };
    Ok(write_array(dir, name, &data.mapv(|v| v as f32), &header)?)
}

pub fn score(cfg: &ExperimentConfig, layout: &Layout, variant: Variant) -> Result<StageOutcome> {
    let hash = input_hash(cfg, layout, variant)?;
    let stage = variant.stage_name();
    let root = &layout.scores;
    if let Some(rec) = CompletionRecord::find_valid(root, &stage, &hash)? {
        info!("{stage} is up to date");
        return Ok(rec.outcome(root, StageStatus::Skipped));
    }
    let (recon, _) = recon_from_checkpoint(&read_checkpoint(&variant.recon_stage().checkpoint_path(layout))?)?;
    if recon.mode != variant.mode() {
        return Err(CliError::Core(CoreError::InvalidArgument(format!(
            "variant {} needs a {:?} checkpoint, found {:?}",
            variant.name(),
            variant.mode(),
            recon.mode
        ))));
    }
    let (disc, _) = disc_from_checkpoint(&read_checkpoint(&TrainStage::Disc.checkpoint_path(layout))?)?;
    let data = Dataset::open(cfg, &layout.dataset)?;
    let out = variant.dir(layout);
    if out.exists() {
        fs::remove_dir_all(&out).map_err(io_err(&out))?;
    }
    ensure_dir(&out)?;
    let spacing = cfg.preprocess.spacing;
    let stride = cfg.scoring.stride;
    let mut index = ScoreIndex { variant, stride, zscore_region: cfg.scoring.zscore_region, volumes: BTreeMap::new() };
    let mut search_log = Vec::new();
    for entry in data.manifest.ids(Split::Test) {
        let id = &entry.id;
        let slices = data.slices(id)?;
        let intensity = data.intensity(id)?;
        let depth = intensity.shape()[0];
        let region = match cfg.scoring.zscore_region {
            ZscoreRegion::Image => None,
            ZscoreRegion::Body => Some(body_mask(&intensity)?),
        };
        let size = cfg.preprocess.size;
        let mut recon_vol = Array3::<f64>::from_elem((depth, size, size), -1.0);
        let mut raw_maps = Vec::with_capacity(depth);
        let mut z_maps = Vec::with_capacity(depth);
        for chunk in slices.chunks(cfg.scoring.batch_size) {
            let x = slices_to_batch(chunk);
            let x_hat = match variant {
                Variant::IntrovaeLatsearch => {
                    let r = latent_search(&recon, &x, &cfg.latent_search)?;
                    for (i, s) in chunk.iter().enumerate() {
                        search_log.push(SearchRecord {
                            volume: id.clone(),
                            index_k: s.index_k,
                            initial_loss: r.initial_loss[i],
                            final_loss: r.final_loss[i],
                            diverged: r.diverged[i],
                        });
                    }
                    r.x_hat
                }
                _ => reconstruct(&recon, &x)?,
            };
            for (i, s) in chunk.iter().enumerate() {
                let xh: Array2<f32> = x_hat.index_axis(Axis(0), i).index_axis(Axis(0), 0).to_owned();
                recon_vol.index_axis_mut(Axis(0), s.index_k).assign(&xh.mapv(f64::from));
                let raw = abnormality_map(&disc, &s.data, &xh, stride)?;
                let reg = region.as_ref().map(|m| m.index_axis(Axis(0), s.index_k).mapv(|v| v != 0));
                let z = zscore_normalize(&raw, reg.as_ref())?;
                raw_maps.push(ScoreMap { scores: raw, normalization: Normalization::Raw, stride, index_k: s.index_k });
                z_maps.push(ScoreMap { scores: z, normalization: Normalization::Zscored, stride, index_k: s.index_k });
            }
        }
        let scored: Vec<usize> = slices.iter().map(|s| s.index_k).collect();
        // Empty slices were never scored: raw 0, standardized at the volume's lowest score.
        let lowest = z_maps.iter().flat_map(|m| m.scores.iter().copied()).fold(f64::INFINITY, f64::min);
        for k in (0..depth).filter(|k| !scored.contains(k)) {
            raw_maps.push(ScoreMap { scores: Array2::zeros((size, size)), normalization: Normalization::Raw, stride, index_k: k });
            let fill = if lowest.is_finite() { lowest } else { 0.0 };
            z_maps.push(ScoreMap { scores: Array2::from_elem((size, size), fill), normalization: Normalization::Zscored, stride, index_k: k });
        }
        let raw_vol = volume_assemble(&raw_maps, depth)?;
        let z_vol = volume_assemble(&z_maps, depth)?;
        write_map(&out, &zscored_id(id), &z_vol.scores, spacing, Some(Normalization::Zscored), Some(stride))?;
        write_map(&out, &raw_id(id), &raw_vol.scores, spacing, Some(Normalization::Raw), Some(stride))?;
        write_map(&out, &recon_id(id), &recon_vol, spacing, None, None)?;
        if let Some(m) = &region {
            write_map(&out, &region_id(id), &m.mapv(f64::from), spacing, None, None)?;
        }
        index.volumes.insert(id.clone(), scored);
        info!("{stage}: scored {id}");
    }
    write_json(&out.join(INDEX), &index)?;
    let mut metrics = json!({ "volumes": index.volumes.len(), "slices": index.volumes.values().map(Vec::len).sum::<usize>() });
    if variant == Variant::IntrovaeLatsearch {
        write_json(&out.join(SEARCH_LOG), &search_log)?;
        metrics["latent_search"] = serde_json::to_value(search_summary(&search_log))?;
    }
    validate_scores(&out)?;
    let rec = CompletionRecord::new(root, &stage, &hash, &[variant.dir_name()], metrics)?;
    rec.write(root)?;
    Ok(rec.outcome(root, StageStatus::Completed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub slices: usize,
    /// Fraction of slices whose final loss is not above the initial loss.
    pub non_increasing_fraction: f64,
    pub mean_reduction: f64,
    pub diverged: usize,
}

pub fn search_summary(log: &[SearchRecord]) -> SearchSummary {
    let n = log.len();
    let ok = log.iter().filter(|r| r.final_loss <= r.initial_loss).count();
    let red: f64 = log.iter().map(|r| r.initial_loss - r.final_loss).sum();
    SearchSummary {
        slices: n,
        non_increasing_fraction: if n == 0 { 0.0 } else { ok as f64 / n as f64 },
        mean_reduction: if n == 0 { 0.0 } else { red / n as f64 },
        diverged: log.iter().filter(|r| r.diverged).count(),
    }
}

/// Tolerance on the region mean and standard deviation of persisted standardized slices.
pub const ZSCORE_TOL: f64 = 1e-6;

/// Re-reads every standardized map of a variant directory and checks, per scored slice, mean 0
/// and standard deviation 1 over its normalization region and finiteness everywhere.
pub fn validate_scores(dir: &Path) -> Result<()> {
    let index: ScoreIndex = crate::run::read_json(&dir.join(INDEX))?;
    for (id, ks) in &index.volumes {
        let (z, header) = read_array(dir, &zscored_id(id))?;
        if header.normalization.as_deref() != Some(Normalization::Zscored.key()) || header.stride != Some(index.stride) {
            return Err(CliError::Core(CoreError::InvalidArgument(format!("{id}: score header lacks normalization/stride"))));
        }
        let region = match index.zscore_region {
            ZscoreRegion::Image => None,
            ZscoreRegion::Body => Some(read_array(dir, &region_id(id))?.0),
        };
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Core(CoreError::NumericFailure(format!("{id}: non-finite score"))));
        }
        for &k in ks {
            let plane = z.index_axis(Axis(0), k);
            let vals: Vec<f64> = match &region {
                None => plane.iter().map(|v| f64::from(*v)).collect(),
                Some(r) => plane.iter().zip(r.index_axis(Axis(0), k).iter()).filter(|(_, m)| **m > 0.5).map(|(v, _)| f64::from(*v)).collect(),
            };
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if mean.abs() > ZSCORE_TOL || (sd - 1.0).abs() > ZSCORE_TOL {
                return Err(CliError::Core(CoreError::NumericFailure(format!(
                    "{id} slice {k}: standardized map has mean {mean:e} and std {sd}"
                ))));
            }
        }
    }
    Ok(())
}
