//! The four training stages. Every step draws its randomness from a stream derived from
//! `(seed, stage, step)` and the epoch order from `(seed, stage, epoch)`, so a run resumed from
//! any checkpoint continues exactly as an uninterrupted one.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anomaly_nn::Adam;
use anomaly_recon_core::checkpoint::{
    disc_checkpoint, disc_from_checkpoint, read_checkpoint, recon_checkpoint, recon_from_checkpoint, seg_checkpoint,
    seg_from_checkpoint, write_checkpoint, Checkpoint,
};
use anomaly_recon_core::data_pipeline::{augment, augment_labels_with, augment_with, slices_to_batch, AugmentParams};
use anomaly_recon_core::discriminative::{
    disc_optimizer, sample_triplet, train_discriminator_step, triplet_accuracy, DiscModel, Triplet, TripletConfig,
};
use anomaly_recon_core::fidelity::{class_dice, seg_optimizer, segment_slices, train_segmentation_step, SegModel};
use anomaly_recon_core::reconstruction::{train_step, ReconModel, ReconOptim, TrainingMode};
use anomaly_recon_core::volume::Slice;
use log::info;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{hash_json, ExperimentConfig};
use crate::dataset::{Dataset, Split};
use crate::error::{io_err, CliError, Result};
use crate::run::{dataset_hash, derive_seed, ensure_dir, CompletionRecord, Layout, StageOutcome, StageStatus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainStage {
    #[value(name = "recon-vae")]
    ReconVae,
    #[value(name = "recon-introvae")]
    ReconIntrovae,
    Disc,
    Seg,
}

impl TrainStage {
    pub const ALL: [TrainStage; 4] = [Self::ReconVae, Self::ReconIntrovae, Self::Disc, Self::Seg];

    pub fn name(self) -> &'static str {
        match self {
            Self::ReconVae => "recon-vae",
            Self::ReconIntrovae => "recon-introvae",
            Self::Disc => "disc",
            Self::Seg => "seg",
        }
    }

    pub fn checkpoint_file(self) -> String {
        format!("{}.ckpt", self.name())
    }

    pub fn loss_file(self) -> String {
        format!("{}.loss.csv", self.name())
    }

    pub fn checkpoint_path(self, layout: &Layout) -> PathBuf {
        layout.checkpoints.join(self.checkpoint_file())
    }

    pub fn input_hash(self, cfg: &ExperimentConfig) -> String {
        let section = match self {
            Self::ReconVae | Self::ReconIntrovae => serde_json::to_value(&cfg.recon),
            Self::Disc => serde_json::to_value(&cfg.disc),
            Self::Seg => serde_json::to_value(&cfg.seg),
        }
        .expect("config serializes");
        hash_json(&json!({
            "stage": self.name(),
            "seed": cfg.seed,
            "dataset": dataset_hash(cfg),
            "preprocess": cfg.preprocess,
            "section": section,
        }))
    }
}

fn stage_rng(seed: u64, label: String) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &label))
}

/// Fixed-size batches over a per-epoch permutation; the incomplete tail of each epoch is dropped.
struct EpochOrder {
    seed: u64,
    stage: &'static str,
    n: usize,
    batch: usize,
    epoch: Option<(usize, Vec<usize>)>,
}

impl EpochOrder {
    fn new(seed: u64, stage: &'static str, n: usize, batch: usize) -> Self {
        Self { seed, stage, n, batch: batch.min(n), epoch: None }
    }

    fn steps_per_epoch(&self) -> usize {
        self.n / self.batch
    }

    fn batch_at(&mut self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (e, pos) = (step / spe, step % spe);
        if self.epoch.as_ref().map(|(k, _)| *k) != Some(e) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut stage_rng(self.seed, format!("{}/epoch/{e}", self.stage)));
            self.epoch = Some((e, perm));
        }
        let perm = &self.epoch.as_ref().expect("set above").1;
        perm[pos * self.batch..(pos + 1) * self.batch].to_vec()
    }
}

/// Loss-curve CSV, one row per completed step. On resume rows past the checkpoint are dropped.
struct LossLog {
    out: BufWriter<fs::File>,
    path: PathBuf,
}

impl LossLog {
    fn open(path: &Path, header: &str, keep_steps: u64) -> Result<Self> {
        let mut lines: Vec<String> = match fs::read_to_string(path) {
            Ok(t) if keep_steps > 0 => t.lines().map(str::to_string).collect(),
            Ok(_) => Vec::new(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(path)(e)),
        };
        if lines.len() < keep_steps as usize + 1 || lines.first().map(String::as_str) != Some(header) {
            if keep_steps > 0 {
                return Err(CliError::Core(anomaly_recon_core::Error::InvalidArgument(format!(
                    "{} is shorter than the checkpoint it belongs to",
                    path.display()
                ))));
            }
            lines = vec![header.to_string()];
        }
        lines.truncate(keep_steps as usize + 1);
        let mut text = lines.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))?;
        let f = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        Ok(Self { out: BufWriter::new(f), path: path.to_path_buf() })
    }

    fn row(&mut self, step: u64, values: &[f64]) -> Result<()> {
        let mut line = step.to_string();
        for v in values {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(self.out, "{line}").map_err(io_err(&self.path))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

fn tag(mut ck: Checkpoint, input_hash: &str) -> Checkpoint {
    ck.meta["input_hash"] = Value::String(input_hash.to_string());
    ck
}

/// Checkpoint at `path` if it was written for `input_hash`.
fn resumable(path: &Path, input_hash: &str) -> Result<Option<Checkpoint>> {
    if !path.exists() {
        return Ok(None);
    }
    let ck = read_checkpoint(path)?;
    Ok((ck.meta.get("input_hash").and_then(Value::as_str) == Some(input_hash)).then_some(ck))
}

/// Trains one stage. `stop_after` limits the steps taken by this invocation (the run is then
/// left resumable, as after an interruption).
pub fn train(cfg: &ExperimentConfig, layout: &Layout, stage: TrainStage, stop_after: Option<usize>) -> Result<StageOutcome> {
    let hash = stage.input_hash(cfg);
    let dir = &layout.checkpoints;
    if let Some(rec) = CompletionRecord::find_valid(dir, stage.name(), &hash)? {
        info!("{} is up to date", stage.name());
        return Ok(rec.outcome(dir, StageStatus::Skipped));
    }
    let data = Dataset::open(cfg, &layout.dataset)?;
    ensure_dir(dir)?;
    let ck_path = stage.checkpoint_path(layout);
    let resume = resumable(&ck_path, &hash)?;
    let run = StageRun { cfg, hash: &hash, ck_path: &ck_path, loss_path: dir.join(stage.loss_file()), stop_after };
    let (finished, metrics) = match stage {
        TrainStage::ReconVae => run.recon(&data, TrainingMode::Vae, resume)?,
        TrainStage::ReconIntrovae => run.recon(&data, TrainingMode::IntroVae, resume)?,
        TrainStage::Disc => run.disc(&data, resume)?,
        TrainStage::Seg => run.seg(&data, resume)?,
    };
    let names = [stage.checkpoint_file(), stage.loss_file()];
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let rec = CompletionRecord::new(dir, stage.name(), &hash, &names, metrics)?;
    if finished {
        rec.write(dir)?;
        Ok(rec.outcome(dir, StageStatus::Completed))
    } else {
        Ok(rec.outcome(dir, StageStatus::Partial))
    }
}

struct StageRun<'a> {
    cfg: &'a ExperimentConfig,
    hash: &'a str,
    ck_path: &'a Path,
    loss_path: PathBuf,
    stop_after: Option<usize>,
}

impl StageRun<'_> {
    /// Last step (exclusive) this invocation may reach.
    fn stop_at(&self, start: u64, total: u64) -> u64 {
        match self.stop_after {
            Some(n) => (start + n as u64).min(total),
            None => total,
        }
    }

    fn recon(&self, data: &Dataset, mode: TrainingMode, resume: Option<Checkpoint>) -> Result<(bool, Value)> {
        let cfg = self.cfg;
        let stage = if mode == TrainingMode::Vae { "recon-vae" } else { "recon-introvae" };
        let slices = data.split_slices(Split::Train)?;
        let (mut model, mut opt) = match resume {
            Some(ck) => {
                let (m, o) = recon_from_checkpoint(&ck)?;
                let o = o.ok_or_else(|| CliError::Core(anomaly_recon_core::Error::InvalidArgument("checkpoint lacks optimizer state".into())))?;
                (m, o)
            }
            None => {
                let m = ReconModel::<f32>::new(cfg.recon.arch.clone(), cfg.recon.hyper.clone(), mode, derive_seed(cfg.seed, &format!("init/{stage}")))?;
                let o = ReconOptim::new(&m);
                (m, o)
            }
        };
        if model.mode != mode {
            return Err(CliError::Core(anomaly_recon_core::Error::InvalidArgument(format!("checkpoint mode does not match stage {stage}"))));
        }
        let mut order = EpochOrder::new(cfg.seed, stage, slices.len(), cfg.recon.batch_size);
        let total = (cfg.recon.epochs * order.steps_per_epoch()) as u64;
        let start = model.steps;
        let stop = self.stop_at(start, total);
        let mut log = LossLog::open(&self.loss_path, "step,l_ae,l_reg_z,l_margin_zprime,l_encoder,l_decoder", start)?;
        info!("{stage}: {} slices, steps {start}..{stop} of {total}", slices.len());
        let mut last = 0.0;
        for s in start..stop {
            let idx = order.batch_at(s as usize);
            let mut rng = stage_rng(cfg.seed, format!("{stage}/step/{s}"));
            let batch: Vec<Slice> =
                idx.iter().map(|&i| if cfg.preprocess.augment { augment(&slices[i], &mut rng) } else { slices[i].clone() }).collect();
            let r = train_step(&mut model, &mut opt, &slices_to_batch(&batch), &mut rng)?;
            log.row(s, &[r.l_ae, r.l_reg_z, r.l_margin_zprime, r.l_encoder, r.l_decoder])?;
            last = r.l_ae;
            if (s + 1) % cfg.recon.checkpoint_every as u64 == 0 || s + 1 == stop {
                log.flush()?;
                write_checkpoint(self.ck_path, &tag(recon_checkpoint(&model, Some(&opt)), self.hash))?;
                info!("{stage}: step {} l_ae {:.4}", s + 1, r.l_ae);
            }
        }
        log.flush()?;
        Ok((model.steps == total, json!({ "steps": model.steps, "total_steps": total, "last_l_ae": last })))
    }

    fn disc(&self, data: &Dataset, resume: Option<Checkpoint>) -> Result<(bool, Value)> {
        let cfg = self.cfg;
        let slices = data.split_slices(Split::Train)?;
        let (mut model, mut opt): (DiscModel<f32>, Adam<f32>) = match resume {
            Some(ck) => {
                let (m, o) = disc_from_checkpoint(&ck)?;
                let o = o.ok_or_else(|| CliError::Core(anomaly_recon_core::Error::InvalidArgument("checkpoint lacks optimizer state".into())))?;
                (m, o)
            }
            None => {
                let m = DiscModel::new(cfg.disc.arch.clone(), derive_seed(cfg.seed, "init/disc"))?;
                let o = disc_optimizer(&m, cfg.disc.lr);
                (m, o)
            }
        };
        let total = cfg.disc.steps as u64;
        let start = model.steps;
        let stop = self.stop_at(start, total);
        let mut log = LossLog::open(&self.loss_path, "step,loss", start)?;
        info!("disc: {} slices, steps {start}..{stop} of {total}", slices.len());
        for s in start..stop {
            let mut rng = stage_rng(cfg.seed, format!("disc/step/{s}"));
            let triplets = sample_triplets(&slices, &cfg.disc.triplet, cfg.disc.batch_size, &mut rng)?;
            let loss = train_discriminator_step(&mut model, &mut opt, &triplets)?;
            log.row(s, &[loss])?;
            if (s + 1) % cfg.disc.checkpoint_every as u64 == 0 || s + 1 == stop {
                log.flush()?;
                write_checkpoint(self.ck_path, &tag(disc_checkpoint(&model, Some(&opt)), self.hash))?;
                info!("disc: step {} loss {loss:.4}", s + 1);
            }
        }
        log.flush()?;
        let finished = model.steps == total;
        let mut metrics = json!({ "steps": model.steps, "total_steps": total });
        if finished {
            let held_out = data.split_slices(Split::SegVal)?;
            if !held_out.is_empty() {
                let mut rng = stage_rng(cfg.seed, "disc/held-out".into());
                let t = sample_triplets(&held_out, &cfg.disc.triplet, 256, &mut rng)?;
                metrics["held_out_triplet_accuracy"] = json!(triplet_accuracy(&model, &t)?);
            }
        }
        Ok((finished, metrics))
    }

    fn seg(&self, data: &Dataset, resume: Option<Checkpoint>) -> Result<(bool, Value)> {
        let cfg = self.cfg;
        let pairs = data.anatomy_slices(Split::SegTrain)?;
        let (mut model, mut opt): (SegModel<f32>, Adam<f32>) = match resume {
            Some(ck) => {
                let (m, o) = seg_from_checkpoint(&ck)?;
                let o = o.ok_or_else(|| CliError::Core(anomaly_recon_core::Error::InvalidArgument("checkpoint lacks optimizer state".into())))?;
                (m, o)
            }
            None => {
                let m = SegModel::new(cfg.seg.arch.clone(), derive_seed(cfg.seed, "init/seg"))?;
                let o = seg_optimizer(&m, cfg.seg.lr);
                (m, o)
            }
        };
        let mut order = EpochOrder::new(cfg.seed, "seg", pairs.len(), cfg.seg.batch_size);
        let total = cfg.seg.steps as u64;
        let start = model.steps;
        let stop = self.stop_at(start, total);
        let mut log = LossLog::open(&self.loss_path, "step,loss", start)?;
        info!("seg: {} slices, steps {start}..{stop} of {total}", pairs.len());
        let size = cfg.preprocess.size;
        for s in start..stop {
            let idx = order.batch_at(s as usize);
            let mut rng = stage_rng(cfg.seed, format!("seg/step/{s}"));
            let mut xs = Vec::with_capacity(idx.len());
            let mut labels = Array3::<u8>::zeros((idx.len(), size, size));
            for (b, &i) in idx.iter().enumerate() {
                let (sl, lab) = &pairs[i];
                if cfg.preprocess.augment {
                    let p = AugmentParams::sample(&mut rng);
                    xs.push(augment_with(sl, &p));
                    labels.index_axis_mut(ndarray::Axis(0), b).assign(&augment_labels_with(lab, &p, 0));
                } else {
                    xs.push(sl.clone());
                    labels.index_axis_mut(ndarray::Axis(0), b).assign(lab);
                }
            }
            let loss = train_segmentation_step(&mut model, &mut opt, &slices_to_batch(&xs), &labels)?;
            log.row(s, &[loss])?;
            if (s + 1) % cfg.seg.checkpoint_every as u64 == 0 || s + 1 == stop {
                log.flush()?;
                write_checkpoint(self.ck_path, &tag(seg_checkpoint(&model, Some(&opt)), self.hash))?;
                info!("seg: step {} loss {loss:.4}", s + 1);
            }
        }
        log.flush()?;
        let finished = model.steps == total;
        let mut metrics = json!({ "steps": model.steps, "total_steps": total });
        if finished {
            let val = data.anatomy_slices(Split::SegVal)?;
            if !val.is_empty() {
                let xs: Vec<&Slice> = val.iter().map(|(s, _)| s).collect();
                let pred = segment_slices(&model, &xs, cfg.scoring.batch_size)?;
                let truth: Vec<_> = val.iter().map(|(_, l)| l.clone()).collect();
                let d = class_dice(&pred, &truth, cfg.seg.arch.classes)?;
                metrics["validation_dice"] = json!(d.foreground_mean());
            }
        }
        Ok((finished, metrics))
    }
}

/// `n` triplets from randomly chosen slices; slices too small or empty for a triplet are redrawn.
pub fn sample_triplets<R: Rng>(slices: &[Slice], cfg: &TripletConfig, n: usize, rng: &mut R) -> Result<Vec<Triplet>> {
    let mut out = Vec::with_capacity(n);
    let mut failures = 0;
    while out.len() < n {
        let s = &slices[rng.random_range(0..slices.len())];
        match sample_triplet(s, cfg, rng) {
            Ok(t) => out.push(t),
            Err(anomaly_recon_core::Error::DegenerateInput(_)) if failures < 1000 => failures += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}
