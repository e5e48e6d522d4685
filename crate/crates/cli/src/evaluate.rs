//! Evaluation: rectified detection ROC per test volume, anatomical fidelity of the
//! reconstructions and the supporting diagnostics, written as JSON plus SVG ROC plots.

use std::collections::BTreeMap;

use anomaly_recon_core::checkpoint::{read_checkpoint, seg_from_checkpoint};
use anomaly_recon_core::fidelity::{class_dice, fidelity_scores, segment_slices, SegModel};
use anomaly_recon_core::scoring::{body_mask, evaluate_detection, residual_map, RocResult, ANY_CLASS};
use anomaly_recon_core::volume::{read_array, Slice, ABNORMALITY_CLASSES, ANATOMY_CLASSES};
use anomaly_recon_core::Error as CoreError;
use log::info;
use ndarray::{Array1, Array2, Array3, ArrayView, Axis, Ix1};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{hash_json, ExperimentConfig};
use crate::dataset::{Dataset, Split};
use crate::error::{CliError, Result};
use crate::plot::{roc_svg, Curve};
use crate::run::{file_sha256, read_json, write_atomic, write_json, CompletionRecord, Layout, StageOutcome, StageStatus};
use crate::score::{raw_id, recon_id, search_summary, validate_scores, zscored_id, ScoreIndex, SearchRecord, SearchSummary, Variant, SEARCH_LOG};
use crate::train::TrainStage;

pub const STAGE: &str = "evaluate";
pub const REPORT: &str = "evaluation.json";
pub const FIDELITY_REPORT: &str = "fidelity.json";

/// Abnormality class used for the embedding-vs-residual comparison (bright blobs).
pub const SIGNAL_CLASS: &str = "metastatic_tumor_analog";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    /// Standard error of the mean.
    pub se: f64,
}

impl Stat {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return Self::default();
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { n, mean, std, se: std / (n as f64).sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub auc: Stat,
    pub sensitivity: Stat,
    pub specificity: Stat,
    pub precision: Stat,
    pub f1: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeDetection {
    pub id: String,
    /// Rectified (body-mask) AUC per class present in the volume.
    pub auc: BTreeMap<String, f64>,
    /// AUC of the same scores over every voxel of the volume.
    pub auc_all_voxels: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Per class, over abnormal test volumes containing that class.
    pub classes: BTreeMap<String, ClassSummary>,
    /// AUC of all test volumes pooled into one body-masked ROC.
    pub pooled_auc: BTreeMap<String, f64>,
    pub volumes: Vec<VolumeDetection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub quality: Stat,
    /// Over slices whose input segments to at least one foreground class.
    pub overlap: Stat,
    /// Pooled Dice between the segmentations of inputs and reconstructions, per anatomy class.
    pub per_class_dice: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalToNoise {
    pub class: String,
    /// Abnormal slices compared.
    pub slices: usize,
    /// Slices where the embedding map's in/out-of-lesion mean ratio beats the L1 residual's.
    pub embedding_wins: usize,
    pub fraction: f64,
    pub embedding_ratio: Stat,
    pub residual_ratio: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub detection: Detection,
    pub fidelity: Fidelity,
    pub signal_to_noise: SignalToNoise,
}

/// Paired per-slice difference of a fidelity score between two variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub better: String,
    pub worse: String,
    pub quality: Stat,
    pub overlap: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationCheck {
    pub slices: usize,
    pub per_class_dice: BTreeMap<String, Option<f64>>,
    pub mean_foreground_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub protocol: serde_json::Value,
    pub variants: BTreeMap<String, VariantReport>,
    pub fidelity_gaps: Vec<Gap>,
    pub latent_search: Option<SearchSummary>,
    pub segmentation: SegmentationCheck,
}

/// Body-masked and all-voxel ROC of one volume; `None` when it has no abnormal voxel in the body.
pub fn volume_detection(
    id: &str,
    scores: &Array3<f64>,
    masks: &BTreeMap<String, Array3<u8>>,
    body: &Array3<u8>,
) -> Result<Option<(VolumeDetection, RocResult)>> {
    let views: BTreeMap<String, _> = masks.iter().map(|(k, m)| (k.clone(), m.view())).collect();
    let positives_in_body = masks.values().any(|m| m.iter().zip(body.iter()).any(|(a, b)| *a != 0 && *b != 0));
    if !positives_in_body {
        return Ok(None);
    }
    let rect = evaluate_detection(scores.view(), &views, body.view())?;
    let everything = Array3::<u8>::ones(scores.dim());
    let all = evaluate_detection(scores.view(), &views, everything.view())?;
    let aucs = |r: &RocResult| r.classes.iter().filter_map(|(k, c)| c.as_ref().map(|c| (k.clone(), c.auc))).collect();
    Ok(Some((VolumeDetection { id: id.to_string(), auc: aucs(&rect), auc_all_voxels: aucs(&all) }, rect)))
}

fn summarize(rocs: &[RocResult]) -> BTreeMap<String, ClassSummary> {
    let mut classes: Vec<String> = vec![ANY_CLASS.to_string()];
    classes.extend(ABNORMALITY_CLASSES.iter().map(|s| s.to_string()));
    let mut out = BTreeMap::new();
    for class in classes {
        let present: Vec<_> = rocs.iter().filter_map(|r| r.classes.get(&class).and_then(|c| c.as_ref())).collect();
        if present.is_empty() {
            continue;
        }
        let pick = |f: &dyn Fn(&anomaly_recon_core::scoring::ClassRoc) -> f64| Stat::of(&present.iter().map(|c| f(c)).collect::<Vec<_>>());
        out.insert(
            class,
            ClassSummary {
                auc: pick(&|c| c.auc),
                sensitivity: pick(&|c| c.operating.sensitivity),
                specificity: pick(&|c| c.operating.specificity),
                precision: pick(&|c| c.operating.precision),
                f1: pick(&|c| c.operating.f1),
            },
        );
    }
    out
}

/// Mean score inside the lesion over mean score in the rest of the body.
fn lesion_ratio(map: &Array2<f64>, lesion: &Array2<u8>, body: &Array2<u8>) -> Option<f64> {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for ((v, l), b) in map.iter().zip(lesion.iter()).zip(body.iter()) {
        if *l != 0 {
            si += v;
            ni += 1;
        } else if *b != 0 {
            so += v;
            no += 1;
        }
    }
    if ni == 0 || no == 0 || so <= 0.0 {
        return None;
    }
    Some((si / ni as f64) / (so / no as f64))
}

struct VolumeData {
    id: String,
    slices: Vec<Slice>,
    masks: BTreeMap<String, Array3<u8>>,
    body: Array3<u8>,
}

fn load_volumes(data: &Dataset) -> Result<Vec<VolumeData>> {
    let mut out = Vec::new();
    for e in data.manifest.ids(Split::Test) {
        let intensity = data.intensity(&e.id)?;
        out.push(VolumeData { id: e.id.clone(), slices: data.slices(&e.id)?, masks: data.abnormality_masks(&e.id)?, body: body_mask(&intensity)? });
    }
    Ok(out)
}

fn to_f64(a: Array3<f32>) -> Array3<f64> {
    a.mapv(f64::from)
}

fn evaluate_variant(
    cfg: &ExperimentConfig,
    layout: &Layout,
    variant: Variant,
    vols: &[VolumeData],
    seg: &SegModel<f32>,
) -> Result<(VariantReport, Vec<(f64, Option<f64>)>, Vec<Curve>)> {
    let dir = variant.dir(layout);
    validate_scores(&dir)?;
    let index: ScoreIndex = read_json(&dir.join(crate::score::INDEX))?;
    let mut rocs = Vec::new();
    let mut per_volume = Vec::new();
    let mut pooled_scores = Vec::new();
    let mut pooled_masks: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut pairs_x = Vec::new();
    let mut pairs_xh = Vec::new();
    let (mut emb_ratios, mut res_ratios, mut wins) = (Vec::new(), Vec::new(), 0usize);
    for v in vols {
        if !index.volumes.contains_key(&v.id) {
            return Err(CliError::Core(CoreError::MissingArtifact(dir.join(format!("{}.json", v.id)))));
        }
        let scores = to_f64(read_array(&dir, &zscored_id(&v.id))?.0);
        let raw = to_f64(read_array(&dir, &raw_id(&v.id))?.0);
        let recon = read_array(&dir, &recon_id(&v.id))?.0;
        if scores.dim() != v.body.dim() {
            return Err(CliError::Core(CoreError::InvalidArgument(format!("{}: score volume does not match the slice grid", v.id))));
        }
        if let Some((det, roc)) = volume_detection(&v.id, &scores, &v.masks, &v.body)? {
            per_volume.push(det);
            rocs.push(roc);
        }
        for (i, b) in v.body.iter().enumerate() {
            if *b != 0 {
                pooled_scores.push(scores.as_slice().expect("standard layout")[i]);
            }
        }
        for class in ABNORMALITY_CLASSES {
            let col = pooled_masks.entry(class.to_string()).or_default();
            match v.masks.get(class) {
                Some(m) => col.extend(m.iter().zip(v.body.iter()).filter(|(_, b)| **b != 0).map(|(x, _)| *x)),
                None => col.extend(v.body.iter().filter(|b| **b != 0).map(|_| 0u8)),
            }
        }
        for s in &v.slices {
            let xh = recon.index_axis(Axis(0), s.index_k).to_owned();
            pairs_x.push(s.clone());
            pairs_xh.push(Slice { data: xh.clone(), source_id: s.source_id.clone(), index_k: s.index_k });
            if let Some(lesion) = v.masks.get(SIGNAL_CLASS) {
                let lesion = lesion.index_axis(Axis(0), s.index_k).to_owned();
                if lesion.iter().any(|x| *x != 0) {
                    let body = v.body.index_axis(Axis(0), s.index_k).to_owned();
                    let emb = raw.index_axis(Axis(0), s.index_k).to_owned();
                    let res = residual_map(&s.data, &xh)?;
                    if let (Some(e), Some(r)) = (lesion_ratio(&emb, &lesion, &body), lesion_ratio(&res, &lesion, &body)) {
                        emb_ratios.push(e);
                        res_ratios.push(r);
                        wins += usize::from(e > r);
                    }
                }
            }
        }
    }

    let pooled_scores = Array1::from(pooled_scores);
    let pooled_views: BTreeMap<String, ArrayView<u8, Ix1>> =
        pooled_masks.iter().filter(|(_, m)| m.iter().any(|x| *x != 0)).map(|(k, m)| (k.clone(), ArrayView::from(m.as_slice()))).collect();
    let body_all = Array1::<u8>::ones(pooled_scores.len());
    let pooled = evaluate_detection(pooled_scores.view(), &pooled_views, body_all.view())?;
    let pooled_auc = pooled.classes.iter().filter_map(|(k, c)| c.as_ref().map(|c| (k.clone(), c.auc))).collect();
    let curves = pooled
        .classes
        .iter()
        .filter_map(|(k, c)| {
            c.as_ref().map(|c| {
                let mut pts: Vec<(f64, f64)> = pooled.fpr.iter().copied().zip(c.tpr.iter().copied()).collect();
                pts.push((0.0, 0.0));
                pts.insert(0, (1.0, 1.0));
                Curve { label: format!("{k} (AUC {:.3})", c.auc), points: pts }
            })
        })
        .collect();

    let refs: Vec<(&Slice, &Slice)> = pairs_x.iter().zip(&pairs_xh).collect();
    let fid = fidelity_scores(seg, &refs, cfg.scoring.batch_size)?;
    let xs: Vec<&Slice> = pairs_x.iter().collect();
    let xhs: Vec<&Slice> = pairs_xh.iter().collect();
    let seg_x = segment_slices(seg, &xs, cfg.scoring.batch_size)?;
    let seg_xh = segment_slices(seg, &xhs, cfg.scoring.batch_size)?;
    let dice = class_dice(&seg_xh, &seg_x, seg.arch.classes)?;
    let quality: Vec<f64> = fid.iter().map(|(q, _)| *q).collect();
    let overlap: Vec<f64> = fid.iter().filter_map(|(_, o)| *o).collect();
    let fidelity = Fidelity {
        quality: Stat::of(&quality),
        overlap: Stat::of(&overlap),
        per_class_dice: ANATOMY_CLASSES.iter().map(|c| c.to_string()).zip(dice.per_class.iter().copied()).collect(),
    };
    let n = emb_ratios.len();
    let signal_to_noise = SignalToNoise {
        class: SIGNAL_CLASS.to_string(),
        slices: n,
        embedding_wins: wins,
        fraction: if n == 0 { 0.0 } else { wins as f64 / n as f64 },
        embedding_ratio: Stat::of(&emb_ratios),
        residual_ratio: Stat::of(&res_ratios),
    };
    let detection = Detection { classes: summarize(&rocs), pooled_auc, volumes: per_volume };
    Ok((VariantReport { detection, fidelity, signal_to_noise }, fid, curves))
}

fn paired_gap(better: Variant, worse: Variant, a: &[(f64, Option<f64>)], b: &[(f64, Option<f64>)]) -> Gap {
    let q: Vec<f64> = a.iter().zip(b).map(|(x, y)| x.0 - y.0).collect();
    let o: Vec<f64> = a.iter().zip(b).filter_map(|(x, y)| Some(x.1? - y.1?)).collect();
    Gap { better: better.name().into(), worse: worse.name().into(), quality: Stat::of(&q), overlap: Stat::of(&o) }
}

pub fn input_hash(cfg: &ExperimentConfig, layout: &Layout, variants: &[Variant]) -> Result<String> {
    let mut parts = serde_json::Map::new();
    for v in variants {
        let rec: CompletionRecord = read_json(&CompletionRecord::path(&layout.scores, &v.stage_name()))?;
        parts.insert(v.name().into(), json!(rec.artifacts));
    }
    let seg = crate::score::trained_checkpoint(cfg, layout, TrainStage::Seg)?;
    Ok(hash_json(&json!({ "scores": parts, "seg": file_sha256(&seg)?, "batch": cfg.scoring.batch_size, "format": 1 })))
}

/// Variants whose scores are complete for the current config.
pub fn scored_variants(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for v in Variant::ALL {
        let hash = match crate::score::input_hash(cfg, layout, v) {
            Ok(h) => h,
            Err(CliError::Core(CoreError::MissingArtifact(_) | CoreError::UntrainedModel(_))) => continue,
            Err(e) => return Err(e),
        };
        if CompletionRecord::find_valid(&layout.scores, &v.stage_name(), &hash)?.is_some() {
            out.push(v);
        }
    }
    Ok(out)
}

pub fn evaluate(cfg: &ExperimentConfig, layout: &Layout) -> Result<StageOutcome> {
    let data = Dataset::open(cfg, &layout.dataset)?;
    let abnormal = data.manifest.ids(Split::Test).filter(|e| e.abnormal_slices > 0).count();
    if abnormal == 0 {
        return Err(CliError::Core(CoreError::InvalidArgument("the test split has no abnormal volumes to evaluate".into())));
    }
    let variants = scored_variants(cfg, layout)?;
    if variants.is_empty() {
        return Err(CliError::Core(CoreError::MissingArtifact(layout.scores.join(crate::score::INDEX))));
    }
    let hash = input_hash(cfg, layout, &variants)?;
    let out = &layout.reports;
    if let Some(rec) = CompletionRecord::find_valid(out, STAGE, &hash)? {
        info!("evaluation is up to date");
        return Ok(rec.outcome(out, StageStatus::Skipped));
    }
    let (seg, _) = seg_from_checkpoint(&read_checkpoint(&TrainStage::Seg.checkpoint_path(layout))?)?;
    let vols = load_volumes(&data)?;

    let mut reports = BTreeMap::new();
    let mut fids = BTreeMap::new();
    let mut files = vec![REPORT.to_string(), FIDELITY_REPORT.to_string()];
    for &v in &variants {
        info!("evaluating {}", v.name());
        let (rep, fid, curves) = evaluate_variant(cfg, layout, v, &vols, &seg)?;
        let svg = roc_svg(&format!("Rectified ROC, {}", v.name()), &curves);
        let name = format!("roc_{}.svg", v.dir_name());
        write_atomic(&out.join(&name), svg.as_bytes())?;
        files.push(name);
        reports.insert(v, rep);
        fids.insert(v, fid);
    }
    let mut gaps = Vec::new();
    for (better, worse) in [(Variant::IntrovaeLatsearch, Variant::Introvae), (Variant::Introvae, Variant::Vae)] {
        if let (Some(a), Some(b)) = (fids.get(&better), fids.get(&worse)) {
            gaps.push(paired_gap(better, worse, a, b));
        }
    }
    let latent_search = if variants.contains(&Variant::IntrovaeLatsearch) {
        let log: Vec<SearchRecord> = read_json(&Variant::IntrovaeLatsearch.dir(layout).join(SEARCH_LOG))?;
        Some(search_summary(&log))
    } else {
        None
    };
    let seg_pairs = data.anatomy_slices(Split::SegTest)?;
    let xs: Vec<&Slice> = seg_pairs.iter().map(|(s, _)| s).collect();
    let truth: Vec<Array2<u8>> = seg_pairs.iter().map(|(_, l)| l.clone()).collect();
    let pred = segment_slices(&seg, &xs, cfg.scoring.batch_size)?;
    let dice = class_dice(&pred, &truth, seg.arch.classes)?;
    let segmentation = SegmentationCheck {
        slices: xs.len(),
        mean_foreground_dice: dice.foreground_mean(),
        per_class_dice: ANATOMY_CLASSES.iter().map(|c| c.to_string()).zip(dice.per_class.iter().copied()).collect(),
    };
    let report = Report {
        protocol: json!({
            "thresholds": anomaly_recon_core::scoring::ROC_THRESHOLDS,
            "threshold_rule": "score >= t at in-mask score quantiles",
            "region": "body mask",
            "operating_point": "youden",
            "spread": "sample standard deviation over volumes",
            "stride": cfg.scoring.stride,
            "zscore_region": cfg.scoring.zscore_region,
        }),
        variants: reports.iter().map(|(k, v)| (k.name().to_string(), v.clone())).collect(),
        fidelity_gaps: gaps.clone(),
        latent_search,
        segmentation: segmentation.clone(),
    };
    write_json(&out.join(REPORT), &report)?;
    let fidelity: BTreeMap<&str, &Fidelity> = reports.iter().map(|(k, v)| (k.name(), &v.fidelity)).collect();
    write_json(&out.join(FIDELITY_REPORT), &json!({ "variants": fidelity, "gaps": gaps, "segmentation": segmentation }))?;
    let metrics = json!({
        "variants": reports.iter().map(|(k, v)| (k.name().to_string(), json!({
            "auc_any": v.detection.classes.get(ANY_CLASS).map(|c| c.auc.mean),
            "quality": v.fidelity.quality.mean,
            "overlap": v.fidelity.overlap.mean,
        }))).collect::<serde_json::Map<_, _>>(),
    });
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    let rec = CompletionRecord::new(out, STAGE, &hash, &names, metrics)?;
    rec.write(out)?;
    Ok(rec.outcome(out, StageStatus::Completed))
}

