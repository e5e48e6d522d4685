//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any criterion fails.
//!
//! Criteria 3-8 run the full desk pipeline twice, which takes a while on one CPU core.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use anomaly_nn::{Grads, ParamStore};
use anomaly_recon::evaluate::Report;
use anomaly_recon_core::discriminative::{triplet_loss, triplet_loss_grads, DiscArch, DiscModel};
use anomaly_recon_core::fidelity::{dice, entropy, seg_loss_grads, SegArch, SegModel};
use anomaly_recon_core::reconstruction::{
    ae_terms, introvae_decoder_loss_grads, introvae_encoder_loss_grads, kl_terms, loss_reg, ssim, vae_loss_grads,
    ReconArch, ReconHyper, ReconModel, TrainingMode,
};
use anomaly_recon_core::scoring::{evaluate_detection, zscore_normalize, ANY_CLASS};
use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

// ---- criterion 1: math oracles ----

fn kl_oracle() -> (bool, String) {
    // KL(N(mu, s^2) || N(0, 1)) per dimension as the Monte Carlo mean of log q - log p.
    let dims = [(1.0, 1.0), (0.0, 2.0), (-0.7, 0.5), (1.5, 1.3)];
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mc = 0.0;
    for &(mu, s) in &dims {
        let q = Normal::new(mu, s).unwrap();
        let mut acc = 0.0;
        for _ in 0..1_000_000 {
            let z: f64 = q.sample(&mut rng);
            acc += -f64::ln(s) - (z - mu).powi(2) / (2.0 * s * s) + z * z / 2.0;
        }
        mc += acc / 1e6;
    }
    let mu = Array4::from_shape_vec((1, 4, 1, 1), dims.iter().map(|d| d.0).collect()).unwrap();
    let sigma = Array4::from_shape_vec((1, 4, 1, 1), dims.iter().map(|d| d.1).collect()).unwrap();
    let closed = loss_reg(&mu, &sigma).unwrap();
    let e = rel_err(closed, mc);
    (e < 0.01, format!("KL rel err {e:.2e}"))
}

fn triplet_oracle(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let v = |rng: &mut ChaCha8Rng| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (a, p, n) = (v(rng), v(rng), v(rng));
        let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, w)| (u - w) * (u - w)).sum::<f64>().sqrt();
        let want = (d(&a, &p) - d(&a, &n) + 1.0).max(0.0);
        worst = worst.max((triplet_loss(&a, &p, &n).unwrap() - want).abs());
    }
    (worst < 1e-12, format!("triplet abs err {worst:.1e}"))
}

fn entropy_oracle(rng: &mut ChaCha8Rng) -> (bool, String) {
    let (c, h, w) = (6, 16, 16);
    let mut p = Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.0..1.0f64).powi(2));
    for i in 0..h {
        for j in 0..w {
            let z: f64 = (0..c).map(|k| p[[k, i, j]]).sum();
            for k in 0..c {
                p[[k, i, j]] /= z;
            }
        }
    }
    let mut direct = 0.0;
    for v in p.iter() {
        direct -= v * v.ln();
    }
    let e = rel_err(entropy(&p).unwrap(), direct);
    (e < 1e-10, format!("entropy rel err {e:.1e}"))
}

fn dice_oracle(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let a = Array2::from_shape_fn((20, 20), |_| rng.random_bool(0.3));
        let b = Array2::from_shape_fn((20, 20), |_| rng.random_bool(0.4));
        let inter = a.iter().zip(b.iter()).filter(|(x, y)| **x && **y).count() as f64;
        let want = 2.0 * inter / (a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count()) as f64;
        worst = worst.max((dice(&a, &b).unwrap() - want).abs());
    }
    (worst < 1e-12, format!("dice abs err {worst:.1e}"))
}

fn zscore_oracle(rng: &mut ChaCha8Rng) -> (bool, String) {
    let m = Array2::from_shape_fn((24, 24), |_| rng.random_range(-3.0..7.0f64).powi(3));
    let n = m.len() as f64;
    let mean = m.sum() / n;
    let sd = (m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let z = zscore_normalize(&m, None).unwrap();
    let worst = z.iter().zip(m.iter()).map(|(z, v)| (z - (v - mean) / sd).abs()).fold(0.0, f64::max);
    (worst < 1e-9, format!("z-score abs err {worst:.1e}"))
}

/// Windowed SSIM with an explicit 11x11 Gaussian (sigma 1.5) over valid windows, data range 2.
fn direct_ssim(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let k = 11;
    let mut w = Array2::<f64>::from_shape_fn((k, k), |(a, b)| (-((a as f64 - 5.0).powi(2) + (b as f64 - 5.0).powi(2)) / 4.5).exp());
    w /= w.sum();
    let (c1, c2) = (0.02f64.powi(2), 0.06f64.powi(2));
    let (h, wd) = x.dim();
    let (mut total, mut count) = (0.0, 0.0);
    for i in 0..=h - k {
        for j in 0..=wd - k {
            let win = |m: &Array2<f64>| m.slice(ndarray::s![i..i + k, j..j + k]).to_owned();
            let (xa, ya) = (win(x), win(y));
            let mx = (&w * &xa).sum();
            let my = (&w * &ya).sum();
            let vx = (&w * &xa.mapv(|v| (v - mx).powi(2))).sum();
            let vy = (&w * &ya.mapv(|v| (v - my).powi(2))).sum();
            let cxy = (&w * &(xa.mapv(|v| v - mx) * ya.mapv(|v| v - my))).sum();
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

fn ssim_oracle(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let x = Array2::from_shape_fn((26, 23), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((26, 23), |(i, j)| 0.7 * x[[i, j]] + rng.random_range(-0.3..0.3));
        worst = worst.max((ssim(x.view(), y.view()).unwrap() - direct_ssim(&x, &y)).abs());
    }
    (worst < 1e-6, format!("SSIM abs err {worst:.1e}"))
}

fn auc_oracle(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let pos: Vec<u8> = (0..200).map(|_| u8::from(rng.random_bool(0.25))).collect();
        // rounding to a coarse grid creates ties
        let scores: Vec<f64> =
            pos.iter().map(|&p| ((rng.random_range(0.0..1.0) + 0.5 * f64::from(p)) * 15.0).round()).collect();
        let (mut u, mut n1, mut n0) = (0.0, 0.0, 0.0);
        for (i, &a) in scores.iter().enumerate() {
            if pos[i] == 0 {
                n0 += 1.0;
                continue;
            }
            n1 += 1.0;
            for (j, &b) in scores.iter().enumerate() {
                if pos[j] == 0 {
                    u += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        let s = Array1::from(scores);
        let p = Array1::from(pos);
        let mask = Array1::from_elem(200, 1u8);
        let labels = BTreeMap::from([("lesion".to_string(), p.view())]);
        let r = evaluate_detection(s.view(), &labels, mask.view()).unwrap();
        worst = worst.max((r.auc("lesion").unwrap() - u / (n1 * n0)).abs());
    }
    (worst <= 1e-3, format!("AUC vs Mann-Whitney max abs err {worst:.1e} over 50 fixtures"))
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let checks = [
        kl_oracle(),
        triplet_oracle(&mut rng),
        entropy_oracle(&mut rng),
        dice_oracle(&mut rng),
        zscore_oracle(&mut rng),
        ssim_oracle(&mut rng),
        auc_oracle(&mut rng),
    ];
    let elapsed = t.elapsed();
    let ok = checks.iter().all(|c| c.0) && elapsed < Duration::from_secs(120);
    let details: Vec<&str> = checks.iter().map(|c| c.1.as_str()).collect();
    Outcome::new(ok, format!("{}; {:.1}s (< 120s)", details.join(", "), elapsed.as_secs_f64()))
}

// ---- criterion 2: gradients ----

/// Worst relative error of central differences against `grads` over trainable entries.
fn check_params(store: &ParamStore<f64>, grads: &Grads<f64>, stride: usize, f: impl Fn(&ParamStore<f64>) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for id in store.ids() {
        if !store.iter().nth(id.index()).unwrap().trainable {
            continue;
        }
        let n = store.get(id).len();
        for k in (0..n).step_by(stride.min(n).max(1)) {
            let mut sp = store.clone();
            let mut sm = store.clone();
            sp.get_mut(id).as_slice_mut().unwrap()[k] += h;
            sm.get_mut(id).as_slice_mut().unwrap()[k] -= h;
            worst = worst.max(rel_err((f(&sp) - f(&sm)) / (2.0 * h), grads.get(id).as_slice().unwrap()[k]));
        }
    }
    worst
}

fn input_fd(x: &Array4<f64>, g: &Array4<f64>, h: f64, f: impl Fn(&Array4<f64>) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut p = x.clone();
        let mut m = x.clone();
        p.as_slice_mut().unwrap()[i] += h;
        m.as_slice_mut().unwrap()[i] -= h;
        worst = worst.max(rel_err((f(&p) - f(&m)) / (2.0 * h), g.as_slice().unwrap()[i]));
    }
    worst
}

fn mini_recon(mode: TrainingMode, hyper: ReconHyper) -> ReconModel<f64> {
    let arch = ReconArch { image_size: 16, encoder_filters: vec![2, 3], decoder_filters: vec![3, 2, 2], latent_channels: 2, latent_size: 4 };
    ReconModel::new(arch, hyper, mode, 5).unwrap()
}

fn mini_batch(rng: &mut ChaCha8Rng, n: usize) -> Array4<f64> {
    Array4::from_shape_fn((n, 1, 16, 16), |(b, _, i, j)| {
        (((i as f64 - 8.0).powi(2) + (j as f64 - 7.5).powi(2)).sqrt() * 0.3 + b as f64).cos() * 0.8 + rng.random_range(-0.1..0.1)
    })
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut errs: Vec<(&str, f64)> = Vec::new();

    // L_AE with its SSIM term, with respect to the reconstruction
    let x = Array4::from_shape_fn((2, 1, 14, 13), |_| rng.random_range(-1.0..1.0));
    let y = Array4::from_shape_fn((2, 1, 14, 13), |_| rng.random_range(-1.0..1.0));
    let g = ae_terms(&x, &y, 1.0, Some(1.0)).unwrap().1.unwrap();
    errs.push(("L_AE", input_fd(&y, &g, 1e-5, |y| ae_terms(&x, y, 1.0, None).unwrap().0.iter().sum())));

    // L_REG with respect to mean and log-variance
    let mu = Array4::from_shape_fn((2, 3, 2, 2), |_| rng.random_range(-2.0..2.0));
    let lv = Array4::from_shape_fn((2, 3, 2, 2), |_| rng.random_range(-2.0..2.0));
    let (_, dmu, dlv) = kl_terms(&mu, &lv);
    let e_mu = input_fd(&mu, &dmu, 1e-6, |m| kl_terms(m, &lv).0.iter().sum());
    let e_lv = input_fd(&lv, &dlv, 1e-6, |l| kl_terms(&mu, l).0.iter().sum());
    errs.push(("L_REG", e_mu.max(e_lv)));

    // full VAE objective through a miniature encoder/decoder
    let model = mini_recon(TrainingMode::Vae, ReconHyper::default());
    let xb = mini_batch(&mut rng, 3);
    let eps = Array4::from_shape_fn((3, 2, 4, 4), |_| rng.random_range(-1.0..1.0));
    let (_, ge, gd) = vae_loss_grads(&model, &xb, eps.clone(), 1.0).unwrap();
    let enc = check_params(&model.encoder.store, &ge, 1, |s| {
        let mut m = model.clone();
        m.encoder.store = s.clone();
        vae_loss_grads(&m, &xb, eps.clone(), 1.0).unwrap().0
    });
    let dec = check_params(&model.decoder.store, &gd, 1, |s| {
        let mut m = model.clone();
        m.decoder.store = s.clone();
        vae_loss_grads(&m, &xb, eps.clone(), 1.0).unwrap().0
    });
    errs.push(("VAE objective", enc.max(dec)));

    // IntroVAE objectives with the hinge active
    let hyper = ReconHyper { margin: 1e3, alpha: 0.7, beta: 0.3, ..ReconHyper::default() };
    let model = mini_recon(TrainingMode::IntroVae, hyper);
    let fake = mini_batch(&mut rng, 3).mapv(|v| 0.5 * v);
    let (_, ge) = introvae_encoder_loss_grads(&model, &xb, eps.clone(), &fake).unwrap();
    let enc = check_params(&model.encoder.store, &ge, 1, |s| {
        let mut m = model.clone();
        m.encoder.store = s.clone();
        introvae_encoder_loss_grads(&m, &xb, eps.clone(), &fake).unwrap().0
    });
    let (_, gd) = introvae_decoder_loss_grads(&model, &xb, eps.clone()).unwrap();
    let dec = check_params(&model.decoder.store, &gd, 1, |s| {
        let mut m = model.clone();
        m.decoder.store = s.clone();
        introvae_decoder_loss_grads(&m, &xb, eps.clone()).unwrap().0
    });
    errs.push(("IntroVAE hinge", enc.max(dec)));

    // triplet loss through a miniature embedding network
    let disc = DiscModel::<f64>::new(DiscArch { patch_size: 8, filters: vec![2, 3], hidden: 5, embedding: 4 }, 3).unwrap();
    let stacked = Array4::from_shape_fn((6, 1, 8, 8), |_| rng.random_range(-1.0..1.0));
    let (loss, g) = triplet_loss_grads(&disc, &stacked).unwrap();
    let e = check_params(&disc.net.store, &g, 3, |s| {
        let mut m = disc.clone();
        m.net.store = s.clone();
        triplet_loss_grads(&m, &stacked).unwrap().0
    });
    errs.push(("triplet", if loss > 0.0 { e } else { f64::INFINITY }));

    // soft Dice + focal through a miniature residual U-net
    let seg = SegModel::<f64>::new(SegArch { filters: vec![2, 3], classes: 3 }, 3).unwrap();
    let xs = Array4::from_shape_fn((2, 1, 6, 6), |_| rng.random_range(-1.0..1.0));
    let labels = Array3::from_shape_fn((2, 6, 6), |_| rng.random_range(0..3u8));
    let (_, g) = seg_loss_grads(&seg, &xs, &labels).unwrap();
    let e = check_params(&seg.store, &g, 2, |s| {
        let mut m = seg.clone();
        m.store = s.clone();
        seg_loss_grads(&m, &xs, &labels).unwrap().0.total()
    });
    errs.push(("softDice+focal", e));

    let elapsed = t.elapsed();
    let ok = errs.iter().all(|(_, e)| *e < 1e-4) && elapsed < Duration::from_secs(300);
    let details: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Outcome::new(ok, format!("max rel err: {}; {:.1}s (< 300s)", details.join(", "), elapsed.as_secs_f64()))
}

// ---- criteria 3-8: desk pipeline ----

fn reproduce(out: &Path) -> (Duration, Result<Vec<u8>, String>) {
    let t = Instant::now();
    let res = Command::new(env!("CARGO_BIN_EXE_anomaly-recon"))
        .env_remove("ANOMALY_RECON_CACHE")
        .env("RUST_LOG", "warn")
        .arg("--output-dir")
        .arg(out)
        .arg("reproduce-desk")
        .output()
        .unwrap();
    let elapsed = t.elapsed();
    if !res.status.success() {
        return (elapsed, Err(format!("reproduce-desk failed: {}", String::from_utf8_lossy(&res.stderr))));
    }
    (elapsed, std::fs::read(out.join("reports/evaluation.json")).map_err(|e| e.to_string()))
}

const LATSEARCH: &str = "introvae+latsearch";
const INTROVAE: &str = "introvae";
const VAE: &str = "vae";
const BLOB: &str = "metastatic_tumor_analog";
const CAVITY: &str = "cavity_analog";

fn criterion_3(r: &Report) -> Outcome {
    let Some(s) = &r.latent_search else { return Outcome::new(false, "no latent search summary") };
    let ok = s.slices >= 200 && s.non_increasing_fraction >= 0.95 && s.mean_reduction > 0.0;
    Outcome::new(
        ok,
        format!(
            "{} slices (>= 200), non-increasing {:.1}% (>= 95%), mean reduction {:.4} (> 0), diverged {}",
            s.slices,
            100.0 * s.non_increasing_fraction,
            s.mean_reduction,
            s.diverged
        ),
    )
}

fn criterion_4(r: &Report) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (better, worse) in [(LATSEARCH, INTROVAE), (INTROVAE, VAE)] {
        let Some(g) = r.fidelity_gaps.iter().find(|g| g.better == better && g.worse == worse) else {
            return Outcome::new(false, format!("missing gap {better} vs {worse}"));
        };
        // the first pair only needs >=, but each gap must still exceed its standard error
        for (name, s) in [("quality", &g.quality), ("overlap", &g.overlap)] {
            let pass = s.n >= 100 && s.mean > s.se;
            ok &= pass;
            parts.push(format!("{name} {better}-{worse} {:+.4} (se {:.4}, n {})", s.mean, s.se, s.n));
        }
    }
    let means: Vec<String> = [LATSEARCH, INTROVAE, VAE]
        .iter()
        .map(|v| {
            let f = &r.variants[*v].fidelity;
            format!("{v} q {:.2} o {:.4}", f.quality.mean, f.overlap.mean)
        })
        .collect();
    Outcome::new(ok, format!("{}; {}", parts.join(", "), means.join(", ")))
}

fn class_auc(r: &Report, variant: &str, class: &str) -> f64 {
    r.variants[variant].detection.classes.get(class).map_or(f64::NAN, |c| c.auc.mean)
}

fn criterion_5(r: &Report, wall: Duration) -> Outcome {
    let mut ok = wall <= Duration::from_secs(12 * 3600);
    let mut parts = Vec::new();
    for (class, floor) in [(BLOB, 0.80), (CAVITY, 0.85)] {
        let best = class_auc(r, LATSEARCH, class);
        let vae = class_auc(r, VAE, class);
        ok &= best >= vae && best >= floor;
        parts.push(format!("{class}: latsearch {best:.3} vs vae {vae:.3} (>= vae, >= {floor})"));
    }
    Outcome::new(ok, format!("{}; wall {:.1} min (<= 720)", parts.join(", "), wall.as_secs_f64() / 60.0))
}

fn criterion_6(r: &Report) -> Outcome {
    let s = &r.variants[LATSEARCH].signal_to_noise;
    let ok = s.slices > 0 && s.fraction >= 0.80;
    Outcome::new(
        ok,
        format!(
            "embedding beats L1 on {}/{} blob slices ({:.1}%, >= 80%); mean ratio {:.2} vs {:.2}",
            s.embedding_wins,
            s.slices,
            100.0 * s.fraction,
            s.embedding_ratio.mean,
            s.residual_ratio.mean
        ),
    )
}

fn criterion_7(r: &Report) -> Outcome {
    let mut checked = 0;
    let mut failures = Vec::new();
    let mut min_gap = f64::INFINITY;
    for (variant, v) in &r.variants {
        for vol in &v.detection.volumes {
            let (Some(all), Some(body)) = (vol.auc_all_voxels.get(ANY_CLASS), vol.auc.get(ANY_CLASS)) else { continue };
            checked += 1;
            min_gap = min_gap.min(all - body);
            if all < body {
                failures.push(format!("{variant}/{} {all:.4} < {body:.4}", vol.id));
            }
        }
    }
    let ok = checked > 0 && failures.is_empty();
    Outcome::new(ok, format!("{checked} volume ROCs, min(all - body) {min_gap:+.4}; violations: {}", failures.len()))
}

/// Keeps the criteria sequential so the timing budgets are not shared with other tests.
static SERIAL: Mutex<()> = Mutex::new(());

fn report(results: &[(u32, Outcome)]) {
    for (c, o) in results {
        println!("criterion {c}: {}", line(o));
    }
    let failed: Vec<u32> = results.iter().filter(|(_, o)| !o.pass).map(|(c, _)| *c).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
fn criterion_1_math_oracles() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    report(&[(1, criterion_1())]);
}

#[test]
fn criterion_2_gradients() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    report(&[(2, criterion_2())]);
}

#[test]
fn criteria_3_to_8_desk_pipeline() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let root = tempfile::Builder::new().prefix("acceptance").tempdir_in(env!("CARGO_TARGET_TMPDIR")).unwrap();
    let (wall_a, a) = reproduce(&root.path().join("run_a"));
    let (_, b) = reproduce(&root.path().join("run_b"));
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    match &a {
        Ok(bytes) => {
            let report: Report = serde_json::from_slice(bytes).unwrap();
            results.push((3, criterion_3(&report)));
            results.push((4, criterion_4(&report)));
            results.push((5, criterion_5(&report, wall_a)));
            results.push((6, criterion_6(&report)));
            results.push((7, criterion_7(&report)));
        }
        Err(e) => {
            for c in 3..=7 {
                results.push((c, Outcome::new(false, e.clone())));
            }
        }
    }
    let det = match (&a, &b) {
        (Ok(x), Ok(y)) => Outcome::new(x == y, format!("reports {} ({} bytes)", if x == y { "byte-identical" } else { "differ" }, x.len())),
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, e.clone()),
    };
    results.push((8, det));
    report(&results);
}

fn line(o: &Outcome) -> String {
    format!("{} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail)
}
