use anomaly_nn::{Adam, AdamConfig, Cache, Grads, Mode, Scalar};
use ndarray::Array4;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::loss::{ae_terms, kl_terms, margin_hinge};
use super::model::{ensure_finite, join_heads, split_heads, ReconModel, TrainingMode};
use crate::error::{invalid, Error, Result};

/// Loss values of one training step. `l_ae` follows the configured reduction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconLossReport {
    pub l_ae: f64,
    pub l_reg_z: f64,
    pub l_margin_zprime: f64,
    pub l_encoder: f64,
    pub l_decoder: f64,
}

/// Adam states for the two networks.
#[derive(Clone, Debug)]
pub struct ReconOptim<T> {
    pub encoder: Adam<T>,
    pub decoder: Adam<T>,
}

impl<T: Scalar> ReconOptim<T> {
    pub fn new(model: &ReconModel<T>) -> Self {
        Self {
            encoder: Adam::new(AdamConfig::with_lr(model.hyper.encoder_lr), &model.encoder.store),
            decoder: Adam::new(AdamConfig::with_lr(model.hyper.decoder_lr), &model.decoder.store),
        }
    }
}

fn sample_epsilon<T: Scalar, R: Rng + ?Sized>(shape: (usize, usize, usize, usize), rng: &mut R) -> Array4<T> {
    Array4::from_shape_simple_fn(shape, || {
        let e: f64 = rng.sample(StandardNormal);
        T::of(e)
    })
}

fn ensure_grads<T: Scalar>(what: &str, g: &Grads<T>) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericFailure(format!("non-finite {what} gradients; step aborted")))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Forward pass shared by both objectives: encoder on `x`, `z = mu + sigma * eps`, decoder on `z`.
struct Pass<T> {
    enc_cache: Cache<T>,
    dec_cache: Cache<T>,
    mu: Array4<T>,
    logvar: Array4<T>,
    eps: Array4<T>,
    x_hat: Array4<T>,
}

fn forward_pass<T: Scalar>(model: &ReconModel<T>, batch: &Array4<T>, eps: Array4<T>) -> Result<Pass<T>> {
    model.check_input(batch)?;
    if batch.dim().0 == 0 {
        return Err(invalid("empty training batch"));
    }
    let (out, enc_cache) = model.encoder.forward(batch.clone(), Mode::Train);
    ensure_finite("encoder output", &out)?;
    let (mu, logvar) = split_heads(&out, model.arch.latent_channels);
    if eps.dim() != mu.dim() {
        return Err(invalid("epsilon shape does not match the latent shape"));
    }
    let sigma = logvar.mapv(|l| (T::of(0.5) * l).exp());
    let mut z = &sigma * &eps;
    z += &mu;
    ensure_finite("latent sample", &z)?;
    let (x_hat, dec_cache) = model.decoder.forward(z, Mode::Train);
    ensure_finite("reconstruction", &x_hat)?;
    Ok(Pass { enc_cache, dec_cache, mu, logvar, eps, x_hat })
}

/// Gradient of the encoder heads given `dL/dz` through the reparameterization.
fn through_reparam<T: Scalar>(p: &Pass<T>, dz: &Array4<T>, d_mu: &mut Array4<T>, d_lv: &mut Array4<T>) {
    let half = T::of(0.5);
    *d_mu += dz;
    ndarray::Zip::from(d_lv).and(dz).and(&p.eps).and(&p.logvar).for_each(|d, &g, &e, &l| {
        *d += g * e * half * (half * l).exp();
    });
}

/// Batch-mean KL of `(mu, logvar)` and its gradients scaled by `weight`.
fn kl_scaled<T: Scalar>(mu: &Array4<T>, logvar: &Array4<T>, weight: f64) -> (f64, Array4<T>, Array4<T>) {
    let n = mu.dim().0 as f64;
    let (per, mut d_mu, mut d_lv) = kl_terms(mu, logvar);
    let k = T::of(weight / n);
    d_mu *= k;
    d_lv *= k;
    (mean(&per), d_mu, d_lv)
}

struct AeGrad<T> {
    value: f64,
    d_xhat: Array4<T>,
}

/// Reduced `L_AE` of the pass and the gradient of `weight * L_AE` w.r.t. the reconstruction.
fn ae_scaled<T: Scalar>(model: &ReconModel<T>, batch: &Array4<T>, x_hat: &Array4<T>, weight: f64) -> Result<AeGrad<T>> {
    let (n, _, h, w) = batch.dim();
    let red = model.hyper.ae_reduction.factor(h * w);
    let (per, d) = ae_terms(batch, x_hat, model.hyper.lambda_ssim, Some(weight * red / n as f64))?;
    Ok(AeGrad { value: mean(&per) * red, d_xhat: d.expect("gradient requested") })
}

fn vae_grads<T: Scalar>(
    model: &ReconModel<T>,
    p: &Pass<T>,
    batch: &Array4<T>,
    ae_weight: f64,
) -> Result<(ReconLossReport, Grads<T>, Grads<T>)> {
    let ae = ae_scaled(model, batch, &p.x_hat, ae_weight)?;
    let (l_reg, mut d_mu, mut d_lv) = kl_scaled(&p.mu, &p.logvar, 1.0);
    let mut g_dec = model.decoder.zero_grads();
    let dz = model.decoder.backward(&p.dec_cache, ae.d_xhat, Some(&mut g_dec));
    through_reparam(p, &dz, &mut d_mu, &mut d_lv);
    let mut g_enc = model.encoder.zero_grads();
    model.encoder.backward(&p.enc_cache, join_heads(&d_mu, &d_lv), Some(&mut g_enc));
    let report = ReconLossReport {
        l_ae: ae.value,
        l_reg_z: l_reg,
        l_margin_zprime: 0.0,
        l_encoder: ae_weight * ae.value + l_reg,
        l_decoder: ae_weight * ae.value,
    };
    Ok((report, g_enc, g_dec))
}

/// Encoder objective `L_REG(z) + alpha [m - L_REG(E(fake))]^+ + beta L_AE`; `fake` is treated
/// as a constant input.
fn introvae_encoder_grads<T: Scalar>(
    model: &ReconModel<T>,
    p: &Pass<T>,
    batch: &Array4<T>,
    fake: &Array4<T>,
) -> Result<(ReconLossReport, Grads<T>)> {
    let (alpha, beta, m) = (model.hyper.alpha, model.hyper.beta, model.hyper.margin);
    let ae = ae_scaled(model, batch, &p.x_hat, beta)?;
    let (l_reg_z, mut d_mu, mut d_lv) = kl_scaled(&p.mu, &p.logvar, 1.0);
    let (out_fake, fake_cache) = model.encoder.forward(fake.clone(), Mode::Train);
    ensure_finite("encoder output on reconstructions", &out_fake)?;
    let (mu_f, lv_f) = split_heads(&out_fake, model.arch.latent_channels);
    let (l_reg_zp, mut d_mu_f, mut d_lv_f) = kl_scaled(&mu_f, &lv_f, 1.0);
    let (margin, d_margin) = margin_hinge(m, l_reg_zp);

    let mut g_enc = model.encoder.zero_grads();
    let dz = model.decoder.backward(&p.dec_cache, ae.d_xhat, None);
    through_reparam(p, &dz, &mut d_mu, &mut d_lv);
    model.encoder.backward(&p.enc_cache, join_heads(&d_mu, &d_lv), Some(&mut g_enc));
    if alpha != 0.0 && d_margin != 0.0 {
        let k = T::of(alpha * d_margin);
        d_mu_f *= k;
        d_lv_f *= k;
        model.encoder.backward(&fake_cache, join_heads(&d_mu_f, &d_lv_f), Some(&mut g_enc));
    }
    let report = ReconLossReport {
        l_ae: ae.value,
        l_reg_z,
        l_margin_zprime: margin,
        l_encoder: l_reg_z + alpha * margin + beta * ae.value,
        l_decoder: 0.0,
    };
    Ok((report, g_enc))
}

/// Decoder objective `alpha L_REG(E(x_hat)) + beta L_AE` for the decoder pass in `p`, with the
/// current encoder held fixed. Returns `(alpha-free L_REG(z'), objective, grads)`.
fn introvae_decoder_grads<T: Scalar>(model: &ReconModel<T>, p: &Pass<T>, batch: &Array4<T>) -> Result<(f64, f64, Grads<T>)> {
    let (alpha, beta) = (model.hyper.alpha, model.hyper.beta);
    let ae = ae_scaled(model, batch, &p.x_hat, beta)?;
    let mut d_dec = ae.d_xhat;
    let mut l_reg_zp = 0.0;
    if alpha != 0.0 {
        let (out, cache) = model.encoder.forward(p.x_hat.clone(), Mode::Train);
        ensure_finite("encoder output on reconstructions", &out)?;
        let (mu, lv) = split_heads(&out, model.arch.latent_channels);
        let (kl, d_mu, d_lv) = kl_scaled(&mu, &lv, alpha);
        l_reg_zp = kl;
        d_dec += &model.encoder.backward(&cache, join_heads(&d_mu, &d_lv), None);
    }
    let mut g_dec = model.decoder.zero_grads();
    model.decoder.backward(&p.dec_cache, d_dec, Some(&mut g_dec));
    Ok((l_reg_zp, alpha * l_reg_zp + beta * ae.value, g_dec))
}

/// Objective value and gradients of one VAE step for a fixed `eps`, without updating the model.
pub fn vae_loss_grads<T: Scalar>(
    model: &ReconModel<T>,
    batch: &Array4<T>,
    eps: Array4<T>,
    ae_weight: f64,
) -> Result<(f64, Grads<T>, Grads<T>)> {
    let p = forward_pass(model, batch, eps)?;
    let (r, ge, gd) = vae_grads(model, &p, batch, ae_weight)?;
    Ok((r.l_encoder, ge, gd))
}

/// IntroVAE encoder objective and its encoder gradients for a fixed `eps` and a fixed `fake` batch.
pub fn introvae_encoder_loss_grads<T: Scalar>(
    model: &ReconModel<T>,
    batch: &Array4<T>,
    eps: Array4<T>,
    fake: &Array4<T>,
) -> Result<(f64, Grads<T>)> {
    let p = forward_pass(model, batch, eps)?;
    let (r, g) = introvae_encoder_grads(model, &p, batch, fake)?;
    Ok((r.l_encoder, g))
}

/// IntroVAE decoder objective and its decoder gradients for a fixed `eps`.
pub fn introvae_decoder_loss_grads<T: Scalar>(model: &ReconModel<T>, batch: &Array4<T>, eps: Array4<T>) -> Result<(f64, Grads<T>)> {
    let p = forward_pass(model, batch, eps)?;
    let (_, loss, g) = introvae_decoder_grads(model, &p, batch)?;
    Ok((loss, g))
}

/// One joint step on `ae_weight * L_AE + L_REG`.
pub fn train_vae_step_weighted<T: Scalar, R: Rng + ?Sized>(
    model: &mut ReconModel<T>,
    opt: &mut ReconOptim<T>,
    batch: &Array4<T>,
    ae_weight: f64,
    rng: &mut R,
) -> Result<ReconLossReport> {
    if model.mode != TrainingMode::Vae {
        return Err(invalid("model is not in vae mode"));
    }
    let eps = sample_epsilon((batch.dim().0, model.arch.latent_channels, model.arch.latent_size, model.arch.latent_size), rng);
    let p = forward_pass(model, batch, eps)?;
    let (report, g_enc, g_dec) = vae_grads(model, &p, batch, ae_weight)?;
    ensure_grads("encoder", &g_enc)?;
    ensure_grads("decoder", &g_dec)?;
    opt.encoder.step(&mut model.encoder.store, &g_enc);
    opt.decoder.step(&mut model.decoder.store, &g_dec);
    model.encoder.commit_stats(&p.enc_cache);
    model.decoder.commit_stats(&p.dec_cache);
    model.steps += 1;
    Ok(report)
}

/// One step on `L_AE + L_REG` for encoder and decoder jointly.
pub fn train_vae_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut ReconModel<T>,
    opt: &mut ReconOptim<T>,
    batch: &Array4<T>,
    rng: &mut R,
) -> Result<ReconLossReport> {
    train_vae_step_weighted(model, opt, batch, 1.0, rng)
}

/// Introspective step: the encoder minimizes `L_REG(z) + alpha [m - L_REG(z')]^+ + beta L_AE`
/// with `z'` the encoding of the detached reconstruction, then the decoder minimizes
/// `alpha L_REG(z') + beta L_AE` with `z'` re-encoded by the updated encoder. Both sub-steps
/// share the same sampled `z`.
pub fn train_introvae_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut ReconModel<T>,
    opt: &mut ReconOptim<T>,
    batch: &Array4<T>,
    rng: &mut R,
) -> Result<ReconLossReport> {
    if model.mode != TrainingMode::IntroVae {
        return Err(invalid("model is not in introvae mode"));
    }
    let eps = sample_epsilon((batch.dim().0, model.arch.latent_channels, model.arch.latent_size, model.arch.latent_size), rng);
    let p = forward_pass(model, batch, eps)?;
    let (mut report, g_enc) = introvae_encoder_grads(model, &p, batch, &p.x_hat)?;
    ensure_grads("encoder", &g_enc)?;
    opt.encoder.step(&mut model.encoder.store, &g_enc);
    model.encoder.commit_stats(&p.enc_cache);

    let (_, l_dec, g_dec) = introvae_decoder_grads(model, &p, batch)?;
    ensure_grads("decoder", &g_dec)?;
    opt.decoder.step(&mut model.decoder.store, &g_dec);
    model.decoder.commit_stats(&p.dec_cache);
    model.steps += 1;
    report.l_decoder = l_dec;
    Ok(report)
}

/// Dispatches on the model's training mode.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut ReconModel<T>,
    opt: &mut ReconOptim<T>,
    batch: &Array4<T>,
    rng: &mut R,
) -> Result<ReconLossReport> {
    match model.mode {
        TrainingMode::Vae => train_vae_step(model, opt, batch, rng),
        TrainingMode::IntroVae => train_introvae_step(model, opt, batch, rng),
    }
}
