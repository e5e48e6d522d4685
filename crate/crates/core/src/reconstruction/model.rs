use anomaly_nn::{Activation, Conv2d, Mode, Module, Network, Scalar};
use ndarray::{concatenate, s, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::AeReduction;
use crate::error::{invalid, Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Filter plans and tensor sizes of the encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconArch {
    pub image_size: usize,
    /// One residual block per entry, each followed by 2x average pooling.
    pub encoder_filters: Vec<usize>,
    /// One residual block per entry; all but the last are followed by 2x upsampling.
    pub decoder_filters: Vec<usize>,
    pub latent_channels: usize,
    pub latent_size: usize,
}

impl ReconArch {
    pub fn paper() -> Self {
        Self {
            image_size: 256,
            encoder_filters: vec![32, 64, 128, 256, 512, 512],
            decoder_filters: vec![512, 512, 256, 128, 64, 32, 16],
            latent_channels: 128,
            latent_size: 4,
        }
    }

    pub fn desk() -> Self {
        Self {
            image_size: 64,
            encoder_filters: vec![8, 16, 32, 64],
            decoder_filters: vec![64, 32, 16, 8, 8],
            latent_channels: 16,
            latent_size: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_filters.is_empty() || self.decoder_filters.is_empty() || self.latent_channels == 0 {
            return Err(invalid("filter plans and latent channels must be non-empty"));
        }
        if self.encoder_filters.iter().chain(&self.decoder_filters).any(|f| *f == 0) {
            return Err(invalid("filter counts must be positive"));
        }
        if self.latent_size << self.encoder_filters.len() != self.image_size {
            return Err(invalid(format!(
                "{} encoder blocks cannot reduce {} px to a {} px latent grid",
                self.encoder_filters.len(),
                self.image_size,
                self.latent_size
            )));
        }
        if self.latent_size << (self.decoder_filters.len() - 1) != self.image_size {
            return Err(invalid(format!(
                "{} decoder blocks cannot expand a {} px latent grid to {} px",
                self.decoder_filters.len(),
                self.latent_size,
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_channels * self.latent_size * self.latent_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Vae,
    #[serde(rename = "introvae")]
    IntroVae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconHyper {
    pub alpha: f64,
    pub beta: f64,
    /// Hinge margin `m` on the KL of re-encoded reconstructions.
    pub margin: f64,
    pub lambda_ssim: f64,
    pub ae_reduction: AeReduction,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
}

impl Default for ReconHyper {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.04,
            margin: 120.0,
            lambda_ssim: 1.0,
            ae_reduction: AeReduction::Mean,
            encoder_lr: 1e-4,
            decoder_lr: 5e-3,
        }
    }
}

impl ReconHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ![self.alpha, self.beta, self.margin, self.lambda_ssim, self.encoder_lr, self.decoder_lr].into_iter().all(ok) {
            return Err(invalid("reconstruction hyperparameters must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ReconModel<T> {
    pub arch: ReconArch,
    pub hyper: ReconHyper,
    pub mode: TrainingMode,
    pub encoder: Network<T>,
    pub decoder: Network<T>,
    /// Number of completed training steps.
    pub steps: u64,
}

fn leaky() -> Activation {
    Activation::LeakyRelu(LEAKY_SLOPE)
}

impl<T: Scalar> ReconModel<T> {
    pub fn new(arch: ReconArch, hyper: ReconHyper, mode: TrainingMode, seed: u64) -> Result<Self> {
        arch.validate()?;
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Network::build(&mut rng, |b| {
            let mut mods = Vec::new();
            let mut cin = 1;
            for (i, &f) in arch.encoder_filters.iter().enumerate() {
                mods.push(Module::res_block(b, &format!("enc{i}"), cin, f, leaky()));
                mods.push(Module::AvgPool2);
                cin = f;
            }
            // mu and log-variance heads share one convolution, split along channels
            mods.push(Module::Conv(Conv2d::new(b, "heads", cin, 2 * arch.latent_channels, 3, true, 1.0)));
            Module::Seq(mods)
        });
        let decoder = Network::build(&mut rng, |b| {
            let mut mods = Vec::new();
            let mut cin = arch.latent_channels;
            let last = arch.decoder_filters.len() - 1;
            for (i, &f) in arch.decoder_filters.iter().enumerate() {
                mods.push(Module::res_block(b, &format!("dec{i}"), cin, f, leaky()));
                if i < last {
                    mods.push(Module::Upsample2);
                }
                cin = f;
            }
            mods.push(Module::Conv(Conv2d::new(b, "out", cin, 1, 3, true, 1.0)));
            mods.push(Module::Act(Activation::Tanh));
            Module::Seq(mods)
        });
        Ok(Self { arch, hyper, mode, encoder, decoder, steps: 0 })
    }

    pub fn cast<U: Scalar>(&self) -> ReconModel<U> {
        ReconModel {
            arch: self.arch.clone(),
            hyper: self.hyper.clone(),
            mode: self.mode,
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            steps: self.steps,
        }
    }

    pub(crate) fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 1 || h != self.arch.image_size || w != self.arch.image_size {
            return Err(invalid(format!(
                "expected batch x 1 x {s} x {s} input, got {:?}",
                x.dim(),
                s = self.arch.image_size
            )));
        }
        Ok(())
    }

    pub(crate) fn check_latent(&self, z: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = z.dim();
        if c != self.arch.latent_channels || h != self.arch.latent_size || w != self.arch.latent_size {
            return Err(invalid(format!("latent shape {:?} does not match the model", z.dim())));
        }
        Ok(())
    }
}

/// Splits the stacked head output into `(mu, logvar)`.
pub(crate) fn split_heads<T: Scalar>(out: &Array4<T>, c: usize) -> (Array4<T>, Array4<T>) {
    (out.slice(s![.., ..c, .., ..]).to_owned(), out.slice(s![.., c.., .., ..]).to_owned())
}

pub(crate) fn join_heads<T: Scalar>(d_mu: &Array4<T>, d_lv: &Array4<T>) -> Array4<T> {
    concatenate(Axis(1), &[d_mu.view(), d_lv.view()]).expect("matching head shapes")
}

pub(crate) fn ensure_finite<T: Scalar>(what: &str, a: &Array4<T>) -> Result<()> {
    let bad = a.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::NumericFailure(format!("{bad} of {} values in {what} are not finite", a.len())));
    }
    Ok(())
}

/// Posterior parameters `(mu, sigma)` in inference mode.
pub fn encode<T: Scalar>(model: &ReconModel<T>, x: &Array4<T>) -> Result<(Array4<T>, Array4<T>)> {
    model.check_input(x)?;
    let out = model.encoder.apply(x.clone(), Mode::Eval);
    ensure_finite("encoder output", &out)?;
    let (mu, lv) = split_heads(&out, model.arch.latent_channels);
    let sigma = lv.mapv(|l| (T::of(0.5) * l).exp());
    ensure_finite("sigma", &sigma)?;
    Ok((mu, sigma))
}

/// `z = mu + sigma * epsilon`.
pub fn reparameterize<T: Scalar>(mu: &Array4<T>, sigma: &Array4<T>, epsilon: &Array4<T>) -> Result<Array4<T>> {
    if mu.dim() != sigma.dim() || mu.dim() != epsilon.dim() {
        return Err(invalid("mu, sigma and epsilon shapes differ"));
    }
    let mut z = sigma * epsilon;
    z += mu;
    Ok(z)
}

/// Reconstruction in inference mode, values in `(-1, 1)`.
pub fn decode<T: Scalar>(model: &ReconModel<T>, z: &Array4<T>) -> Result<Array4<T>> {
    model.check_latent(z)?;
    let out = model.decoder.apply(z.clone(), Mode::Eval);
    ensure_finite("decoder output", &out)?;
    Ok(out)
}

/// Plain encode-decode reconstruction through the posterior mean.
pub fn reconstruct<T: Scalar>(model: &ReconModel<T>, x: &Array4<T>) -> Result<Array4<T>> {
    let (mu, _) = encode(model, x)?;
    decode(model, &mu)
}
