//! VAE and IntroVAE reconstruction networks with latent representation search.

mod loss;
mod model;
mod search;
mod ssim;
mod train;

pub use loss::{ae_terms, kl_terms, loss_ae, loss_reg, margin_hinge, AeReduction};
pub use model::{decode, encode, reconstruct, reparameterize, ReconArch, ReconHyper, ReconModel, TrainingMode, LEAKY_SLOPE};
pub use search::{latent_search, LatentOrigin, LatentSearchConfig, LatentSearchResult};
pub use ssim::{gaussian_window, ssim, DYNAMIC_RANGE, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use train::{
    introvae_decoder_loss_grads, introvae_encoder_loss_grads, train_introvae_step, vae_loss_grads, train_step, train_vae_step, train_vae_step_weighted, ReconLossReport, ReconOptim};
