//! CycleGAN with a refacing generator (anonymized → original), a defacing
//! generator (original → anonymized) and one PatchGAN discriminator per
//! domain.

mod checkpoint;
mod config;
mod loss;
mod network;
mod pool;
mod train;

use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError, MAGIC, VERSION,
};
pub use config::{DiscriminatorConfig, GeneratorConfig, TrainConfig};
pub use loss::{cycle_loss, l1, lsgan_loss_d, lsgan_loss_g};
pub use network::{Layer, Network, Param, INIT_STD};
pub use pool::ImagePool;
pub use train::{train, EpochLog, StepLosses, TrainLog};

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::rng;
use crate::slicing::{DomainTag, SliceImage};

#[derive(Debug, Error, PartialEq)]
pub enum CycleGanError {
    #[error("training needs at least one image per domain")]
    EmptyDataset,
    #[error("image size {found:?} differs from {expected:?}")]
    SizeMismatch { expected: [usize; 2], found: [usize; 2] },
    #[error("image size {0:?} must be a multiple of 4 and at least 32")]
    BadImageSize([usize; 2]),
    #[error("invalid config: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleGanModel {
    pub gen_cfg: GeneratorConfig,
    pub disc_cfg: DiscriminatorConfig,
    /// Anonymized → original.
    pub g_reface: Network,
    /// Original → anonymized.
    pub f_deface: Network,
    pub d_orig: Network,
    pub d_anon: Network,
}

impl CycleGanModel {
    /// Weights ~ N(0, 0.02), biases and norm offsets 0, norm gains 1.
    pub fn build(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, seed: u64) -> Result<Self, CycleGanError> {
        Ok(Self {
            gen_cfg,
            disc_cfg,
            g_reface: Network::generator("G_reface", &gen_cfg, &mut rng::stream(seed, 0))?,
            f_deface: Network::generator("F_deface", &gen_cfg, &mut rng::stream(seed, 1))?,
            d_orig: Network::discriminator("D_orig", &disc_cfg, &mut rng::stream(seed, 2))?,
            d_anon: Network::discriminator("D_anon", &disc_cfg, &mut rng::stream(seed, 3))?,
        })
    }

    pub fn networks(&self) -> [&Network; 4] {
        [&self.g_reface, &self.f_deface, &self.d_orig, &self.d_anon]
    }

    pub fn networks_mut(&mut self) -> [&mut Network; 4] {
        [&mut self.g_reface, &mut self.f_deface, &mut self.d_orig, &mut self.d_anon]
    }

    pub fn parameter_names(&self) -> Vec<&str> {
        self.networks()
            .into_iter()
            .flat_map(|n| n.params.iter().map(|p| p.name.as_str()))
            .collect()
    }
}

pub fn build_model(
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    seed: u64,
) -> Result<CycleGanModel, CycleGanError> {
    CycleGanModel::build(gen_cfg, disc_cfg, seed)
}

/// Learning rate for 0-based `epoch`: constant for the first half, then
/// linear to 0 at `epochs`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let half = cfg.epochs as f64 / 2.0;
    if (epoch as f64) < half {
        cfg.lr
    } else {
        (cfg.lr * (cfg.epochs as f64 - epoch as f64) / half).max(0.0)
    }
}

fn run_generator(net: &Network, image: &SliceImage, domain: DomainTag) -> Result<SliceImage, CycleGanError> {
    let mut tape = Tape::no_grad();
    let p = net.bind(&mut tape, false);
    let x = Tensor::new(
        [1, 1, image.height, image.width],
        image.pixels.iter().map(|&v| v as f32).collect(),
    )?;
    let xv = tape.constant(x);
    let y = net.forward(&mut tape, &p, xv)?;
    let [_, _, h, w] = tape.shape(y);
    let pixels = tape.value(y).data().iter().map(|&v| f64::from(v).max(0.0)).collect();
    Ok(image.with_pixels(w, h, pixels, domain))
}

/// Refacing generator in inference mode; output clamped to ≥ 0.
pub fn reface(model: &CycleGanModel, anonymized: &SliceImage) -> Result<SliceImage, CycleGanError> {
    run_generator(&model.g_reface, anonymized, DomainTag::Reconstructed)
}

/// Defacing generator in inference mode, tagged with `domain`.
pub fn deface(model: &CycleGanModel, original: &SliceImage, domain: DomainTag) -> Result<SliceImage, CycleGanError> {
    run_generator(&model.f_deface, original, domain)
}
