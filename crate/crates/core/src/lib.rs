//! Refacing pipeline: synthetic head phantoms, two face anonymizers, a
//! CycleGAN trained to undo them, and front-half correlation/SSIM scoring.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anonymize;
pub mod autodiff;
pub mod cyclegan;
pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod nifti;
pub mod pgm;
pub mod phantom;
pub mod rng;
pub mod slicing;
pub mod volume;
