//! Face anonymizers: superficial blurring and full removal.
//!
//! Both start from the same surface search. In every sagittal slice each row
//! is scanned from the anterior edge (column 0) backwards until the first
//! voxel at or above a threshold, which is taken as the skin. The mask then
//! runs from that voxel inward for a fixed depth, never past a posterior
//! limit that sits inside the anterior half of the volume.

use rayon::prelude::*;
use thiserror::Error;

use crate::slicing::{percentile, NORMALIZATION_PERCENTILE};
use crate::volume::Volume;

/// Blur mask depth behind the skin surface.
pub const DEFAULT_BLUR_DEPTH_MM: f64 = 8.0;
/// Fraction of the A-P extent the removal mask may reach.
pub const DEFAULT_POSTERIOR_LIMIT: f64 = 0.35;
/// Skin threshold as a fraction of the volume's 99.5th percentile.
pub const DEFAULT_THRESHOLD_FRACTION: f64 = 0.15;
pub const DEFAULT_SIGMA_VOX: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum AnonymizeError {
    #[error("no voxel reaches the skin threshold {0}")]
    EmptyHead(f64),
    #[error("mask dims {mask:?} do not match volume dims {volume:?}")]
    DimMismatch { mask: [usize; 3], volume: [usize; 3] },
    #[error("invalid parameter: {0}")]
    BadParameter(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceMask {
    pub dims: [usize; 3],
    pub mask: Vec<bool>,
    pub depth_mm: f64,
}

impl FaceMask {
    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            mask: vec![false; dims.iter().product()],
            depth_mm: 0.0,
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn check(&self, volume: &Volume) -> Result<(), AnonymizeError> {
        if self.dims != volume.dims() || self.mask.len() != volume.data().len() {
            return Err(AnonymizeError::DimMismatch {
                mask: self.dims,
                volume: volume.dims(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskOptions {
    /// `f64::INFINITY` extends every row to the posterior limit.
    pub depth_mm: f64,
    pub threshold: f64,
    /// Fraction of the A-P extent; clamped to the anterior half.
    pub posterior_limit: f64,
}

impl MaskOptions {
    pub fn blur(threshold: f64) -> Self {
        Self {
            depth_mm: DEFAULT_BLUR_DEPTH_MM,
            threshold,
            posterior_limit: DEFAULT_POSTERIOR_LIMIT,
        }
    }

    pub fn removal(threshold: f64) -> Self {
        Self {
            depth_mm: f64::INFINITY,
            threshold,
            posterior_limit: DEFAULT_POSTERIOR_LIMIT,
        }
    }
}

/// `DEFAULT_THRESHOLD_FRACTION` of the volume's 99.5th percentile.
pub fn default_threshold(volume: &Volume) -> f64 {
    let p = percentile(volume.data(), NORMALIZATION_PERCENTILE).expect("volume data is finite and nonempty");
    DEFAULT_THRESHOLD_FRACTION * p
}

/// Mask with the default posterior limit.
pub fn compute_face_mask(volume: &Volume, depth_mm: f64, threshold: f64) -> Result<FaceMask, AnonymizeError> {
    compute_face_mask_with(
        volume,
        &MaskOptions {
            depth_mm,
            threshold,
            posterior_limit: DEFAULT_POSTERIOR_LIMIT,
        },
    )
}

/// Last column (exclusive) any mask may reach for an A-P extent of `nz`.
pub fn limit_column(nz: usize, posterior_limit: f64) -> usize {
    ((posterior_limit * nz as f64).round() as usize).min(nz / 2)
}

/// Mask depth in voxels along the A-P axis, at least one.
pub fn depth_voxels(depth_mm: f64, voxel_mm: f64) -> usize {
    if depth_mm.is_infinite() {
        usize::MAX
    } else {
        ((depth_mm / voxel_mm).round() as usize).max(1)
    }
}

pub fn compute_face_mask_with(volume: &Volume, opts: &MaskOptions) -> Result<FaceMask, AnonymizeError> {
    if !(opts.threshold > 0.0) {
        return Err(AnonymizeError::BadParameter("threshold must be > 0"));
    }
    if !(opts.depth_mm > 0.0) {
        return Err(AnonymizeError::BadParameter("depth_mm must be > 0"));
    }
    if !(0.0..=1.0).contains(&opts.posterior_limit) {
        return Err(AnonymizeError::BadParameter("posterior_limit must be in [0, 1]"));
    }
    if !volume.data().iter().any(|&v| v >= opts.threshold) {
        return Err(AnonymizeError::EmptyHead(opts.threshold));
    }
    let [nx, ny, nz] = volume.dims();
    let limit = limit_column(nz, opts.posterior_limit);
    let depth = depth_voxels(opts.depth_mm, volume.header.voxel_size[2]);
    let data = volume.data();
    let mut mask = vec![false; data.len()];
    mask.par_chunks_mut(nz).enumerate().for_each(|(row, out)| {
        let line = &data[row * nz..(row + 1) * nz];
        if let Some(surface) = line[..nz / 2].iter().position(|&v| v >= opts.threshold) {
            let end = surface.saturating_add(depth).min(limit);
            for m in out.iter_mut().take(end).skip(surface) {
                *m = true;
            }
        }
    });
    debug_assert_eq!(mask.len(), nx * ny * nz);
    Ok(FaceMask {
        dims: [nx, ny, nz],
        mask,
        depth_mm: opts.depth_mm,
    })
}

/// Zeroes every masked voxel and copies the rest bit for bit.
pub fn remove_face(volume: &Volume, mask: &FaceMask) -> Result<Volume, AnonymizeError> {
    mask.check(volume)?;
    let data = volume
        .data()
        .iter()
        .zip(&mask.mask)
        .map(|(&v, &m)| if m { 0.0 } else { v })
        .collect();
    Ok(Volume::new(volume.header.clone(), data).expect("zeroing keeps the volume valid"))
}

/// Normalized Gaussian taps on `-radius..=radius`, radius = ceil(3·sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// 1D correlation with `kernel` along `axis` of a row-major 3D array.
fn convolve_axis(src: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let strides = [dims[1] * dims[2], dims[2], 1];
    let len = dims[axis];
    let stride = strides[axis];
    let radius = (kernel.len() / 2) as isize;
    let mut dst = vec![0.0; src.len()];
    dst.par_iter_mut().enumerate().for_each(|(i, out)| {
        let pos = ((i / stride) % len) as isize;
        let base = i - pos as usize * stride;
        let mut acc = 0.0;
        for (k, &w) in kernel.iter().enumerate() {
            let j = reflect_index(pos + k as isize - radius, len);
            acc += w * src[base + j * stride];
        }
        *out = acc;
    });
    dst
}

/// Separable Gaussian blur of the whole volume with reflect boundaries.
pub fn gaussian_blur(volume: &Volume, sigma_vox: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma_vox);
    let dims = volume.dims();
    let mut buf = volume.data().to_vec();
    for axis in 0..3 {
        buf = convolve_axis(&buf, dims, axis, &kernel);
    }
    buf
}

/// Blurred voxels inside the mask, original voxels outside.
pub fn blur_face(volume: &Volume, mask: &FaceMask, sigma_vox: f64) -> Result<Volume, AnonymizeError> {
    if !(sigma_vox > 0.0 && sigma_vox.is_finite()) {
        return Err(AnonymizeError::BadParameter("sigma_vox must be > 0"));
    }
    mask.check(volume)?;
    let blurred = gaussian_blur(volume, sigma_vox);
    let data = volume
        .data()
        .iter()
        .zip(&blurred)
        .zip(&mask.mask)
        .map(|((&v, &b), &m)| if m { b } else { v })
        .collect();
    Ok(Volume::new(volume.header.clone(), data).expect("blur of finite data is finite"))
}
