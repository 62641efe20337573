//! Sagittal slice extraction and per-subject intensity normalization.

use thiserror::Error;

use crate::volume::Volume;

/// Percentile used to normalize every slice of a subject.
pub const NORMALIZATION_PERCENTILE: f64 = 99.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DomainTag {
    Original,
    Blurred,
    Removed,
    Reconstructed,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Original => "original",
            DomainTag::Blurred => "blurred",
            DomainTag::Removed => "removed",
            DomainTag::Reconstructed => "reconstructed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "original" => Some(DomainTag::Original),
            "blurred" => Some(DomainTag::Blurred),
            "removed" => Some(DomainTag::Removed),
            "reconstructed" => Some(DomainTag::Reconstructed),
            _ => None,
        }
    }
}

/// One 2D grayscale slice. Rows run superior to inferior, columns run
/// anterior to posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub subject_id: u32,
    pub slice_index: u32,
    pub domain: DomainTag,
}

impl SliceImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel count must equal width*height");
        Self {
            width,
            height,
            pixels,
            subject_id: 0,
            slice_index: 0,
            domain: DomainTag::Original,
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Same identity (subject, slice) with new pixels and domain.
    pub fn with_pixels(&self, width: usize, height: usize, pixels: Vec<f64>, domain: DomainTag) -> Self {
        assert_eq!(pixels.len(), width * height);
        Self {
            width,
            height,
            pixels,
            subject_id: self.subject_id,
            slice_index: self.slice_index,
            domain,
        }
    }

    pub fn key(&self) -> (u32, u32) {
        (self.subject_id, self.slice_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceSpec {
    pub count: usize,
    /// Fraction of the sagittal extent covered, centred on the midline.
    pub span_fraction: f64,
    pub axis: usize,
}

impl Default for SliceSpec {
    fn default() -> Self {
        Self {
            count: 21,
            span_fraction: 0.6,
            axis: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SlicingError {
    #[error("percentile of an empty sequence")]
    EmptyInput,
    #[error("percentile {0} outside [0, 100]")]
    BadPercentile(f64),
    #[error("non-finite value in percentile input")]
    NonFinite,
    #[error("{count} slices requested but the sagittal axis has only {available} positions")]
    SpecTooLarge { count: usize, available: usize },
    #[error("invalid slice spec: {0}")]
    BadSpec(&'static str),
    #[error("normalization percentile is {0}, must be positive")]
    DegenerateVolume(f64),
}

/// Linear-interpolated percentile at rank `p/100 * (n-1)` of the sorted values.
///
/// Uses two selections instead of a full sort.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, SlicingError> {
    if values.is_empty() {
        return Err(SlicingError::EmptyInput);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(SlicingError::BadPercentile(p));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SlicingError::NonFinite);
    }
    let n = values.len();
    let rank = p / 100.0 * (n - 1) as f64;
    let lo_idx = rank.floor() as usize;
    let hi_idx = (rank.ceil() as usize).min(n - 1);
    let frac = rank - lo_idx as f64;

    let mut buf = values.to_vec();
    let (_, lo, upper) = buf.select_nth_unstable_by(lo_idx, f64::total_cmp);
    let lo = *lo;
    let hi = if hi_idx == lo_idx {
        lo
    } else {
        // Everything above lo_idx is >= lo, so the next order statistic is its minimum.
        upper.iter().copied().min_by(f64::total_cmp).unwrap_or(lo)
    };
    Ok(lo + (hi - lo) * frac)
}

/// Sagittal indices for `spec` on an axis of length `n`: evenly spaced over
/// the centred span, rounded, with consecutive duplicates removed.
pub fn slice_positions(n: usize, spec: &SliceSpec) -> Result<Vec<usize>, SlicingError> {
    if spec.count == 0 {
        return Err(SlicingError::BadSpec("count must be >= 1"));
    }
    if !(spec.span_fraction > 0.0 && spec.span_fraction <= 1.0) {
        return Err(SlicingError::BadSpec("span_fraction must be in (0, 1]"));
    }
    if spec.count > n {
        return Err(SlicingError::SpecTooLarge {
            count: spec.count,
            available: n,
        });
    }
    let last = (n - 1) as f64;
    let lo = last * (1.0 - spec.span_fraction) / 2.0;
    let hi = last * (1.0 + spec.span_fraction) / 2.0;
    let mut out: Vec<usize> = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let pos = if spec.count == 1 {
            (lo + hi) / 2.0
        } else {
            lo + (hi - lo) * i as f64 / (spec.count - 1) as f64
        };
        let idx = pos.round() as usize;
        if out.last() != Some(&idx) {
            out.push(idx);
        }
    }
    Ok(out)
}

/// 2D plane of `volume` at `index` along `axis`. The two remaining axes
/// become rows and columns in their original order.
pub fn plane(volume: &Volume, axis: usize, index: usize) -> (usize, usize, Vec<f64>) {
    let [nx, ny, nz] = volume.dims();
    match axis {
        0 => {
            let start = volume.index(index, 0, 0);
            (ny, nz, volume.data()[start..start + ny * nz].to_vec())
        }
        1 => {
            let mut px = Vec::with_capacity(nx * nz);
            for x in 0..nx {
                let start = volume.index(x, index, 0);
                px.extend_from_slice(&volume.data()[start..start + nz]);
            }
            (nx, nz, px)
        }
        2 => {
            let mut px = Vec::with_capacity(nx * ny);
            for x in 0..nx {
                for y in 0..ny {
                    px.push(volume.get(x, y, index));
                }
            }
            (nx, ny, px)
        }
        _ => panic!("axis must be 0, 1 or 2"),
    }
}

pub fn extract_slices(
    volume: &Volume,
    spec: &SliceSpec,
    subject_id: u32,
    domain: DomainTag,
) -> Result<Vec<SliceImage>, SlicingError> {
    if spec.axis > 2 {
        return Err(SlicingError::BadSpec("axis must be 0, 1 or 2"));
    }
    let positions = slice_positions(volume.dims()[spec.axis], spec)?;
    Ok(positions
        .into_iter()
        .map(|idx| {
            let (height, width, pixels) = plane(volume, spec.axis, idx);
            SliceImage {
                width,
                height,
                pixels,
                subject_id,
                slice_index: idx as u32,
                domain,
            }
        })
        .collect())
}

/// The 99.5-percentile of the volume, used as the subject's divisor.
pub fn normalization_divisor(volume: &Volume) -> Result<f64, SlicingError> {
    let p = percentile(volume.data(), NORMALIZATION_PERCENTILE)?;
    if p > 0.0 {
        Ok(p)
    } else {
        Err(SlicingError::DegenerateVolume(p))
    }
}

/// Divides every pixel by the reference volume's 99.5-percentile. Pass the
/// subject's original volume for original and anonymized slices alike.
/// Values above 1 are kept.
pub fn normalize_subject(
    slices: &[SliceImage],
    reference_volume: &Volume,
) -> Result<Vec<SliceImage>, SlicingError> {
    let divisor = normalization_divisor(reference_volume)?;
    Ok(normalize_with(slices, divisor))
}

pub fn normalize_with(slices: &[SliceImage], divisor: f64) -> Vec<SliceImage> {
    slices
        .iter()
        .map(|s| SliceImage {
            pixels: s.pixels.iter().map(|v| v / divisor).collect(),
            ..s.clone()
        })
        .collect()
}

/// Resamples to `size`×`size`. Exact integer shrink factors on both axes use
/// block means; every other case uses bilinear interpolation on pixel centres.
pub fn resample_to(image: &SliceImage, size: usize) -> SliceImage {
    assert!(size >= 8, "resample target must be at least 8 pixels");
    let (w, h) = (image.width, image.height);
    if w == size && h == size {
        return image.clone();
    }
    if w % size == 0 && h % size == 0 && w >= size && h >= size {
        area_downsample(image, w / size, h / size)
    } else {
        image.with_pixels(size, size, bilinear(image, size), image.domain)
    }
}

/// Averages non-overlapping `fx`×`fy` blocks. Dimensions must divide evenly.
pub fn area_downsample(image: &SliceImage, fx: usize, fy: usize) -> SliceImage {
    assert!(fx > 0 && fy > 0 && image.width.is_multiple_of(fx) && image.height.is_multiple_of(fy));
    let (ow, oh) = (image.width / fx, image.height / fy);
    let area = (fx * fy) as f64;
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for dy in 0..fy {
                let row = (r * fy + dy) * image.width;
                for dx in 0..fx {
                    acc += image.pixels[row + c * fx + dx];
                }
            }
            out[r * ow + c] = acc / area;
        }
    }
    image.with_pixels(ow, oh, out, image.domain)
}

fn bilinear(image: &SliceImage, size: usize) -> Vec<f64> {
    let (w, h) = (image.width, image.height);
    let sx = w as f64 / size as f64;
    let sy = h as f64 / size as f64;
    let sample_axis = |pos: f64, len: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        let (y0, y1, ty) = sample_axis((r as f64 + 0.5) * sy - 0.5, h);
        for c in 0..size {
            let (x0, x1, tx) = sample_axis((c as f64 + 0.5) * sx - 0.5, w);
            let top = image.at(y0, x0) * (1.0 - tx) + image.at(y0, x1) * tx;
            let bottom = image.at(y1, x0) * (1.0 - tx) + image.at(y1, x1) * tx;
            out[r * size + c] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}
