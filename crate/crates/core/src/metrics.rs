//! Front-half Pearson correlation and SSIM between original, anonymized and
//! reconstructed slices.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::slicing::SliceImage;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("image sizes differ: {a:?} vs {b:?}")]
    DimMismatch { a: [usize; 2], b: [usize; 2] },
    #[error("both images are constant; correlation is undefined")]
    ZeroVariance,
    #[error("image {size:?} is smaller than the {window}x{window} SSIM window")]
    TooSmall { size: [usize; 2], window: usize },
    #[error("invalid SSIM parameters: {0}")]
    BadParams(&'static str),
    #[error("no {missing} slice for subject {subject_id}, slice {slice_index}")]
    IncompleteTriple {
        subject_id: u32,
        slice_index: u32,
        missing: &'static str,
    },
}

fn same_dims(a: &SliceImage, b: &SliceImage) -> Result<(), MetricsError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricsError::DimMismatch {
            a: [a.height, a.width],
            b: [b.height, b.width],
        });
    }
    Ok(())
}

/// Columns `[0, W/2)` when the face is at column 0, otherwise the last
/// `W/2` columns.
pub fn front_half(image: &SliceImage, anterior_at_column_zero: bool) -> SliceImage {
    let half = image.width / 2;
    let start = if anterior_at_column_zero { 0 } else { image.width - half };
    let pixels = image
        .pixels
        .chunks(image.width)
        .flat_map(|row| row[start..start + half].iter().copied())
        .collect();
    image.with_pixels(half, image.height, pixels, image.domain)
}

/// Pearson correlation over all pixels, accumulated in one pass with
/// running means and co-moments. Returns 0 when exactly one image is
/// constant.
pub fn pearson(a: &SliceImage, b: &SliceImage) -> Result<f64, MetricsError> {
    same_dims(a, b)?;
    let (mut ma, mut mb, mut caa, mut cbb, mut cab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, (&x, &y)) in a.pixels.iter().zip(&b.pixels).enumerate() {
        let n = (i + 1) as f64;
        let dx = x - ma;
        let dy = y - mb;
        ma += dx / n;
        mb += dy / n;
        caa += dx * (x - ma);
        cbb += dy * (y - mb);
        cab += dx * (y - mb);
    }
    match (caa > 0.0, cbb > 0.0) {
        (false, false) => Err(MetricsError::ZeroVariance),
        (true, true) => Ok((cab / (caa * cbb).sqrt()).clamp(-1.0, 1.0)),
        _ => Ok(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    fn validate(&self) -> Result<(), MetricsError> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(MetricsError::BadParams("window must be odd"));
        }
        if !(self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.data_range > 0.0) {
            return Err(MetricsError::BadParams("sigma, k1, k2 and data_range must be > 0"));
        }
        Ok(())
    }

    fn taps(&self) -> Vec<f64> {
        let c = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-0.5 * ((i as f64 - c) / self.sigma).powi(2)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Separable filtering over valid positions only.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (wo, ho) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().enumerate().map(|(j, t)| t * src[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(j, t)| t * rows[(y + j) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every window position fully inside the image.
pub fn ssim(a: &SliceImage, b: &SliceImage, params: &SsimParams) -> Result<f64, MetricsError> {
    same_dims(a, b)?;
    params.validate()?;
    let (w, h) = (a.width, a.height);
    if w < params.window || h < params.window {
        return Err(MetricsError::TooSmall {
            size: [h, w],
            window: params.window,
        });
    }
    let taps = params.taps();
    let products = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.pixels.iter().zip(&b.pixels).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(&a.pixels, w, h, &taps);
    let mu_b = filter_valid(&b.pixels, w, h, &taps);
    let e_aa = filter_valid(&products(|x, _| x * x), w, h, &taps);
    let e_bb = filter_valid(&products(|_, y| y * y), w, h, &taps);
    let e_ab = filter_valid(&products(|x, y| x * y), w, h, &taps);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let n = mu_a.len() as f64;
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PairKind {
    AnonVsOrig,
    ReconVsOrig,
}

impl PairKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::AnonVsOrig => "anon_vs_orig",
            PairKind::ReconVsOrig => "recon_vs_orig",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub subject_id: u32,
    pub slice_index: u32,
    pub pair_kind: PairKind,
    pub correlation: f64,
    pub ssim: f64,
    /// Width of the front-half crop the metrics were computed on.
    pub crop_width: usize,
    pub group: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanMetrics {
    pub correlation: f64,
    pub ssim: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub means: BTreeMap<PairKind, MeanMetrics>,
    pub group_means: BTreeMap<(String, PairKind), MeanMetrics>,
}

impl MetricsReport {
    pub fn mean(&self, kind: PairKind) -> Option<MeanMetrics> {
        self.means.get(&kind).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("subject_id,slice_index,pair_kind,correlation,ssim,crop_width,group\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.12},{:.12},{},{}",
                r.subject_id,
                r.slice_index,
                r.pair_kind.as_str(),
                r.correlation,
                r.ssim,
                r.crop_width,
                r.group.as_deref().unwrap_or("")
            );
        }
        s
    }

    /// Aggregate rows, one per pair kind and then per group and pair kind.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("group,pair_kind,count,mean_correlation,mean_ssim\n");
        for (k, m) in &self.means {
            let _ = writeln!(s, "all,{},{},{:.12},{:.12}", k.as_str(), m.count, m.correlation, m.ssim);
        }
        for ((g, k), m) in &self.group_means {
            let _ = writeln!(s, "{g},{},{},{:.12},{:.12}", k.as_str(), m.count, m.correlation, m.ssim);
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub ssim: SsimParams,
    /// Face side is at the last column instead of column 0.
    pub anterior_at_last_column: bool,
    /// Optional group label per subject for separate means.
    pub groups: HashMap<u32, String>,
}

fn means<'a>(rows: impl Iterator<Item = &'a MetricsRow>) -> MeanMetrics {
    let (mut c, mut s, mut n) = (0.0, 0.0, 0usize);
    for r in rows {
        c += r.correlation;
        s += r.ssim;
        n += 1;
    }
    MeanMetrics {
        correlation: c / n.max(1) as f64,
        ssim: s / n.max(1) as f64,
        count: n,
    }
}

/// Scores every original slice against its anonymized and reconstructed
/// counterparts, matched by `(subject_id, slice_index)`.
pub fn evaluate(
    orig: &[SliceImage],
    anon: &[SliceImage],
    recon: &[SliceImage],
    opts: &EvalOptions,
) -> Result<MetricsReport, MetricsError> {
    let index = |images: &[SliceImage]| -> HashMap<(u32, u32), usize> {
        images.iter().enumerate().map(|(i, im)| (im.key(), i)).collect()
    };
    let anon_idx = index(anon);
    let recon_idx = index(recon);
    let orig_keys: HashSet<(u32, u32)> = orig.iter().map(SliceImage::key).collect();
    if let Some(im) = anon.iter().chain(recon).find(|im| !orig_keys.contains(&im.key())) {
        return Err(MetricsError::IncompleteTriple {
            subject_id: im.subject_id,
            slice_index: im.slice_index,
            missing: "original",
        });
    }
    let anterior_first = !opts.anterior_at_last_column;
    let rows: Vec<Vec<MetricsRow>> = orig
        .par_iter()
        .map(|o| {
            let (sid, idx) = o.key();
            let missing = |what| MetricsError::IncompleteTriple {
                subject_id: sid,
                slice_index: idx,
                missing: what,
            };
            let a = &anon[*anon_idx.get(&o.key()).ok_or_else(|| missing("anonymized"))?];
            let r = &recon[*recon_idx.get(&o.key()).ok_or_else(|| missing("reconstructed"))?];
            let of = front_half(o, anterior_first);
            let group = opts.groups.get(&sid).cloned();
            [(PairKind::AnonVsOrig, a), (PairKind::ReconVsOrig, r)]
                .into_iter()
                .map(|(kind, other)| {
                    let crop = front_half(other, anterior_first);
                    Ok(MetricsRow {
                        subject_id: sid,
                        slice_index: idx,
                        pair_kind: kind,
                        correlation: pearson(&crop, &of)?,
                        ssim: ssim(&crop, &of, &opts.ssim)?,
                        crop_width: of.width,
                        group: group.clone(),
                    })
                })
                .collect()
        })
        .collect::<Result<_, MetricsError>>()?;
    let rows: Vec<MetricsRow> = rows.into_iter().flatten().collect();
    let mut report = MetricsReport {
        means: BTreeMap::new(),
        group_means: BTreeMap::new(),
        rows: Vec::new(),
    };
    for kind in [PairKind::AnonVsOrig, PairKind::ReconVsOrig] {
        report.means.insert(kind, means(rows.iter().filter(|r| r.pair_kind == kind)));
        let groups: BTreeSet<&String> = rows.iter().filter_map(|r| r.group.as_ref()).collect();
        for g in groups {
            let m = means(rows.iter().filter(|r| r.pair_kind == kind && r.group.as_ref() == Some(g)));
            report.group_means.insert((g.clone(), kind), m);
        }
    }
    report.rows = rows;
    Ok(report)
}
