//! End-to-end refacing experiment: phantoms → anonymization → slices →
//! CycleGAN training → refacing of held-out subjects → metrics.

use rayon::prelude::*;
use thiserror::Error;

use crate::anonymize::{self, AnonymizeError, MaskOptions};
use crate::cyclegan::{self, CycleGanError, CycleGanModel, DiscriminatorConfig, EpochLog, GeneratorConfig, TrainConfig, TrainLog};
use crate::metrics::{self, EvalOptions, MetricsError, MetricsReport};
use crate::phantom::{self, PhantomError, RenderOptions};
use crate::slicing::{self, DomainTag, SliceImage, SliceSpec, SlicingError};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnonMode {
    Blur,
    Remove,
}

impl AnonMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AnonMode::Blur => "blur",
            AnonMode::Remove => "remove",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blur" => Some(AnonMode::Blur),
            "remove" => Some(AnonMode::Remove),
            _ => None,
        }
    }

    pub fn domain(self) -> DomainTag {
        match self {
            AnonMode::Blur => DomainTag::Blurred,
            AnonMode::Remove => DomainTag::Removed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnonymizeSettings {
    pub mode: AnonMode,
    pub sigma_vox: f64,
    pub blur_depth_mm: f64,
    /// Skin threshold as a fraction of the volume's 99.5th percentile.
    pub threshold_fraction: f64,
    pub posterior_limit: f64,
}

impl AnonymizeSettings {
    pub fn new(mode: AnonMode) -> Self {
        Self {
            mode,
            sigma_vox: anonymize::DEFAULT_SIGMA_VOX,
            blur_depth_mm: anonymize::DEFAULT_BLUR_DEPTH_MM,
            threshold_fraction: anonymize::DEFAULT_THRESHOLD_FRACTION,
            posterior_limit: anonymize::DEFAULT_POSTERIOR_LIMIT,
        }
    }
}

pub fn anonymize_volume(volume: &Volume, s: &AnonymizeSettings) -> Result<Volume, ExperimentError> {
    let p = slicing::percentile(volume.data(), slicing::NORMALIZATION_PERCENTILE)?;
    let threshold = s.threshold_fraction * p;
    let depth_mm = match s.mode {
        AnonMode::Blur => s.blur_depth_mm,
        AnonMode::Remove => f64::INFINITY,
    };
    let mask = anonymize::compute_face_mask_with(
        volume,
        &MaskOptions {
            depth_mm,
            threshold,
            posterior_limit: s.posterior_limit,
        },
    )?;
    Ok(match s.mode {
        AnonMode::Blur => anonymize::blur_face(volume, &mask, s.sigma_vox)?,
        AnonMode::Remove => anonymize::remove_face(volume, &mask)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_train: u32,
    pub n_test: u32,
    pub dims: [usize; 3],
    pub slices: SliceSpec,
    pub image_size: usize,
    pub anonymize: AnonymizeSettings,
    /// Divide anonymized slices by their own volume's percentile instead of
    /// the original volume's.
    pub normalize_by_anonymized: bool,
    pub render: RenderOptions,
    pub master_seed: u64,
    pub gen: GeneratorConfig,
    pub disc: DiscriminatorConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// 300 training and 50 test phantoms at 64³, 21 slices each, 60 epochs.
    pub fn desk(mode: AnonMode, seed: u64) -> Self {
        Self {
            n_train: 300,
            n_test: 50,
            dims: [64, 64, 64],
            slices: SliceSpec::default(),
            image_size: 64,
            anonymize: AnonymizeSettings::new(mode),
            normalize_by_anonymized: false,
            render: RenderOptions::default(),
            master_seed: seed,
            gen: GeneratorConfig::desk(),
            disc: DiscriminatorConfig::desk(),
            train: TrainConfig { seed, ..TrainConfig::desk() },
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Anonymize(#[from] AnonymizeError),
    #[error(transparent)]
    Slicing(#[from] SlicingError),
    #[error(transparent)]
    CycleGan(#[from] CycleGanError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Normalized, resized slices of one subject in both domains.
#[derive(Debug, Clone)]
pub struct SubjectSlices {
    pub original: Vec<SliceImage>,
    pub anonymized: Vec<SliceImage>,
}

/// Turns a subject's original and anonymized volumes into training images.
pub fn slice_pair(
    subject_id: u32,
    original: &Volume,
    anonymized: &Volume,
    cfg: &ExperimentConfig,
) -> Result<SubjectSlices, ExperimentError> {
    let orig_div = slicing::normalization_divisor(original)?;
    let anon_div = if cfg.normalize_by_anonymized {
        slicing::normalization_divisor(anonymized)?
    } else {
        orig_div
    };
    let prep = |v: &Volume, domain, div| -> Result<Vec<SliceImage>, ExperimentError> {
        let raw = slicing::extract_slices(v, &cfg.slices, subject_id, domain)?;
        Ok(slicing::normalize_with(&raw, div)
            .iter()
            .map(|s| slicing::resample_to(s, cfg.image_size))
            .collect())
    };
    Ok(SubjectSlices {
        original: prep(original, DomainTag::Original, orig_div)?,
        anonymized: prep(anonymized, cfg.anonymize.mode.domain(), anon_div)?,
    })
}

pub fn prepare_subject(subject_id: u32, cfg: &ExperimentConfig) -> Result<SubjectSlices, ExperimentError> {
    let s = phantom::generate_subject(subject_id, cfg.dims, cfg.master_seed, &cfg.render)?;
    let anon = anonymize_volume(&s.volume, &cfg.anonymize)?;
    slice_pair(subject_id, &s.volume, &anon, cfg)
}

/// Subjects `ids`, rendered in parallel, concatenated in id order.
pub fn prepare_subjects(ids: std::ops::Range<u32>, cfg: &ExperimentConfig) -> Result<SubjectSlices, ExperimentError> {
    let parts: Vec<SubjectSlices> = ids
        .into_par_iter()
        .map(|i| prepare_subject(i, cfg))
        .collect::<Result<_, _>>()?;
    let mut out = SubjectSlices {
        original: Vec::new(),
        anonymized: Vec::new(),
    };
    for p in parts {
        out.original.extend(p.original);
        out.anonymized.extend(p.anonymized);
    }
    Ok(out)
}

pub fn reface_all(model: &CycleGanModel, images: &[SliceImage]) -> Result<Vec<SliceImage>, ExperimentError> {
    Ok(images
        .par_iter()
        .map(|im| cyclegan::reface(model, im))
        .collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub model: CycleGanModel,
    pub log: TrainLog,
    pub report: MetricsReport,
    pub test: SubjectSlices,
    pub reconstructed: Vec<SliceImage>,
}

/// Training subjects are `0..n_train`, test subjects the next `n_test`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    on_epoch: impl FnMut(&CycleGanModel, &EpochLog),
) -> Result<ExperimentResult, ExperimentError> {
    let train_set = prepare_subjects(0..cfg.n_train, cfg)?;
    let test = prepare_subjects(cfg.n_train..cfg.n_train + cfg.n_test, cfg)?;
    let mut model = CycleGanModel::build(cfg.gen, cfg.disc, cfg.train.seed)?;
    let log = cyclegan::train(&mut model, &train_set.anonymized, &train_set.original, &cfg.train, on_epoch)?;
    let reconstructed = reface_all(&model, &test.anonymized)?;
    let report = metrics::evaluate(&test.original, &test.anonymized, &reconstructed, &EvalOptions::default())?;
    Ok(ExperimentResult {
        model,
        log,
        report,
        test,
        reconstructed,
    })
}
