use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use refacer::cyclegan::{self, CycleGanModel, DiscriminatorConfig, GeneratorConfig, TrainConfig};
use refacer::dataset::{self, CohortEntry};
use refacer::experiment::{self, AnonMode, AnonymizeSettings};
use refacer::metrics::{self, EvalOptions, PairKind};
use refacer::nifti;
use refacer::pgm;
use refacer::phantom::{self, RenderOptions};
use refacer::slicing::{self, DomainTag, SliceImage, SliceSpec};

use crate::config::Config;
use crate::manifest::RunManifest;
use crate::CliError;

pub const COHORT_FILE: &str = "cohort.csv";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [x, y, z] => {
            let p = |v: &str| v.parse::<usize>().map_err(|e| format!("bad dimension {v:?}: {e}"));
            Ok([p(x)?, p(y)?, p(z)?])
        }
        _ => Err(format!("expected X,Y,Z, got {s:?}")),
    }
}

/// Half-open subject id range `a..b`.
fn parse_range(s: &str) -> Result<(u32, u32), String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected START..END, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("bad subject id {v:?}: {e}"));
    let (a, b) = (p(a)?, p(b)?);
    if a >= b {
        return Err(format!("empty subject range {s:?}"));
    }
    Ok((a, b))
}

fn parse_mode(s: &str) -> Result<AnonMode, String> {
    match s {
        "blur" | "blurred" => Ok(AnonMode::Blur),
        "remove" | "removed" => Ok(AnonMode::Remove),
        _ => Err(format!("unknown anonymization mode {s:?} (expected blur or remove)")),
    }
}

fn parse_domain(s: &str) -> Result<DomainTag, String> {
    if let Ok(m) = parse_mode(s) {
        return Ok(m.domain());
    }
    DomainTag::parse(s).ok_or_else(|| format!("unknown domain {s:?}"))
}

fn subject_file(id: u32) -> String {
    format!("sub-{id:04}.nii")
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn read_cohort(dir: &Path) -> Result<Vec<CohortEntry>, CliError> {
    let path = dir.join(COHORT_FILE);
    if !path.is_file() {
        return Err(CliError::MissingInput(format!("{} not found", path.display())));
    }
    Ok(dataset::read_cohort_manifest(&path)?)
}

fn require_dataset(dir: &Path, name: &str) -> Result<(), CliError> {
    let p = dataset::payload_path(dir, name);
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingInput(format!("{} not found", p.display())))
    }
}

fn read_dataset(dir: &Path, domain: DomainTag) -> Result<Vec<SliceImage>, CliError> {
    require_dataset(dir, domain.as_str())?;
    Ok(dataset::read_slice_dataset(dir, domain.as_str(), domain)?)
}

/// The single anonymized dataset in `dir` when `domain` is not given.
fn anonymized_domain(dir: &Path, domain: Option<DomainTag>) -> Result<DomainTag, CliError> {
    if let Some(d) = domain {
        return Ok(d);
    }
    let found: Vec<DomainTag> = [DomainTag::Blurred, DomainTag::Removed]
        .into_iter()
        .filter(|d| dataset::payload_path(dir, d.as_str()).is_file())
        .collect();
    match found.as_slice() {
        [d] => Ok(*d),
        [] => Err(CliError::MissingInput(format!(
            "no blurred or removed slice dataset in {}",
            dir.display()
        ))),
        _ => Err(CliError::InvalidArgument(format!(
            "{} holds both blurred and removed datasets; pass --domain",
            dir.display()
        ))),
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PhantomGenArgs {
    #[arg(long)]
    pub subjects: u32,
    #[arg(long, value_parser = parse_dims, default_value = "64,64,64")]
    pub dims: [usize; 3],
    #[arg(long, env = "REFACER_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Blank everything anterior to this fraction of the A-P axis.
    #[arg(long)]
    pub anterior_cut: Option<f64>,
}

pub fn phantom_gen(a: &PhantomGenArgs) -> Result<(), CliError> {
    let start = Instant::now();
    if a.subjects == 0 {
        return Err(CliError::InvalidArgument("--subjects must be >= 1".into()));
    }
    if let Some(c) = a.anterior_cut {
        if !(0.0..1.0).contains(&c) {
            return Err(CliError::InvalidArgument(format!("--anterior-cut {c} outside [0, 1)")));
        }
    }
    create_dir(&a.out)?;
    let opts = RenderOptions {
        anterior_cut: a.anterior_cut,
    };
    let entries: Vec<CohortEntry> = (0..a.subjects)
        .into_par_iter()
        .map(|i| {
            let s = phantom::generate_subject(i, a.dims, a.seed, &opts)?;
            let file = subject_file(i);
            nifti::write_nifti(&s.volume, a.out.join(&file))?;
            Ok(CohortEntry {
                subject_id: i,
                params: s.params,
                file,
            })
        })
        .collect::<Result<_, CliError>>()?;
    dataset::write_cohort_manifest(&entries, &a.out.join(COHORT_FILE))?;
    RunManifest::new("phantom-gen", a, vec![a.seed]).finish(&[], &[&a.out], &a.out, start.elapsed())?;
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnonymizeArgs {
    #[arg(long, value_parser = parse_mode)]
    #[serde(serialize_with = "ser_mode")]
    pub mode: AnonMode,
    /// Blur kernel standard deviation in voxels.
    #[arg(long, default_value_t = refacer::anonymize::DEFAULT_SIGMA_VOX)]
    pub sigma: f64,
    /// Blur depth below the skin in millimetres. Ignored for removal.
    #[arg(long, default_value_t = refacer::anonymize::DEFAULT_BLUR_DEPTH_MM)]
    pub depth: f64,
    /// Skin threshold as a fraction of each volume's 99.5th percentile.
    #[arg(long, default_value_t = refacer::anonymize::DEFAULT_THRESHOLD_FRACTION)]
    pub threshold_fraction: f64,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn ser_mode<S: serde::Serializer>(m: &AnonMode, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(m.as_str())
}

impl AnonymizeArgs {
    fn settings(&self) -> AnonymizeSettings {
        AnonymizeSettings {
            sigma_vox: self.sigma,
            blur_depth_mm: self.depth,
            threshold_fraction: self.threshold_fraction,
            ..AnonymizeSettings::new(self.mode)
        }
    }
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

pub fn anonymize(a: &AnonymizeArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let cohort = read_cohort(&a.input)?;
    create_dir(&a.out)?;
    if same_dir(&a.input, &a.out) {
        return Err(CliError::InvalidArgument("--in and --out must differ".into()));
    }
    let settings = a.settings();
    cohort.par_iter().try_for_each(|e| -> Result<(), CliError> {
        let v = nifti::read_nifti(a.input.join(&e.file))?;
        let anon = experiment::anonymize_volume(&v, &settings)?;
        nifti::write_nifti(&anon, a.out.join(&e.file))?;
        Ok(())
    })?;
    dataset::write_cohort_manifest(&cohort, &a.out.join(COHORT_FILE))?;
    RunManifest::new("anonymize", a, vec![]).finish(&[&a.input], &[&a.out], &a.out, start.elapsed())?;
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SliceArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Domain of the input volumes: original, blur or remove.
    #[arg(long, value_parser = parse_domain, default_value = "original")]
    #[serde(serialize_with = "ser_domain")]
    pub domain: DomainTag,
    /// Cohort of original volumes whose percentile normalizes anonymized input.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Normalize anonymized input by its own percentile instead.
    #[arg(long)]
    pub normalize_by_self: bool,
    #[arg(long, default_value_t = 21)]
    pub count: usize,
    #[arg(long, default_value_t = 0.6)]
    pub span: f64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Volume axis treated as sagittal.
    #[arg(long, default_value_t = 0)]
    pub axis: usize,
    /// Only subjects with ids in START..END.
    #[arg(long, value_parser = parse_range)]
    pub subjects: Option<(u32, u32)>,
}

fn ser_domain<S: serde::Serializer>(d: &DomainTag, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(d.as_str())
}

fn check_size(size: usize) -> Result<(), CliError> {
    if size < 32 || !size.is_multiple_of(4) {
        return Err(CliError::InvalidArgument(format!(
            "--size {size} must be a multiple of 4 and at least 32"
        )));
    }
    Ok(())
}

pub fn slice(a: &SliceArgs) -> Result<(), CliError> {
    let start = Instant::now();
    check_size(a.size)?;
    let by_self = a.domain == DomainTag::Original || a.normalize_by_self;
    if !by_self && a.reference.is_none() {
        return Err(CliError::MissingInput(
            "anonymized input needs --reference (original cohort) or --normalize-by-self".into(),
        ));
    }
    let spec = SliceSpec {
        count: a.count,
        span_fraction: a.span,
        axis: a.axis,
    };
    let mut cohort = read_cohort(&a.input)?;
    if let Some((lo, hi)) = a.subjects {
        cohort.retain(|e| (lo..hi).contains(&e.subject_id));
    }
    if cohort.is_empty() {
        return Err(CliError::InvalidArgument("no subjects selected".into()));
    }
    cohort.sort_by_key(|e| e.subject_id);
    let per_subject: Vec<Vec<SliceImage>> = cohort
        .par_iter()
        .map(|e| -> Result<Vec<SliceImage>, CliError> {
            let v = nifti::read_nifti(a.input.join(&e.file))?;
            let divisor = match (&a.reference, by_self) {
                (Some(r), false) => slicing::normalization_divisor(&nifti::read_nifti(r.join(&e.file))?)?,
                _ => slicing::normalization_divisor(&v)?,
            };
            let raw = slicing::extract_slices(&v, &spec, e.subject_id, a.domain)?;
            Ok(slicing::normalize_with(&raw, divisor)
                .iter()
                .map(|s| slicing::resample_to(s, a.size))
                .collect())
        })
        .collect::<Result<_, _>>()?;
    let images: Vec<SliceImage> = per_subject.into_iter().flatten().collect();
    create_dir(&a.out)?;
    dataset::write_slice_dataset(&images, &a.out, a.domain.as_str())?;
    let outputs = [
        dataset::payload_path(&a.out, a.domain.as_str()),
        dataset::index_path(&a.out, a.domain.as_str()),
    ];
    let mut inputs: Vec<&Path> = vec![&a.input];
    if let (Some(r), false) = (&a.reference, by_self) {
        inputs.push(r);
    }
    RunManifest::new("slice", a, vec![]).finish(
        &inputs,
        &[&outputs[0], &outputs[1]],
        &a.out,
        start.elapsed(),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Anonymized domain to learn to reverse: blur or remove.
    #[arg(long, value_parser = parse_mode)]
    #[serde(serialize_with = "ser_mode")]
    pub domain: AnonMode,
    /// Directory holding the original and anonymized slice datasets.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    /// Resample slices to this size when it differs from the dataset's.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, env = "REFACER_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10.0)]
    pub lambda_cycle: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda_identity: f64,
    #[arg(long, default_value_t = 50)]
    pub pool_size: usize,
    #[arg(long, default_value_t = 16)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 9)]
    pub res_blocks: usize,
    #[arg(long, default_value_t = 16)]
    pub disc_channels: usize,
    /// Write a checkpoint every N epochs; 0 keeps only the final one.
    #[arg(long, default_value_t = 10)]
    pub checkpoint_every: usize,
}

impl TrainArgs {
    fn configs(&self) -> (GeneratorConfig, DiscriminatorConfig, TrainConfig) {
        let gen = GeneratorConfig {
            base_channels: self.base_channels,
            n_res_blocks: self.res_blocks,
            ..GeneratorConfig::desk()
        };
        let disc = DiscriminatorConfig {
            base_channels: self.disc_channels,
            ..DiscriminatorConfig::desk()
        };
        let train = TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            lambda_cycle: self.lambda_cycle,
            lambda_identity: self.lambda_identity,
            pool_size: self.pool_size,
            seed: self.seed,
        };
        (gen, disc, train)
    }
}

fn resize_all(images: Vec<SliceImage>, size: Option<usize>) -> Vec<SliceImage> {
    match size {
        Some(s) => images.iter().map(|im| slicing::resample_to(im, s)).collect(),
        None => images,
    }
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    if let Some(s) = a.size {
        check_size(s)?;
    }
    if a.base_channels == 0 || a.disc_channels == 0 {
        return Err(CliError::InvalidArgument("channel counts must be >= 1".into()));
    }
    let domain = a.domain.domain();
    let orig = resize_all(read_dataset(&a.data, DomainTag::Original)?, a.size);
    let anon = resize_all(read_dataset(&a.data, domain)?, a.size);
    create_dir(&a.out)?;
    let (gen, disc, cfg) = a.configs();
    let mut model = CycleGanModel::build(gen, disc, a.seed)?;
    let mut save_err: Option<CliError> = None;
    let log = cyclegan::train(&mut model, &anon, &orig, &cfg, |m, ep| {
        let n = ep.epoch + 1;
        let mean = ep.mean();
        println!(
            "epoch {n}/{} lr {:.3e} d {:.4}/{:.4} g {:.4}/{:.4} cycle {:.4}",
            cfg.epochs,
            ep.lr,
            mean.d_orig,
            mean.d_anon,
            mean.g_adv,
            mean.f_adv,
            mean.cycle()
        );
        if a.checkpoint_every > 0 && n % a.checkpoint_every == 0 && n < cfg.epochs && save_err.is_none() {
            if let Err(e) = cyclegan::save_checkpoint(m, a.out.join(format!("epoch_{n:04}.ckpt"))) {
                save_err = Some(e.into());
            }
        }
    })?;
    if let Some(e) = save_err {
        return Err(e);
    }
    cyclegan::save_checkpoint(&model, a.out.join(FINAL_CHECKPOINT))?;
    fs::write(a.out.join(LOSS_LOG), log.to_csv())?;
    if !log.all_finite() {
        eprintln!("warning: non-finite losses recorded in {LOSS_LOG}");
    }
    let inputs = [
        dataset::payload_path(&a.data, DomainTag::Original.as_str()),
        dataset::payload_path(&a.data, domain.as_str()),
    ];
    RunManifest::new("train", a, vec![a.seed]).finish(
        &[&inputs[0], &inputs[1]],
        &[&a.out],
        &a.out,
        start.elapsed(),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory holding the anonymized slice dataset.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Needed only when the input holds both blurred and removed datasets.
    #[arg(long, value_parser = parse_mode)]
    #[serde(skip)]
    pub domain: Option<AnonMode>,
}

pub fn reconstruct(a: &ReconstructArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let model = cyclegan::load_checkpoint(&a.ckpt)?;
    let domain = anonymized_domain(&a.input, a.domain.map(AnonMode::domain))?;
    let anon = read_dataset(&a.input, domain)?;
    let recon = experiment::reface_all(&model, &anon)?;
    create_dir(&a.out)?;
    let name = DomainTag::Reconstructed.as_str();
    dataset::write_slice_dataset(&recon, &a.out, name)?;
    let outputs = [dataset::payload_path(&a.out, name), dataset::index_path(&a.out, name)];
    let input_payload = dataset::payload_path(&a.input, domain.as_str());
    RunManifest::new("reconstruct", a, vec![]).finish(
        &[&a.ckpt, &input_payload],
        &[&outputs[0], &outputs[1]],
        &a.out,
        start.elapsed(),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub orig: PathBuf,
    #[arg(long)]
    pub anon: PathBuf,
    #[arg(long)]
    pub recon: PathBuf,
    /// Per-slice report; means go to a sibling `.summary.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Write original / anonymized / reconstructed montages here.
    #[arg(long)]
    pub montage: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub montage_subjects: usize,
    /// Face is at the last image column rather than the first.
    #[arg(long)]
    pub anterior_at_last_column: bool,
}

fn summary_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    report.with_file_name(format!("{stem}.summary.csv"))
}

fn write_montages(
    dir: &Path,
    limit: usize,
    orig: &[SliceImage],
    anon: &[SliceImage],
    recon: &[SliceImage],
) -> Result<(), CliError> {
    create_dir(dir)?;
    let index = |v: &[SliceImage]| -> BTreeMap<(u32, u32), usize> {
        v.iter().enumerate().map(|(i, im)| (im.key(), i)).collect()
    };
    let (oi, ai, ri) = (index(orig), index(anon), index(recon));
    let mut subjects: Vec<u32> = oi.keys().map(|k| k.0).collect();
    subjects.dedup();
    for sid in subjects.into_iter().take(limit) {
        let keys: Vec<(u32, u32)> = oi.keys().filter(|k| k.0 == sid).copied().collect();
        let row = |idx: &BTreeMap<(u32, u32), usize>, src: &'_ [SliceImage]| -> Vec<SliceImage> {
            keys.iter().filter_map(|k| idx.get(k)).map(|&i| src[i].clone()).collect()
        };
        let rows = [row(&oi, orig), row(&ai, anon), row(&ri, recon)];
        let refs: Vec<Vec<&SliceImage>> = rows.iter().map(|r| r.iter().collect()).collect();
        pgm::write_montage(&refs, dir.join(format!("sub-{sid:04}.pgm")), 1.0)?;
    }
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let orig = read_dataset(&a.orig, DomainTag::Original)?;
    let anon_domain = anonymized_domain(&a.anon, None)?;
    let anon = read_dataset(&a.anon, anon_domain)?;
    let recon = read_dataset(&a.recon, DomainTag::Reconstructed)?;
    let opts = EvalOptions {
        anterior_at_last_column: a.anterior_at_last_column,
        ..EvalOptions::default()
    };
    let report = metrics::evaluate(&orig, &anon, &recon, &opts)?;
    let out_dir = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    create_dir(&out_dir)?;
    fs::write(&a.out, report.to_csv())?;
    let summary = summary_path(&a.out);
    fs::write(&summary, report.summary_csv())?;
    for kind in [PairKind::AnonVsOrig, PairKind::ReconVsOrig] {
        if let Some(m) = report.mean(kind) {
            println!(
                "{} correlation {:.4} ssim {:.4} n {}",
                kind.as_str(),
                m.correlation,
                m.ssim,
                m.count
            );
        }
    }
    let mut outputs: Vec<&Path> = vec![&a.out, &summary];
    if let Some(dir) = &a.montage {
        write_montages(dir, a.montage_subjects, &orig, &anon, &recon)?;
        outputs.push(dir);
    }
    let inputs = [
        dataset::payload_path(&a.orig, DomainTag::Original.as_str()),
        dataset::payload_path(&a.anon, anon_domain.as_str()),
        dataset::payload_path(&a.recon, DomainTag::Reconstructed.as_str()),
    ];
    RunManifest::new("evaluate", a, vec![]).finish(
        &[&inputs[0], &inputs[1], &inputs[2]],
        &outputs,
        &out_dir,
        start.elapsed(),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PipelineArgs {
    /// `key = value` file; see `PIPELINE_KEYS`.
    #[arg(long)]
    pub config: PathBuf,
    /// Working directory; overrides the `out` key.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const PIPELINE_KEYS: &[&str] = &[
    "out",
    "mode",
    "seed",
    "train_subjects",
    "test_subjects",
    "dims",
    "anterior_cut",
    "sigma",
    "depth",
    "threshold_fraction",
    "slices",
    "span",
    "size",
    "axis",
    "normalize_by_self",
    "epochs",
    "lr",
    "batch_size",
    "lambda_cycle",
    "lambda_identity",
    "pool_size",
    "base_channels",
    "res_blocks",
    "disc_channels",
    "checkpoint_every",
    "montage_subjects",
];

/// Stage arguments derived from one config file.
#[derive(Debug, Clone)]
pub struct PipelinePlan {
    pub root: PathBuf,
    pub phantom: PhantomGenArgs,
    pub anonymize: AnonymizeArgs,
    pub slices: [SliceArgs; 4],
    pub train: TrainArgs,
    pub reconstruct: ReconstructArgs,
    pub evaluate: EvaluateArgs,
}

fn config_err(cfg: &Config, key: &str, message: String) -> CliError {
    CliError::ConfigParse {
        line: cfg.line(key),
        message: format!("{key}: {message}"),
    }
}

pub fn plan_pipeline(cfg: &Config, out: Option<PathBuf>, default_seed: u64) -> Result<PipelinePlan, CliError> {
    cfg.check_keys(PIPELINE_KEYS)?;
    let mode_s: String = cfg.get_or("mode", "blur".to_string())?;
    let mode = parse_mode(&mode_s).map_err(|m| config_err(cfg, "mode", m))?;
    let dims_s: String = cfg.get_or("dims", "64,64,64".to_string())?;
    let dims = parse_dims(&dims_s).map_err(|m| config_err(cfg, "dims", m))?;
    let seed: u64 = cfg.get_or("seed", default_seed)?;
    let n_train: u32 = cfg.get_or("train_subjects", 300)?;
    let n_test: u32 = cfg.get_or("test_subjects", 50)?;
    if n_train == 0 || n_test == 0 {
        return Err(config_err(cfg, "train_subjects", "train and test subject counts must be >= 1".into()));
    }
    let root = match out {
        Some(o) => o,
        None => cfg
            .get::<PathBuf>("out")?
            .ok_or_else(|| CliError::MissingInput("no output directory: set `out` or pass --out".into()))?,
    };
    let phantoms = root.join("phantoms");
    let anonymized = root.join("anonymized");
    let train_dir = root.join("slices").join("train");
    let test_dir = root.join("slices").join("test");
    let model_dir = root.join("model");
    let recon_dir = root.join("recon");
    let eval_dir = root.join("eval");

    let phantom = PhantomGenArgs {
        subjects: n_train + n_test,
        dims,
        seed,
        out: phantoms.clone(),
        anterior_cut: cfg.get("anterior_cut")?,
    };
    let anonymize = AnonymizeArgs {
        mode,
        sigma: cfg.get_or("sigma", refacer::anonymize::DEFAULT_SIGMA_VOX)?,
        depth: cfg.get_or("depth", refacer::anonymize::DEFAULT_BLUR_DEPTH_MM)?,
        threshold_fraction: cfg.get_or("threshold_fraction", refacer::anonymize::DEFAULT_THRESHOLD_FRACTION)?,
        input: phantoms.clone(),
        out: anonymized.clone(),
    };
    let base_slice = SliceArgs {
        input: phantoms.clone(),
        out: train_dir.clone(),
        domain: DomainTag::Original,
        reference: None,
        normalize_by_self: cfg.get_or("normalize_by_self", false)?,
        count: cfg.get_or("slices", 21)?,
        span: cfg.get_or("span", 0.6)?,
        size: cfg.get_or("size", 64)?,
        axis: cfg.get_or("axis", 0)?,
        subjects: Some((0, n_train)),
    };
    let anon_slice = |out: &Path, range| SliceArgs {
        input: anonymized.clone(),
        out: out.to_path_buf(),
        domain: mode.domain(),
        reference: Some(phantoms.clone()),
        subjects: Some(range),
        ..base_slice.clone()
    };
    let test_range = (n_train, n_train + n_test);
    let slices = [
        base_slice.clone(),
        anon_slice(&train_dir, (0, n_train)),
        SliceArgs {
            out: test_dir.clone(),
            subjects: Some(test_range),
            ..base_slice.clone()
        },
        anon_slice(&test_dir, test_range),
    ];
    let train = TrainArgs {
        domain: mode,
        data: train_dir,
        epochs: cfg.get_or("epochs", 60)?,
        size: None,
        seed,
        out: model_dir.clone(),
        lr: cfg.get_or("lr", 2e-4)?,
        batch_size: cfg.get_or("batch_size", 1)?,
        lambda_cycle: cfg.get_or("lambda_cycle", 10.0)?,
        lambda_identity: cfg.get_or("lambda_identity", 0.0)?,
        pool_size: cfg.get_or("pool_size", 50)?,
        base_channels: cfg.get_or("base_channels", 16)?,
        res_blocks: cfg.get_or("res_blocks", 9)?,
        disc_channels: cfg.get_or("disc_channels", 16)?,
        checkpoint_every: cfg.get_or("checkpoint_every", 10)?,
    };
    let reconstruct = ReconstructArgs {
        ckpt: model_dir.join(FINAL_CHECKPOINT),
        input: test_dir.clone(),
        out: recon_dir.clone(),
        domain: Some(mode),
    };
    let evaluate = EvaluateArgs {
        orig: test_dir.clone(),
        anon: test_dir,
        recon: recon_dir,
        out: eval_dir.join("report.csv"),
        montage: Some(eval_dir.join("montage")),
        montage_subjects: cfg.get_or("montage_subjects", 4)?,
        anterior_at_last_column: false,
    };
    Ok(PipelinePlan {
        root,
        phantom,
        anonymize,
        slices,
        train,
        reconstruct,
        evaluate,
    })
}

fn env_seed() -> u64 {
    std::env::var("REFACER_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0)
}

pub fn pipeline(a: &PipelineArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let text = fs::read_to_string(&a.config)
        .map_err(|e| CliError::MissingInput(format!("cannot read {}: {e}", a.config.display())))?;
    let cfg = Config::parse(&text)?;
    let plan = plan_pipeline(&cfg, a.out.clone(), env_seed())?;
    create_dir(&plan.root)?;
    phantom_gen(&plan.phantom)?;
    anonymize(&plan.anonymize)?;
    for s in &plan.slices {
        slice(s)?;
    }
    train(&plan.train)?;
    reconstruct(&plan.reconstruct)?;
    evaluate(&plan.evaluate)?;
    let eval_dir = plan.root.join("eval");
    RunManifest::new("pipeline", a, vec![plan.phantom.seed]).finish(
        &[&a.config],
        &[&eval_dir.join("report.csv"), &plan.train.out.join(FINAL_CHECKPOINT)],
        &plan.root,
        start.elapsed(),
    )?;
    Ok(())
}
