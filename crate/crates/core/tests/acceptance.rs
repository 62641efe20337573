//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion that ran failed.
//!
//! Criteria 1-5 and 11 always run. The refacing criteria 6-10 train six
//! desk-scale models twice each and take most of a day on a desktop CPU, so
//! they run only with `REFACER_ACCEPTANCE_FULL=1`. Setting
//! `REFACER_ACCEPTANCE_SCALE=reduced` runs the same checks on a small cohort
//! at 32×32; those lines are tagged and do not satisfy the criteria.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use refacer::anonymize::{self, MaskOptions};
use refacer::autodiff::{PadMode, Tape, Tensor, Var};
use refacer::cyclegan::{self, DiscriminatorConfig, GeneratorConfig, TrainConfig};
use refacer::experiment::{self, AnonMode, ExperimentConfig, ExperimentResult};
use refacer::metrics::{self, PairKind, SsimParams};
use refacer::nifti::{self, NiftiError};
use refacer::phantom;
use refacer::rng;
use refacer::slicing::{self, SliceImage};

use common::*;

type Outcome = Result<String, String>;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, title: &str, outcome: Outcome) {
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} {title}: {detail}"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL criterion {id:>2} {title}: {detail}");
            }
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn random_shape(r: &mut rng::Stream) -> [usize; 4] {
    [r.random_range(1..3), r.random_range(1..4), r.random_range(3..7), r.random_range(3..7)]
}

type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

fn unary(f: fn(&mut Tape<f64>, Var) -> Var) -> Op {
    Box::new(move |t, v| f(t, v[0]))
}

fn binary(f: fn(&mut Tape<f64>, Var, Var) -> Var) -> Op {
    Box::new(move |t, v| f(t, v[0], v[1]))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let elementwise: Vec<(&str, usize, Op)> = vec![
        ("relu", 1, unary(|t, x| t.relu(x))),
        ("leaky_relu", 1, unary(|t, x| t.leaky_relu(x, 0.2))),
        ("tanh", 1, unary(|t, x| t.tanh(x))),
        ("scale", 1, unary(|t, x| t.scale(x, -1.3))),
        ("add_scalar", 1, unary(|t, x| t.add_scalar(x, 0.4))),
        ("square", 1, unary(|t, x| t.square(x))),
        ("abs", 1, unary(|t, x| t.abs(x))),
        ("add", 2, binary(|t, a, b| t.add(a, b).unwrap())),
        ("sub", 2, binary(|t, a, b| t.sub(a, b).unwrap())),
        ("mul", 2, binary(|t, a, b| t.mul(a, b).unwrap())),
        ("sum", 1, unary(|t, x| {
            let s = t.square(x);
            t.sum(s)
        })),
        ("mean", 1, unary(|t, x| {
            let s = t.square(x);
            t.mean(s)
        })),
    ];
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let mut check = |name: &str, seed: u64, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var| {
        let err = gradient_check(&inputs, FD_STEP, |tape, v| {
            let y = f(tape, v);
            weighted_sum(tape, y, seed)
        });
        worst = worst.max(err);
        checks += 1;
        ensure(err < FD_TOL, || format!("{name} seed {seed}: relative error {err:.2e}"))
    };

    for (name, arity, op) in &elementwise {
        for seed in 0..5 {
            let mut r = rng::stream(seed, 101);
            let shape = random_shape(&mut r);
            let inputs = (0..*arity).map(|_| random_tensor_off_zero(shape, &mut r)).collect();
            check(name, seed, inputs, op.as_ref())?;
        }
    }
    for seed in 0..5 {
        let mut r = rng::stream(seed, 102);
        let [n, ci, _, _] = random_shape(&mut r);
        let (h, w) = (r.random_range(5..8), r.random_range(5..8));
        let co = r.random_range(1..4);
        let k = [3, 4][r.random_range(0..2)];
        let stride = r.random_range(1..3);
        for mode in [PadMode::Zero, PadMode::Reflect] {
            let pad = r.random_range(0..k / 2 + 1);
            let inputs = vec![
                random_tensor([n, ci, h, w], &mut r),
                random_tensor([co, ci, k, k], &mut r),
                random_tensor([1, co, 1, 1], &mut r),
            ];
            check("conv2d", seed, inputs, &|t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad, mode).unwrap())?;
        }
        let pad = r.random_range(0..k / 2);
        let inputs = vec![
            random_tensor([n, ci, r.random_range(2..5), r.random_range(2..5)], &mut r),
            random_tensor([ci, co, k, k], &mut r),
            random_tensor([1, co, 1, 1], &mut r),
        ];
        check("conv_transpose2d", seed, inputs, &|t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad).unwrap())?;
        let shape = random_shape(&mut r);
        let inputs = vec![
            random_tensor(shape, &mut r),
            random_tensor([1, shape[1], 1, 1], &mut r),
            random_tensor([1, shape[1], 1, 1], &mut r),
        ];
        check("instance_norm", seed, inputs, &|t, v| t.instance_norm(v[0], v[1], v[2], 1e-5).unwrap())?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{checks} checks, worst relative error {worst:.1e}, {secs:.1} s"))
}

fn random_image(w: usize, h: usize, r: &mut rng::Stream) -> SliceImage {
    SliceImage::new(w, h, (0..w * h).map(|_| r.random_range(0.0..1.0)).collect())
}

fn oracle_equivalence() -> Outcome {
    const N: u64 = 100;
    let mut conv_worst: f64 = 0.0;
    for seed in 0..N {
        let mut r = rng::stream(seed, 201);
        let (ci, co) = (r.random_range(1..4), r.random_range(1..5));
        let (h, w) = (r.random_range(4..10), r.random_range(4..10));
        let k = r.random_range(1..4);
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..k.min(3));
        let mode = if r.random_bool(0.5) { PadMode::Zero } else { PadMode::Reflect };
        let x = random_tensor([r.random_range(1..3), ci, h, w], &mut r);
        let wt = random_tensor([co, ci, k, k], &mut r);
        let b = random_tensor([1, co, 1, 1], &mut r);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad, mode).unwrap();
        let oracle = conv2d_naive(&x, &wt, Some(&b), stride, pad, mode);
        ensure(tape.shape(y) == oracle.shape(), || format!("conv seed {seed}: shape mismatch"))?;
        for (a, o) in tape.value(y).data().iter().zip(oracle.data()) {
            conv_worst = conv_worst.max((a - o).abs());
        }
    }
    ensure(conv_worst <= 1e-10, || format!("conv2d max deviation {conv_worst:.1e}"))?;

    let mut ssim_worst: f64 = 0.0;
    let mut pearson_worst: f64 = 0.0;
    for seed in 0..N {
        let mut r = rng::stream(seed, 202);
        let (w, h) = (r.random_range(11..40), r.random_range(11..40));
        let a = random_image(w, h, &mut r);
        let b = random_image(w, h, &mut r);
        let s = metrics::ssim(&a, &b, &SsimParams::default()).map_err(|e| e.to_string())?;
        ssim_worst = ssim_worst.max((s - ssim_brute_force(&a.pixels, &b.pixels, w, h, 1.0)).abs());
        let p = metrics::pearson(&a, &b).map_err(|e| e.to_string())?;
        pearson_worst = pearson_worst.max((p - pearson_two_pass(&a.pixels, &b.pixels)).abs());
    }
    ensure(ssim_worst <= 1e-9, || format!("SSIM max deviation {ssim_worst:.1e}"))?;
    ensure(pearson_worst <= 1e-12, || format!("Pearson max deviation {pearson_worst:.1e}"))?;

    for seed in 0..N {
        let mut r = rng::stream(seed, 203);
        let n = r.random_range(1..5000);
        let values: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let p = if seed == 0 { 99.5 } else { r.random_range(0.0..=100.0) };
        let got = slicing::percentile(&values, p).map_err(|e| e.to_string())?;
        let want = percentile_full_sort(&values, p);
        ensure(got == want, || format!("percentile seed {seed}: {got} != {want}"))?;
    }
    Ok(format!(
        "{N} instances each; conv {conv_worst:.1e}, SSIM {ssim_worst:.1e}, Pearson {pearson_worst:.1e}, percentile exact"
    ))
}

fn architecture() -> Outcome {
    for (label, g, d) in [
        ("desk", GeneratorConfig::desk(), DiscriminatorConfig::desk()),
        ("full", GeneratorConfig::full(), DiscriminatorConfig::full()),
    ] {
        let m = cyclegan::build_model(g, d, 0).map_err(|e| e.to_string())?;
        let counts = [
            m.g_reface.conv_layer_count(),
            m.f_deface.conv_layer_count(),
            m.d_orig.conv_layer_count(),
            m.d_anon.conv_layer_count(),
        ];
        ensure(counts == [24, 24, 5, 5], || format!("{label}: conv layers {counts:?}"))?;
    }
    Ok("generators 24 conv layers, discriminators 5, desk and full".into())
}

fn anonymizer_invariants() -> Outcome {
    for seed in 0..20 {
        let p = phantom::sample_face_params(&mut rng::stream(seed, 0));
        let mut tex = rng::Stream::seed_from_u64(p.texture_seed);
        let v = phantom::render_phantom(&p, [48, 64, 64], &mut tex).map_err(|e| e.to_string())?;
        let t = anonymize::default_threshold(&v);
        let removal = anonymize::compute_face_mask_with(&v, &MaskOptions::removal(t)).map_err(|e| e.to_string())?;
        let blur = anonymize::compute_face_mask_with(&v, &MaskOptions::blur(t)).map_err(|e| e.to_string())?;
        ensure(removal.count() > 0 && blur.count() > 0, || format!("seed {seed}: empty mask"))?;

        let removed = anonymize::remove_face(&v, &removal).map_err(|e| e.to_string())?;
        for i in 0..v.data().len() {
            let ok = if removal.mask[i] {
                removed.data()[i] == 0.0
            } else {
                removed.data()[i].to_bits() == v.data()[i].to_bits()
            };
            ensure(ok, || format!("seed {seed}: removal wrong at voxel {i}"))?;
        }
        let twice = anonymize::remove_face(&removed, &removal).map_err(|e| e.to_string())?;
        ensure(twice == removed, || format!("seed {seed}: removal not idempotent"))?;

        let blurred = anonymize::blur_face(&v, &blur, anonymize::DEFAULT_SIGMA_VOX).map_err(|e| e.to_string())?;
        for i in 0..v.data().len() {
            ensure(blur.mask[i] || blurred.data()[i].to_bits() == v.data()[i].to_bits(), || {
                format!("seed {seed}: blur changed voxel {i} outside the mask")
            })?;
        }
        let c = 2.5;
        let scaled = v.map(|x| c * x).map_err(|e| e.to_string())?;
        let bs = anonymize::blur_face(&scaled, &blur, anonymize::DEFAULT_SIGMA_VOX).map_err(|e| e.to_string())?;
        let rs = anonymize::remove_face(&scaled, &removal).map_err(|e| e.to_string())?;
        for i in 0..v.data().len() {
            ensure((bs.data()[i] - c * blurred.data()[i]).abs() <= 1e-12 * c, || format!("seed {seed}: blur not linear"))?;
            ensure(rs.data()[i] == c * removed.data()[i], || format!("seed {seed}: removal not linear"))?;
        }
    }
    Ok("20 phantoms; removal exact and idempotent, blur identity outside mask, both commute with scaling".into())
}

fn schedule() -> Outcome {
    for epochs in [60usize, 200] {
        let cfg = TrainConfig {
            epochs,
            ..TrainConfig::desk()
        };
        let lr = cfg.lr;
        let at = |e| cyclegan::lr_schedule(e, &cfg);
        ensure(at(0) == lr, || format!("{epochs} epochs: lr at 0 is {}", at(0)))?;
        ensure((at(epochs * 3 / 4) - lr / 2.0).abs() <= 1e-15, || {
            format!("{epochs} epochs: lr at 75% is {}", at(epochs * 3 / 4))
        })?;
        ensure(at(epochs) == 0.0 && at(epochs + 1) == 0.0, || format!("{epochs} epochs: lr after end is {}", at(epochs)))?;
    }
    Ok("lr, lr/2 at 75%, 0 after the last epoch for 60 and 200 epochs".into())
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/int16_4x4x4.nii")
}

fn formats() -> Outcome {
    let bytes = std::fs::read(fixture_path()).map_err(|e| e.to_string())?;
    let v = nifti::parse_nifti(&bytes).map_err(|e| e.to_string())?;
    let once = nifti::encode_nifti(&v);
    let back = nifti::parse_nifti(&once).map_err(|e| e.to_string())?;
    ensure(back.data() == v.data(), || "NIfTI values changed in round trip".into())?;
    ensure(nifti::encode_nifti(&back) == once, || "NIfTI re-encoding differs".into())?;

    let patched = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = bytes.clone();
        f(&mut b);
        nifti::parse_nifti(&b)
    };
    ensure(matches!(patched(&|b| b[344] = b'x'), Err(NiftiError::WrongMagic(_))), || "bad magic not detected".into())?;
    ensure(
        matches!(patched(&|b| b[70..72].copy_from_slice(&1i16.to_le_bytes())), Err(NiftiError::UnsupportedDatatype(1))),
        || "bad datatype not detected".into(),
    )?;
    ensure(matches!(patched(&|b| b.truncate(b.len() - 3)), Err(NiftiError::TruncatedData { .. })), || {
        "truncated NIfTI not detected".into()
    })?;

    let model = cyclegan::build_model(
        GeneratorConfig {
            base_channels: 2,
            n_res_blocks: 1,
            ..GeneratorConfig::desk()
        },
        DiscriminatorConfig {
            base_channels: 2,
            ..DiscriminatorConfig::desk()
        },
        5,
    )
    .map_err(|e| e.to_string())?;
    let ck = cyclegan::encode_checkpoint(&model);
    let decoded = cyclegan::decode_checkpoint(&ck).map_err(|e| e.to_string())?;
    ensure(decoded == model && cyclegan::encode_checkpoint(&decoded) == ck, || "checkpoint round trip differs".into())?;
    let mut bad = ck.clone();
    bad[1] ^= 0xff;
    ensure(matches!(cyclegan::decode_checkpoint(&bad), Err(cyclegan::CheckpointError::BadMagic)), || {
        "bad checkpoint magic not detected".into()
    })?;
    ensure(
        matches!(cyclegan::decode_checkpoint(&ck[..ck.len() - 1]), Err(cyclegan::CheckpointError::TruncatedRecord)),
        || "truncated checkpoint not detected".into(),
    )?;
    Ok("NIfTI and checkpoint round trips bit-exact; corrupted files raise their errors".into())
}

/// Refacing runs for criteria 6-10.
struct Scale {
    tag: &'static str,
    cfg: fn(AnonMode, u64) -> ExperimentConfig,
}

fn desk(mode: AnonMode, seed: u64) -> ExperimentConfig {
    ExperimentConfig::desk(mode, seed)
}

fn reduced(mode: AnonMode, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(mode, seed);
    cfg.n_train = 40;
    cfg.n_test = 10;
    cfg.slices.count = 7;
    cfg.image_size = 32;
    cfg.gen.base_channels = 8;
    cfg.disc.base_channels = 8;
    cfg.train.epochs = 30;
    cfg
}

const SEEDS: [u64; 3] = [1, 2, 3];

struct Run {
    mode: AnonMode,
    seed: u64,
    result: ExperimentResult,
    secs: f64,
    rerun_identical: bool,
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool").install(f)
}

fn execute(scale: &Scale) -> Result<Vec<Run>, String> {
    let mut runs = Vec::new();
    for mode in [AnonMode::Blur, AnonMode::Remove] {
        for seed in SEEDS {
            let cfg = (scale.cfg)(mode, seed);
            let start = Instant::now();
            let result = single_threaded(|| experiment::run_experiment(&cfg, |_, _| {})).map_err(|e| e.to_string())?;
            let secs = start.elapsed().as_secs_f64();
            let again = single_threaded(|| experiment::run_experiment(&cfg, |_, _| {})).map_err(|e| e.to_string())?;
            let rerun_identical = cyclegan::encode_checkpoint(&result.model) == cyclegan::encode_checkpoint(&again.model)
                && result.report.to_csv() == again.report.to_csv();
            eprintln!("[{}] {} seed {seed}: {secs:.0} s", scale.tag, mode.as_str());
            runs.push(Run {
                mode,
                seed,
                result,
                secs,
                rerun_identical,
            });
        }
    }
    Ok(runs)
}

fn means(run: &Run) -> (f64, f64, f64, f64) {
    let a = run.result.report.mean(PairKind::AnonVsOrig).expect("anon rows");
    let r = run.result.report.mean(PairKind::ReconVsOrig).expect("recon rows");
    (a.correlation, a.ssim, r.correlation, r.ssim)
}

fn describe(runs: &[&Run]) -> String {
    runs.iter()
        .map(|r| {
            let (ac, as_, rc, rs) = means(r);
            format!("seed {} r {ac:.3}->{rc:.3} ssim {as_:.3}->{rs:.3}", r.seed)
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn refacing_criteria(report: &mut Report, scale: &Scale, runs: &[Run]) {
    let by_mode = |m| runs.iter().filter(move |r| r.mode == m).collect::<Vec<_>>();
    let blur = by_mode(AnonMode::Blur);
    let remove = by_mode(AnonMode::Remove);
    let suffix = |s: String| format!("{s} [{}]", scale.tag);

    let ok6 = blur
        .iter()
        .filter(|r| {
            let (ac, as_, rc, rs) = means(r);
            rc >= ac && rs >= as_ - 0.02
        })
        .count();
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    let outcome = if ok6 >= 2 && slowest <= 4.0 * 3600.0 { Ok } else { Err };
    report.line(
        "6",
        "blur refacing beats baseline",
        outcome(suffix(format!("{ok6}/3 seeds; {}; slowest run {slowest:.0} s", describe(&blur)))),
    );

    let ok7 = remove
        .iter()
        .filter(|r| {
            let (ac, _, rc, _) = means(r);
            rc - ac >= 0.05
        })
        .count();
    let outcome = if ok7 >= 2 { Ok } else { Err };
    report.line("7", "removal refacing gains correlation", outcome(suffix(format!("{ok7}/3 seeds; {}", describe(&remove)))));

    let mean_recon = |rs: &[&Run]| rs.iter().map(|r| means(r).2).sum::<f64>() / rs.len() as f64;
    let (b, r) = (mean_recon(&blur), mean_recon(&remove));
    let outcome = if b > r { Ok } else { Err };
    report.line("8", "blur easier than removal", outcome(suffix(format!("recon correlation blur {b:.4}, removal {r:.4}"))));

    let mut health = Vec::new();
    let mut healthy = true;
    for run in runs {
        let log = &run.result.log;
        let first = log.epochs.first().map(|e| e.mean().cycle()).unwrap_or(f64::NAN);
        let last = log.epochs.last().map(|e| e.mean().cycle()).unwrap_or(f64::NAN);
        let ok = log.all_finite() && last < 0.5 * first;
        healthy &= ok;
        health.push(format!("{} {} {:.0}%", run.mode.as_str(), run.seed, 100.0 * last / first));
    }
    let outcome = if healthy { Ok } else { Err };
    report.line("9", "training health", outcome(suffix(format!("final/first cycle loss: {}", health.join(", ")))));

    let identical = runs.iter().filter(|r| r.rerun_identical).count();
    let outcome = if identical == runs.len() { Ok } else { Err };
    report.line(
        "10",
        "single-thread determinism",
        outcome(suffix(format!("{identical}/{} reruns identical", runs.len()))),
    );
}

fn main() -> ExitCode {
    // `cargo test -- --list` and friends pass flags meant for the standard harness.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut report = Report { failed: 0 };
    report.line("1", "gradient suite", gradient_suite());
    report.line("2", "oracle equivalence", oracle_equivalence());
    report.line("3", "architecture", architecture());
    report.line("4", "anonymizer invariants", anonymizer_invariants());
    report.line("5", "learning-rate schedule", schedule());

    let scale = match (
        std::env::var("REFACER_ACCEPTANCE_FULL").as_deref(),
        std::env::var("REFACER_ACCEPTANCE_SCALE").as_deref(),
    ) {
        (Ok("1"), _) => Some(Scale { tag: "desk", cfg: desk }),
        (_, Ok("reduced")) => Some(Scale { tag: "reduced scale, not the criterion setup", cfg: reduced }),
        _ => None,
    };
    match scale {
        Some(scale) => match execute(&scale) {
            Ok(runs) => refacing_criteria(&mut report, &scale, &runs),
            Err(e) => {
                for id in ["6", "7", "8", "9", "10"] {
                    report.line(id, "refacing run", Err(e.clone()));
                }
            }
        },
        None => {
            for id in ["6", "7", "8", "9", "10"] {
                println!("SKIP criterion {id:>2}: needs REFACER_ACCEPTANCE_FULL=1 (six desk-scale trainings, each run twice)");
            }
        }
    }
    report.line("11", "file formats", formats());

    if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
