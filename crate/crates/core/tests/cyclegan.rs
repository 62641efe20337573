use rand::Rng;
use refacer::autodiff::{Tape, Tensor};
use refacer::cyclegan::*;
use refacer::rng;
use refacer::slicing::{DomainTag, SliceImage};

fn tiny() -> (GeneratorConfig, DiscriminatorConfig) {
    (
        GeneratorConfig {
            base_channels: 2,
            n_res_blocks: 2,
            ..GeneratorConfig::desk()
        },
        DiscriminatorConfig {
            base_channels: 2,
            ..DiscriminatorConfig::desk()
        },
    )
}

fn images(n: usize, size: usize, seed: u64) -> Vec<SliceImage> {
    let mut r = rng::stream(seed, 0);
    (0..n)
        .map(|i| {
            let mut im = SliceImage::new(size, size, (0..size * size).map(|_| r.random_range(0.0..1.0)).collect());
            im.subject_id = i as u32;
            im
        })
        .collect()
}

#[test]
fn layer_counts_for_desk_and_full() {
    for (g, d) in [
        (GeneratorConfig::desk(), DiscriminatorConfig::desk()),
        (GeneratorConfig::full(), DiscriminatorConfig::full()),
    ] {
        let m = build_model(g, d, 1).unwrap();
        assert_eq!(m.g_reface.conv_layer_count(), 24);
        assert_eq!(m.f_deface.conv_layer_count(), 24);
        assert_eq!(m.d_orig.conv_layer_count(), 5);
        assert_eq!(m.d_anon.conv_layer_count(), 5);
    }
}

#[test]
fn build_is_deterministic_and_names_unique() {
    let (g, d) = tiny();
    let a = build_model(g, d, 7).unwrap();
    let b = build_model(g, d, 7).unwrap();
    let c = build_model(g, d, 8).unwrap();
    for (x, y) in a.networks().iter().zip(b.networks()) {
        assert_eq!(x.checksum(), y.checksum());
    }
    assert_ne!(a.g_reface.checksum(), c.g_reface.checksum());
    let mut names = a.parameter_names();
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
}

#[test]
fn init_statistics() {
    let m = build_model(GeneratorConfig::desk(), DiscriminatorConfig::desk(), 3).unwrap();
    let weights: Vec<f32> = m
        .g_reface
        .params
        .iter()
        .filter(|p| p.name.ends_with("weight"))
        .flat_map(|p| p.tensor.data().to_vec())
        .collect();
    let n = weights.len() as f64;
    let mean = weights.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let std = (weights.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-3);
    assert!((std - 0.02).abs() < 1e-3, "std {std}");
    assert!(m
        .g_reface
        .params
        .iter()
        .filter(|p| p.name.ends_with("bias") || p.name.ends_with("offset"))
        .all(|p| p.tensor.data().iter().all(|&v| v == 0.0)));
}

fn scalar_loss(f: impl FnOnce(&mut Tape<f64>) -> refacer::autodiff::Var) -> f64 {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).item()
}

#[test]
fn lsgan_cases() {
    let full = |v| Tensor::full([1, 1, 3, 3], v);
    let d = |r: f64, f: f64| {
        scalar_loss(|t| {
            let (a, b) = (t.constant(full(r)), t.constant(full(f)));
            lsgan_loss_d(t, a, b).unwrap()
        })
    };
    assert_eq!(d(1.0, 0.0), 0.0);
    assert_eq!(d(0.0, 1.0), 1.0);
    let g = scalar_loss(|t| {
        let a = t.constant(full(1.0));
        lsgan_loss_g(t, a)
    });
    assert_eq!(g, 0.0);
}

#[test]
fn cycle_loss_cases() {
    let mut r = rng::stream(4, 0);
    let x: Vec<f64> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
    let y: Vec<f64> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
    let t = |d: &[f64]| Tensor::new([1, 1, 8, 8], d.to_vec()).unwrap();
    let same = scalar_loss(|tp| {
        let (a, b) = (tp.constant(t(&x)), tp.constant(t(&x)));
        cycle_loss(tp, a, b, 10.0).unwrap()
    });
    assert_eq!(same, 0.0);
    let shifted: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
    let off = scalar_loss(|tp| {
        let (a, b) = (tp.constant(t(&x)), tp.constant(t(&shifted)));
        cycle_loss(tp, a, b, 10.0).unwrap()
    });
    assert!((off - 1.0).abs() < 1e-12);
    let direct = 3.0 * x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / 64.0;
    let got = scalar_loss(|tp| {
        let (a, b) = (tp.constant(t(&x)), tp.constant(t(&y)));
        cycle_loss(tp, a, b, 3.0).unwrap()
    });
    assert!((got - direct).abs() < 1e-12);
}

#[test]
fn schedule_boundaries() {
    for epochs in [60usize, 200] {
        let cfg = TrainConfig {
            epochs,
            ..TrainConfig::desk()
        };
        assert_eq!(lr_schedule(0, &cfg), 2e-4);
        assert_eq!(lr_schedule(epochs / 2, &cfg), 2e-4);
        assert!((lr_schedule(epochs * 3 / 4, &cfg) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(epochs, &cfg), 0.0);
        let mut prev = f64::INFINITY;
        for e in 0..=epochs + 3 {
            let lr = lr_schedule(e, &cfg);
            assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }
    let cfg = TrainConfig::full();
    assert!((lr_schedule(101, &cfg) - 0.99 * 2e-4).abs() < 1e-15);
}

#[test]
fn odd_epochs_rejected() {
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::desk()
    };
    assert!(matches!(cfg.validate(), Err(CycleGanError::BadConfig(_))));
}

#[test]
fn pool_capacity_and_fairness() {
    let mut pool = ImagePool::new(50, rng::stream(9, 0));
    let img = |v: f32| Tensor::full([1, 1, 2, 2], v);
    for i in 0..50 {
        assert_eq!(pool.query_one(img(i as f32)).data()[0], i as f32);
    }
    let mut stored = 0usize;
    let n = 10_000;
    for i in 0..n {
        let fresh = 1000.0 + i as f32;
        if pool.query_one(img(fresh)).data()[0] != fresh {
            stored += 1;
        }
        assert!(pool.len() <= pool.capacity());
    }
    let e = n as f64 / 2.0;
    let chi2 = (stored as f64 - e).powi(2) / e * 2.0;
    assert!(chi2 < 10.83, "chi-square {chi2}");
    let mut empty = ImagePool::new(0, rng::stream(1, 0));
    assert_eq!(empty.query_one(img(3.0)).data()[0], 3.0);
    assert!(empty.is_empty());
}

#[test]
fn smoke_one_epoch() {
    let (g, d) = tiny();
    let mut m = build_model(g, d, 0).unwrap();
    let a = images(4, 32, 1);
    let b = images(4, 32, 2);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::desk()
    };
    let mut seen = 0;
    let log = train(&mut m, &a, &b, &cfg, |_, e| {
        seen += 1;
        assert_eq!(e.steps.len(), 4);
    })
    .unwrap();
    assert_eq!(seen, 2);
    assert_eq!(log.epochs[0].steps.len(), 4);
    assert!(log.all_finite());
    assert!(log.to_csv().lines().count() == 9);
}

#[test]
fn training_is_deterministic() {
    let (g, d) = tiny();
    let a = images(3, 32, 1);
    let b = images(3, 32, 2);
    let cfg = TrainConfig {
        epochs: 2,
        lambda_identity: 0.5,
        seed: 5,
        ..TrainConfig::desk()
    };
    let run = || {
        let mut m = build_model(g, d, 1).unwrap();
        let log = train(&mut m, &a, &b, &cfg, |_, _| {}).unwrap();
        (log, encode_checkpoint(&m))
    };
    let (l1, c1) = run();
    let (l2, c2) = run();
    assert_eq!(l1, l2);
    assert_eq!(c1, c2);
    assert!(l1.epochs[0].steps[0].identity > 0.0);
}

#[test]
fn training_errors() {
    let (g, d) = tiny();
    let mut m = build_model(g, d, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::desk()
    };
    assert_eq!(train(&mut m, &[], &images(1, 32, 0), &cfg, |_, _| {}).unwrap_err(), CycleGanError::EmptyDataset);
    assert!(matches!(
        train(&mut m, &images(1, 32, 0), &images(1, 36, 0), &cfg, |_, _| {}),
        Err(CycleGanError::SizeMismatch { .. })
    ));
    assert!(matches!(
        train(&mut m, &images(1, 30, 0), &images(1, 30, 0), &cfg, |_, _| {}),
        Err(CycleGanError::BadImageSize(_))
    ));
}

fn phantom_slices(domain_blur: bool) -> Vec<SliceImage> {
    use refacer::anonymize::*;
    use refacer::phantom::{generate_subject, RenderOptions};
    use refacer::slicing::*;
    let spec = SliceSpec {
        count: 2,
        ..SliceSpec::default()
    };
    let mut out = Vec::new();
    for id in 0..2 {
        let s = generate_subject(id, [32, 32, 32], 11, &RenderOptions::default()).unwrap();
        let v = if domain_blur {
            let m = compute_face_mask_with(&s.volume, &MaskOptions::blur(default_threshold(&s.volume))).unwrap();
            blur_face(&s.volume, &m, 2.0).unwrap()
        } else {
            s.volume.clone()
        };
        let slices = extract_slices(&v, &spec, id, DomainTag::Original).unwrap();
        out.extend(normalize_with(&slices, normalization_divisor(&s.volume).unwrap()));
    }
    out
}

#[test]
fn large_cycle_weight_drives_cycle_loss_down() {
    let (g, d) = tiny();
    let g = GeneratorConfig { base_channels: 4, ..g };
    let mut m = build_model(g, d, 2).unwrap();
    let a = phantom_slices(true);
    let b = phantom_slices(false);
    let cfg = TrainConfig {
        epochs: 30,
        lambda_cycle: 1000.0,
        ..TrainConfig::desk()
    };
    let log = train(&mut m, &a, &b, &cfg, |_, _| {}).unwrap();
    let first = log.epochs[0].mean().cycle();
    let last = log.epochs.last().unwrap().mean().cycle();
    assert!(last < 0.25 * first, "{first} -> {last}");
}

#[test]
fn reface_keeps_shape_and_sign() {
    let (g, d) = tiny();
    let m = build_model(g, d, 0).unwrap();
    let mut img = images(1, 32, 0).remove(0);
    img.subject_id = 12;
    img.slice_index = 40;
    img.domain = DomainTag::Blurred;
    let out = reface(&m, &img).unwrap();
    assert_eq!((out.width, out.height), (32, 32));
    assert_eq!(out.key(), (12, 40));
    assert_eq!(out.domain, DomainTag::Reconstructed);
    assert!(out.pixels.iter().all(|&v| v >= 0.0));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let (g, d) = tiny();
    let m = build_model(g, d, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rfck");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);

    let bytes = encode_checkpoint(&m);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::BadMagic)));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::VersionMismatch(9))));
    for cut in [10, 30, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(CheckpointError::TruncatedRecord)));
    }
    assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(CheckpointError::Io { .. })));
}

#[test]
fn zero_gradient_step_keeps_parameters() {
    use refacer::autodiff::{AdamConfig, AdamState};
    let (g, d) = tiny();
    let mut m = build_model(g, d, 0).unwrap();
    let before = m.clone();
    let net = &mut m.g_reface;
    let mut state = AdamState::new(AdamConfig::default(), net.params.iter().map(|p| &p.tensor));
    let zeros: Vec<Tensor<f32>> = net.params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
    let grads: Vec<Option<&Tensor<f32>>> = zeros.iter().map(Some).collect();
    let mut params: Vec<&mut Tensor<f32>> = net.params.iter_mut().map(|p| &mut p.tensor).collect();
    state.step(&mut params, &grads, 2e-4);
    assert_eq!(m, before);
}
