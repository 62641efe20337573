//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use refacer::autodiff::{PadMode, Tape, Tensor, Var};
use refacer::rng::{self, Stream};

pub fn random_tensor(shape: [usize; 4], rng: &mut Stream) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so kinked ops stay differentiable under a
/// finite-difference step.
pub fn random_tensor_off_zero(shape: [usize; 4], rng: &mut Stream) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn padded(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => Some(if i < 0 { -i } else { 2 * (n - 1) - i } as usize),
    }
}

/// Direct six-loop cross-correlation.
pub fn conv2d_naive(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Tensor<f64> {
    let [n, ci, h, wd] = x.shape();
    let [co, _, k, _] = w.shape();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * co * ho * wo];
    for bi in 0..n {
        for o in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = padded((oh * stride + kh) as isize - pad as isize, h, mode);
                                let iw = padded((ow * stride + kw) as isize - pad as isize, wd, mode);
                                if let (Some(ih), Some(iw)) = (ih, iw) {
                                    acc += wdat[((o * ci + c) * k + kh) * k + kw] * xd[((bi * ci + c) * h + ih) * wd + iw];
                                }
                            }
                        }
                    }
                    out[((bi * co + o) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    Tensor::new([n, co, ho, wo], out).unwrap()
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Largest `|analytic − numeric| / max(1, |numeric|)` over every element of
/// every input, using central differences with step `h`.
pub fn gradient_check(inputs: &[Tensor<f64>], h: f64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        (tape.value(loss).item(), tape, vars, loss)
    };
    let (_, tape, vars, loss) = eval(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element carries a
/// distinct weight into the loss.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut r = rng::stream(seed, 99);
    let weights = random_tensor(tape.shape(y), &mut r);
    let w = tape.constant(weights);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

pub fn pearson_two_pass(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// SSIM averaged over every fully contained 11×11 window, each window's
/// weighted moments summed directly.
pub fn ssim_brute_force(a: &[f64], b: &[f64], width: usize, height: usize, data_range: f64) -> f64 {
    let size = 11usize;
    let sigma: f64 = 1.5;
    let g1: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut win = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            win[i * size + j] = g1[i] * g1[j];
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|w| *w /= total);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for r0 in 0..=height - size {
        for c0 in 0..=width - size {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let p = (r0 + i) * width + c0 + j;
                    mx += win[i * size + j] * a[p];
                    my += win[i * size + j] * b[p];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let p = (r0 + i) * width + c0 + j;
                    let w = win[i * size + j];
                    vx += w * (a[p] - mx).powi(2);
                    vy += w * (b[p] - my).powi(2);
                    cxy += w * (a[p] - mx) * (b[p] - my);
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

pub fn percentile_full_sort(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}
