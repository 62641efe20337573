use rand::seq::SliceRandom;

use super::loss::{cycle_loss, l1, lsgan_loss_d, lsgan_loss_g};
use super::pool::ImagePool;
use super::{lr_schedule, CycleGanError, CycleGanModel, Network, TrainConfig};
use crate::autodiff::{AdamConfig, AdamState, Gradients, Tape, Tensor, Var};
use crate::rng;
use crate::slicing::SliceImage;

/// Loss components of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub d_orig: f64,
    pub d_anon: f64,
    /// Adversarial loss of the refacing generator.
    pub g_adv: f64,
    /// Adversarial loss of the defacing generator.
    pub f_adv: f64,
    /// Cycle term on anonymized inputs (anon → orig → anon).
    pub cycle_anon: f64,
    /// Cycle term on original inputs (orig → anon → orig).
    pub cycle_orig: f64,
    pub identity: f64,
}

impl StepLosses {
    pub const NAMES: [&'static str; 7] = ["d_orig", "d_anon", "g_adv", "f_adv", "cycle_anon", "cycle_orig", "identity"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.d_orig,
            self.d_anon,
            self.g_adv,
            self.f_adv,
            self.cycle_anon,
            self.cycle_orig,
            self.identity,
        ]
    }

    /// Both cycle terms together.
    pub fn cycle(&self) -> f64 {
        self.cycle_anon + self.cycle_orig
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: Vec<StepLosses>,
}

impl EpochLog {
    pub fn mean(&self) -> StepLosses {
        let n = self.steps.len().max(1) as f64;
        let mut acc = [0.0; 7];
        for s in &self.steps {
            for (a, v) in acc.iter_mut().zip(s.values()) {
                *a += v / n;
            }
        }
        StepLosses {
            d_orig: acc[0],
            d_anon: acc[1],
            g_adv: acc[2],
            f_adv: acc[3],
            cycle_anon: acc[4],
            cycle_orig: acc[5],
            identity: acc[6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn all_finite(&self) -> bool {
        self.epochs.iter().all(|e| e.steps.iter().all(StepLosses::is_finite))
    }

    /// CSV with one row per step.
    pub fn to_csv(&self) -> String {
        let mut s = format!("epoch,step,lr,{}\n", StepLosses::NAMES.join(","));
        for e in &self.epochs {
            for (i, st) in e.steps.iter().enumerate() {
                let vals: Vec<String> = st.values().iter().map(|v| format!("{v:.8e}")).collect();
                s.push_str(&format!("{},{},{:.8e},{}\n", e.epoch, i, e.lr, vals.join(",")));
            }
        }
        s
    }
}

fn to_tensors(images: &[SliceImage]) -> Vec<Tensor<f32>> {
    images
        .iter()
        .map(|im| {
            Tensor::new([1, 1, im.height, im.width], im.pixels.iter().map(|&v| v as f32).collect())
                .expect("slice pixels are finite")
        })
        .collect()
}

fn stack(items: &[&Tensor<f32>]) -> Tensor<f32> {
    let [_, c, h, w] = items[0].shape();
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new([items.len(), c, h, w], data).expect("stacked images are finite")
}

fn grads_for<'a>(grads: &'a Gradients<f32>, vars: &[Var]) -> Vec<Option<&'a Tensor<f32>>> {
    vars.iter().map(|&v| grads.get(v)).collect()
}

fn apply(net: &mut Network, state: &mut AdamState<f32>, grads: &Gradients<f32>, vars: &[Var], lr: f64) {
    let g = grads_for(grads, vars);
    let mut params: Vec<&mut Tensor<f32>> = net.params.iter_mut().map(|p| &mut p.tensor).collect();
    state.step(&mut params, &g, lr);
}

fn check_sizes(anon: &[SliceImage], orig: &[SliceImage]) -> Result<(usize, usize), CycleGanError> {
    if anon.is_empty() || orig.is_empty() {
        return Err(CycleGanError::EmptyDataset);
    }
    let (h, w) = (anon[0].height, anon[0].width);
    if let Some(im) = anon.iter().chain(orig).find(|im| (im.height, im.width) != (h, w)) {
        return Err(CycleGanError::SizeMismatch {
            expected: [h, w],
            found: [im.height, im.width],
        });
    }
    if h % 4 != 0 || w % 4 != 0 || h < 32 || w < 32 {
        return Err(CycleGanError::BadImageSize([h, w]));
    }
    Ok((h, w))
}

struct Optimizers {
    g: AdamState<f32>,
    f: AdamState<f32>,
    d_orig: AdamState<f32>,
    d_anon: AdamState<f32>,
}

fn discriminator_step(
    net: &mut Network,
    state: &mut AdamState<f32>,
    real: &Tensor<f32>,
    fake: Tensor<f32>,
    lr: f64,
) -> Result<f64, CycleGanError> {
    let mut tape = Tape::new();
    let p = net.bind(&mut tape, true);
    let r = tape.constant(real.clone());
    let f = tape.constant(fake);
    let dr = net.forward(&mut tape, &p, r)?;
    let df = net.forward(&mut tape, &p, f)?;
    let loss = lsgan_loss_d(&mut tape, dr, df)?;
    let grads = tape.backward(loss)?;
    apply(net, state, &grads, &p, lr);
    Ok(f64::from(tape.value(loss).item()))
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut CycleGanModel,
    opt: &mut Optimizers,
    pools: &mut (ImagePool, ImagePool),
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepLosses, CycleGanError> {
    let mut tape = Tape::new();
    let gp = model.g_reface.bind(&mut tape, true);
    let fp = model.f_deface.bind(&mut tape, true);
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let fake_b = model.g_reface.forward(&mut tape, &gp, av)?;
    let rec_a = model.f_deface.forward(&mut tape, &fp, fake_b)?;
    let fake_a = model.f_deface.forward(&mut tape, &fp, bv)?;
    let rec_b = model.g_reface.forward(&mut tape, &gp, fake_a)?;

    let pooled_b = pools.0.query(tape.value(fake_b));
    let pooled_a = pools.1.query(tape.value(fake_a));
    let d_orig = discriminator_step(&mut model.d_orig, &mut opt.d_orig, b, pooled_b, lr)?;
    let d_anon = discriminator_step(&mut model.d_anon, &mut opt.d_anon, a, pooled_a, lr)?;

    let dop = model.d_orig.bind(&mut tape, false);
    let dap = model.d_anon.bind(&mut tape, false);
    let pred_b = model.d_orig.forward(&mut tape, &dop, fake_b)?;
    let pred_a = model.d_anon.forward(&mut tape, &dap, fake_a)?;
    let g_adv = lsgan_loss_g(&mut tape, pred_b);
    let f_adv = lsgan_loss_g(&mut tape, pred_a);
    let cyc_a = cycle_loss(&mut tape, av, rec_a, cfg.lambda_cycle)?;
    let cyc_b = cycle_loss(&mut tape, bv, rec_b, cfg.lambda_cycle)?;
    let mut total = tape.add(g_adv, f_adv)?;
    total = tape.add(total, cyc_a)?;
    total = tape.add(total, cyc_b)?;
    let mut identity = 0.0;
    if cfg.lambda_identity > 0.0 {
        let idt_b = model.g_reface.forward(&mut tape, &gp, bv)?;
        let idt_a = model.f_deface.forward(&mut tape, &fp, av)?;
        let lb = l1(&mut tape, idt_b, bv)?;
        let la = l1(&mut tape, idt_a, av)?;
        let s = tape.add(lb, la)?;
        let idt = tape.scale(s, (cfg.lambda_identity * cfg.lambda_cycle) as f32);
        identity = f64::from(tape.value(idt).item());
        total = tape.add(total, idt)?;
    }
    let grads = tape.backward(total)?;
    apply(&mut model.g_reface, &mut opt.g, &grads, &gp, lr);
    apply(&mut model.f_deface, &mut opt.f, &grads, &fp, lr);
    let item = |v: Var| f64::from(tape.value(v).item());
    Ok(StepLosses {
        d_orig,
        d_anon,
        g_adv: item(g_adv),
        f_adv: item(f_adv),
        cycle_anon: item(cyc_a),
        cycle_orig: item(cyc_b),
        identity,
    })
}

/// Trains on unpaired anonymized and original slices. `on_epoch` runs after
/// every epoch with the model and that epoch's log, e.g. to checkpoint.
pub fn train(
    model: &mut CycleGanModel,
    anon: &[SliceImage],
    orig: &[SliceImage],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&CycleGanModel, &EpochLog),
) -> Result<TrainLog, CycleGanError> {
    cfg.validate()?;
    check_sizes(anon, orig)?;
    let a_data = to_tensors(anon);
    let b_data = to_tensors(orig);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut opt = Optimizers {
        g: AdamState::new(adam, model.g_reface.params.iter().map(|p| &p.tensor)),
        f: AdamState::new(adam, model.f_deface.params.iter().map(|p| &p.tensor)),
        d_orig: AdamState::new(adam, model.d_orig.params.iter().map(|p| &p.tensor)),
        d_anon: AdamState::new(adam, model.d_anon.params.iter().map(|p| &p.tensor)),
    };
    let mut shuffle_rng = rng::stream(cfg.seed, 0);
    let mut pools = (
        ImagePool::new(cfg.pool_size, rng::stream(cfg.seed, 1)),
        ImagePool::new(cfg.pool_size, rng::stream(cfg.seed, 2)),
    );
    let steps = a_data.len().max(b_data.len()).div_ceil(cfg.batch_size);
    let mut log = TrainLog::default();
    let mut a_order: Vec<usize> = (0..a_data.len()).collect();
    let mut b_order: Vec<usize> = (0..b_data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        a_order.shuffle(&mut shuffle_rng);
        b_order.shuffle(&mut shuffle_rng);
        let mut entry = EpochLog {
            epoch,
            lr,
            steps: Vec::with_capacity(steps),
        };
        for s in 0..steps {
            let idx = (s * cfg.batch_size..(s + 1) * cfg.batch_size).collect::<Vec<_>>();
            let a: Vec<_> = idx.iter().map(|&i| &a_data[a_order[i % a_order.len()]]).collect();
            let b: Vec<_> = idx.iter().map(|&i| &b_data[b_order[i % b_order.len()]]).collect();
            let losses = train_step(model, &mut opt, &mut pools, &stack(&a), &stack(&b), cfg, lr)?;
            entry.steps.push(losses);
        }
        on_epoch(model, &entry);
        log.epochs.push(entry);
    }
    Ok(log)
}
