//! Least-squares adversarial losses and the L1 cycle term.

use super::CycleGanError;
use crate::autodiff::{Scalar, Tape, Var};

fn mean_square_offset<T: Scalar>(tape: &mut Tape<T>, x: Var, target: T) -> Var {
    let d = tape.add_scalar(x, -target);
    let sq = tape.square(d);
    tape.mean(sq)
}

/// `½·mean((d_real − 1)²) + ½·mean(d_fake²)`.
pub fn lsgan_loss_d<T: Scalar>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var, CycleGanError> {
    let r = mean_square_offset(tape, d_real, T::one());
    let f = mean_square_offset(tape, d_fake, T::zero());
    let s = tape.add(r, f)?;
    Ok(tape.scale(s, T::from_f64(0.5)))
}

/// `mean((d_fake − 1)²)`.
pub fn lsgan_loss_g<T: Scalar>(tape: &mut Tape<T>, d_fake: Var) -> Var {
    mean_square_offset(tape, d_fake, T::one())
}

pub fn l1<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, CycleGanError> {
    let d = tape.sub(a, b)?;
    let abs = tape.abs(d);
    Ok(tape.mean(abs))
}

/// `λ·mean|x − x_cycled|`.
pub fn cycle_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, x_cycled: Var, lambda: f64) -> Result<Var, CycleGanError> {
    let l = l1(tape, x, x_cycled)?;
    Ok(tape.scale(l, T::from_f64(lambda)))
}
