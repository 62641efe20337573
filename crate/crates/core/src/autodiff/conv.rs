//! im2col-based convolution kernels.
//!
//! A convolution reads a `c×h×w` grid through `k×k` windows placed every
//! `stride` pixels on the padded grid. `im2col` lays those windows out as a
//! `(c·k·k) × (ho·wo)` matrix, and `col2im` is its exact adjoint, so the
//! same pair serves the forward pass, the input gradient, and the transposed
//! convolution.

use super::{AutodiffError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge pixel (`c b | a b c | b a`).
    Reflect,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    /// Source row for window row `kh` at output row `oh`, at `kh*ho + oh`.
    row_src: Vec<Option<usize>>,
    col_src: Vec<Option<usize>>,
}

fn source_map(n: usize, out: usize, k: usize, stride: usize, pad: usize, mode: PadMode) -> Vec<Option<usize>> {
    let mut map = Vec::with_capacity(k * out);
    for kk in 0..k {
        for o in 0..out {
            let i = (o * stride + kk) as isize - pad as isize;
            let src = if (0..n as isize).contains(&i) {
                Some(i as usize)
            } else {
                match mode {
                    PadMode::Zero => None,
                    PadMode::Reflect if i < 0 => Some((-i) as usize),
                    PadMode::Reflect => Some(2 * (n - 1) - i as usize),
                }
            };
            map.push(src);
        }
    }
    map
}

impl ConvGeom {
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<Self, AutodiffError> {
        if k == 0 || stride == 0 {
            return Err(AutodiffError::ShapeMismatch("kernel size and stride must be >= 1".into()));
        }
        if mode == PadMode::Reflect && (pad >= h || pad >= w) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "reflect padding {pad} needs spatial size > {pad}, got {h}x{w}"
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(AutodiffError::ShapeMismatch(format!(
                "kernel {k} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            c,
            h,
            w,
            k,
            ho,
            wo,
            row_src: source_map(h, ho, k, stride, pad, mode),
            col_src: source_map(w, wo, k, stride, pad, mode),
        })
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    pub fn im2col<T: Scalar>(&self, x: &[T], out: &mut [T]) {
        let (k, ho, wo) = (self.k, self.ho, self.wo);
        debug_assert_eq!(out.len(), self.rows() * self.cols());
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for kh in 0..k {
                for kw in 0..k {
                    let r = (c * k + kh) * k + kw;
                    let dst = &mut out[r * ho * wo..(r + 1) * ho * wo];
                    let cmap = &self.col_src[kw * wo..(kw + 1) * wo];
                    for oh in 0..ho {
                        let drow = &mut dst[oh * wo..(oh + 1) * wo];
                        match self.row_src[kh * ho + oh] {
                            None => drow.fill(T::zero()),
                            Some(ih) => {
                                let srow = &plane[ih * self.w..(ih + 1) * self.w];
                                for (d, s) in drow.iter_mut().zip(cmap) {
                                    *d = s.map_or(T::zero(), |iw| srow[iw]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-adds columns back onto the grid.
    pub fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let (k, ho, wo) = (self.k, self.ho, self.wo);
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for kh in 0..k {
                for kw in 0..k {
                    let r = (c * k + kh) * k + kw;
                    let src = &cols[r * ho * wo..(r + 1) * ho * wo];
                    let cmap = &self.col_src[kw * wo..(kw + 1) * wo];
                    for oh in 0..ho {
                        if let Some(ih) = self.row_src[kh * ho + oh] {
                            let prow = &mut plane[ih * self.w..(ih + 1) * self.w];
                            for (s, m) in src[oh * wo..(oh + 1) * wo].iter().zip(cmap) {
                                if let Some(iw) = *m {
                                    prow[iw] += *s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[co, p] = sum_r w[co, r]·cols[r, p]` for an `m×r` weight matrix.
pub(crate) fn matmul<T: Scalar>(m: usize, r: usize, p: usize, w: &[T], cols: &[T], out: &mut [T], beta: T) {
    T::gemm(m, r, p, T::one(), w, r, 1, cols, p, 1, beta, out, p, 1);
}

/// `out[r, p] = sum_m w[m, r]·y[m, p]`, i.e. `wᵀ·y`.
pub(crate) fn matmul_tn<T: Scalar>(m: usize, r: usize, p: usize, w: &[T], y: &[T], out: &mut [T], beta: T) {
    T::gemm(r, m, p, T::one(), w, 1, r, y, p, 1, beta, out, p, 1);
}

/// `out[m, r] += sum_p y[m, p]·cols[r, p]`, i.e. `y·colsᵀ`.
pub(crate) fn matmul_nt_acc<T: Scalar>(m: usize, r: usize, p: usize, y: &[T], cols: &[T], out: &mut [T]) {
    T::gemm(m, p, r, T::one(), y, p, 1, cols, 1, p, T::one(), out, r, 1);
}
