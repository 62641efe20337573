use super::conv::{matmul, matmul_nt_acc, matmul_tn, ConvGeom, PadMode};
use super::{AutodiffError, Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        /// im2col matrices for every batch item; empty when the weight
        /// gradient is not needed.
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        /// Geometry of the equivalent forward convolution on the output grid.
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Mean(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation in execution order so it can be differentiated in
/// reverse. A tape built with [`Tape::no_grad`] keeps only forward values.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(msg: String) -> AutodiffError {
    AutodiffError::ShapeMismatch(msg)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Inference tape: nothing requires gradients and no backward state is kept.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn check_bias(&self, b: Option<Var>, channels: usize) -> Result<(), AutodiffError> {
        if let Some(b) = b {
            if self.shape(b) != [1, channels, 1, 1] {
                return Err(shape_err(format!("bias shape {:?}, expected [1, {channels}, 1, 1]", self.shape(b))));
            }
        }
        Ok(())
    }

    fn add_bias(&self, out: &mut [T], b: Option<Var>, n: usize, channels: usize, plane: usize) {
        if let Some(b) = b {
            let bias = self.value(b).data();
            for chunk in out.chunks_mut(plane).take(n * channels).enumerate() {
                let bv = bias[chunk.0 % channels];
                chunk.1.iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    /// Cross-correlation of `x` `[n, ci, h, w]` with `w` `[co, ci, k, k]`,
    /// plus an optional bias `[1, co, 1, 1]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<Var, AutodiffError> {
        let [n, ci, h, wd] = self.shape(x);
        let [co, wci, k, k2] = self.shape(w);
        if wci != ci || k != k2 {
            return Err(shape_err(format!(
                "conv2d weight {:?} does not fit input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        self.check_bias(b, co)?;
        let geom = ConvGeom::new(ci, h, wd, k, stride, pad, mode)?;
        let (r, p) = (geom.rows(), geom.cols());
        let save = self.grad_enabled && self.needs(w);
        let mut cols = vec![T::zero(); if save { n * r * p } else { r * p }];
        let mut out = vec![T::zero(); n * co * p];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            for bi in 0..n {
                let c = if save { &mut cols[bi * r * p..(bi + 1) * r * p] } else { &mut cols[..] };
                geom.im2col(&xd[bi * ci * h * wd..(bi + 1) * ci * h * wd], c);
                matmul(co, r, p, wdat, c, &mut out[bi * co * p..(bi + 1) * co * p], T::zero());
            }
        }
        self.add_bias(&mut out, b, n, co, p);
        if !save {
            cols = Vec::new();
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::from_parts([n, co, geom.ho, geom.wo], out);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, needs))
    }

    /// Transposed convolution with `w` `[ci, co, k, k]`; output side is
    /// `(h − 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutodiffError> {
        let [n, ci, h, wd] = self.shape(x);
        let [wci, co, k, k2] = self.shape(w);
        if wci != ci || k != k2 || stride == 0 {
            return Err(shape_err(format!(
                "conv_transpose2d weight {:?} does not fit input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        self.check_bias(b, co)?;
        let full_h = (h - 1) * stride + k;
        let full_w = (wd - 1) * stride + k;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(shape_err(format!("conv_transpose2d padding {pad} leaves an empty output")));
        }
        let (ho, wo) = (full_h - 2 * pad, full_w - 2 * pad);
        let geom = ConvGeom::new(co, ho, wo, k, stride, pad, PadMode::Zero)?;
        debug_assert_eq!((geom.ho, geom.wo), (h, wd));
        let (r, p) = (geom.rows(), geom.cols());
        let mut out = vec![T::zero(); n * co * ho * wo];
        let mut cols = vec![T::zero(); r * p];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            for bi in 0..n {
                matmul_tn(ci, r, p, wdat, &xd[bi * ci * p..(bi + 1) * ci * p], &mut cols, T::zero());
                geom.col2im(&cols, &mut out[bi * co * ho * wo..(bi + 1) * co * ho * wo]);
            }
        }
        self.add_bias(&mut out, b, n, co, ho * wo);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::from_parts([n, co, ho, wo], out);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, needs))
    }

    /// Per-sample, per-channel normalization over space followed by a
    /// channel-wise affine map with `gain` and `offset` of shape `[1, c, 1, 1]`.
    pub fn instance_norm(&mut self, x: Var, gain: Var, offset: Var, eps: T) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = self.shape(x);
        for v in [gain, offset] {
            if self.shape(v) != [1, c, 1, 1] {
                return Err(shape_err(format!("instance_norm affine shape {:?}, expected [1, {c}, 1, 1]", self.shape(v))));
            }
        }
        if !(eps > T::zero()) {
            return Err(shape_err("instance_norm eps must be > 0".into()));
        }
        let plane = h * w;
        let inv_count = T::one() / T::from_f64(plane as f64);
        let mut xhat = vec![T::zero(); n * c * plane];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); n * c * plane];
        {
            let xd = self.value(x).data();
            let g = self.value(gain).data();
            let o = self.value(offset).data();
            for (i, chunk) in xd.chunks(plane).enumerate() {
                let mean = chunk.iter().copied().sum::<T>() * inv_count;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_count;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[i] = inv;
                let ch = i % c;
                for (j, &v) in chunk.iter().enumerate() {
                    let xh = (v - mean) * inv;
                    xhat[i * plane + j] = xh;
                    out[i * plane + j] = g[ch] * xh + o[ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(offset);
        if !(needs && self.grad_enabled) {
            xhat = Vec::new();
        }
        let value = Tensor::from_parts([n, c, h, w], out);
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, move |v| if v > T::zero() { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, T::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, move |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, move |v| v + c, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, T::abs, Op::Abs(x))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "elementwise operands {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(self.shape(a), data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_f64(t.len() as f64);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Reverse pass from a `[1, 1, 1, 1]` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let shape = self.shape(loss);
        if shape != [1, 1, 1, 1] {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut result: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs(loss) {
            pending[loss.0] = Some(Tensor::scalar(T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            let mut send = |v: Var, grad: Tensor<T>| {
                if self.nodes[v.0].needs_grad {
                    match &mut pending[v.0] {
                        Some(acc) => acc.add_assign(&grad),
                        slot => *slot = Some(grad),
                    }
                }
            };
            match &node.op {
                Op::Leaf => result[i] = Some(g),
                Op::Conv2d { x, w, b, geom, cols } => {
                    let [n, co, _, _] = node.value.shape();
                    let (r, p) = (geom.rows(), geom.cols());
                    let gy = g.data();
                    if self.needs(*w) {
                        let mut gw = Tensor::zeros(self.shape(*w));
                        for bi in 0..n {
                            matmul_nt_acc(
                                co,
                                r,
                                p,
                                &gy[bi * co * p..(bi + 1) * co * p],
                                &cols[bi * r * p..(bi + 1) * r * p],
                                gw.data_mut(),
                            );
                        }
                        send(*w, gw);
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        send(b, channel_sums(gy, n, co, p));
                    }
                    if self.needs(*x) {
                        let xs = self.shape(*x);
                        let per = xs[1] * xs[2] * xs[3];
                        let mut gx = Tensor::zeros(xs);
                        let mut dcols = vec![T::zero(); r * p];
                        let wdat = self.value(*w).data();
                        for bi in 0..n {
                            matmul_tn(co, r, p, wdat, &gy[bi * co * p..(bi + 1) * co * p], &mut dcols, T::zero());
                            geom.col2im(&dcols, &mut gx.data_mut()[bi * per..(bi + 1) * per]);
                        }
                        send(*x, gx);
                    }
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    let [n, co, ho, wo] = node.value.shape();
                    let xs = self.shape(*x);
                    let ci = xs[1];
                    let (r, p) = (geom.rows(), geom.cols());
                    let gy = g.data();
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        send(b, channel_sums(gy, n, co, ho * wo));
                    }
                    let need_x = self.needs(*x);
                    let need_w = self.needs(*w);
                    if need_x || need_w {
                        let mut gx = Tensor::zeros(xs);
                        let mut gw = Tensor::zeros(self.shape(*w));
                        let mut dcols = vec![T::zero(); r * p];
                        let wdat = self.value(*w).data();
                        let xd = self.value(*x).data();
                        for bi in 0..n {
                            geom.im2col(&gy[bi * co * ho * wo..(bi + 1) * co * ho * wo], &mut dcols);
                            if need_x {
                                matmul(ci, r, p, wdat, &dcols, &mut gx.data_mut()[bi * ci * p..(bi + 1) * ci * p], T::zero());
                            }
                            if need_w {
                                matmul_nt_acc(ci, r, p, &xd[bi * ci * p..(bi + 1) * ci * p], &dcols, gw.data_mut());
                            }
                        }
                        if need_x {
                            send(*x, gx);
                        }
                        if need_w {
                            send(*w, gw);
                        }
                    }
                }
                Op::InstanceNorm {
                    x,
                    gain,
                    offset,
                    xhat,
                    inv_std,
                } => {
                    let [_, c, h, w] = node.value.shape();
                    let plane = h * w;
                    let inv_count = T::one() / T::from_f64(plane as f64);
                    let gd = self.value(*gain).data();
                    let mut gg = Tensor::zeros([1, c, 1, 1]);
                    let mut go = Tensor::zeros([1, c, 1, 1]);
                    let need_x = self.needs(*x);
                    let mut gx = if need_x { Tensor::zeros(self.shape(*x)) } else { Tensor::zeros([0, 0, 0, 0]) };
                    for (i, dy) in g.data().chunks(plane).enumerate() {
                        let ch = i % c;
                        let xh = &xhat[i * plane..(i + 1) * plane];
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xh = T::zero();
                        for (&d, &v) in dy.iter().zip(xh) {
                            sum_dy += d;
                            sum_dy_xh += d * v;
                        }
                        gg.data_mut()[ch] += sum_dy_xh;
                        go.data_mut()[ch] += sum_dy;
                        if need_x {
                            let m1 = gd[ch] * sum_dy * inv_count;
                            let m2 = gd[ch] * sum_dy_xh * inv_count;
                            let out = &mut gx.data_mut()[i * plane..(i + 1) * plane];
                            for ((o, &d), &v) in out.iter_mut().zip(dy).zip(xh) {
                                *o = inv_std[i] * (gd[ch] * d - m1 - v * m2);
                            }
                        }
                    }
                    send(*gain, gg);
                    send(*offset, go);
                    if need_x {
                        send(*x, gx);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    send(*x, zip_map(&g, xv, |d, v| if v > T::zero() { d } else { T::zero() }));
                }
                Op::LeakyRelu(x, slope) => {
                    let s = *slope;
                    let xv = self.value(*x);
                    send(*x, zip_map(&g, xv, |d, v| if v > T::zero() { d } else { s * d }));
                }
                Op::Tanh(x) => send(*x, zip_map(&g, &node.value, |d, y| d * (T::one() - y * y))),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.map(|d| -d));
                }
                Op::Mul(a, b) => {
                    send(*a, zip_map(&g, self.value(*b), |d, v| d * v));
                    send(*b, zip_map(&g, self.value(*a), |d, v| d * v));
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    send(*x, g.map(|d| c * d));
                }
                Op::AddScalar(x) => send(*x, g),
                Op::Square(x) => send(*x, zip_map(&g, self.value(*x), |d, v| (v + v) * d)),
                Op::Abs(x) => send(*x, zip_map(&g, self.value(*x), |d, v| d * v.signum())),
                Op::Sum(x) => send(*x, Tensor::full(self.shape(*x), g.item())),
                Op::Mean(x) => {
                    let s = self.shape(*x);
                    let n: usize = s.iter().product();
                    send(*x, Tensor::full(s, g.item() / T::from_f64(n as f64)));
                }
            }
        }
        Ok(Gradients { grads: result })
    }
}

fn zip_map<T: Scalar>(g: &Tensor<T>, v: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(v.data()).map(|(&d, &x)| f(d, x)).collect();
    Tensor::from_parts(g.shape(), data)
}

fn channel_sums<T: Scalar>(gy: &[T], n: usize, c: usize, plane: usize) -> Tensor<T> {
    let mut gb = Tensor::zeros([1, c, 1, 1]);
    for (i, chunk) in gy.chunks(plane).take(n * c).enumerate() {
        gb.data_mut()[i % c] += chunk.iter().copied().sum();
    }
    gb
}
