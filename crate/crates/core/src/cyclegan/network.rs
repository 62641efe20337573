//! Networks described as flat layer lists and interpreted on a tape.

use rand_distr::{Distribution, Normal};

use super::config::{DiscriminatorConfig, GeneratorConfig};
use super::CycleGanError;
use crate::autodiff::{PadMode, Tape, Tensor, Var};
use crate::rng::Stream;

pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f32 = 1e-5;
pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
    },
    ConvT {
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Norm(usize),
    Relu,
    LeakyRelu,
    Tanh,
    ResStart,
    ResEnd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    pub layers: Vec<Layer>,
    pub params: Vec<Param>,
}

fn generator_layers(cfg: &GeneratorConfig) -> Vec<Layer> {
    let c = cfg.base_channels;
    let reflect = |cin, cout, k, stride, pad| Layer::Conv {
        cin,
        cout,
        k,
        stride,
        pad,
        mode: PadMode::Reflect,
    };
    let mut l = vec![
        reflect(cfg.in_channels, c, 7, 1, 3),
        Layer::Norm(c),
        Layer::Relu,
        reflect(c, 2 * c, 3, 2, 1),
        Layer::Norm(2 * c),
        Layer::Relu,
        reflect(2 * c, 4 * c, 3, 2, 1),
        Layer::Norm(4 * c),
        Layer::Relu,
    ];
    for _ in 0..cfg.n_res_blocks {
        l.extend([
            Layer::ResStart,
            reflect(4 * c, 4 * c, 3, 1, 1),
            Layer::Norm(4 * c),
            Layer::Relu,
            reflect(4 * c, 4 * c, 3, 1, 1),
            Layer::Norm(4 * c),
            Layer::ResEnd,
        ]);
    }
    for (cin, cout) in [(4 * c, 2 * c), (2 * c, c)] {
        l.extend([
            Layer::ConvT {
                cin,
                cout,
                k: 4,
                stride: 2,
                pad: 1,
            },
            Layer::Norm(cout),
            Layer::Relu,
        ]);
    }
    l.extend([reflect(c, cfg.out_channels, 7, 1, 3), Layer::Tanh]);
    l
}

fn discriminator_layers(cfg: &DiscriminatorConfig) -> Vec<Layer> {
    let c = cfg.base_channels;
    let zero = |cin, cout, stride| Layer::Conv {
        cin,
        cout,
        k: 4,
        stride,
        pad: 1,
        mode: PadMode::Zero,
    };
    vec![
        zero(cfg.in_channels, c, 2),
        Layer::LeakyRelu,
        zero(c, 2 * c, 2),
        Layer::Norm(2 * c),
        Layer::LeakyRelu,
        zero(2 * c, 4 * c, 2),
        Layer::Norm(4 * c),
        Layer::LeakyRelu,
        zero(4 * c, 8 * c, 1),
        Layer::Norm(8 * c),
        Layer::LeakyRelu,
        zero(8 * c, 1, 1),
    ]
}

impl Network {
    fn from_layers(name: &str, layers: Vec<Layer>, rng: &mut Stream) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let mut params = Vec::new();
        let draw = |shape: [usize; 4], rng: &mut Stream| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| normal.sample(rng) as f32).collect()).expect("finite init")
        };
        for (i, layer) in layers.iter().enumerate() {
            let mut add = |suffix: &str, tensor| {
                params.push(Param {
                    name: format!("{name}.{i}.{suffix}"),
                    tensor,
                })
            };
            match *layer {
                Layer::Conv { cin, cout, k, .. } => {
                    add("weight", draw([cout, cin, k, k], rng));
                    add("bias", Tensor::zeros([1, cout, 1, 1]));
                }
                Layer::ConvT { cin, cout, k, .. } => {
                    add("weight", draw([cin, cout, k, k], rng));
                    add("bias", Tensor::zeros([1, cout, 1, 1]));
                }
                Layer::Norm(c) => {
                    add("gain", Tensor::full([1, c, 1, 1], 1.0));
                    add("offset", Tensor::zeros([1, c, 1, 1]));
                }
                _ => {}
            }
        }
        Self {
            name: name.to_string(),
            layers,
            params,
        }
    }

    pub fn generator(name: &str, cfg: &GeneratorConfig, rng: &mut Stream) -> Result<Self, CycleGanError> {
        if cfg.base_channels == 0 || cfg.in_channels == 0 || cfg.out_channels == 0 {
            return Err(CycleGanError::BadConfig("generator channel counts must be >= 1"));
        }
        let net = Self::from_layers(name, generator_layers(cfg), rng);
        assert_eq!(net.conv_layer_count(), cfg.expected_conv_layers());
        Ok(net)
    }

    pub fn discriminator(name: &str, cfg: &DiscriminatorConfig, rng: &mut Stream) -> Result<Self, CycleGanError> {
        if cfg.base_channels == 0 || cfg.in_channels == 0 {
            return Err(CycleGanError::BadConfig("discriminator channel counts must be >= 1"));
        }
        let net = Self::from_layers(name, discriminator_layers(cfg), rng);
        assert_eq!(net.conv_layer_count(), DiscriminatorConfig::CONV_LAYERS);
        Ok(net)
    }

    /// Convolution and transposed-convolution layers.
    pub fn conv_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. } | Layer::ConvT { .. }))
            .count()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter on `tape`, in declaration order.
    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), trainable))
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape<f32>, bound: &[Var], x: Var) -> Result<Var, CycleGanError> {
        let mut h = x;
        let mut next = 0;
        let mut skips = Vec::new();
        for layer in &self.layers {
            h = match *layer {
                Layer::Conv { stride, pad, mode, .. } => {
                    let (w, b) = (bound[next], bound[next + 1]);
                    next += 2;
                    tape.conv2d(h, w, Some(b), stride, pad, mode)?
                }
                Layer::ConvT { stride, pad, .. } => {
                    let (w, b) = (bound[next], bound[next + 1]);
                    next += 2;
                    tape.conv_transpose2d(h, w, Some(b), stride, pad)?
                }
                Layer::Norm(_) => {
                    let (g, o) = (bound[next], bound[next + 1]);
                    next += 2;
                    tape.instance_norm(h, g, o, NORM_EPS)?
                }
                Layer::Relu => tape.relu(h),
                Layer::LeakyRelu => tape.leaky_relu(h, LEAKY_SLOPE),
                Layer::Tanh => tape.tanh(h),
                Layer::ResStart => {
                    skips.push(h);
                    h
                }
                Layer::ResEnd => {
                    let skip = skips.pop().expect("ResEnd without ResStart");
                    tape.add(skip, h)?
                }
            };
        }
        Ok(h)
    }

    pub fn checksum(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            for v in p.tensor.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}
