//! Trainable parameters, layer building blocks and the Adam optimizer.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Graph, NodeId, ParamId};

/// A named weight tensor with a stable identity.
#[derive(Debug, Clone)]
pub struct Param {
    pub id: ParamId,
    pub name: String,
    pub value: ArrayD<f64>,
}

impl Param {
    /// Registers this parameter on the graph as trainable or frozen.
    pub fn node(&self, g: &mut Graph, trainable: bool) -> NodeId {
        g.param(self.id, &self.value, trainable)
    }
}

pub enum Init {
    /// Zero-mean Gaussian with std 1/sqrt(fan_in).
    FanIn(usize),
    Zeros,
    Ones,
}

/// Allocates parameter ids and initial values from a seeded stream, so a
/// model is a pure function of (seed, config).
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    next_id: u32,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
        }
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Param {
        let id = ParamId(self.next_id);
        self.next_id += 1;
        let value = match init {
            Init::FanIn(fan_in) => {
                let std = 1.0 / (fan_in.max(1) as f64).sqrt();
                let rng = &mut self.rng;
                Array::from_shape_simple_fn(IxDyn(shape), || sample_gauss(rng) * std)
            }
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::Ones => ArrayD::ones(IxDyn(shape)),
        };
        Param {
            id,
            name: name.into(),
            value,
        }
    }
}

/// Box-Muller standard normal; keeps the rand dependency to uniform draws.
fn sample_gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            w: pb.param(format!("{name}.w"), &[c_out, c_in, k, k], Init::FanIn(c_in * k * k)),
            b: pb.param(format!("{name}.b"), &[c_out], Init::Zeros),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, trainable: bool) -> NodeId {
        let w = self.w.node(g, trainable);
        let b = self.b.node(g, trainable);
        autodiff::conv2d(g, x, w, b, self.stride, self.pad)
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.w);
        out.push(&self.b);
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

pub struct ConvTranspose2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvTranspose2d {
            w: pb.param(format!("{name}.w"), &[c_in, c_out, k, k], Init::FanIn(c_in * k * k)),
            b: pb.param(format!("{name}.b"), &[c_out], Init::Zeros),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, trainable: bool) -> NodeId {
        let w = self.w.node(g, trainable);
        let b = self.b.node(g, trainable);
        autodiff::conv_transpose2d(g, x, w, b, self.stride, self.pad)
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.w);
        out.push(&self.b);
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: pb.param(format!("{name}.w"), &[out_dim, in_dim], Init::FanIn(in_dim)),
            b: pb.param(format!("{name}.b"), &[out_dim], Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, trainable: bool) -> NodeId {
        let w = self.w.node(g, trainable);
        let b = self.b.node(g, trainable);
        autodiff::linear(g, x, w, b)
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.w);
        out.push(&self.b);
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

/// Instance normalization with learned per-channel affine.
pub struct InstanceNorm2d {
    pub gamma: Param,
    pub beta: Param,
}

impl InstanceNorm2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        InstanceNorm2d {
            gamma: pb.param(format!("{name}.gamma"), &[channels], Init::Ones),
            beta: pb.param(format!("{name}.beta"), &[channels], Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, trainable: bool) -> NodeId {
        let y = autodiff::instance_norm(g, x, 1e-5);
        let gamma = self.gamma.node(g, trainable);
        let beta = self.beta.node(g, trainable);
        let y = autodiff::mul_cvec(g, y, gamma);
        autodiff::add_cvec(g, y, beta)
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

/// Adam with per-parameter moment buffers, one instance per update group.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub moments: BTreeMap<ParamId, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to `params` (in the given order) from `grads`
    /// harvested off a graph. Parameters without a gradient are untouched.
    pub fn step(&mut self, params: Vec<&mut Param>, grads: &HashMap<ParamId, ArrayD<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params {
            let Some(grad) = grads.get(&p.id) else { continue };
            let (m, v) = self
                .moments
                .entry(p.id)
                .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(&mut p.value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}
