//! Parameterised layers shared by the backbone and the detector, plus the
//! parameter-visiting trait used for freezing, digests and checkpoints.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::tensor::{Graph, Result, Tensor, Var};

/// Anything that owns named parameters.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn set_trainable(&mut self, flag: bool) {
        self.visit_mut("", &mut |_, t| t.set_requires_grad(flag));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, t| {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform `±1/sqrt(fan_in)` initialisation.
pub fn uniform_fan_in<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape")
}

/// `y = x · W + b` over rows of `x[n, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize, bias: bool) -> Self {
        Linear {
            weight: uniform_fan_in(rng, &[input, output], input),
            bias: bias.then(|| Tensor::zeros(&[output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Layer normalisation parameters over a trailing axis of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(d: usize) -> Self {
        Norm {
            gamma: Tensor::filled(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.layer_norm(x, gamma, beta, NORM_EPS)
    }
}

impl Module for Norm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Collects mutable references to every trainable parameter of `m`.
pub fn trainable_mut(m: &mut dyn Module) -> Vec<&mut Tensor> {
    let mut out: Vec<*mut Tensor> = Vec::new();
    m.visit_mut("", &mut |_, t| {
        if t.requires_grad() {
            out.push(t as *mut Tensor);
        }
    });
    // SAFETY: visit_mut yields each parameter exactly once, so the pointers
    // are distinct and all borrow from `m`, which outlives the result.
    out.into_iter().map(|p| unsafe { &mut *p }).collect()
}

/// Moves a graph's gradients into every trainable parameter of `m`.
pub fn accumulate_grads(m: &mut dyn Module, g: &Graph) {
    m.visit_mut("", &mut |_, t| g.accumulate_into(t));
}
