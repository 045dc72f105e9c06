//! First-order optimisers. Tensors with `requires_grad == false` are never
//! touched, which is how parameter freezing is expressed.

use std::collections::HashMap;

use super::Tensor;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        for p in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad.take() else { continue };
            p.data.iter_mut().zip(&g).for_each(|(w, g)| *w -= self.lr * g);
        }
    }
}

/// Adam with bias correction; moment state is keyed by tensor id.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<u64, AdamState>,
}

#[derive(Debug, Clone)]
struct AdamState {
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    /// Applies one update to every trainable tensor holding a gradient, then
    /// clears those gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        for p in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad.take() else { continue };
            let n = g.len();
            let st = self.state.entry(p.id()).or_insert_with(|| AdamState {
                t: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t);
            let bc2 = 1.0 - self.beta2.powi(st.t);
            for j in 0..n {
                st.m[j] = self.beta1 * st.m[j] + (1.0 - self.beta1) * g[j];
                st.v[j] = self.beta2 * st.v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = st.m[j] / bc1;
                let vh = st.v[j] / bc2;
                p.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
