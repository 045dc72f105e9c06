//! Online instance matching over pooled person features: a momentum lookup
//! table of labeled identities and a circular queue of unlabeled features.

use std::collections::VecDeque;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{normalize_in_place, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OimError {
    #[error("identity {label} outside a table of {identities}")]
    LabelOutOfRange { label: usize, identities: usize },
    #[error("{features} features but {labels} labels")]
    LabelCount { features: usize, labels: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, OimError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OimConfig {
    pub temperature: f64,
    pub momentum: f64,
    pub queue_size: usize,
}

impl Default for OimConfig {
    fn default() -> Self {
        OimConfig {
            temperature: 0.1,
            momentum: 0.5,
            queue_size: 64,
        }
    }
}

/// Identity label per feature; `None` marks an unlabeled person.
pub type PersonLabel = Option<usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct OimState {
    pub config: OimConfig,
    dim: usize,
    lut: Vec<Vec<f64>>,
    queue: VecDeque<Vec<f64>>,
}

impl OimState {
    /// Table of random unit rows for `identities` labels, empty queue.
    pub fn new<R: Rng>(rng: &mut R, identities: usize, dim: usize, config: OimConfig) -> Self {
        let lut = (0..identities)
            .map(|_| {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                normalize_in_place(&mut v);
                v
            })
            .collect();
        OimState {
            config,
            dim,
            lut,
            queue: VecDeque::new(),
        }
    }

    /// State with explicit contents; rows are normalised on entry.
    pub fn from_parts(config: OimConfig, dim: usize, lut: Vec<Vec<f64>>, queue: Vec<Vec<f64>>) -> Self {
        let unit = |mut v: Vec<f64>| {
            normalize_in_place(&mut v);
            v
        };
        let mut queue: VecDeque<Vec<f64>> = queue.into_iter().map(unit).collect();
        while queue.len() > config.queue_size {
            queue.pop_front();
        }
        OimState {
            config,
            dim,
            lut: lut.into_iter().map(unit).collect(),
            queue,
        }
    }

    pub fn identities(&self) -> usize {
        self.lut.len()
    }

    pub fn lut(&self) -> &[Vec<f64>] {
        &self.lut
    }

    pub fn queue(&self) -> &VecDeque<Vec<f64>> {
        &self.queue
    }

    fn check(&self, n: usize, labels: &[PersonLabel]) -> Result<()> {
        if n != labels.len() {
            return Err(OimError::LabelCount { features: n, labels: labels.len() });
        }
        for &t in labels.iter().flatten() {
            if t >= self.lut.len() {
                return Err(OimError::LabelOutOfRange { label: t, identities: self.lut.len() });
            }
        }
        Ok(())
    }

    /// Mean negative log-probability of each labeled feature's identity under
    /// a softmax over `[x·lutᵀ, x·cqᵀ] / τ`. Features `[n, d]` are normalised
    /// inside; the table and queue are constants. Zero when nothing is labeled.
    pub fn loss(&self, g: &mut Graph, features: Var, labels: &[PersonLabel]) -> Result<Var> {
        let s = g.shape(features).to_vec();
        if s.len() != 2 || s[1] != self.dim {
            return Err(TensorError::Dimension {
                op: "oim_loss",
                lhs: s,
                rhs: vec![self.dim],
            }
            .into());
        }
        self.check(s[0], labels)?;
        let rows: Vec<usize> = (0..s[0]).filter(|&i| labels[i].is_some()).collect();
        if rows.is_empty() || self.lut.is_empty() {
            return Ok(g.constant(vec![1], vec![0.0])?);
        }
        let targets: Vec<usize> = rows.iter().map(|&i| labels[i].expect("labeled")).collect();
        let idx: Rc<[Option<usize>]> = rows.iter().map(|&i| Some(i)).collect();
        let x = g.gather_rows(features, self.dim, idx, vec![rows.len(), self.dim])?;
        let x = g.normalize_rows(x);
        let m = self.lut.len() + self.queue.len();
        let memory: Vec<f64> = self.lut.iter().chain(self.queue.iter()).flatten().copied().collect();
        let memory = g.constant(vec![m, self.dim], memory)?;
        let logits = g.matmul_nt(x, memory)?;
        let logits = g.scale(logits, 1.0 / self.config.temperature);
        let logp = g.log_softmax(logits);
        Ok(g.nll_rows(logp, targets)?)
    }

    /// Momentum update of labeled identities; unlabeled features enter the
    /// queue, evicting the oldest beyond capacity.
    pub fn update(&mut self, features: &[Vec<f64>], labels: &[PersonLabel]) -> Result<()> {
        self.check(features.len(), labels)?;
        let m = self.config.momentum;
        for (x, label) in features.iter().zip(labels) {
            if x.len() != self.dim {
                return Err(TensorError::Dimension {
                    op: "oim_update",
                    lhs: vec![x.len()],
                    rhs: vec![self.dim],
                }
                .into());
            }
            let mut x = x.clone();
            normalize_in_place(&mut x);
            match label {
                Some(t) => {
                    let row = &mut self.lut[*t];
                    row.iter_mut().zip(&x).for_each(|(r, v)| *r = m * *r + (1.0 - m) * v);
                    normalize_in_place(row);
                }
                None => {
                    if self.config.queue_size == 0 {
                        continue;
                    }
                    if self.queue.len() == self.config.queue_size {
                        self.queue.pop_front();
                    }
                    self.queue.push_back(x);
                }
            }
        }
        Ok(())
    }

    /// The lookup table as a tensor, for inspection.
    pub fn lut_tensor(&self) -> Tensor {
        Tensor::new(vec![self.lut.len(), self.dim], self.lut.concat()).expect("table shape")
    }
}
