//! Domain-incremental prompt pool with attribute matching.
//!
//! Each learned domain owns one [`DomainSlot`]: a prompt sequence for every
//! attention layer plus `N` attribute projections and prototypes used to
//! recognise the domain from a query embedding. Slots never share tensors,
//! and a slot becomes read-only once its domain finishes training.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{join, Module};
use crate::tensor::{dot, normalize_in_place, Graph, Result as TensorResult, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("domain {0} is still in training")]
    DomainInTraining(usize),
    #[error("no domain is in training")]
    NoDomainInTraining,
    #[error("domain {domain} not in a pool of {len}")]
    UnknownDomain { domain: usize, len: usize },
    #[error("layer {layer} not among {layers} prompted layers")]
    UnknownLayer { layer: usize, layers: usize },
    #[error("prompt pool is empty")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PoolError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    /// Prompt tokens per layer.
    pub prompt_len: usize,
    /// Attribute pairs per domain.
    pub attributes: usize,
    /// Query embedding width.
    pub embed_dim: usize,
    pub init_scale: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            prompt_len: 16,
            attributes: 4,
            embed_dim: 128,
            init_scale: 0.02,
        }
    }
}

/// Prompts, attribute projections `W[N, c]` and prototypes `K[N, c]` of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSlot {
    pub domain_id: usize,
    pub prompts: Vec<Tensor>,
    pub projections: Tensor,
    pub prototypes: Tensor,
}

impl DomainSlot {
    pub fn new<R: Rng>(rng: &mut R, domain_id: usize, config: &PoolConfig, layer_dims: &[usize]) -> Self {
        let s = config.init_scale;
        let (n, c) = (config.attributes, config.embed_dim);
        let prompts = layer_dims
            .iter()
            .map(|&d| {
                let data = (0..config.prompt_len * d).map(|_| rng.gen_range(-s..s)).collect();
                Tensor::new(vec![config.prompt_len, d], data).expect("prompt shape")
            })
            .collect();
        let proj = (0..n * c).map(|_| 1.0 + rng.gen_range(-s..s)).collect();
        let mut proto: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        proto.chunks_mut(c).for_each(normalize_in_place);
        DomainSlot {
            domain_id,
            prompts,
            projections: Tensor::new(vec![n, c], proj).expect("projection shape"),
            prototypes: Tensor::new(vec![n, c], proto).expect("prototype shape"),
        }
    }

    pub fn attributes(&self) -> usize {
        self.projections.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.projections.shape()[1]
    }

    pub fn projection(&self, j: usize) -> &[f64] {
        let c = self.embed_dim();
        &self.projections.data()[j * c..(j + 1) * c]
    }

    pub fn prototype(&self, j: usize) -> &[f64] {
        let c = self.embed_dim();
        &self.prototypes.data()[j * c..(j + 1) * c]
    }

    /// Restores unit norm on every prototype row.
    pub fn renormalize_prototypes(&mut self) {
        let c = self.embed_dim();
        self.prototypes.data_mut().chunks_mut(c).for_each(normalize_in_place);
    }

    /// Per-attribute similarities `a^j` for a query embedding.
    pub fn similarities(&self, q: &[f64]) -> Vec<f64> {
        (0..self.attributes())
            .map(|j| attribute_similarity(q, self.projection(j), self.prototype(j)))
            .collect()
    }
}

impl Module for DomainSlot {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (l, p) in self.prompts.iter().enumerate() {
            f(join(prefix, &format!("prompts.{l}")), p);
        }
        f(join(prefix, "projections"), &self.projections);
        f(join(prefix, "prototypes"), &self.prototypes);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (l, p) in self.prompts.iter_mut().enumerate() {
            f(join(prefix, &format!("prompts.{l}")), p);
        }
        f(join(prefix, "projections"), &mut self.projections);
        f(join(prefix, "prototypes"), &mut self.prototypes);
    }
}

/// Cosine between `q ⊙ w` and `k`; 0 when either side has zero norm.
pub fn attribute_similarity(q: &[f64], w: &[f64], k: &[f64]) -> f64 {
    let p: Vec<f64> = q.iter().zip(w).map(|(a, b)| a * b).collect();
    let np = dot(&p, &p).sqrt();
    let nk = dot(k, k).sqrt();
    if np == 0.0 || nk == 0.0 {
        return 0.0;
    }
    (dot(&p, k) / (np * nk)).clamp(-1.0, 1.0)
}

/// Mean attribute similarity of `q` against a slot.
pub fn domain_score(q: &[f64], slot: &DomainSlot) -> f64 {
    let a = slot.similarities(q);
    a.iter().sum::<f64>() / a.len() as f64
}

/// Index of the highest score, earliest index on ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Differentiable similarities `a[N]` for `q[c]`, `w[N, c]`, `k[N, c]`.
/// Rows where `q ⊙ w_j` or `k_j` is zero are cut from the graph, giving a
/// similarity of exactly 0 with no gradient.
pub fn attribute_similarities(g: &mut Graph, q: Var, w: Var, k: Var) -> TensorResult<Var> {
    let ws = g.shape(w).to_vec();
    if ws.len() != 2 || g.shape(k) != ws.as_slice() || g.shape(q) != [ws[1]] {
        return Err(TensorError::Dimension {
            op: "attribute_similarity",
            lhs: g.shape(q).to_vec(),
            rhs: ws,
        });
    }
    let (n, c) = (ws[0], ws[1]);
    let p = g.mul_row(w, q)?;
    let keep: std::rc::Rc<[Option<usize>]> = (0..n)
        .map(|j| {
            let pn = dot(&g.data(p)[j * c..(j + 1) * c], &g.data(p)[j * c..(j + 1) * c]);
            let kn = dot(&g.data(k)[j * c..(j + 1) * c], &g.data(k)[j * c..(j + 1) * c]);
            (pn > 0.0 && kn > 0.0).then_some(j)
        })
        .collect();
    let p = g.gather_rows(p, c, keep.clone(), vec![n, c])?;
    let kk = g.gather_rows(k, c, keep, vec![n, c])?;
    let pn = g.normalize_rows(p);
    let kn = g.normalize_rows(kk);
    let prod = g.mul(pn, kn)?;
    let ones = g.constant(vec![c, 1], vec![1.0; c])?;
    let a = g.matmul(prod, ones)?;
    g.reshape(a, vec![n])
}

/// `Σ_j (1 − a^j)`.
pub fn attribute_loss(g: &mut Graph, q: Var, w: Var, k: Var) -> TensorResult<Var> {
    let a = attribute_similarities(g, q, w, k)?;
    let n = g.shape(a)[0] as f64;
    let s = g.sum(a);
    let neg = g.scale(s, -1.0);
    let offset = g.constant(vec![1], vec![n])?;
    g.add(neg, offset)
}

fn off_diagonal_square_sum(g: &mut Graph, x: Var) -> TensorResult<Var> {
    let n = g.shape(x)[0];
    let xn = g.normalize_rows(x);
    let gram = g.matmul_nt(xn, xn)?;
    let sq = g.mul(gram, gram)?;
    let mask: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 0.0 } else { 1.0 }).collect();
    let mask = g.constant(vec![n, n], mask)?;
    let off = g.mul(sq, mask)?;
    Ok(g.sum(off))
}

/// Squared pairwise cosines over ordered pairs `m ≠ n`, within `W` and within `K`.
pub fn diversity_loss(g: &mut Graph, w: Var, k: Var) -> TensorResult<Var> {
    let dw = off_diagonal_square_sum(g, w)?;
    let dk = off_diagonal_square_sum(g, k)?;
    g.add(dw, dk)
}

/// Ordered slots plus the index of the domain currently in training.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    pub config: PoolConfig,
    layer_dims: Vec<usize>,
    slots: Vec<DomainSlot>,
    training: Option<usize>,
}

impl PromptPool {
    pub fn new(config: PoolConfig, layer_dims: Vec<usize>) -> Self {
        PromptPool {
            config,
            layer_dims,
            slots: Vec::new(),
            training: None,
        }
    }

    /// Rebuilds a pool of completed (frozen) slots.
    pub fn from_slots(config: PoolConfig, layer_dims: Vec<usize>, mut slots: Vec<DomainSlot>) -> Result<Self> {
        for (i, s) in slots.iter_mut().enumerate() {
            if s.domain_id != i || s.prompts.len() != layer_dims.len() {
                return Err(PoolError::UnknownDomain { domain: s.domain_id, len: i });
            }
            for (p, &d) in s.prompts.iter().zip(&layer_dims) {
                if p.shape() != [config.prompt_len, d] {
                    return Err(TensorError::Dimension {
                        op: "prompt_pool",
                        lhs: p.shape().to_vec(),
                        rhs: vec![config.prompt_len, d],
                    }
                    .into());
                }
            }
            s.set_trainable(false);
        }
        Ok(PromptPool {
            config,
            layer_dims,
            slots,
            training: None,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn training(&self) -> Option<usize> {
        self.training
    }

    pub fn slots(&self) -> &[DomainSlot] {
        &self.slots
    }

    /// Appends a fresh trainable slot and marks it as in training.
    pub fn add_domain<R: Rng>(&mut self, rng: &mut R) -> Result<usize> {
        if let Some(d) = self.training {
            return Err(PoolError::DomainInTraining(d));
        }
        let id = self.slots.len();
        let mut slot = DomainSlot::new(rng, id, &self.config, &self.layer_dims);
        slot.set_trainable(true);
        self.slots.push(slot);
        self.training = Some(id);
        Ok(id)
    }

    /// Freezes the in-training slot for good.
    pub fn finish_domain(&mut self) -> Result<usize> {
        let d = self.training.take().ok_or(PoolError::NoDomainInTraining)?;
        self.slots[d].set_trainable(false);
        Ok(d)
    }

    pub fn slot(&self, domain: usize) -> Result<&DomainSlot> {
        self.slots.get(domain).ok_or(PoolError::UnknownDomain { domain, len: self.slots.len() })
    }

    /// Mutable access, only to the slot being trained.
    pub fn training_slot_mut(&mut self) -> Result<&mut DomainSlot> {
        let d = self.training.ok_or(PoolError::NoDomainInTraining)?;
        Ok(&mut self.slots[d])
    }

    pub fn prompts_for(&self, domain: usize, layer: usize) -> Result<&Tensor> {
        let slot = self.slot(domain)?;
        slot.prompts.get(layer).ok_or(PoolError::UnknownLayer {
            layer,
            layers: slot.prompts.len(),
        })
    }

    /// All of a domain's layer prompts, in layer order.
    pub fn layer_prompts(&self, domain: usize) -> Result<&[Tensor]> {
        Ok(&self.slot(domain)?.prompts)
    }

    pub fn scores(&self, q: &[f64]) -> Vec<f64> {
        self.slots.iter().map(|s| domain_score(q, s)).collect()
    }

    pub fn select_domain(&self, q: &[f64]) -> Result<usize> {
        argmax_first(&self.scores(q)).ok_or(PoolError::Empty)
    }

    /// Drops every slot after the first `n` (used to rebuild the pool as it
    /// stood after earlier domains).
    pub fn truncated(&self, n: usize) -> Result<PromptPool> {
        if n > self.slots.len() || self.training.is_some_and(|d| d < n) {
            return Err(PoolError::UnknownDomain { domain: n, len: self.slots.len() });
        }
        Ok(PromptPool {
            config: self.config.clone(),
            layer_dims: self.layer_dims.clone(),
            slots: self.slots[..n].to_vec(),
            training: None,
        })
    }

    /// Trainable parameters of one slot: `Σ_l L·d_l + 2·N·c`.
    pub fn slot_param_count(&self) -> usize {
        self.layer_dims.iter().map(|d| self.config.prompt_len * d).sum::<usize>()
            + 2 * self.config.attributes * self.config.embed_dim
    }
}

impl Module for PromptPool {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for s in &self.slots {
            s.visit(&join(prefix, &format!("slot{}", s.domain_id)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for s in &mut self.slots {
            let name = join(prefix, &format!("slot{}", s.domain_id));
            s.visit_mut(&name, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax_first(&[0.7, 0.9, 0.2]), Some(1));
        assert_eq!(argmax_first(&[0.5, 0.5]), Some(0));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn slot_lifecycle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pool = PromptPool::new(PoolConfig::default(), vec![32, 64]);
        assert_eq!(pool.add_domain(&mut rng).unwrap(), 0);
        assert_eq!(pool.add_domain(&mut rng), Err(PoolError::DomainInTraining(0)));
        assert!(pool.slot(0).unwrap().prototypes.requires_grad());
        pool.finish_domain().unwrap();
        assert!(!pool.slot(0).unwrap().prototypes.requires_grad());
        assert!(pool.training_slot_mut().is_err());
        assert_eq!(pool.add_domain(&mut rng).unwrap(), 1);
    }
}
