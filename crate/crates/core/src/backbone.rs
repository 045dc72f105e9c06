//! Miniature hierarchical windowed-attention transformer.
//!
//! The network is split in two: the *trunk* (patch embedding plus the first
//! stages) processes whole images, and the *tail* (last stage, pooling and the
//! final norm) refines per-person RoI maps into one embedding. Every
//! attention layer can take a prompt sequence that is prepended to each local
//! window's keys and values; only the outputs of the image tokens are kept,
//! so prompts never change spatial shapes.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{join, Linear, Module, Norm};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub stage_dims: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    /// Number of leading stages that form the trunk; the rest form the tail.
    pub trunk_stages: usize,
    pub input_size: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            patch_size: 4,
            stage_dims: vec![32, 64, 128],
            stage_depths: vec![2, 2, 2],
            heads: vec![2, 4, 8],
            window: 4,
            trunk_stages: 2,
            input_size: 64,
            mlp_ratio: 4,
        }
    }
}

fn geometry(detail: String) -> TensorError {
    TensorError::Geometry { op: "backbone", detail }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.stage_dims.len();
        if n == 0 || self.stage_depths.len() != n || self.heads.len() != n {
            return Err(geometry("stage lists must be non-empty and equally long".into()));
        }
        if self.trunk_stages == 0 || self.trunk_stages >= n {
            return Err(geometry("trunk must leave at least one tail stage".into()));
        }
        if self.stage_dims.windows(2).any(|w| w[1] <= w[0]) {
            return Err(geometry("stage dims must strictly increase".into()));
        }
        for (d, h) in self.stage_dims.iter().zip(&self.heads) {
            if *h == 0 || d % h != 0 {
                return Err(geometry(format!("dim {d} not divisible by {h} heads")));
            }
        }
        for s in 1..n {
            if self.stage_dims[s] != 2 * self.stage_dims[s - 1] {
                return Err(geometry("patch merging doubles the width between stages".into()));
            }
        }
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(geometry("input size not divisible by patch size".into()));
        }
        let mut extent = self.input_size / self.patch_size;
        for s in 0..n {
            if s > 0 {
                if extent % 2 != 0 {
                    return Err(geometry(format!("stage {s} cannot halve extent {extent}")));
                }
                extent /= 2;
            }
            if self.window == 0 || extent % self.window != 0 {
                return Err(geometry(format!("stage {s} grid {extent} not divisible by window {}", self.window)));
            }
        }
        Ok(())
    }

    /// Downsampling factor of the trunk output.
    pub fn trunk_stride(&self) -> usize {
        self.patch_size << (self.trunk_stages - 1)
    }

    pub fn trunk_dim(&self) -> usize {
        self.stage_dims[self.trunk_stages - 1]
    }

    pub fn embed_dim(&self) -> usize {
        *self.stage_dims.last().expect("validated")
    }

    /// Widths of every attention layer in execution order.
    pub fn layer_dims(&self) -> Vec<usize> {
        self.stage_dims
            .iter()
            .zip(&self.stage_depths)
            .flat_map(|(d, n)| std::iter::repeat(*d).take(*n))
            .collect()
    }

    /// Extent of the RoI map fed to the tail (the trunk output grid size).
    pub fn roi_size(&self) -> usize {
        self.input_size / self.trunk_stride()
    }
}

/// A `[H·W, C]` token grid recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct Grid {
    pub var: Var,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// Concrete feature map `[H, W, C]` with its downsampling factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureMap {
    pub grid: Tensor,
    pub stride: usize,
}

/// Pooled, normalised person embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonFeature {
    pub v: Tensor,
}

/// Row indices that reorder an `h × w` grid into consecutive windows.
pub fn partition_index(h: usize, w: usize, window: usize) -> Result<Vec<usize>> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(TensorError::Geometry {
            op: "window_partition",
            detail: format!("{h}x{w} grid with window {window}"),
        });
    }
    let mut idx = Vec::with_capacity(h * w);
    for wy in 0..h / window {
        for wx in 0..w / window {
            for y in 0..window {
                for x in 0..window {
                    idx.push((wy * window + y) * w + wx * window + x);
                }
            }
        }
    }
    Ok(idx)
}

/// Splits `grid[H, W, C]` into `(H/window)·(W/window)` tensors of `[window², C]`.
pub fn window_partition(grid: &Tensor, window: usize) -> Result<Vec<Tensor>> {
    let s = grid.shape();
    if s.len() != 3 {
        return Err(TensorError::Dimension {
            op: "window_partition",
            lhs: s.to_vec(),
            rhs: vec![window, window],
        });
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let idx = partition_index(h, w, window)?;
    let per = window * window;
    Ok(idx
        .chunks(per)
        .map(|rows| {
            let mut data = Vec::with_capacity(per * c);
            for &r in rows {
                data.extend_from_slice(&grid.data()[r * c..(r + 1) * c]);
            }
            Tensor::new(vec![per, c], data).expect("window shape")
        })
        .collect())
}

/// Inverse of [`window_partition`].
pub fn window_merge(windows: &[Tensor], h: usize, w: usize, window: usize) -> Result<Tensor> {
    let idx = partition_index(h, w, window)?;
    let per = window * window;
    if windows.len() * per != h * w {
        return Err(TensorError::Geometry {
            op: "window_merge",
            detail: format!("{} windows for a {h}x{w} grid", windows.len()),
        });
    }
    let c = windows.first().map(|t| t.shape()[1]).unwrap_or(0);
    let mut data = vec![0.0; h * w * c];
    for (wi, win) in windows.iter().enumerate() {
        if win.shape() != [per, c] {
            return Err(TensorError::Dimension {
                op: "window_merge",
                lhs: vec![per, c],
                rhs: win.shape().to_vec(),
            });
        }
        for t in 0..per {
            let r = idx[wi * per + t];
            data[r * c..(r + 1) * c].copy_from_slice(&win.data()[t * c..(t + 1) * c]);
        }
    }
    Tensor::new(vec![h, w, c], data)
}

/// Pre-norm transformer block with window attention and an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub norm1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        AttentionBlock {
            norm1: Norm::new(dim),
            q: Linear::new(rng, dim, dim, true),
            k: Linear::new(rng, dim, dim, true),
            v: Linear::new(rng, dim, dim, true),
            proj: Linear::new(rng, dim, dim, true),
            norm2: Norm::new(dim),
            fc1: Linear::new(rng, dim, dim * mlp_ratio, true),
            fc2: Linear::new(rng, dim * mlp_ratio, dim, true),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.input_dim()
    }

    /// `x + Proj(MHSA(LN(CAT(P, z)))[L:])` for every window `z` of the grid.
    ///
    /// Prompt keys and values are computed once and shared by all windows, so
    /// the prompt gradient is the sum of the per-window contributions.
    pub fn attention(&self, g: &mut Graph, x: Grid, window: usize, prompts: Option<Var>) -> Result<Var> {
        let c = x.c;
        if c != self.dim() {
            return Err(TensorError::Dimension {
                op: "window_attention",
                lhs: vec![x.h * x.w, c],
                rhs: vec![self.dim()],
            });
        }
        self.check_prompt_width(g, prompts, c)?;
        let order = partition_index(x.h, x.w, window)?;
        let n_tokens = x.h * x.w;
        let xn = self.norm1.forward(g, x.var)?;
        let order_rc: Rc<[Option<usize>]> = order.iter().map(|&i| Some(i)).collect();
        let xw = g.gather_rows(xn, c, order_rc, vec![n_tokens, c])?;
        let o = self.mix_windows(g, xw, window * window, prompts)?;
        // back from window order to grid order
        let mut inverse = vec![None; n_tokens];
        for (pos, &src) in order.iter().enumerate() {
            inverse[src] = Some(pos);
        }
        let o = g.gather_rows(o, c, inverse.into(), vec![n_tokens, c])?;
        g.add(x.var, o)
    }

    /// Prompted attention treating the whole sequence `z[n, C]` as one window.
    pub fn sequence_attention(&self, g: &mut Graph, z: Var, prompts: Option<Var>) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.dim() {
            return Err(TensorError::Dimension {
                op: "window_attention",
                lhs: s,
                rhs: vec![self.dim()],
            });
        }
        self.check_prompt_width(g, prompts, s[1])?;
        let zn = self.norm1.forward(g, z)?;
        let o = self.mix_windows(g, zn, s[0], prompts)?;
        g.add(z, o)
    }

    fn check_prompt_width(&self, g: &Graph, prompts: Option<Var>, c: usize) -> Result<()> {
        if let Some(p) = prompts {
            let ps = g.shape(p);
            if ps.len() != 2 || ps[1] != c {
                return Err(TensorError::Dimension {
                    op: "prompted_window_attention",
                    lhs: vec![c],
                    rhs: ps.to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Multi-head attention over consecutive windows of `per` normalised
    /// tokens, then the output projection. Prompt keys and values are
    /// computed once and prepended to every window; only image-token queries
    /// are formed, which is the `[L:]` slice.
    fn mix_windows(&self, g: &mut Graph, xw: Var, per: usize, prompts: Option<Var>) -> Result<Var> {
        let c = self.dim();
        let n_windows = g.shape(xw)[0] / per;
        let heads = self.heads;
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(g, xw)?;
        let k = self.k.forward(g, xw)?;
        let v = self.v.forward(g, xw)?;
        let prompt_kv = match prompts {
            Some(p) if g.shape(p)[0] > 0 => {
                let pn = self.norm1.forward(g, p)?;
                Some((self.k.forward(g, pn)?, self.v.forward(g, pn)?))
            }
            _ => None,
        };

        let mut outs = Vec::with_capacity(n_windows);
        for wi in 0..n_windows {
            let (qw, mut kw, mut vw) = if n_windows == 1 {
                (q, k, v)
            } else {
                (g.slice(q, 0, wi * per, per)?, g.slice(k, 0, wi * per, per)?, g.slice(v, 0, wi * per, per)?)
            };
            if let Some((kp, vp)) = prompt_kv {
                kw = g.concat(&[kp, kw], 0)?;
                vw = g.concat(&[vp, vw], 0)?;
            }
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (qw, kw, vw)
                } else {
                    (g.slice(qw, 1, h * dh, dh)?, g.slice(kw, 1, h * dh, dh)?, g.slice(vw, 1, h * dh, dh)?)
                };
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, scale);
                let a = g.softmax(s);
                head_outs.push(g.matmul(a, vh)?);
            }
            outs.push(if heads == 1 { head_outs[0] } else { g.concat(&head_outs, 1)? });
        }
        let o = if n_windows == 1 { outs[0] } else { g.concat(&outs, 0)? };
        self.proj.forward(g, o)
    }

    pub fn mlp(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.norm2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }

    pub fn forward(&self, g: &mut Graph, x: Grid, window: usize, prompts: Option<Var>) -> Result<Grid> {
        let y = self.attention(g, x, window, prompts)?;
        let y = self.mlp(g, y)?;
        Ok(Grid { var: y, ..x })
    }
}

impl Module for AttentionBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Single-window prompted attention: `z[window², C]` with optional prompts
/// `[L, C]`; returns `[window², C]` including the residual path.
pub fn prompted_window_attention(
    g: &mut Graph,
    block: &AttentionBlock,
    z: Var,
    window: usize,
    prompts: Option<Var>,
) -> Result<Var> {
    let s = g.shape(z).to_vec();
    if s.len() != 2 || s[0] != window * window {
        return Err(TensorError::Dimension {
            op: "prompted_window_attention",
            lhs: s,
            rhs: vec![window * window],
        });
    }
    let grid = Grid { var: z, h: window, w: window, c: s[1] };
    block.attention(g, grid, window, prompts)
}

/// 2×2 neighbourhood concatenation, norm, and a linear map to twice the width.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMerge {
    pub norm: Norm,
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        PatchMerge {
            norm: Norm::new(4 * dim),
            reduction: Linear::new(rng, 4 * dim, 2 * dim, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Grid) -> Result<Grid> {
        if x.h % 2 != 0 || x.w % 2 != 0 {
            return Err(TensorError::Geometry {
                op: "patch_merge",
                detail: format!("odd grid {}x{}", x.h, x.w),
            });
        }
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut idx = Vec::with_capacity(x.h * x.w);
        for i in 0..oh {
            for j in 0..ow {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    idx.push(Some((2 * i + dy) * x.w + 2 * j + dx));
                }
            }
        }
        let y = g.gather_rows(x.var, x.c, idx.into(), vec![oh * ow, 4 * x.c])?;
        let y = self.norm.forward(g, y)?;
        let y = self.reduction.forward(g, y)?;
        Ok(Grid { var: y, h: oh, w: ow, c: 2 * x.c })
    }
}

impl Module for PatchMerge {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.reduction.visit(&join(prefix, "reduction"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.reduction.visit_mut(&join(prefix, "reduction"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<AttentionBlock>,
}

impl Module for Stage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(m) = &self.merge {
            m.visit(&join(prefix, "merge"), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(m) = &mut self.merge {
            m.visit_mut(&join(prefix, "merge"), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

/// Per-layer prompts, indexed by global attention-layer number.
pub type LayerPrompts<'a> = Option<&'a [Tensor]>;

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_embed: Linear,
    pub stages: Vec<Stage>,
    pub norm: Norm,
}

impl Backbone {
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let p = config.patch_size;
        let patch_embed = Linear::new(rng, p * p * 3, config.stage_dims[0], true);
        let mut stages = Vec::new();
        for (s, (&dim, &depth)) in config.stage_dims.iter().zip(&config.stage_depths).enumerate() {
            let merge = (s > 0).then(|| PatchMerge::new(rng, config.stage_dims[s - 1]));
            let blocks = (0..depth)
                .map(|_| AttentionBlock::new(rng, dim, config.heads[s], config.mlp_ratio))
                .collect();
            stages.push(Stage { merge, blocks });
        }
        let norm = Norm::new(config.embed_dim());
        Ok(Backbone { config, patch_embed, stages, norm })
    }

    pub fn num_layers(&self) -> usize {
        self.config.stage_depths.iter().sum()
    }

    fn first_layer(&self, stage: usize) -> usize {
        self.config.stage_depths[..stage].iter().sum()
    }

    fn check_prompts(&self, prompts: LayerPrompts) -> Result<()> {
        if let Some(p) = prompts {
            let dims = self.config.layer_dims();
            if p.len() != dims.len() {
                return Err(TensorError::Geometry {
                    op: "prompts",
                    detail: format!("{} prompt tensors for {} layers", p.len(), dims.len()),
                });
            }
            for (t, d) in p.iter().zip(dims) {
                if t.shape().len() != 2 || t.shape()[1] != d {
                    return Err(TensorError::Dimension {
                        op: "prompts",
                        lhs: t.shape().to_vec(),
                        rhs: vec![d],
                    });
                }
            }
        }
        Ok(())
    }

    /// Image `[H₀, W₀, 3]` → patch tokens `[H₀/p · W₀/p, C₀]`.
    pub fn patch_embed(&self, g: &mut Graph, image: Var) -> Result<Grid> {
        let s = g.shape(image).to_vec();
        let p = self.config.patch_size;
        if s.len() != 3 || s[2] != 3 || s[0] % p != 0 || s[1] % p != 0 {
            return Err(TensorError::Geometry {
                op: "patch_embed",
                detail: format!("image {s:?} with patch size {p}"),
            });
        }
        let (h, w) = (s[0] / p, s[1] / p);
        let mut idx = Vec::with_capacity(s[0] * s[1]);
        for i in 0..h {
            for j in 0..w {
                for y in 0..p {
                    for x in 0..p {
                        idx.push(Some((i * p + y) * s[1] + j * p + x));
                    }
                }
            }
        }
        let patches = g.gather_rows(image, 3, idx.into(), vec![h * w, p * p * 3])?;
        let var = self.patch_embed.forward(g, patches)?;
        Ok(Grid { var, h, w, c: self.config.stage_dims[0] })
    }

    fn run_stage(&self, g: &mut Graph, s: usize, mut x: Grid, prompts: LayerPrompts) -> Result<Grid> {
        let stage = &self.stages[s];
        if let Some(m) = &stage.merge {
            x = m.forward(g, x)?;
        }
        let first = self.first_layer(s);
        for (i, block) in stage.blocks.iter().enumerate() {
            let p = prompts.map(|p| g.param(&p[first + i]));
            x = block.forward(g, x, self.config.window, p)?;
        }
        Ok(x)
    }

    /// Patch embedding and the trunk stages; output at the trunk stride.
    pub fn trunk(&self, g: &mut Graph, image: Var, prompts: LayerPrompts) -> Result<Grid> {
        self.check_prompts(prompts)?;
        let mut x = self.patch_embed(g, image)?;
        for s in 0..self.config.trunk_stages {
            x = self.run_stage(g, s, x, prompts)?;
        }
        Ok(x)
    }

    /// Tail stages over an RoI map, global average pooling, final norm.
    pub fn tail(&self, g: &mut Graph, roi: Grid, prompts: LayerPrompts) -> Result<Var> {
        self.check_prompts(prompts)?;
        if roi.c != self.config.trunk_dim() {
            return Err(TensorError::Dimension {
                op: "tail",
                lhs: vec![roi.h, roi.w, roi.c],
                rhs: vec![self.config.trunk_dim()],
            });
        }
        let mut x = roi;
        for s in self.config.trunk_stages..self.stages.len() {
            x = self.run_stage(g, s, x, prompts)?;
        }
        let pooled = g.mean_rows(x.var)?;
        self.norm.forward(g, pooled)
    }

    pub fn trunk_forward(&self, image: &Tensor, prompts: LayerPrompts) -> Result<ImageFeatureMap> {
        let mut g = Graph::no_grad();
        let img = g.param(image);
        let out = self.trunk(&mut g, img, prompts)?;
        let grid = g.value(out.var).reshape(vec![out.h, out.w, out.c])?;
        Ok(ImageFeatureMap { grid, stride: self.config.trunk_stride() })
    }

    pub fn tail_forward(&self, roi: &Tensor, prompts: LayerPrompts) -> Result<PersonFeature> {
        let s = roi.shape();
        if s.len() != 3 {
            return Err(TensorError::Dimension {
                op: "tail",
                lhs: s.to_vec(),
                rhs: vec![self.config.trunk_dim()],
            });
        }
        let mut g = Graph::no_grad();
        let var = g.constant(vec![s[0] * s[1], s[2]], roi.data().to_vec())?;
        let v = self.tail(&mut g, Grid { var, h: s[0], w: s[1], c: s[2] }, prompts)?;
        Ok(PersonFeature { v: g.value(v) })
    }

    /// Global image descriptor from the unprompted network. Pure function of
    /// the (frozen) weights, so it never participates in training.
    pub fn query_encode(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad();
        let img = g.param(image);
        let grid = self.trunk(&mut g, img, None)?;
        let v = self.tail(&mut g, grid, None)?;
        Ok(g.data(v).to_vec())
    }
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_config_is_valid() {
        let c = BackboneConfig::default();
        c.validate().unwrap();
        assert_eq!(c.trunk_stride(), 8);
        assert_eq!(c.roi_size(), 8);
        assert_eq!(c.layer_dims(), vec![32, 32, 64, 64, 128, 128]);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = BackboneConfig::default();
        c.heads = vec![3, 4, 8];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::default();
        c.input_size = 48;
        assert!(c.validate().is_err());
    }

    #[test]
    fn partition_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = Tensor::new(vec![8, 8, 3], (0..192).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let wins = window_partition(&grid, 4).unwrap();
        assert_eq!(wins.len(), 4);
        assert!(wins.iter().all(|w| w.shape() == [16, 3]));
        assert_eq!(window_merge(&wins, 8, 8, 4).unwrap(), grid);

        let small = Tensor::new(vec![4, 4, 2], (0..32).map(|v| v as f64).collect()).unwrap();
        let one = window_partition(&small, 4).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].data(), small.data());

        let odd = Tensor::zeros(&[6, 8, 1]);
        assert!(window_partition(&odd, 4).is_err());
    }
}
