//! Person localisation: a simple feature pyramid over the trunk output, a
//! single-stage center-based head, NMS, the detection loss, and RoIAlign.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Grid, ImageFeatureMap};
use crate::nn::{join, uniform_fan_in, Module};
use crate::tensor::{conv2d, deconv2d, ConvGeometry, Graph, Result, Tensor, TensorError, Var};

/// Axis-aligned box in input-image pixels with a confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2, score: 1.0 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    /// Clips to `[0, size]²` keeping at least one pixel of extent.
    pub fn clipped(&self, size: f64) -> BBox {
        let x1 = self.x1.clamp(0.0, size - 1.0);
        let y1 = self.y1.clamp(0.0, size - 1.0);
        BBox {
            x1,
            y1,
            x2: self.x2.clamp(x1 + 1.0, size),
            y2: self.y2.clamp(y1 + 1.0, size),
            score: self.score,
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub channels: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub roi_size: usize,
    pub roi_sampling: usize,
    /// BCE weight of positive cells relative to negatives.
    #[serde(default = "unit_weight")]
    pub positive_weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            channels: 64,
            score_threshold: 0.5,
            nms_iou: 0.5,
            max_detections: 32,
            roi_size: 8,
            roi_sampling: 2,
            positive_weight: 3.0,
        }
    }
}

/// Number of outputs per cell: objectness logit and four box offsets.
pub const HEAD_OUTPUTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub geometry: ConvGeometry,
    pub transposed: bool,
}

impl ConvLayer {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, geometry: ConvGeometry, transposed: bool) -> Self {
        let fan_in = geometry.kernel * geometry.kernel * cin;
        ConvLayer {
            kernel: uniform_fan_in(rng, &[fan_in, cout], fan_in),
            bias: Tensor::zeros(&[cout]),
            geometry,
            transposed,
        }
    }

    /// `x` is a `[H·W, C]` grid; returns `[H'·W', Cout]`.
    pub fn forward(&self, g: &mut Graph, x: Grid) -> Result<Grid> {
        let xv = g.reshape(x.var, vec![x.h, x.w, x.c])?;
        let k = g.param(&self.kernel);
        let b = g.param(&self.bias);
        let y = if self.transposed {
            deconv2d(g, xv, k, Some(b), self.geometry)?
        } else {
            conv2d(g, xv, k, Some(b), self.geometry)?
        };
        let s = g.shape(y).to_vec();
        let var = g.reshape(y, vec![s[0] * s[1], s[2]])?;
        Ok(Grid { var, h: s[0], w: s[1], c: s[2] })
    }
}

impl Module for ConvLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "kernel"), &self.kernel);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "kernel"), &mut self.kernel);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Multi-scale maps, coarsest first, with their strides.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    pub levels: Vec<Grid>,
    pub strides: Vec<usize>,
}

/// Concrete pyramid maps (`[H, W, C]` each).
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidMaps {
    pub maps: Vec<Tensor>,
    pub strides: Vec<usize>,
}

/// Pyramid plus per-level heads. Levels are at 2×, 1× and ½× the trunk
/// stride, produced by a strided conv, a same-scale conv and a deconv.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionNet {
    pub config: DetectorConfig,
    pub down: ConvLayer,
    pub same: ConvLayer,
    pub up: ConvLayer,
    /// Per-level 3×3 conv + GELU feeding the output conv.
    pub hidden: Vec<ConvLayer>,
    pub heads: Vec<ConvLayer>,
    pub trunk_stride: usize,
}

impl DetectionNet {
    pub fn new<R: Rng>(rng: &mut R, config: DetectorConfig, trunk_dim: usize, trunk_stride: usize) -> Result<Self> {
        if trunk_stride < 2 || trunk_stride % 2 != 0 {
            return Err(TensorError::Geometry {
                op: "detection",
                detail: format!("trunk stride {trunk_stride} must be even"),
            });
        }
        let c = config.channels;
        let down = ConvLayer::new(rng, trunk_dim, c, ConvGeometry::new(3, 2, 1), false);
        let same = ConvLayer::new(rng, trunk_dim, c, ConvGeometry::new(3, 1, 1), false);
        let up = ConvLayer::new(rng, trunk_dim, c, ConvGeometry::new(2, 2, 0), true);
        let hidden = (0..3)
            .map(|_| ConvLayer::new(rng, c, c, ConvGeometry::new(3, 1, 1), false))
            .collect();
        let heads = (0..3)
            .map(|_| ConvLayer::new(rng, c, HEAD_OUTPUTS, ConvGeometry::new(3, 1, 1), false))
            .collect();
        Ok(DetectionNet {
            config,
            down,
            same,
            up,
            hidden,
            heads,
            trunk_stride,
        })
    }

    pub fn strides(&self) -> Vec<usize> {
        vec![self.trunk_stride * 2, self.trunk_stride, self.trunk_stride / 2]
    }

    pub fn pyramid(&self, g: &mut Graph, trunk_out: Grid) -> Result<PyramidFeatures> {
        let mut levels = Vec::with_capacity(3);
        for layer in [&self.down, &self.same, &self.up] {
            let y = layer.forward(g, trunk_out)?;
            let var = g.gelu(y.var);
            levels.push(Grid { var, ..y });
        }
        Ok(PyramidFeatures { levels, strides: self.strides() })
    }

    /// Head outputs `[cells, 5]` per level.
    pub fn head(&self, g: &mut Graph, pyramid: &PyramidFeatures) -> Result<Vec<Var>> {
        pyramid
            .levels
            .iter()
            .zip(self.hidden.iter().zip(&self.heads))
            .map(|(lvl, (hidden, head))| {
                let h = hidden.forward(g, *lvl)?;
                let var = g.gelu(h.var);
                head.forward(g, Grid { var, ..h }).map(|o| o.var)
            })
            .collect()
    }

    /// Concrete pyramid for a trunk feature map.
    pub fn simple_feature_pyramid(&self, trunk_out: &ImageFeatureMap) -> Result<PyramidMaps> {
        let s = trunk_out.grid.shape();
        let mut g = Graph::no_grad();
        let var = g.constant(vec![s[0] * s[1], s[2]], trunk_out.grid.data().to_vec())?;
        let p = self.pyramid(&mut g, Grid { var, h: s[0], w: s[1], c: s[2] })?;
        let maps = p
            .levels
            .iter()
            .map(|l| g.value(l.var).reshape(vec![l.h, l.w, l.c]))
            .collect::<Result<Vec<_>>>()?;
        Ok(PyramidMaps { maps, strides: p.strides })
    }

    /// Runs pyramid, head and decoding on a trunk feature map.
    pub fn detect(&self, trunk_out: &ImageFeatureMap, image_size: usize) -> Result<Vec<BBox>> {
        let s = trunk_out.grid.shape();
        let mut g = Graph::no_grad();
        let var = g.constant(vec![s[0] * s[1], s[2]], trunk_out.grid.data().to_vec())?;
        let p = self.pyramid(&mut g, Grid { var, h: s[0], w: s[1], c: s[2] })?;
        let outs = self.head(&mut g, &p)?;
        let raw: Vec<(&[f64], usize, usize, usize)> = outs
            .iter()
            .zip(&p.levels)
            .zip(&p.strides)
            .map(|((o, l), s)| (g.data(*o), l.h, l.w, *s))
            .collect();
        Ok(decode(&raw, &self.config, image_size))
    }
}

impl Module for DetectionNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.down.visit(&join(prefix, "pyramid.down"), f);
        self.same.visit(&join(prefix, "pyramid.same"), f);
        self.up.visit(&join(prefix, "pyramid.up"), f);
        for (i, (hd, h)) in self.hidden.iter().zip(&self.heads).enumerate() {
            hd.visit(&join(prefix, &format!("head{i}.hidden")), f);
            h.visit(&join(prefix, &format!("head{i}.out")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.down.visit_mut(&join(prefix, "pyramid.down"), f);
        self.same.visit_mut(&join(prefix, "pyramid.same"), f);
        self.up.visit_mut(&join(prefix, "pyramid.up"), f);
        for (i, (hd, h)) in self.hidden.iter_mut().zip(&mut self.heads).enumerate() {
            hd.visit_mut(&join(prefix, &format!("head{i}.hidden")), f);
            h.visit_mut(&join(prefix, &format!("head{i}.out")), f);
        }
    }
}

const MAX_LOG_SIZE: f64 = 4.0;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Box for cell `(i, j)` of a level with stride `s` from raw offsets.
pub fn decode_cell(i: usize, j: usize, stride: usize, offsets: &[f64]) -> BBox {
    let s = stride as f64;
    let cx = (j as f64 + 0.5 + offsets[0]) * s;
    let cy = (i as f64 + 0.5 + offsets[1]) * s;
    let w = s * offsets[2].min(MAX_LOG_SIZE).exp();
    let h = s * offsets[3].min(MAX_LOG_SIZE).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Regression target for a ground-truth box assigned to cell `(i, j)`.
pub fn encode_box(b: &BBox, i: usize, j: usize, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    let (cx, cy) = b.center();
    [
        cx / s - (j as f64 + 0.5),
        cy / s - (i as f64 + 0.5),
        (b.width() / s).ln(),
        (b.height() / s).ln(),
    ]
}

/// Pyramid level (index into coarsest-first strides) responsible for a box.
pub fn assign_level(b: &BBox, strides: &[usize]) -> usize {
    let m = b.width().max(b.height());
    // level with stride s covers max sides in [1.5s, 3s)
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (l, &s) in strides.iter().enumerate() {
        let err = (m / (2.25 * s as f64)).ln().abs();
        if err < best_err {
            best = l;
            best_err = err;
        }
    }
    best
}

/// Cell containing the box center on a level.
pub fn center_cell(b: &BBox, stride: usize, h: usize, w: usize) -> (usize, usize) {
    let (cx, cy) = b.center();
    let s = stride as f64;
    let i = ((cy / s).floor().max(0.0) as usize).min(h - 1);
    let j = ((cx / s).floor().max(0.0) as usize).min(w - 1);
    (i, j)
}

/// Greedy NMS. Candidates are ordered by score desc, then x1 asc, then y1 asc.
pub fn nms(mut boxes: Vec<BBox>, iou_threshold: f64, max_keep: usize) -> Vec<BBox> {
    boxes.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.x1.total_cmp(&b.x1))
            .then(a.y1.total_cmp(&b.y1))
    });
    let mut keep: Vec<BBox> = Vec::new();
    for b in boxes {
        if keep.len() >= max_keep {
            break;
        }
        if keep.iter().all(|k| iou(k, &b) <= iou_threshold) {
            keep.push(b);
        }
    }
    keep
}

/// Threshold, decode and suppress raw head outputs
/// `(data[cells·5], h, w, stride)` per level.
pub fn decode(levels: &[(&[f64], usize, usize, usize)], cfg: &DetectorConfig, image_size: usize) -> Vec<BBox> {
    let mut cands = Vec::new();
    for &(data, h, w, stride) in levels {
        for i in 0..h {
            for j in 0..w {
                let cell = &data[(i * w + j) * HEAD_OUTPUTS..(i * w + j + 1) * HEAD_OUTPUTS];
                let score = sigmoid(cell[0]);
                if score > cfg.score_threshold {
                    let mut b = decode_cell(i, j, stride, &cell[1..]).clipped(image_size as f64);
                    b.score = score;
                    cands.push(b);
                }
            }
        }
    }
    nms(cands, cfg.nms_iou, cfg.max_detections)
}

/// Classification and regression terms of the detection loss.
#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// `L_cls + L_reg`: BCE on objectness over all cells with one positive (the
/// center cell on the assigned level) per ground-truth box, plus smooth-L1 on
/// the positives' offsets. Both are normalised by the positive count
/// (at least one), so an empty scene gives BCE over negatives only.
pub fn detection_loss(
    g: &mut Graph,
    head_out: &[Var],
    pyramid: &PyramidFeatures,
    ground_truth: &[BBox],
    positive_weight: f64,
) -> Result<DetectionLoss> {
    let strides = &pyramid.strides;
    let mut positives: Vec<Vec<(usize, [f64; 4])>> = vec![Vec::new(); head_out.len()];
    for b in ground_truth {
        if !b.is_valid() {
            return Err(TensorError::Degenerate {
                op: "detection_loss",
                detail: format!("invalid ground-truth box {b:?}"),
            });
        }
        let l = assign_level(b, strides);
        let lvl = &pyramid.levels[l];
        let (i, j) = center_cell(b, strides[l], lvl.h, lvl.w);
        let cell = i * lvl.w + j;
        let target = encode_box(b, i, j, strides[l]);
        match positives[l].iter_mut().find(|(c, _)| *c == cell) {
            Some(slot) => slot.1 = target,
            None => positives[l].push((cell, target)),
        }
    }
    let npos: usize = positives.iter().map(|p| p.len()).sum();
    let norm = 1.0 / npos.max(1) as f64;

    let mut cls_terms = Vec::new();
    let mut reg_terms = Vec::new();
    for (l, &out) in head_out.iter().enumerate() {
        let cells = pyramid.levels[l].h * pyramid.levels[l].w;
        let logits = g.slice(out, 1, 0, 1)?;
        let mut target = vec![0.0; cells];
        let mut weight = vec![norm; cells];
        for (c, _) in &positives[l] {
            target[*c] = 1.0;
            weight[*c] = norm * positive_weight;
        }
        cls_terms.push(g.bce_with_logits(logits, target, weight)?);
        if !positives[l].is_empty() {
            let idx: Rc<[Option<usize>]> = positives[l].iter().map(|(c, _)| Some(*c)).collect();
            let n = idx.len();
            let rows = g.gather_rows(out, HEAD_OUTPUTS, idx, vec![n, HEAD_OUTPUTS])?;
            let offsets = g.slice(rows, 1, 1, 4)?;
            let t: Vec<f64> = positives[l].iter().flat_map(|(_, t)| t.iter().copied()).collect();
            let r = g.smooth_l1(offsets, t)?;
            reg_terms.push(g.scale(r, norm));
        }
    }
    let cls = sum_terms(g, &cls_terms)?;
    let reg = if reg_terms.is_empty() {
        g.constant(vec![1], vec![0.0])?
    } else {
        sum_terms(g, &reg_terms)?
    };
    let total = g.add(cls, reg)?;
    Ok(DetectionLoss { total, cls, reg })
}

pub(crate) fn sum_terms(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms.first().ok_or(TensorError::Geometry {
        op: "sum_terms",
        detail: "empty".into(),
    })?;
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Bilinear taps at continuous feature coordinates `(y, x)` (cell centers at
/// integers), zero outside `[-1, H] × [-1, W]` and clamped at the border.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, weight: f64, out: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (y0, y1, ly) = if y as usize >= h - 1 {
        (h - 1, h - 1, 0.0)
    } else {
        let y0 = y.floor() as usize;
        (y0, y0 + 1, y - y0 as f64)
    };
    let (x0, x1, lx) = if x as usize >= w - 1 {
        (w - 1, w - 1, 0.0)
    } else {
        let x0 = x.floor() as usize;
        (x0, x0 + 1, x - x0 as f64)
    };
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (idx, wt) in [
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ] {
        if wt != 0.0 {
            out.push((idx, wt * weight));
        }
    }
}

/// Interpolation taps for RoIAlign of `b` (image pixels) over an `h × w`
/// map of the given stride: `out × out` bins, `sampling²` regular samples
/// per bin, averaged. Boxes narrower than one pixel are widened to one.
pub fn roi_align_taps(h: usize, w: usize, stride: usize, b: &BBox, out: usize, sampling: usize) -> Vec<Vec<(usize, f64)>> {
    let s = stride as f64;
    let bw = b.width().max(1.0);
    let bh = b.height().max(1.0);
    let x0 = b.x1 / s - 0.5;
    let y0 = b.y1 / s - 0.5;
    let bin_w = bw / s / out as f64;
    let bin_h = bh / s / out as f64;
    let weight = 1.0 / (sampling * sampling) as f64;
    let mut taps = Vec::with_capacity(out * out);
    for py in 0..out {
        for px in 0..out {
            let mut cell = Vec::with_capacity(4 * sampling * sampling);
            for iy in 0..sampling {
                let y = y0 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sampling as f64;
                for ix in 0..sampling {
                    let x = x0 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sampling as f64;
                    bilinear_taps(y, x, h, w, weight, &mut cell);
                }
            }
            taps.push(cell);
        }
    }
    taps
}

/// RoIAlign on a graph grid; returns an `out × out` grid with the same width.
pub fn roi_align_var(g: &mut Graph, feature: Grid, stride: usize, b: &BBox, out: usize, sampling: usize) -> Result<Grid> {
    let taps: Rc<[Vec<(usize, f64)>]> = roi_align_taps(feature.h, feature.w, stride, b, out, sampling).into();
    let var = g.mix_rows(feature.var, feature.c, taps, vec![out * out, feature.c])?;
    Ok(Grid { var, h: out, w: out, c: feature.c })
}

/// RoIAlign on a concrete map; returns `[out, out, C]`.
pub fn roi_align(feature: &ImageFeatureMap, b: &BBox, out: usize, sampling: usize) -> Result<Tensor> {
    let s = feature.grid.shape();
    let finite = [b.x1, b.y1, b.x2, b.y2].iter().all(|v| v.is_finite());
    if s.len() != 3 || !finite {
        return Err(TensorError::Geometry {
            op: "roi_align",
            detail: format!("box {b:?} on map {s:?}"),
        });
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let taps = roi_align_taps(h, w, feature.stride, b, out, sampling);
    let src = feature.grid.data();
    let mut data = vec![0.0; out * out * c];
    for (r, cell) in taps.iter().enumerate() {
        for &(i, wt) in cell {
            for ch in 0..c {
                data[r * c + ch] += wt * src[i * c + ch];
            }
        }
    }
    Tensor::new(vec![out, out, c], data)
}
