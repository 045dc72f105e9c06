//! The person search network: backbone plus detection sub-network, with the
//! per-scene training objective and inference path.

use rand::Rng;

use super::config::RunConfig;
use super::Result;
use crate::backbone::{Backbone, Grid, ImageFeatureMap, LayerPrompts};
use crate::data::SceneSample;
use crate::detection::{detection_loss, roi_align, roi_align_var, BBox, DetectionNet};
use crate::nn::{join, Module};
use crate::oim::{OimState, PersonLabel};
use crate::prompt_pool::{attribute_loss, diversity_loss};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub detector: DetectionNet,
}

/// Boxes and embeddings of one image under one prompt set.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInference {
    pub detections: Vec<BBox>,
    pub features: Vec<Vec<f64>>,
    /// Embeddings of the ground-truth boxes, when requested.
    pub gt_features: Vec<Vec<f64>>,
}

/// Query embedding and matching parameters for the attribute terms.
pub struct Matching<'a> {
    pub query: &'a [f64],
    pub projections: &'a Tensor,
    pub prototypes: &'a Tensor,
    pub lambda_attr: f64,
    pub lambda_div: f64,
}

/// Scalar parts of one scene's objective; `total` lives on the graph.
#[derive(Debug, Clone)]
pub struct SceneLoss {
    pub total: Var,
    pub det: f64,
    pub oim: f64,
    pub attr: f64,
    pub div: f64,
    /// Embeddings of the ground-truth boxes, for the OIM memory update.
    pub features: Vec<Vec<f64>>,
}

impl Model {
    pub fn new<R: Rng>(config: &RunConfig, rng: &mut R) -> Result<Self> {
        let backbone = Backbone::new(config.backbone.clone(), rng)?;
        let detector = DetectionNet::new(
            rng,
            config.detector.clone(),
            config.backbone.trunk_dim(),
            config.backbone.trunk_stride(),
        )?;
        Ok(Model { backbone, detector })
    }

    pub fn image_size(&self) -> usize {
        self.backbone.config.input_size
    }

    fn embed(&self, map: &ImageFeatureMap, b: &BBox, prompts: LayerPrompts) -> Result<Vec<f64>> {
        let cfg = &self.detector.config;
        let roi = roi_align(map, b, cfg.roi_size, cfg.roi_sampling)?;
        Ok(self.backbone.tail_forward(&roi, prompts)?.v.into_data())
    }

    /// Detects people and embeds each detection; with `gt`, also embeds the
    /// given ground-truth boxes.
    pub fn infer(&self, image: &Tensor, prompts: LayerPrompts, gt: Option<&[BBox]>) -> Result<SceneInference> {
        let map = self.backbone.trunk_forward(image, prompts)?;
        let detections = self.detector.detect(&map, self.image_size())?;
        let features = detections
            .iter()
            .map(|b| self.embed(&map, b, prompts))
            .collect::<Result<Vec<_>>>()?;
        let gt_features = gt
            .unwrap_or(&[])
            .iter()
            .map(|b| self.embed(&map, b, prompts))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneInference { detections, features, gt_features })
    }

    /// Records `ℒ_det + ℒ_oim (+ λ₁ℒ_attr + λ₂ℒ_div)` for one scene under
    /// `prompts`, scaled by `weight`. Person features come from RoIAlign on
    /// the ground-truth boxes.
    pub fn scene_objective(
        &self,
        g: &mut Graph,
        scene: &SceneSample,
        prompts: &[Tensor],
        oim: &OimState,
        labels: &[PersonLabel],
        matching: Option<&Matching>,
        weight: f64,
    ) -> Result<SceneLoss> {
        let image = g.param(&scene.image);
        let trunk = self.backbone.trunk(g, image, Some(prompts))?;
        let pyr = self.detector.pyramid(g, trunk)?;
        let heads = self.detector.head(g, &pyr)?;
        let det = detection_loss(g, &heads, &pyr, &scene.boxes, self.detector.config.positive_weight)?.total;
        let mut terms = vec![det];

        let cfg = &self.detector.config;
        let stride = self.backbone.config.trunk_stride();
        let mut rows = Vec::with_capacity(scene.boxes.len());
        for b in &scene.boxes {
            let roi: Grid = roi_align_var(g, trunk, stride, b, cfg.roi_size, cfg.roi_sampling)?;
            rows.push(self.backbone.tail(g, roi, Some(prompts))?);
        }
        let (oim_loss, features) = if rows.is_empty() {
            (None, Vec::new())
        } else {
            let d = self.backbone.config.embed_dim();
            let flat = g.concat(&rows, 0)?;
            let feats = g.reshape(flat, vec![rows.len(), d])?;
            let l = oim.loss(g, feats, labels)?;
            terms.push(l);
            (Some(l), rows.iter().map(|r| g.data(*r).to_vec()).collect())
        };

        let (mut attr, mut div) = (0.0, 0.0);
        if let Some(m) = matching {
            let q = g.constant(vec![m.query.len()], m.query.to_vec())?;
            let w = g.param(m.projections);
            let k = g.param(m.prototypes);
            let la = attribute_loss(g, q, w, k)?;
            let ld = diversity_loss(g, w, k)?;
            attr = g.item(la);
            div = g.item(ld);
            terms.push(g.scale(la, m.lambda_attr));
            terms.push(g.scale(ld, m.lambda_div));
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = g.add(total, *t)?;
        }
        let total = g.scale(total, weight);
        Ok(SceneLoss {
            total,
            det: g.item(det),
            oim: oim_loss.map_or(0.0, |l| g.item(l)),
            attr,
            div,
            features,
        })
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.detector.visit(&join(prefix, "detector"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.detector.visit_mut(&join(prefix, "detector"), f);
    }
}
