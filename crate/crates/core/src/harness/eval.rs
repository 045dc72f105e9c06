//! Evaluation over every training stage: detection AP/recall, search
//! mAP/top-1 and domain-selection accuracy.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, Snapshot};
use super::metrics::{detection_ap_recall, search_ap_top1, DomainMetrics, GalleryHit};
use super::model::{Model, SceneInference};
use super::report::MetricsReport;
use super::{HarnessError, Result};
use crate::data::DomainData;
use crate::detection::BBox;
use crate::tensor::{cosine, Tensor};

/// Environment variable holding the evaluation thread count (default 1).
pub const THREADS_ENV: &str = "CPS_EVAL_THREADS";
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Prompts chosen per image by query matching against the pool.
    Pops,
    /// Prompts of the image's true domain.
    Oracle,
    /// The shared prompt set of the sequential fine-tuning baseline.
    FtSeq,
}

impl std::str::FromStr for EvalMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pops" => Ok(EvalMode::Pops),
            "oracle" | "oracle_selection" => Ok(EvalMode::Oracle),
            "ft_seq" => Ok(EvalMode::FtSeq),
            _ => Err(HarnessError::Config(format!("unknown evaluation mode {s}"))),
        }
    }
}

pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or(1)
}

fn prompt_digest(prompts: &[Tensor]) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in prompts {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Inference results keyed by (domain position, scene, prompt digest); equal
/// prompt contents share one forward pass.
#[derive(Default)]
struct InferenceCache {
    scenes: HashMap<(usize, usize, [u8; 32]), SceneInference>,
    queries: HashMap<(usize, usize), Vec<f64>>,
}

/// Metrics of one domain's test split under one prompt snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainEval {
    pub metrics: DomainMetrics,
    /// Fraction of test images routed to their own domain (pool selection only).
    pub selection_accuracy: Option<f64>,
}

struct Evaluator<'a> {
    model: &'a Model,
    domains: &'a [DomainData],
    threads: rayon::ThreadPool,
    cache: InferenceCache,
}

impl<'a> Evaluator<'a> {
    fn new(model: &'a Model, domains: &'a [DomainData]) -> Result<Self> {
        let threads = rayon::ThreadPoolBuilder::new()
            .num_threads(eval_threads())
            .build()
            .map_err(|e| HarnessError::State(e.to_string()))?;
        Ok(Evaluator {
            model,
            domains,
            threads,
            cache: InferenceCache::default(),
        })
    }

    fn query_embeddings(&mut self, pos: usize) -> Result<Vec<Vec<f64>>> {
        let test = &self.domains[pos].test;
        let missing: Vec<usize> = (0..test.len()).filter(|s| !self.cache.queries.contains_key(&(pos, *s))).collect();
        let model = self.model;
        let fresh: Vec<Result<Vec<f64>>> = self.threads.install(|| {
            missing
                .par_iter()
                .map(|&s| Ok(model.backbone.query_encode(&test[s].image)?))
                .collect()
        });
        for (s, q) in missing.into_iter().zip(fresh) {
            self.cache.queries.insert((pos, s), q?);
        }
        Ok((0..test.len()).map(|s| self.cache.queries[&(pos, s)].clone()).collect())
    }

    /// Per-scene prompt choice for domain `pos` under `snapshot`, plus the
    /// selected slot when the pool chooses.
    fn choose<'s>(&mut self, snapshot: &'s Snapshot, mode: EvalMode, pos: usize) -> Result<Vec<(&'s [Tensor], Option<usize>)>> {
        let n = self.domains[pos].test.len();
        match (mode, snapshot) {
            (EvalMode::FtSeq, Snapshot::Shared(p)) => Ok(vec![(p.as_slice(), None); n]),
            (EvalMode::Oracle, Snapshot::Pool(pool)) => {
                let p = pool.layer_prompts(pos)?;
                Ok(vec![(p, None); n])
            }
            (EvalMode::Pops, Snapshot::Pool(pool)) => {
                let qs = self.query_embeddings(pos)?;
                qs.iter()
                    .map(|q| {
                        let d = pool.select_domain(q)?;
                        Ok((pool.layer_prompts(d)?, Some(d)))
                    })
                    .collect()
            }
            (m, s) => Err(HarnessError::Config(format!("mode {m:?} cannot evaluate a {} snapshot", s.kind()))),
        }
    }

    fn domain_eval(&mut self, snapshot: &Snapshot, mode: EvalMode, pos: usize) -> Result<DomainEval> {
        let choice = self.choose(snapshot, mode, pos)?;
        let data = &self.domains[pos];
        let mut needs_gt = vec![false; data.test.len()];
        for q in &data.queries {
            needs_gt[q.scene] = true;
        }
        let keys: Vec<[u8; 32]> = choice.iter().map(|(p, _)| prompt_digest(p)).collect();
        let jobs: Vec<usize> = (0..data.test.len())
            .filter(|&s| !self.cache.scenes.contains_key(&(pos, s, keys[s])))
            .collect();
        let model = self.model;
        let fresh: Vec<Result<SceneInference>> = self.threads.install(|| {
            jobs.par_iter()
                .map(|&s| {
                    let scene = &data.test[s];
                    let gt = needs_gt[s].then_some(scene.boxes.as_slice());
                    model.infer(&scene.image, Some(choice[s].0), gt)
                })
                .collect()
        });
        for (s, r) in jobs.into_iter().zip(fresh) {
            self.cache.scenes.insert((pos, s, keys[s]), r?);
        }
        let inf: Vec<&SceneInference> = (0..data.test.len()).map(|s| &self.cache.scenes[&(pos, s, keys[s])]).collect();

        let dets: Vec<Vec<BBox>> = inf.iter().map(|i| i.detections.clone()).collect();
        let gts: Vec<Vec<BBox>> = data.test.iter().map(|s| s.boxes.clone()).collect();
        let (detection_ap, recall) = detection_ap_recall(&dets, &gts, IOU_THRESHOLD);

        let (mut map_sum, mut top1_sum) = (0.0, 0.0);
        for q in &data.queries {
            let qf = &inf[q.scene].gt_features[q.person];
            let mut hits = Vec::new();
            let mut targets = Vec::new();
            for &s in &q.gallery {
                for (b, f) in inf[s].detections.iter().zip(&inf[s].features) {
                    hits.push(GalleryHit {
                        scene: s,
                        bbox: *b,
                        similarity: cosine(qf, f)?,
                    });
                }
                let boxes: Vec<BBox> = data.test[s]
                    .boxes
                    .iter()
                    .zip(&data.test[s].identities)
                    .filter(|(_, id)| **id == Some(q.identity))
                    .map(|(b, _)| *b)
                    .collect();
                if !boxes.is_empty() {
                    targets.push((s, boxes));
                }
            }
            let (ap, top1) = search_ap_top1(&hits, &targets, IOU_THRESHOLD);
            map_sum += ap;
            top1_sum += top1;
        }
        let nq = data.queries.len().max(1) as f64;
        let selection_accuracy = (mode == EvalMode::Pops).then(|| {
            let hit = choice.iter().filter(|(_, d)| *d == Some(pos)).count();
            hit as f64 / choice.len().max(1) as f64
        });
        Ok(DomainEval {
            metrics: DomainMetrics {
                detection_ap,
                recall,
                search_map: map_sum / nq,
                top1: top1_sum / nq,
            },
            selection_accuracy,
        })
    }
}

/// Evaluates domain `pos` with the prompt state after training stage `stage`.
pub fn evaluate_domain(ckpt: &Checkpoint, domains: &[DomainData], mode: EvalMode, stage: usize, pos: usize) -> Result<DomainEval> {
    let snapshot = ckpt
        .snapshots
        .get(stage)
        .ok_or_else(|| HarnessError::State(format!("no snapshot after stage {stage}")))?;
    if pos >= domains.len() {
        return Err(HarnessError::State(format!("no test data for domain {pos}")));
    }
    Evaluator::new(&ckpt.model, domains)?.domain_eval(snapshot, mode, pos)
}

/// Evaluates every seen domain after every stage and assembles the report.
pub fn evaluate(ckpt: &Checkpoint, domains: &[DomainData], mode: EvalMode) -> Result<MetricsReport> {
    if ckpt.snapshots.is_empty() {
        return Err(HarnessError::State("checkpoint holds no trained domains".into()));
    }
    if domains.len() < ckpt.snapshots.len() {
        return Err(HarnessError::State(format!(
            "{} trained domains but test data for {}",
            ckpt.snapshots.len(),
            domains.len()
        )));
    }
    let mut ev = Evaluator::new(&ckpt.model, domains)?;
    let mut history = Vec::with_capacity(ckpt.snapshots.len());
    let mut selection = Vec::new();
    for (stage, snap) in ckpt.snapshots.iter().enumerate() {
        let mut row = Vec::with_capacity(stage + 1);
        for pos in 0..=stage {
            let e = ev.domain_eval(snap, mode, pos)?;
            if stage + 1 == ckpt.snapshots.len() {
                selection.push(e.selection_accuracy);
            }
            row.push(e.metrics);
        }
        history.push(row);
    }
    let weights = match &ckpt.config.gallery_weights {
        Some(w) => w[..ckpt.snapshots.len()].to_vec(),
        None => domains[..ckpt.snapshots.len()].iter().map(|d| d.gallery_size as f64).collect(),
    };
    let selection_accuracy = if mode == EvalMode::Pops {
        Some(selection.into_iter().map(|s| s.unwrap_or(0.0)).collect())
    } else {
        None
    };
    MetricsReport::build(
        mode,
        ckpt.config.hash(),
        domains[..ckpt.snapshots.len()].iter().map(|d| d.spec.domain_id).collect(),
        weights,
        history,
        selection_accuracy,
    )
}
