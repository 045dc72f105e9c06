//! Detection and retrieval metrics, the gallery-weighted average and the
//! forgetting matrix.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::detection::{iou, BBox};

/// Per-domain scores, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub detection_ap: f64,
    pub recall: f64,
    pub search_map: f64,
    pub top1: f64,
}

impl DomainMetrics {
    pub const NAMES: [&'static str; 4] = ["detection_ap", "recall", "search_map", "top1"];

    pub fn values(&self) -> [f64; 4] {
        [self.detection_ap, self.recall, self.search_map, self.top1]
    }

    pub fn from_values(v: [f64; 4]) -> Self {
        DomainMetrics {
            detection_ap: v[0],
            recall: v[1],
            search_map: v[2],
            top1: v[3],
        }
    }
}

/// Average precision of a ranked relevance list with `relevant` relevant
/// items in total (items never retrieved count as misses).
pub fn average_precision(ranked: &[bool], relevant: usize) -> f64 {
    if relevant == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / relevant as f64
}

/// AP and recall of per-scene detections against per-scene ground truth
/// at IoU `threshold`, matching each detection to its highest-IoU box.
pub fn detection_ap_recall(detections: &[Vec<BBox>], ground_truth: &[Vec<BBox>], threshold: f64) -> (f64, f64) {
    let total: usize = ground_truth.iter().map(Vec::len).sum();
    if total == 0 {
        return (0.0, 0.0);
    }
    let mut order: Vec<(usize, usize)> = detections
        .iter()
        .enumerate()
        .flat_map(|(s, d)| (0..d.len()).map(move |i| (s, i)))
        .collect();
    order.sort_by(|a, b| {
        detections[b.0][b.1]
            .score
            .total_cmp(&detections[a.0][a.1].score)
            .then(a.cmp(b))
    });
    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut ranked = Vec::with_capacity(order.len());
    for (s, i) in order {
        let d = &detections[s][i];
        let best = ground_truth[s]
            .iter()
            .enumerate()
            .map(|(j, g)| (j, iou(d, g)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let tp = match best {
            Some((j, o)) if o >= threshold && !matched[s][j] => {
                matched[s][j] = true;
                true
            }
            _ => false,
        };
        ranked.push(tp);
    }
    let tp = ranked.iter().filter(|t| **t).count();
    (average_precision(&ranked, total), tp as f64 / total as f64)
}

/// One gallery detection with its similarity to the query.
#[derive(Debug, Clone, Copy)]
pub struct GalleryHit {
    pub scene: usize,
    pub bbox: BBox,
    pub similarity: f64,
}

/// AP and top-1 for one query. `targets[scene]` lists the ground-truth boxes
/// of the query identity in each gallery scene; a hit is correct when its
/// IoU with a not-yet-claimed target exceeds `threshold`.
pub fn search_ap_top1(hits: &[GalleryHit], targets: &[(usize, Vec<BBox>)], threshold: f64) -> (f64, f64) {
    let relevant: usize = targets.iter().map(|(_, b)| b.len()).sum();
    let mut order: Vec<usize> = (0..hits.len()).collect();
    order.sort_by(|&a, &b| {
        hits[b]
            .similarity
            .partial_cmp(&hits[a].similarity)
            .unwrap_or(Ordering::Equal)
            .then(hits[a].scene.cmp(&hits[b].scene))
            .then(a.cmp(&b))
    });
    let mut claimed: Vec<Vec<bool>> = targets.iter().map(|(_, b)| vec![false; b.len()]).collect();
    let mut ranked = Vec::with_capacity(hits.len());
    for &h in &order {
        let hit = &hits[h];
        let mut ok = false;
        if let Some(t) = targets.iter().position(|(s, _)| *s == hit.scene) {
            let best = targets[t]
                .1
                .iter()
                .enumerate()
                .filter(|(j, _)| !claimed[t][*j])
                .map(|(j, g)| (j, iou(&hit.bbox, g)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((j, o)) = best {
                if o > threshold {
                    claimed[t][j] = true;
                    ok = true;
                }
            }
        }
        ranked.push(ok);
    }
    let top1 = if ranked.first() == Some(&true) { 1.0 } else { 0.0 };
    (average_precision(&ranked, relevant), top1)
}

/// `Σ G_i·M_i / Σ G_i`.
pub fn weighted_average(metrics: &[f64], weights: &[f64]) -> Result<f64> {
    if metrics.len() != weights.len() {
        return Err(HarnessError::State(format!("{} metrics for {} weights", metrics.len(), weights.len())));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(HarnessError::State("total gallery weight is zero".into()));
    }
    Ok(metrics.iter().zip(weights).map(|(m, g)| m * g).sum::<f64>() / total)
}

/// `F[i] = M_i(after domain i) − M_i(after the last domain)`, where
/// `history[s][i]` holds domain `i`'s metrics after training stage `s`.
pub fn forgetting(history: &[Vec<DomainMetrics>]) -> Result<Vec<DomainMetrics>> {
    let t = history.len();
    if t == 0 {
        return Err(HarnessError::State("no evaluation snapshots".into()));
    }
    for (s, row) in history.iter().enumerate() {
        if row.len() != s + 1 {
            return Err(HarnessError::State(format!("snapshot {s} covers {} domains, expected {}", row.len(), s + 1)));
        }
    }
    let last = &history[t - 1];
    Ok((0..t)
        .map(|i| {
            let own = history[i][i].values();
            let end = last[i].values();
            DomainMetrics::from_values([own[0] - end[0], own[1] - end[1], own[2] - end[2], own[3] - end[3]])
        })
        .collect())
}
