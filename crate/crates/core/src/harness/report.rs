//! Metrics report: per-stage history, final values, gallery-weighted
//! averages, forgetting and selection accuracy, as JSON or CSV.

use serde::{Deserialize, Serialize};

use super::eval::EvalMode;
use super::metrics::{forgetting, weighted_average, DomainMetrics};
use super::{HarnessError, Result};

/// All values are fractions in `[0, 1]`; the CSV form adds percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub config_hash: String,
    pub domain_ids: Vec<usize>,
    pub gallery_weights: Vec<f64>,
    /// `history[s][i]`: domain `i` after training stage `s`.
    pub history: Vec<Vec<DomainMetrics>>,
    pub final_metrics: Vec<DomainMetrics>,
    pub weighted_average: DomainMetrics,
    /// Value at the domain's own completion minus the final value.
    pub forgetting: Vec<DomainMetrics>,
    pub selection_accuracy: Option<Vec<f64>>,
    pub notes: Vec<String>,
}

/// Reminder carried by every report about how averages are formed.
pub const AVERAGE_NOTE: &str = "weighted_average = sum_i G_i * M_i / sum_i G_i with G = gallery_weights; \
averages quoted elsewhere with unstated weights need not match (e.g. M = 86.3/42.8/35.4 with \
G = 100/6112/2000 gives 41.53, not 42.0)";

impl MetricsReport {
    pub fn build(
        mode: EvalMode,
        config_hash: String,
        domain_ids: Vec<usize>,
        gallery_weights: Vec<f64>,
        history: Vec<Vec<DomainMetrics>>,
        selection_accuracy: Option<Vec<f64>>,
    ) -> Result<Self> {
        let forgetting = forgetting(&history)?;
        let final_metrics = history.last().cloned().unwrap_or_default();
        let mut avg = [0.0; 4];
        for (k, a) in avg.iter_mut().enumerate() {
            let col: Vec<f64> = final_metrics.iter().map(|m| m.values()[k]).collect();
            *a = weighted_average(&col, &gallery_weights)?;
        }
        Ok(MetricsReport {
            mode,
            config_hash,
            domain_ids,
            gallery_weights,
            history,
            final_metrics,
            weighted_average: DomainMetrics::from_values(avg),
            forgetting,
            selection_accuracy,
            notes: vec![AVERAGE_NOTE.to_string()],
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per (stage, domain, metric); stage is a number for history
    /// rows, or `final`, `forgetting`, `weighted_average`, `selection`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,domain,metric,value,percent\n");
        let mut row = |stage: &str, domain: &str, metric: &str, v: f64| {
            out.push_str(&format!("{stage},{domain},{metric},{v},{}\n", v * 100.0));
        };
        for (s, r) in self.history.iter().enumerate() {
            for (i, m) in r.iter().enumerate() {
                for (name, v) in DomainMetrics::NAMES.iter().zip(m.values()) {
                    row(&s.to_string(), &self.domain_ids[i].to_string(), name, v);
                }
            }
        }
        for (i, m) in self.final_metrics.iter().enumerate() {
            for (name, v) in DomainMetrics::NAMES.iter().zip(m.values()) {
                row("final", &self.domain_ids[i].to_string(), name, v);
            }
        }
        for (i, m) in self.forgetting.iter().enumerate() {
            for (name, v) in DomainMetrics::NAMES.iter().zip(m.values()) {
                row("forgetting", &self.domain_ids[i].to_string(), name, v);
            }
        }
        for (name, v) in DomainMetrics::NAMES.iter().zip(self.weighted_average.values()) {
            row("weighted_average", "all", name, v);
        }
        if let Some(sel) = &self.selection_accuracy {
            for (i, v) in sel.iter().enumerate() {
                row("selection", &self.domain_ids[i].to_string(), "selection_accuracy", *v);
            }
        }
        out
    }

    pub fn render(&self, format: &str) -> Result<String> {
        match format {
            "json" => Ok(self.to_json()),
            "csv" => Ok(self.to_csv()),
            _ => Err(HarnessError::Config(format!("unknown report format {format}"))),
        }
    }
}
