use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HarnessError, Result};
use crate::backbone::BackboneConfig;
use crate::data::DomainSpec;
use crate::detection::DetectorConfig;
use crate::oim::OimConfig;
use crate::prompt_pool::PoolConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Prompt pool with inference-time domain selection.
    Pops,
    /// Single shared prompt set fine-tuned on every domain in turn.
    FtSeq,
    /// Prompt pool evaluated with the true domain id.
    OracleSelection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub corpus_size: usize,
    /// Patch-reconstruction warm-up of the backbone.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    /// Detector epochs over the corpus.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            corpus_size: 6000,
            warmup_steps: 2000,
            warmup_lr: 1e-3,
            epochs: 10,
            lr: 1e-3,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
    pub backbone: BackboneConfig,
    pub detector: DetectorConfig,
    pub pool: PoolConfig,
    pub oim: OimConfig,
    pub pretrain: PretrainConfig,
    pub continual_epochs: usize,
    pub continual_lr: f64,
    pub lambda_attr: f64,
    pub lambda_div: f64,
    pub batch_size: usize,
    pub baseline_mode: BaselineMode,
    /// Per-domain weights for the gallery-weighted average; defaults to
    /// each domain's gallery size.
    pub gallery_weights: Option<Vec<f64>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            domains: (0..3).map(|d| DomainSpec::preset(d, 1.0)).collect(),
            backbone: BackboneConfig::default(),
            detector: DetectorConfig::default(),
            pool: PoolConfig::default(),
            oim: OimConfig::default(),
            pretrain: PretrainConfig::default(),
            continual_epochs: 10,
            continual_lr: 3e-4,
            lambda_attr: 0.1,
            lambda_div: 0.1,
            batch_size: 1,
            baseline_mode: BaselineMode::Pops,
            gallery_weights: None,
        }
    }
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(invalid("domain order is empty"));
        }
        let rates = [
            ("continual_lr", self.continual_lr),
            ("pretrain.lr", self.pretrain.lr),
            ("pretrain.warmup_lr", self.pretrain.warmup_lr),
        ];
        for (name, r) in rates {
            if !(r > 0.0 && r.is_finite()) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.lambda_attr < 0.0 || self.lambda_div < 0.0 {
            return Err(invalid("loss weights must be non-negative"));
        }
        if self.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(invalid("batch sizes must be positive"));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if self.domains[..i].iter().any(|o| o.domain_id == d.domain_id) {
                return Err(invalid(format!("domain {} listed twice", d.domain_id)));
            }
            d.validate()?;
        }
        if let Some(w) = &self.gallery_weights {
            if w.len() != self.domains.len() || w.iter().any(|v| *v < 0.0) {
                return Err(invalid("gallery_weights must give one non-negative weight per domain"));
            }
        }
        self.backbone.validate()?;
        if self.pool.embed_dim != self.backbone.embed_dim() {
            return Err(invalid("pool embed_dim must equal the backbone embedding width"));
        }
        if self.pool.attributes == 0 {
            return Err(invalid("at least one attribute pair per domain"));
        }
        if self.backbone.trunk_stride() % 2 != 0 {
            return Err(invalid("trunk stride must be even"));
        }
        let roi = self.detector.roi_size;
        let tail_stages = self.backbone.stage_dims.len() - self.backbone.trunk_stages;
        if roi % (self.backbone.window << tail_stages) != 0 {
            return Err(invalid("roi_size must stay divisible by the window through the tail"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}
