//! Two-stage protocol: detector pretraining, sequential per-domain prompt
//! learning, evaluation with forgetting bookkeeping, checkpoints and reports.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod report;
pub mod train;

use std::cell::{Cell, RefCell};

use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use config::{BaselineMode, PretrainConfig, RunConfig};
pub use eval::{evaluate, EvalMode};
pub use metrics::DomainMetrics;
pub use model::Model;
pub use report::MetricsReport;
pub use train::{pretrain, run_baseline_ft_seq, train_continual};

use crate::data::{make_domain, DataError, DomainData, SceneSample};
use crate::oim::OimError;
use crate::prompt_pool::PoolError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("protocol violation: requested domain {requested} while training domain {current:?}")]
    ProtocolViolation { requested: usize, current: Option<usize> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("state: {0}")]
    State(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Oim(#[from] OimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Domain position in the run order and scene index of one training read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub domain: usize,
    pub scene: usize,
}

/// All domains of a run, exposed to training one at a time and in order.
/// Asking for a finished or a future domain's training data is a protocol
/// violation; every read is recorded.
#[derive(Debug)]
pub struct SequentialData {
    domains: Vec<DomainData>,
    current: Cell<Option<usize>>,
    log: RefCell<Vec<Access>>,
}

/// Read access to the training split of the current domain only.
#[derive(Debug)]
pub struct DomainView<'a> {
    source: &'a SequentialData,
    domain: usize,
}

impl SequentialData {
    pub fn new(domains: Vec<DomainData>) -> Self {
        SequentialData {
            domains,
            current: Cell::new(None),
            log: RefCell::new(Vec::new()),
        }
    }

    pub fn generate(config: &RunConfig) -> Result<Self> {
        let domains = config
            .domains
            .iter()
            .map(|spec| make_domain(spec, config.seed))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(SequentialData::new(domains))
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// Opens domain `position` for training. Only the current domain or the
    /// one right after it may be opened.
    pub fn open(&self, position: usize) -> Result<DomainView<'_>> {
        let cur = self.current.get();
        let next = cur.map_or(0, |c| c + 1);
        if cur != Some(position) && position != next || position >= self.domains.len() {
            return Err(HarnessError::ProtocolViolation {
                requested: position,
                current: cur,
            });
        }
        self.current.set(Some(position));
        Ok(DomainView { source: self, domain: position })
    }

    /// Test splits are open to evaluation at any time.
    pub fn test_domains(&self) -> &[DomainData] {
        &self.domains
    }

    pub fn access_log(&self) -> Vec<Access> {
        self.log.borrow().clone()
    }
}

impl<'a> DomainView<'a> {
    pub fn position(&self) -> usize {
        self.domain
    }

    fn check(&self) -> Result<&'a DomainData> {
        if self.source.current.get() != Some(self.domain) {
            return Err(HarnessError::ProtocolViolation {
                requested: self.domain,
                current: self.source.current.get(),
            });
        }
        Ok(&self.source.domains[self.domain])
    }

    pub fn len(&self) -> Result<usize> {
        Ok(self.check()?.train.len())
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    pub fn scene(&self, index: usize) -> Result<&'a SceneSample> {
        let d = self.check()?;
        let s = d.train.get(index).ok_or_else(|| HarnessError::State(format!("scene {index} out of range")))?;
        self.source.log.borrow_mut().push(Access { domain: self.domain, scene: index });
        Ok(s)
    }

    /// Labeled training identities, in lookup-table order.
    pub fn identities(&self) -> Result<Vec<usize>> {
        Ok(self.check()?.spec.train_identities())
    }
}
