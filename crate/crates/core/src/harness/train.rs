//! Detector pretraining and sequential per-domain prompt learning.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Snapshot};
use super::config::{BaselineMode, RunConfig};
use super::eval::{evaluate, EvalMode};
use super::model::{Matching, Model};
use super::report::MetricsReport;
use super::{HarnessError, Result, SequentialData};
use crate::backbone::ImageFeatureMap;
use crate::data::{make_detection_corpus, mix_seed, SceneSample};
use crate::detection::{detection_loss, BBox};
use crate::nn::{accumulate_grads, trainable_mut, Linear, Module};
use crate::oim::{OimState, PersonLabel};
use crate::prompt_pool::{DomainSlot, PromptPool};
use crate::tensor::{Adam, Graph, Tensor};

const PRETRAIN_STREAM: u64 = 0x5052;
const CONTINUAL_STREAM: u64 = 0xc011;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub warmup_losses: Vec<f64>,
    /// Mean detection loss per optimisation step.
    pub detector_losses: Vec<f64>,
    pub trunk_digest_before_detector: String,
    pub trunk_digest_after_detector: String,
}

/// Adam on the detection sub-network over precomputed trunk maps.
pub struct DetectorTrainer {
    adam: Adam,
}

impl DetectorTrainer {
    pub fn new(lr: f64) -> Self {
        DetectorTrainer { adam: Adam::new(lr) }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.adam.lr = lr;
    }

    /// One step on the mean detection loss of `batch`; returns that loss.
    pub fn step(&mut self, detector: &mut crate::detection::DetectionNet, batch: &[(&ImageFeatureMap, &[BBox])]) -> Result<f64> {
        if batch.is_empty() {
            return Err(HarnessError::State("empty detector batch".into()));
        }
        let w = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (map, boxes) in batch {
            let s = map.grid.shape();
            let mut g = Graph::new();
            let var = g.constant(vec![s[0] * s[1], s[2]], map.grid.data().to_vec())?;
            let grid = crate::backbone::Grid { var, h: s[0], w: s[1], c: s[2] };
            let pyr = detector.pyramid(&mut g, grid)?;
            let heads = detector.head(&mut g, &pyr)?;
            let loss = detection_loss(&mut g, &heads, &pyr, boxes, detector.config.positive_weight)?.total;
            total += g.item(loss) * w;
            let scaled = g.scale(loss, w);
            g.backward(scaled)?;
            accumulate_grads(detector, &g);
        }
        self.adam.step(&mut trainable_mut(detector));
        Ok(total)
    }
}

/// Per-cell pixel blocks of an image, in trunk-cell order.
fn patch_targets(image: &Tensor, stride: usize) -> Vec<f64> {
    let s = image.shape();
    let (h, w) = (s[0] / stride, s[1] / stride);
    let mut out = Vec::with_capacity(image.numel());
    for i in 0..h {
        for j in 0..w {
            for y in 0..stride {
                for x in 0..stride {
                    let p = ((i * stride + y) * s[1] + j * stride + x) * 3;
                    out.extend_from_slice(&image.data()[p..p + 3]);
                }
            }
        }
    }
    out
}

/// Stage A warms the trunk up on patch reconstruction and freezes the
/// backbone; stage B trains the pyramid and heads on the detection loss.
pub fn pretrain_with_log(config: &RunConfig) -> Result<(Checkpoint, PretrainLog)> {
    config.validate()?;
    let pc = &config.pretrain;
    if pc.corpus_size == 0 {
        return Err(HarnessError::Config("detection corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, PRETRAIN_STREAM]));
    let mut model = Model::new(config, &mut rng)?;
    model.set_trainable(false);
    let corpus = make_detection_corpus(mix_seed(&[config.seed, PRETRAIN_STREAM, 1]), pc.corpus_size);
    let mut log = PretrainLog::default();

    let stride = config.backbone.trunk_stride();
    let mut decoder = Linear::new(&mut rng, config.backbone.trunk_dim(), stride * stride * 3, true);
    decoder.set_trainable(true);
    model.backbone.set_trainable(true);
    let mut adam = Adam::new(pc.warmup_lr);
    for step in 0..pc.warmup_steps {
        let scene = &corpus[step % corpus.len()];
        let mut g = Graph::new();
        let img = g.param(&scene.image);
        let trunk = model.backbone.trunk(&mut g, img, None)?;
        let recon = decoder.forward(&mut g, trunk.var)?;
        let loss = g.mse(recon, patch_targets(&scene.image, stride))?;
        log.warmup_losses.push(g.item(loss));
        g.backward(loss)?;
        accumulate_grads(&mut model.backbone, &g);
        accumulate_grads(&mut decoder, &g);
        let mut params = trainable_mut(&mut model.backbone);
        params.extend(trainable_mut(&mut decoder));
        adam.step(&mut params);
    }
    model.backbone.set_trainable(false);

    log.trunk_digest_before_detector = model.backbone.digest();
    let maps = corpus
        .iter()
        .map(|s| model.backbone.trunk_forward(&s.image, None))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    model.detector.set_trainable(true);
    let mut trainer = DetectorTrainer::new(pc.lr);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let total_steps = pc.epochs * corpus.len().div_ceil(pc.batch_size);
    for _ in 0..pc.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(pc.batch_size) {
            // cosine decay to zero over the run
            let t = log.detector_losses.len() as f64 / total_steps as f64;
            trainer.set_lr(pc.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()));
            let batch: Vec<(&ImageFeatureMap, &[BBox])> =
                chunk.iter().map(|&i| (&maps[i], corpus[i].boxes.as_slice())).collect();
            log.detector_losses.push(trainer.step(&mut model.detector, &batch)?);
        }
    }
    model.detector.set_trainable(false);
    log.trunk_digest_after_detector = model.backbone.digest();
    Ok((Checkpoint::pretrained(config.clone(), model), log))
}

pub fn pretrain(config: &RunConfig) -> Result<Checkpoint> {
    Ok(pretrain_with_log(config)?.0)
}

/// Epoch means of the loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub total: f64,
    pub det: f64,
    pub oim: f64,
    pub attr: f64,
    pub div: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainTrainLog {
    pub domain_id: usize,
    pub trainable_params: usize,
    pub epochs: Vec<EpochLosses>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub domains: Vec<DomainTrainLog>,
}

fn check_compatible(config: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    if !ckpt.snapshots.is_empty() {
        return Err(HarnessError::State("continual training needs a pretrained checkpoint".into()));
    }
    let c = &ckpt.config;
    if c.backbone != config.backbone || c.detector != config.detector {
        return Err(HarnessError::Config("network layout differs from the checkpoint".into()));
    }
    Ok(())
}

fn trainable_count(m: &mut dyn Module) -> usize {
    trainable_mut(m).iter().map(|t| t.numel()).sum()
}

/// Prompt parameters being learned for the current domain.
enum Learner<'a> {
    Slot(&'a mut DomainSlot),
    Shared(&'a mut Vec<Tensor>),
}

struct SharedPrompts<'a>(&'a mut Vec<Tensor>);

impl Module for SharedPrompts<'_> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (l, t) in self.0.iter().enumerate() {
            f(crate::nn::join(prefix, &l.to_string()), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (l, t) in self.0.iter_mut().enumerate() {
            f(crate::nn::join(prefix, &l.to_string()), t);
        }
    }
}

/// Runs the epochs of one domain, touching only the learner's tensors and the
/// domain's fresh OIM memory.
fn train_domain(
    config: &RunConfig,
    model: &Model,
    learner: Learner,
    view: &super::DomainView,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochLosses>> {
    let ids = view.identities()?;
    let index: HashMap<usize, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut oim = OimState::new(rng, ids.len(), config.backbone.embed_dim(), config.oim.clone());
    let n = view.len()?;
    let queries = match learner {
        Learner::Slot(_) => (0..n)
            .map(|k| Ok(model.backbone.query_encode(&view.scene(k)?.image)?))
            .collect::<Result<Vec<_>>>()?,
        Learner::Shared(_) => Vec::new(),
    };
    let mut learner = learner;
    let mut adam = Adam::new(config.continual_lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(config.continual_epochs);
    for _ in 0..config.continual_epochs {
        order.shuffle(rng);
        let mut sums = EpochLosses::default();
        for chunk in order.chunks(config.batch_size) {
            let w = 1.0 / chunk.len() as f64;
            let mut feats = Vec::new();
            let mut labels: Vec<PersonLabel> = Vec::new();
            for &k in chunk {
                let scene: &SceneSample = view.scene(k)?;
                let scene_labels: Vec<PersonLabel> =
                    scene.identities.iter().map(|id| id.and_then(|id| index.get(&id).copied())).collect();
                let mut g = Graph::new();
                let loss = match &learner {
                    Learner::Slot(slot) => {
                        let m = Matching {
                            query: &queries[k],
                            projections: &slot.projections,
                            prototypes: &slot.prototypes,
                            lambda_attr: config.lambda_attr,
                            lambda_div: config.lambda_div,
                        };
                        model.scene_objective(&mut g, scene, &slot.prompts, &oim, &scene_labels, Some(&m), w)?
                    }
                    Learner::Shared(p) => model.scene_objective(&mut g, scene, p, &oim, &scene_labels, None, w)?,
                };
                sums.total += g.item(loss.total) / w;
                sums.det += loss.det;
                sums.oim += loss.oim;
                sums.attr += loss.attr;
                sums.div += loss.div;
                g.backward(loss.total)?;
                match &mut learner {
                    Learner::Slot(slot) => accumulate_grads(*slot, &g),
                    Learner::Shared(p) => accumulate_grads(&mut SharedPrompts(p), &g),
                }
                feats.extend(loss.features);
                labels.extend(scene_labels);
            }
            match &mut learner {
                Learner::Slot(slot) => {
                    adam.step(&mut trainable_mut(*slot));
                    slot.renormalize_prototypes();
                }
                Learner::Shared(p) => adam.step(&mut trainable_mut(&mut SharedPrompts(p))),
            }
            oim.update(&feats, &labels)?;
        }
        let nf = n.max(1) as f64;
        epochs.push(EpochLosses {
            total: sums.total / nf,
            det: sums.det / nf,
            oim: sums.oim / nf,
            attr: sums.attr / nf,
            div: sums.div / nf,
        });
    }
    Ok(epochs)
}

/// Learns the domains of `data` in order from a pretrained checkpoint. Pool
/// modes add and train one slot per domain; the fine-tuning baseline keeps a
/// single shared prompt set. A prompt snapshot is kept after every domain.
pub fn train_continual(config: &RunConfig, ckpt: &Checkpoint, data: &SequentialData) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    check_compatible(config, ckpt)?;
    if data.len() != config.domains.len() {
        return Err(HarnessError::Config(format!(
            "{} domains in the data, {} in the config",
            data.len(),
            config.domains.len()
        )));
    }
    let mut model = ckpt.model.clone();
    model.set_trainable(false);
    let layer_dims = config.backbone.layer_dims();
    let mut log = TrainLog::default();
    let mut snapshots = Vec::with_capacity(data.len());
    let mut pool = PromptPool::new(config.pool.clone(), layer_dims.clone());
    let mut shared: Option<Vec<Tensor>> = None;

    for pos in 0..data.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, CONTINUAL_STREAM, pos as u64]));
        let view = data.open(pos)?;
        let frozen = trainable_count(&mut model);
        let (epochs, params) = match config.baseline_mode {
            BaselineMode::Pops | BaselineMode::OracleSelection => {
                pool.add_domain(&mut rng)?;
                let slot = pool.training_slot_mut()?;
                let params = trainable_count(slot) + frozen;
                let epochs = train_domain(config, &model, Learner::Slot(slot), &view, &mut rng)?;
                pool.finish_domain()?;
                snapshots.push(Snapshot::Pool(pool.clone()));
                (epochs, params)
            }
            BaselineMode::FtSeq => {
                let prompts = shared.get_or_insert_with(|| {
                    let mut p = DomainSlot::new(&mut rng, 0, &config.pool, &layer_dims).prompts;
                    p.iter_mut().for_each(|t| t.set_requires_grad(true));
                    p
                });
                let params = prompts.iter().map(Tensor::numel).sum::<usize>() + frozen;
                let epochs = train_domain(config, &model, Learner::Shared(prompts), &view, &mut rng)?;
                let mut snap = prompts.clone();
                snap.iter_mut().for_each(|t| t.set_requires_grad(false));
                snapshots.push(Snapshot::Shared(snap));
                (epochs, params)
            }
        };
        log.domains.push(DomainTrainLog {
            domain_id: config.domains[pos].domain_id,
            trainable_params: params,
            epochs,
        });
    }
    Ok((
        Checkpoint {
            config: config.clone(),
            model,
            snapshots,
        },
        log,
    ))
}

/// Sequential fine-tuning of one shared prompt set, then evaluation with it.
pub fn run_baseline_ft_seq(config: &RunConfig, pretrained: &Checkpoint) -> Result<MetricsReport> {
    let mut cfg = config.clone();
    cfg.baseline_mode = BaselineMode::FtSeq;
    let data = SequentialData::generate(&cfg)?;
    let (ckpt, _) = train_continual(&cfg, pretrained, &data)?;
    evaluate(&ckpt, data.test_domains(), EvalMode::FtSeq)
}
