//! Versioned checkpoint container: magic, JSON manifest, then named arrays.
//!
//! ```text
//! "CPSCKPT\0" | u32 version | u64 manifest length | manifest JSON
//! u64 array count | per array: u32 name length, name, u8 dtype (0 = f64),
//!                   u32 rank, u64 dims…, little-endian payload
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::model::Model;
use super::{HarnessError, Result};
use crate::nn::Module;
use crate::prompt_pool::{DomainSlot, PromptPool};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CPSCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Prompt state after one domain of continual training.
#[derive(Debug, Clone, PartialEq)]
pub enum Snapshot {
    /// The pool as it stood, one frozen slot per domain seen so far.
    Pool(PromptPool),
    /// The single shared prompt set of the sequential fine-tuning baseline.
    Shared(Vec<Tensor>),
}

impl Snapshot {
    pub fn kind(&self) -> &'static str {
        match self {
            Snapshot::Pool(_) => "pool",
            Snapshot::Shared(_) => "shared",
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            Snapshot::Pool(p) => p.visit(prefix, f),
            Snapshot::Shared(ts) => {
                for (l, t) in ts.iter().enumerate() {
                    f(format!("{prefix}.shared.{l}"), t);
                }
            }
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, t| hash_tensor(&mut h, &name, t));
        hex::encode(h.finalize())
    }
}

fn hash_tensor(h: &mut Sha256, name: &str, t: &Tensor) {
    h.update(name.as_bytes());
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
}

/// Frozen network plus the prompt snapshot after every trained domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub config_hash: String,
    pub domain_count: usize,
    pub snapshot_kinds: Vec<String>,
    pub backbone_digest: String,
    pub detector_digest: String,
    pub snapshot_digests: Vec<String>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}

fn corrupt(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn pretrained(config: RunConfig, model: Model) -> Self {
        Checkpoint { config, model, snapshots: Vec::new() }
    }

    pub fn domain_count(&self) -> usize {
        self.snapshots.len()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            domain_count: self.domain_count(),
            snapshot_kinds: self.snapshots.iter().map(|s| s.kind().to_string()).collect(),
            backbone_digest: self.model.backbone.digest(),
            detector_digest: self.model.detector.digest(),
            snapshot_digests: self.snapshots.iter().map(Snapshot::digest).collect(),
        }
    }

    fn arrays(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.model.visit("model", &mut |n, t| out.push((n, t.clone())));
        for (s, snap) in self.snapshots.iter().enumerate() {
            snap.visit(&format!("snapshot{s}"), &mut |n, t| out.push((n, t.clone())));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest())?;
        buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        buf.extend_from_slice(&manifest);
        let arrays = self.arrays();
        buf.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
        for (name, t) in &arrays {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(DTYPE_F64);
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let len = read_u64(&mut r)? as usize;
        if len > r.len() {
            return Err(corrupt("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        manifest.config.validate()?;
        if manifest.config.hash() != manifest.config_hash {
            return Err(corrupt("config hash mismatch"));
        }

        let count = read_u64(&mut r)? as usize;
        let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let n = read_u32(&mut r)? as usize;
            if n > r.len() {
                return Err(corrupt("truncated array name"));
            }
            let name = String::from_utf8(r[..n].to_vec()).map_err(|_| corrupt("array name is not UTF-8"))?;
            r = &r[n..];
            let mut dtype = [0u8; 1];
            read_exact(&mut r, &mut dtype)?;
            if dtype[0] != DTYPE_F64 {
                return Err(corrupt(format!("{name}: unsupported dtype {}", dtype[0])));
            }
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| corrupt("shape overflow"))?;
            if numel.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(corrupt(format!("{name}: truncated payload")));
            }
            let data = r[..numel * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            r = &r[numel * 8..];
            arrays.insert(name, Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(corrupt("trailing bytes"));
        }

        let config = manifest.config.clone();
        // weights are overwritten below; the seeded build only fixes the layout
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(&config, &mut rng)?;
        fill(&mut model, "model", &mut arrays)?;
        model.set_trainable(false);

        let layer_dims = config.backbone.layer_dims();
        let mut snapshots = Vec::with_capacity(manifest.snapshot_kinds.len());
        for (s, kind) in manifest.snapshot_kinds.iter().enumerate() {
            let prefix = format!("snapshot{s}");
            let snap = match kind.as_str() {
                "pool" => {
                    let mut slots = Vec::new();
                    while arrays.keys().any(|k| k.starts_with(&format!("{prefix}.slot{}.", slots.len()))) {
                        let id = slots.len();
                        let mut slot = DomainSlot::new(&mut rng, id, &config.pool, &layer_dims);
                        fill(&mut slot, &format!("{prefix}.slot{id}"), &mut arrays)?;
                        slots.push(slot);
                    }
                    Snapshot::Pool(PromptPool::from_slots(config.pool.clone(), layer_dims.clone(), slots)?)
                }
                "shared" => {
                    let mut prompts = Vec::with_capacity(layer_dims.len());
                    for (l, d) in layer_dims.iter().enumerate() {
                        let name = format!("{prefix}.shared.{l}");
                        let t = arrays.remove(&name).ok_or_else(|| corrupt(format!("missing array {name}")))?;
                        if t.shape() != [config.pool.prompt_len, *d] {
                            return Err(corrupt(format!("{name}: shape {:?}", t.shape())));
                        }
                        prompts.push(t);
                    }
                    Snapshot::Shared(prompts)
                }
                other => return Err(corrupt(format!("unknown snapshot kind {other}"))),
            };
            snapshots.push(snap);
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(corrupt(format!("unexpected array {extra}")));
        }

        let ckpt = Checkpoint { config, model, snapshots };
        let check = ckpt.manifest();
        if check.backbone_digest != manifest.backbone_digest
            || check.detector_digest != manifest.detector_digest
            || check.snapshot_digests != manifest.snapshot_digests
        {
            return Err(corrupt("weight digest mismatch"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn fill(m: &mut dyn Module, prefix: &str, arrays: &mut BTreeMap<String, Tensor>) -> Result<()> {
    let mut err = None;
    m.visit_mut(prefix, &mut |name, t| {
        if err.is_some() {
            return;
        }
        match arrays.remove(&name) {
            Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
            Some(src) => err = Some(corrupt(format!("{name}: shape {:?}, expected {:?}", src.shape(), t.shape()))),
            None => err = Some(corrupt(format!("missing array {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}

fn read_exact(r: &mut &[u8], out: &mut [u8]) -> Result<()> {
    r.read_exact(out).map_err(|_| corrupt("unexpected end of data"))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
