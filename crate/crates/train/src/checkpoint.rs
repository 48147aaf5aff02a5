//! Single-file checkpoint container.
//!
//! ```text
//! "FINENET\0"  u32 version
//! u64 length + JSON header (stage, architecture, hash, train config, step)
//! parameter blocks: u64 count, then per block u32 name length, name,
//!                   4 x u64 shape, little-endian f64 values
//! u8 optimizer flag, then u64 step count, first and second moment blocks
//! SHA-256 of all preceding bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use finenet_core::error::{Error, Result};
use finenet_core::model::ModelConfig;
use finenet_core::nn::ParamStore;
use finenet_core::{Shape, Tensor};

use crate::config::{Stage, TrainConfig};
use crate::optim::AdamState;
use crate::report::inf_f64;
use crate::stage::{StageArch, StageModel};

pub const MAGIC: &[u8; 8] = b"FINENET\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    stage: Stage,
    arch: StageArch,
    arch_hash: String,
    train: TrainConfig,
    step: usize,
    #[serde(with = "inf_f64::option")]
    best_val_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub arch: StageArch,
    pub arch_hash: String,
    pub train: TrainConfig,
    /// Optimisation steps completed.
    pub step: usize,
    pub best_val_psnr: Option<f64>,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(stage: Stage, arch: StageArch, train: TrainConfig, store: &ParamStore) -> Self {
        Checkpoint {
            stage,
            arch_hash: arch.hash(stage),
            arch,
            train,
            step: 0,
            best_val_psnr: None,
            params: store.iter().map(|(n, t)| (n.clone(), t.clone())).collect(),
            optimizer: None,
        }
    }

    /// Rebuilds the network for `model` and loads the stored weights.
    /// A checkpoint of another stage or architecture is a version error.
    pub fn restore(&self, stage: Stage, model: &ModelConfig) -> Result<(StageModel, ParamStore)> {
        if stage != self.stage {
            return Err(Error::Version(format!("checkpoint holds stage {}, expected {stage}", self.stage)));
        }
        let arch = StageArch::of(stage, model);
        let expected = arch.hash(stage);
        if expected != self.arch_hash {
            return Err(Error::Version(format!(
                "{stage} checkpoint architecture hash {} does not match the configured architecture {}",
                &self.arch_hash[..12.min(self.arch_hash.len())],
                &expected[..12]
            )));
        }
        self.restore_stored()
    }

    /// Rebuilds the network from the checkpoint's own architecture.
    pub fn restore_stored(&self) -> Result<(StageModel, ParamStore)> {
        if self.arch.hash(self.stage) != self.arch_hash {
            return Err(Error::Data("checkpoint header hash does not match its architecture".into()));
        }
        let (model, mut store) = StageModel::build(self.stage, &self.arch, self.train.seed)?;
        let names: Vec<&String> = store.names().collect();
        if names.len() != self.params.len() || names.iter().any(|n| !self.params.contains_key(*n)) {
            return Err(Error::Version("checkpoint parameter names do not match the architecture".into()));
        }
        for (n, t) in &self.params {
            store.set(n, t.clone()).map_err(|e| Error::Version(e.to_string()))?;
        }
        Ok((model, store))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            stage: self.stage,
            arch: self.arch.clone(),
            arch_hash: self.arch_hash.clone(),
            train: self.train.clone(),
            step: self.step,
            best_val_psnr: self.best_val_psnr,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        write_blocks(&mut out, &self.params);
        match &self.optimizer {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.t.to_le_bytes());
                write_blocks(&mut out, &s.m);
                write_blocks(&mut out, &s.v);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Data("not a FineNet checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version(format!("checkpoint format version {version} is not supported (expected {VERSION})")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Data("checkpoint is corrupt (digest mismatch)".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        let params = r.blocks()?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let t = r.u64()?;
                Some(AdamState { t, m: r.blocks()?, v: r.blocks()? })
            }
            f => return Err(Error::Data(format!("bad optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Data("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            stage: header.stage,
            arch: header.arch,
            arch_hash: header.arch_hash,
            train: header.train,
            step: header.step,
            best_val_psnr: header.best_val_psnr,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        // Write then rename so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            Error::Version(m) => Error::Version(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn write_blocks(out: &mut Vec<u8>, blocks: &BTreeMap<String, Tensor>) {
    out.extend_from_slice(&(blocks.len() as u64).to_le_bytes());
    for (name, t) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let s = t.shape();
        for d in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Data("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn blocks(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let count = self.u64()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize;
            let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
            let dims: Vec<usize> = (0..4).map(|_| self.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let bytes = self.take(shape.numel().checked_mul(8).ok_or_else(|| Error::Data("block too large".into()))?)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            out.insert(name, Tensor::from_vec(shape, data)?);
        }
        Ok(out)
    }
}

/// Conventional file names inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    /// State after the last step, with optimizer moments; used to resume.
    pub fn last(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("{stage}.ckpt"))
    }

    /// Parameters with the best validation PSNR.
    pub fn best(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("{stage}.best.ckpt"))
    }

    /// Best checkpoint when present, otherwise the last one.
    pub fn for_inference(&self, stage: Stage) -> Option<PathBuf> {
        [self.best(stage), self.last(stage)].into_iter().find(|p| p.is_file())
    }

    pub fn load_for_inference(&self, stage: Stage) -> Result<Checkpoint> {
        let path = self
            .for_inference(stage)
            .ok_or_else(|| Error::Dependency(format!("no {stage} checkpoint in {}", self.root.display())))?;
        Checkpoint::load(&path)
    }
}
