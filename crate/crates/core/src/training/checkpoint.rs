//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "NSECKPT\0"
//! version   u32
//! config    u64 length + UTF-8 JSON  {"model": .., "train": ..}
//! vocab     u64 length + UTF-8 "token\tid" lines (may be empty)
//! epoch     u64
//! dev acc   f64
//! params    u32 count, then per tensor:
//!             u32 name length + UTF-8 name, u32 rank, u64 dims.., f64 values..
//! optimizer u64 step, f64 beta1, f64 beta2, f64 eps,
//!           u32 count, then per tensor: u64 length, f64 m.., f64 v..
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig};
use crate::error::{NseError, Result};
use crate::model::{ModelConfig, NseModel};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NSECKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Vocabulary in its text form; empty when the caller did not attach one.
    pub vocab: String,
    pub epoch: u64,
    pub dev_accuracy: f64,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
}

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    model: ModelConfig,
    train: TrainConfig,
}

impl CheckpointRecord {
    pub fn to_model(&self) -> Result<NseModel> {
        NseModel::from_store(self.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let config = serde_json::to_vec(&ConfigBlock {
            model: self.model.clone(),
            train: self.train.clone(),
        })
        .map_err(|e| NseError::Checkpoint(format!("cannot encode config: {e}")))?;
        w.blob(&config);
        w.blob(self.vocab.as_bytes());
        w.u64(self.epoch);
        w.f64(self.dev_accuracy);
        w.u32(self.params.len() as u32);
        for (_, name, t) in self.params.iter() {
            w.u32(name.len() as u32);
            w.0.extend_from_slice(name.as_bytes());
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            t.data().iter().for_each(|&x| w.f64(x));
        }
        let o = &self.optimizer;
        w.u64(o.step);
        w.f64(o.beta1);
        w.f64(o.beta2);
        w.f64(o.eps);
        w.u32(o.m.len() as u32);
        for (m, v) in o.m.iter().zip(&o.v) {
            w.u64(m.len() as u64);
            m.iter().chain(v).for_each(|&x| w.f64(x));
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(NseError::Checkpoint("bad magic bytes; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NseError::IncompatibleVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config: ConfigBlock =
            serde_json::from_slice(r.blob()?).map_err(|e| NseError::Checkpoint(format!("bad config block: {e}")))?;
        let vocab = String::from_utf8(r.blob()?.to_vec())
            .map_err(|_| NseError::Checkpoint("vocabulary is not UTF-8".into()))?;
        let epoch = r.u64()?;
        let dev_accuracy = r.f64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| NseError::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.len()).collect::<Result<_>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| NseError::Checkpoint(format!("{name}: shape overflows")))?;
            let data = r.f64s(numel)?;
            let t = Tensor::new(shape, data).map_err(|e| NseError::Checkpoint(format!("{name}: {e}")))?;
            params.add(name, t);
        }
        let step = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let n = r.u32()? as usize;
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let len = r.len()?;
            m.push(r.f64s(len)?);
            v.push(r.f64s(len)?);
        }
        if r.pos != bytes.len() {
            return Err(NseError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let optimizer = OptimizerState { step, beta1, beta2, eps, m, v };
        if !optimizer.matches(&params) {
            return Err(NseError::Checkpoint("optimizer state does not match parameters".into()));
        }
        Ok(CheckpointRecord {
            model: config.model,
            train: config.train,
            vocab,
            epoch,
            dev_accuracy,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| NseError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| NseError::io(path, e))?)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn blob(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NseError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| NseError::Checkpoint("length overflows".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| NseError::Checkpoint("length overflows".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> CheckpointRecord {
        let model = ModelConfig { vocab_size: 9, embed_dim: 3, k: 4, crossed_state_init: false };
        let m = NseModel::new(model.clone(), 5).unwrap();
        let mut optimizer = OptimizerState::new(&m.store);
        optimizer.step = 17;
        optimizer.m[0][1] = 0.25;
        optimizer.v[2][0] = 1e-9;
        CheckpointRecord {
            model,
            train: TrainConfig::default(),
            vocab: "<pad>\t0\nXXXXX\t1\n<unk>\t2\n".into(),
            epoch: 3,
            dev_accuracy: 0.625,
            params: m.store,
            optimizer,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let rec = record();
        let bytes = rec.to_bytes().unwrap();
        let back = CheckpointRecord::from_bytes(&bytes).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("best.ckpt");
        rec.save(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
        assert_eq!(CheckpointRecord::load(&p).unwrap().to_model().unwrap().store, rec.params);
    }

    #[test]
    fn corrupt_inputs_give_clean_errors() {
        let bytes = record().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(CheckpointRecord::from_bytes(&bad), Err(NseError::Checkpoint(_))));
        let mut newer = bytes.clone();
        newer[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            CheckpointRecord::from_bytes(&newer),
            Err(NseError::IncompatibleVersion { found: 2, expected: 1 })
        ));
        for cut in [0, 5, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(CheckpointRecord::from_bytes(&bytes[..cut]).is_err());
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(CheckpointRecord::from_bytes(&long).is_err());
    }
}
