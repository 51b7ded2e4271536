//! Versioned binary checkpoint.
//!
//! Layout (little-endian): magic, `u32` version, config digest, config TOML,
//! manifest digest, `u64` step, vocabulary, parameters (name, rank, dims,
//! `f64` payload), Adam step and moments in parameter order, then a
//! SHA-256 of everything before it. Strings are `u32` length + UTF-8.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::AdamState;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::text::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XALNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub manifest_digest: String,
    /// Optimisation steps completed.
    pub step: u64,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub adam: AdamState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn floats(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(bad(format!("truncated: wanted {n} bytes at offset {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| bad("payload size overflows"))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }

    fn count(&mut self, min_item_bytes: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item_bytes) > self.bytes.len() - self.pos {
            return Err(bad(format!("count {n} exceeds the remaining payload")));
        }
        Ok(n)
    }
}

impl Checkpoint {
    pub fn config_digest(&self) -> String {
        self.config.digest()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config_digest());
        w.str(&self.config.to_toml());
        w.str(&self.manifest_digest);
        w.u64(self.step);
        w.u32(self.vocab.len() as u32);
        for t in self.vocab.tokens() {
            w.str(t);
        }
        w.u32(self.params.len() as u32);
        for (name, p) in self.params.iter() {
            w.str(name);
            w.u32(p.shape.len() as u32);
            for &d in &p.shape {
                w.u64(d as u64);
            }
            w.floats(&p.data);
        }
        w.u64(self.adam.step);
        for (name, _) in self.params.iter() {
            w.floats(&self.adam.m[name]);
            w.floats(&self.adam.v[name]);
        }
        let sum = Sha256::digest(&w.0);
        w.0.extend_from_slice(&sum);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic or too short)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("version {version} is not supported (expected {CHECKPOINT_VERSION})")));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(bad("checksum mismatch (file truncated or corrupted)"));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let stored_digest = r.str()?;
        let config = RunConfig::from_toml_str(&r.str()?, &[]).map_err(|e| bad(format!("embedded config: {e}")))?;
        if config.digest() != stored_digest {
            return Err(bad("embedded config does not match its recorded digest"));
        }
        let manifest_digest = r.str()?;
        let step = r.u64()?;
        let n_vocab = r.count(4)?;
        let tokens = (0..n_vocab).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_tokens(tokens).map_err(|e| bad(e.to_string()))?;
        let n_params = r.count(8)?;
        let mut params = ParamStore::new();
        let mut order = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(bad(format!("parameter `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| bad("dimension overflows"))?;
                numel = numel.checked_mul(d).ok_or_else(|| bad("shape overflows"))?;
                shape.push(d);
            }
            if numel == 0 {
                return Err(bad(format!("parameter `{name}` is empty")));
            }
            let data = r.floats(numel)?;
            if params.get(&name).is_some() {
                return Err(bad(format!("parameter `{name}` stored twice")));
            }
            params.insert(name.clone(), &shape, data);
            order.push((name, numel));
        }
        let mut adam = AdamState { step: r.u64()?, ..Default::default() };
        for (name, numel) in order {
            adam.m.insert(name.clone(), r.floats(numel)?);
            adam.v.insert(name, r.floats(numel)?);
        }
        if r.pos != body.len() {
            return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let ckpt = Self { config, manifest_digest, step, vocab, params, adam };
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::text::describe::atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and refuses a checkpoint written under a different config.
    pub fn load_expecting(path: &Path, config_digest: &str) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let found = ckpt.config_digest();
        if found != config_digest {
            return Err(bad(format!(
                "config digest mismatch: checkpoint has {found}, current config is {config_digest}"
            )));
        }
        Ok(ckpt)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.config.model.clone(), self.vocab.len(), self.params.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let mut config = RunConfig::desk();
        config.model.layers = 1;
        config.model.text_layers = 1;
        let vocab = Vocabulary::build(["a red circle"]);
        let model = Model::new(config.model.clone(), vocab.len(), 3).unwrap();
        let mut adam = AdamState::new(&model.params);
        adam.step = 4;
        for v in adam.m.values_mut() {
            v[0] = 0.25;
        }
        Checkpoint {
            config,
            manifest_digest: "abc".into(),
            step: 4,
            vocab,
            params: model.params,
            adam,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = tiny();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        for ((_, a), (_, b)) in back.params.iter().zip(c.params.iter()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncation_and_corruption_rejected() {
        let bytes = tiny().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..100]).is_err());
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn digest_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let c = tiny();
        c.save(&path).unwrap();
        assert!(Checkpoint::load_expecting(&path, &c.config_digest()).is_ok());
        let mut other = c.config.clone();
        other.model.dim = 32;
        let err = Checkpoint::load_expecting(&path, &other.digest()).unwrap_err();
        assert!(err.to_string().contains("digest"), "{err}");
    }
}
