//! Run configuration: one declarative TOML file, two shipped profiles,
//! dotted-key overrides and a content digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::LossWeights;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub descriptions: PathBuf,
    /// Prompt template (1..=4) the descriptions were generated with.
    pub template_id: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
}

pub const DESK_PROFILE: &str = include_str!("../profiles/desk.toml");
pub const PAPER_PROFILE: &str = include_str!("../profiles/paper.toml");

impl RunConfig {
    pub fn desk() -> Self {
        Self::from_toml_str(DESK_PROFILE, &[]).expect("shipped desk profile parses")
    }

    pub fn paper() -> Self {
        Self::from_toml_str(PAPER_PROFILE, &[]).expect("shipped paper profile parses")
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown profile `{other}` (desk, paper)"))),
        }
    }

    /// Parses TOML text, applying `key.path=value` overrides first.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Re-applies overrides to an already resolved config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let text = self.to_toml();
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if !(1..=4).contains(&self.data.template_id) {
            return Err(Error::Config(format!(
                "template_id {} outside 1..=4",
                self.data.template_id
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of the resolved config.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path `{key}` crosses a non-table")))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*part) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_parse_and_differ() {
        let desk = RunConfig::desk();
        let paper = RunConfig::paper();
        assert_eq!(desk.model.dim, 64);
        assert_eq!(desk.model.image_size, 32);
        assert_eq!(desk.model.layers, 2);
        assert_eq!(paper.model.dim, 768);
        assert_eq!(paper.model.image_size, 224);
        assert_eq!(paper.model.layers, 12);
        assert_eq!(paper.model.cross_heads, 12);
        assert_eq!(paper.train.lr, 5e-6);
        assert_eq!(paper.train.weight_decay, 1e-2);
        assert_eq!(desk.loss.lambda_tri, 0.5);
        assert_eq!(desk.loss.lambda_rn, 8.0);
        assert_ne!(desk.digest(), paper.digest());
    }

    #[test]
    fn digest_is_deterministic_and_sensitive() {
        let a = RunConfig::desk();
        assert_eq!(a.digest(), RunConfig::desk().digest());
        let b = a.with_overrides(&["train.lr=0.002".into()]).unwrap();
        assert_eq!(b.train.lr, 0.002);
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn overrides_reject_unknown_keys() {
        let a = RunConfig::desk();
        assert!(a.with_overrides(&["train.nope=1".into()]).is_err());
        assert!(a.with_overrides(&["train.lr".into()]).is_err());
    }

    #[test]
    fn string_override_without_quotes() {
        let a = RunConfig::desk();
        let b = a.with_overrides(&["data.manifest=/tmp/x/manifest.json".into()]).unwrap();
        assert_eq!(b.data.manifest, PathBuf::from("/tmp/x/manifest.json"));
    }
}
