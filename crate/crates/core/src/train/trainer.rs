use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{sample_triplets, TrainingPool};
use super::checkpoint::Checkpoint;
use super::optim::AdamState;
use super::step::{train_step, StepContext};
use super::{step_seed, TextMode};
use crate::config::RunConfig;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::text::{DescriptionSet, Vocabulary};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_tri: f64,
    pub l_rn: f64,
    pub l_total: f64,
}

impl StepLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log line serialises")
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub adam: AdamState,
    pub vocab: Vocabulary,
    /// Steps completed.
    pub step: u64,
    pub manifest_digest: String,
    pool: TrainingPool,
}

/// Descriptions restricted to seen categories, checked against the
/// configured template.
fn seen_descriptions(config: &RunConfig, manifest: &DatasetManifest, d: &DescriptionSet) -> Result<DescriptionSet> {
    let mut records = Vec::new();
    for name in manifest.category_names(true) {
        let r = d
            .get(&name)
            .ok_or_else(|| Error::Descriptions(format!("no description for training category `{name}`")))?;
        if r.template_id != config.data.template_id {
            return Err(Error::Descriptions(format!(
                "category `{name}` was described with template {} but the config selects template {}",
                r.template_id, config.data.template_id
            )));
        }
        records.push(r.clone());
    }
    DescriptionSet::from_records(records)
}

impl Trainer {
    /// Fresh model initialised from `config.train.seed`. Descriptions are
    /// required in full text mode and ignored otherwise.
    pub fn new(config: RunConfig, manifest: &DatasetManifest, descriptions: Option<&DescriptionSet>) -> Result<Self> {
        config.validate()?;
        let seen = match (config.train.text_mode, descriptions) {
            (TextMode::Full, Some(d)) => Some(seen_descriptions(&config, manifest, d)?),
            (TextMode::Full, None) => {
                return Err(Error::Config("text_mode = \"full\" needs a descriptions file".into()))
            }
            (TextMode::NoText, _) => None,
        };
        let vocab = match &seen {
            Some(d) => Vocabulary::build(d.sentences()),
            None => Vocabulary::build([]),
        };
        let pool = TrainingPool::from_manifest(manifest, seen.as_ref(), &vocab, &config)?;
        let model = Model::new(config.model.clone(), vocab.len(), config.train.seed)?;
        Ok(Self {
            adam: AdamState::new(&model.params),
            manifest_digest: manifest.digest(),
            config,
            model,
            vocab,
            step: 0,
            pool,
        })
    }

    pub fn resume(ckpt: Checkpoint, manifest: &DatasetManifest, descriptions: Option<&DescriptionSet>) -> Result<Self> {
        if ckpt.manifest_digest != manifest.digest() {
            return Err(Error::Checkpoint(
                "checkpoint was trained on a different manifest".into(),
            ));
        }
        let seen = match (ckpt.config.train.text_mode, descriptions) {
            (TextMode::Full, Some(d)) => Some(seen_descriptions(&ckpt.config, manifest, d)?),
            (TextMode::Full, None) => {
                return Err(Error::Config("resuming a full-text run needs the descriptions file".into()))
            }
            (TextMode::NoText, _) => None,
        };
        let pool = TrainingPool::from_manifest(manifest, seen.as_ref(), &ckpt.vocab, &ckpt.config)?;
        let model = ckpt.model()?;
        Ok(Self {
            config: ckpt.config,
            model,
            adam: ckpt.adam,
            vocab: ckpt.vocab,
            step: ckpt.step,
            manifest_digest: ckpt.manifest_digest,
            pool,
        })
    }

    pub fn pool(&self) -> &TrainingPool {
        &self.pool
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.pool.sketch_count().div_ceil(self.config.train.batch_triplets) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.config.train.epochs as u64 * self.steps_per_epoch()
    }

    /// Samples the batch for the current step and applies one update.
    pub fn step_once(&mut self) -> Result<StepLog> {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.config.train.seed, self.step, 0));
        let batch = sample_triplets(&self.pool, &mut rng, self.config.train.batch_triplets)?;
        let ctx = StepContext {
            pool: &self.pool,
            loss: &self.config.loss,
            train: &self.config.train,
            step: self.step,
        };
        let report = train_step(&mut self.model, &mut self.adam, &batch, &ctx)?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            l_tri: report.l_tri,
            l_rn: report.l_rn,
            l_total: report.l_total,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            manifest_digest: self.manifest_digest.clone(),
            step: self.step,
            vocab: self.vocab.clone(),
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }
}
