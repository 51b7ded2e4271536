use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::config::RunConfig;
use crate::data::{load_raster, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::text::{DescriptionSet, Vocabulary};
use crate::vision::{Modality, RasterInstance};

/// Training rasters and per-category text, restricted to seen categories.
#[derive(Debug, Clone)]
pub struct TrainingPool {
    sketches: Vec<RasterInstance>,
    images: Vec<RasterInstance>,
    images_by_label: BTreeMap<usize, Vec<usize>>,
    text: BTreeMap<usize, Vec<usize>>,
    seen: BTreeSet<usize>,
}

impl TrainingPool {
    pub fn new(
        sketches: Vec<RasterInstance>,
        images: Vec<RasterInstance>,
        text: BTreeMap<usize, Vec<usize>>,
        seen: BTreeSet<usize>,
    ) -> Result<Self> {
        for r in sketches.iter().chain(&images) {
            if !seen.contains(&r.label) {
                return Err(Error::UnseenLeak(format!("label {} ({})", r.label, r.instance_id)));
            }
        }
        if let Some(l) = text.keys().find(|l| !seen.contains(l)) {
            return Err(Error::UnseenLeak(format!("label {l} (description)")));
        }
        if sketches.is_empty() {
            return Err(Error::InvalidArgument("training split has no sketches".into()));
        }
        let mut images_by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in images.iter().enumerate() {
            images_by_label.entry(r.label).or_default().push(i);
        }
        if let Some(s) = sketches.iter().find(|s| !images_by_label.contains_key(&s.label)) {
            return Err(Error::InvalidArgument(format!(
                "category with label {} has sketches but no training images",
                s.label
            )));
        }
        if images_by_label.len() < 2 {
            return Err(Error::InvalidArgument(
                "triplets need at least 2 seen categories with images".into(),
            ));
        }
        Ok(Self {
            sketches,
            images,
            images_by_label,
            text,
            seen,
        })
    }

    /// Loads the seen-train split. Unseen entries are never opened; text is
    /// attached only when `descriptions` is given.
    pub fn from_manifest(
        manifest: &DatasetManifest,
        descriptions: Option<&DescriptionSet>,
        vocab: &Vocabulary,
        cfg: &RunConfig,
    ) -> Result<Self> {
        let load = |m: Modality| -> Result<Vec<RasterInstance>> {
            manifest
                .entries_in(Split::SeenTrain, m)
                .into_iter()
                .map(|e| {
                    if !manifest.category(&e.category).is_some_and(|c| c.seen) {
                        return Err(Error::UnseenLeak(e.category.clone()));
                    }
                    load_raster(manifest, e, cfg.model.image_size, cfg.model.channels)
                })
                .collect()
        };
        let sketches = load(Modality::Sketch)?;
        let images = load(Modality::Image)?;
        let seen: BTreeSet<usize> = manifest.categories.iter().filter(|c| c.seen).map(|c| c.label).collect();
        let mut text = BTreeMap::new();
        if let Some(d) = descriptions {
            for c in manifest.categories.iter().filter(|c| c.seen) {
                let ids = d.token_ids(&c.name, vocab, cfg.model.max_text_len)?;
                text.insert(c.label, ids);
            }
        }
        Self::new(sketches, images, text, seen)
    }

    pub fn sketch(&self, i: usize) -> &RasterInstance {
        &self.sketches[i]
    }

    pub fn image(&self, i: usize) -> &RasterInstance {
        &self.images[i]
    }

    pub fn sketch_count(&self) -> usize {
        self.sketches.len()
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn has_text(&self) -> bool {
        !self.text.is_empty()
    }

    /// Description token ids of a seen category.
    pub fn text_ids(&self, label: usize) -> Result<&[usize]> {
        if !self.seen.contains(&label) {
            return Err(Error::UnseenLeak(format!("label {label}")));
        }
        self.text
            .get(&label)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Descriptions(format!("no description tokens for label {label}")))
    }

    pub fn assert_seen(&self, label: usize) -> Result<()> {
        if self.seen.contains(&label) {
            Ok(())
        } else {
            Err(Error::UnseenLeak(format!("label {label}")))
        }
    }
}

/// Indices into a [`TrainingPool`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub labels: Vec<usize>,
    pub negative_labels: Vec<usize>,
    /// Description ids of each anchor's category; empty without text.
    pub text: Vec<Vec<usize>>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// SHA-256 over the instance ids, for divergence diagnostics.
    pub fn digest(&self, pool: &TrainingPool) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for i in 0..self.len() {
            for id in [
                &pool.sketch(self.anchors[i]).instance_id,
                &pool.image(self.positives[i]).instance_id,
                &pool.image(self.negatives[i]).instance_id,
            ] {
                h.update(id.as_bytes());
                h.update([0]);
            }
        }
        hex::encode(h.finalize())
    }
}

/// Anchors uniform over sketches, positives uniform over same-class
/// images, negatives uniform over all other-class images.
pub fn sample_triplets<R: Rng>(pool: &TrainingPool, rng: &mut R, t: usize) -> Result<TripletBatch> {
    if t == 0 {
        return Err(Error::InvalidArgument("batch needs at least one triplet".into()));
    }
    let mut b = TripletBatch {
        anchors: Vec::with_capacity(t),
        positives: Vec::with_capacity(t),
        negatives: Vec::with_capacity(t),
        labels: Vec::with_capacity(t),
        negative_labels: Vec::with_capacity(t),
        text: Vec::with_capacity(t),
    };
    for _ in 0..t {
        let a = rng.random_range(0..pool.sketches.len());
        let label = pool.sketches[a].label;
        let same = &pool.images_by_label[&label];
        let p = same[rng.random_range(0..same.len())];
        let others = pool.images.len() - same.len();
        let k = rng.random_range(0..others);
        let (n, _) = pool
            .images
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label != label)
            .nth(k)
            .expect("k < others");
        b.anchors.push(a);
        b.positives.push(p);
        b.negatives.push(n);
        b.labels.push(label);
        b.negative_labels.push(pool.images[n].label);
        if pool.has_text() {
            b.text.push(pool.text_ids(label)?.to_vec());
        }
    }
    Ok(b)
}
