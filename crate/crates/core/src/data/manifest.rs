use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vision::Modality;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    SeenTrain,
    SeenTest,
    Unseen,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "seen-train" => Ok(Split::SeenTrain),
            "seen-test" => Ok(Split::SeenTest),
            "unseen" => Ok(Split::Unseen),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected seen-train, seen-test or unseen)"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::SeenTrain => "seen-train",
            Split::SeenTest => "seen-test",
            Split::Unseen => "unseen",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub name: String,
    pub label: usize,
    pub seen: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub instance_id: String,
    pub modality: Modality,
    pub category: String,
    pub split: Split,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub name: String,
    pub categories: Vec<Category>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Validates and canonicalises (categories by label, entries by id).
    pub fn new(name: impl Into<String>, categories: Vec<Category>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut m = Self {
            version: MANIFEST_VERSION,
            name: name.into(),
            categories,
            entries,
            root: PathBuf::from("."),
        };
        m.canonicalize();
        m.validate()?;
        Ok(m)
    }

    fn canonicalize(&mut self) {
        self.categories.sort_by_key(|c| c.label);
        self.entries.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Manifest(m));
        if self.version != MANIFEST_VERSION {
            return fail(format!("version {} is not supported (expected {MANIFEST_VERSION})", self.version));
        }
        if self.categories.is_empty() {
            return fail("no categories declared".into());
        }
        let mut names = HashSet::new();
        let mut labels: Vec<usize> = Vec::with_capacity(self.categories.len());
        for c in &self.categories {
            if c.name.is_empty() {
                return fail("empty category name".into());
            }
            if !names.insert(c.name.as_str()) {
                return fail(format!("category `{}` declared twice", c.name));
            }
            labels.push(c.label);
        }
        labels.sort_unstable();
        if labels.iter().enumerate().any(|(i, &l)| i != l) {
            return fail(format!("labels must be dense 0..{}, got {labels:?}", labels.len()));
        }
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.instance_id.as_str()) {
                return fail(format!("duplicate instance_id `{}`", e.instance_id));
            }
            if e.modality == Modality::Text {
                return fail(format!("entry `{}` has text modality", e.instance_id));
            }
            let Some(cat) = self.categories.iter().find(|c| c.name == e.category) else {
                return fail(format!("entry `{}` names undeclared category `{}`", e.instance_id, e.category));
            };
            match (cat.seen, e.split) {
                (false, Split::SeenTrain) => {
                    return fail(format!(
                        "unseen category `{}` appears in the training split (entry `{}`)",
                        e.category, e.instance_id
                    ))
                }
                (false, Split::SeenTest) | (true, Split::Unseen) => {
                    return fail(format!(
                        "entry `{}` of category `{}` is in split {} which contradicts the category's seen flag",
                        e.instance_id, e.category, e.split
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Self = serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.root = root.into();
        m.canonicalize();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json_str(&text, root)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn category(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn label_of(&self, name: &str) -> Result<usize> {
        self.category(name)
            .map(|c| c.label)
            .ok_or_else(|| Error::Manifest(format!("unknown category `{name}`")))
    }

    pub fn category_names(&self, seen: bool) -> Vec<String> {
        self.categories.iter().filter(|c| c.seen == seen).map(|c| c.name.clone()).collect()
    }

    pub fn is_seen_label(&self, label: usize) -> bool {
        self.categories.iter().any(|c| c.label == label && c.seen)
    }

    pub fn entries_in(&self, split: Split, modality: Modality) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split && e.modality == modality).collect()
    }

    /// Entries of one split grouped by category label.
    pub fn by_label(&self, split: Split, modality: Modality) -> BTreeMap<usize, Vec<&ManifestEntry>> {
        let mut out: BTreeMap<usize, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in self.entries_in(split, modality) {
            let label = self.category(&e.category).expect("validated").label;
            out.entry(label).or_default().push(e);
        }
        out
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }
}
