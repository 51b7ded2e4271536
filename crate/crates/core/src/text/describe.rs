//! Description generation, selection and the JSON Lines file format.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::endpoint::{CompletionRequest, EndpointClient};
use super::prompt::{render_prompt, PromptTemplate};
use super::vocab::{tokenize, Vocabulary};
use crate::error::{Error, Result};

/// One line of a descriptions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionRecord {
    pub category: String,
    pub template_id: u8,
    pub sentences: Vec<String>,
    pub source: String,
}

/// Selected sentences per category, in category order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DescriptionSet {
    pub records: BTreeMap<String, DescriptionRecord>,
}

impl DescriptionSet {
    pub fn from_records(records: impl IntoIterator<Item = DescriptionRecord>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in records {
            if r.sentences.is_empty() {
                return Err(Error::Descriptions(format!("category `{}` has no sentences", r.category)));
            }
            let key = r.category.clone();
            if map.insert(key.clone(), r).is_some() {
                return Err(Error::Descriptions(format!("category `{key}` listed twice")));
            }
        }
        Ok(Self { records: map })
    }

    pub fn get(&self, category: &str) -> Option<&DescriptionRecord> {
        self.records.get(category)
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.records.values().flat_map(|r| r.sentences.iter().map(String::as_str))
    }

    /// Each sentence tokenised on its own (ending in the end id), then
    /// concatenated and capped at `max_len` ids.
    pub fn token_ids(&self, category: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
        let rec = self
            .get(category)
            .ok_or_else(|| Error::Descriptions(format!("no description for category `{category}`")))?;
        let mut ids: Vec<usize> = rec.sentences.iter().flat_map(|s| tokenize(s, vocab, max_len)).collect();
        ids.truncate(max_len);
        Ok(ids)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.records.values() {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        Self::from_records(parse_records(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_jsonl().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_records(read_records(path)?)
    }
}

pub fn parse_records(text: &str) -> Result<Vec<DescriptionRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Descriptions(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<DescriptionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text)
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn strip_list_marker(line: &str) -> &str {
    let t = line.trim_start();
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = t.strip_prefix(bullet) {
            return rest;
        }
    }
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return r;
        }
    }
    t
}

/// Splits a raw completion into sentences: list markers are dropped,
/// whitespace collapsed, sentences under three words discarded and
/// case-insensitive duplicates removed. Order of first appearance is kept.
pub fn clean_sentences(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for line in raw.lines() {
        let line = strip_list_marker(line);
        let mut current = String::new();
        let chars: Vec<char> = line.chars().collect();
        for (i, &c) in chars.iter().enumerate() {
            current.push(c);
            let boundary = matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_none_or(|n| n.is_whitespace());
            if boundary {
                push_sentence(&mut out, &mut seen, &current);
                current.clear();
            }
        }
        push_sentence(&mut out, &mut seen, &current);
    }
    out
}

fn push_sentence(out: &mut Vec<String>, seen: &mut HashSet<String>, raw: &str) {
    let normalized = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    if normalized.split(' ').filter(|w| w.chars().any(char::is_alphanumeric)).count() < 3 {
        return;
    }
    if seen.insert(normalized.to_lowercase()) {
        out.push(normalized);
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    category: String,
    template_id: u8,
    prompt: String,
    response: String,
    source: String,
    /// Seconds since the Unix epoch when the response was obtained.
    generated_at: u64,
}

/// Raw responses cached on disk, one JSON file per (category, template).
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    fn path(&self, category: &str, template_id: u8) -> PathBuf {
        let safe: String = category
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let hash = hex::encode(&<sha2::Sha256 as sha2::Digest>::digest(category.as_bytes())[..4]);
        self.dir.join(format!("{safe}-{hash}.t{template_id}.json"))
    }

    fn get(&self, category: &str, template_id: u8) -> Option<(String, String)> {
        let text = std::fs::read_to_string(self.path(category, template_id)).ok()?;
        let e: CacheEntry = serde_json::from_str(&text).ok()?;
        (e.category == category && e.template_id == template_id).then_some((e.response, e.source))
    }

    fn put(&self, req: &CompletionRequest, response: &str, source: &str) -> Result<()> {
        let generated_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let entry = CacheEntry {
            category: req.category.clone(),
            template_id: req.template_id,
            prompt: req.prompt.clone(),
            response: response.to_string(),
            source: source.to_string(),
            generated_at,
        };
        let bytes = serde_json::to_vec_pretty(&entry)?;
        atomic_write(&self.path(&req.category, req.template_id), &bytes)
    }
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    /// Sentences kept per category.
    pub k: usize,
    pub concurrency: usize,
    pub attempts: usize,
    /// First retry delay; doubled on each further retry.
    pub backoff: Duration,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            k: 5,
            concurrency: 4,
            attempts: 3,
            backoff: Duration::from_millis(500),
        }
    }
}

fn fetch_with_retries(client: &dyn EndpointClient, req: &CompletionRequest, opts: &GenerateOptions) -> Result<String> {
    let mut delay = opts.backoff;
    let mut last = String::new();
    for attempt in 0..opts.attempts.max(1) {
        if attempt > 0 {
            std::thread::sleep(delay);
            delay *= 2;
        }
        match client.complete(req) {
            Ok(text) => return Ok(text),
            Err(e) => {
                log::warn!("request for `{}` failed (attempt {}): {e}", req.category, attempt + 1);
                last = e;
            }
        }
    }
    Err(Error::Endpoint {
        category: req.category.clone(),
        reason: format!("{} attempts failed, last error: {last}", opts.attempts.max(1)),
    })
}

/// Prompts the endpoint once per category and keeps up to `k` cleaned
/// sentences. Cached responses skip the endpoint. The fixed-caption
/// template uses the rendered prompt itself as the only sentence.
pub fn generate_descriptions(
    categories: &[String],
    template: &PromptTemplate,
    client: &dyn EndpointClient,
    cache: Option<&ResponseCache>,
    opts: &GenerateOptions,
) -> Result<DescriptionSet> {
    if opts.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let requests: Vec<CompletionRequest> = categories
        .iter()
        .map(|c| {
            Ok(CompletionRequest {
                category: c.clone(),
                template_id: template.id,
                prompt: render_prompt(template, c)?,
            })
        })
        .collect::<Result<_>>()?;

    if template.is_fixed_caption() {
        return DescriptionSet::from_records(requests.into_iter().map(|r| DescriptionRecord {
            category: r.category,
            template_id: r.template_id,
            sentences: vec![r.prompt],
            source: "template".into(),
        }));
    }

    let results: Mutex<Vec<Option<Result<(String, String)>>>> =
        Mutex::new((0..requests.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..opts.concurrency.clamp(1, requests.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(req) = requests.get(i) else { break };
                let res = match cache.and_then(|c| c.get(&req.category, req.template_id)) {
                    Some(hit) => Ok(hit),
                    None => fetch_with_retries(client, req, opts).and_then(|text| {
                        if let Some(c) = cache {
                            c.put(req, &text, client.source())?;
                        }
                        Ok((text, client.source().to_string()))
                    }),
                };
                results.lock().expect("no poisoned workers")[i] = Some(res);
            });
        }
    });

    let mut records = Vec::with_capacity(requests.len());
    for (req, res) in requests.iter().zip(results.into_inner().expect("workers joined")) {
        let (raw, source) = res.expect("every request visited")?;
        let mut sentences = clean_sentences(&raw);
        if sentences.is_empty() {
            return Err(Error::Endpoint {
                category: req.category.clone(),
                reason: "response contained no usable sentences".into(),
            });
        }
        sentences.truncate(opts.k);
        records.push(DescriptionRecord {
            category: req.category.clone(),
            template_id: req.template_id,
            sentences,
            source,
        });
    }
    DescriptionSet::from_records(records)
}
