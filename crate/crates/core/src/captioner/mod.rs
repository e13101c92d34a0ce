//! Per-image descriptions from a vision-language model, cached on disk.
//!
//! The cache is a JSON-lines file keyed by `(image_path, prompt, model_id)`.
//! Lookups are cache-first; a provider is queried only on a miss and the
//! answer is appended and flushed before it is returned.

mod providers;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetIndex, ImageRecord, Split};
use crate::error::{Error, Result};

pub use providers::{CommandProvider, HttpProvider, StubProvider};

pub const INDUSTRIAL_PROMPT: &str = "Describe the main object in detail.";
pub const NATURAL_PROMPT: &str = "Describe the visual features of image in detail.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Caption training images only; reconstruct test images unconditionally.
    #[default]
    Industrial,
    /// Caption train and test images with the same prompt.
    Natural,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "industrial" => Ok(Mode::Industrial),
            "natural" => Ok(Mode::Natural),
            _ => Err(Error::Config(format!("unknown mode {s:?} (industrial|natural)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub mode: Mode,
    pub train_prompt: String,
    pub inference_prompt: Option<String>,
}

impl PromptConfig {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Industrial => Self {
                mode,
                train_prompt: INDUSTRIAL_PROMPT.into(),
                inference_prompt: None,
            },
            Mode::Natural => Self {
                mode,
                train_prompt: NATURAL_PROMPT.into(),
                inference_prompt: Some(NATURAL_PROMPT.into()),
            },
        }
    }

    /// Industrial-mode ablation: also describe test images, with the
    /// training prompt, so inference can be conditioned.
    pub fn with_inference_captions(mut self) -> Self {
        if self.inference_prompt.is_none() {
            self.inference_prompt = Some(self.train_prompt.clone());
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let canonical = Self::for_mode(self.mode);
        if self.train_prompt != canonical.train_prompt {
            return Err(Error::Config(format!(
                "{:?} mode uses the training prompt {:?}",
                self.mode, canonical.train_prompt
            )));
        }
        match &self.inference_prompt {
            None if self.mode == Mode::Natural => Err(Error::Config(
                "natural mode conditions inference on captions".into(),
            )),
            Some(p) if *p != self.train_prompt => Err(Error::Config(
                "inference prompt must equal the training prompt".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    /// Dataset-root-relative image path.
    pub image_path: String,
    pub prompt: String,
    pub caption: String,
    pub model_id: String,
    pub created_at: DateTime<Utc>,
}

type Key = (String, String, String);

/// Anything that can describe an image given a prompt.
pub trait CaptionProvider: Send + Sync {
    fn model_id(&self) -> &str;
    /// Returns the raw description text, or a failure message.
    fn describe(&self, image: &Path, prompt: &str) -> std::result::Result<String, String>;
}

/// Append-only JSON-lines caption store.
#[derive(Debug)]
pub struct CaptionCache {
    path: PathBuf,
    records: RwLock<HashMap<Key, CaptionRecord>>,
    writer: Mutex<File>,
}

impl CaptionCache {
    /// Opens (creating if needed) the cache. A torn final line left by an
    /// interrupted write is skipped.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut records = HashMap::new();
        let mut needs_newline = false;
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CaptionRecord>(&line) {
                    Ok(r) => {
                        records.insert((r.image_path.clone(), r.prompt.clone(), r.model_id.clone()), r);
                    }
                    Err(e) => {
                        log::warn!("{}: skipping unreadable cache line: {e}", path.display());
                        needs_newline = true;
                    }
                }
            }
        }
        let mut writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if needs_newline {
            writer.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            records: RwLock::new(records),
            writer: Mutex::new(writer),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.records.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, image_path: &str, prompt: &str, model_id: &str) -> Option<CaptionRecord> {
        self.records
            .read()
            .unwrap()
            .get(&(image_path.to_string(), prompt.to_string(), model_id.to_string()))
            .cloned()
    }

    pub fn insert(&self, record: CaptionRecord) -> Result<()> {
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        {
            let mut w = self.writer.lock().unwrap();
            w.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
            w.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        self.records.write().unwrap().insert(
            (record.image_path.clone(), record.prompt.clone(), record.model_id.clone()),
            record,
        );
        Ok(())
    }
}

/// Cache-first lookup; queries `provider` once on a miss.
pub fn get_caption(
    record: &ImageRecord,
    root: &Path,
    prompt: &str,
    provider: &dyn CaptionProvider,
    cache: &CaptionCache,
) -> Result<CaptionRecord> {
    Ok(lookup_or_query(record, root, prompt, provider, cache)?.0)
}

fn lookup_or_query(
    record: &ImageRecord,
    root: &Path,
    prompt: &str,
    provider: &dyn CaptionProvider,
    cache: &CaptionCache,
) -> Result<(CaptionRecord, bool)> {
    let key = record.key(root);
    if let Some(hit) = cache.get(&key, prompt, provider.model_id()) {
        return Ok((hit, true));
    }
    let fail = |msg: String| Error::Provider {
        path: record.path.clone(),
        msg,
    };
    let text = provider.describe(&record.path, prompt).map_err(fail)?;
    let text = text.trim();
    if text.is_empty() {
        return Err(fail("provider returned an empty description".into()));
    }
    let rec = CaptionRecord {
        image_path: key,
        prompt: prompt.to_string(),
        caption: text.to_string(),
        model_id: provider.model_id().to_string(),
        created_at: Utc::now(),
    };
    cache.insert(rec.clone())?;
    Ok((rec, false))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaptionStats {
    pub hits: usize,
    pub misses: usize,
    /// `(image path, reason)` for every record left without a caption.
    pub failures: Vec<(PathBuf, String)>,
}

/// The `(record id, prompt)` pairs a prompt configuration requires.
pub fn caption_targets(index: &DatasetIndex, prompts: &PromptConfig) -> Vec<(usize, String)> {
    index
        .records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| match (r.split, &prompts.inference_prompt) {
            (Split::Train, _) => Some((i, prompts.train_prompt.clone())),
            (Split::Test, Some(p)) => Some((i, p.clone())),
            (Split::Test, None) => None,
        })
        .collect()
}

/// Captions every record the prompt configuration needs, with up to
/// `concurrency` provider calls in flight. Failures are collected, not fatal.
pub fn caption_dataset(
    index: &DatasetIndex,
    prompts: &PromptConfig,
    provider: &dyn CaptionProvider,
    cache: &CaptionCache,
    concurrency: usize,
) -> Result<CaptionStats> {
    if concurrency == 0 {
        return Err(Error::Config("caption concurrency must be >= 1".into()));
    }
    let targets = caption_targets(index, prompts);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<bool>)>> = Mutex::new(Vec::with_capacity(targets.len()));
    std::thread::scope(|s| {
        for _ in 0..concurrency.min(targets.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((id, prompt)) = targets.get(i) else { break };
                let r = lookup_or_query(&index.records[*id], &index.root, prompt, provider, cache)
                    .map(|(_, hit)| hit);
                results.lock().unwrap().push((i, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    let mut stats = CaptionStats::default();
    for (i, r) in results {
        match r {
            Ok(true) => stats.hits += 1,
            Ok(false) => stats.misses += 1,
            Err(Error::Provider { path, msg }) => {
                stats.misses += 1;
                stats.failures.push((path, msg));
            }
            Err(e) => {
                stats.misses += 1;
                stats.failures.push((index.records[targets[i].0].path.clone(), e.to_string()));
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize_shapes_dataset, SynthConfig};
    use std::collections::HashSet;
    use std::sync::atomic::AtomicUsize;

    struct Counting<P> {
        inner: P,
        calls: AtomicUsize,
        fail_on: Mutex<HashSet<String>>,
        reply: Option<String>,
    }

    impl<P: CaptionProvider> Counting<P> {
        fn new(inner: P) -> Self {
            Self {
                inner,
                calls: AtomicUsize::new(0),
                fail_on: Mutex::new(HashSet::new()),
                reply: None,
            }
        }
        fn calls(&self) -> usize {
            self.calls.load(Ordering::SeqCst)
        }
    }

    impl<P: CaptionProvider> CaptionProvider for Counting<P> {
        fn model_id(&self) -> &str {
            self.inner.model_id()
        }
        fn describe(&self, image: &Path, prompt: &str) -> std::result::Result<String, String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let name = image.file_name().unwrap().to_string_lossy().into_owned();
            if self.fail_on.lock().unwrap().contains(&name) {
                return Err("scripted failure".into());
            }
            if let Some(r) = &self.reply {
                return Ok(r.clone());
            }
            self.inner.describe(image, prompt)
        }
    }

    fn dataset(n_train: usize) -> (tempfile::TempDir, DatasetIndex) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_train,
            n_test_normal: 1,
            n_test_anomalous: 1,
            resolution: (32, 32),
            ..Default::default()
        };
        let idx = synthesize_shapes_dataset(&cfg, &dir.path().join("data")).unwrap();
        (dir, idx)
    }

    #[test]
    fn prompt_invariants() {
        let ind = PromptConfig::for_mode(Mode::Industrial);
        assert_eq!(ind.train_prompt, "Describe the main object in detail.");
        assert!(ind.inference_prompt.is_none());
        let nat = PromptConfig::for_mode(Mode::Natural);
        assert_eq!(nat.train_prompt, "Describe the visual features of image in detail.");
        assert_eq!(nat.inference_prompt.as_deref(), Some(nat.train_prompt.as_str()));
        ind.validate().unwrap();
        nat.validate().unwrap();
        let mut bad = nat.clone();
        bad.inference_prompt = None;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn second_call_hits_cache() {
        let (dir, idx) = dataset(2);
        let cache = CaptionCache::open(&dir.path().join("captions.jsonl")).unwrap();
        let p = Counting::new(StubProvider::from_root(&idx.root).unwrap());
        let a = get_caption(&idx.records[0], &idx.root, INDUSTRIAL_PROMPT, &p, &cache).unwrap();
        let b = get_caption(&idx.records[0], &idx.root, INDUSTRIAL_PROMPT, &p, &cache).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.calls(), 1);
        assert!(a.caption.starts_with("a circle of color "));
        assert!(a.caption.ends_with(" on plain background"));
    }

    #[test]
    fn whitespace_caption_is_a_failure_and_not_cached() {
        let (dir, idx) = dataset(1);
        let cache = CaptionCache::open(&dir.path().join("captions.jsonl")).unwrap();
        let mut p = Counting::new(StubProvider::from_root(&idx.root).unwrap());
        p.reply = Some("  \n\t ".into());
        let err = get_caption(&idx.records[0], &idx.root, INDUSTRIAL_PROMPT, &p, &cache).unwrap_err();
        assert!(matches!(err, Error::Provider { .. }));
        assert!(cache.is_empty());
    }

    #[test]
    fn caption_dataset_counts_and_retries() {
        let (dir, idx) = dataset(10);
        let cache_path = dir.path().join("captions.jsonl");
        let prompts = PromptConfig::for_mode(Mode::Industrial);
        let p = Counting::new(StubProvider::from_root(&idx.root).unwrap());
        p.fail_on.lock().unwrap().extend(["003.png".to_string(), "007.png".to_string()]);
        {
            let cache = CaptionCache::open(&cache_path).unwrap();
            let stats = caption_dataset(&idx, &prompts, &p, &cache, 3).unwrap();
            assert_eq!(stats.misses, 10);
            assert_eq!(stats.hits, 0);
            let failed: Vec<String> = stats
                .failures
                .iter()
                .map(|(p, _)| p.file_name().unwrap().to_string_lossy().into_owned())
                .collect();
            assert_eq!(failed, vec!["003.png", "007.png"]);
        }
        p.fail_on.lock().unwrap().clear();
        let before = p.calls();
        let cache = CaptionCache::open(&cache_path).unwrap();
        let stats = caption_dataset(&idx, &prompts, &p, &cache, 3).unwrap();
        assert_eq!(p.calls() - before, 2);
        assert_eq!((stats.hits, stats.misses), (8, 2));
        assert!(stats.failures.is_empty());

        let stats = caption_dataset(&idx, &prompts, &p, &cache, 1).unwrap();
        assert_eq!((stats.hits, stats.misses), (10, 0));
        assert_eq!(p.calls() - before, 2);
    }

    #[test]
    fn natural_mode_also_captions_test_images() {
        let (dir, idx) = dataset(3);
        let cache = CaptionCache::open(&dir.path().join("c.jsonl")).unwrap();
        let p = StubProvider::from_root(&idx.root).unwrap();
        let stats =
            caption_dataset(&idx, &PromptConfig::for_mode(Mode::Natural), &p, &cache, 2).unwrap();
        assert_eq!(stats.misses, 5);
    }

    #[test]
    fn cache_roundtrip_survives_torn_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let rec = CaptionRecord {
            image_path: "a/b.png".into(),
            prompt: "p".into(),
            caption: "ünïcode \"quoted\" caption\twith tab".into(),
            model_id: "m".into(),
            created_at: Utc::now(),
        };
        {
            let c = CaptionCache::open(&path).unwrap();
            c.insert(rec.clone()).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"image_path\": \"trunc").unwrap();
        drop(f);
        let c = CaptionCache::open(&path).unwrap();
        assert_eq!(c.get("a/b.png", "p", "m").unwrap().caption, rec.caption);
        let mut rec2 = rec.clone();
        rec2.image_path = "c.png".into();
        c.insert(rec2).unwrap();
        drop(c);
        let c = CaptionCache::open(&path).unwrap();
        assert_eq!(c.len(), 2);
    }
}
