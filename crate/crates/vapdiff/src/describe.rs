//! Batch description of a dataset through the three-turn protocol, with an
//! append-only transcript store and a completed-id ledger for resuming.

use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use vapdiff_core::bank::{DescriptionRecord, PromptBank, SplitTag};
use vapdiff_core::vaps::{encode_description, run_vaps, ImageAttachment, MllmClient, Modality, TextEmbedding, TextEncoder};

use crate::dataset::{read_jsonl, Dataset, Split};
use crate::error::{Error, Result};

pub fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone)]
pub struct DescribeItem {
    pub class: usize,
    pub split: Split,
    pub attachment: ImageAttachment,
}

impl DescribeItem {
    pub fn image_id(&self) -> &str {
        &self.attachment.id
    }
}

/// Every manifest entry as a PNG attachment.
pub fn dataset_items(ds: &Dataset) -> Result<Vec<DescribeItem>> {
    ds.entries
        .iter()
        .map(|e| {
            let path = ds.image_path(e);
            let bytes = fs::read(&path).map_err(Error::io(&path))?;
            Ok(DescribeItem {
                class: e.class,
                split: e.split,
                attachment: ImageAttachment { id: e.image_id.clone(), media_type: "image/png".into(), bytes },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub image_id: String,
    pub class: usize,
    pub split: Split,
    pub modality: Modality,
    pub t1: String,
    pub t2: String,
    pub tmix: String,
    pub started_ms: u64,
    pub finished_ms: u64,
    pub exchanges: Vec<vapdiff_core::vaps::Exchange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureLine {
    pub image_id: String,
    pub error: String,
    pub at_ms: u64,
}

/// Files under one directory, per modality: `<m>.jsonl` transcripts,
/// `<m>.done` completed ids and `<m>.failures.jsonl`.
#[derive(Debug, Clone)]
pub struct TranscriptStore {
    pub dir: PathBuf,
    pub modality: Modality,
}

impl TranscriptStore {
    pub fn new(dir: &Path, modality: Modality) -> Result<Self> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        Ok(Self { dir: dir.to_path_buf(), modality })
    }

    fn file(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}{suffix}", self.modality.as_str()))
    }

    pub fn transcripts_path(&self) -> PathBuf {
        self.file(".jsonl")
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.file(".done")
    }

    pub fn failures_path(&self) -> PathBuf {
        self.file(".failures.jsonl")
    }

    pub fn completed(&self) -> Result<HashSet<String>> {
        let p = self.ledger_path();
        if !p.exists() {
            return Ok(HashSet::new());
        }
        Ok(fs::read_to_string(&p).map_err(Error::io(&p))?.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect())
    }

    /// Transcripts listed in the ledger; a later line for the same id wins.
    pub fn transcripts(&self) -> Result<Vec<TranscriptLine>> {
        let p = self.transcripts_path();
        if !p.exists() {
            return Ok(Vec::new());
        }
        let done = self.completed()?;
        let mut order = Vec::new();
        let mut latest: HashMap<String, TranscriptLine> = HashMap::new();
        for line in read_jsonl::<TranscriptLine>(&p)? {
            if done.contains(&line.image_id) {
                if !latest.contains_key(&line.image_id) {
                    order.push(line.image_id.clone());
                }
                latest.insert(line.image_id.clone(), line);
            }
        }
        Ok(order.into_iter().filter_map(|id| latest.remove(&id)).collect())
    }

    pub fn failures(&self) -> Result<Vec<FailureLine>> {
        let p = self.failures_path();
        if !p.exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&p)
    }

    fn append(path: &Path, line: &str) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(Error::io(path))?;
        f.write_all(line.as_bytes()).map_err(Error::io(path))?;
        f.write_all(b"\n").map_err(Error::io(path))?;
        f.sync_data().map_err(Error::io(path))
    }

    /// Transcript first, ledger entry second: an id is only "done" once its transcript is on disk.
    fn record(&self, line: &TranscriptLine) -> Result<()> {
        Self::append(&self.transcripts_path(), &serde_json::to_string(line).expect("transcript serializes"))?;
        Self::append(&self.ledger_path(), &line.image_id)
    }

    fn fail(&self, line: &FailureLine) -> Result<()> {
        Self::append(&self.failures_path(), &serde_json::to_string(line).expect("failure serializes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Described {
    pub transcript: TranscriptLine,
    pub embedding: TextEmbedding,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescribeSummary {
    pub described: Vec<Described>,
    pub skipped: usize,
    pub failed: Vec<FailureLine>,
}

/// Describes every item not yet in the ledger using up to `workers` threads.
/// Per-image failures are logged and skipped; more than half failing aborts.
pub fn batch_describe(
    items: &[DescribeItem],
    modality: Modality,
    client: &(dyn MllmClient + Sync),
    provider: &(dyn TextEncoder + Sync),
    workers: usize,
    store: &TranscriptStore,
) -> Result<DescribeSummary> {
    let done = store.completed()?;
    let pending: Vec<&DescribeItem> = items.iter().filter(|i| !done.contains(i.image_id())).collect();
    let skipped = items.len() - pending.len();
    let next = AtomicUsize::new(0);
    let failures = AtomicUsize::new(0);
    let out = Mutex::new((Vec::new(), Vec::new()));
    let io_error: Mutex<Option<Error>> = Mutex::new(None);
    let limit = pending.len() / 2;
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(pending.len().max(1)) {
            s.spawn(|| loop {
                if failures.load(Ordering::SeqCst) > limit || io_error.lock().unwrap().is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = pending.get(i) else { return };
                let started_ms = unix_ms();
                let result = run_vaps(&item.attachment, modality, client).and_then(|t| {
                    let emb = encode_description(&t.tmix, provider)?;
                    Ok((t, emb))
                });
                let mut guard = out.lock().unwrap();
                let written = match result {
                    Ok((t, embedding)) => {
                        let line = TranscriptLine {
                            image_id: t.image_id,
                            class: item.class,
                            split: item.split,
                            modality,
                            t1: t.t1,
                            t2: t.t2,
                            tmix: t.tmix,
                            started_ms,
                            finished_ms: unix_ms(),
                            exchanges: t.exchanges,
                        };
                        let w = store.record(&line);
                        guard.0.push(Described { transcript: line, embedding });
                        w
                    }
                    Err(e) => {
                        log::warn!("describing {} failed: {e}", item.image_id());
                        failures.fetch_add(1, Ordering::SeqCst);
                        let line = FailureLine { image_id: item.image_id().to_owned(), error: e.to_string(), at_ms: unix_ms() };
                        let w = store.fail(&line);
                        guard.1.push(line);
                        w
                    }
                };
                if let Err(e) = written {
                    io_error.lock().unwrap().get_or_insert(e);
                }
            });
        }
    });
    if let Some(e) = io_error.into_inner().unwrap() {
        return Err(e);
    }
    let (described, failed) = out.into_inner().unwrap();
    if failed.len() > limit && !pending.is_empty() {
        return Err(Error::DescribeAborted { failed: failed.len(), attempted: described.len() + failed.len() });
    }
    Ok(DescribeSummary { described, skipped, failed })
}

/// Builds a bank from transcripts: train-split images are seen, test-split images unseen.
/// Records keep the dataset's manifest order.
pub fn bank_from_transcripts(id: &str, ds: &Dataset, transcripts: &[TranscriptLine]) -> Result<PromptBank> {
    let by_id: HashMap<&str, &TranscriptLine> = transcripts.iter().map(|t| (t.image_id.as_str(), t)).collect();
    let mut bank = PromptBank::new(id, ds.class_count());
    for e in &ds.entries {
        if let Some(t) = by_id.get(e.image_id.as_str()) {
            let mut rec = DescriptionRecord::new(e.class, e.image_id.clone(), t.tmix.clone());
            rec.split_tag = if e.split == Split::Train { SplitTag::Seen } else { SplitTag::Unseen };
            bank.insert(rec)?;
        }
    }
    Ok(bank)
}
