//! Corpus and record files.
//!
//! Corpora are JSONL, one dialogue per line. Their metadata lives in a
//! `<path>.meta.json` sidecar so the corpus lines stay byte-stable; wall
//! clock facts go to a separate `<path>.run.json`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use divtod_core::{Corpus, CorpusError, Dialogue, Role};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Corpus { path: PathBuf, source: CorpusError },
}

impl IoError {
    pub fn fs(path: &Path, source: std::io::Error) -> Self {
        IoError::Fs { path: path.to_path_buf(), source }
    }

    /// Bad input as opposed to a failing filesystem.
    pub fn is_validation(&self) -> bool {
        !matches!(self, IoError::Fs { .. })
    }
}

pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| IoError::fs(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| IoError::fs(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = File::open(path).map_err(|e| IoError::fs(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IoError::fs(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| IoError::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IoError> {
    let mut w = create(path)?;
    for item in items {
        let line = serde_json::to_string(item).expect("serializable");
        writeln!(w, "{line}").map_err(|e| IoError::fs(path, e))?;
    }
    w.flush().map_err(|e| IoError::fs(path, e))
}

/// Appends one line and flushes, for progress logs that must survive a crash.
pub fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<(), IoError> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| IoError::fs(path, e))?;
    let line = serde_json::to_string(item).expect("serializable");
    writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| IoError::fs(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::fs(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::Parse { path: path.to_path_buf(), line: e.line(), message: e.to_string() })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).expect("serializable");
    writeln!(w).and_then(|_| w.flush()).map_err(|e| IoError::fs(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Corpus, IoError> {
    let dialogues: Vec<Dialogue> = read_jsonl(path)?;
    let mut corpus = Corpus::new(dialogues).map_err(|source| IoError::Corpus { path: path.to_path_buf(), source })?;
    let meta = sidecar(path, ".meta.json");
    if meta.exists() {
        corpus.meta = read_json(&meta)?;
    }
    Ok(corpus)
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<(), IoError> {
    write_jsonl(path, corpus.dialogues())?;
    write_json(&sidecar(path, ".meta.json"), &corpus.meta)
}

/// Timing and host facts kept apart from the deterministic outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub started_unix: u64,
    pub elapsed_secs: f64,
}

pub fn write_run_info(path: &Path, info: &RunInfo) -> Result<(), IoError> {
    write_json(&sidecar(path, ".run.json"), info)
}

/// One raw dialogue as found in external dumps.
#[derive(Debug, Clone, Deserialize)]
pub struct RawDialogue {
    pub id: String,
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub domains: Vec<String>,
    pub turns: Vec<RawTurn>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RawTurn {
    #[serde(alias = "speaker")]
    pub role: String,
    #[serde(alias = "utterance")]
    pub text: String,
}

fn parse_role(s: &str) -> Option<Role> {
    match s.to_ascii_lowercase().as_str() {
        "user" | "usr" | "customer" => Some(Role::User),
        "system" | "sys" | "agent" | "assistant" => Some(Role::System),
        _ => None,
    }
}

/// Normalizes a raw JSONL dump into a corpus. Dialogues that normalize to
/// nothing are skipped and counted.
pub fn ingest_raw(path: &Path, default_dataset: &str) -> Result<(Corpus, usize), IoError> {
    let raws: Vec<RawDialogue> = read_jsonl(path)?;
    let mut dialogues = Vec::with_capacity(raws.len());
    let mut skipped = 0;
    for (i, raw) in raws.into_iter().enumerate() {
        let mut turns = Vec::with_capacity(raw.turns.len());
        for t in &raw.turns {
            let role = parse_role(&t.role).ok_or_else(|| IoError::Parse { path: path.to_path_buf(), line: i + 1, message: format!("unknown role {:?}", t.role) })?;
            turns.push((role, t.text.as_str()));
        }
        let dataset = raw.dataset.unwrap_or_else(|| default_dataset.to_string());
        match Dialogue::normalize(raw.id, dataset, raw.domains, &turns) {
            Ok(d) => dialogues.push(d),
            Err(CorpusError::EmptyAfterNormalization { id }) => {
                log::warn!("skipping dialogue {id}: nothing left after normalization");
                skipped += 1;
            }
            Err(source) => return Err(IoError::Corpus { path: path.to_path_buf(), source }),
        }
    }
    let corpus = Corpus::new(dialogues).map_err(|source| IoError::Corpus { path: path.to_path_buf(), source })?;
    Ok((corpus.with_meta("source", path.display().to_string()), skipped))
}

pub fn meta_from<I: IntoIterator<Item = (K, V)>, K: Into<String>, V: Into<String>>(pairs: I) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}
