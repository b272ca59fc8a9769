//! Multi-worker corpus diversification with resumable progress.
//!
//! Every dialogue draws from its own id-derived rng, so the result does not
//! depend on how work is spread across workers. Finished dialogues are
//! appended to an optional progress log; a rerun skips them.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use divtod_core::diversify::{diversify_one, DiversifyError};
use divtod_core::{Backend, Corpus, Dialogue, DiversifyConfig, DiversifyRecord, FewShotPool};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};

#[derive(Debug, thiserror::Error)]
pub enum ParallelError {
    #[error(transparent)]
    Diversify(#[from] DiversifyError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("progress log entry {0} is not in the input corpus")]
    StaleProgress(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEntry {
    pub source_id: String,
    pub dialogue: Dialogue,
    pub record: DiversifyRecord,
}

fn load_progress(path: &Path) -> Result<BTreeMap<String, ProgressEntry>, IoError> {
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    Ok(io::read_jsonl::<ProgressEntry>(path)?.into_iter().map(|e| (e.source_id.clone(), e)).collect())
}

/// Diversifies `corpus` on `workers` threads. Output follows input order.
pub fn diversify_parallel<B: Backend + Sync + ?Sized>(
    backend: &B,
    corpus: &Corpus,
    pool: &FewShotPool,
    cfg: &DiversifyConfig,
    workers: usize,
    progress: Option<&Path>,
) -> Result<(Corpus, Vec<DiversifyRecord>), ParallelError> {
    pool.validate()?;
    cfg.validate()?;
    let done = match progress {
        Some(p) => load_progress(p)?,
        None => BTreeMap::new(),
    };
    if let Some(id) = done.keys().find(|id| corpus.get(id).is_none()) {
        return Err(ParallelError::StaleProgress(id.clone()));
    }
    if !done.is_empty() {
        log::info!("resuming: {} of {} dialogues already done", done.len(), corpus.len());
    }
    let log_lock = Mutex::new(());
    let threads = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| ParallelError::Pool(e.to_string()))?;
    let results: Vec<Result<(Dialogue, DiversifyRecord), IoError>> = threads.install(|| {
        corpus
            .dialogues()
            .par_iter()
            .map(|d| {
                if let Some(e) = done.get(d.id()) {
                    return Ok((e.dialogue.clone(), e.record.clone()));
                }
                let (out, record) = diversify_one(backend, d, pool, cfg);
                if let Some(p) = progress {
                    // aborted dialogues are retried on the next run
                    if record.aborted.is_none() {
                        let entry = ProgressEntry { source_id: d.id().to_string(), dialogue: out.clone(), record: record.clone() };
                        let _guard = log_lock.lock().expect("progress lock");
                        io::append_jsonl(p, &entry)?;
                    }
                }
                Ok((out, record))
            })
            .collect()
    });
    let mut dialogues = Vec::with_capacity(results.len());
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        let (d, rec) = r?;
        dialogues.push(d);
        records.push(rec);
    }
    let mut out = Corpus::new(dialogues).map_err(DiversifyError::from)?;
    out.meta = corpus.meta.clone();
    out.meta.insert("diversify_pass".into(), cfg.pass.to_string());
    Ok((out, records))
}
