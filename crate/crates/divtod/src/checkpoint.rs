//! Weight files and model directories.
//!
//! `weights.bin` is `DIVTODW1`, a u32 store count, then per store a u32
//! tensor count and per tensor: u32 name length, UTF-8 name, u32 rows,
//! u32 cols and `rows * cols` little-endian f32 values.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use divtod_core::downstream::{ActPredictor, DualEncoder, IntentClassifier, Ontology, StateTracker, Task, TaskModel};
use divtod_core::nn::ParamStore;
use divtod_core::pretrain::PretrainError;
use divtod_core::tensor::Matrix;
use divtod_core::tokenizer::Tokenizer;
use divtod_core::{EncoderConfig, SelfTrainState};
use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};

pub const MAGIC: &[u8; 8] = b"DIVTODW1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}: not a weights file or truncated")]
    Format(String),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error("{0}")]
    Mismatch(String),
}

pub fn encode_stores(stores: &[&ParamStore<f32>]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((stores.len() as u32).to_le_bytes());
    for s in stores {
        out.extend((s.len() as u32).to_le_bytes());
        for (name, m) in s.iter() {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((m.rows() as u32).to_le_bytes());
            out.extend((m.cols() as u32).to_le_bytes());
            for v in m.as_slice() {
                out.extend(v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_stores(bytes: &[u8]) -> Option<Vec<ParamStore<f32>>> {
    let mut c = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    c.read_exact(&mut magic).ok()?;
    if &magic != MAGIC {
        return None;
    }
    let u32_at = |c: &mut Cursor<&[u8]>| -> Option<usize> {
        let mut b = [0u8; 4];
        c.read_exact(&mut b).ok()?;
        Some(u32::from_le_bytes(b) as usize)
    };
    let n_stores = u32_at(&mut c)?;
    let mut stores = Vec::with_capacity(n_stores.min(16));
    for _ in 0..n_stores {
        let n = u32_at(&mut c)?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = u32_at(&mut c)?;
            let mut name = vec![0u8; len];
            c.read_exact(&mut name).ok()?;
            let (rows, cols) = (u32_at(&mut c)?, u32_at(&mut c)?);
            let count = rows.checked_mul(cols)?;
            if count > bytes.len() / 4 {
                return None;
            }
            let mut data = vec![0u8; count * 4];
            c.read_exact(&mut data).ok()?;
            let values = data.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            store.add(String::from_utf8(name).ok()?, Matrix::from_vec(rows, cols, values));
        }
        stores.push(store);
    }
    if c.position() as usize != bytes.len() {
        return None;
    }
    Some(stores)
}

fn write_weights(path: &Path, stores: &[&ParamStore<f32>]) -> Result<(), CheckpointError> {
    fs::write(path, encode_stores(stores)).map_err(|e| IoError::fs(path, e).into())
}

fn read_weights(path: &Path, expected: usize) -> Result<Vec<ParamStore<f32>>, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| IoError::fs(path, e))?;
    let stores = decode_stores(&bytes).ok_or_else(|| CheckpointError::Format(path.display().to_string()))?;
    if stores.len() != expected {
        return Err(CheckpointError::Format(path.display().to_string()));
    }
    Ok(stores)
}

fn same_layout(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|((na, ma), (nb, mb))| na == nb && ma.rows() == mb.rows() && ma.cols() == mb.cols())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub step: usize,
    pub dev_ppl: Option<f64>,
    pub encoder: EncoderConfig,
}

/// Writes `weights.bin`, `checkpoint.json` and `vocab.json` into `dir`.
pub fn save_pretrained(dir: &Path, state: &SelfTrainState<f32>, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|e| IoError::fs(dir, e))?;
    write_weights(&dir.join("weights.bin"), &[&state.student, &state.predictor_params])?;
    io::write_json(&dir.join("vocab.json"), &state.tokenizer)?;
    io::write_json(&dir.join("checkpoint.json"), meta)?;
    Ok(())
}

pub fn load_pretrained(dir: &Path) -> Result<(SelfTrainState<f32>, CheckpointMeta), CheckpointError> {
    let meta: CheckpointMeta = io::read_json(&dir.join("checkpoint.json"))?;
    let tokenizer: Tokenizer = io::read_json(&dir.join("vocab.json"))?;
    let mut stores = read_weights(&dir.join("weights.bin"), 2)?;
    let predictor = stores.pop().expect("two stores");
    let student = stores.pop().expect("two stores");
    let state = SelfTrainState::from_parts(meta.encoder.clone(), tokenizer, student, predictor, meta.step)?;
    Ok((state, meta))
}

/// Everything needed to rebuild a fine-tuned model besides its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub task: Task,
    pub config_hash: String,
    pub encoder: EncoderConfig,
    pub head_dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ontology: Option<Ontology>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

pub enum TaskArtifact {
    Intent(IntentClassifier<f32>),
    Dst(StateTracker<f32>),
    Act(ActPredictor<f32>),
    ResponseSelection(DualEncoder<f32>),
}

impl TaskArtifact {
    pub fn model(&self) -> &TaskModel<f32> {
        match self {
            TaskArtifact::Intent(m) => &m.model,
            TaskArtifact::Dst(m) => &m.model,
            TaskArtifact::Act(m) => &m.model,
            TaskArtifact::ResponseSelection(m) => &m.model,
        }
    }
}

pub fn save_task(dir: &Path, model: &TaskModel<f32>, meta: &TaskMeta) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|e| IoError::fs(dir, e))?;
    write_weights(&dir.join("weights.bin"), &[&model.params, &model.head_params])?;
    io::write_json(&dir.join("vocab.json"), &model.tokenizer)?;
    io::write_json(&dir.join("task.json"), meta)?;
    Ok(())
}

pub fn load_task(dir: &Path) -> Result<(TaskArtifact, TaskMeta), CheckpointError> {
    let meta: TaskMeta = io::read_json(&dir.join("task.json"))?;
    let tokenizer: Tokenizer = io::read_json(&dir.join("vocab.json"))?;
    let mut stores = read_weights(&dir.join("weights.bin"), 2)?;
    let heads = stores.pop().expect("two stores");
    let encoder = stores.pop().expect("two stores");
    let template = SelfTrainState::<f32>::new(meta.encoder.clone(), tokenizer, 0)?;
    let mut model = TaskModel::from_state(&template, &meta.head_dims, 0);
    if !same_layout(&model.params, &encoder) || !same_layout(&model.head_params, &heads) {
        return Err(CheckpointError::Mismatch(format!("{}: weights do not match task.json", dir.display())));
    }
    model.params = encoder;
    model.head_params = heads;
    let missing = |what: &str| CheckpointError::Mismatch(format!("{}: task.json lacks {what}", dir.display()));
    let artifact = match meta.task {
        Task::Intent => TaskArtifact::Intent(IntentClassifier { model, num_classes: meta.num_classes.ok_or_else(|| missing("num_classes"))?, ood_class: meta.ood_class }),
        Task::Dst => TaskArtifact::Dst(StateTracker { model, ontology: meta.ontology.clone().ok_or_else(|| missing("ontology"))? }),
        Task::Act => TaskArtifact::Act(ActPredictor { num_acts: meta.head_dims.first().copied().unwrap_or(0), threshold: meta.threshold.ok_or_else(|| missing("threshold"))?, model }),
        Task::ResponseSelection => TaskArtifact::ResponseSelection(DualEncoder { model }),
    };
    Ok((artifact, meta))
}
