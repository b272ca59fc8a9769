//! Pipeline configuration file (TOML or JSON) and its hash.

use std::path::{Path, PathBuf};

use divtod_core::downstream::{FineTuneConfig, Task};
use divtod_core::{DiversifyConfig, EncoderConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::wire::WireConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config {section}: {message}")]
    Invalid { section: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub dataset: String,
    /// Sizes used by `ingest --synthetic`; the flag value overrides `train`.
    pub synthetic_train: usize,
    pub synthetic_dev: usize,
    pub synthetic_test: usize,
    pub min_freq: usize,
    pub max_vocab: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { dataset: "raw".into(), synthetic_train: 200, synthetic_dev: 40, synthetic_test: 40, min_freq: 1, max_vocab: 20_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Wire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub backend: BackendKind,
    /// Mock script; `always_true` / `always_false` name the built-ins.
    pub mock_script: String,
    /// Hidden-state width offered by the mock, `0` for none.
    pub mock_hidden_dim: usize,
    pub wire: WireConfig,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self { backend: BackendKind::Mock, mock_script: "always_true".into(), mock_hidden_dim: 0, wire: WireConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversifySection {
    /// Few-shot pool JSON; empty means the bundled pool.
    pub pool: String,
    #[serde(flatten)]
    pub settings: DiversifyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Held-out share of the training corpus used for dev perplexity when
    /// no dev corpus is given.
    pub dev_fraction: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self { encoder: EncoderConfig::toy(), train: TrainConfig::default(), dev_fraction: 0.1 }
    }
}

/// Per-task overrides on top of the task defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskOverrides {
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub eval_every_steps: Option<usize>,
    pub patience: Option<usize>,
    pub threshold: Option<f64>,
    pub max_steps: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamSection {
    /// Applies to every task before the task's own overrides.
    pub all: TaskOverrides,
    pub intent: TaskOverrides,
    pub dst: TaskOverrides,
    pub act: TaskOverrides,
    pub response_selection: TaskOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub ks: Vec<usize>,
    pub ngram_orders: Vec<usize>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { ks: vec![1, 3, 5, 10, 100], ngram_orders: vec![1, 2, 3, 4] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub gateway: GatewaySection,
    pub diversify: DiversifySection,
    pub pretrain: PretrainSection,
    pub downstream: DownstreamSection,
    pub metrics: MetricsSection,
}

fn apply(cfg: &mut FineTuneConfig, o: &TaskOverrides) {
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = o.$f { cfg.$f = v; } )* };
    }
    set!(batch_size, lr, epochs, eval_every_steps, patience, threshold, max_steps, dropout);
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        let cfg: Self = parsed.map_err(|message| ConfigError::Parse { path: path.to_path_buf(), message })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The global seed flows into every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section: &str, message: String| ConfigError::Invalid { section: section.into(), message };
        self.diversify_config().validate().map_err(|e| invalid("diversify", e.to_string()))?;
        self.pretrain.encoder.validate().map_err(|e| invalid("pretrain.encoder", e.to_string()))?;
        self.train_config().validate().map_err(|e| invalid("pretrain.train", e.to_string()))?;
        if !(0.0..1.0).contains(&self.pretrain.dev_fraction) {
            return Err(invalid("pretrain", "dev_fraction must be in [0, 1)".into()));
        }
        for t in Task::ALL {
            self.finetune_config(t).validate().map_err(|e| invalid(&format!("downstream.{}", t.name()), e.to_string()))?;
        }
        if self.metrics.ks.is_empty() || self.metrics.ks.iter().any(|&k| k == 0 || k > 100) {
            return Err(invalid("metrics", "ks must be non-empty and within 1..=100".into()));
        }
        if self.metrics.ngram_orders.iter().any(|&n| !(1..=4).contains(&n)) {
            return Err(invalid("metrics", "ngram_orders must be within 1..=4".into()));
        }
        if self.corpus.max_vocab <= divtod_core::tokenizer::Tokenizer::num_special() {
            return Err(invalid("corpus", "max_vocab leaves no room beyond the special tokens".into()));
        }
        Ok(())
    }

    pub fn diversify_config(&self) -> DiversifyConfig {
        DiversifyConfig { seed: self.seed, ..self.diversify.settings.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.pretrain.train.clone() }
    }

    pub fn finetune_config(&self, task: Task) -> FineTuneConfig {
        let mut cfg = FineTuneConfig { seed: self.seed, ..FineTuneConfig::for_task(task) };
        apply(&mut cfg, &self.downstream.all);
        let own = match task {
            Task::Intent => &self.downstream.intent,
            Task::Dst => &self.downstream.dst,
            Task::Act => &self.downstream.act,
            Task::ResponseSelection => &self.downstream.response_selection,
        };
        apply(&mut cfg, own);
        cfg
    }

    /// 16 hex characters of SHA-256 over the canonical JSON form (sorted
    /// keys, no whitespace).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("serializable");
        let canonical = serde_json::to_string(&value).expect("serializable");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 1\n[pretrain.train]\nbatch_sise = 3\n").unwrap();
        match PipelineConfig::load(&p) {
            Err(ConfigError::Parse { message, .. }) => assert!(message.contains("batch_sise"), "{message}"),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "[diversify]\nmax_tries = 3\nbogus = 1\n").unwrap();
        assert!(PipelineConfig::load(&p).is_err());
    }

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "seed = 4\n[diversify]\nmax_tries = 3\n[downstream.all]\nmax_steps = 10\n[downstream.act]\nthreshold = 0.4\n").unwrap();
        let a = PipelineConfig::load(&t).unwrap();
        assert_eq!(a.diversify_config().max_tries, 3);
        assert_eq!(a.diversify_config().seed, 4);
        assert_eq!(a.finetune_config(Task::Act).threshold, 0.4);
        assert_eq!(a.finetune_config(Task::Intent).max_steps, 10);
        let j = dir.path().join("c.json");
        std::fs::write(&j, serde_json::to_string(&a).unwrap()).unwrap();
        let b = PipelineConfig::load(&j).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        assert_eq!(a.hash().len(), 16);
        assert_eq!(a.hash(), PipelineConfig::default().hash());
        assert_ne!(a.hash(), a.clone().with_seed(1).hash());
    }

    #[test]
    fn semantic_validation() {
        let mut c = PipelineConfig::default();
        c.metrics.ks = vec![0];
        assert!(matches!(c.validate(), Err(ConfigError::Invalid { .. })));
        let mut c = PipelineConfig::default();
        c.downstream.response_selection.batch_size = Some(1);
        assert!(c.validate().is_err());
    }
}
