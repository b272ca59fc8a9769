//! Allocation-only core of `divtod`: the dialogue data model, the LLM
//! generate-filter loop, a small tape-based autograd with a BERT-style
//! encoder, context/future self-training, downstream task heads and the
//! evaluation metrics.
//!
//! Nothing in this crate touches the filesystem, the network or threads.
//! The `divtod` crate layers IO, concurrency and the command line on top.

#![no_std]
#![deny(rustdoc::broken_intra_doc_links)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod corpus;
pub mod diversify;
pub mod downstream;
pub mod gateway;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod tokenizer;

pub use corpus::{Corpus, CorpusError, Dialogue, Origin, Role, SerializedDialogue, Utterance};
pub use diversify::{DiversifyConfig, DiversifyRecord, FewShotPool, MaskedDialogue};
pub use gateway::{Backend, Capabilities, Choice, CompletionResult, GatewayError, GenerationConfig};
pub use metrics::MetricReport;
pub use pretrain::{EncoderConfig, SelfTrainState, TrainConfig};
