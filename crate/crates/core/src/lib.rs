//! Weakly-supervised cross-domain aspect term extraction.
//!
//! A BiLSTM and multi-head self-attention encoder feeds two heads: a CRF
//! tagger over fully connected features for token-level aspect extraction,
//! and an attention-pooled sentence vector with per-domain category
//! classifiers. Decoders that rebuild the sentence vector from each
//! feature level tie the heads together so that category labels on the
//! target domain can shape the token features used for extraction.

pub mod autograd;
pub mod categorizer;
pub mod config;
pub mod corpus;
pub mod crf;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod extractor;
mod init;
pub mod metrics;
pub mod model;
pub mod report;
pub mod synth;
pub mod trainer;
pub mod transfer;

pub use config::ModelConfig;
pub use corpus::{BioTag, DomainCorpus, Sentence, Span, SpanSet};
pub use embeddings::{EmbeddingTable, Vocab};
pub use error::{Error, Result};
pub use metrics::F1Report;
pub use model::Model;
pub use trainer::{Ablation, Checkpoint, Trainer};
