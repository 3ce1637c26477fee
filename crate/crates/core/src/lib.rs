//! Learning to construct in-context example sequences.
//!
//! A dual-encoder scorer rates "append this element next" decisions for a query; it is
//! trained contrastively from pairs of sequences that share a prefix, and at inference
//! time sequences are grown by beam search over a dot-product index of precomputed
//! suffix embeddings, with a learned terminator deciding their length.

pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod index;
pub mod oracle;
pub mod search;
pub mod text;
pub mod trainer;

pub use dataset::{
    load_dataset, CandidatePool, Example, ExampleId, ExampleSequence, Query, Record, SplitSpec,
    TaskDataset,
};
pub use encoder::{Embedding, GradientTape, ModelConfig, PrefixMode, ScorerModel};
pub use error::{Error, Result};
pub use index::SuffixIndex;
pub use trainer::{train, TrainConfig, TrainOutcome, TrainTask, TrainingPair};
pub use search::{batch_construct, construct_sequence, SearchConfig, SearchResult};
