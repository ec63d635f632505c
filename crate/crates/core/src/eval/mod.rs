//! Word similarity, lexical substitution and topic coherence.

mod coherence;
mod lexsub;
mod similarity;

use thiserror::Error;

pub use coherence::{npmi, npmi_coherence, TopicCoherence, WindowCounts, COHERENCE_WINDOW};
pub use lexsub::{baladd, eval_lexsub, parse_lexsub, LexsubInstance, LexsubMode, LexsubResult};
pub use similarity::{average_ranks, eval_word_similarity, spearman, SimBenchmark, SimResult};

use crate::inference::InferenceError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need at least two paired values, got {0}")]
    TooShort(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("ranks have zero variance")]
    ZeroVariance,
    #[error("no benchmark pair is covered by the embeddings")]
    NoCoverage,
    #[error("context is empty")]
    EmptyContext,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Inference(#[from] InferenceError),
}
