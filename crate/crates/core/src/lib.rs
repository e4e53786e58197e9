//! Chunk-level retrieval-augmented extraction.
//!
//! The pipeline: split labeled sentences into fixed-length word chunks, keep
//! the two chunks most similar to the label description as keys of a
//! relational key-value memory, retrieve and diversify candidate documents
//! for a new input, rank them with a trainable chunk scorer supervised by
//! language-model likelihoods, and condition structured-output generation on
//! the single top-scored document.

pub mod embedding;
pub mod error;
pub mod extraction;
pub mod llm;
pub mod math;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod rkvm;
pub mod scorer;
mod sem;

pub use embedding::{Embedder, EmbedderBackend, EmbedderConfig, Embedding};
pub use error::{Error, Result};
pub use extraction::{
    assemble_prompt, default_template, instruction_row, parse_output, ExtractionOutput,
    InstructionRow, PromptTemplate,
};
pub use llm::{LmBackendKind, LmScoringBackend, MockRule};
pub use math::{cosine, softmax_with_temperature};
pub use metrics::{
    score_elements, score_labels, score_triples, Element, MetricsReport, MicroScore,
};
pub use model::{
    normalize_match, normalize_text, Chunk, Label, LabelInventory, SentenceRecord, Split,
    TaskKind, Triple, TripleSet,
};
pub use retrieval::{
    diversify, knn_baseline, nearest_example, retrieve_pairs, retrieve_top_n, DiversityMode,
    DocumentCandidate, Provenance, RetrievedPair,
};
pub use rkvm::{build_memory, split_chunks, KeyValuePair, Memory};
pub use scorer::{
    build_candidates, lm_likelihoods, loss, loss_and_grad, projected_similarities,
    score_documents, select_document, trace_to_csv, train_scorer, CandidateConfig,
    LmLikelihoods, LossMode, ScorerCheckpoint, ScorerParams, SelectionMode, TrainConfig,
    TrainOutcome,
};

/// Scalar type used for stored embedding coordinates.
pub type EmbedScalar = f32;
/// Scalar type used for scorer parameters, similarities, and training math.
pub type TrainScalar = f64;
