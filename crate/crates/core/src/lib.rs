//! Composed image retrieval with progressive training and adaptive
//! modality weighting.
//!
//! Queries are a reference image plus a modification text, both given as
//! precomputed feature vectors. Small MLP encoders map each modality into a
//! shared unit-norm space, a composer fuses the two query embeddings, and
//! retrieval is exhaustive cosine search over a candidate pool.

pub mod checkpoint;
pub mod composers;
pub mod datasets;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod pipeline;
pub mod pseudo_weights;
pub mod retrieval_eval;
pub mod tensorgrad;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use composers::{Composer, ComposerKind};
pub use datasets::{
    synth_generate, AttributeCorpus, AttributeExample, Dataset, EmbeddingTable, PairExample, Slice,
    SplitSpec, SynthConfig, TripletExample,
};
pub use encoders::{AttributeHead, Embedding, EncoderParams};
pub use error::{Error, Result};
pub use losses::{LossConfig, Reduction};
pub use pseudo_weights::{LabelTable, PseudoWeight, RankTriple};
pub use retrieval_eval::{CandidateIndex, MetricsReport, RetrievalModel};
pub use tensorgrad::{DenseMat, DenseVec};
