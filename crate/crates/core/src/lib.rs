//! Bidirectional anchored generation (BAnG) for nucleotide sequences.
//!
//! The crate implements the full stack at desk scale: vocabularies and
//! anchored tokenization, the BAnG attention mask and its baselines, a
//! small differentiable transformer (RoPE self-attention, anchored
//! sinusoidal cross-attention, frame-based geometric attention), training
//! with Adam/AMSGrad, the four generation strategies plus a random
//! baseline, the synthetic motif benchmark, and sequence metrics.

pub mod checkpoint;
pub mod frame;
pub mod maskgen;
pub mod model;
pub mod sampling;
pub mod seqcore;
pub mod seqmetrics;
pub mod structio;
pub mod synthbench;
pub mod tensor;
pub mod training;

pub use checkpoint::Checkpoint;
pub use frame::Frame;
pub use maskgen::{bang_mask, causal_mask, full_mask, position_indices, target_map};
pub use maskgen::{AttentionMask, PositionIndices, TargetMap};
pub use model::{Model, ModelConfig};
pub use seqcore::{insert_anchors, read_fasta, tokenize, write_fasta};
pub use seqcore::{AnchoredSeq, NucKind, SeqKind, SeqRecord, Vocab};
pub use training::{train, Objective, TaskSpec, TrainConfig};
