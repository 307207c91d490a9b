//! Image classifier whose instance-specific knowledge lives in a deletable
//! exemplar memory.
//!
//! Each training image owns one memory entry: a fixed key from a frozen
//! encoder and a learnable value token. The transformer backbone reads the
//! image patches together with one exemplar token; at inference the token
//! comes from the nearest keys in the memory. Removing an entry removes the
//! instance from everything the model can retrieve, so unlearning is a
//! deletion with no optimizer steps.
//!
//! Modules, bottom up:
//!
//! * [`nncore`]: tensors, reverse-mode tape, AdamW and the cosine schedule.
//! * [`membank`]: key encoder, exact cosine retrieval with tombstones,
//!   neighbor weighting.
//! * [`backbone`]: patch embedding, adapter, null tokens, input assembly,
//!   transformer forward pass.
//! * [`trainer`]: pathway dropout, retrieval regularization, joint training.
//! * [`inference`]: neighbor-ensemble prediction and late-fusion variants.
//! * [`harness`]: accuracy, membership inference, average gap, pathway
//!   sensitivity, model selection, KNN and retrain baselines.
//! * [`datagen`]: synthetic dataset and stratified forget sampling.
//! * [`checkpoint`]: binary container for parameters, memory and history.

pub mod backbone;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod inference;
pub mod membank;
pub mod nncore;
pub mod rng;
pub mod trainer;

pub use backbone::{BackboneConfig, BackboneParams, PathwayMask};
pub use checkpoint::{Checkpoint, EpochRecord};
pub use datagen::{Dataset, Split, SyntheticSpec};
pub use error::{Error, Result};
pub use harness::{CandidateRecord, MetricsReport, MiaAttacker};
pub use inference::{FusionStrategy, Prediction, StrategyKind};
pub use membank::{ExemplarMemory, KeyEncoder, NeighborSet};
pub use nncore::{ParamStore, Tensor};
pub use trainer::{TrainConfig, Trainer};
