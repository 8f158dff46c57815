// SPDX-License-Identifier: Apache-2.0

//! Unsupervised cross-modal hashing over precomputed image and text
//! embeddings.
//!
//! Two small hash networks map image and text embeddings into a shared
//! `B`-bit Hamming space. They are trained with inter- and intra-modal
//! contrastive terms, an adversarial modality discriminator, and two
//! binarization penalties. Retrieval ranks packed codes by Hamming distance
//! and is scored with mAP@k and P@K.
//!
//! Module map:
//!
//! - [`data`]: embedding files, paired datasets, splits, synthetic data
//! - [`diagnostics`]: finite-difference checks of every loss term
//! - [`nn`]: dense layers, batch norm, manual backprop, Adam, checkpoints
//! - [`objectives`]: every loss term plus the binary code update
//! - [`trainer`]: the alternating training loop and dataset encoding
//! - [`hamming`]: bit-packed code index with exact top-K search
//! - [`metrics`]: AP, mAP@k, P@K and per-direction reports
//! - [`pipeline`]: encode splits and score both retrieval directions
//! - [`augment`]: rule-based caption augmentation

pub mod augment;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod hamming;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod trainer;

pub use data::{EmbeddingSet, Modality, PairedDataset, SplitSpec};
pub use error::{Error, Result};
pub use hamming::{PackedCodeIndex, QueryResult};
pub use metrics::{Direction, MetricReport, RelevanceOracle};
pub use nn::{AdamState, Network};
pub use objectives::{BatchCodes, ContrastiveConfig, LossBreakdown, LossWeights};
pub use pipeline::{evaluate_model, RetrievalReport};
pub use trainer::{CodeMatrix, HashModel, TrainConfig, TrainReport, TrainState};
