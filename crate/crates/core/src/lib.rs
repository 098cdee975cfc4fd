//! Robust multiple-instance hashing.
//!
//! Bags of feature vectors are mapped to short binary codes so that bags with
//! the same label land close together in Hamming space. Training minimises a
//! neighbourhood-components objective whose pairwise distance is a per-bit
//! Huber penalty, which bounds the pull any single mislabelled bag can exert.

pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod net;
pub mod numeric;
pub mod retrieval;
pub mod train;

pub use data::{Bag, BagDataset, SimilarityMatrix};
pub use error::{Error, Result};
pub use net::{ForwardTrace, Gradients, HashCode, ModelParams, PoolMode};
pub use numeric::{Matrix, Rng};
pub use retrieval::{EvalReport, IndexMode, IndexedBag, RetrievalIndex};
pub use train::{Checkpoint, TrainConfig, TrainLog};
