//! Anomaly detection for variable-length sequences with recurrent encoders
//! trained jointly with one-class margin objectives.
//!
//! Sequences are embedded by an LSTM or GRU with pooling ([`rnn`]), and the
//! fixed-length embeddings are scored by a one-class SVM hyperplane
//! ([`ocsvm`]) or an SVDD hypersphere ([`svdd`]). The [`trainer`] fits encoder
//! and head together, either by gradient descent on a smoothed primal with
//! orthogonality-preserving encoder updates ([`stiefel`]) or by alternating an
//! SMO dual solve with encoder updates. [`eval`] provides ROC/AUC and
//! cross-validation.

pub mod data;
pub mod dual;
pub mod eval;
pub mod ocsvm;
pub mod rng;
pub mod rnn;
mod serde_vec;
pub mod stiefel;
pub mod svdd;
pub mod trainer;

pub use data::{Label, NormalizationStats, Sequence, SequenceBatch};
pub use rnn::{CellKind, Embedding, PoolingMode, RnnParams};
pub use trainer::{StopReason, TrainConfig, TrainedDetector};
