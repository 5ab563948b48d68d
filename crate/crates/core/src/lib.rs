//! Streaming-transducer alignment lattices with emission-delay regularization.
//!
//! The crate provides:
//! - [`lattice`]: the decoding graph, log-semiring forward-backward, NLL
//!   gradients, and an exhaustive path-enumeration oracle;
//! - [`regularizers`]: constrained alignment, fastemit gradient boosting, and
//!   the self-alignment left-shift penalty;
//! - [`align`]: Viterbi forced alignment with backtrace;
//! - [`decode`]: greedy streaming decoding and word-error-rate;
//! - [`metrics`]: mean/RMS alignment-delay metrics and evaluation reports;
//! - [`model`]: a small recurrent transducer with exact manual
//!   backpropagation and a deterministic training loop;
//! - [`data`]: a synthetic aligned-corpus generator with exact ground-truth
//!   emission times;
//! - [`check`]: enumeration and finite-difference self-check suites.

pub mod align;
pub mod check;
pub mod data;
pub mod decode;
pub mod lattice;
pub mod metrics;
pub mod model;
pub mod regularizers;

pub use align::{left_shift, viterbi};
pub use data::{Corpus, CorpusSpec, Utterance, BLANK_ID, BOUNDARY_ID};
pub use decode::{greedy_decode, wer, Hypothesis};
pub use lattice::{AlignmentPath, JointLattice, LatticeError, LossResult, Move};
pub use metrics::{evaluate, mean_delay, rms_delay, DelayReport, EvalConfig};
pub use model::{
    load_checkpoint, save_checkpoint, train, ModelConfig, OptimizerState, Scheme, TrainConfig,
    TrainOutcome, TransducerParams,
};
pub use regularizers::{
    constrained_loss, fastemit_loss, selfalign_loss, ConstrainedConfig, FastEmitConfig,
    SelfAlignConfig, Sigma,
};
