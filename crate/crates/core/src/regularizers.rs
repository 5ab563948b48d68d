//! Delay-constraining training objectives.
//!
//! Three schemes over the same lattice NLL:
//! - constrained alignment: hard-masks label moves for word-boundary tokens
//!   emitted later than `ref_time + sigma` frames;
//! - fastemit: boosts every label-transition gradient entry by `1 + lambda`,
//!   leaving the reported loss untouched;
//! - self-alignment: adds the negative log-likelihood of emitting each token
//!   one frame left of the current Viterbi forced alignment.

use crate::align;
use crate::lattice::{AlignmentPath, JointLattice, LatticeError, LossResult};

/// Delay threshold in frames, or no constraint at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sigma {
    Frames(usize),
    Unbounded,
}

impl std::fmt::Display for Sigma {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sigma::Frames(n) => write!(f, "{n}"),
            Sigma::Unbounded => write!(f, "inf"),
        }
    }
}

impl std::str::FromStr for Sigma {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inf" | "unbounded" => Ok(Sigma::Unbounded),
            n => n
                .parse::<usize>()
                .map(Sigma::Frames)
                .map_err(|_| format!("invalid sigma {s:?}: expected a frame count or \"inf\"")),
        }
    }
}

/// Configuration for the constrained-alignment objective.
#[derive(Debug, Clone)]
pub struct ConstrainedConfig {
    pub sigma: Sigma,
    /// Vocabulary id of the word-boundary symbol; only boundary tokens are masked.
    pub boundary_token: usize,
    /// Ground-truth emission frame for each token (length U, non-decreasing).
    pub ref_times: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct FastEmitConfig {
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SelfAlignConfig {
    pub lambda: f64,
}

/// NLL of the path sum restricted to alignments that emit each word-boundary
/// token no later than `ref_time + sigma - 1`.
pub fn constrained_loss(
    lattice: &JointLattice,
    cfg: &ConstrainedConfig,
) -> Result<LossResult, LatticeError> {
    assert_eq!(
        cfg.ref_times.len(),
        lattice.num_labels(),
        "ref_times must have one entry per label"
    );
    debug_assert!(cfg.ref_times.windows(2).all(|w| w[0] <= w[1]));
    debug_assert!(cfg.ref_times.iter().all(|&t| t < lattice.num_frames()));
    match cfg.sigma {
        Sigma::Unbounded => lattice.masked_nll_loss(&|_, _| true),
        Sigma::Frames(sigma) => {
            let labels = lattice.labels();
            let allow = |col: usize, u: usize| {
                labels[u] != cfg.boundary_token
                    || lattice.emit_frame(col) < cfg.ref_times[u] + sigma
            };
            lattice.masked_nll_loss(&allow)
        }
    }
}

/// Vanilla NLL with every label-transition gradient entry scaled by
/// `1 + lambda`; blank entries and the loss value are unchanged.
pub fn fastemit_loss(
    lattice: &JointLattice,
    cfg: &FastEmitConfig,
) -> Result<LossResult, LatticeError> {
    assert!(cfg.lambda >= 0.0, "fastemit lambda must be non-negative");
    let mut res = lattice.nll_loss()?;
    let scale = 1.0 + cfg.lambda;
    for t in 0..lattice.num_frames() {
        for u in 0..lattice.num_labels() {
            res.grad[lattice.idx(t, u, lattice.labels()[u])] *= scale;
        }
    }
    Ok(res)
}

/// NLL plus `lambda` times the negative log-likelihood of emitting each token
/// one frame left of its Viterbi emission frame.
///
/// Tokens the Viterbi path already emits at frame 0 have no left neighbor and
/// contribute nothing. The path is a constant: no gradient flows through its
/// selection.
pub fn selfalign_loss(
    lattice: &JointLattice,
    cfg: &SelfAlignConfig,
    viterbi_path: &AlignmentPath,
) -> Result<LossResult, LatticeError> {
    assert!(cfg.lambda >= 0.0, "self-alignment lambda must be non-negative");
    assert_eq!(
        viterbi_path.emit_frames.len(),
        lattice.num_labels(),
        "alignment path must cover every label"
    );
    let mut res = lattice.nll_loss()?;
    if cfg.lambda == 0.0 {
        return Ok(res);
    }
    for (u, frame) in align::left_shift(viterbi_path) {
        let i = lattice.idx(frame, u - 1, lattice.labels()[u - 1]);
        res.loss -= cfg.lambda * lattice.logp_raw()[i];
        res.grad[i] -= cfg.lambda;
    }
    Ok(res)
}
