//! Viterbi forced alignment over the decoding graph.

use crate::lattice::{AlignmentPath, JointLattice, LatticeError, Move};

/// Max-probability monotone path for the lattice's label sequence.
///
/// Scores come from a backward max-completion table; the path is then read
/// off by walking forward from the source, taking the label transition on
/// equal scores. Ties therefore resolve toward earlier emission.
pub fn viterbi(lattice: &JointLattice) -> Result<AlignmentPath, LatticeError> {
    let t_n = lattice.num_frames() + 1;
    let u_n = lattice.num_labels() + 1;
    // mu(t, u) = best score from (t, u) to the sink; one stored move per node.
    let mut mu = vec![f64::NEG_INFINITY; t_n * u_n];
    let mut take_label = vec![false; t_n * u_n];
    mu[t_n * u_n - 1] = 0.0;
    for t in (0..t_n).rev() {
        for u in (0..u_n).rev() {
            if t == t_n - 1 && u == u_n - 1 {
                continue;
            }
            let via_blank = if t < lattice.num_frames() {
                lattice.blank_weight(t, u) + mu[(t + 1) * u_n + u]
            } else {
                f64::NEG_INFINITY
            };
            let via_label = if u < lattice.num_labels() {
                lattice.label_weight(t, u) + mu[t * u_n + (u + 1)]
            } else {
                f64::NEG_INFINITY
            };
            let i = t * u_n + u;
            if via_label >= via_blank && via_label > f64::NEG_INFINITY {
                mu[i] = via_label;
                take_label[i] = true;
            } else {
                mu[i] = via_blank;
            }
        }
    }
    if mu[0] == f64::NEG_INFINITY {
        return Err(LatticeError::ZeroProbabilityTarget);
    }
    let mut moves = Vec::with_capacity(lattice.num_frames() + lattice.num_labels());
    let (mut t, mut u) = (0usize, 0usize);
    while t < lattice.num_frames() || u < lattice.num_labels() {
        if take_label[t * u_n + u] {
            moves.push(Move::Label);
            u += 1;
        } else {
            moves.push(Move::Blank);
            t += 1;
        }
    }
    Ok(AlignmentPath::from_moves(moves, lattice.num_frames()))
}

/// Score of a path under the lattice (sum of move weights).
pub fn path_log_prob(lattice: &JointLattice, path: &AlignmentPath) -> f64 {
    let (mut t, mut u) = (0usize, 0usize);
    let mut lp = 0.0;
    for m in &path.moves {
        match m {
            Move::Blank => {
                lp += lattice.blank_weight(t, u);
                t += 1;
            }
            Move::Label => {
                lp += lattice.label_weight(t, u);
                u += 1;
            }
        }
    }
    lp
}

/// Emission targets one frame to the left of an alignment.
///
/// Returns `(u, emit_frames[u-1] - 1)` for every 1-based token `u` whose
/// emission frame is at least 1; tokens already at frame 0 have no left
/// neighbor and are omitted.
pub fn left_shift(path: &AlignmentPath) -> Vec<(usize, usize)> {
    path.emit_frames
        .iter()
        .enumerate()
        .filter(|(_, &f)| f >= 1)
        .map(|(i, &f)| (i + 1, f - 1))
        .collect()
}
