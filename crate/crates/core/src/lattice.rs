//! Transducer decoding graph and log-semiring forward-backward.
//!
//! The graph is a grid of nodes `(t, u)` with `t in [0, T]` and `u in [0, U]`.
//! A blank move goes `(t, u) -> (t+1, u)` and consumes frame `t`; a label move
//! goes `(t, u) -> (t, u+1)` and emits the next target token. Every monotone
//! path from `(0, 0)` to `(T, U)` is an alignment of the `U` labels to the `T`
//! frames, and the total probability of the target sequence is the sum over
//! all `C(T+U, U)` such paths.
//!
//! Joint distributions exist for frames `[0, T)`; a label move in the sink
//! column `t = T` (tokens emitted after the last frame was consumed) scores
//! against the final frame's distribution, so its emission frame is `T - 1`.

use thiserror::Error;

/// Numerically stable `log(exp(a) + exp(b))`.
///
/// `-inf` is the additive identity: `logaddexp(-inf, x) = x`.
#[inline]
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Stable log-sum over a slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut s = 0.0;
    for &x in xs {
        s += (x - m).exp();
    }
    m + s.ln()
}

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("target sequence has zero probability under the lattice")]
    ZeroProbabilityTarget,
    #[error("every alignment path is masked out (threshold too small)")]
    AllPathsMasked,
    #[error("instance too large for exhaustive enumeration: T+U = {size} > {max}")]
    InstanceTooLarge { size: usize, max: usize },
    #[error("invalid lattice: {0}")]
    Invalid(String),
}

/// One move along an alignment path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Blank,
    Label,
}

/// A monotone path through the decoding graph.
///
/// `emit_frames[u-1]` is the frame at which token `u` (1-based) is emitted;
/// the sequence is non-decreasing and every entry is in `[0, T)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath {
    pub moves: Vec<Move>,
    pub emit_frames: Vec<usize>,
}

impl AlignmentPath {
    /// Builds a path from its move sequence, deriving emission frames.
    ///
    /// `num_frames` is the lattice `T`; label moves in the sink column are
    /// timed at the final frame.
    pub fn from_moves(moves: Vec<Move>, num_frames: usize) -> Self {
        let mut emit_frames = Vec::new();
        let mut t = 0usize;
        for m in &moves {
            match m {
                Move::Blank => t += 1,
                Move::Label => emit_frames.push(t.min(num_frames.saturating_sub(1))),
            }
        }
        AlignmentPath { moves, emit_frames }
    }

    pub fn num_blanks(&self) -> usize {
        self.moves.iter().filter(|m| **m == Move::Blank).count()
    }

    pub fn num_labels(&self) -> usize {
        self.emit_frames.len()
    }
}

/// Per-node log-probabilities of the decoding graph for one utterance.
///
/// `logp(t, u, v)` with `t in [0, T)`, `u in [0, U]`, `v in [0, V)` is the
/// log-probability of symbol `v` at node `(t, u)`; `v = blank_id` is the
/// blank, `v = labels[u]` is the next target token.
#[derive(Debug, Clone)]
pub struct JointLattice {
    num_frames: usize,
    vocab: usize,
    blank_id: usize,
    labels: Vec<usize>,
    logp: Vec<f64>,
}

impl JointLattice {
    /// Structural construction checks; distribution checks live in [`JointLattice::validate`].
    pub fn new(
        num_frames: usize,
        vocab: usize,
        blank_id: usize,
        labels: Vec<usize>,
        logp: Vec<f64>,
    ) -> Result<Self, LatticeError> {
        if num_frames == 0 {
            return Err(LatticeError::Invalid("frame count must be positive".into()));
        }
        if vocab < 2 {
            return Err(LatticeError::Invalid("vocabulary must have at least 2 symbols".into()));
        }
        if blank_id >= vocab {
            return Err(LatticeError::Invalid(format!(
                "blank id {blank_id} out of vocabulary {vocab}"
            )));
        }
        for &y in &labels {
            if y >= vocab {
                return Err(LatticeError::Invalid(format!("label {y} out of vocabulary {vocab}")));
            }
            if y == blank_id {
                return Err(LatticeError::Invalid("labels must not contain the blank".into()));
            }
        }
        let expect = num_frames * (labels.len() + 1) * vocab;
        if logp.len() != expect {
            return Err(LatticeError::Invalid(format!(
                "logp has {} entries, expected T*(U+1)*V = {expect}",
                logp.len()
            )));
        }
        if logp.iter().any(|x| x.is_nan()) {
            return Err(LatticeError::Invalid("logp contains NaN".into()));
        }
        Ok(JointLattice { num_frames, vocab, blank_id, labels, logp })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn idx(&self, t: usize, u: usize, v: usize) -> usize {
        debug_assert!(t < self.num_frames && u <= self.labels.len() && v < self.vocab);
        (t * (self.labels.len() + 1) + u) * self.vocab + v
    }

    #[inline]
    pub fn logp(&self, t: usize, u: usize, v: usize) -> f64 {
        self.logp[self.idx(t, u, v)]
    }

    pub fn logp_raw(&self) -> &[f64] {
        &self.logp
    }

    pub fn logp_raw_mut(&mut self) -> &mut [f64] {
        &mut self.logp
    }

    /// Frame a label move in node column `col` is scored against and timed at.
    #[inline]
    pub fn emit_frame(&self, col: usize) -> usize {
        col.min(self.num_frames - 1)
    }

    /// Weight of the blank move `(t, u) -> (t+1, u)`.
    #[inline]
    pub fn blank_weight(&self, t: usize, u: usize) -> f64 {
        self.logp(t, u, self.blank_id)
    }

    /// Weight of the label move `(col, u) -> (col, u+1)` emitting token `u+1`.
    #[inline]
    pub fn label_weight(&self, col: usize, u: usize) -> f64 {
        self.logp(self.emit_frame(col), u, self.labels[u])
    }

    /// Checks that every node carries a normalized distribution (log-domain
    /// sum within `tol` of zero) and no entry is NaN.
    pub fn validate(&self, tol: f64) -> Result<(), LatticeError> {
        for t in 0..self.num_frames {
            for u in 0..=self.labels.len() {
                let base = self.idx(t, u, 0);
                let z = logsumexp(&self.logp[base..base + self.vocab]);
                if z.abs() > tol {
                    return Err(LatticeError::Invalid(format!(
                        "node ({t}, {u}) log-normalizer {z} exceeds tolerance {tol}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self) -> AlphaBeta {
        self.forward_masked(&|_, _| true)
    }

    /// Forward recursion with a per-label-move admission predicate.
    ///
    /// `allow(col, u)` gates the label move emitting token `u+1` in node
    /// column `col`; the blank moves are never gated.
    pub fn forward_masked(&self, allow: &dyn Fn(usize, usize) -> bool) -> AlphaBeta {
        let t_n = self.num_frames + 1;
        let u_n = self.labels.len() + 1;
        let mut a = vec![f64::NEG_INFINITY; t_n * u_n];
        a[0] = 0.0;
        for t in 0..t_n {
            for u in 0..u_n {
                if t == 0 && u == 0 {
                    continue;
                }
                let from_blank = if t > 0 {
                    a[(t - 1) * u_n + u] + self.blank_weight(t - 1, u)
                } else {
                    f64::NEG_INFINITY
                };
                let from_label = if u > 0 && allow(t, u - 1) {
                    a[t * u_n + (u - 1)] + self.label_weight(t, u - 1)
                } else {
                    f64::NEG_INFINITY
                };
                a[t * u_n + u] = logaddexp(from_blank, from_label);
            }
        }
        AlphaBeta { values: a, u_n }
    }

    pub fn backward(&self) -> AlphaBeta {
        self.backward_masked(&|_, _| true)
    }

    pub fn backward_masked(&self, allow: &dyn Fn(usize, usize) -> bool) -> AlphaBeta {
        let t_n = self.num_frames + 1;
        let u_n = self.labels.len() + 1;
        let mut b = vec![f64::NEG_INFINITY; t_n * u_n];
        b[(t_n - 1) * u_n + (u_n - 1)] = 0.0;
        for t in (0..t_n).rev() {
            for u in (0..u_n).rev() {
                if t == t_n - 1 && u == u_n - 1 {
                    continue;
                }
                let via_blank = if t < self.num_frames {
                    self.blank_weight(t, u) + b[(t + 1) * u_n + u]
                } else {
                    f64::NEG_INFINITY
                };
                let via_label = if u < self.labels.len() && allow(t, u) {
                    self.label_weight(t, u) + b[t * u_n + (u + 1)]
                } else {
                    f64::NEG_INFINITY
                };
                b[t * u_n + u] = logaddexp(via_blank, via_label);
            }
        }
        AlphaBeta { values: b, u_n }
    }

    /// `log Pr(labels | lattice)`: the forward total at the sink node.
    pub fn total_log_prob(&self) -> f64 {
        let alpha = self.forward();
        alpha.at(self.num_frames, self.labels.len())
    }

    /// Negative log-likelihood and its gradient with respect to every `logp` entry.
    pub fn nll_loss(&self) -> Result<LossResult, LatticeError> {
        self.masked_nll_loss(&|_, _| true).map_err(|e| match e {
            // With no mask, a -inf total means the target itself has zero probability.
            LatticeError::AllPathsMasked => LatticeError::ZeroProbabilityTarget,
            other => other,
        })
    }

    /// Shared kernel behind [`JointLattice::nll_loss`] and the constrained
    /// objective: NLL of the admitted path sum, gradient via node posteriors.
    pub(crate) fn masked_nll_loss(
        &self,
        allow: &dyn Fn(usize, usize) -> bool,
    ) -> Result<LossResult, LatticeError> {
        let t_n = self.num_frames + 1;
        let u_n = self.labels.len() + 1;
        let alpha = self.forward_masked(allow);
        let total = alpha.at(self.num_frames, self.labels.len());
        if total == f64::NEG_INFINITY {
            return Err(LatticeError::AllPathsMasked);
        }
        let beta = self.backward_masked(allow);
        let mut grad = vec![0.0; self.logp.len()];
        for t in 0..t_n {
            for u in 0..u_n {
                let a = alpha.at(t, u);
                if a == f64::NEG_INFINITY {
                    continue;
                }
                if t < self.num_frames {
                    let post = (a + self.blank_weight(t, u) + beta.at(t + 1, u) - total).exp();
                    grad[self.idx(t, u, self.blank_id)] -= post;
                }
                if u < self.labels.len() && allow(t, u) {
                    let post = (a + self.label_weight(t, u) + beta.at(t, u + 1) - total).exp();
                    grad[self.idx(self.emit_frame(t), u, self.labels[u])] -= post;
                }
            }
        }
        Ok(LossResult { loss: -total, grad })
    }

    /// Exhaustively enumerates all `C(T+U, U)` monotone paths with their
    /// exact log-probabilities. Guarded brute-force oracle for the
    /// forward-backward recursions.
    pub fn enumerate_paths(&self) -> Result<Vec<(AlignmentPath, f64)>, LatticeError> {
        const MAX_MOVES: usize = 24;
        let size = self.num_frames + self.labels.len();
        if size > MAX_MOVES {
            return Err(LatticeError::InstanceTooLarge { size, max: MAX_MOVES });
        }
        let mut out = Vec::new();
        let mut moves = Vec::with_capacity(size);
        self.enumerate_from(0, 0, 0.0, &mut moves, &mut out);
        Ok(out)
    }

    fn enumerate_from(
        &self,
        t: usize,
        u: usize,
        lp: f64,
        moves: &mut Vec<Move>,
        out: &mut Vec<(AlignmentPath, f64)>,
    ) {
        if t == self.num_frames && u == self.labels.len() {
            out.push((AlignmentPath::from_moves(moves.clone(), self.num_frames), lp));
            return;
        }
        if u < self.labels.len() {
            moves.push(Move::Label);
            self.enumerate_from(t, u + 1, lp + self.label_weight(t, u), moves, out);
            moves.pop();
        }
        if t < self.num_frames {
            moves.push(Move::Blank);
            self.enumerate_from(t + 1, u, lp + self.blank_weight(t, u), moves, out);
            moves.pop();
        }
    }
}

/// Dense `(T+1) x (U+1)` table of log-values from a forward or backward pass.
#[derive(Debug, Clone)]
pub struct AlphaBeta {
    values: Vec<f64>,
    u_n: usize,
}

impl AlphaBeta {
    #[inline]
    pub fn at(&self, t: usize, u: usize) -> f64 {
        self.values[t * self.u_n + u]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Scalar loss plus its gradient with respect to all lattice log-probabilities.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_lattice(t: usize, labels: Vec<usize>, vocab: usize) -> JointLattice {
        let p = (1.0f64 / vocab as f64).ln();
        let n = t * (labels.len() + 1) * vocab;
        JointLattice::new(t, vocab, 0, labels, vec![p; n]).unwrap()
    }

    /// T=1, U=0 lattice with Pr(blank) = 0.7.
    fn single_blank_lattice() -> JointLattice {
        JointLattice::new(1, 2, 0, vec![], vec![0.7f64.ln(), 0.3f64.ln()]).unwrap()
    }

    #[test]
    fn logaddexp_neg_infinity_is_identity() {
        assert_eq!(logaddexp(f64::NEG_INFINITY, -1.5), -1.5);
        assert_eq!(logaddexp(-1.5, f64::NEG_INFINITY), -1.5);
        assert_eq!(logaddexp(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        let r = logaddexp(2.0f64.ln(), 3.0f64.ln());
        assert!((r - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_blank_total() {
        let lat = single_blank_lattice();
        let total = lat.total_log_prob();
        assert!((total - 0.7f64.ln()).abs() < 1e-12);
        assert!((total - (-0.35667)).abs() < 1e-4);
    }

    #[test]
    fn three_path_half_lattice() {
        // T=2, U=1, every transition probability 0.5: three monotone paths,
        // each of three moves, total 3 * 0.5^3 = 0.375.
        let lat = uniform_lattice(2, vec![1], 2);
        let total = lat.total_log_prob();
        assert!((total - 0.375f64.ln()).abs() < 1e-12);
        assert!((total - (-0.98083)).abs() < 1e-4);
    }

    #[test]
    fn backward_matches_forward_total() {
        let lat = uniform_lattice(2, vec![1], 2);
        let beta = lat.backward();
        assert!((beta.at(0, 0) - lat.total_log_prob()).abs() < 1e-12);

        let single = single_blank_lattice();
        assert!((single.backward().at(0, 0) - 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn enumerate_path_counts() {
        let lat = uniform_lattice(2, vec![1], 2);
        assert_eq!(lat.enumerate_paths().unwrap().len(), 3);
        let lat = uniform_lattice(4, vec![1, 1], 2);
        assert_eq!(lat.enumerate_paths().unwrap().len(), 15);
    }

    #[test]
    fn uniform_total_is_binomial() {
        // Every path has T+U moves of probability p each.
        let t = 4;
        let labels = vec![1, 2];
        let vocab = 4;
        let lat = uniform_lattice(t, labels, vocab);
        let p = 0.25f64;
        let expect = 15.0 * p.powi(6);
        assert!((lat.total_log_prob() - expect.ln()).abs() < 1e-10);
    }

    #[test]
    fn enumerate_guard() {
        let lat = uniform_lattice(20, vec![1; 5], 2);
        match lat.enumerate_paths() {
            Err(LatticeError::InstanceTooLarge { size, max }) => {
                assert_eq!(size, 25);
                assert_eq!(max, 24);
            }
            other => panic!("expected InstanceTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn nll_single_path() {
        let lat = single_blank_lattice();
        let res = lat.nll_loss().unwrap();
        assert!((res.loss - 0.35667).abs() < 1e-4);
        assert!((res.grad[lat.idx(0, 0, 0)] - (-1.0)).abs() < 1e-12);
        assert_eq!(res.grad[lat.idx(0, 0, 1)], 0.0);
    }

    #[test]
    fn posterior_mass_is_path_length() {
        let lat = uniform_lattice(5, vec![1, 2], 3);
        let res = lat.nll_loss().unwrap();
        let mass: f64 = res.grad.iter().map(|g| -g).sum();
        assert!((mass - 7.0).abs() < 1e-9);
        let blank_mass: f64 = (0..5)
            .flat_map(|t| (0..=2).map(move |u| (t, u)))
            .map(|(t, u)| -res.grad[lat.idx(t, u, 0)])
            .sum();
        assert!((blank_mass - 5.0).abs() < 1e-9);
    }

    #[test]
    fn zero_probability_target_detected() {
        let mut lat = uniform_lattice(2, vec![1], 2);
        // Kill every label transition: the target becomes unreachable.
        for t in 0..2 {
            for u in 0..=1 {
                let i = lat.idx(t, u, 1);
                lat.logp_raw_mut()[i] = f64::NEG_INFINITY;
            }
        }
        assert_eq!(lat.nll_loss().unwrap_err(), LatticeError::ZeroProbabilityTarget);
    }

    #[test]
    fn labels_may_not_contain_blank() {
        let err = JointLattice::new(1, 2, 0, vec![0], vec![0.0; 4]).unwrap_err();
        assert!(matches!(err, LatticeError::Invalid(_)));
    }

    #[test]
    fn validate_checks_normalization() {
        let lat = uniform_lattice(2, vec![1], 2);
        assert!(lat.validate(1e-9).is_ok());
        let bad = JointLattice::new(1, 2, 0, vec![], vec![0.0, 0.0]).unwrap();
        assert!(bad.validate(1e-6).is_err());
    }

    #[test]
    fn emit_frames_derived_from_moves() {
        let p = AlignmentPath::from_moves(
            vec![Move::Blank, Move::Label, Move::Blank, Move::Label],
            2,
        );
        assert_eq!(p.emit_frames, vec![1, 1]);
        assert_eq!(p.num_blanks(), 2);
        // Sink-column emission is timed at the final frame.
        let p = AlignmentPath::from_moves(vec![Move::Blank, Move::Blank, Move::Label], 2);
        assert_eq!(p.emit_frames, vec![1]);
    }
}
