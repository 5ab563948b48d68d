//! Greedy streaming decoding and word-error-rate evaluation.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("reference has zero words")]
    EmptyReference,
}

/// A stateful source of joint distributions for decoding.
///
/// One session per utterance (and per thread): `log_probs(t)` returns the
/// log-distribution over the vocabulary at frame `t` given the labels pushed
/// so far, and `push_label` advances the label context.
pub trait JointSource {
    fn num_frames(&self) -> usize;
    fn vocab(&self) -> usize;
    fn blank_id(&self) -> usize;
    fn log_probs(&mut self, frame: usize) -> Vec<f64>;
    fn push_label(&mut self, label: usize);
}

/// Decoded label sequence with per-token emission frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub emit_frames: Vec<usize>,
}

/// Frame-synchronous greedy decoding.
///
/// At each frame the argmax symbol is taken repeatedly: a label is appended
/// (recording the current frame) and the predictor advances; blank moves to
/// the next frame. After `max_symbols_per_frame` labels the frame advances
/// regardless. Argmax ties resolve to the lowest symbol id.
pub fn greedy_decode(source: &mut dyn JointSource, max_symbols_per_frame: usize) -> Hypothesis {
    assert!(max_symbols_per_frame >= 1);
    let blank = source.blank_id();
    let mut tokens = Vec::new();
    let mut emit_frames = Vec::new();
    for t in 0..source.num_frames() {
        let mut emitted = 0;
        loop {
            let dist = source.log_probs(t);
            let best = argmax(&dist);
            if best == blank {
                break;
            }
            tokens.push(best);
            emit_frames.push(t);
            source.push_label(best);
            emitted += 1;
            if emitted >= max_symbols_per_frame {
                break;
            }
        }
    }
    Hypothesis { tokens, emit_frames }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Splits a token sequence into words on the boundary symbol.
///
/// Words are the maximal runs of non-boundary tokens; empty runs (leading,
/// trailing or doubled boundaries) are dropped.
pub fn split_words(tokens: &[usize], boundary: usize) -> Vec<Vec<usize>> {
    let mut words = Vec::new();
    let mut cur = Vec::new();
    for &tok in tokens {
        if tok == boundary {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(tok);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Per-word emission times under the convention that a word is timed at its
/// final token: the closing boundary symbol when present, otherwise the last
/// token of the utterance.
pub fn word_times(tokens: &[usize], emit_frames: &[usize], boundary: usize) -> Vec<usize> {
    assert_eq!(tokens.len(), emit_frames.len());
    let mut times = Vec::new();
    let mut in_word = false;
    for (i, &tok) in tokens.iter().enumerate() {
        if tok == boundary {
            if in_word {
                times.push(emit_frames[i]);
                in_word = false;
            }
        } else {
            in_word = true;
        }
    }
    if in_word {
        times.push(*emit_frames.last().unwrap());
    }
    times
}

/// Word error rate as an exact edit-count fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerStats {
    pub edits: usize,
    pub ref_words: usize,
}

impl WerStats {
    pub fn value(&self) -> f64 {
        self.edits as f64 / self.ref_words as f64
    }
}

/// Levenshtein word error rate with unit substitution/insertion/deletion costs.
pub fn wer<W: PartialEq>(hyp: &[W], reference: &[W]) -> Result<WerStats, DecodeError> {
    if reference.is_empty() {
        return Err(DecodeError::EmptyReference);
    }
    let ops = edit_alignment(hyp, reference);
    let edits = ops.iter().filter(|op| !matches!(op, EditOp::Match(_, _))).count();
    Ok(WerStats { edits, ref_words: reference.len() })
}

/// One step of the minimum edit alignment, indices into (hyp, reference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match(usize, usize),
    Substitute(usize, usize),
    /// Hypothesis word with no reference counterpart.
    Insert(usize),
    /// Reference word missing from the hypothesis.
    Delete(usize),
}

/// Minimum edit alignment between hypothesis and reference.
///
/// Backtrace tie-break is fixed (diagonal, then deletion, then insertion) so
/// the matched pairs are deterministic.
pub fn edit_alignment<W: PartialEq>(hyp: &[W], reference: &[W]) -> Vec<EditOp> {
    let n = hyp.len();
    let m = reference.len();
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[at(i, 0)] = i;
    }
    for j in 0..=m {
        dp[at(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(hyp[i - 1] != reference[j - 1]);
            dp[at(i, j)] = (dp[at(i - 1, j - 1)] + cost)
                .min(dp[at(i - 1, j)] + 1)
                .min(dp[at(i, j - 1)] + 1);
        }
    }
    let mut ops = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(hyp[i - 1] != reference[j - 1]);
            if dp[at(i, j)] == dp[at(i - 1, j - 1)] + cost {
                ops.push(if cost == 0 {
                    EditOp::Match(i - 1, j - 1)
                } else {
                    EditOp::Substitute(i - 1, j - 1)
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && (i == 0 || dp[at(i, j)] == dp[at(i, j - 1)] + 1) {
            ops.push(EditOp::Delete(j - 1));
            j -= 1;
        } else {
            ops.push(EditOp::Insert(i - 1));
            i -= 1;
        }
    }
    ops.reverse();
    ops
}
