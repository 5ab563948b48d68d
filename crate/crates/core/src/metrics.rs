//! Alignment-delay metrics and delay/WER evaluation reports.
//!
//! Delay is predicted word time minus reference word time (late is
//! positive). The mean pools every word difference over the total word
//! count; the RMS pools the squared differences the same way, so
//! `rms^2 >= mean^2` always holds.

use crate::data::{Utterance, BOUNDARY_ID};
use crate::decode::{self, EditOp};
use crate::model::TransducerParams;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("utterance {index}: {pred} predicted vs {reference} reference words")]
    ShapeMismatch { index: usize, pred: usize, reference: usize },
    #[error("no words to aggregate")]
    EmptyInput,
}

fn pooled<F: Fn(f64) -> f64>(
    pred_times: &[Vec<i64>],
    ref_times: &[Vec<i64>],
    map: F,
) -> Result<(f64, usize), MetricsError> {
    if pred_times.len() != ref_times.len() {
        return Err(MetricsError::ShapeMismatch {
            index: pred_times.len().min(ref_times.len()),
            pred: pred_times.len(),
            reference: ref_times.len(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (k, (p, r)) in pred_times.iter().zip(ref_times).enumerate() {
        if p.len() != r.len() {
            return Err(MetricsError::ShapeMismatch { index: k, pred: p.len(), reference: r.len() });
        }
        for (&a, &b) in p.iter().zip(r) {
            sum += map((a - b) as f64);
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok((sum, n))
}

/// Mean word delay in milliseconds; sign preserved (negative = early).
pub fn mean_delay(
    pred_times: &[Vec<i64>],
    ref_times: &[Vec<i64>],
    frame_ms: f64,
) -> Result<f64, MetricsError> {
    let (sum, n) = pooled(pred_times, ref_times, |d| d)?;
    Ok(sum / n as f64 * frame_ms)
}

/// Root-mean-square word delay in milliseconds.
pub fn rms_delay(
    pred_times: &[Vec<i64>],
    ref_times: &[Vec<i64>],
    frame_ms: f64,
) -> Result<f64, MetricsError> {
    let (sum, n) = pooled(pred_times, ref_times, |d| d * d)?;
    Ok((sum / n as f64).sqrt() * frame_ms)
}

#[derive(Debug, Clone)]
pub struct UtteranceDelays {
    pub id: String,
    /// Signed frame delays of the words matched as correct.
    pub word_delays_frames: Vec<i64>,
}

/// Aggregated delay/WER evaluation of a model on a test set.
#[derive(Debug, Clone)]
pub struct DelayReport {
    pub mean_delay_ms: f64,
    pub rms_delay_ms: f64,
    pub wer: f64,
    pub num_utterances: usize,
    /// Total reference words.
    pub num_words: usize,
    /// Fraction of reference words matched as correct (delays cover only these).
    pub matched_word_fraction: f64,
    pub frame_ms: f64,
    pub per_utterance: Vec<UtteranceDelays>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub frame_ms: f64,
    pub max_symbols_per_frame: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { frame_ms: 30.0, max_symbols_per_frame: 10 }
    }
}

/// Greedy-decodes every utterance, aligns hypothesis words to reference words
/// by minimum edit distance, and pools WER plus delay over the correctly
/// recognized word pairs.
///
/// Utterances are scored in parallel; aggregation is a single order-independent
/// sum. With zero matched words the delay fields are NaN.
pub fn evaluate(params: &TransducerParams, utts: &[Utterance], cfg: &EvalConfig) -> DelayReport {
    struct PerUtt {
        id: String,
        edits: usize,
        ref_words: usize,
        delays: Vec<i64>,
    }

    let rows: Vec<PerUtt> = utts
        .par_iter()
        .map(|u| {
            let mut session = params.decode_session(&u.features, u.num_frames);
            let hyp = decode::greedy_decode(&mut session, cfg.max_symbols_per_frame);
            let hyp_words = decode::split_words(&hyp.tokens, BOUNDARY_ID);
            let hyp_times = decode::word_times(&hyp.tokens, &hyp.emit_frames, BOUNDARY_ID);
            debug_assert_eq!(hyp_words.len(), hyp_times.len());
            let ref_words = decode::split_words(&u.labels, BOUNDARY_ID);
            let ops = decode::edit_alignment(&hyp_words, &ref_words);
            let edits = ops.iter().filter(|op| !matches!(op, EditOp::Match(_, _))).count();
            let delays: Vec<i64> = ops
                .iter()
                .filter_map(|op| match op {
                    EditOp::Match(i, j) => {
                        Some(hyp_times[*i] as i64 - u.word_times[*j] as i64)
                    }
                    _ => None,
                })
                .collect();
            PerUtt { id: u.id.clone(), edits, ref_words: ref_words.len(), delays }
        })
        .collect();

    let num_words: usize = rows.iter().map(|r| r.ref_words).sum();
    let edits: usize = rows.iter().map(|r| r.edits).sum();
    let matched: usize = rows.iter().map(|r| r.delays.len()).sum();
    let delay_sum: i64 = rows.iter().flat_map(|r| r.delays.iter()).sum();
    let delay_sq_sum: f64 = rows
        .iter()
        .flat_map(|r| r.delays.iter())
        .map(|&d| (d * d) as f64)
        .sum();

    let (mean_ms, rms_ms) = if matched > 0 {
        (
            delay_sum as f64 / matched as f64 * cfg.frame_ms,
            (delay_sq_sum / matched as f64).sqrt() * cfg.frame_ms,
        )
    } else {
        (f64::NAN, f64::NAN)
    };

    DelayReport {
        mean_delay_ms: mean_ms,
        rms_delay_ms: rms_ms,
        wer: edits as f64 / num_words.max(1) as f64,
        num_utterances: utts.len(),
        num_words,
        matched_word_fraction: matched as f64 / num_words.max(1) as f64,
        frame_ms: cfg.frame_ms,
        per_utterance: rows
            .into_iter()
            .map(|r| UtteranceDelays { id: r.id, word_delays_frames: r.delays })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_delay_example() {
        let pred = vec![vec![5, 8]];
        let reference = vec![vec![3, 6]];
        assert_eq!(mean_delay(&pred, &reference, 30.0).unwrap(), 60.0);
        assert_eq!(mean_delay(&pred, &pred, 30.0).unwrap(), 0.0);
    }

    #[test]
    fn mixed_delays_example() {
        let pred = vec![vec![4, 8]];
        let reference = vec![vec![3, 5]];
        assert_eq!(mean_delay(&pred, &reference, 30.0).unwrap(), 60.0);
        let rms = rms_delay(&pred, &reference, 30.0).unwrap();
        assert!((rms - 30.0 * 5.0f64.sqrt()).abs() < 1e-9);
        assert!((rms - 67.082).abs() < 1e-3);
    }

    #[test]
    fn constant_offset_rms_equals_mean() {
        let pred = vec![vec![5, 9], vec![12]];
        let reference = vec![vec![2, 6], vec![9]];
        let m = mean_delay(&pred, &reference, 30.0).unwrap();
        let r = rms_delay(&pred, &reference, 30.0).unwrap();
        assert_eq!(m, 90.0);
        assert_eq!(r, 90.0);
    }

    #[test]
    fn symmetric_delays_cancel_in_mean_only() {
        let pred = vec![vec![5, 1]];
        let reference = vec![vec![3, 3]];
        assert_eq!(mean_delay(&pred, &reference, 30.0).unwrap(), 0.0);
        assert_eq!(rms_delay(&pred, &reference, 30.0).unwrap(), 60.0);
    }

    #[test]
    fn errors_on_bad_shapes() {
        let pred = vec![vec![1, 2]];
        let reference = vec![vec![1]];
        assert!(matches!(
            mean_delay(&pred, &reference, 30.0),
            Err(MetricsError::ShapeMismatch { .. })
        ));
        let empty: Vec<Vec<i64>> = vec![];
        assert_eq!(mean_delay(&empty, &empty, 30.0).unwrap_err(), MetricsError::EmptyInput);
    }

    #[test]
    fn metrics_scale_linearly_in_frame_ms() {
        let pred = vec![vec![4, 9, 2]];
        let reference = vec![vec![3, 5, 4]];
        let m1 = mean_delay(&pred, &reference, 10.0).unwrap();
        let m3 = mean_delay(&pred, &reference, 30.0).unwrap();
        assert!((3.0 * m1 - m3).abs() < 1e-12);
        let r1 = rms_delay(&pred, &reference, 10.0).unwrap();
        let r3 = rms_delay(&pred, &reference, 30.0).unwrap();
        assert!((3.0 * r1 - r3).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariance() {
        let pred = vec![vec![4, 9], vec![2, 7], vec![11]];
        let reference = vec![vec![3, 5], vec![4, 4], vec![10]];
        let m = mean_delay(&pred, &reference, 30.0).unwrap();
        let r = rms_delay(&pred, &reference, 30.0).unwrap();
        let perm = [2usize, 0, 1];
        let pp: Vec<Vec<i64>> = perm.iter().map(|&i| pred[i].clone()).collect();
        let rp: Vec<Vec<i64>> = perm.iter().map(|&i| reference[i].clone()).collect();
        assert_eq!(mean_delay(&pp, &rp, 30.0).unwrap(), m);
        assert_eq!(rms_delay(&pp, &rp, 30.0).unwrap(), r);
    }
}
