//! End-to-end model behavior: causality, regularizer linearity, neutral
//! reductions, and a small memorization fixture.

use rnnt_delay::data::{self, CorpusSpec};
use rnnt_delay::decode;
use rnnt_delay::model::{
    train, ModelConfig, Scheme, TrainConfig, TransducerParams,
};
use rnnt_delay::regularizers::{selfalign_loss, SelfAlignConfig, Sigma};
use rnnt_delay::viterbi;

fn tiny_params(seed: u64) -> TransducerParams {
    TransducerParams::init(ModelConfig { feat_dim: 3, hidden: 4, vocab: 5, blank_id: 0 }, seed)
}

#[test]
fn encoder_is_strictly_causal() {
    let params = tiny_params(31);
    let t_n = 7;
    let labels = vec![1, 2];
    let features: Vec<f64> = (0..t_n * 3).map(|i| (i as f64 * 0.31).sin()).collect();
    let (base, _) = params.forward_joint(&features, t_n, &labels);
    for t0 in 0..t_n {
        let mut perturbed = features.clone();
        for f in 0..3 {
            perturbed[t0 * 3 + f] += 0.37;
        }
        let (lat, _) = params.forward_joint(&perturbed, t_n, &labels);
        for t in 0..t_n {
            for u in 0..=labels.len() {
                for v in 0..5 {
                    let same = lat.logp(t, u, v).to_bits() == base.logp(t, u, v).to_bits();
                    if t < t0 {
                        assert!(same, "frame {t} changed after perturbing frame {t0}");
                    }
                }
            }
        }
        // The perturbed frame itself must influence its own column.
        let changed = (0..=labels.len())
            .any(|u| (0..5).any(|v| lat.logp(t0, u, v) != base.logp(t0, u, v)));
        assert!(changed, "perturbation at frame {t0} had no effect at all");
    }
}

#[test]
fn selfalign_parameter_gradient_is_linear_in_lambda() {
    let params = tiny_params(32);
    let t_n = 6;
    let labels = vec![1, 3, 2];
    let features: Vec<f64> = (0..t_n * 3).map(|i| (i as f64 * 0.17).cos()).collect();
    let (lat, cache) = params.forward_joint(&features, t_n, &labels);
    let path = viterbi(&lat).unwrap();

    let grad_for = |lambda: f64| -> Vec<f64> {
        let res = selfalign_loss(&lat, &SelfAlignConfig { lambda }, &path).unwrap();
        params.backward_joint(&features, &labels, &lat, &cache, &res.grad)
    };
    let a = 0.05;
    let vanilla = grad_for(0.0);
    let at_a = grad_for(a);
    let at_2a = grad_for(2.0 * a);
    for i in 0..vanilla.len() {
        let predicted = vanilla[i] + 2.0 * (at_a[i] - vanilla[i]);
        assert!(
            (at_2a[i] - predicted).abs() < 1e-8,
            "param {i}: {} vs {}",
            at_2a[i],
            predicted
        );
    }
}

fn small_corpus() -> rnnt_delay::Corpus {
    data::generate(&CorpusSpec {
        num_train: 24,
        num_dev: 8,
        num_test: 8,
        words_min: 2,
        words_max: 3,
        ..CorpusSpec::default()
    })
    .unwrap()
}

fn short_cfg(scheme: Scheme) -> TrainConfig {
    TrainConfig {
        scheme,
        steps: 30,
        eval_interval: 10,
        hidden: 8,
        dev_eval_utterances: 4,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn neutral_schemes_reproduce_baseline_bit_identically() {
    let corpus = small_corpus();
    let baseline = train(&corpus, &short_cfg(Scheme::Baseline)).unwrap();
    let neutral = [
        Scheme::Constrained { sigma: Sigma::Unbounded },
        Scheme::FastEmit { lambda: 0.0 },
        Scheme::SelfAlign { lambda: 0.0 },
    ];
    for scheme in neutral {
        let run = train(&corpus, &short_cfg(scheme)).unwrap();
        assert_eq!(run.curve.len(), baseline.curve.len());
        for (a, b) in run.curve.iter().zip(&baseline.curve) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "{scheme:?} diverged from baseline");
            assert_eq!(a.dev_mean_delay_frames.to_bits(), b.dev_mean_delay_frames.to_bits());
            assert_eq!(a.dev_wer.to_bits(), b.dev_wer.to_bits());
        }
        for (a, b) in run.params.theta().iter().zip(baseline.params.theta()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn training_is_reproducible_at_fixed_seed() {
    let corpus = small_corpus();
    let a = train(&corpus, &short_cfg(Scheme::SelfAlign { lambda: 0.01 })).unwrap();
    let b = train(&corpus, &short_cfg(Scheme::SelfAlign { lambda: 0.01 })).unwrap();
    let la = a.curve.last().unwrap();
    let lb = b.curve.last().unwrap();
    assert_eq!(la.loss.to_bits(), lb.loss.to_bits());
    for (x, y) in a.params.theta().iter().zip(b.params.theta()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

/// Five-utterance memorization fixture: after convergence the greedy decode
/// reproduces the target labels exactly, word error is zero, and delays are
/// computed over every word.
#[test]
fn memorization_fixture_decodes_exactly() {
    let corpus = data::generate(&CorpusSpec {
        num_train: 5,
        num_dev: 5,
        num_test: 5,
        words_min: 2,
        words_max: 3,
        noise_std: 0.1,
        ..CorpusSpec::default()
    })
    .unwrap();
    // Memorize the train split itself.
    let fixture = rnnt_delay::Corpus {
        train: corpus.train.clone(),
        dev: corpus.train.clone(),
        test: corpus.train.clone(),
    };
    let cfg = TrainConfig {
        scheme: Scheme::Baseline,
        steps: 1500,
        eval_interval: 1500,
        hidden: 16,
        batch_size: 5,
        dev_eval_utterances: 5,
        seed: 9,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let out = train(&fixture, &cfg).unwrap();
    for u in &fixture.test {
        let mut session = out.params.decode_session(&u.features, u.num_frames);
        let hyp = decode::greedy_decode(&mut session, 10);
        assert_eq!(hyp.tokens, u.labels, "utterance {} must decode exactly", u.id);
    }
    let report = rnnt_delay::evaluate(&out.params, &fixture.test, &Default::default());
    assert_eq!(report.wer, 0.0);
    assert_eq!(report.matched_word_fraction, 1.0);
    assert!(report.mean_delay_ms.is_finite());
    let total_delays: usize =
        report.per_utterance.iter().map(|r| r.word_delays_frames.len()).sum();
    assert_eq!(total_delays, report.num_words);
}
