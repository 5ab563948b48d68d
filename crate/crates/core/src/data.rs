//! Synthetic aligned corpus: utterances whose features render a token
//! sequence as multi-frame segments with noise, with exact ground-truth
//! emission times.
//!
//! Each token occupies `d` consecutive frames of a class-dependent template
//! plus Gaussian noise. With probability `future_cue_prob` a content token is
//! rendered ambiguously: its first `d - 1` frames use the midpoint of its
//! template and a confusable partner's, and only the final frame shows the
//! true template. A causal model therefore gains real accuracy by waiting
//! until a segment ends, which is exactly the delay pressure the
//! regularizers are meant to counteract.
//!
//! Vocabulary convention: id 0 is the blank (never appears in labels or
//! features), id 1 is the word-boundary symbol, ids `2..V` are content
//! classes. Ground-truth emission time of a token is the last frame of its
//! segment; word times are the emission frames of each word's final token
//! (its boundary symbol when present, else the last token of the utterance).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const BLANK_ID: usize = 0;
pub const BOUNDARY_ID: usize = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One synthetic utterance with generator ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub num_frames: usize,
    pub feat_dim: usize,
    pub labels: Vec<usize>,
    /// Last frame of each token's segment (strictly increasing).
    pub token_end_frames: Vec<usize>,
    /// Emission frame of each word's final token.
    pub word_times: Vec<usize>,
    /// Row-major `num_frames x feat_dim`.
    pub features: Vec<f64>,
}

impl Utterance {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.features[t * self.feat_dim..(t + 1) * self.feat_dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    /// Vocabulary size including blank and boundary.
    pub vocab: usize,
    pub feat_dim: usize,
    /// Token segment length range in frames.
    pub d_min: usize,
    pub d_max: usize,
    pub noise_std: f64,
    /// Probability a content token is only disambiguated by its final frame.
    pub future_cue_prob: f64,
    pub words_min: usize,
    pub words_max: usize,
    pub tokens_per_word_min: usize,
    pub tokens_per_word_max: usize,
    /// Norm of each class template; the noise-to-signal dial.
    pub template_scale: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 17,
            num_train: 2000,
            num_dev: 200,
            num_test: 200,
            vocab: 12,
            feat_dim: 8,
            d_min: 2,
            d_max: 5,
            noise_std: 0.3,
            future_cue_prob: 0.5,
            words_min: 3,
            words_max: 8,
            tokens_per_word_min: 1,
            tokens_per_word_max: 3,
            template_scale: 1.0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.d_min < 1 {
            return Err(DataError::InvalidSpec("d_min must be at least 1".into()));
        }
        if self.d_min > self.d_max {
            return Err(DataError::InvalidSpec("d_min must not exceed d_max".into()));
        }
        if self.vocab < 4 {
            return Err(DataError::InvalidSpec(
                "vocab must be at least 4 (blank, boundary, two content classes)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.future_cue_prob) {
            return Err(DataError::InvalidSpec("future_cue_prob must be in [0, 1]".into()));
        }
        if self.noise_std < 0.0 {
            return Err(DataError::InvalidSpec("noise_std must be non-negative".into()));
        }
        if self.words_min < 1 || self.words_min > self.words_max {
            return Err(DataError::InvalidSpec("word count range is empty".into()));
        }
        if self.tokens_per_word_min < 1 || self.tokens_per_word_min > self.tokens_per_word_max {
            return Err(DataError::InvalidSpec("tokens-per-word range is empty".into()));
        }
        if self.feat_dim < 1 {
            return Err(DataError::InvalidSpec("feat_dim must be positive".into()));
        }
        if self.template_scale <= 0.0 {
            return Err(DataError::InvalidSpec("template_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn num_content_classes(&self) -> usize {
        self.vocab - 2
    }
}

/// Train/dev/test splits of generated utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream ^ splitmix64(index))))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per sample keeps the draw count fixed.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const STREAM_TEMPLATES: u64 = 0x7e3a_11c3_9d24_5afb;

/// Per-class feature templates; `None` for the blank, which is never rendered.
pub fn class_templates(spec: &CorpusSpec) -> Vec<Option<Vec<f64>>> {
    let mut rng = derived_rng(spec.seed, STREAM_TEMPLATES, 0);
    let mut out = vec![None; spec.vocab];
    for slot in out.iter_mut().skip(1) {
        let mut v: Vec<f64> = (0..spec.feat_dim).map(|_| gaussian(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x *= spec.template_scale / norm;
        }
        *slot = Some(v);
    }
    out
}

/// Confusable partner of a renderable class, when one exists.
///
/// Content classes are paired consecutively (2-3, 4-5, ...); with an odd
/// number of content classes the last one has no partner and is never
/// rendered ambiguously. The word boundary is paired with the first content
/// class, so word timing also depends on end-of-segment evidence.
pub fn confusable_partner(spec: &CorpusSpec, class: usize) -> Option<usize> {
    if class == BOUNDARY_ID {
        return Some(2);
    }
    if class < 2 || class >= spec.vocab {
        return None;
    }
    let k = class - 2;
    let partner = if k % 2 == 0 { k + 1 } else { k - 1 };
    if partner < spec.num_content_classes() {
        Some(partner + 2)
    } else {
        None
    }
}

const STREAM_TRAIN: u64 = 1;
const STREAM_DEV: u64 = 2;
const STREAM_TEST: u64 = 3;

fn generate_utterance(
    spec: &CorpusSpec,
    templates: &[Option<Vec<f64>>],
    stream: u64,
    prefix: &str,
    index: usize,
) -> Utterance {
    let mut rng = derived_rng(spec.seed, stream, index as u64);
    let num_words = rng.gen_range(spec.words_min..=spec.words_max);
    let mut labels = Vec::new();
    for w in 0..num_words {
        let n_tok = rng.gen_range(spec.tokens_per_word_min..=spec.tokens_per_word_max);
        for _ in 0..n_tok {
            labels.push(rng.gen_range(2..spec.vocab));
        }
        if w + 1 < num_words {
            labels.push(BOUNDARY_ID);
        }
    }

    let mut features = Vec::new();
    let mut token_end_frames = Vec::with_capacity(labels.len());
    let mut t = 0usize;
    for &class in &labels {
        let d = rng.gen_range(spec.d_min..=spec.d_max);
        let partner = confusable_partner(spec, class);
        let ambiguous = partner.is_some() && rng.gen_range(0.0..1.0) < spec.future_cue_prob;
        let tpl = templates[class].as_ref().unwrap();
        for k in 0..d {
            let use_mix = ambiguous && k + 1 < d;
            for f in 0..spec.feat_dim {
                let base = if use_mix {
                    0.5 * (tpl[f] + templates[partner.unwrap()].as_ref().unwrap()[f])
                } else {
                    tpl[f]
                };
                features.push(base + spec.noise_std * gaussian(&mut rng));
            }
        }
        t += d;
        token_end_frames.push(t - 1);
    }

    let word_times = crate::decode::word_times(&labels, &token_end_frames, BOUNDARY_ID);
    Utterance {
        id: format!("{prefix}-{index:04}"),
        num_frames: t,
        feat_dim: spec.feat_dim,
        labels,
        token_end_frames,
        word_times,
        features,
    }
}

/// Generates the full corpus. Deterministic in the spec; utterances are
/// produced in parallel from per-utterance derived seeds, so thread count
/// does not change the output.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus, DataError> {
    spec.validate()?;
    let templates = class_templates(spec);
    let gen_split = |stream: u64, prefix: &str, n: usize| -> Vec<Utterance> {
        (0..n)
            .into_par_iter()
            .map(|i| generate_utterance(spec, &templates, stream, prefix, i))
            .collect()
    };
    Ok(Corpus {
        train: gen_split(STREAM_TRAIN, "train", spec.num_train),
        dev: gen_split(STREAM_DEV, "dev", spec.num_dev),
        test: gen_split(STREAM_TEST, "test", spec.num_test),
    })
}

/// Writes utterances as line-delimited JSON, one utterance per line.
pub fn save_utterances(utts: &[Utterance], path: &Path) -> Result<(), DataError> {
    let io_err = |e: std::io::Error| DataError::Io { path: path.display().to_string(), source: e };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for u in utts {
        let line = serde_json::to_string(u)
            .map_err(|e| DataError::Parse { line: 0, msg: e.to_string() })?;
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads utterances back from line-delimited JSON.
pub fn load_utterances(path: &Path) -> Result<Vec<Utterance>, DataError> {
    let io_err = |e: std::io::Error| DataError::Io { path: path.display().to_string(), source: e };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance = serde_json::from_str(&line)
            .map_err(|e| DataError::Parse { line: i + 1, msg: e.to_string() })?;
        if u.features.len() != u.num_frames * u.feat_dim {
            return Err(DataError::Parse {
                line: i + 1,
                msg: format!(
                    "feature payload {} does not match {} x {}",
                    u.features.len(),
                    u.num_frames,
                    u.feat_dim
                ),
            });
        }
        if u.token_end_frames.len() != u.labels.len() {
            return Err(DataError::Parse {
                line: i + 1,
                msg: "token_end_frames must have one entry per label".into(),
            });
        }
        out.push(u);
    }
    Ok(out)
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| DataError::Io { path: dir.display().to_string(), source: e })?;
    save_utterances(&corpus.train, &dir.join("train.jsonl"))?;
    save_utterances(&corpus.dev, &dir.join("dev.jsonl"))?;
    save_utterances(&corpus.test, &dir.join("test.jsonl"))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, DataError> {
    Ok(Corpus {
        train: load_utterances(&dir.join("train.jsonl"))?,
        dev: load_utterances(&dir.join("dev.jsonl"))?,
        test: load_utterances(&dir.join("test.jsonl"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> CorpusSpec {
        CorpusSpec {
            num_train: 6,
            num_dev: 3,
            num_test: 3,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_durations_give_arithmetic_end_frames() {
        let spec = CorpusSpec {
            d_min: 3,
            d_max: 3,
            words_min: 1,
            words_max: 1,
            tokens_per_word_min: 2,
            tokens_per_word_max: 2,
            num_train: 1,
            num_dev: 0,
            num_test: 0,
            ..CorpusSpec::default()
        };
        let c = generate(&spec).unwrap();
        assert_eq!(c.train[0].token_end_frames, vec![2, 5]);
        assert_eq!(c.train[0].num_frames, 6);
    }

    #[test]
    fn clean_corpus_is_frame_separable() {
        let spec = CorpusSpec {
            noise_std: 0.0,
            future_cue_prob: 0.0,
            num_train: 5,
            num_dev: 0,
            num_test: 0,
            ..CorpusSpec::default()
        };
        let c = generate(&spec).unwrap();
        let templates = class_templates(&spec);
        for u in &c.train {
            for (tok, &end) in u.labels.iter().zip(&u.token_end_frames) {
                let frame = u.frame(end);
                let mut best = (f64::INFINITY, 0usize);
                for (class, tpl) in templates.iter().enumerate() {
                    if let Some(tpl) = tpl {
                        let d2: f64 =
                            tpl.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum();
                        if d2 < best.0 {
                            best = (d2, class);
                        }
                    }
                }
                assert_eq!(best.1, *tok, "nearest template must recover the class");
            }
        }
    }

    #[test]
    fn invariants_hold_on_generated_utterances() {
        let c = generate(&tiny_spec()).unwrap();
        for u in c.train.iter().chain(&c.dev).chain(&c.test) {
            assert!(u.token_end_frames.windows(2).all(|w| w[0] < w[1]));
            assert!(*u.token_end_frames.last().unwrap() <= u.num_frames - 1);
            assert!(!u.labels.contains(&BLANK_ID));
            let boundaries = u.labels.iter().filter(|&&l| l == BOUNDARY_ID).count();
            assert_eq!(u.word_times.len(), boundaries + 1);
            assert_eq!(
                u.word_times,
                crate::decode::word_times(&u.labels, &u.token_end_frames, BOUNDARY_ID)
            );
        }
    }

    #[test]
    fn split_ids_are_disjoint() {
        let c = generate(&tiny_spec()).unwrap();
        let mut ids: Vec<&str> = c
            .train
            .iter()
            .chain(&c.dev)
            .chain(&c.test)
            .map(|u| u.id.as_str())
            .collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&tiny_spec()).unwrap();
        save_corpus(&c, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn truncated_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let c = generate(&tiny_spec()).unwrap();
        let good = serde_json::to_string(&c.train[0]).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"id\": \"tr")).unwrap();
        match load_utterances(&path) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_utterances(&path).unwrap().is_empty());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = tiny_spec();
        s.d_min = 0;
        assert!(matches!(generate(&s), Err(DataError::InvalidSpec(m)) if m.contains("d_min")));
        let mut s = tiny_spec();
        s.future_cue_prob = 1.5;
        assert!(generate(&s).is_err());
        let mut s = tiny_spec();
        s.vocab = 3;
        assert!(generate(&s).is_err());
    }
}
