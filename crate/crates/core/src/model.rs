//! Small streaming transducer with exact manual backpropagation.
//!
//! Architecture: a single-layer causal tanh-recurrent encoder over feature
//! frames, a token-embedding plus tanh-recurrent predictor over label
//! history, and an additive joiner (`tanh` of summed projections, then a
//! linear map to vocabulary logits, then log-softmax). All parameters live in
//! one flat vector so optimizer state and finite-difference checks stay
//! simple.

use crate::align;
use crate::data::{Corpus, Utterance};
use crate::decode::{self, JointSource};
use crate::lattice::{logsumexp, JointLattice, LatticeError, LossResult};
use crate::regularizers::{
    constrained_loss, fastemit_loss, selfalign_loss, ConstrainedConfig, FastEmitConfig,
    SelfAlignConfig, Sigma,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training loss diverged at step {step}")]
    DivergedLoss { step: usize },
    #[error("lattice failure during training: {0}")]
    Lattice(#[from] LatticeError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub blank_id: usize,
}

/// Offsets of each weight block inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    enc_w_in: usize,  // H x F
    enc_w_rec: usize, // H x H
    enc_b: usize,     // H
    embed: usize,     // V x H
    pred_w_in: usize, // H x H
    pred_w_rec: usize, // H x H
    pred_b: usize,    // H
    join_enc: usize,  // H x H
    join_pred: usize, // H x H
    join_b: usize,    // H
    out_w: usize,     // V x H
    out_b: usize,     // V
    len: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Layout {
        let (f, h, v) = (cfg.feat_dim, cfg.hidden, cfg.vocab);
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        Layout {
            enc_w_in: take(h * f),
            enc_w_rec: take(h * h),
            enc_b: take(h),
            embed: take(v * h),
            pred_w_in: take(h * h),
            pred_w_rec: take(h * h),
            pred_b: take(h),
            join_enc: take(h * h),
            join_pred: take(h * h),
            join_b: take(h),
            out_w: take(v * h),
            out_b: take(v),
            len: off,
        }
    }
}

/// `out += W x` for row-major `W` of shape `rows x cols`.
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        let mut s = 0.0;
        for (a, b) in row.iter().zip(x) {
            s += a * b;
        }
        *o += s;
    }
}

/// `out += W^T y` for row-major `W` of shape `rows x cols`.
fn matvec_t_acc(w: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (i, &yi) in y.iter().enumerate() {
        if yi == 0.0 {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += yi * a;
        }
    }
}

/// `W += a b^T` (outer product accumulate).
fn outer_acc(w: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let row = &mut w[i * cols..(i + 1) * cols];
        for (o, bj) in row.iter_mut().zip(b) {
            *o += ai * bj;
        }
    }
}

fn add_scaled(out: &mut [f64], x: &[f64], s: f64) {
    for (o, a) in out.iter_mut().zip(x) {
        *o += s * a;
    }
}

/// Activations cached by [`TransducerParams::forward_joint`] for the backward pass.
#[derive(Debug, Clone)]
pub struct JointCache {
    /// `T x H` encoder states.
    pub enc_h: Vec<f64>,
    /// `(U+1) x H` predictor states (`g_0` is the zero state).
    pub pred_g: Vec<f64>,
    /// `T x (U+1) x H` joiner tanh outputs.
    pub joint_r: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TransducerParams {
    pub config: ModelConfig,
    theta: Vec<f64>,
    layout: Layout,
}

impl TransducerParams {
    pub fn zeros(config: ModelConfig) -> TransducerParams {
        let layout = Layout::new(&config);
        TransducerParams { config, theta: vec![0.0; layout.len], layout }
    }

    /// Xavier-style uniform init, deterministic in the seed.
    pub fn init(config: ModelConfig, seed: u64) -> TransducerParams {
        let mut p = TransducerParams::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, h, v) = (config.feat_dim, config.hidden, config.vocab);
        let blocks: [(usize, usize, usize); 12] = [
            (p.layout.enc_w_in, h * f, f + h),
            (p.layout.enc_w_rec, h * h, h + h),
            (p.layout.enc_b, h, usize::MAX), // biases stay zero
            (p.layout.embed, v * h, v + h),
            (p.layout.pred_w_in, h * h, h + h),
            (p.layout.pred_w_rec, h * h, h + h),
            (p.layout.pred_b, h, usize::MAX),
            (p.layout.join_enc, h * h, h + h),
            (p.layout.join_pred, h * h, h + h),
            (p.layout.join_b, h, usize::MAX),
            (p.layout.out_w, v * h, h + v),
            (p.layout.out_b, v, usize::MAX),
        ];
        for (off, n, fan) in blocks {
            if fan == usize::MAX {
                continue;
            }
            let a = (6.0 / fan as f64).sqrt();
            for i in 0..n {
                p.theta[off + i] = rng.gen_range(-a..a);
            }
        }
        p
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn block(&self, off: usize, n: usize) -> &[f64] {
        &self.theta[off..off + n]
    }

    /// Encoder states for a feature matrix (`num_frames x feat_dim`).
    fn encode(&self, features: &[f64], num_frames: usize) -> Vec<f64> {
        let (f, h) = (self.config.feat_dim, self.config.hidden);
        assert_eq!(features.len(), num_frames * f);
        let w_in = self.block(self.layout.enc_w_in, h * f);
        let w_rec = self.block(self.layout.enc_w_rec, h * h);
        let b = self.block(self.layout.enc_b, h);
        let mut out = vec![0.0; num_frames * h];
        let mut prev = vec![0.0; h];
        for t in 0..num_frames {
            let mut pre = b.to_vec();
            matvec_acc(w_in, &features[t * f..(t + 1) * f], &mut pre);
            matvec_acc(w_rec, &prev, &mut pre);
            for (o, x) in out[t * h..(t + 1) * h].iter_mut().zip(&pre) {
                *o = x.tanh();
            }
            prev.copy_from_slice(&out[t * h..(t + 1) * h]);
        }
        out
    }

    /// Predictor states `g_0 .. g_U` for a label history.
    fn predict(&self, labels: &[usize]) -> Vec<f64> {
        let h = self.config.hidden;
        let w_in = self.block(self.layout.pred_w_in, h * h);
        let w_rec = self.block(self.layout.pred_w_rec, h * h);
        let b = self.block(self.layout.pred_b, h);
        let mut out = vec![0.0; (labels.len() + 1) * h];
        for (u, &y) in labels.iter().enumerate() {
            let emb = self.block(self.layout.embed + y * h, h);
            let (done, rest) = out.split_at_mut((u + 1) * h);
            let prev = &done[u * h..(u + 1) * h];
            let mut pre = b.to_vec();
            matvec_acc(w_in, emb, &mut pre);
            matvec_acc(w_rec, prev, &mut pre);
            for (o, x) in rest[..h].iter_mut().zip(&pre) {
                *o = x.tanh();
            }
        }
        out
    }

    fn joint_logp(&self, ph: &[f64], pg: &[f64], r_out: &mut [f64], z_out: &mut [f64]) {
        let h = self.config.hidden;
        let v = self.config.vocab;
        let out_w = self.block(self.layout.out_w, v * h);
        let out_b = self.block(self.layout.out_b, v);
        let join_b = self.block(self.layout.join_b, h);
        for i in 0..h {
            r_out[i] = (ph[i] + pg[i] + join_b[i]).tanh();
        }
        z_out.copy_from_slice(out_b);
        matvec_acc(out_w, r_out, z_out);
        let z = logsumexp(z_out);
        for x in z_out.iter_mut() {
            *x -= z;
        }
    }

    /// Full joint lattice for an utterance, with cached activations.
    pub fn forward_joint(
        &self,
        features: &[f64],
        num_frames: usize,
        labels: &[usize],
    ) -> (JointLattice, JointCache) {
        let h = self.config.hidden;
        let v = self.config.vocab;
        let u_n = labels.len() + 1;
        let enc_h = self.encode(features, num_frames);
        let pred_g = self.predict(labels);

        // Pre-project both sides once; the joiner sum is then O(H) per node.
        let join_enc = self.block(self.layout.join_enc, h * h);
        let join_pred = self.block(self.layout.join_pred, h * h);
        let mut ph = vec![0.0; num_frames * h];
        for t in 0..num_frames {
            matvec_acc(join_enc, &enc_h[t * h..(t + 1) * h], &mut ph[t * h..(t + 1) * h]);
        }
        let mut pg = vec![0.0; u_n * h];
        for u in 0..u_n {
            matvec_acc(join_pred, &pred_g[u * h..(u + 1) * h], &mut pg[u * h..(u + 1) * h]);
        }

        let mut logp = vec![0.0; num_frames * u_n * v];
        let mut joint_r = vec![0.0; num_frames * u_n * h];
        let mut z = vec![0.0; v];
        for t in 0..num_frames {
            for u in 0..u_n {
                let node = t * u_n + u;
                self.joint_logp(
                    &ph[t * h..(t + 1) * h],
                    &pg[u * h..(u + 1) * h],
                    &mut joint_r[node * h..(node + 1) * h],
                    &mut z,
                );
                logp[node * v..(node + 1) * v].copy_from_slice(&z);
            }
        }
        let lattice = JointLattice::new(num_frames, v, self.config.blank_id, labels.to_vec(), logp)
            .expect("model produces a structurally valid lattice");
        (lattice, JointCache { enc_h, pred_g, joint_r })
    }

    /// Exact parameter gradients for a loss given as `d loss / d logp`.
    pub fn backward_joint(
        &self,
        features: &[f64],
        labels: &[usize],
        lattice: &JointLattice,
        cache: &JointCache,
        lattice_grad: &[f64],
    ) -> Vec<f64> {
        let (f, h, v) = (self.config.feat_dim, self.config.hidden, self.config.vocab);
        let num_frames = lattice.num_frames();
        let u_n = labels.len() + 1;
        assert_eq!(lattice_grad.len(), num_frames * u_n * v);

        let mut grad = vec![0.0; self.theta.len()];
        let out_w = self.block(self.layout.out_w, v * h);
        let join_enc = self.block(self.layout.join_enc, h * h);
        let join_pred = self.block(self.layout.join_pred, h * h);

        // Joiner stage: accumulate into the projected-side gradients first.
        let mut d_ph = vec![0.0; num_frames * h];
        let mut d_pg = vec![0.0; u_n * h];
        let mut dz = vec![0.0; v];
        let mut ds = vec![0.0; h];
        for t in 0..num_frames {
            for u in 0..u_n {
                let node = t * u_n + u;
                let g = &lattice_grad[node * v..(node + 1) * v];
                if g.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let lp = &lattice.logp_raw()[node * v..(node + 1) * v];
                let gsum: f64 = g.iter().sum();
                for i in 0..v {
                    dz[i] = g[i] - lp[i].exp() * gsum;
                }
                let r = &cache.joint_r[node * h..(node + 1) * h];
                outer_acc(&mut grad[self.layout.out_w..self.layout.out_w + v * h], &dz, r);
                add_scaled(&mut grad[self.layout.out_b..self.layout.out_b + v], &dz, 1.0);
                ds.iter_mut().for_each(|x| *x = 0.0);
                matvec_t_acc(out_w, &dz, &mut ds);
                for i in 0..h {
                    ds[i] *= 1.0 - r[i] * r[i];
                }
                add_scaled(&mut grad[self.layout.join_b..self.layout.join_b + h], &ds, 1.0);
                add_scaled(&mut d_ph[t * h..(t + 1) * h], &ds, 1.0);
                add_scaled(&mut d_pg[u * h..(u + 1) * h], &ds, 1.0);
            }
        }

        // Projections down to the recurrent states.
        let mut d_enc_h = vec![0.0; num_frames * h];
        for t in 0..num_frames {
            let dp = &d_ph[t * h..(t + 1) * h];
            outer_acc(
                &mut grad[self.layout.join_enc..self.layout.join_enc + h * h],
                dp,
                &cache.enc_h[t * h..(t + 1) * h],
            );
            matvec_t_acc(join_enc, dp, &mut d_enc_h[t * h..(t + 1) * h]);
        }
        let mut d_pred_g = vec![0.0; u_n * h];
        for u in 0..u_n {
            let dp = &d_pg[u * h..(u + 1) * h];
            outer_acc(
                &mut grad[self.layout.join_pred..self.layout.join_pred + h * h],
                dp,
                &cache.pred_g[u * h..(u + 1) * h],
            );
            matvec_t_acc(join_pred, dp, &mut d_pred_g[u * h..(u + 1) * h]);
        }

        // Encoder BPTT.
        let enc_w_rec = self.block(self.layout.enc_w_rec, h * h);
        let mut carry = vec![0.0; h];
        for t in (0..num_frames).rev() {
            let ht = &cache.enc_h[t * h..(t + 1) * h];
            let mut dpre = vec![0.0; h];
            for i in 0..h {
                dpre[i] = (d_enc_h[t * h + i] + carry[i]) * (1.0 - ht[i] * ht[i]);
            }
            outer_acc(
                &mut grad[self.layout.enc_w_in..self.layout.enc_w_in + h * f],
                &dpre,
                &features[t * f..(t + 1) * f],
            );
            add_scaled(&mut grad[self.layout.enc_b..self.layout.enc_b + h], &dpre, 1.0);
            if t > 0 {
                outer_acc(
                    &mut grad[self.layout.enc_w_rec..self.layout.enc_w_rec + h * h],
                    &dpre,
                    &cache.enc_h[(t - 1) * h..t * h],
                );
            }
            carry.iter_mut().for_each(|x| *x = 0.0);
            matvec_t_acc(enc_w_rec, &dpre, &mut carry);
        }

        // Predictor BPTT; g_0 is a constant zero state.
        let pred_w_in = self.block(self.layout.pred_w_in, h * h);
        let pred_w_rec = self.block(self.layout.pred_w_rec, h * h);
        let mut carry = vec![0.0; h];
        for u in (1..u_n).rev() {
            let gu = &cache.pred_g[u * h..(u + 1) * h];
            let mut dpre = vec![0.0; h];
            for i in 0..h {
                dpre[i] = (d_pred_g[u * h + i] + carry[i]) * (1.0 - gu[i] * gu[i]);
            }
            let y = labels[u - 1];
            let emb = self.block(self.layout.embed + y * h, h);
            outer_acc(
                &mut grad[self.layout.pred_w_in..self.layout.pred_w_in + h * h],
                &dpre,
                emb,
            );
            outer_acc(
                &mut grad[self.layout.pred_w_rec..self.layout.pred_w_rec + h * h],
                &dpre,
                &cache.pred_g[(u - 1) * h..u * h],
            );
            add_scaled(&mut grad[self.layout.pred_b..self.layout.pred_b + h], &dpre, 1.0);
            let demb = &mut grad[self.layout.embed + y * h..self.layout.embed + (y + 1) * h];
            matvec_t_acc(pred_w_in, &dpre, demb);
            carry.iter_mut().for_each(|x| *x = 0.0);
            matvec_t_acc(pred_w_rec, &dpre, &mut carry);
        }

        grad
    }

    /// Streaming decoding session over precomputed encoder states.
    pub fn decode_session<'a>(
        &'a self,
        features: &[f64],
        num_frames: usize,
    ) -> DecodeSession<'a> {
        let h = self.config.hidden;
        let enc_h = self.encode(features, num_frames);
        let join_enc = self.block(self.layout.join_enc, h * h);
        let mut ph = vec![0.0; num_frames * h];
        for t in 0..num_frames {
            matvec_acc(join_enc, &enc_h[t * h..(t + 1) * h], &mut ph[t * h..(t + 1) * h]);
        }
        DecodeSession {
            params: self,
            num_frames,
            ph,
            pred_g: vec![0.0; h],
            pg: vec![0.0; h],
        }
    }
}

/// Stateful greedy-decoding session; one per utterance.
pub struct DecodeSession<'a> {
    params: &'a TransducerParams,
    num_frames: usize,
    ph: Vec<f64>,
    pred_g: Vec<f64>,
    pg: Vec<f64>,
}

impl JointSource for DecodeSession<'_> {
    fn num_frames(&self) -> usize {
        self.num_frames
    }

    fn vocab(&self) -> usize {
        self.params.config.vocab
    }

    fn blank_id(&self) -> usize {
        self.params.config.blank_id
    }

    fn log_probs(&mut self, frame: usize) -> Vec<f64> {
        let h = self.params.config.hidden;
        let v = self.params.config.vocab;
        let mut r = vec![0.0; h];
        let mut z = vec![0.0; v];
        self.params
            .joint_logp(&self.ph[frame * h..(frame + 1) * h], &self.pg, &mut r, &mut z);
        z
    }

    fn push_label(&mut self, label: usize) {
        let h = self.params.config.hidden;
        let w_in = self.params.block(self.params.layout.pred_w_in, h * h);
        let w_rec = self.params.block(self.params.layout.pred_w_rec, h * h);
        let b = self.params.block(self.params.layout.pred_b, h);
        let emb = self.params.block(self.params.layout.embed + label * h, h);
        let mut pre = b.to_vec();
        matvec_acc(w_in, emb, &mut pre);
        matvec_acc(w_rec, &self.pred_g, &mut pre);
        for (g, x) in self.pred_g.iter_mut().zip(&pre) {
            *g = x.tanh();
        }
        let join_pred = self.params.block(self.params.layout.join_pred, h * h);
        self.pg.iter_mut().for_each(|x| *x = 0.0);
        matvec_acc(join_pred, &self.pred_g, &mut self.pg);
    }
}

/// Adaptive-moment optimizer state over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(num_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> OptimizerState {
        OptimizerState { lr, beta1, beta2, eps, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    pub fn apply(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Training objective selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Baseline,
    Constrained { sigma: Sigma },
    FastEmit { lambda: f64 },
    SelfAlign { lambda: f64 },
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Baseline => "baseline",
            Scheme::Constrained { .. } => "constrained",
            Scheme::FastEmit { .. } => "fastemit",
            Scheme::SelfAlign { .. } => "selfalign",
        }
    }

    pub fn hyper_string(&self) -> String {
        match self {
            Scheme::Baseline => "-".into(),
            Scheme::Constrained { sigma } => format!("sigma={sigma}"),
            Scheme::FastEmit { lambda } => format!("lambda={lambda}"),
            Scheme::SelfAlign { lambda } => format!("lambda={lambda}"),
        }
    }

    /// Loss and lattice gradient for one utterance; `None` when every
    /// alignment path is masked and the utterance should be skipped.
    pub fn lattice_loss(
        &self,
        lattice: &JointLattice,
        utt: &Utterance,
    ) -> Result<Option<LossResult>, LatticeError> {
        let res = match self {
            Scheme::Baseline => lattice.nll_loss(),
            Scheme::Constrained { sigma } => {
                let cfg = ConstrainedConfig {
                    sigma: *sigma,
                    boundary_token: crate::data::BOUNDARY_ID,
                    ref_times: utt.token_end_frames.clone(),
                };
                match constrained_loss(lattice, &cfg) {
                    Err(LatticeError::AllPathsMasked) => return Ok(None),
                    other => other,
                }
            }
            Scheme::FastEmit { lambda } => fastemit_loss(lattice, &FastEmitConfig { lambda: *lambda }),
            Scheme::SelfAlign { lambda } => {
                let path = align::viterbi(lattice)?;
                selfalign_loss(lattice, &SelfAlignConfig { lambda: *lambda }, &path)
            }
        };
        res.map(Some)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eval_interval: usize,
    pub seed: u64,
    pub hidden: usize,
    pub max_symbols_per_frame: usize,
    /// Cap on dev utterances scored at each eval point.
    pub dev_eval_utterances: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::Baseline,
            steps: 1500,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_interval: 100,
            seed: 1,
            hidden: 24,
            max_symbols_per_frame: 10,
            dev_eval_utterances: 100,
        }
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub dev_mean_delay_frames: f64,
    pub dev_wer: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: TransducerParams,
    pub curve: Vec<CurvePoint>,
    /// Utterances skipped because every alignment path was masked.
    pub skipped_masked: usize,
}

/// Mean forced-alignment word delay in frames over the given utterances.
pub fn forced_alignment_delay(
    params: &TransducerParams,
    utts: &[Utterance],
) -> Result<f64, LatticeError> {
    let per_utt: Vec<Result<(i64, usize), LatticeError>> = utts
        .par_iter()
        .map(|u| {
            let (lat, _) = params.forward_joint(&u.features, u.num_frames, &u.labels);
            let path = align::viterbi(&lat)?;
            let pred = decode::word_times(&u.labels, &path.emit_frames, crate::data::BOUNDARY_ID);
            debug_assert_eq!(pred.len(), u.word_times.len());
            let d: i64 = pred
                .iter()
                .zip(&u.word_times)
                .map(|(&p, &r)| p as i64 - r as i64)
                .sum();
            Ok((d, pred.len()))
        })
        .collect();
    let mut sum = 0i64;
    let mut n = 0usize;
    for r in per_utt {
        let (d, k) = r?;
        sum += d;
        n += k;
    }
    Ok(sum as f64 / n.max(1) as f64)
}

/// Corpus-level greedy-decoding word error rate.
pub fn greedy_wer(params: &TransducerParams, utts: &[Utterance], max_symbols: usize) -> f64 {
    let per_utt: Vec<(usize, usize)> = utts
        .par_iter()
        .map(|u| {
            let mut session = params.decode_session(&u.features, u.num_frames);
            let hyp = decode::greedy_decode(&mut session, max_symbols);
            let hyp_words = decode::split_words(&hyp.tokens, crate::data::BOUNDARY_ID);
            let ref_words = decode::split_words(&u.labels, crate::data::BOUNDARY_ID);
            let stats = decode::wer(&hyp_words, &ref_words).expect("reference has words");
            (stats.edits, stats.ref_words)
        })
        .collect();
    let edits: usize = per_utt.iter().map(|x| x.0).sum();
    let words: usize = per_utt.iter().map(|x| x.1).sum();
    edits as f64 / words.max(1) as f64
}

/// Mini-batch training. Deterministic given the seed: batch order comes from
/// a seeded shuffle and gradients reduce in utterance-index order, so the
/// outcome does not depend on worker-thread count.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    assert!(cfg.steps >= 1 && cfg.batch_size >= 1 && cfg.eval_interval >= 1);
    let feat_dim = corpus
        .train
        .first()
        .map(|u| u.feat_dim)
        .expect("training split must be non-empty");
    let max_label = corpus
        .train
        .iter()
        .chain(&corpus.dev)
        .chain(&corpus.test)
        .flat_map(|u| u.labels.iter())
        .fold(crate::data::BOUNDARY_ID, |m, &y| m.max(y));
    let vocab = max_label + 1;
    let model_cfg = ModelConfig {
        feat_dim,
        hidden: cfg.hidden,
        vocab,
        blank_id: crate::data::BLANK_ID,
    };
    let mut params = TransducerParams::init(model_cfg, cfg.seed);
    let mut opt = OptimizerState::new(params.num_params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);

    // Pre-draw every batch so the data order is fixed up front.
    let n = corpus.train.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed_0b47));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut batches: Vec<Vec<usize>> = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut b = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            b.push(order[cursor]);
            cursor += 1;
        }
        batches.push(b);
    }

    let dev_cap = cfg.dev_eval_utterances.min(corpus.dev.len());
    let dev = &corpus.dev[..dev_cap];
    let mut curve = Vec::new();
    let mut skipped_masked = 0usize;
    let mut window_loss_sum = 0.0;
    let mut window_loss_n = 0usize;

    // Pre-training point: loss of the first batch without an update.
    let (loss0, _, _) = batch_pass(&params, corpus, &batches[0], &cfg.scheme)?;
    curve.push(CurvePoint {
        step: 0,
        loss: loss0,
        dev_mean_delay_frames: forced_alignment_delay(&params, dev)?,
        dev_wer: greedy_wer(&params, dev, cfg.max_symbols_per_frame),
    });

    for step in 1..=cfg.steps {
        let (loss, grad, skipped) = batch_pass(&params, corpus, &batches[step - 1], &cfg.scheme)?;
        skipped_masked += skipped;
        if !loss.is_finite() {
            return Err(TrainError::DivergedLoss { step });
        }
        opt.apply(params.theta_mut(), &grad);
        window_loss_sum += loss;
        window_loss_n += 1;
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            curve.push(CurvePoint {
                step,
                loss: window_loss_sum / window_loss_n as f64,
                dev_mean_delay_frames: forced_alignment_delay(&params, dev)?,
                dev_wer: greedy_wer(&params, dev, cfg.max_symbols_per_frame),
            });
            window_loss_sum = 0.0;
            window_loss_n = 0;
        }
    }

    Ok(TrainOutcome { params, curve, skipped_masked })
}

/// Mean loss and mean parameter gradient over one batch.
///
/// Utterances are processed in parallel but reduced sequentially in batch
/// order; fully-masked utterances are skipped.
fn batch_pass(
    params: &TransducerParams,
    corpus: &Corpus,
    batch: &[usize],
    scheme: &Scheme,
) -> Result<(f64, Vec<f64>, usize), TrainError> {
    let per_utt: Vec<Result<Option<(f64, Vec<f64>)>, LatticeError>> = batch
        .par_iter()
        .map(|&i| {
            let u = &corpus.train[i];
            let (lat, cache) = params.forward_joint(&u.features, u.num_frames, &u.labels);
            let loss = match scheme.lattice_loss(&lat, u)? {
                None => return Ok(None),
                Some(l) => l,
            };
            let g = params.backward_joint(&u.features, &u.labels, &lat, &cache, &loss.grad);
            Ok(Some((loss.loss, g)))
        })
        .collect();

    let mut grad = vec![0.0; params.num_params()];
    let mut loss_sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for r in per_utt {
        match r? {
            None => skipped += 1,
            Some((l, g)) => {
                loss_sum += l;
                add_scaled(&mut grad, &g, 1.0);
                used += 1;
            }
        }
    }
    if used > 0 {
        let inv = 1.0 / used as f64;
        for g in grad.iter_mut() {
            *g *= inv;
        }
        loss_sum *= inv;
    }
    Ok((loss_sum, grad, skipped))
}

const CHECKPOINT_FORMAT: &str = "ckpt-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    scheme: String,
    hyper: String,
    config_hash: String,
    params: Vec<f64>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn config_hash(cfg: &ModelConfig) -> String {
    let s = serde_json::to_string(cfg).expect("config serializes");
    format!("{:016x}", fnv1a64(s.as_bytes()))
}

/// Writes a checkpoint; parameters round-trip bit-exactly.
pub fn save_checkpoint(
    params: &TransducerParams,
    scheme_name: &str,
    hyper: &str,
    path: &Path,
) -> Result<(), CheckpointError> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        config: params.config,
        scheme: scheme_name.into(),
        hyper: hyper.into(),
        config_hash: config_hash(&params.config),
        params: params.theta.clone(),
    };
    let body = serde_json::to_string(&file)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    std::fs::write(path, body)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })
}

pub struct LoadedCheckpoint {
    pub params: TransducerParams,
    pub scheme: String,
    pub hyper: String,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
    let file: CheckpointFile =
        serde_json::from_str(&body).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Malformed(format!(
            "unsupported checkpoint format {:?}",
            file.format
        )));
    }
    if file.config_hash != config_hash(&file.config) {
        return Err(CheckpointError::Malformed("config hash mismatch".into()));
    }
    let layout = Layout::new(&file.config);
    if file.params.len() != layout.len {
        return Err(CheckpointError::Malformed(format!(
            "parameter count {} does not match config ({})",
            file.params.len(),
            layout.len
        )));
    }
    Ok(LoadedCheckpoint {
        params: TransducerParams { config: file.config, theta: file.params, layout },
        scheme: file.scheme,
        hyper: file.hyper,
    })
}
