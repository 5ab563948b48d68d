//! Self-check suites: exhaustive-enumeration and finite-difference oracles
//! run against the production kernels. Used by the `oracle` CLI command and
//! by the acceptance tests.

use crate::align;
use crate::lattice::{logaddexp, logsumexp, JointLattice, LatticeError};
use crate::model::{ModelConfig, TransducerParams};
use crate::regularizers::{
    constrained_loss, fastemit_loss, selfalign_loss, ConstrainedConfig, FastEmitConfig,
    SelfAlignConfig, Sigma,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deliberate defect injected into a suite, to prove the harness can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Flip the sign of every analytic gradient before comparison.
    BackwardSign,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error with a floor so near-zero gradients are judged on the
/// natural O(1) scale of lattice posteriors.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Random normalized lattice. With `bounded` the relevant per-node
/// probabilities stay inside [0.05, 0.95] (uniform mixture), which keeps
/// finite differences well-conditioned.
pub fn random_lattice(
    rng: &mut ChaCha8Rng,
    max_t: usize,
    max_u: usize,
    max_v: usize,
    bounded: bool,
) -> JointLattice {
    let t = rng.gen_range(1..=max_t);
    let u = rng.gen_range(0..=max_u);
    let v = rng.gen_range(2..=max_v);
    let blank = rng.gen_range(0..v);
    let labels: Vec<usize> = (0..u)
        .map(|_| {
            let mut y = rng.gen_range(0..v - 1);
            if y >= blank {
                y += 1;
            }
            y
        })
        .collect();
    let mut logp = vec![0.0; t * (u + 1) * v];
    for node in logp.chunks_mut(v) {
        let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z = logsumexp(&logits);
        if bounded {
            let mix = 0.25;
            for (o, l) in node.iter_mut().zip(&logits) {
                let p = (1.0 - mix) * (l - z).exp() + mix / v as f64;
                *o = p.ln();
            }
        } else {
            for (o, l) in node.iter_mut().zip(&logits) {
                *o = l - z;
            }
        }
    }
    JointLattice::new(t, v, blank, labels, logp).expect("random lattice is structurally valid")
}

/// Forward totals against exhaustive enumeration, the backward identity, and
/// the per-frame cut identity.
pub fn lattice_oracle_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport { name: "lattice-oracle", cases, max_error: 0.0, failures: vec![] };
    const TOL: f64 = 1e-8;
    for case in 0..cases {
        let lat = random_lattice(&mut rng, 8, 4, 5, false);
        let alpha = lat.forward();
        let total = alpha.at(lat.num_frames(), lat.num_labels());
        let paths = lat.enumerate_paths().expect("within enumeration guard");
        let scores: Vec<f64> = paths.iter().map(|(_, lp)| *lp).collect();
        let enum_total = logsumexp(&scores);
        let err = (total - enum_total).abs();
        report.max_error = report.max_error.max(err);
        if err >= TOL {
            report
                .failures
                .push(format!("case {case}: forward {total} vs enumeration {enum_total}"));
        }

        let beta = lat.backward();
        let berr = (beta.at(0, 0) - total).abs();
        report.max_error = report.max_error.max(berr);
        if berr >= TOL {
            report
                .failures
                .push(format!("case {case}: backward total {} vs {total}", beta.at(0, 0)));
        }

        // Every path crosses each frame boundary exactly once, via a blank.
        for t in 0..lat.num_frames() {
            let mut cut = f64::NEG_INFINITY;
            for u in 0..=lat.num_labels() {
                cut = logaddexp(cut, alpha.at(t, u) + lat.blank_weight(t, u) + beta.at(t + 1, u));
            }
            let cerr = (cut - total).abs();
            report.max_error = report.max_error.max(cerr);
            if cerr >= TOL {
                report.failures.push(format!("case {case}: cut at t={t}: {cut} vs {total}"));
            }
        }
    }
    report
}

/// Central finite difference of a scalar function of one lattice entry.
fn fd_entry(lat: &JointLattice, i: usize, h: f64, loss: &dyn Fn(&JointLattice) -> f64) -> f64 {
    let mut plus = lat.clone();
    plus.logp_raw_mut()[i] += h;
    let mut minus = lat.clone();
    minus.logp_raw_mut()[i] -= h;
    (loss(&plus) - loss(&minus)) / (2.0 * h)
}

fn check_lattice_grad(
    name: &str,
    lat: &JointLattice,
    analytic: &[f64],
    loss: &dyn Fn(&JointLattice) -> f64,
    tol: f64,
    fault: Fault,
    report: &mut SuiteReport,
) {
    let flip = if fault == Fault::BackwardSign { -1.0 } else { 1.0 };
    for i in 0..analytic.len() {
        let fd = fd_entry(lat, i, 1e-5, loss);
        let err = rel_err(flip * analytic[i], fd);
        report.max_error = report.max_error.max(err);
        if err >= tol {
            report.failures.push(format!(
                "{name}: entry {i}: analytic {} vs fd {fd}",
                flip * analytic[i]
            ));
            return;
        }
    }
}

/// Evenly spread reference times for a synthetic label sequence.
fn synthetic_ref_times(t: usize, u: usize) -> Vec<usize> {
    (0..u).map(|k| k * t.saturating_sub(1) / u.max(1)).collect()
}

/// Lattice-gradient finite differences for all four objectives, plus
/// parameter-gradient finite differences through the full model.
///
/// FastEmit reshapes the gradient field instead of differentiating a scalar,
/// so its oracles are indirect but still finite-difference based: at the
/// lattice level its field must equal the NLL differences with the boost
/// divided out of label entries; at the model level the chain rule through
/// the network is checked as a vector-Jacobian product against the scalar
/// `dot(frozen_field, logp(theta))`.
pub fn gradient_suite(seed: u64, fault: Fault) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport { name: "gradient", cases: 0, max_error: 0.0, failures: vec![] };
    const LATTICE_TOL: f64 = 1e-5;
    const MODEL_TOL: f64 = 1e-4;
    let flip = if fault == Fault::BackwardSign { -1.0 } else { 1.0 };

    for _ in 0..8 {
        let lat = random_lattice(&mut rng, 5, 2, 4, true);
        report.cases += 1;

        let res = lat.nll_loss().expect("bounded lattice has positive total");
        check_lattice_grad(
            "nll",
            &lat,
            &res.grad,
            &|l| l.nll_loss().unwrap().loss,
            LATTICE_TOL,
            fault,
            &mut report,
        );

        let fe = FastEmitConfig { lambda: 0.3 };
        let boosted = fastemit_loss(&lat, &fe).unwrap();
        for t in 0..lat.num_frames() {
            for u in 0..=lat.num_labels() {
                for v in 0..lat.vocab() {
                    let i = lat.idx(t, u, v);
                    let boost =
                        if u < lat.num_labels() && v == lat.labels()[u] { 1.0 + fe.lambda } else { 1.0 };
                    let fd = boost * fd_entry(&lat, i, 1e-5, &|l| l.nll_loss().unwrap().loss);
                    let err = rel_err(flip * boosted.grad[i], fd);
                    report.max_error = report.max_error.max(err);
                    if err >= LATTICE_TOL {
                        report.failures.push(format!(
                            "fastemit: entry {i}: analytic {} vs boosted fd {fd}",
                            flip * boosted.grad[i]
                        ));
                    }
                }
            }
        }

        if lat.num_labels() > 0 {
            let path = align::viterbi(&lat).unwrap();
            let sa = SelfAlignConfig { lambda: 0.7 };
            let res = selfalign_loss(&lat, &sa, &path).unwrap();
            let frozen = path.clone();
            check_lattice_grad(
                "selfalign",
                &lat,
                &res.grad,
                &move |l| selfalign_loss(l, &sa, &frozen).unwrap().loss,
                LATTICE_TOL,
                fault,
                &mut report,
            );

            let boundary = *lat.labels().last().unwrap();
            let cfg = ConstrainedConfig {
                sigma: Sigma::Frames(2),
                boundary_token: boundary,
                ref_times: synthetic_ref_times(lat.num_frames(), lat.num_labels()),
            };
            if let Ok(res) = constrained_loss(&lat, &cfg) {
                let cfg2 = cfg.clone();
                check_lattice_grad(
                    "constrained",
                    &lat,
                    &res.grad,
                    &move |l| constrained_loss(l, &cfg2).unwrap().loss,
                    LATTICE_TOL,
                    fault,
                    &mut report,
                );
            }
        }
    }

    // Full-pipeline parameter gradients on a tiny model.
    let cfg = ModelConfig { feat_dim: 3, hidden: 4, vocab: 5, blank_id: 0 };
    let (t_n, labels) = (6usize, vec![1usize, 3, 2]);
    let features: Vec<f64> = (0..t_n * cfg.feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let base = TransducerParams::init(cfg, seed ^ 0xabcd);
    let ref_times = synthetic_ref_times(t_n, labels.len());
    let constrained_cfg = ConstrainedConfig {
        sigma: Sigma::Frames(3),
        boundary_token: *labels.last().unwrap(),
        ref_times,
    };
    let (lat0, cache0) = base.forward_joint(&features, t_n, &labels);
    let frozen_path = align::viterbi(&lat0).unwrap();
    let frozen_fe_field = fastemit_loss(&lat0, &FastEmitConfig { lambda: 0.25 }).unwrap().grad;

    type LossFn<'a> = Box<dyn Fn(&JointLattice) -> f64 + 'a>;
    let cases: Vec<(&str, LossFn)> = vec![
        ("model-nll", Box::new(|l: &JointLattice| l.nll_loss().unwrap().loss)),
        (
            "model-constrained",
            Box::new(|l: &JointLattice| constrained_loss(l, &constrained_cfg).unwrap().loss),
        ),
        (
            "model-selfalign",
            Box::new(|l: &JointLattice| {
                selfalign_loss(l, &SelfAlignConfig { lambda: 0.5 }, &frozen_path).unwrap().loss
            }),
        ),
        (
            "model-fastemit",
            Box::new(|l: &JointLattice| {
                frozen_fe_field.iter().zip(l.logp_raw()).map(|(w, x)| w * x).sum()
            }),
        ),
    ];

    for (name, loss_of_lattice) in &cases {
        report.cases += 1;
        let lattice_field = match *name {
            "model-nll" => lat0.nll_loss().unwrap().grad,
            "model-constrained" => constrained_loss(&lat0, &constrained_cfg).unwrap().grad,
            "model-selfalign" => {
                selfalign_loss(&lat0, &SelfAlignConfig { lambda: 0.5 }, &frozen_path)
                    .unwrap()
                    .grad
            }
            _ => frozen_fe_field.clone(),
        };
        let analytic = base.backward_joint(&features, &labels, &lat0, &cache0, &lattice_field);
        let h = 1e-5;
        for i in 0..analytic.len() {
            let mut plus = base.clone();
            plus.theta_mut()[i] += h;
            let mut minus = base.clone();
            minus.theta_mut()[i] -= h;
            let (lat_p, _) = plus.forward_joint(&features, t_n, &labels);
            let (lat_m, _) = minus.forward_joint(&features, t_n, &labels);
            let fd = (loss_of_lattice(&lat_p) - loss_of_lattice(&lat_m)) / (2.0 * h);
            let err = rel_err(flip * analytic[i], fd);
            report.max_error = report.max_error.max(err);
            if err >= MODEL_TOL {
                report.failures.push(format!(
                    "{name}: param {i}: analytic {} vs fd {fd}",
                    flip * analytic[i]
                ));
                break;
            }
        }
    }
    report
}

/// Masked forward totals against indicator-filtered enumeration, and
/// exactness of the all-paths-masked error.
pub fn constrained_oracle_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report =
        SuiteReport { name: "constrained-oracle", cases, max_error: 0.0, failures: vec![] };
    const TOL: f64 = 1e-8;
    for case in 0..cases {
        let lat = random_lattice(&mut rng, 8, 4, 5, false);
        if lat.num_labels() == 0 {
            continue;
        }
        // Random boundary token drawn from the labels actually present.
        let boundary = lat.labels()[rng.gen_range(0..lat.num_labels())];
        let mut ref_times = Vec::with_capacity(lat.num_labels());
        let mut cur = 0usize;
        for _ in 0..lat.num_labels() {
            cur = (cur + rng.gen_range(0..3)).min(lat.num_frames() - 1);
            ref_times.push(cur);
        }
        let sigma = rng.gen_range(0..4);
        let cfg = ConstrainedConfig { sigma: Sigma::Frames(sigma), boundary_token: boundary, ref_times };

        let admitted: Vec<f64> = lat
            .enumerate_paths()
            .unwrap()
            .into_iter()
            .filter(|(p, _)| {
                p.emit_frames.iter().enumerate().all(|(k, &f)| {
                    lat.labels()[k] != boundary || f < cfg.ref_times[k] + sigma
                })
            })
            .map(|(_, lp)| lp)
            .collect();

        match constrained_loss(&lat, &cfg) {
            Err(LatticeError::AllPathsMasked) => {
                if !admitted.is_empty() {
                    report.failures.push(format!(
                        "case {case}: masked error raised with {} admitted paths",
                        admitted.len()
                    ));
                }
            }
            Err(e) => report.failures.push(format!("case {case}: unexpected error {e}")),
            Ok(res) => {
                if admitted.is_empty() {
                    report
                        .failures
                        .push(format!("case {case}: expected all-paths-masked error"));
                    continue;
                }
                let expect = -logsumexp(&admitted);
                let err = (res.loss - expect).abs();
                report.max_error = report.max_error.max(err);
                if err >= TOL {
                    report.failures.push(format!(
                        "case {case}: masked loss {} vs filtered enumeration {expect}",
                        res.loss
                    ));
                }
            }
        }
    }
    report
}

/// Viterbi scores against enumeration maxima, plus the label tie-break.
pub fn viterbi_oracle_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report =
        SuiteReport { name: "viterbi-oracle", cases, max_error: 0.0, failures: vec![] };
    const TOL: f64 = 1e-10;
    for case in 0..cases {
        let lat = random_lattice(&mut rng, 8, 4, 5, false);
        let path = align::viterbi(&lat).expect("finite lattice has a best path");
        let score = align::path_log_prob(&lat, &path);
        let best = lat
            .enumerate_paths()
            .unwrap()
            .into_iter()
            .map(|(_, lp)| lp)
            .fold(f64::NEG_INFINITY, f64::max);
        let err = (score - best).abs();
        report.max_error = report.max_error.max(err);
        if err >= TOL {
            report
                .failures
                .push(format!("case {case}: viterbi {score} vs enumeration max {best}"));
        }
    }
    // Tie lattice: uniform probabilities make every path equal-score; the
    // label-preferred tie-break must emit everything at frame 0.
    let v = 3usize;
    let labels = vec![1, 2];
    let n = 4 * (labels.len() + 1) * v;
    let lat =
        JointLattice::new(4, v, 0, labels, vec![(1.0f64 / v as f64).ln(); n]).unwrap();
    let path = align::viterbi(&lat).unwrap();
    if path.emit_frames != vec![0, 0] {
        report
            .failures
            .push(format!("tie lattice: expected emissions [0, 0], got {:?}", path.emit_frames));
    }
    report
}

/// All suites in a fixed order.
pub fn run_all(seed: u64, fault: Fault) -> Vec<SuiteReport> {
    vec![
        lattice_oracle_suite(200, seed),
        gradient_suite(seed.wrapping_add(1), fault),
        constrained_oracle_suite(200, seed.wrapping_add(2)),
        viterbi_oracle_suite(200, seed.wrapping_add(3)),
    ]
}
