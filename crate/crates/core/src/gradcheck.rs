//! Closed-form gradient oracles for the output-layer losses, plus a central
//! finite-difference helper.
//!
//! For the time-averaged cross-entropy the gradient with respect to every
//! `V_t` is `(P_mean - y) / (B T)`. For the weighted consistency term
//! `lambda tau^2 ETC` it is `lambda tau / (B T (T-1)) sum_{m != t} (P_t - P_m)`:
//! differentiating the tempered softmax contributes `1/tau`, so only one
//! factor of `tau` survives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Tensor};
use crate::losses::{ce_mean_node, etc_node, one_hot, EtcConfig, LossError, TimestepOutputs};

/// Tolerance for autodiff against the closed forms.
pub const ANALYTIC_TOLERANCE: f64 = 1e-10;
/// Tolerance for autodiff against central differences.
pub const FINITE_DIFF_TOLERANCE: f64 = 1e-5;
/// Step for the finite-difference cross-check.
pub const FINITE_DIFF_STEP: f64 = 1e-6;

const ANALYTIC_FLOOR: f64 = 1e-8;
const FINITE_DIFF_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Only filled by checks that also run finite differences.
    pub max_fd_rel_error: Option<f64>,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_error(x, y, floor))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function at every entry of `x`.
pub fn central_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

fn softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| ((x - max) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

/// Autodiff of the time-averaged cross-entropy against `(P_mean - y)/(B T)`.
pub fn gradcheck_ce(
    outputs: &TimestepOutputs,
    labels: &Tensor,
) -> Result<GradcheckReport, LossError> {
    let mut graph = Graph::new();
    let (leaf, steps) = outputs.record(&mut graph)?;
    let loss = ce_mean_node(&mut graph, &steps, labels)?;
    graph.forward(loss)?;
    let grads = graph.backward(loss)?;
    let autodiff = grads.get(leaf).expect("leaf gradient");

    let (b, t, c) = (outputs.batch(), outputs.timesteps(), outputs.classes());
    let mut analytic = Vec::with_capacity(b * t * c);
    for sample in 0..b {
        let p_mean = softmax(&outputs.prefix_mean(sample, t), 1.0);
        let y = &labels.data()[sample * c..(sample + 1) * c];
        for _ in 0..t {
            for k in 0..c {
                analytic.push((p_mean[k] - y[k]) / (b * t) as f64);
            }
        }
    }
    let err = max_rel_error(autodiff.data(), &analytic, ANALYTIC_FLOOR);
    Ok(GradcheckReport {
        max_rel_error: err,
        max_fd_rel_error: None,
        passed: err < ANALYTIC_TOLERANCE,
    })
}

/// Weighted consistency loss with the pairwise targets held fixed at
/// `targets` (softmax rows, `(batch, T, C)`).
fn frozen_target_etc(v_seq: &Tensor, targets: &Tensor, cfg: &EtcConfig) -> f64 {
    let shape = v_seq.shape();
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let log_p = v_seq.log_softmax_rows(cfg.tau);
    let mut total = 0.0;
    for sample in 0..b {
        for step in 0..t {
            let base = (sample * t + step) * c;
            for other in (0..t).filter(|&m| m != step) {
                let tb = (sample * t + other) * c;
                for k in 0..c {
                    total += targets.data()[tb + k] * log_p.data()[base + k];
                }
            }
        }
    }
    -cfg.weight() * total / (b * t * (t - 1)) as f64
}

/// Autodiff of `lambda tau^2 ETC` against the closed form, and against
/// central differences of the loss with its stop-gradient targets frozen.
pub fn gradcheck_etc(
    outputs: &TimestepOutputs,
    cfg: &EtcConfig,
) -> Result<GradcheckReport, LossError> {
    let (b, t, c) = (outputs.batch(), outputs.timesteps(), outputs.classes());
    if t < 2 {
        return Err(LossError::TooFewTimesteps(t));
    }
    let mut graph = Graph::new();
    let (leaf, steps) = outputs.record(&mut graph)?;
    let etc = etc_node(&mut graph, &steps, cfg)?;
    let loss = graph.scale(etc, cfg.weight(), 0.0)?;
    graph.forward(loss)?;
    let grads = graph.backward(loss)?;
    let autodiff = grads.get(leaf).expect("leaf gradient");

    let coeff = cfg.lambda * cfg.tau / (b * t * (t - 1)) as f64;
    let mut analytic = Vec::with_capacity(b * t * c);
    for sample in 0..b {
        let probs: Vec<Vec<f64>> = (0..t)
            .map(|step| softmax(outputs.row(sample, step), cfg.tau))
            .collect();
        for (step, p_t) in probs.iter().enumerate() {
            for (k, &p_tk) in p_t.iter().enumerate() {
                let spread: f64 = (0..t)
                    .filter(|&m| m != step)
                    .map(|m| p_tk - probs[m][k])
                    .sum();
                analytic.push(coeff * spread);
            }
        }
    }
    let err = max_rel_error(autodiff.data(), &analytic, ANALYTIC_FLOOR);

    let targets = outputs.v_seq().softmax_rows(cfg.tau);
    let numeric = central_difference(
        |v| frozen_target_etc(v, &targets, cfg),
        outputs.v_seq(),
        FINITE_DIFF_STEP,
    );
    let fd_err = max_rel_error(autodiff.data(), numeric.data(), FINITE_DIFF_FLOOR);

    Ok(GradcheckReport {
        max_rel_error: err,
        max_fd_rel_error: Some(fd_err),
        passed: err < ANALYTIC_TOLERANCE && fd_err < FINITE_DIFF_TOLERANCE,
    })
}

/// A random loss instance: batch <= 4, `min_t <= T <= 6`, `2 <= C <= 5`,
/// potentials uniform in `[-3, 3]`.
pub fn random_instance(rng: &mut impl Rng, min_t: usize) -> (TimestepOutputs, Tensor) {
    let b = rng.random_range(1..=4);
    let t = rng.random_range(min_t..=6);
    let c = rng.random_range(2..=5);
    let data = (0..b * t * c)
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    let outputs = TimestepOutputs::new(Tensor::new(vec![b, t, c], data).expect("positive dims"))
        .expect("finite rank-3");
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    (outputs, one_hot(&labels, c))
}

/// Aggregate of both oracles over `instances` random cases.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSummary {
    pub seed: u64,
    pub instances: usize,
    pub ce_max_rel_error: f64,
    pub etc_max_rel_error: f64,
    pub etc_max_fd_rel_error: f64,
    pub passed: bool,
}

pub fn run_gradcheck_suite(
    seed: u64,
    instances: usize,
    cfg: &EtcConfig,
) -> Result<GradcheckSummary, LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = GradcheckSummary {
        seed,
        instances,
        ce_max_rel_error: 0.0,
        etc_max_rel_error: 0.0,
        etc_max_fd_rel_error: 0.0,
        passed: true,
    };
    for _ in 0..instances {
        let (outputs, labels) = random_instance(&mut rng, 1);
        let ce = gradcheck_ce(&outputs, &labels)?;
        summary.ce_max_rel_error = summary.ce_max_rel_error.max(ce.max_rel_error);
        summary.passed &= ce.passed;

        let (outputs, _) = random_instance(&mut rng, 2);
        let etc = gradcheck_etc(&outputs, cfg)?;
        summary.etc_max_rel_error = summary.etc_max_rel_error.max(etc.max_rel_error);
        summary.etc_max_fd_rel_error = summary
            .etc_max_fd_rel_error
            .max(etc.max_fd_rel_error.unwrap_or(0.0));
        summary.passed &= etc.passed;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_ce_gradient_example() {
        let outputs = TimestepOutputs::new(Tensor::zeros(&[1, 2, 2])).unwrap();
        let labels = one_hot(&[0], 2);
        let mut graph = Graph::new();
        let (leaf, steps) = outputs.record(&mut graph).unwrap();
        let loss = ce_mean_node(&mut graph, &steps, &labels).unwrap();
        graph.forward(loss).unwrap();
        let g = graph.backward(loss).unwrap();
        assert_eq!(g.get(leaf).unwrap().data(), &[-0.25, 0.25, -0.25, 0.25]);
        assert!(gradcheck_ce(&outputs, &labels).unwrap().passed);
    }

    #[test]
    fn etc_gradient_vanishes_when_steps_agree() {
        let row = [0.3, -1.0, 2.0];
        let data: Vec<f64> = row.iter().cycle().take(9).copied().collect();
        let outputs = TimestepOutputs::new(Tensor::new(vec![1, 3, 3], data).unwrap()).unwrap();
        let mut graph = Graph::new();
        let (leaf, steps) = outputs.record(&mut graph).unwrap();
        let loss = etc_node(&mut graph, &steps, &EtcConfig::default()).unwrap();
        graph.forward(loss).unwrap();
        let g = graph.backward(loss).unwrap();
        assert!(g.get(leaf).unwrap().data().iter().all(|x| x.abs() < 1e-17));
    }

    #[test]
    fn suite_passes_on_a_few_instances() {
        let s = run_gradcheck_suite(3, 10, &EtcConfig::default()).unwrap();
        assert!(s.passed, "{s:?}");
    }

    #[test]
    fn central_difference_of_quadratic() {
        let x = Tensor::vector(vec![1.0, -2.0]);
        let g = central_difference(|v| v.data().iter().map(|a| a * a).sum(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] + 4.0).abs() < 1e-8);
    }
}
