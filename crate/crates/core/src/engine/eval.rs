//! Inference-side measurements: truncated-time accuracy, temporal
//! consistency of the per-step predictions, and distribution dumps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{step_inputs, EngineError, Model};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::data::Sample;
use crate::losses::{self, TimestepOutputs};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn per_step_argmax(outputs: &TimestepOutputs, sample: usize) -> Vec<usize> {
    (0..outputs.timesteps())
        .map(|t| argmax(outputs.row(sample, t)))
        .collect()
}

/// Fraction of samples whose per-step argmax is not constant over time.
pub fn argmax_flip_rate(outputs: &TimestepOutputs) -> f64 {
    let flips = (0..outputs.batch())
        .filter(|&i| {
            let a = per_step_argmax(outputs, i);
            a.iter().any(|&c| c != a[0])
        })
        .count();
    flips as f64 / outputs.batch() as f64
}

/// Average number of distinct per-step argmax classes per sample.
pub fn mean_distinct_argmax(outputs: &TimestepOutputs) -> f64 {
    let total: usize = (0..outputs.batch())
        .map(|i| {
            per_step_argmax(outputs, i)
                .into_iter()
                .collect::<BTreeSet<_>>()
                .len()
        })
        .sum();
    total as f64 / outputs.batch() as f64
}

fn prefix_accuracy(outputs: &TimestepOutputs, labels: &[usize], k: usize) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(&outputs.prefix_mean(i, k)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Test-set metrics computed from one full-length simulation.
///
/// The network is causal, so the first `k` potentials of a full run are
/// exactly those of a run on the first `k` slices; the per-eval-T
/// accuracies therefore equal [`eval_per_timestep`] bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TestEvaluation {
    pub accuracy_full: f64,
    pub accuracy_per_eval_t: BTreeMap<usize, f64>,
    pub mean_pairwise_kl: f64,
    pub argmax_flip_rate: f64,
}

impl TestEvaluation {
    pub fn run(
        model: &Model,
        test: &[Sample],
        eval_timesteps: &[usize],
        tau: f64,
    ) -> Result<Self, EngineError> {
        if test.is_empty() {
            return Err(EngineError::EmptyTestSet);
        }
        let t_len = model.timesteps();
        for &k in eval_timesteps {
            if k == 0 || k > t_len {
                return Err(EngineError::EvalRange {
                    eval_t: k,
                    trained: t_len,
                });
            }
        }
        let refs: Vec<&Sample> = test.iter().collect();
        let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
        let outputs = model.outputs(&refs, t_len)?;
        let mean_pairwise_kl = if t_len >= 2 {
            losses::etc_kl_metric(&outputs, tau)?.max(0.0)
        } else {
            0.0
        };
        Ok(Self {
            accuracy_full: prefix_accuracy(&outputs, &labels, t_len),
            accuracy_per_eval_t: eval_timesteps
                .iter()
                .map(|&k| (k, prefix_accuracy(&outputs, &labels, k)))
                .collect(),
            mean_pairwise_kl,
            argmax_flip_rate: argmax_flip_rate(&outputs),
        })
    }
}

/// Accuracy when only the first `eval_t` input slices are simulated and each
/// sample is classified by the argmax of its averaged potentials.
pub fn eval_per_timestep(
    model: &Model,
    test: &[Sample],
    eval_t: usize,
) -> Result<f64, EngineError> {
    let trained = model.timesteps();
    if eval_t == 0 || eval_t > trained {
        return Err(EngineError::EvalRange { eval_t, trained });
    }
    if test.is_empty() {
        return Err(EngineError::EmptyTestSet);
    }
    let refs: Vec<&Sample> = test.iter().collect();
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let outputs = model.outputs(&refs, eval_t)?;
    Ok(prefix_accuracy(&outputs, &labels, eval_t))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub mean_pairwise_kl: f64,
    pub argmax_flip_rate: f64,
    pub mean_distinct_argmax: f64,
    /// Mean pairwise cosine similarity between the output-weight gradients
    /// of the single-step losses `CE(softmax(V_t), y)`, on the first test
    /// batch. `None` when every per-step gradient vanishes.
    pub gradient_cosine: Option<f64>,
    pub samples: usize,
}

pub fn consistency_report(
    model: &Model,
    test: &[Sample],
    tau: f64,
    batch_size: usize,
) -> Result<ConsistencyReport, EngineError> {
    let t_len = model.timesteps();
    if t_len < 2 {
        return Err(EngineError::TooFewTimesteps(t_len));
    }
    if test.is_empty() {
        return Err(EngineError::EmptyTestSet);
    }
    let refs: Vec<&Sample> = test.iter().collect();
    let outputs = model.outputs(&refs, t_len)?;
    let batch = &refs[..batch_size.clamp(1, refs.len())];
    Ok(ConsistencyReport {
        mean_pairwise_kl: losses::etc_kl_metric(&outputs, tau)?.max(0.0),
        argmax_flip_rate: argmax_flip_rate(&outputs),
        mean_distinct_argmax: mean_distinct_argmax(&outputs),
        gradient_cosine: gradient_cosine(model, batch)?,
        samples: test.len(),
    })
}

fn gradient_cosine(model: &Model, batch: &[&Sample]) -> Result<Option<f64>, EngineError> {
    let t_len = model.timesteps();
    let classes = model.network().spec().classes();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let y = losses::one_hot(&labels, classes);

    let mut graph = Graph::new();
    let w: Vec<NodeId> = model
        .weights()
        .iter()
        .map(|t| graph.leaf(t.clone()))
        .collect();
    let x: Vec<NodeId> = step_inputs(batch, t_len)
        .into_iter()
        .map(|t| graph.constant(t))
        .collect();
    let out = model.network().unroll(&mut graph, &w, &x)?.outputs;
    let per_step: Vec<NodeId> = out
        .iter()
        .map(|&v| losses::ce_mean_node(&mut graph, &[v], &y))
        .collect::<Result<_, _>>()?;
    let mut total = per_step[0];
    for &l in &per_step[1..] {
        total = graph.add(total, l)?;
    }
    graph.forward(total)?;

    let last = *w.last().expect("at least one weight");
    let grads: Vec<Tensor> = per_step
        .iter()
        .map(|&l| {
            let mut g = graph.backward(l)?;
            Ok(g.take(last).expect("weights are leaves"))
        })
        .collect::<Result<_, EngineError>>()?;
    let norms: Vec<f64> = grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let (mut sum, mut pairs) = (0.0, 0usize);
    for a in 0..grads.len() {
        for b in a + 1..grads.len() {
            if norms[a] == 0.0 || norms[b] == 0.0 {
                continue;
            }
            let dot: f64 = grads[a]
                .data()
                .iter()
                .zip(grads[b].data())
                .map(|(p, q)| p * q)
                .sum();
            sum += dot / (norms[a] * norms[b]);
            pairs += 1;
        }
    }
    Ok((pairs > 0).then(|| sum / pairs as f64))
}

fn probs_row(v: &[f64]) -> Vec<f64> {
    let row = Tensor::new(vec![1, v.len()], v.to_vec()).expect("non-empty row");
    row.softmax_rows(1.0).into_data()
}

/// Writes `sample_id,label,t,argmax,p_0..p_{C-1}`: one row per step
/// (`t = 1..T`, temperature-1 softmax of `V_t`) and a final `mean` row holding
/// the softmax of the time-averaged potential.
pub fn dump_distributions(
    model: &Model,
    samples: &[(usize, &Sample)],
    out_path: impl AsRef<Path>,
) -> Result<(), EngineError> {
    let path = out_path.as_ref();
    let t_len = model.timesteps();
    let classes = model.network().spec().classes();
    let mut text = String::from("sample_id,label,t,argmax");
    for c in 0..classes {
        write!(text, ",p_{c}").expect("string write");
    }
    text.push('\n');
    if !samples.is_empty() {
        let refs: Vec<&Sample> = samples.iter().map(|(_, s)| *s).collect();
        let outputs = model.outputs(&refs, t_len)?;
        for (i, (id, sample)) in samples.iter().enumerate() {
            let mut emit = |t: &str, v: &[f64]| {
                let p = probs_row(v);
                write!(text, "{id},{},{t},{}", sample.label, argmax(v)).expect("string write");
                for x in p {
                    write!(text, ",{x}").expect("string write");
                }
                text.push('\n');
            };
            for t in 0..t_len {
                emit(&(t + 1).to_string(), outputs.row(i, t));
            }
            emit("mean", &outputs.prefix_mean(i, t_len));
        }
    }
    fs::write(path, text).map_err(|e| EngineError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}
