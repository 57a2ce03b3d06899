//! Training objectives over per-timestep output potentials.
//!
//! * cross-entropy of the time-averaged potential (temperature 1),
//! * the temporal-consistency loss: each step's temperature-softened
//!   distribution is pulled toward stop-gradient copies of every other step's,
//! * the KL form of the same pairwise comparison, kept as a metric only,
//! * a per-timestep cross-entropy used as an ablation baseline.
//!
//! Every batch reduction is a mean over samples.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label row {row} is not one-hot")]
    NotOneHot { row: usize },
    #[error("labels have shape {got:?}, expected {expected:?}")]
    LabelShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("consistency terms need T >= 2, got {0}")]
    TooFewTimesteps(usize),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("invalid outputs: {0}")]
    InvalidOutputs(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Output-layer potentials `V_1..V_T` for a batch, shaped `(batch, T, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepOutputs {
    v_seq: Tensor,
}

impl TimestepOutputs {
    pub fn new(v_seq: Tensor) -> Result<Self, LossError> {
        let shape = v_seq.shape();
        if shape.len() != 3 {
            return Err(LossError::InvalidOutputs(format!(
                "expected (batch, T, C), got {shape:?}"
            )));
        }
        if shape[2] < 2 {
            return Err(LossError::InvalidOutputs("need at least 2 classes".into()));
        }
        if !v_seq.is_finite() {
            return Err(LossError::InvalidOutputs("non-finite potential".into()));
        }
        Ok(Self { v_seq })
    }

    pub fn v_seq(&self) -> &Tensor {
        &self.v_seq
    }

    pub fn batch(&self) -> usize {
        self.v_seq.shape()[0]
    }

    pub fn timesteps(&self) -> usize {
        self.v_seq.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.v_seq.shape()[2]
    }

    /// Potentials for one sample at one step.
    pub fn row(&self, sample: usize, t: usize) -> &[f64] {
        let (tt, c) = (self.timesteps(), self.classes());
        let start = (sample * tt + t) * c;
        &self.v_seq.data()[start..start + c]
    }

    /// `(1/k) sum_{t<k} V_t` for one sample.
    pub fn prefix_mean(&self, sample: usize, k: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.classes()];
        for t in 0..k {
            for (a, v) in acc.iter_mut().zip(self.row(sample, t)) {
                *a += v;
            }
        }
        acc.iter().map(|a| a / k as f64).collect()
    }

    /// Records `v_seq` as a differentiable leaf and returns it with one
    /// selected `(batch, C)` node per step.
    pub fn record(&self, graph: &mut Graph) -> Result<(NodeId, Vec<NodeId>), LossError> {
        let leaf = graph.leaf(self.v_seq.clone());
        let steps = (0..self.timesteps())
            .map(|t| graph.select(leaf, t))
            .collect::<Result<_, _>>()?;
        Ok((leaf, steps))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtcConfig {
    pub tau: f64,
    pub lambda: f64,
}

impl Default for EtcConfig {
    fn default() -> Self {
        Self {
            tau: 4.0,
            lambda: 1.0,
        }
    }
}

impl EtcConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Weight on the consistency term inside the combined objective.
    pub fn weight(&self) -> f64 {
        self.lambda * self.tau * self.tau
    }
}

/// One-hot `(batch, classes)` matrix for class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (row, &label) in labels.iter().enumerate() {
        data[row * classes + label] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("non-empty batch")
}

fn check_labels(labels: &Tensor, batch: usize, classes: usize) -> Result<(), LossError> {
    if labels.shape() != [batch, classes] {
        return Err(LossError::LabelShape {
            expected: vec![batch, classes],
            got: labels.shape().to_vec(),
        });
    }
    for (row, values) in labels.data().chunks(classes).enumerate() {
        let ones = values.iter().filter(|&&x| x == 1.0).count();
        let zeros = values.iter().filter(|&&x| x == 0.0).count();
        if ones != 1 || ones + zeros != classes {
            return Err(LossError::NotOneHot { row });
        }
    }
    Ok(())
}

fn step_dims(graph: &Graph, steps: &[NodeId]) -> Result<(usize, usize), LossError> {
    let first = steps.first().ok_or(LossError::TooFewTimesteps(0))?;
    let shape = graph.shape(*first);
    if shape.len() != 2 {
        return Err(LossError::InvalidOutputs(format!(
            "per-step outputs must be (batch, C), got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

/// Cross-entropy of `softmax(mean_t V_t)` against one-hot labels.
pub fn ce_mean_node(
    graph: &mut Graph,
    steps: &[NodeId],
    labels: &Tensor,
) -> Result<NodeId, LossError> {
    let (batch, classes) = step_dims(graph, steps)?;
    check_labels(labels, batch, classes)?;
    let mut total = steps[0];
    for &v in &steps[1..] {
        total = graph.add(total, v)?;
    }
    let mean = graph.scale(total, 1.0 / steps.len() as f64, 0.0)?;
    let log_p = graph.log_softmax_temp(mean, 1.0)?;
    let y = graph.constant(labels.clone());
    let picked = graph.mul(y, log_p)?;
    let sum = graph.sum(picked)?;
    Ok(graph.scale(sum, -1.0 / batch as f64, 0.0)?)
}

/// Mean over `t` of `CE(softmax(V_t), y)`; an ablation baseline.
pub fn per_timestep_ce_node(
    graph: &mut Graph,
    steps: &[NodeId],
    labels: &Tensor,
) -> Result<NodeId, LossError> {
    let (batch, classes) = step_dims(graph, steps)?;
    check_labels(labels, batch, classes)?;
    let y = graph.constant(labels.clone());
    let mut total: Option<NodeId> = None;
    for &v in steps {
        let log_p = graph.log_softmax_temp(v, 1.0)?;
        let picked = graph.mul(y, log_p)?;
        let term = graph.sum(picked)?;
        total = Some(match total {
            Some(acc) => graph.add(acc, term)?,
            None => term,
        });
    }
    let total = total.expect("at least one step");
    Ok(graph.scale(total, -1.0 / (batch * steps.len()) as f64, 0.0)?)
}

/// Pairwise consistency loss
/// `-(1/(T(T-1))) sum_t sum_{m != t} sg(P_m) . log P_t`,
/// with `P_t = softmax(V_t / tau)`. Gradient flows only through `log P_t`.
pub fn etc_node(graph: &mut Graph, steps: &[NodeId], cfg: &EtcConfig) -> Result<NodeId, LossError> {
    cfg.validate()?;
    let t = steps.len();
    if t < 2 {
        return Err(LossError::TooFewTimesteps(t));
    }
    let (batch, _) = step_dims(graph, steps)?;
    let mut log_p = Vec::with_capacity(t);
    let mut targets = Vec::with_capacity(t);
    for &v in steps {
        log_p.push(graph.log_softmax_temp(v, cfg.tau)?);
        let p = graph.softmax_temp(v, cfg.tau)?;
        targets.push(graph.stop_gradient(p)?);
    }
    let mut pooled = targets[0];
    for &p in &targets[1..] {
        pooled = graph.add(pooled, p)?;
    }
    let mut total: Option<NodeId> = None;
    for (lp, p) in log_p.iter().zip(&targets) {
        let others = graph.sub(pooled, *p)?;
        let prod = graph.mul(others, *lp)?;
        let term = graph.sum(prod)?;
        total = Some(match total {
            Some(acc) => graph.add(acc, term)?,
            None => term,
        });
    }
    let scale = -1.0 / (batch * t * (t - 1)) as f64;
    Ok(graph.scale(total.expect("T >= 2"), scale, 0.0)?)
}

/// `CE + lambda tau^2 ETC`. Returns the cross-entropy node itself when the
/// consistency weight is zero or `T = 1`.
pub fn combined_node(
    graph: &mut Graph,
    steps: &[NodeId],
    labels: &Tensor,
    cfg: &EtcConfig,
) -> Result<NodeId, LossError> {
    cfg.validate()?;
    let ce = ce_mean_node(graph, steps, labels)?;
    if cfg.lambda == 0.0 || steps.len() < 2 {
        return Ok(ce);
    }
    let etc = etc_node(graph, steps, cfg)?;
    let weighted = graph.scale(etc, cfg.weight(), 0.0)?;
    Ok(graph.add(ce, weighted)?)
}

fn evaluate(
    outputs: &TimestepOutputs,
    build: impl FnOnce(&mut Graph, &[NodeId]) -> Result<NodeId, LossError>,
) -> Result<f64, LossError> {
    let mut graph = Graph::new();
    let (_, steps) = outputs.record(&mut graph)?;
    let root = build(&mut graph, &steps)?;
    Ok(graph.forward(root)?.data()[0])
}

pub fn ce_mean_loss(outputs: &TimestepOutputs, labels: &Tensor) -> Result<f64, LossError> {
    evaluate(outputs, |g, s| ce_mean_node(g, s, labels))
}

pub fn per_timestep_ce_loss(outputs: &TimestepOutputs, labels: &Tensor) -> Result<f64, LossError> {
    evaluate(outputs, |g, s| per_timestep_ce_node(g, s, labels))
}

pub fn etc_loss(outputs: &TimestepOutputs, cfg: &EtcConfig) -> Result<f64, LossError> {
    evaluate(outputs, |g, s| etc_node(g, s, cfg))
}

pub fn combined_loss(
    outputs: &TimestepOutputs,
    labels: &Tensor,
    cfg: &EtcConfig,
) -> Result<f64, LossError> {
    evaluate(outputs, |g, s| combined_node(g, s, labels, cfg))
}

/// `P_t = softmax(V_t / tau)` for every sample and step, `(batch, T, C)`.
pub fn per_timestep_probs(outputs: &TimestepOutputs, tau: f64) -> Result<Tensor, LossError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(AutodiffError::InvalidTemperature(tau).into());
    }
    Ok(outputs.v_seq().softmax_rows(tau))
}

/// Mean over samples and steps of
/// `(1/(T-1)) sum_{m != t} KL(P_m || P_t)`. Diagnostic only.
pub fn etc_kl_metric(outputs: &TimestepOutputs, tau: f64) -> Result<f64, LossError> {
    let t = outputs.timesteps();
    if t < 2 {
        return Err(LossError::TooFewTimesteps(t));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(AutodiffError::InvalidTemperature(tau).into());
    }
    let c = outputs.classes();
    let log_p = outputs.v_seq().log_softmax_rows(tau);
    let mut total = 0.0;
    for block in log_p.data().chunks(t * c) {
        for target in 0..t {
            let lt = &block[target * c..(target + 1) * c];
            for other in (0..t).filter(|&m| m != target) {
                let lm = &block[other * c..(other + 1) * c];
                total += lm
                    .iter()
                    .zip(lt)
                    .map(|(&a, &b)| a.exp() * (a - b))
                    .sum::<f64>()
                    / (t - 1) as f64;
            }
        }
    }
    Ok(total / (outputs.batch() * t) as f64)
}

/// Mean over samples and steps of the entropy of `P_t`.
pub fn mean_timestep_entropy(outputs: &TimestepOutputs, tau: f64) -> Result<f64, LossError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(AutodiffError::InvalidTemperature(tau).into());
    }
    let log_p = outputs.v_seq().log_softmax_rows(tau);
    let h: f64 = log_p.data().iter().map(|&l| -l.exp() * l).sum();
    Ok(h / (outputs.batch() * outputs.timesteps()) as f64)
}
