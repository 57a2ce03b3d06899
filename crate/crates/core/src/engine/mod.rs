//! Training runs, truncated-time evaluation, consistency measurement and
//! checkpoints.
//!
//! A [`Trainer`] owns everything that evolves during a run (weights,
//! optimizer moments, the shuffling RNG and the epoch counter), so a
//! [`Checkpoint`] taken between epochs is enough to resume bit-exactly.

mod checkpoint;
mod eval;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::config::{ConfigError, LossMode, RunConfig};
use crate::data::{DataError, Dataset, Sample};
use crate::losses::{self, LossError, TimestepOutputs};
use crate::optim::{cosine_lr, AdamW, OptimError};
use crate::snn::{init_weights, Network, SnnError};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use eval::{
    argmax, argmax_flip_rate, consistency_report, dump_distributions, eval_per_timestep,
    mean_distinct_argmax, ConsistencyReport, TestEvaluation,
};

/// Test-set samples simulated per graph during evaluation.
const EVAL_CHUNK: usize = 250;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Snn(#[from] SnnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dataset does not match network: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("eval_T {eval_t} outside 1..={trained}")]
    EvalRange { eval_t: usize, trained: usize },
    #[error("consistency report needs T >= 2, got {0}")]
    TooFewTimesteps(usize),
    #[error("no test samples")]
    EmptyTestSet,
    #[error("training already finished after {0} epochs")]
    Finished(usize),
    #[error("cannot write {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("malformed metrics header: {0}")]
    Header(String),
}

/// One record of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Training cross-entropy, averaged over samples. In `per_timestep_ce`
    /// mode this is the per-timestep objective that was optimized.
    pub loss_ce: f64,
    /// Training consistency loss; computed in every mode as a diagnostic.
    pub loss_etc: f64,
    /// The optimized objective, `loss_ce + w * loss_etc` where `w` is the
    /// effective consistency weight.
    pub loss_total: f64,
    #[serde(rename = "test_acc_full_T")]
    pub test_acc_full_t: f64,
    #[serde(rename = "test_acc_per_eval_T")]
    pub test_acc_per_eval_t: BTreeMap<usize, f64>,
    pub mean_pairwise_kl: f64,
    pub argmax_flip_rate: f64,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// First line of a metrics log: the full effective config.
pub fn metrics_header(cfg: &RunConfig) -> String {
    serde_json::json!({ "config": cfg.to_pairs() }).to_string()
}

/// Rebuilds the run config from a metrics log header line.
pub fn config_from_header(line: &str) -> Result<RunConfig, EngineError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| EngineError::Header(e.to_string()))?;
    let map = value
        .get("config")
        .and_then(|c| c.as_object())
        .ok_or_else(|| EngineError::Header("missing `config` object".into()))?;
    let mut text = String::new();
    for (k, v) in map {
        let v = v
            .as_str()
            .ok_or_else(|| EngineError::Header(format!("`{k}` is not a string")))?;
        text.push_str(&format!("{k}={v}\n"));
    }
    Ok(RunConfig::parse(&text, &[])?)
}

/// A network together with concrete weights, used for inference.
#[derive(Clone)]
pub struct Model {
    network: Network,
    weights: Vec<Tensor>,
}

impl Model {
    pub fn new(network: Network, weights: Vec<Tensor>) -> Result<Self, EngineError> {
        let shapes: Vec<&[usize]> = weights.iter().map(Tensor::shape).collect();
        network.check_weights(&shapes)?;
        Ok(Self { network, weights })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, EngineError> {
        Self::new(
            Network::new(ckpt.config.network.clone())?,
            ckpt.params.clone(),
        )
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn timesteps(&self) -> usize {
        self.network.spec().timesteps
    }

    /// Output potentials for the first `steps` input slices of each sample.
    /// Later slices are never read.
    pub fn outputs(
        &self,
        samples: &[&Sample],
        steps: usize,
    ) -> Result<TimestepOutputs, EngineError> {
        let mut v_seq = Vec::new();
        let mut batch = 0;
        for chunk in samples.chunks(EVAL_CHUNK) {
            let mut graph = Graph::new();
            let w: Vec<NodeId> = self
                .weights
                .iter()
                .map(|t| graph.constant(t.clone()))
                .collect();
            let x: Vec<NodeId> = step_inputs(chunk, steps)
                .into_iter()
                .map(|t| graph.constant(t))
                .collect();
            let unrolled = self.network.unroll(&mut graph, &w, &x)?;
            let stacked = graph.stack(&unrolled.outputs)?;
            v_seq.extend(graph.forward(stacked)?.into_data());
            batch += chunk.len();
        }
        let classes = self.network.spec().classes();
        let v_seq = Tensor::new(vec![batch, steps, classes], v_seq)
            .map_err(|_| EngineError::EmptyTestSet)?;
        Ok(TimestepOutputs::new(v_seq)?)
    }
}

/// Per-step `(batch, input_dim)` currents for the first `steps` slices.
pub fn step_inputs(samples: &[&Sample], steps: usize) -> Vec<Tensor> {
    let d = samples.first().map_or(0, |s| s.input_dim());
    (0..steps)
        .map(|t| {
            let data: Vec<f64> = samples.iter().flat_map(|s| s.step(t)).copied().collect();
            Tensor::new(vec![samples.len(), d], data).expect("non-empty batch")
        })
        .collect()
}

fn check_dataset(cfg: &RunConfig, dataset: &Dataset) -> Result<(), EngineError> {
    let spec = &cfg.network;
    if dataset.input_dim != spec.input_dim() {
        return Err(EngineError::ShapeMismatch(format!(
            "input_dim {} vs network input {}",
            dataset.input_dim,
            spec.input_dim()
        )));
    }
    if dataset.timesteps != spec.timesteps {
        return Err(EngineError::ShapeMismatch(format!(
            "dataset T {} vs network T {}",
            dataset.timesteps, spec.timesteps
        )));
    }
    if dataset.classes > spec.classes() {
        return Err(EngineError::ShapeMismatch(format!(
            "{} classes vs {} outputs",
            dataset.classes,
            spec.classes()
        )));
    }
    dataset.validate()?;
    Ok(())
}

/// Shuffling stream; weights are drawn from stream 0 of the same seed.
fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Result of [`train`]: the final state and one metrics record per epoch.
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

pub struct Trainer {
    cfg: RunConfig,
    network: Network,
    params: Vec<Tensor>,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let network = Network::new(cfg.network.clone())?;
        let params = init_weights(&cfg.network, cfg.seed);
        let optimizer = AdamW::new(cfg.optim, &params);
        Ok(Self {
            rng: shuffle_rng(cfg.seed),
            cfg,
            network,
            params,
            optimizer,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, EngineError> {
        ckpt.validate()?;
        let network = Network::new(ckpt.config.network.clone())?;
        Ok(Self {
            network,
            optimizer: AdamW {
                config: ckpt.config.optim,
                state: ckpt.optimizer,
            },
            rng: ckpt.rng.restore(),
            params: ckpt.params,
            epoch: ckpt.epoch,
            cfg: ckpt.config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn model(&self) -> Model {
        Model {
            network: self.network.clone(),
            weights: self.params.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.epoch,
            params: self.params.clone(),
            optimizer: self.optimizer.state.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// One pass over the shuffled training set followed by test evaluation.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochMetrics, EngineError> {
        if self.is_finished() {
            return Err(EngineError::Finished(self.epoch));
        }
        check_dataset(&self.cfg, dataset)?;
        let epoch = self.epoch;
        let lr = cosine_lr(epoch, self.cfg.epochs, self.cfg.optim.lr_base)?;
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut self.rng);

        let (mut sum_ce, mut sum_etc, mut sum_total) = (0.0, 0.0, 0.0);
        for (batch_idx, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &dataset.train[i]).collect();
            let step = self.train_step(&batch, lr).map_err(|e| match e {
                EngineError::Autodiff(AutodiffError::NonFinite { node, op }) => {
                    EngineError::NonFinite {
                        epoch,
                        batch: batch_idx,
                        detail: format!("node {node} ({op})"),
                    }
                }
                EngineError::Optim(OptimError::NonFiniteGradient(p)) => EngineError::NonFinite {
                    epoch,
                    batch: batch_idx,
                    detail: format!("gradient of parameter {p}"),
                },
                other => other,
            })?;
            let n = batch.len() as f64;
            sum_ce += n * step.ce;
            sum_etc += n * step.etc;
            sum_total += n * step.total;
        }
        let n = dataset.train.len().max(1) as f64;
        let test = TestEvaluation::run(
            &self.model(),
            &dataset.test,
            &self.cfg.eval_timesteps,
            self.cfg.etc.tau,
        )?;
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch,
            lr,
            loss_ce: sum_ce / n,
            loss_etc: sum_etc / n,
            loss_total: sum_total / n,
            test_acc_full_t: test.accuracy_full,
            test_acc_per_eval_t: test.accuracy_per_eval_t,
            mean_pairwise_kl: test.mean_pairwise_kl,
            argmax_flip_rate: test.argmax_flip_rate,
        })
    }

    fn train_step(&mut self, batch: &[&Sample], lr: f64) -> Result<StepLosses, EngineError> {
        let t_len = self.cfg.network.timesteps;
        let classes = self.cfg.network.classes();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let y = losses::one_hot(&labels, classes);

        let mut graph = Graph::new();
        let w: Vec<NodeId> = self.params.iter().map(|p| graph.leaf(p.clone())).collect();
        let x: Vec<NodeId> = step_inputs(batch, t_len)
            .into_iter()
            .map(|t| graph.constant(t))
            .collect();
        let out = self.network.unroll(&mut graph, &w, &x)?.outputs;

        let weight = self.cfg.effective_etc_weight();
        let ce = match self.cfg.loss_mode {
            LossMode::PerTimestepCe => losses::per_timestep_ce_node(&mut graph, &out, &y)?,
            LossMode::CeOnly | LossMode::CePlusEtc => losses::ce_mean_node(&mut graph, &out, &y)?,
        };
        let etc = if weight != 0.0 {
            Some(losses::etc_node(&mut graph, &out, &self.cfg.etc)?)
        } else {
            None
        };
        let root = match etc {
            Some(etc) => {
                let weighted = graph.scale(etc, weight, 0.0)?;
                graph.add(ce, weighted)?
            }
            None => ce,
        };
        let total = graph.forward(root)?.data()[0];
        let ce_value = graph.value(ce).expect("evaluated").data()[0];
        let etc_value = match etc {
            Some(id) => graph.value(id).expect("evaluated").data()[0],
            None if t_len >= 2 => {
                let stacked = graph.stack(&out)?;
                let v_seq = graph.forward(stacked)?;
                losses::etc_loss(&TimestepOutputs::new(v_seq)?, &self.cfg.etc)?
            }
            None => 0.0,
        };

        let mut grads = graph.backward(root)?;
        let grads: Vec<Tensor> = w
            .iter()
            .map(|&id| grads.take(id).expect("weights are leaves"))
            .collect();
        self.optimizer.step(&mut self.params, &grads, lr)?;
        Ok(StepLosses {
            ce: ce_value,
            etc: etc_value,
            total,
        })
    }
}

struct StepLosses {
    ce: f64,
    etc: f64,
    total: f64,
}

/// Runs the remaining epochs, calling `on_epoch` after each one (for log
/// writing and periodic checkpoints).
pub fn train_with(
    trainer: &mut Trainer,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<(), EngineError>,
) -> Result<Vec<EpochMetrics>, EngineError> {
    check_dataset(trainer.config(), dataset)?;
    let mut log = Vec::new();
    while !trainer.is_finished() {
        let metrics = trainer.run_epoch(dataset)?;
        on_epoch(trainer, &metrics)?;
        log.push(metrics);
    }
    Ok(log)
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train(cfg: &RunConfig, dataset: &Dataset) -> Result<TrainOutput, EngineError> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let metrics = train_with(&mut trainer, dataset, |_, _| Ok(()))?;
    Ok(TrainOutput {
        checkpoint: trainer.checkpoint(),
        metrics,
    })
}
