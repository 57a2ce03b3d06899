//! Discrete leaky integrate-and-fire layers unrolled over time.
//!
//! Hidden layers integrate `v' = (1 - 1/tau_m) v + (1/tau_m) I`, fire where
//! `v' >= v_th` and hard-reset to `v_reset`. The reset multiplier is wrapped in
//! a stop-gradient, so the triangular surrogate is the only gradient route
//! through a spike. The output layer is a leaky integrator that never fires;
//! its potentials are the per-timestep logits.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, CustomGrad, Graph, NodeId, Tensor};
use crate::losses::TimestepOutputs;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SnnError {
    #[error("invalid neuron parameters: {0}")]
    InvalidParams(String),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("weight {layer} has shape {got:?}, expected {expected:?}")]
    WeightShape {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("input has {got} timesteps, network expects {expected}")]
    Timesteps { expected: usize, got: usize },
    #[error("input shape {got:?} does not match (batch, T, {input_dim})")]
    InputShape { got: Vec<usize>, input_dim: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub tau_m: f64,
    pub v_th: f64,
    pub v_reset: f64,
    pub surrogate_a: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau_m: 2.0,
            v_th: 0.5,
            v_reset: 0.0,
            surrogate_a: 2.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<(), SnnError> {
        if !(self.tau_m >= 1.0 && self.tau_m.is_finite()) {
            return Err(SnnError::InvalidParams(format!(
                "tau_m must be >= 1, got {}",
                self.tau_m
            )));
        }
        if !(self.surrogate_a > 0.0 && self.surrogate_a.is_finite()) {
            return Err(SnnError::InvalidParams(format!(
                "surrogate_a must be > 0, got {}",
                self.surrogate_a
            )));
        }
        if !self.v_th.is_finite() || !self.v_reset.is_finite() {
            return Err(SnnError::InvalidParams("non-finite potential".into()));
        }
        Ok(())
    }

    pub fn leak(&self) -> f64 {
        1.0 - 1.0 / self.tau_m
    }

    pub fn gain(&self) -> f64 {
        1.0 / self.tau_m
    }

    pub fn spike_fn(&self) -> SpikeFn {
        SpikeFn {
            v_th: self.v_th,
            a: self.surrogate_a,
        }
    }
}

/// Heaviside firing `H(v - v_th)` with the triangular pseudo-derivative
/// `max(0, a - a^2 |v - v_th|)` supported on `|v - v_th| <= 1/a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeFn {
    pub v_th: f64,
    pub a: f64,
}

impl CustomGrad for SpikeFn {
    fn forward(&self, v: f64) -> f64 {
        if v >= self.v_th {
            1.0
        } else {
            0.0
        }
    }

    fn derivative(&self, v: f64) -> f64 {
        let dist = (v - self.v_th).abs();
        if dist > 1.0 / self.a {
            0.0
        } else {
            -self.a * self.a * dist + self.a
        }
    }

    fn name(&self) -> &'static str {
        "spike"
    }
}

/// Potentials and spikes of one layer at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    pub v: Tensor,
    pub s: Tensor,
}

impl LifState {
    pub fn resting(batch: usize, neurons: usize, params: &LifParams) -> Self {
        Self {
            v: Tensor::filled(&[batch, neurons], params.v_reset),
            s: Tensor::zeros(&[batch, neurons]),
        }
    }
}

/// Nodes produced by one recorded LIF update.
#[derive(Debug, Clone, Copy)]
pub struct LifStepNodes {
    /// Potential after integration, before reset.
    pub potential: NodeId,
    pub spikes: NodeId,
    /// Potential carried to the next step (after reset).
    pub stored: NodeId,
}

/// Records one hidden-layer update on `graph`.
///
/// `prev` is the stored potential from the previous step, or `None` at the
/// first step, where the state is at rest.
pub fn lif_step_graph(
    graph: &mut Graph,
    prev: Option<NodeId>,
    current: NodeId,
    params: &LifParams,
    activation: &Arc<dyn CustomGrad>,
) -> Result<LifStepNodes, AutodiffError> {
    let drive = graph.scale(current, params.gain(), 0.0)?;
    let potential = match prev {
        Some(v) => {
            let leaked = graph.scale(v, params.leak(), 0.0)?;
            graph.add(leaked, drive)?
        }
        None if params.v_reset != 0.0 => graph.scale(drive, 1.0, params.leak() * params.v_reset)?,
        None => drive,
    };
    let spikes = graph.custom(potential, Arc::clone(activation))?;
    let fired = graph.stop_gradient(spikes)?;
    let keep = graph.scale(fired, -1.0, 1.0)?;
    let mut stored = graph.mul(potential, keep)?;
    if params.v_reset != 0.0 {
        let reset = graph.scale(fired, params.v_reset, 0.0)?;
        stored = graph.add(stored, reset)?;
    }
    Ok(LifStepNodes {
        potential,
        spikes,
        stored,
    })
}

/// One LIF update on concrete values.
pub fn lif_step(
    state: &LifState,
    input_current: &Tensor,
    params: &LifParams,
) -> Result<LifState, SnnError> {
    params.validate()?;
    let mut graph = Graph::new();
    let v = graph.constant(state.v.clone());
    let current = graph.constant(input_current.clone());
    let activation: Arc<dyn CustomGrad> = Arc::new(params.spike_fn());
    let nodes = lif_step_graph(&mut graph, Some(v), current, params, &activation)?;
    let s = graph.forward(nodes.spikes)?;
    let v = graph.forward(nodes.stored)?;
    Ok(LifState { v, s })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputMode {
    /// Non-spiking leaky integrator; never thresholds or resets.
    #[default]
    Integrator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Input width, hidden widths..., class count.
    pub layer_sizes: Vec<usize>,
    pub timesteps: usize,
    pub lif: LifParams,
    pub output_mode: OutputMode,
}

impl NetworkSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        timesteps: usize,
        lif: LifParams,
    ) -> Result<Self, SnnError> {
        let spec = Self {
            layer_sizes,
            timesteps,
            lif,
            output_mode: OutputMode::Integrator,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SnnError> {
        if self.layer_sizes.len() < 3 {
            return Err(SnnError::InvalidNetwork(
                "need input, at least one hidden layer and an output layer".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(SnnError::InvalidNetwork(
                "layer sizes must be positive".into(),
            ));
        }
        if self.timesteps == 0 {
            return Err(SnnError::InvalidNetwork("timesteps must be >= 1".into()));
        }
        self.lif.validate()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    /// `(fan_in, fan_out)` for each weight matrix.
    pub fn weight_shapes(&self) -> Vec<[usize; 2]> {
        self.layer_sizes.windows(2).map(|w| [w[0], w[1]]).collect()
    }
}

/// Uniform `±sqrt(6 / fan_in)` initialization, deterministic per seed.
pub fn init_weights(spec: &NetworkSpec, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.weight_shapes()
        .into_iter()
        .map(|[fan_in, fan_out]| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
        })
        .collect()
}

/// Node handles for an unrolled forward pass.
#[derive(Debug, Clone)]
pub struct Unrolled {
    /// Output potentials `V_t`, one `(batch, classes)` node per step.
    pub outputs: Vec<NodeId>,
    /// `[hidden layer][t]` pre-reset potentials.
    pub hidden_potentials: Vec<Vec<NodeId>>,
    /// `[hidden layer][t]` spike tensors.
    pub hidden_spikes: Vec<Vec<NodeId>>,
}

/// A network topology together with the spike nonlinearity used to unroll it.
#[derive(Clone)]
pub struct Network {
    spec: NetworkSpec,
    activation: Arc<dyn CustomGrad>,
    reset: bool,
}

/// `f(x) = x` with derivative 1.
#[derive(Debug, Clone, Copy)]
struct Identity;

impl CustomGrad for Identity {
    fn forward(&self, v: f64) -> f64 {
        v
    }

    fn derivative(&self, _v: f64) -> f64 {
        1.0
    }

    fn name(&self) -> &'static str {
        "identity"
    }
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self, SnnError> {
        spec.validate()?;
        let activation: Arc<dyn CustomGrad> = Arc::new(spec.lif.spike_fn());
        Ok(Self {
            spec,
            activation,
            reset: true,
        })
    }

    /// Swaps the spike nonlinearity. Used by tests to probe the unrolled
    /// graph with a smooth activation.
    pub fn with_activation(mut self, activation: Arc<dyn CustomGrad>) -> Self {
        self.activation = activation;
        self
    }

    /// Test hook: identity activation and no reset, which makes the unroll
    /// linear in its inputs.
    pub fn linear_probe(mut self) -> Self {
        self.activation = Arc::new(Identity);
        self.reset = false;
        self
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn check_weights(&self, shapes: &[&[usize]]) -> Result<(), SnnError> {
        let expected = self.spec.weight_shapes();
        if shapes.len() != expected.len() {
            return Err(SnnError::InvalidNetwork(format!(
                "expected {} weight matrices, got {}",
                expected.len(),
                shapes.len()
            )));
        }
        for (layer, (got, want)) in shapes.iter().zip(&expected).enumerate() {
            if *got != want.as_slice() {
                return Err(SnnError::WeightShape {
                    layer,
                    expected: want.to_vec(),
                    got: got.to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Records the whole unroll over `inputs.len()` steps as one graph.
    ///
    /// `weights` are `(fan_in, fan_out)` nodes and `inputs` are per-step
    /// `(batch, input_dim)` current nodes. Fewer steps than the configured
    /// `T` is allowed (truncated evaluation); more is not.
    pub fn unroll(
        &self,
        graph: &mut Graph,
        weights: &[NodeId],
        inputs: &[NodeId],
    ) -> Result<Unrolled, SnnError> {
        let shapes: Vec<&[usize]> = weights.iter().map(|&w| graph.shape(w)).collect();
        self.check_weights(&shapes)?;
        if inputs.is_empty() || inputs.len() > self.spec.timesteps {
            return Err(SnnError::Timesteps {
                expected: self.spec.timesteps,
                got: inputs.len(),
            });
        }
        let lif = &self.spec.lif;
        let hidden = weights.len() - 1;
        let mut stored: Vec<Option<NodeId>> = vec![None; hidden];
        let mut out_v: Option<NodeId> = None;
        let mut result = Unrolled {
            outputs: Vec::with_capacity(inputs.len()),
            hidden_potentials: vec![Vec::new(); hidden],
            hidden_spikes: vec![Vec::new(); hidden],
        };
        for &x in inputs {
            let mut signal = x;
            for layer in 0..hidden {
                let current = graph.matmul(signal, weights[layer])?;
                let step = lif_step_graph(graph, stored[layer], current, lif, &self.activation)?;
                stored[layer] = Some(if self.reset {
                    step.stored
                } else {
                    step.potential
                });
                result.hidden_potentials[layer].push(step.potential);
                result.hidden_spikes[layer].push(step.spikes);
                signal = step.spikes;
            }
            let current = graph.matmul(signal, weights[hidden])?;
            let drive = graph.scale(current, lif.gain(), 0.0)?;
            let v = match out_v {
                Some(prev) => {
                    let leaked = graph.scale(prev, lif.leak(), 0.0)?;
                    graph.add(leaked, drive)?
                }
                None if lif.v_reset != 0.0 => graph.scale(drive, 1.0, lif.leak() * lif.v_reset)?,
                None => drive,
            };
            out_v = Some(v);
            result.outputs.push(v);
        }
        Ok(result)
    }
}

/// Splits a `(batch, T, dim)` tensor into `T` tensors of `(batch, dim)`.
pub fn split_steps(inputs: &Tensor) -> Vec<Tensor> {
    let shape = inputs.shape();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    (0..t)
        .map(|step| {
            let data = inputs
                .data()
                .chunks(t * d)
                .take(b)
                .flat_map(|block| &block[step * d..(step + 1) * d])
                .copied()
                .collect();
            Tensor::new(vec![b, d], data).expect("positive dims")
        })
        .collect()
}

/// Runs the unrolled network on concrete weights and a `(batch, T, dim)`
/// input, returning the output potentials.
pub fn lif_unroll(
    spec: &NetworkSpec,
    weights: &[Tensor],
    inputs: &Tensor,
) -> Result<TimestepOutputs, SnnError> {
    let net = Network::new(spec.clone())?;
    let shape = inputs.shape();
    if shape.len() != 3 || shape[2] != spec.input_dim() {
        return Err(SnnError::InputShape {
            got: shape.to_vec(),
            input_dim: spec.input_dim(),
        });
    }
    if shape[1] != spec.timesteps {
        return Err(SnnError::Timesteps {
            expected: spec.timesteps,
            got: shape[1],
        });
    }
    let mut graph = Graph::new();
    let w: Vec<NodeId> = weights.iter().map(|t| graph.constant(t.clone())).collect();
    let x: Vec<NodeId> = split_steps(inputs)
        .into_iter()
        .map(|t| graph.constant(t))
        .collect();
    let unrolled = net.unroll(&mut graph, &w, &x)?;
    let stacked = graph.stack(&unrolled.outputs)?;
    let v_seq = graph.forward(stacked)?;
    Ok(TimestepOutputs::new(v_seq).expect("unroll yields rank-3 finite output"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(v: f64) -> LifState {
        LifState {
            v: Tensor::new(vec![1, 1], vec![v]).unwrap(),
            s: Tensor::zeros(&[1, 1]),
        }
    }

    fn step(v: f64, i: f64) -> LifState {
        let current = Tensor::new(vec![1, 1], vec![i]).unwrap();
        lif_step(&state(v), &current, &LifParams::default()).unwrap()
    }

    #[test]
    fn spike_fn_examples() {
        let f = LifParams::default().spike_fn();
        assert_eq!((f.forward(0.5), f.derivative(0.5)), (1.0, 2.0));
        assert_eq!((f.forward(1.1), f.derivative(1.1)), (1.0, 0.0));
        assert_eq!(f.forward(0.75), 1.0);
        assert!((f.derivative(0.75) - 1.0).abs() < 1e-15);
        assert_eq!(f.forward(0.49), 0.0);
        assert!((f.derivative(0.49) - 1.96).abs() < 1e-14);
    }

    #[test]
    fn lif_step_examples() {
        let s = step(0.2, 0.6);
        assert!((s.v.data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(s.s.data()[0], 0.0);

        let s = step(0.4, 0.8);
        assert_eq!(s.s.data()[0], 1.0);
        assert_eq!(s.v.data()[0], 0.0);

        let s = step(0.0, 0.0);
        assert_eq!((s.v.data()[0], s.s.data()[0]), (0.0, 0.0));
    }

    #[test]
    fn threshold_tie_fires() {
        // 0.5 * 0.5 + 0.5 * 0.5 = 0.5 exactly
        let s = step(0.5, 0.5);
        assert_eq!(s.s.data()[0], 1.0);
        assert_eq!(s.v.data()[0], 0.0);
    }

    #[test]
    fn nonzero_reset_potential() {
        let params = LifParams {
            v_reset: -0.25,
            ..LifParams::default()
        };
        let current = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let out = lif_step(&state(0.0), &current, &params).unwrap();
        assert_eq!(out.s.data()[0], 1.0);
        assert_eq!(out.v.data()[0], -0.25);
    }

    #[test]
    fn lif_step_shape_mismatch() {
        let current = Tensor::zeros(&[1, 2]);
        assert!(lif_step(&state(0.0), &current, &LifParams::default()).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(vec![2, 2], 1, LifParams::default()).is_err());
        assert!(NetworkSpec::new(vec![2, 3, 2], 0, LifParams::default()).is_err());
        let bad = LifParams {
            tau_m: 0.5,
            ..LifParams::default()
        };
        assert!(NetworkSpec::new(vec![2, 3, 2], 1, bad).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = NetworkSpec::new(vec![6, 5, 3], 2, LifParams::default()).unwrap();
        let a = init_weights(&spec, 1);
        assert_eq!(a, init_weights(&spec, 1));
        assert_ne!(a, init_weights(&spec, 2));
        assert!(a[0].data().iter().all(|x| x.abs() <= 1.0));
        assert_eq!(a[0].shape(), &[6, 5]);
        assert_eq!(a[1].shape(), &[5, 3]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = NetworkSpec::new(vec![2, 1, 3], 1, LifParams::default()).unwrap();
        let weights = vec![Tensor::zeros(&[2, 1]), Tensor::zeros(&[1, 3])];
        let inputs = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let out = lif_unroll(&spec, &weights, &inputs).unwrap();
        assert!(out.v_seq().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unroll_rejects_wrong_timesteps() {
        let spec = NetworkSpec::new(vec![2, 2, 2], 3, LifParams::default()).unwrap();
        let weights = init_weights(&spec, 0);
        let inputs = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(
            lif_unroll(&spec, &weights, &inputs),
            Err(SnnError::Timesteps {
                expected: 3,
                got: 2
            })
        ));
        let bad = vec![Tensor::zeros(&[3, 2]), Tensor::zeros(&[2, 2])];
        assert!(matches!(
            lif_unroll(&spec, &bad, &Tensor::zeros(&[1, 3, 2])),
            Err(SnnError::WeightShape { layer: 0, .. })
        ));
    }
}
