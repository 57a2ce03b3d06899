use std::fmt;
use std::sync::Arc;

use super::{AutodiffError, Tensor};

/// Elementwise function with an externally supplied derivative.
///
/// `derivative` is evaluated at the forward *input*, so it may differ from the
/// true derivative of `forward` (a surrogate).
pub trait CustomGrad: Send + Sync {
    fn forward(&self, x: f64) -> f64;
    fn derivative(&self, x: f64) -> f64;
    fn name(&self) -> &'static str {
        "custom"
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Operation recorded at a node.
#[derive(Clone)]
pub enum OpKind {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// `scale * x + offset`
    Scale {
        input: NodeId,
        scale: f64,
        offset: f64,
    },
    MatMul(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Log(NodeId),
    Exp(NodeId),
    SoftmaxTemp {
        input: NodeId,
        tau: f64,
    },
    LogSoftmaxTemp {
        input: NodeId,
        tau: f64,
    },
    StopGradient(NodeId),
    Custom {
        input: NodeId,
        func: Arc<dyn CustomGrad>,
    },
    /// Stack `(B, C)` nodes into `(B, K, C)` along a new middle axis.
    Stack(Vec<NodeId>),
    /// Take index `index` of the middle axis of a `(B, K, C)` node.
    Select {
        input: NodeId,
        index: usize,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add(..) => "add",
            OpKind::Sub(..) => "sub",
            OpKind::Scale { .. } => "scale",
            OpKind::MatMul(..) => "matmul",
            OpKind::Mul(..) => "mul",
            OpKind::Sum(_) => "sum",
            OpKind::Mean(_) => "mean",
            OpKind::Log(_) => "log",
            OpKind::Exp(_) => "exp",
            OpKind::SoftmaxTemp { .. } => "softmax_temp",
            OpKind::LogSoftmaxTemp { .. } => "log_softmax_temp",
            OpKind::StopGradient(_) => "stop_gradient",
            OpKind::Custom { .. } => "custom",
            OpKind::Stack(_) => "stack",
            OpKind::Select { .. } => "select",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            OpKind::Leaf => vec![],
            OpKind::Add(a, b) | OpKind::Sub(a, b) | OpKind::MatMul(a, b) | OpKind::Mul(a, b) => {
                vec![*a, *b]
            }
            OpKind::Scale { input, .. }
            | OpKind::SoftmaxTemp { input, .. }
            | OpKind::LogSoftmaxTemp { input, .. }
            | OpKind::Custom { input, .. }
            | OpKind::Select { input, .. } => vec![*input],
            OpKind::Sum(a)
            | OpKind::Mean(a)
            | OpKind::Log(a)
            | OpKind::Exp(a)
            | OpKind::StopGradient(a) => vec![*a],
            OpKind::Stack(items) => items.clone(),
        }
    }
}

struct Node {
    op: OpKind,
    shape: Vec<usize>,
    requires_grad: bool,
}

/// Retained computation graph for one forward/backward cycle.
///
/// Node ids are assigned in construction order, so every node's inputs have
/// smaller ids and ascending id order is a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
}

/// Gradients of a scalar root with respect to every leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `leaf`; `None` for non-leaf or unknown ids.
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(leaf.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.grads.get_mut(leaf.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (parameters, or anything a gradient is wanted for).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient (inputs, labels).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: OpKind::Leaf,
            shape: value.shape().to_vec(),
            requires_grad,
        });
        self.values.push(Some(value));
        id
    }

    /// Replaces a leaf value. Downstream cached values become stale until
    /// the next [`Graph::forward`].
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<(), AutodiffError> {
        let node = self.node(id)?;
        if !matches!(node.op, OpKind::Leaf) {
            return Err(AutodiffError::NotALeaf(id.0));
        }
        if node.shape != value.shape() {
            return Err(self.mismatch(
                id.0,
                "leaf",
                format!("expected {:?}, got {:?}", node.shape, value.shape()),
            ));
        }
        self.values[id.0] = Some(value);
        Ok(())
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &OpKind {
        &self.nodes[id.0].op
    }

    /// Cached value of a node after the most recent forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    fn node(&self, id: NodeId) -> Result<&Node, AutodiffError> {
        self.nodes.get(id.0).ok_or(AutodiffError::UnknownNode(id.0))
    }

    fn mismatch(&self, node: usize, op: &'static str, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch { node, op, detail }
    }

    fn push(&mut self, op: OpKind, shape: Vec<usize>) -> NodeId {
        let requires_grad = !matches!(op, OpKind::StopGradient(_))
            && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
        });
        self.values.push(None);
        id
    }

    fn same_shape(&mut self, op: OpKind) -> Result<NodeId, AutodiffError> {
        let inputs = op.inputs();
        for &i in &inputs {
            self.node(i)?;
        }
        let shape = self.nodes[inputs[0].0].shape.clone();
        if let Some(other) = inputs.get(1) {
            let rhs = &self.nodes[other.0].shape;
            if *rhs != shape {
                return Err(self.mismatch(
                    self.nodes.len(),
                    op.name(),
                    format!("{shape:?} vs {rhs:?}"),
                ));
            }
        }
        Ok(self.push(op, shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape(OpKind::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape(OpKind::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape(OpKind::Mul(a, b))
    }

    /// `scale * x + offset`, elementwise.
    pub fn scale(&mut self, x: NodeId, scale: f64, offset: f64) -> Result<NodeId, AutodiffError> {
        self.same_shape(OpKind::Scale {
            input: x,
            scale,
            offset,
        })
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape(OpKind::Log(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape(OpKind::Exp(x))
    }

    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape(OpKind::StopGradient(x))
    }

    pub fn custom(
        &mut self,
        x: NodeId,
        func: Arc<dyn CustomGrad>,
    ) -> Result<NodeId, AutodiffError> {
        self.same_shape(OpKind::Custom { input: x, func })
    }

    pub fn softmax_temp(&mut self, x: NodeId, tau: f64) -> Result<NodeId, AutodiffError> {
        check_tau(tau)?;
        self.same_shape(OpKind::SoftmaxTemp { input: x, tau })
    }

    pub fn log_softmax_temp(&mut self, x: NodeId, tau: f64) -> Result<NodeId, AutodiffError> {
        check_tau(tau)?;
        self.same_shape(OpKind::LogSoftmaxTemp { input: x, tau })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.node(x)?;
        Ok(self.push(OpKind::Sum(x), vec![1]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.node(x)?;
        Ok(self.push(OpKind::Mean(x), vec![1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch(self.nodes.len(), "matmul", format!("{sa:?} x {sb:?}")));
        }
        Ok(self.push(OpKind::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    pub fn stack(&mut self, items: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let first = items
            .first()
            .ok_or_else(|| self.mismatch(self.nodes.len(), "stack", "no inputs".into()))?;
        let shape = self.node(*first)?.shape.clone();
        if shape.len() != 2 {
            return Err(self.mismatch(
                self.nodes.len(),
                "stack",
                format!("inputs must be rank 2, got {shape:?}"),
            ));
        }
        for &i in items {
            if self.node(i)?.shape != shape {
                return Err(self.mismatch(
                    self.nodes.len(),
                    "stack",
                    format!("{:?} vs {:?}", self.nodes[i.0].shape, shape),
                ));
            }
        }
        Ok(self.push(
            OpKind::Stack(items.to_vec()),
            vec![shape[0], items.len(), shape[1]],
        ))
    }

    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId, AutodiffError> {
        let shape = self.node(x)?.shape.clone();
        if shape.len() != 3 || index >= shape[1] {
            return Err(self.mismatch(
                self.nodes.len(),
                "select",
                format!("index {index} into {shape:?}"),
            ));
        }
        Ok(self.push(OpKind::Select { input: x, index }, vec![shape[0], shape[2]]))
    }

    fn reachable(&self, root: NodeId) -> Vec<bool> {
        let mut seen = vec![false; root.0 + 1];
        let mut stack = vec![root];
        seen[root.0] = true;
        while let Some(id) = stack.pop() {
            for input in self.nodes[id.0].op.inputs() {
                if !seen[input.0] {
                    seen[input.0] = true;
                    stack.push(input);
                }
            }
        }
        seen
    }

    /// Evaluates every node reachable from `root` and returns the root value.
    pub fn forward(&mut self, root: NodeId) -> Result<Tensor, AutodiffError> {
        self.node(root)?;
        let live = self.reachable(root);
        let bad_leaf = live.iter().enumerate().find(|&(i, &needed)| {
            needed
                && matches!(self.nodes[i].op, OpKind::Leaf)
                && !self.values[i].as_ref().is_some_and(Tensor::is_finite)
        });
        if let Some((idx, _)) = bad_leaf {
            return Err(AutodiffError::NonFinite {
                node: idx,
                op: "leaf",
            });
        }
        for (idx, &needed) in live.iter().enumerate() {
            if !needed || matches!(self.nodes[idx].op, OpKind::Leaf) {
                continue;
            }
            let value = self.eval(idx);
            if !value.is_finite() {
                return Err(AutodiffError::NonFinite {
                    node: idx,
                    op: self.nodes[idx].op.name(),
                });
            }
            self.values[idx] = Some(value);
        }
        Ok(self.values[root.0].clone().expect("root evaluated"))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0]
            .as_ref()
            .expect("inputs evaluated before their consumers")
    }

    fn eval(&self, idx: usize) -> Tensor {
        let node = &self.nodes[idx];
        match &node.op {
            OpKind::Leaf => unreachable!("leaves are not evaluated"),
            OpKind::Add(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x + y),
            OpKind::Sub(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x - y),
            OpKind::Mul(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x * y),
            OpKind::Scale {
                input,
                scale,
                offset,
            } => self.val(*input).map(|x| scale * x + offset),
            OpKind::MatMul(a, b) => self.val(*a).matmul(self.val(*b)),
            OpKind::Sum(a) => Tensor::scalar(self.val(*a).data().iter().sum()),
            OpKind::Mean(a) => {
                let v = self.val(*a);
                Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64)
            }
            OpKind::Log(a) => self.val(*a).map(f64::ln),
            OpKind::Exp(a) => self.val(*a).map(f64::exp),
            OpKind::SoftmaxTemp { input, tau } => self.val(*input).softmax_rows(*tau),
            OpKind::LogSoftmaxTemp { input, tau } => self.val(*input).log_softmax_rows(*tau),
            OpKind::StopGradient(a) => self.val(*a).clone(),
            OpKind::Custom { input, func } => self.val(*input).map(|x| func.forward(x)),
            OpKind::Stack(items) => {
                let (b, k, c) = (node.shape[0], node.shape[1], node.shape[2]);
                let mut out = vec![0.0; b * k * c];
                for (slot, item) in items.iter().enumerate() {
                    let src = self.val(*item).data();
                    for row in 0..b {
                        let dst = (row * k + slot) * c;
                        out[dst..dst + c].copy_from_slice(&src[row * c..(row + 1) * c]);
                    }
                }
                Tensor::new(node.shape.clone(), out).expect("stack shape")
            }
            OpKind::Select { input, index } => {
                let src = self.val(*input);
                let (k, c) = (src.shape()[1], src.shape()[2]);
                let data = src
                    .data()
                    .chunks(k * c)
                    .flat_map(|block| &block[index * c..(index + 1) * c])
                    .copied()
                    .collect();
                Tensor::new(node.shape.clone(), data).expect("select shape")
            }
        }
    }

    /// Accumulates `d root / d leaf` for every differentiable leaf.
    ///
    /// Custom-gradient nodes contribute their registered derivative and
    /// stop-gradient nodes contribute nothing. Nodes are visited once, in
    /// descending id order, so results are bitwise reproducible.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, AutodiffError> {
        let root_node = self.node(root)?;
        if root_node.shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarRoot {
                node: root.0,
                shape: root_node.shape.clone(),
            });
        }
        let live = self.reachable(root);
        for (idx, &needed) in live.iter().enumerate() {
            if needed && self.values[idx].is_none() {
                return Err(AutodiffError::NotEvaluated(idx));
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(&root_node.shape, 1.0));

        for idx in (0..=root.0).rev() {
            if !live[idx] || !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, OpKind::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
        }

        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, OpKind::Leaf) {
                out[idx] = Some(
                    grads[idx]
                        .take()
                        .filter(|_| node.requires_grad)
                        .unwrap_or_else(|| Tensor::zeros(&node.shape)),
                );
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, contribution: Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            OpKind::Leaf | OpKind::StopGradient(_) => {}
            OpKind::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            OpKind::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            OpKind::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.val(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.val(*a), |x, y| x * y));
                }
            }
            OpKind::Scale { input, scale, .. } => {
                self.accumulate(grads, *input, g.map(|x| x * scale));
            }
            OpKind::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.val(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.val(*a).matmul_tn(g));
                }
            }
            OpKind::Sum(a) => {
                let shape = self.nodes[a.0].shape.clone();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.data()[0]));
            }
            OpKind::Mean(a) => {
                let shape = self.nodes[a.0].shape.clone();
                let n: usize = shape.iter().product();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.data()[0] / n as f64));
            }
            OpKind::Log(a) => {
                self.accumulate(grads, *a, g.zip_map(self.val(*a), |x, y| x / y));
            }
            OpKind::Exp(a) => {
                let out = self.val(NodeId(idx));
                self.accumulate(grads, *a, g.zip_map(out, |x, y| x * y));
            }
            OpKind::SoftmaxTemp { input, tau } => {
                let p = self.val(NodeId(idx));
                let c = p.last_dim();
                let mut out = g.clone();
                for (row, prow) in out.data_mut().chunks_mut(c).zip(p.data().chunks(c)) {
                    let dot: f64 = row.iter().zip(prow).map(|(x, y)| x * y).sum();
                    for (x, &pi) in row.iter_mut().zip(prow) {
                        *x = pi * (*x - dot) / tau;
                    }
                }
                self.accumulate(grads, *input, out);
            }
            OpKind::LogSoftmaxTemp { input, tau } => {
                let logp = self.val(NodeId(idx));
                let c = logp.last_dim();
                let mut out = g.clone();
                for (row, lrow) in out.data_mut().chunks_mut(c).zip(logp.data().chunks(c)) {
                    let total: f64 = row.iter().sum();
                    for (x, &li) in row.iter_mut().zip(lrow) {
                        *x = (*x - li.exp() * total) / tau;
                    }
                }
                self.accumulate(grads, *input, out);
            }
            OpKind::Custom { input, func } => {
                let x = self.val(*input);
                self.accumulate(
                    grads,
                    *input,
                    g.zip_map(x, |gi, xi| gi * func.derivative(xi)),
                );
            }
            OpKind::Stack(items) => {
                let shape = &self.nodes[idx].shape;
                let (b, k, c) = (shape[0], shape[1], shape[2]);
                for (slot, item) in items.iter().enumerate() {
                    if !self.wants(*item) {
                        continue;
                    }
                    let mut part = Vec::with_capacity(b * c);
                    for row in 0..b {
                        let src = (row * k + slot) * c;
                        part.extend_from_slice(&g.data()[src..src + c]);
                    }
                    let part = Tensor::new(vec![b, c], part).expect("stack grad shape");
                    self.accumulate(grads, *item, part);
                }
            }
            OpKind::Select { input, index } => {
                let shape = self.nodes[input.0].shape.clone();
                let (k, c) = (shape[1], shape[2]);
                let mut full = Tensor::zeros(&shape);
                for (row, block) in full.data_mut().chunks_mut(k * c).enumerate() {
                    block[index * c..(index + 1) * c]
                        .copy_from_slice(&g.data()[row * c..(row + 1) * c]);
                }
                self.accumulate(grads, *input, full);
            }
        }
    }
}

fn check_tau(tau: f64) -> Result<(), AutodiffError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(AutodiffError::InvalidTemperature(tau))
    }
}
