//! Small static-graph tensor engine with reverse-mode differentiation.
//!
//! A [`Graph`] is built once from ops (convolution, batch norm, pooling,
//! activations, losses), holds its own parameters, and is then driven by
//! [`Graph::forward`] and [`Graph::backward`]. Shapes flow dynamically
//! through the graph at forward time, so the same graph serves any batch
//! size. Every op checks its output for non-finite values and fails hard
//! rather than letting a NaN propagate silently.
//!
//! Reductions inside ops accumulate in `f64` regardless of the graph's
//! scalar type, which keeps single-precision training numerically honest
//! without changing the double-precision semantics that gradient checks
//! rely on.

pub mod adam;
pub mod gradcheck;
pub mod vpw;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Zero-filled tensor. Every dimension must be nonzero.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    /// Constant-filled tensor.
    pub fn filled(shape: &[usize], v: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    /// Wraps a row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} values does not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// First element of a single-element tensor.
    pub fn scalar_value(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }
}

// ---------------------------------------------------------------------------
// Graph structure
// ---------------------------------------------------------------------------

/// Handle to a node's output value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

/// How a parameter tensor is filled by [`Graph::init_params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform on `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`, where `fan_in`
    /// is the product of all dimensions after the first.
    KaimingUniform,
    Zeros,
    Ones,
}

/// Forward-pass behavior switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers, running statistics updated.
    Train,
    /// Batch statistics, but no state mutation; repeated forwards with the
    /// same feeds produce identical values, as finite differencing needs.
    GradCheck,
    /// Running statistics, no state mutation.
    Eval,
}

#[derive(Debug, Clone)]
enum OpKind {
    Input { name: String },
    Param { slot: usize },
    Conv2d { pad: usize },
    BatchNorm { slot: usize, momentum: f64, eps: f64 },
    Relu,
    Sigmoid,
    MaxPool2,
    Upsample2,
    ConcatChannels,
    FlattenRows,
    L2NormRows { eps: f64 },
    AffineScale { scale: f64, offset: f64 },
    Add,
    SumAll,
    DiceBce { smooth: f64, lambda: f64 },
    FosLoss { margin: f64 },
    SosReg,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Input { .. } => "input",
            OpKind::Param { .. } => "param",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::BatchNorm { .. } => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::Upsample2 => "upsample2",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::FlattenRows => "flatten_rows",
            OpKind::L2NormRows { .. } => "l2norm_rows",
            OpKind::AffineScale { .. } => "affine_scale",
            OpKind::Add => "add",
            OpKind::SumAll => "sum_all",
            OpKind::DiceBce { .. } => "dice_bce",
            OpKind::FosLoss { .. } => "fos_loss",
            OpKind::SosReg => "sos_reg",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: OpKind,
    inputs: Vec<ValueId>,
}

#[derive(Clone)]
struct ParamSlot<S: Scalar> {
    name: String,
    init: Init,
    value: Tensor<S>,
}

/// Running statistics owned by one batch-norm layer.
#[derive(Clone)]
struct BnSlot<S: Scalar> {
    name: String,
    mean: Tensor<S>,
    var: Tensor<S>,
}

/// Static computation graph with owned parameters and normalization state.
#[derive(Clone)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node>,
    params: Vec<ParamSlot<S>>,
    bn: Vec<BnSlot<S>>,
}

/// All node output values from one forward pass.
pub struct Tape<S: Scalar> {
    values: Vec<Option<Tensor<S>>>,
    mode: Mode,
}

impl<S: Scalar> Tape<S> {
    /// Output value of a node. Panics if the node was never computed.
    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        self.values[id.0]
            .as_ref()
            .expect("value was computed during forward")
    }
}

/// Gradients of one scalar output with respect to node values.
pub struct Gradients<S: Scalar> {
    by_node: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a node's output, if it was reached.
    pub fn get(&self, id: ValueId) -> Option<&Tensor<S>> {
        self.by_node[id.0].as_ref()
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            bn: Vec::new(),
        }
    }

    fn push(&mut self, op: OpKind, inputs: Vec<ValueId>) -> ValueId {
        for id in &inputs {
            assert!(id.0 < self.nodes.len(), "input node must already exist");
        }
        self.nodes.push(Node { op, inputs });
        ValueId(self.nodes.len() - 1)
    }

    /// Declares a data input fed at forward time.
    pub fn input(&mut self, name: &str) -> ValueId {
        self.push(
            OpKind::Input {
                name: name.to_string(),
            },
            vec![],
        )
    }

    /// Declares a trainable parameter tensor.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ValueId {
        assert!(
            !self.params.iter().any(|p| p.name == name),
            "parameter names must be unique: {name}"
        );
        self.params.push(ParamSlot {
            name: name.to_string(),
            init,
            value: Tensor::zeros(shape),
        });
        let slot = self.params.len() - 1;
        self.push(OpKind::Param { slot }, vec![])
    }

    /// Stride-1 zero-padded convolution from explicit weight and bias nodes.
    pub fn conv2d_raw(&mut self, x: ValueId, weight: ValueId, bias: ValueId, pad: usize) -> ValueId {
        self.push(OpKind::Conv2d { pad }, vec![x, weight, bias])
    }

    /// Stride-1 zero-padded convolution layer; creates `{prefix}.weight`
    /// (Kaiming-uniform) and `{prefix}.bias` (zeros).
    pub fn conv2d(
        &mut self,
        prefix: &str,
        x: ValueId,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        pad: usize,
    ) -> ValueId {
        let w = self.param(
            &format!("{prefix}.weight"),
            &[out_ch, in_ch, k, k],
            Init::KaimingUniform,
        );
        let b = self.param(&format!("{prefix}.bias"), &[out_ch], Init::Zeros);
        self.conv2d_raw(x, w, b, pad)
    }

    /// Per-channel batch normalization layer; creates `{prefix}.gamma`
    /// (ones), `{prefix}.beta` (zeros), and running statistics saved under
    /// `{prefix}.running_mean` / `{prefix}.running_var`.
    ///
    /// Training and gradient-check modes normalize by the batch mean and
    /// biased batch variance; training additionally folds the batch
    /// statistics into the running ones as `r = momentum * r + (1 -
    /// momentum) * batch`. Eval mode normalizes by the running statistics.
    pub fn batch_norm(&mut self, prefix: &str, x: ValueId, channels: usize) -> ValueId {
        let gamma = self.param(&format!("{prefix}.gamma"), &[channels], Init::Ones);
        let beta = self.param(&format!("{prefix}.beta"), &[channels], Init::Zeros);
        self.bn.push(BnSlot {
            name: prefix.to_string(),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::filled(&[channels], S::one()),
        });
        let slot = self.bn.len() - 1;
        self.push(
            OpKind::BatchNorm {
                slot,
                momentum: 0.9,
                eps: 1e-5,
            },
            vec![x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        self.push(OpKind::Relu, vec![x])
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        self.push(OpKind::Sigmoid, vec![x])
    }

    /// 2x2 max pooling with stride 2. Spatial dimensions must be even.
    pub fn maxpool2(&mut self, x: ValueId) -> ValueId {
        self.push(OpKind::MaxPool2, vec![x])
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, x: ValueId) -> ValueId {
        self.push(OpKind::Upsample2, vec![x])
    }

    /// Channel concatenation of two maps with equal batch and spatial dims.
    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.push(OpKind::ConcatChannels, vec![a, b])
    }

    /// Collapses every dimension after the first: `[n, ...] -> [n, prod]`.
    pub fn flatten_rows(&mut self, x: ValueId) -> ValueId {
        self.push(OpKind::FlattenRows, vec![x])
    }

    /// Scales each row of a `[n, d]` matrix to unit Euclidean length, with
    /// `eps` added to the norm to keep zero rows finite.
    pub fn l2norm_rows(&mut self, x: ValueId, eps: f64) -> ValueId {
        self.push(OpKind::L2NormRows { eps }, vec![x])
    }

    /// Elementwise `scale * x + offset`.
    pub fn affine_scale(&mut self, x: ValueId, scale: f64, offset: f64) -> ValueId {
        self.push(OpKind::AffineScale { scale, offset }, vec![x])
    }

    /// Elementwise sum of two equal-shaped tensors.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.push(OpKind::Add, vec![a, b])
    }

    /// Sum of every element, reduced to a `[1]` tensor.
    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        self.push(OpKind::SumAll, vec![x])
    }

    /// Smoothed Dice loss plus `lambda` times binary cross-entropy, reduced
    /// to one scalar. The second input is the target and receives no
    /// gradient.
    pub fn dice_bce(&mut self, pred: ValueId, target: ValueId, smooth: f64, lambda: f64) -> ValueId {
        self.push(OpKind::DiceBce { smooth, lambda }, vec![pred, target])
    }

    /// Re-points an existing Dice loss node at new smoothing and
    /// cross-entropy weights so one graph can serve several training
    /// configurations.
    pub fn set_dice_bce(&mut self, id: ValueId, new_smooth: f64, new_lambda: f64) -> Result<()> {
        if !(new_smooth > 0.0) || !(new_lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "smoothing {} must be positive and weight {} nonnegative",
                new_smooth, new_lambda
            )));
        }
        match self.nodes.get_mut(id.0).map(|n| &mut n.op) {
            Some(OpKind::DiceBce { smooth, lambda }) => {
                *smooth = new_smooth;
                *lambda = new_lambda;
                Ok(())
            }
            _ => Err(Error::State(format!(
                "node {} is not a dice loss node",
                id.0
            ))),
        }
    }

    /// Quadratic hinge triplet loss over a `[2N, d]` descriptor matrix
    /// whose first N rows are anchors and last N rows their positives.
    pub fn fos_loss(&mut self, descriptors: ValueId, margin: f64) -> ValueId {
        self.push(OpKind::FosLoss { margin }, vec![descriptors])
    }

    /// Re-points an existing hinge loss node at a new margin so one graph
    /// can serve several training configurations.
    pub fn set_fos_margin(&mut self, id: ValueId, new_margin: f64) -> Result<()> {
        if !(new_margin >= 0.0) || !new_margin.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "margin {} must be nonnegative and finite",
                new_margin
            )));
        }
        match self.nodes.get_mut(id.0).map(|n| &mut n.op) {
            Some(OpKind::FosLoss { margin }) => {
                *margin = new_margin;
                Ok(())
            }
            _ => Err(Error::State(format!(
                "node {} is not a hinge loss node",
                id.0
            ))),
        }
    }

    /// Second-order similarity regularizer over the same `[2N, d]` layout
    /// as [`Graph::fos_loss`].
    pub fn sos_reg(&mut self, descriptors: ValueId) -> ValueId {
        self.push(OpKind::SosReg, vec![descriptors])
    }

    // -- parameter access ----------------------------------------------------

    /// Number of parameter tensors.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_name(&self, index: usize) -> &str {
        &self.params[index].name
    }

    pub fn param_tensor(&self, index: usize) -> &Tensor<S> {
        &self.params[index].value
    }

    pub fn param_tensor_mut(&mut self, index: usize) -> &mut Tensor<S> {
        &mut self.params[index].value
    }

    /// Node id of the parameter with the given name.
    pub fn find_param(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total element count over parameters whose name passes the filter.
    pub fn count_param_elements(&self, mut filter: impl FnMut(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| filter(&p.name))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Fills every parameter according to its declared initializer, in
    /// creation order, from a deterministic stream seeded by `seed`.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for p in &mut self.params {
            match p.init {
                Init::Zeros => {
                    for v in p.value.data.iter_mut() {
                        *v = S::zero();
                    }
                }
                Init::Ones => {
                    for v in p.value.data.iter_mut() {
                        *v = S::one();
                    }
                }
                Init::KaimingUniform => {
                    let fan_in: usize = p.value.shape[1..].iter().product::<usize>().max(1);
                    let bound = (6.0 / fan_in as f64).sqrt();
                    for v in p.value.data.iter_mut() {
                        *v = S::from_f64_lossy(rng.random_range(-bound..bound));
                    }
                }
            }
        }
    }

    /// Running-statistic tensors of every normalization layer, by name.
    pub(crate) fn bn_state(&self) -> Vec<(String, &Tensor<S>, &Tensor<S>)> {
        self.bn
            .iter()
            .map(|b| (b.name.clone(), &b.mean, &b.var))
            .collect()
    }

    pub(crate) fn bn_state_mut(&mut self) -> Vec<(String, &mut Tensor<S>, &mut Tensor<S>)> {
        self.bn
            .iter_mut()
            .map(|b| (b.name.clone(), &mut b.mean, &mut b.var))
            .collect()
    }

    // -- execution -------------------------------------------------------------

    /// Runs the graph on the given input feeds.
    ///
    /// Every `Input` node reachable from a computed node must be fed. In
    /// `Train` mode, normalization layers fold batch statistics into their
    /// running state; the other modes leave the graph untouched.
    pub fn forward(&mut self, feeds: &[(ValueId, Tensor<S>)], mode: Mode) -> Result<Tape<S>> {
        let all: Vec<ValueId> = (0..self.nodes.len()).map(ValueId).collect();
        self.forward_subset(feeds, mode, &all)
    }

    /// Runs only the part of the graph needed to produce `targets`.
    ///
    /// Inputs outside the computed ancestor set may stay unfed; their
    /// dependents are left unevaluated on the tape.
    pub fn forward_subset(
        &mut self,
        feeds: &[(ValueId, Tensor<S>)],
        mode: Mode,
        targets: &[ValueId],
    ) -> Result<Tape<S>> {
        let mut needed = vec![false; self.nodes.len()];
        for t in targets {
            if t.0 >= self.nodes.len() {
                return Err(Error::State(format!("target node {} does not exist", t.0)));
            }
            needed[t.0] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if needed[i] {
                for dep in &self.nodes[i].inputs {
                    needed[dep.0] = true;
                }
            }
        }

        let mut values: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        for (id, t) in feeds {
            match &self.nodes[id.0].op {
                OpKind::Input { .. } => values[id.0] = Some(t.clone()),
                other => {
                    return Err(Error::State(format!(
                        "only input nodes accept feeds, node {} is {}",
                        id.0,
                        other.name()
                    )))
                }
            }
        }

        for i in 0..self.nodes.len() {
            if values[i].is_some() || !needed[i] {
                continue;
            }
            let node = self.nodes[i].clone();
            let out = match &node.op {
                OpKind::Input { name } => {
                    return Err(Error::State(format!("input '{}' was not fed", name)))
                }
                OpKind::Param { slot } => self.params[*slot].value.clone(),
                _ => {
                    let ins: Vec<&Tensor<S>> = node
                        .inputs
                        .iter()
                        .map(|id| {
                            values[id.0]
                                .as_ref()
                                .expect("graph is built in topological order")
                        })
                        .collect();
                    self.eval_op(&node.op, &ins, mode)?
                }
            };
            if !out.all_finite() {
                return Err(Error::TrainingDiverged {
                    step: i,
                    message: format!("non-finite values after {}", node.op.name()),
                });
            }
            values[i] = Some(out);
        }
        Ok(Tape { values, mode })
    }

    /// Gradients of a scalar node with respect to everything upstream.
    pub fn backward(&self, tape: &Tape<S>, loss: ValueId) -> Result<Gradients<S>> {
        let loss_val = tape.value(loss);
        if loss_val.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward target must be scalar, got shape {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(&[1], S::one()));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            if node.inputs.is_empty() {
                continue;
            }
            let gout = grads[i].take().expect("checked above");
            let input_grads = self.op_backward(&node.op, &node.inputs, tape, &gout)?;
            grads[i] = Some(gout);
            for (id, g) in node.inputs.iter().zip(input_grads) {
                if let Some(g) = g {
                    if !g.all_finite() {
                        return Err(Error::TrainingDiverged {
                            step: i,
                            message: format!(
                                "non-finite gradient flowing out of {}",
                                node.op.name()
                            ),
                        });
                    }
                    match &mut grads[id.0] {
                        Some(acc) => {
                            for (a, b) in acc.data.iter_mut().zip(g.data.iter()) {
                                *a += *b;
                            }
                        }
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(Gradients { by_node: grads })
    }

    /// Gradient tensors for every parameter, aligned with parameter order;
    /// `None` for parameters the loss does not reach.
    pub fn param_grads<'g>(&self, grads: &'g Gradients<S>) -> Vec<Option<&'g Tensor<S>>> {
        let mut out = vec![None; self.params.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let OpKind::Param { slot } = node.op {
                out[slot] = grads.by_node[i].as_ref();
            }
        }
        out
    }

    // -- op dispatch -------------------------------------------------------------

    fn eval_op(&mut self, op: &OpKind, ins: &[&Tensor<S>], mode: Mode) -> Result<Tensor<S>> {
        match op {
            OpKind::Conv2d { pad } => conv2d_forward(ins[0], ins[1], ins[2], *pad),
            OpKind::BatchNorm { slot, momentum, eps } => {
                let (out, stats) = bn_forward(ins[0], ins[1], ins[2], mode, *eps, &self.bn[*slot])?;
                if mode == Mode::Train {
                    let (bm, bv) = stats.expect("train mode computes batch statistics");
                    let b = &mut self.bn[*slot];
                    for (r, n) in b.mean.data.iter_mut().zip(bm) {
                        *r = S::from_f64_lossy(momentum * r.to_f64_lossy() + (1.0 - momentum) * n);
                    }
                    for (r, n) in b.var.data.iter_mut().zip(bv) {
                        *r = S::from_f64_lossy(momentum * r.to_f64_lossy() + (1.0 - momentum) * n);
                    }
                }
                Ok(out)
            }
            OpKind::Relu => Ok(relu_forward(ins[0])),
            OpKind::Sigmoid => Ok(sigmoid_forward(ins[0])),
            OpKind::MaxPool2 => maxpool2_forward(ins[0]),
            OpKind::Upsample2 => upsample2_forward(ins[0]),
            OpKind::ConcatChannels => concat_forward(ins[0], ins[1]),
            OpKind::FlattenRows => {
                let n = ins[0].shape()[0];
                let rest: usize = ins[0].shape()[1..].iter().product();
                ins[0].reshaped(&[n, rest])
            }
            OpKind::L2NormRows { eps } => l2norm_forward(ins[0], *eps),
            OpKind::AffineScale { scale, offset } => {
                let (a, b) = (S::from_f64_lossy(*scale), S::from_f64_lossy(*offset));
                let mut out = ins[0].clone();
                for v in out.data.iter_mut() {
                    *v = a * *v + b;
                }
                Ok(out)
            }
            OpKind::Add => {
                if ins[0].shape() != ins[1].shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "add needs equal shapes, got {:?} and {:?}",
                        ins[0].shape(),
                        ins[1].shape()
                    )));
                }
                let mut out = ins[0].clone();
                for (a, b) in out.data.iter_mut().zip(ins[1].data.iter()) {
                    *a += *b;
                }
                Ok(out)
            }
            OpKind::SumAll => {
                let acc: f64 = ins[0].data.iter().map(|v| v.to_f64_lossy()).sum();
                Tensor::from_vec(&[1], vec![S::from_f64_lossy(acc)])
            }
            OpKind::DiceBce { smooth, lambda } => dice_bce_forward(ins[0], ins[1], *smooth, *lambda),
            OpKind::FosLoss { margin } => fos_forward(ins[0], *margin),
            OpKind::SosReg => sos_forward(ins[0]),
            OpKind::Input { .. } | OpKind::Param { .. } => unreachable!("handled by caller"),
        }
    }

    fn op_backward(
        &self,
        op: &OpKind,
        inputs: &[ValueId],
        tape: &Tape<S>,
        gout: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let val = |i: usize| tape.value(inputs[i]);
        match op {
            OpKind::Conv2d { pad } => {
                let (dx, dw, db) = conv2d_backward(val(0), val(1), gout, *pad)?;
                Ok(vec![Some(dx), Some(dw), Some(db)])
            }
            OpKind::BatchNorm { slot, eps, .. } => {
                if tape.mode == Mode::Eval {
                    return Err(Error::State(
                        "backward through eval-mode batch norm is not supported".to_string(),
                    ));
                }
                let (dx, dg, db) = bn_backward(val(0), val(1), gout, *eps, &self.bn[*slot])?;
                Ok(vec![Some(dx), Some(dg), Some(db)])
            }
            OpKind::Relu => {
                let x = val(0);
                let mut dx = gout.clone();
                for (g, &v) in dx.data.iter_mut().zip(x.data.iter()) {
                    if v <= S::zero() {
                        *g = S::zero();
                    }
                }
                Ok(vec![Some(dx)])
            }
            OpKind::Sigmoid => {
                // Recompute y = sigmoid(x) from the taped input; dy/dx = y (1 - y).
                let y = sigmoid_forward(val(0));
                let mut dx = gout.clone();
                for (g, &yv) in dx.data.iter_mut().zip(y.data.iter()) {
                    *g = *g * yv * (S::one() - yv);
                }
                Ok(vec![Some(dx)])
            }
            OpKind::MaxPool2 => Ok(vec![Some(maxpool2_backward(val(0), gout)?)]),
            OpKind::Upsample2 => Ok(vec![Some(upsample2_backward(val(0), gout)?)]),
            OpKind::ConcatChannels => {
                let (da, db) = concat_backward(val(0), val(1), gout)?;
                Ok(vec![Some(da), Some(db)])
            }
            OpKind::FlattenRows => Ok(vec![Some(gout.reshaped(val(0).shape())?)]),
            OpKind::L2NormRows { eps } => Ok(vec![Some(l2norm_backward(val(0), gout, *eps)?)]),
            OpKind::AffineScale { scale, .. } => {
                let a = S::from_f64_lossy(*scale);
                let mut dx = gout.clone();
                for g in dx.data.iter_mut() {
                    *g = *g * a;
                }
                Ok(vec![Some(dx)])
            }
            OpKind::Add => Ok(vec![Some(gout.clone()), Some(gout.clone())]),
            OpKind::SumAll => {
                let g = gout.scalar_value();
                Ok(vec![Some(Tensor::filled(val(0).shape(), g))])
            }
            OpKind::DiceBce { smooth, lambda } => {
                let dpred = dice_bce_backward(val(0), val(1), gout, *smooth, *lambda)?;
                Ok(vec![Some(dpred), None])
            }
            OpKind::FosLoss { margin } => Ok(vec![Some(fos_backward(val(0), gout, *margin)?)]),
            OpKind::SosReg => Ok(vec![Some(sos_backward(val(0), gout)?)]),
            OpKind::Input { .. } | OpKind::Param { .. } => Ok(vec![]),
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Unfolds one sample into a `[ci * kh * kw, ho * wo]` patch matrix.
/// Out-of-bounds taps are zero.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [S],
) {
    debug_assert_eq!(col.len(), ci * kh * kw * ho * wo);
    for v in col.iter_mut() {
        *v = S::zero();
    }
    let hw_o = ho * wo;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((c * kh + ky) * kw + kx) * hw_o..][..hw_o];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..][..w];
                    // Valid output columns keep ox + kx - pad inside [0, w).
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad - kx).min(wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix_lo = ox_lo + kx - pad;
                    let len = ox_hi - ox_lo;
                    row[oy * wo + ox_lo..][..len]
                        .copy_from_slice(&src_row[ix_lo..ix_lo + len]);
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto one sample, accumulating where
/// patches overlap.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    col: &[S],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [S],
) {
    let hw_o = ho * wo;
    for c in 0..ci {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((c * kh + ky) * kw + kx) * hw_o..][..hw_o];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..][..w];
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad - kx).min(wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix_lo = ox_lo + kx - pad;
                    for (d, s) in dst_row[ix_lo..ix_lo + (ox_hi - ox_lo)]
                        .iter_mut()
                        .zip(&row[oy * wo + ox_lo..][..ox_hi - ox_lo])
                    {
                        *d += *s;
                    }
                }
            }
        }
    }
}

fn conv_dims<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    if x.rank() != 4 || w.rank() != 4 || b.rank() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects x[n,c,h,w], w[o,c,kh,kw], b[o]; got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (n, ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, wci, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if wci != ci || b.shape[0] != co {
        return Err(Error::ShapeMismatch(format!(
            "conv2d channel mismatch: x has {}, weight expects {}, bias has {}",
            ci, wci, b.shape[0]
        )));
    }
    let ho = (h + 2 * pad).checked_sub(kh - 1).filter(|&v| v >= 1);
    let wo = (wd + 2 * pad).checked_sub(kw - 1).filter(|&v| v >= 1);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok((n, ci, h, wd, co, kh, kw, ho, wo)),
        _ => Err(Error::ShapeMismatch(format!(
            "conv2d kernel {}x{} with pad {} does not fit input {}x{}",
            kh, kw, pad, h, wd
        ))),
    }
}

fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    pad: usize,
) -> Result<Tensor<S>> {
    let (n, ci, h, wd, co, kh, kw, ho, wo) = conv_dims(x, w, b, pad)?;
    let k = ci * kh * kw;
    let hw_o = ho * wo;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let mut col = vec![S::zero(); k * hw_o];
    for s in 0..n {
        im2col(
            &x.data[s * ci * h * wd..],
            ci,
            h,
            wd,
            kh,
            kw,
            pad,
            ho,
            wo,
            &mut col,
        );
        let out_n = &mut out.data[s * co * hw_o..(s + 1) * co * hw_o];
        unsafe {
            S::gemm(
                co,
                k,
                hw_o,
                S::one(),
                w.data.as_ptr(),
                k as isize,
                1,
                col.as_ptr(),
                hw_o as isize,
                1,
                S::zero(),
                out_n.as_mut_ptr(),
                hw_o as isize,
                1,
            );
        }
        for o in 0..co {
            let bias = b.data[o];
            for v in out_n[o * hw_o..(o + 1) * hw_o].iter_mut() {
                *v += bias;
            }
        }
    }
    Ok(out)
}

fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gout: &Tensor<S>,
    pad: usize,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let bias_probe = Tensor::zeros(&[w.shape[0]]);
    let (n, ci, h, wd, co, kh, kw, ho, wo) = conv_dims(x, w, &bias_probe, pad)?;
    let k = ci * kh * kw;
    let hw_o = ho * wo;

    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut col = vec![S::zero(); k * hw_o];
    let mut dcol = vec![S::zero(); k * hw_o];

    for s in 0..n {
        let g_n = &gout.data[s * co * hw_o..(s + 1) * co * hw_o];

        // Bias gradient: sum over positions.
        for o in 0..co {
            let mut acc = 0.0f64;
            for &g in &g_n[o * hw_o..(o + 1) * hw_o] {
                acc += g.to_f64_lossy();
            }
            db.data[o] += S::from_f64_lossy(acc);
        }

        // Weight gradient: dW += gout_n @ col_n^T, accumulated per sample.
        im2col(
            &x.data[s * ci * h * wd..],
            ci,
            h,
            wd,
            kh,
            kw,
            pad,
            ho,
            wo,
            &mut col,
        );
        unsafe {
            S::gemm(
                co,
                hw_o,
                k,
                S::one(),
                g_n.as_ptr(),
                hw_o as isize,
                1,
                col.as_ptr(),
                1,
                hw_o as isize,
                S::one(),
                dw.data.as_mut_ptr(),
                k as isize,
                1,
            );
        }

        // Input gradient: dcol = W^T @ gout_n, folded back onto the sample.
        unsafe {
            S::gemm(
                k,
                co,
                hw_o,
                S::one(),
                w.data.as_ptr(),
                1,
                k as isize,
                g_n.as_ptr(),
                hw_o as isize,
                1,
                S::zero(),
                dcol.as_mut_ptr(),
                hw_o as isize,
                1,
            );
        }
        col2im(
            &dcol,
            ci,
            h,
            wd,
            kh,
            kw,
            pad,
            ho,
            wo,
            &mut dx.data[s * ci * h * wd..(s + 1) * ci * h * wd],
        );
    }
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

type BnStats = Option<(Vec<f64>, Vec<f64>)>;

fn bn_forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    mode: Mode,
    eps: f64,
    slot: &BnSlot<S>,
) -> Result<(Tensor<S>, BnStats)> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm expects [n,c,h,w], got {:?}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm affine parameters must have shape [{}]",
            c
        )));
    }
    let plane = h * w;
    let m = (n * plane) as f64;

    let (mean, var): (Vec<f64>, Vec<f64>) = if mode == Mode::Eval {
        (
            slot.mean.data.iter().map(|v| v.to_f64_lossy()).collect(),
            slot.var.data.iter().map(|v| v.to_f64_lossy()).collect(),
        )
    } else {
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let mut acc = 0.0f64;
                for &v in &x.data[base..base + plane] {
                    acc += v.to_f64_lossy();
                }
                mean[ch] += acc;
            }
        }
        for v in mean.iter_mut() {
            *v /= m;
        }
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let mu = mean[ch];
                let mut acc = 0.0f64;
                for &v in &x.data[base..base + plane] {
                    let d = v.to_f64_lossy() - mu;
                    acc += d * d;
                }
                var[ch] += acc;
            }
        }
        for v in var.iter_mut() {
            *v /= m;
        }
        (mean, var)
    };

    let mut out = Tensor::zeros(x.shape());
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let mu = S::from_f64_lossy(mean[ch]);
            let ivar = S::from_f64_lossy(1.0 / (var[ch] + eps).sqrt());
            let g = gamma.data[ch];
            let b = beta.data[ch];
            for (o, &v) in out.data[base..base + plane]
                .iter_mut()
                .zip(&x.data[base..base + plane])
            {
                *o = g * (v - mu) * ivar + b;
            }
        }
    }
    let stats = if mode == Mode::Eval { None } else { Some((mean, var)) };
    Ok((out, stats))
}

fn bn_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    gout: &Tensor<S>,
    eps: f64,
    slot: &BnSlot<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    // Recompute batch statistics; the tape stores only op outputs.
    let beta_probe = Tensor::zeros(&[x.shape[1]]);
    let (_, stats) = bn_forward(x, gamma, &beta_probe, Mode::GradCheck, eps, slot)?;
    let (mean, var) = stats.expect("grad-check mode computes batch statistics");

    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let plane = h * w;
    let m = (n * plane) as f64;

    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(x.shape());

    for ch in 0..c {
        let mu = mean[ch];
        let ivar = 1.0 / (var[ch] + eps).sqrt();
        let g = gamma.data[ch].to_f64_lossy();

        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in 0..plane {
                let dy = gout.data[base + i].to_f64_lossy();
                let xhat = (x.data[base + i].to_f64_lossy() - mu) * ivar;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        dbeta.data[ch] = S::from_f64_lossy(sum_dy);
        dgamma.data[ch] = S::from_f64_lossy(sum_dy_xhat);

        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in 0..plane {
                let dy = gout.data[base + i].to_f64_lossy();
                let xhat = (x.data[base + i].to_f64_lossy() - mu) * ivar;
                let v = g * ivar / m * (m * dy - sum_dy - xhat * sum_dy_xhat);
                dx.data[base + i] = S::from_f64_lossy(v);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

fn relu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
    out
}

/// Numerically safe logistic function: never exponentiates a positive
/// argument, so large magnitudes saturate instead of overflowing.
fn sigmoid_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        let z = v.to_f64_lossy();
        let s = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        };
        *v = S::from_f64_lossy(s);
    }
    out
}

fn maxpool2_forward<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 4 || x.shape[2] % 2 != 0 || x.shape[3] % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "maxpool2 needs [n,c,h,w] with even h and w, got {:?}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for pl in 0..n * c {
        let src = &x.data[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out.data[pl * ho * wo..(pl + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let a = src[2 * oy * w + 2 * ox];
                let b = src[2 * oy * w + 2 * ox + 1];
                let c2 = src[(2 * oy + 1) * w + 2 * ox];
                let d = src[(2 * oy + 1) * w + 2 * ox + 1];
                dst[oy * wo + ox] = a.max(b).max(c2).max(d);
            }
        }
    }
    Ok(out)
}

/// Routes each pooled gradient to the first occurrence (row-major scan of
/// the 2x2 window) of the maximum, matching a deterministic tie rule.
fn maxpool2_backward<S: Scalar>(x: &Tensor<S>, gout: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(x.shape());
    for pl in 0..n * c {
        let src = &x.data[pl * h * w..(pl + 1) * h * w];
        let g = &gout.data[pl * ho * wo..(pl + 1) * ho * wo];
        let dst = &mut dx.data[pl * h * w..(pl + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let idx = [
                    2 * oy * w + 2 * ox,
                    2 * oy * w + 2 * ox + 1,
                    (2 * oy + 1) * w + 2 * ox,
                    (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = idx[0];
                for &i in &idx[1..] {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                dst[best] += g[oy * wo + ox];
            }
        }
    }
    Ok(dx)
}

fn upsample2_forward<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "upsample2 needs [n,c,h,w], got {:?}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for pl in 0..n * c {
        let src = &x.data[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out.data[pl * 4 * h * w..(pl + 1) * 4 * h * w];
        for y in 0..h {
            for x2 in 0..w {
                let v = src[y * w + x2];
                dst[2 * y * 2 * w + 2 * x2] = v;
                dst[2 * y * 2 * w + 2 * x2 + 1] = v;
                dst[(2 * y + 1) * 2 * w + 2 * x2] = v;
                dst[(2 * y + 1) * 2 * w + 2 * x2 + 1] = v;
            }
        }
    }
    Ok(out)
}

fn upsample2_backward<S: Scalar>(x: &Tensor<S>, gout: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut dx = Tensor::zeros(x.shape());
    for pl in 0..n * c {
        let g = &gout.data[pl * 4 * h * w..(pl + 1) * 4 * h * w];
        let dst = &mut dx.data[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for x2 in 0..w {
                dst[y * w + x2] = g[2 * y * 2 * w + 2 * x2]
                    + g[2 * y * 2 * w + 2 * x2 + 1]
                    + g[(2 * y + 1) * 2 * w + 2 * x2]
                    + g[(2 * y + 1) * 2 * w + 2 * x2 + 1];
            }
        }
    }
    Ok(dx)
}

fn concat_forward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 4
        || b.rank() != 4
        || a.shape[0] != b.shape[0]
        || a.shape[2] != b.shape[2]
        || a.shape[3] != b.shape[3]
    {
        return Err(Error::ShapeMismatch(format!(
            "concat_channels needs matching batch and spatial dims, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, ca, cb, h, w) = (a.shape[0], a.shape[1], b.shape[1], a.shape[2], a.shape[3]);
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
    for s in 0..n {
        out.data[s * (ca + cb) * plane..][..ca * plane]
            .copy_from_slice(&a.data[s * ca * plane..][..ca * plane]);
        out.data[s * (ca + cb) * plane + ca * plane..][..cb * plane]
            .copy_from_slice(&b.data[s * cb * plane..][..cb * plane]);
    }
    Ok(out)
}

fn concat_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    gout: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (n, ca, cb, h, w) = (a.shape[0], a.shape[1], b.shape[1], a.shape[2], a.shape[3]);
    let plane = h * w;
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for s in 0..n {
        da.data[s * ca * plane..][..ca * plane]
            .copy_from_slice(&gout.data[s * (ca + cb) * plane..][..ca * plane]);
        db.data[s * cb * plane..][..cb * plane]
            .copy_from_slice(&gout.data[s * (ca + cb) * plane + ca * plane..][..cb * plane]);
    }
    Ok((da, db))
}

fn l2norm_forward<S: Scalar>(x: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    if x.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "l2norm_rows needs [n,d], got {:?}",
            x.shape()
        )));
    }
    let (n, d) = (x.shape[0], x.shape[1]);
    let mut out = Tensor::zeros(x.shape());
    for r in 0..n {
        let row = &x.data[r * d..(r + 1) * d];
        let norm: f64 = row.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        let scale = S::from_f64_lossy(1.0 / (norm + eps));
        for (o, &v) in out.data[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = v * scale;
        }
    }
    Ok(out)
}

fn l2norm_backward<S: Scalar>(x: &Tensor<S>, gout: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    let (n, d) = (x.shape[0], x.shape[1]);
    let mut dx = Tensor::zeros(x.shape());
    for r in 0..n {
        let row = &x.data[r * d..(r + 1) * d];
        let g = &gout.data[r * d..(r + 1) * d];
        let norm: f64 = row.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        let denom = norm + eps;
        let dot: f64 = row
            .iter()
            .zip(g)
            .map(|(&v, &gv)| v.to_f64_lossy() * gv.to_f64_lossy())
            .sum();
        let out_row = &mut dx.data[r * d..(r + 1) * d];
        if norm < 1e-30 {
            // Zero rows: the Jacobian degenerates to 1/eps on the diagonal.
            let s = S::from_f64_lossy(1.0 / denom);
            for (o, &gv) in out_row.iter_mut().zip(g) {
                *o = gv * s;
            }
        } else {
            for i in 0..d {
                let v = row[i].to_f64_lossy();
                let gv = g[i].to_f64_lossy();
                out_row[i] =
                    S::from_f64_lossy(gv / denom - v / norm * dot / (denom * denom));
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Segmentation loss
// ---------------------------------------------------------------------------

/// Floor for predicted probabilities inside the cross-entropy logs.
const BCE_CLAMP: f64 = 1e-7;

fn dice_bce_forward<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    smooth: f64,
    lambda: f64,
) -> Result<Tensor<S>> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "loss prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.numel() as f64;
    let mut inter = 0.0f64;
    let mut psum = 0.0f64;
    let mut tsum = 0.0f64;
    let mut bce = 0.0f64;
    for (&p, &t) in pred.data.iter().zip(target.data.iter()) {
        let p = p.to_f64_lossy();
        let t = t.to_f64_lossy();
        inter += p * t;
        psum += p;
        tsum += t;
        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        bce -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
    }
    let dice = 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth);
    let loss = dice + lambda * bce / n;
    Ok(Tensor::from_vec(&[1], vec![S::from_f64_lossy(loss)])?)
}

fn dice_bce_backward<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    gout: &Tensor<S>,
    smooth: f64,
    lambda: f64,
) -> Result<Tensor<S>> {
    let n = pred.numel() as f64;
    let mut inter = 0.0f64;
    let mut psum = 0.0f64;
    let mut tsum = 0.0f64;
    for (&p, &t) in pred.data.iter().zip(target.data.iter()) {
        inter += p.to_f64_lossy() * t.to_f64_lossy();
        psum += p.to_f64_lossy();
        tsum += t.to_f64_lossy();
    }
    let a = 2.0 * inter + smooth;
    let b = psum + tsum + smooth;
    let g = gout.scalar_value().to_f64_lossy();

    let mut dp = Tensor::zeros(pred.shape());
    for i in 0..pred.numel() {
        let p = pred.data[i].to_f64_lossy();
        let t = target.data[i].to_f64_lossy();
        // d(1 - A/B)/dp = (A - 2 t B) / B^2.
        let ddice = (a - 2.0 * t * b) / (b * b);
        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let dbce = (-t / pc + (1.0 - t) / (1.0 - pc)) / n;
        dp.data[i] = S::from_f64_lossy(g * (ddice + lambda * dbce));
    }
    Ok(dp)
}

// ---------------------------------------------------------------------------
// Descriptor losses
// ---------------------------------------------------------------------------

/// Splits a `[2N, d]` descriptor matrix into anchor and positive halves.
fn split_pairs<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize)> {
    if x.rank() != 2 || x.shape[0] % 2 != 0 || x.shape[0] < 4 {
        return Err(Error::InvalidBatch(format!(
            "descriptor losses need a [2N, d] matrix with N >= 2, got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape[0] / 2, x.shape[1]))
}

fn row_dist<S: Scalar>(x: &Tensor<S>, i: usize, j: usize) -> f64 {
    let d = x.shape[1];
    let a = &x.data[i * d..(i + 1) * d];
    let b = &x.data[j * d..(j + 1) * d];
    a.iter()
        .zip(b)
        .map(|(&u, &v)| {
            let t = u.to_f64_lossy() - v.to_f64_lossy();
            t * t
        })
        .sum::<f64>()
        .sqrt()
}

/// Negative-candidate rows for pair `i` against pair `j` in the fixed order
/// used both to evaluate the minimum and to break ties: anchor-anchor,
/// anchor-positive, positive-anchor, positive-positive.
fn neg_candidates(i: usize, j: usize, n: usize) -> [(usize, usize); 4] {
    [(i, j), (i, n + j), (n + i, j), (n + i, n + j)]
}

fn fos_min_neg<S: Scalar>(x: &Tensor<S>, i: usize, n: usize) -> (f64, (usize, usize)) {
    let mut best = f64::INFINITY;
    let mut best_pair = (0usize, 0usize);
    for j in 0..n {
        if j == i {
            continue;
        }
        for &(u, v) in &neg_candidates(i, j, n) {
            let dist = row_dist(x, u, v);
            if dist < best {
                best = dist;
                best_pair = (u, v);
            }
        }
    }
    (best, best_pair)
}

fn fos_forward<S: Scalar>(x: &Tensor<S>, margin: f64) -> Result<Tensor<S>> {
    let (n, _) = split_pairs(x)?;
    let mut loss = 0.0f64;
    for i in 0..n {
        let dpos = row_dist(x, i, n + i);
        let (dneg, _) = fos_min_neg(x, i, n);
        let h = margin + dpos - dneg;
        if h > 0.0 {
            loss += h * h;
        }
    }
    Ok(Tensor::from_vec(&[1], vec![S::from_f64_lossy(loss / n as f64)])?)
}

/// Adds `w * (x_u - x_v) / dist` to the gradient rows of `u` and `v`.
fn add_dist_grad<S: Scalar>(dx: &mut Tensor<S>, x: &Tensor<S>, u: usize, v: usize, w: f64) {
    let dist = row_dist(x, u, v);
    if dist < 1e-30 {
        return;
    }
    let d = x.shape[1];
    for k in 0..d {
        let diff = (x.data[u * d + k].to_f64_lossy() - x.data[v * d + k].to_f64_lossy()) / dist;
        dx.data[u * d + k] += S::from_f64_lossy(w * diff);
        dx.data[v * d + k] += S::from_f64_lossy(-w * diff);
    }
}

fn fos_backward<S: Scalar>(x: &Tensor<S>, gout: &Tensor<S>, margin: f64) -> Result<Tensor<S>> {
    let (n, _) = split_pairs(x)?;
    let g = gout.scalar_value().to_f64_lossy();
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..n {
        let dpos = row_dist(x, i, n + i);
        let (dneg, (u, v)) = fos_min_neg(x, i, n);
        let h = margin + dpos - dneg;
        if h <= 0.0 {
            continue;
        }
        let coeff = g * 2.0 * h / n as f64;
        add_dist_grad(&mut dx, x, i, n + i, coeff);
        add_dist_grad(&mut dx, x, u, v, -coeff);
    }
    Ok(dx)
}

fn sos_d2<S: Scalar>(x: &Tensor<S>, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mut acc = 0.0f64;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let delta = row_dist(x, i, j) - row_dist(x, n + i, n + j);
                acc += delta * delta;
            }
            acc.sqrt()
        })
        .collect()
}

fn sos_forward<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, _) = split_pairs(x)?;
    let d2 = sos_d2(x, n);
    let r = d2.iter().sum::<f64>() / n as f64;
    Ok(Tensor::from_vec(&[1], vec![S::from_f64_lossy(r)])?)
}

fn sos_backward<S: Scalar>(x: &Tensor<S>, gout: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, _) = split_pairs(x)?;
    let d2 = sos_d2(x, n);
    let g = gout.scalar_value().to_f64_lossy();
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..n {
        for j in (i + 1)..n {
            let delta = row_dist(x, i, j) - row_dist(x, n + i, n + j);
            let mut w = 0.0f64;
            if d2[i] > 1e-30 {
                w += delta / d2[i];
            }
            if d2[j] > 1e-30 {
                w += delta / d2[j];
            }
            if w == 0.0 {
                continue;
            }
            let w = g * w / n as f64;
            add_dist_grad(&mut dx, x, i, j, w);
            add_dist_grad(&mut dx, x, n + i, n + j, -w);
        }
    }
    Ok(dx)
}
