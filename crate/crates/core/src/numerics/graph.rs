//! Tape of primitive operations with a reverse-mode backward pass.
//!
//! Nodes are appended in topological order. [`Graph::forward`] evaluates
//! every node not yet computed; [`Graph::backward`] walks the tape in
//! reverse from a scalar loss.

use std::sync::Arc;

use super::conv::{conv_block_backward, conv_block_forward, ConvGeometry};
use super::ops::{self, PairLabel};
use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    ConvBlock {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
    },
    Gem {
        input: NodeId,
        p: f64,
    },
    L2Normalize {
        input: NodeId,
    },
    PairLoss {
        a: NodeId,
        b: NodeId,
        label: PairLabel,
        margin: f64,
    },
    Square {
        input: NodeId,
    },
    /// Sum of every element of every input, as a scalar.
    Sum {
        inputs: Vec<NodeId>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::ConvBlock {
                input,
                weights,
                bias,
                ..
            } => vec![*input, *weights, *bias],
            Op::Gem { input, .. } | Op::L2Normalize { input } | Op::Square { input } => {
                vec![*input]
            }
            Op::PairLoss { a, b, .. } => vec![*a, *b],
            Op::Sum { inputs } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Arc<Tensor>>,
    needs_grad: bool,
}

/// Computation graph over [`Tensor`] values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    evaluated: usize,
    macs: u64,
}

/// Per-node gradients from a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `node`; zero if the loss does not depend on it.
    pub fn get(&self, node: NodeId) -> Tensor {
        match self.grads.get(node.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }

    /// `true` if the backward pass reached `node`.
    pub fn reached(&self, node: NodeId) -> bool {
        matches!(self.grads.get(node.0), Some(Some(_)))
    }

    pub fn take(&mut self, node: NodeId) -> Tensor {
        match self.grads.get_mut(node.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[node.0]),
        }
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

    /// Multiply-adds executed by forward convolutions so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, op: Op, value: Option<Arc<Tensor>>, leaf_grad: bool) -> NodeId {
        let needs_grad = leaf_grad || op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<(), NumericsError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(NumericsError::UnknownNode(id.0))
        }
    }

    /// Adds a constant or trainable leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.shared_leaf(Arc::new(value), requires_grad)
    }

    /// Adds a leaf whose storage is shared with the caller.
    pub fn shared_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> NodeId {
        let id = self.push(Op::Leaf, Some(value), requires_grad);
        if self.evaluated == id.0 {
            self.evaluated += 1;
        }
        id
    }

    pub fn conv_block(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId, NumericsError> {
        for id in [input, weights, bias] {
            self.check(id)?;
        }
        Ok(self.push(
            Op::ConvBlock {
                input,
                weights,
                bias,
                stride,
            },
            None,
            false,
        ))
    }

    pub fn gem(&mut self, input: NodeId, p: f64) -> Result<NodeId, NumericsError> {
        self.check(input)?;
        Ok(self.push(Op::Gem { input, p }, None, false))
    }

    pub fn l2_normalize(&mut self, input: NodeId) -> Result<NodeId, NumericsError> {
        self.check(input)?;
        Ok(self.push(Op::L2Normalize { input }, None, false))
    }

    pub fn pair_loss(
        &mut self,
        a: NodeId,
        b: NodeId,
        label: PairLabel,
        margin: f64,
    ) -> Result<NodeId, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.push(
            Op::PairLoss {
                a,
                b,
                label,
                margin,
            },
            None,
            false,
        ))
    }

    pub fn square(&mut self, input: NodeId) -> Result<NodeId, NumericsError> {
        self.check(input)?;
        Ok(self.push(Op::Square { input }, None, false))
    }

    pub fn sum(&mut self, inputs: &[NodeId]) -> Result<NodeId, NumericsError> {
        for &id in inputs {
            self.check(id)?;
        }
        Ok(self.push(
            Op::Sum {
                inputs: inputs.to_vec(),
            },
            None,
            false,
        ))
    }

    /// Value of an evaluated node.
    pub fn value(&self, id: NodeId) -> Result<&Tensor, NumericsError> {
        self.check(id)?;
        self.nodes[id.0]
            .value
            .as_deref()
            .ok_or(NumericsError::NotEvaluated(id.0))
    }

    /// Evaluates every pending node in insertion order.
    pub fn forward(&mut self) -> Result<(), NumericsError> {
        while self.evaluated < self.nodes.len() {
            let idx = self.evaluated;
            if self.nodes[idx].value.is_some() {
                // A leaf pushed after pending ops.
                self.evaluated += 1;
                continue;
            }
            let value = self.eval(idx)?;
            if !value.is_finite() {
                return Err(NumericsError::NonFinite {
                    what: format!("output of node {idx}"),
                });
            }
            self.nodes[idx].value = Some(Arc::new(value));
            self.evaluated += 1;
        }
        Ok(())
    }

    fn eval(&mut self, idx: usize) -> Result<Tensor, NumericsError> {
        let op = self.nodes[idx].op.clone();
        let val = |id: NodeId| -> Result<&Tensor, NumericsError> { self.value(id) };
        match op {
            Op::Leaf => Err(NumericsError::NotEvaluated(idx)),
            Op::ConvBlock {
                input,
                weights,
                bias,
                stride,
            } => {
                let (x, w, b) = (val(input)?, val(weights)?, val(bias)?);
                let macs = ConvGeometry::infer(x, w, b, stride)?.macs();
                let out = conv_block_forward(x, w, b, stride)?;
                self.macs += macs;
                Ok(out)
            }
            Op::Gem { input, p } => ops::gem_forward(val(input)?, p),
            Op::L2Normalize { input } => ops::l2_normalize(val(input)?),
            Op::PairLoss {
                a,
                b,
                label,
                margin,
            } => {
                let (a, b) = (val(a)?, val(b)?);
                if a.shape() != b.shape() {
                    return Err(NumericsError::ShapeMismatch {
                        context: "pair loss operands",
                        expected: a.shape().to_vec(),
                        got: b.shape().to_vec(),
                    });
                }
                Ok(Tensor::scalar(ops::pair_loss(
                    a.data(),
                    b.data(),
                    label,
                    margin,
                )))
            }
            Op::Square { input } => {
                let x = val(input)?;
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect())
            }
            Op::Sum { inputs } => {
                let mut total = 0.0;
                for id in inputs {
                    total += val(id)?.data().iter().sum::<f64>();
                }
                Ok(Tensor::scalar(total))
            }
        }
    }

    /// Backward pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericsError> {
        let value = self.value(loss)?;
        if value.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: value.shape().to_vec(),
            });
        }
        self.backward_with_seed(loss, Tensor::new(value.shape().to_vec(), vec![1.0])?)
    }

    /// Backward pass seeded with an arbitrary upstream gradient for `node`.
    pub fn backward_with_seed(&self, node: NodeId, seed: Tensor) -> Result<Gradients, NumericsError> {
        let out = self.value(node)?;
        if out.shape() != seed.shape() {
            return Err(NumericsError::ShapeMismatch {
                context: "backward seed",
                expected: out.shape().to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; node.0 + 1];
        grads[node.0] = Some(seed);

        for idx in (0..=node.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let op = &self.nodes[idx].op;
            for (input, g) in self.vjp(idx, op, &upstream)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(upstream);
        }

        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.as_ref().map(|v| v.shape().to_vec()).unwrap_or_default())
                .collect(),
        })
    }

    fn vjp(&self, idx: usize, op: &Op, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>, NumericsError> {
        let out = self.value(NodeId(idx))?;
        Ok(match op {
            Op::Leaf => Vec::new(),
            Op::ConvBlock {
                input,
                weights,
                bias,
                stride,
            } => {
                let grads = conv_block_backward(
                    self.value(*input)?,
                    self.value(*weights)?,
                    self.value(*bias)?,
                    *stride,
                    out,
                    g,
                    self.nodes[input.0].needs_grad,
                )?;
                let mut v = vec![(*weights, grads.weights), (*bias, grads.bias)];
                if let Some(dx) = grads.input {
                    v.push((*input, dx));
                }
                v
            }
            Op::Gem { input, p } => {
                vec![(*input, ops::gem_backward(self.value(*input)?, *p, out, g)?)]
            }
            Op::L2Normalize { input } => {
                vec![(*input, ops::l2_normalize_backward(self.value(*input)?, out, g)?)]
            }
            Op::PairLoss {
                a,
                b,
                label,
                margin,
            } => {
                let (av, bv) = (self.value(*a)?, self.value(*b)?);
                let s = g.item()?;
                let ga: Vec<f64> = ops::pair_loss_grad_a(av.data(), bv.data(), *label, *margin)
                    .into_iter()
                    .map(|v| v * s)
                    .collect();
                let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), ga)?),
                    (*b, Tensor::new(bv.shape().to_vec(), gb)?),
                ]
            }
            Op::Square { input } => {
                let x = self.value(*input)?;
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, g)| 2.0 * x * g)
                    .collect();
                vec![(*input, Tensor::new(x.shape().to_vec(), d)?)]
            }
            Op::Sum { inputs } => {
                let s = g.item()?;
                inputs
                    .iter()
                    .map(|&id| Ok((id, Tensor::full(self.value(id)?.shape(), s))))
                    .collect::<Result<_, NumericsError>>()?
            }
        })
    }
}
