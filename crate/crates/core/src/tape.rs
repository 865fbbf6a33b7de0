//! Reverse-mode automatic differentiation over an explicit tape.
//!
//! Every differentiable operation computes its forward value eagerly and
//! records a [`Backward`] implementation together with the ids of its inputs.
//! Nodes are appended in evaluation order, so the node list is always
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
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

/// Everything a backward rule can see.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    /// Gradient of the loss with respect to `output`.
    pub grad: &'a Tensor,
    /// Which inputs need a gradient; rules may return `None` for the others.
    pub needs: &'a [bool],
}

/// The backward half of a recorded operation.
pub trait Backward: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input, in input order.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<NodeId>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// A single-use recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Arithmetic used inside convolution kernels. Values stored on the tape are
/// always `f64`; `F32` trades accuracy for roughly twice the throughput.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Which gradients [`Tape::backward_with`] keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Retain {
    All,
    /// Only leaves; intermediate gradients are dropped once propagated.
    Leaves,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape { nodes: Vec::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Node { value, inputs: Vec::new(), op: None, requires_grad: true })
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Node { value, inputs: Vec::new(), op: None, requires_grad: false })
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    /// Append an operation node. All inputs must already be on the tape.
    pub fn record(&mut self, op: Box<dyn Backward>, inputs: &[NodeId], value: Tensor) -> Result<NodeId> {
        for id in inputs {
            self.check(*id)?;
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Node { value, inputs: inputs.to_vec(), op: Some(op), requires_grad }))
    }

    pub fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Structural(format!("unknown node {id} (tape has {} nodes)", self.nodes.len())));
        }
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Operation name, `"leaf"` or `"constant"` for inputs.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        let node = &self.nodes[id.0];
        match &node.op {
            Some(op) => op.name(),
            None if node.requires_grad => "leaf",
            None => "constant",
        }
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.backward_with(loss, Retain::All)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward_with(&self, loss: NodeId, retain: Retain) -> Result<Gradients> {
        self.check(loss)?;
        let loss_shape = self.shape(loss);
        if !loss_shape.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {loss_shape}")));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(grad) = grads[i].as_ref() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|id| self.nodes[id.0].requires_grad).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let ctx = BackwardCtx { inputs: &inputs, output: &node.value, grad, needs: &needs };
            let input_grads = op.backward(&ctx)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Structural(format!(
                    "{} returned {} gradients for {} inputs",
                    op.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            if retain == Retain::Leaves {
                grads[i] = None;
            }
            for (id, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[id.0].requires_grad {
                    continue;
                }
                g.expect_shape(self.nodes[id.0].value.shape()).map_err(|e| {
                    Error::Structural(format!("{} produced a bad gradient for {id}: {e}", op.name()))
                })?;
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}
