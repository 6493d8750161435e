use std::collections::BTreeMap;

use crate::error::{shape_err, NodeError, Result};
use crate::tensor::{Parameter, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation: forward evaluation plus its vector-Jacobian product.
pub trait Operation: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Returns the cotangent of each input for which `needs[i]` is set.
    ///
    /// `output` is the value `forward` produced and `upstream` the cotangent
    /// flowing into it; both have the output's shape.
    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        upstream: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Node {
    Constant,
    Param(usize),
    Op {
        op: Box<dyn Operation>,
        inputs: Vec<Var>,
    },
}

/// Ordered record of the forward computation.
///
/// Recorded values are never mutated. `backward` borrows the tape
/// immutably, so sweeping the same tape twice yields identical gradients.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    requires_grad: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, node: Node, requires_grad: bool) -> Var {
        self.values.push(value);
        self.nodes.push(node);
        self.requires_grad.push(requires_grad);
        Var(self.nodes.len() - 1)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Node::Constant, false)
    }

    /// Records a parameter leaf; its gradient is reported under `slot`.
    pub fn param(&mut self, slot: usize, value: Tensor) -> Var {
        self.push(value, Node::Param(slot), true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }

    /// Evaluates `op` on recorded inputs and records the result.
    pub fn apply(&mut self, op: impl Operation + 'static, inputs: &[Var]) -> Result<Var> {
        let out = {
            let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.values[v.0]).collect();
            op.forward(&ins)?
        };
        if !out.is_finite() {
            return Err(NodeError::NonFinite {
                op: format!("{} (forward)", op.name()),
            });
        }
        let rg = inputs.iter().any(|v| self.requires_grad[v.0]);
        Ok(self.push(
            out,
            Node::Op {
                op: Box::new(op),
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.values[loss.0];
        if !loss_value.is_scalar() {
            return Err(NodeError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx] {
                Node::Constant => {}
                Node::Param(slot) => match out.slots.get_mut(slot) {
                    Some(acc) => acc.add_assign(&upstream),
                    None => {
                        out.slots.insert(*slot, upstream);
                    }
                },
                Node::Op { op, inputs } => {
                    let needs: Vec<bool> = inputs.iter().map(|v| self.requires_grad[v.0]).collect();
                    if !needs.iter().any(|&n| n) {
                        continue;
                    }
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.values[v.0]).collect();
                    let cots = op.vjp(&ins, &self.values[idx], &upstream, &needs)?;
                    for ((var, cot), need) in inputs.iter().zip(cots).zip(&needs) {
                        let (Some(cot), true) = (cot, *need) else {
                            continue;
                        };
                        if cot.shape() != self.values[var.0].shape() {
                            return Err(shape_err(op.name(), self.values[var.0].shape(), cot.shape()));
                        }
                        if !cot.is_finite() {
                            return Err(NodeError::NonFinite {
                                op: format!("{} (backward)", op.name()),
                            });
                        }
                        match &mut grads[var.0] {
                            Some(acc) => acc.add_assign(&cot),
                            slot @ None => *slot = Some(cot),
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Parameter gradients produced by one reverse sweep, keyed by slot.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    slots: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.slots.get(&slot)
    }

    /// Writes gradients into parameters enumerated in slot order. Parameters
    /// the loss does not reach receive zeros.
    pub fn assign<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        for (slot, p) in params.into_iter().enumerate() {
            match self.slots.get(&slot) {
                Some(g) if g.shape() == p.value.shape() => p.grad = g.clone(),
                Some(g) => return Err(shape_err("Gradients::assign", p.value.shape(), g.shape())),
                None => p.zero_grad(),
            }
        }
        Ok(())
    }
}
