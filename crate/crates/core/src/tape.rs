//! Reverse-mode automatic differentiation over a linear tape.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::{self, OpKind};
use crate::tensor::{GradientSet, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Origin {
    Param,
    Constant,
    Op { op: OpKind, inputs: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
}

/// Records primitive operations in evaluation order.
///
/// A tape lives on one thread; build one tape per sample when computing
/// per-sample gradients in parallel.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, origin: Origin) -> Var {
        self.nodes.push(Node { value, origin });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn resolve(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::IncompleteTape(format!(
                "variable {} does not belong to this tape",
                var.index
            )));
        }
        Ok(var.index)
    }

    /// Registers a traced parameter; gradients are reported for these, in
    /// registration order.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Origin::Param);
        self.params.push(v.index);
        v
    }

    /// Registers an untraced input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Origin::Constant)
    }

    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let idx = inputs
            .iter()
            .map(|v| self.resolve(*v))
            .collect::<Result<Vec<_>>>()?;
        let value = {
            let operands: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
            ops::forward(&op, &operands)?
        };
        Ok(self.push(value, Origin::Op { op, inputs: idx }))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.index].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_vars(&self) -> Vec<Var> {
        self.params
            .iter()
            .map(|&index| Var {
                tape: self.id,
                index,
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn group_norm(&mut self, a: Var, groups: usize, eps: f64) -> Result<Var> {
        self.apply(OpKind::GroupNorm { groups, eps }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::Reshape(shape), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn bce(&mut self, probs: Var, targets: Var) -> Result<Var> {
        self.apply(OpKind::Bce, &[probs, targets])
    }

    /// Adjoints of every node with respect to the scalar `output`.
    fn adjoints(&self, output: Var) -> Result<Vec<Option<Tensor>>> {
        let out = self.resolve(output)?;
        let value = &self.nodes[out].value;
        if value.len() != 1 {
            return Err(Error::NonScalarOutput(value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; out + 1];
        adj[out] = Some(Tensor::full(value.shape(), 1.0));
        for i in (0..=out).rev() {
            let Origin::Op { op, inputs } = &self.nodes[i].origin else {
                continue;
            };
            let Some(grad) = adj[i].take() else {
                continue;
            };
            let operands: Vec<&Tensor> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let grads = ops::backward(op, &operands, &self.nodes[i].value, &grad);
            for (&j, g) in inputs.iter().zip(grads) {
                match &mut adj[j] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            adj[i] = Some(grad);
        }
        Ok(adj)
    }

    /// Gradient of the scalar `output` with respect to every traced
    /// parameter, in registration order. Parameters the output does not
    /// depend on get zero gradients.
    pub fn backward(&self, output: Var) -> Result<GradientSet> {
        let mut adj = self.adjoints(output)?;
        let tensors = self
            .params
            .iter()
            .map(|&p| {
                adj.get_mut(p)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[p].value.shape()))
            })
            .collect();
        Ok(GradientSet::new(tensors))
    }
}
