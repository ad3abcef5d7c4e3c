//! Reverse-mode differentiation over a flat operation tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use super::ops::{self, Activation};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction applied by [`Tape::squared_error`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Mean over every entry.
    MeanAll,
    /// Sum over columns, mean over rows.
    MeanRows,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Act(usize, Activation),
    SquaredError(usize, usize, Reduce),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Number of nodes the backward sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }

    /// Takes the gradient of `var`, or zeros of `shape` when nothing flowed to it.
    pub fn take_or_zeros(&mut self, var: Var, shape: &[usize]) -> Tensor<T> {
        self.grads
            .get_mut(var.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::Contract(format!("variable {} is not on this tape", v.0)))
    }

    /// Trainable leaf; receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let value = ops::matmul(&na.value, &nb.value)?;
        let g = na.needs_grad || nb.needs_grad;
        Ok(self.push(value, Op::MatMul(a.0, b.0), g))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (nx, nb) = (self.node(x)?, self.node(bias)?);
        let value = ops::add_bias(&nx.value, &nb.value)?;
        let g = nx.needs_grad || nb.needs_grad;
        Ok(self.push(value, Op::AddBias(x.0, bias.0), g))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let nx = self.node(x)?;
        let value = ops::activation(&nx.value, kind);
        let g = nx.needs_grad;
        Ok(self.push(value, Op::Act(x.0, kind), g))
    }

    /// Scalar squared-error loss between `a` and `b`.
    pub fn squared_error(&mut self, a: Var, b: Var, reduce: Reduce) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.value.shape() != nb.value.shape() {
            return Err(Error::dim("squared_error", na.value.shape(), nb.value.shape()));
        }
        let value = match reduce {
            Reduce::MeanAll => ops::mse(&na.value, &nb.value)?,
            Reduce::MeanRows => {
                let rows = ops::row_squared_distance(&na.value, &nb.value)?;
                if rows.is_empty() {
                    T::zero()
                } else {
                    let n = T::from_usize(rows.len()).unwrap();
                    rows.into_iter().sum::<T>() / n
                }
            }
        };
        let g = na.needs_grad || nb.needs_grad;
        Ok(self.push(Tensor::scalar(value), Op::SquaredError(a.0, b.0, reduce), g))
    }

    /// Propagates d(loss)/d(node) for every node that depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        let mut visited = 0;

        for idx in (0..=loss.0).rev() {
            visited += 1;
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    if self.nodes[a].needs_grad {
                        let ga = ops::matmul(&g, &vb.transpose()?)?;
                        accumulate(&mut grads[a], ga)?;
                    }
                    if self.nodes[b].needs_grad {
                        let gb = ops::matmul(&va.transpose()?, &g)?;
                        accumulate(&mut grads[b], gb)?;
                    }
                }
                Op::AddBias(x, b) => {
                    if self.nodes[b].needs_grad {
                        let (m, n) = g.dims2()?;
                        let mut gb = Tensor::zeros(&[n]);
                        for i in 0..m {
                            for (acc, &v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                                *acc = *acc + v;
                            }
                        }
                        accumulate(&mut grads[b], gb)?;
                    }
                    if self.nodes[x].needs_grad {
                        accumulate(&mut grads[x], g)?;
                    }
                }
                Op::Act(x, kind) => {
                    if self.nodes[x].needs_grad {
                        let input = &self.nodes[x].value;
                        let local = input.zip_map(&node.value, "activation", |xi, yi| {
                            kind.derivative(xi, yi)
                        })?;
                        let gx = g.zip_map(&local, "activation", |a, b| a * b)?;
                        accumulate(&mut grads[x], gx)?;
                    }
                }
                Op::SquaredError(a, b, reduce) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let denom = match reduce {
                        Reduce::MeanAll => va.len(),
                        Reduce::MeanRows => va.rows(),
                    }
                    .max(1);
                    let k = g.data()[0] * T::from_f64_lossy(2.0) / T::from_usize(denom).unwrap();
                    let ga = va.zip_map(vb, "squared_error", |x, y| (x - y) * k)?;
                    if self.nodes[b].needs_grad {
                        accumulate(&mut grads[b], ga.scale(-T::one()))?;
                    }
                    if self.nodes[a].needs_grad {
                        accumulate(&mut grads[a], ga)?;
                    }
                }
            }
        }
        Ok(Gradients { grads, visited })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
