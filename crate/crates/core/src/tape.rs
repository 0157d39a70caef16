//! Reverse-mode autodiff tape.
//!
//! Ops executed through a [`crate::ops::Cx`] with an active tape append
//! one node each, in execution order, so the node list is already a
//! topological order of the graph. `backward` walks it once in reverse,
//! accumulating gradients for intermediate values in a map keyed by
//! tensor id and folding gradients of parameter leaves into the tensors'
//! own accumulators.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor, TensorId};

/// Saved state an op needs for its backward rule.
#[derive(Debug)]
pub enum Op {
    Conv2d {
        geom: kernels::ConvGeom,
    },
    MaxPool {
        k: usize,
        stride: usize,
        argmax: Vec<u32>,
        dims: (usize, usize, usize, usize, usize), // c, h, w, h_out, w_out
    },
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Mul,
    /// Channel offsets of each input within the output.
    ConcatChannels {
        offsets: Vec<usize>,
        plane: usize, // H*W
    },
    SliceChannels {
        start: usize,
        plane: usize,
    },
    Resize {
        dims: (usize, usize, usize, usize, usize), // c, h, w, oh, ow
    },
    SumSqDiff,
    Sum,
    Scale {
        factor: f64,
    },
    Dropout {
        mask: Vec<bool>,
        keep: f64,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Resize { .. } => "upsample_bilinear",
            Op::SumSqDiff => "sum_sq_diff",
            Op::Sum => "sum",
            Op::Scale { .. } => "scale",
            Op::Dropout { .. } => "dropout",
        }
    }
}

pub struct Node<T: Scalar> {
    pub op: Op,
    pub inputs: Vec<Tensor<T>>,
    pub output: Tensor<T>,
}

/// Ordered record of executed ops.
#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    produced: HashSet<TensorId>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            produced: HashSet::new(),
        }
    }

    pub fn record(&mut self, op: Op, inputs: Vec<Tensor<T>>, output: Tensor<T>) {
        self.produced.insert(output.id());
        self.nodes.push(Node { op, inputs, output });
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True if `id` was produced by an op on this tape (i.e. is not a leaf).
    pub fn produced(&self, id: TensorId) -> bool {
        self.produced.contains(&id)
    }

    /// Run reverse-mode accumulation from `loss` (a `[1]` tensor produced
    /// on this tape). Every parameter tensor reachable from the loss ends
    /// up with its gradient accumulated; intermediate gradients are
    /// discarded. Visits each node exactly once.
    pub fn backward(self, loss: &Tensor<T>) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::invalid("backward", "loss must be a scalar tensor"));
        }
        if !self.produced(loss.id()) {
            return Err(Error::invalid(
                "backward",
                "loss was not produced under this tape",
            ));
        }
        let mut grads: HashMap<TensorId, Vec<T>> = HashMap::new();
        grads.insert(loss.id(), vec![T::one()]);

        for node in self.nodes.iter().rev() {
            let dy = match grads.remove(&node.output.id()) {
                Some(g) => g,
                None => continue, // not on the path from the loss
            };
            let input_grads = backward_rule(node, &dy)?;
            for (input, gi) in node.inputs.iter().zip(input_grads) {
                let gi = match gi {
                    Some(g) => g,
                    None => continue,
                };
                if input.requires_grad() {
                    input.accumulate_grad(&gi);
                } else if self.produced(input.id()) {
                    match grads.entry(input.id()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(&gi) {
                                *a += *b;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(gi);
                        }
                    }
                }
                // gradients of plain leaf inputs (constants, frames) are dropped
            }
        }
        Ok(())
    }
}

/// Per-op derivative rules. Returns one optional gradient per input, in
/// the order the inputs were recorded.
fn backward_rule<T: Scalar>(node: &Node<T>, dy: &[T]) -> Result<Vec<Option<Vec<T>>>> {
    let out = &node.output;
    match &node.op {
        Op::Conv2d { geom } => {
            let x = node.inputs[0].data();
            let w = node.inputs[1].data();
            let (dx, dw, db) = kernels::conv2d_backward(&x, &w, dy, geom);
            Ok(vec![Some(dx), Some(dw), Some(db)])
        }
        Op::MaxPool { argmax, dims, .. } => {
            let (c, h, w, ho, wo) = *dims;
            Ok(vec![Some(kernels::max_pool2d_backward(
                dy, argmax, c, h, w, ho, wo,
            ))])
        }
        Op::Relu => {
            let y = out.data();
            Ok(vec![Some(
                dy.iter()
                    .zip(y.iter())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )])
        }
        Op::Sigmoid => {
            let y = out.data();
            Ok(vec![Some(
                dy.iter()
                    .zip(y.iter())
                    .map(|(&g, &v)| g * v * (T::one() - v))
                    .collect(),
            )])
        }
        Op::Tanh => {
            let y = out.data();
            Ok(vec![Some(
                dy.iter()
                    .zip(y.iter())
                    .map(|(&g, &v)| g * (T::one() - v * v))
                    .collect(),
            )])
        }
        Op::Add => Ok(vec![Some(dy.to_vec()), Some(dy.to_vec())]),
        Op::Mul => {
            let a = node.inputs[0].data();
            let b = node.inputs[1].data();
            let da = dy.iter().zip(b.iter()).map(|(&g, &v)| g * v).collect();
            let db = dy.iter().zip(a.iter()).map(|(&g, &v)| g * v).collect();
            Ok(vec![Some(da), Some(db)])
        }
        Op::ConcatChannels { offsets, plane } => {
            let mut grads = Vec::with_capacity(node.inputs.len());
            for (input, &off) in node.inputs.iter().zip(offsets) {
                let n = input.len();
                grads.push(Some(dy[off * plane..off * plane + n].to_vec()));
            }
            Ok(grads)
        }
        Op::SliceChannels { start, plane } => {
            let mut dx = vec![T::zero(); node.inputs[0].len()];
            dx[start * plane..start * plane + dy.len()].copy_from_slice(dy);
            Ok(vec![Some(dx)])
        }
        Op::Resize { dims } => {
            let (c, h, w, oh, ow) = *dims;
            Ok(vec![Some(kernels::resize_bilinear_backward(
                dy, c, h, w, oh, ow,
            ))])
        }
        Op::SumSqDiff => {
            let a = node.inputs[0].data();
            let b = node.inputs[1].data();
            let g = dy[0];
            let two = T::from_f64(2.0);
            let da: Vec<T> = a
                .iter()
                .zip(b.iter())
                .map(|(&x, &y)| g * two * (x - y))
                .collect();
            let db = da.iter().map(|&v| -v).collect();
            Ok(vec![Some(da), Some(db)])
        }
        Op::Sum => Ok(vec![Some(vec![dy[0]; node.inputs[0].len()])]),
        Op::Scale { factor } => {
            let f = T::from_f64(*factor);
            Ok(vec![Some(dy.iter().map(|&g| g * f).collect())])
        }
        Op::Dropout { mask, keep } => {
            let inv = T::from_f64(1.0 / *keep);
            Ok(vec![Some(
                dy.iter()
                    .zip(mask.iter())
                    .map(|(&g, &m)| if m { g * inv } else { T::zero() })
                    .collect(),
            )])
        }
    }
}
