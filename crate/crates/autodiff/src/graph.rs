use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backward::backward_op;
use crate::error::{AdError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this crate.
///
/// `backward` receives the gradient flowing into the output and returns one
/// entry per input, `None` where the input receives no gradient.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        out_grad: &[T],
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Vec<Option<Vec<T>>>;
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Abs { a: Var },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    LayerNorm { a: Var, inv_std: Vec<T> },
    Relu { a: Var },
    Gelu { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { a: Var, mask: Vec<T> },
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, pad: (usize, usize) },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    MeanRows { a: Var, from: usize, to: usize },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    Gather { a: Var, idx: Vec<usize> },
    WeightedSum { a: Var, weights: Vec<T> },
    SumAll { a: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add { a, b } | Sub { a, b } | Mul { a, b } | MatMul { a, b } => vec![*a, *b],
            Scale { a, .. }
            | Abs { a }
            | Transpose { a }
            | Softmax { a, .. }
            | LogSoftmax { a, .. }
            | LayerNorm { a, .. }
            | Relu { a }
            | Gelu { a }
            | Dropout { a, .. }
            | Reshape { a }
            | Permute { a, .. }
            | MeanRows { a, .. }
            | SliceCols { a, .. }
            | SliceRows { a, .. }
            | Gather { a, .. }
            | WeightedSum { a, .. }
            | SumAll { a } => vec![*a],
            Embedding { table, .. } => vec![*table],
            Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            ConcatCols { parts } => parts.clone(),
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    train: bool,
    pub(crate) rng: ChaCha8Rng,
    backward_done: bool,
    visited: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph; dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            backward_done: false,
            visited: 0,
        }
    }

    /// Training-mode graph whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends a node whose inputs' gradient requirement is inherited.
    pub(crate) fn record(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Records the result of an externally computed operation.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.record(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Number of nodes processed by the last backward pass.
    pub fn visited_count(&self) -> usize {
        self.visited
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
        self.visited = 0;
    }

    /// Propagates gradients from `root`, seeded with ones.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(AdError::BackwardTwice);
        }
        if root.0 >= self.nodes.len() {
            return Err(AdError::Index {
                op: "backward",
                index: root.0,
                len: self.nodes.len(),
            });
        }
        self.backward_done = true;

        let mut reachable = vec![false; root.0 + 1];
        reachable[root.0] = true;
        for i in (0..=root.0).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            for inp in self.nodes[i].op.inputs() {
                if self.nodes[inp.0].requires_grad {
                    reachable[inp.0] = true;
                }
            }
        }

        let n = self.nodes[root.0].value.numel();
        self.nodes[root.0].grad = Some(vec![T::ONE; n]);
        self.visited = 0;
        for i in (0..=root.0).rev() {
            if !reachable[i] {
                continue;
            }
            self.visited += 1;
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(out_grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = backward_op(self, i, &out_grad);
            self.nodes[i].grad = Some(out_grad);
            for (inp, g) in contributions {
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[inp.0].grad {
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(g) {
                            *a += x;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Leaves that were reachable but received nothing still get zeros.
        for (i, r) in reachable.iter().enumerate() {
            if *r && self.nodes[i].requires_grad && self.nodes[i].grad.is_none() {
                let n = self.nodes[i].value.numel();
                self.nodes[i].grad = Some(vec![T::ZERO; n]);
            }
        }
        Ok(())
    }
}
