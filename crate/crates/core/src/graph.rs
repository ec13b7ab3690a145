//! Reverse-mode differentiation over a recorded tape of [`DiffOp`] applications.

use crate::error::{Error, Result};
use crate::ops::{self, DiffOp};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Option<Box<dyn DiffOp>>,
    inputs: Vec<Var>,
    needs_grad: bool,
}

/// A tape: nodes are appended in evaluation order, so reverse order is a
/// valid topological order for the backward sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient (data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            needs_grad: false,
        })
    }

    /// A leaf whose gradient is tracked (parameters, checked inputs).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            needs_grad: true,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn apply(&mut self, op: impl DiffOp + 'static, inputs: &[Var]) -> Result<Var> {
        self.apply_boxed(Box::new(op), inputs)
    }

    pub fn apply_boxed(&mut self, op: Box<dyn DiffOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = op.forward(&values)?;
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(Node {
            value,
            op: Some(op),
            inputs: inputs.to_vec(),
            needs_grad,
        }))
    }

    /// Back-propagates from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let n = self.value(root).numel();
        if n != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must hold one value, holds {n}"
            )));
        }
        Ok(self.backward_seeded(root, Tensor::full(self.value(root).shape(), 1.0)))
    }

    /// Back-propagates an arbitrary upstream gradient `seed` (shaped like `root`).
    pub fn backward_seeded(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needed: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let input_grads = op.backward_needed(&inputs, &node.value, &g, &needed);
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.accumulate(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Gradients { grads }
    }

    // Convenience wrappers. Each records exactly one op.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(ops::MatMul, &[a, b])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply(ops::Linear, &[x, w, b]),
            None => self.apply(ops::Linear, &[x, w]),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(ops::Add, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(ops::Scale(c), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(ops::SoftmaxRows, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.apply(ops::LayerNorm::default(), &[x, gamma, beta])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(ops::Gelu, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(ops::Relu, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(ops::Reshape(shape.to_vec()), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(ops::Transpose, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(ops::SliceCols { start, end }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(ops::ConcatCols, parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(ops::ConcatRows, parts)
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        self.apply(ops::SelectRow(row), &[x])
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(ops::MeanRows, &[x])
    }

    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        self.apply(ops::Gather { index, shape }, &[x])
    }

    pub fn cross_entropy(&mut self, probs: Var, labels: Vec<usize>) -> Result<Var> {
        self.apply(ops::CrossEntropy { labels }, &[probs])
    }

    /// "Same" convolution of NHWC `x` with `w: [k·k·C, C_out]` and `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Result<Var> {
        self.apply(ops::Conv2d { kernel }, &[x, w, b])
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        self.apply(ops::MaxPool2, &[x])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_input_accumulates_gradient() {
        // f(x) = sum(x * x) via matmul(xᵀ, x) for a column vector
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3, 1], vec![1.0, -2.0, 3.0]).unwrap());
        let xt = g.transpose(x).unwrap();
        let y = g.matmul(xt, x).unwrap();
        assert_eq!(g.value(y).data(), &[14.0]);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[1, 2], 2.0));
        let w = g.leaf(Tensor::full(&[2, 1], 1.5));
        let y = g.matmul(c, w).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }
}
