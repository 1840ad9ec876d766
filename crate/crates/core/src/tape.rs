//! Reverse-mode tape over the handful of ops the networks are built from.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Upsample { input: Var, factor: usize },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Upsample { .. } => "upsample_nearest",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameter gradients produced by [`Tape::backward`], indexed by parameter slot.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&Tensor> {
        self.grads.get(param).and_then(|g| g.as_ref())
    }

    /// Gradients for `shapes.len()` parameters; slots never reached are zero.
    pub fn dense(self, shapes: &[&[usize]]) -> Vec<Tensor> {
        let mut grads = self.grads;
        grads.resize(shapes.len(), None);
        grads
            .into_iter()
            .zip(shapes)
            .map(|(g, s)| g.unwrap_or_else(|| Tensor::zeros(s.to_vec())))
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op kinds in execution order.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    /// A constant with no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value, false)
    }

    /// A trainable leaf; its gradient is reported under slot `index`.
    pub fn param(&mut self, index: usize, value: Tensor) -> Var {
        self.push(Op::Param(index), value, true)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.grad_flag(input) || self.grad_flag(weight) || bias.is_some_and(|b| self.grad_flag(b));
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            out,
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.grad_flag(input);
        self.push(Op::Relu(input), out, rg)
    }

    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = ops::upsample_nearest(self.value(input), factor)?;
        let rg = self.grad_flag(input);
        Ok(self.push(Op::Upsample { input, factor }, out, rg))
    }

    /// Propagates the seeded upstream gradients back to every parameter leaf,
    /// visiting nodes in exact reverse execution order.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(Error::shape(
                    "backward",
                    format!("seed {:?} for value {:?}", g.shape(), self.value(v).shape()),
                ));
            }
            accumulate(&mut grads[v.0], g);
        }
        let mut params: Vec<Option<Tensor>> = Vec::new();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match node.op {
                Op::Input => {}
                Op::Param(slot) => {
                    if params.len() <= slot {
                        params.resize(slot + 1, None);
                    }
                    accumulate(&mut params[slot], g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let need_input = self.grad_flag(input);
                    let cg = ops::conv2d_backward(
                        self.value(input),
                        self.value(weight),
                        bias.is_some(),
                        stride,
                        pad,
                        &g,
                        need_input,
                    )?;
                    if let Some(gi) = cg.input {
                        accumulate(&mut grads[input.0], gi);
                    }
                    if self.grad_flag(weight) {
                        accumulate(&mut grads[weight.0], cg.weight);
                    }
                    if let (Some(b), Some(gb)) = (bias, cg.bias) {
                        if self.grad_flag(b) {
                            accumulate(&mut grads[b.0], gb);
                        }
                    }
                }
                Op::Relu(input) => {
                    let gi = ops::relu_backward(self.value(input), &g);
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Upsample { input, factor } => {
                    let gi = ops::upsample_nearest_backward(&g, factor)?;
                    accumulate(&mut grads[input.0], gi);
                }
            }
        }
        Ok(Gradients { grads: params })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_gradient_matches_hand_derivation() {
        // y = relu(w * x), x = 2, w = 3 -> dy/dw = x = 2
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap());
        let w = tape.param(0, Tensor::new([1, 1, 1, 1], vec![3.0]).unwrap());
        let c = tape.conv2d(x, w, None, 1, 0).unwrap();
        let y = tape.relu(c);
        let up = tape.upsample(y, 2).unwrap();
        assert_eq!(tape.value(up).data(), &[6.0; 4]);
        let g = tape
            .backward(vec![(up, Tensor::full([1, 1, 2, 2], 1.0))])
            .unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[8.0]);
        assert_eq!(tape.op_kinds(), ["input", "param", "conv2d", "relu", "upsample_nearest"]);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap());
        let w = tape.param(3, Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap());
        let a = tape.conv2d(x, w, None, 1, 0).unwrap();
        let b = tape.conv2d(a, w, None, 1, 0).unwrap();
        // b = w^2 x -> db/dw = 2 w x = 4
        let g = tape.backward(vec![(b, Tensor::full([1, 1, 1, 1], 1.0))]).unwrap();
        assert_eq!(g.get(3).unwrap().data(), &[4.0]);
        assert!(g.get(0).is_none());
    }

    #[test]
    fn unreached_params_are_absent() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full([1, 1, 2, 2], 1.0));
        let w0 = tape.param(0, Tensor::full([1, 1, 1, 1], 1.0));
        let w1 = tape.param(1, Tensor::full([1, 1, 1, 1], 1.0));
        let a = tape.conv2d(x, w0, None, 1, 0).unwrap();
        let _b = tape.conv2d(x, w1, None, 1, 0).unwrap();
        let g = tape.backward(vec![(a, Tensor::full([1, 1, 2, 2], 1.0))]).unwrap();
        assert!(g.get(0).is_some());
        assert!(g.get(1).is_none());
    }
}
