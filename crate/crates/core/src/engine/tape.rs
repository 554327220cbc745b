//! Reverse-mode differentiation over a linear record of operations.

use rand::Rng;

use super::ops::{self, Activation, BnSaved, BnState, Mode, PoolKind};
use super::{EngineError, Parameter, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Pool { x: Var, kind: PoolKind, window: usize, stride: usize, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Act { x: Var, f: Activation },
    Linear { x: Var, w: Var, b: Var },
    Concat { parts: Vec<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: Box<BnSaved> },
    Dropout { x: Var, mask: Vec<f32> },
    ScaleChannels { u: Var, s: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered list of recorded operations. Operands always precede their users,
/// so replaying adjoints from the back visits every node after all its consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for every node reachable from the loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// `(parameter index, gradient)` for every parameter leaf reached.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.grads[node].as_ref().map(|g| (pid, g)))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf for parameter `index`; gradients are reported back under that index.
    pub fn param(&mut self, index: usize, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(index))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, EngineError> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var, EngineError> {
        let (y, argmax) = ops::pool2d(self.value(x), kind, window, stride)?;
        Ok(self.push(y, Op::Pool { x, kind, window, stride, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, EngineError> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x }))
    }

    pub fn activation(&mut self, x: Var, f: Activation) -> Var {
        let y = ops::elementwise(self.value(x), f);
        self.push(y, Op::Act { x, f })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var, EngineError> {
        let y = ops::fully_connected(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, EngineError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_channels(&tensors)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }))
    }

    /// Returns the output and, in train mode, the batch `(mean, var)` for running-stat updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BnState,
        mode: Mode,
        eps: f32,
    ) -> Result<(Var, Option<(Vec<f32>, Vec<f32>)>), EngineError> {
        let (y, saved) = ops::batch_norm(self.value(x), self.value(gamma), self.value(beta), state, mode, eps)?;
        let stats = (mode == Mode::Train).then(|| (saved.batch_mean.clone(), saved.batch_var.clone()));
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, saved: Box::new(saved) });
        Ok((v, stats))
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, mode: Mode, rng: &mut R) -> Result<Var, EngineError> {
        let (y, mask) = ops::dropout(self.value(x), rate, mode, rng)?;
        Ok(self.push(y, Op::Dropout { x, mask }))
    }

    pub fn scale_channels(&mut self, u: Var, s: Var) -> Result<Var, EngineError> {
        let y = ops::scale_channels(self.value(u), self.value(s))?;
        Ok(self.push(y, Op::ScaleChannels { u, s }))
    }

    /// Elementwise product of same-shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(EngineError::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let y = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, EngineError> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Probabilities saved by a cross-entropy node.
    pub fn probabilities(&self, loss: Var) -> Option<&Tensor> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCe { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Replays adjoints from `loss` (which must hold a single element) back to the leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients, EngineError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(EngineError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut params = Vec::new();

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            // Leaves keep their adjoint; interior adjoints are dropped once consumed.
            match node.op {
                Op::Param(pid) => {
                    params.push((pid, idx));
                    continue;
                }
                Op::Input => continue,
                _ => {}
            }
            let Some(dy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input | Op::Param(_) => unreachable!(),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), self.value(*b), *stride, *pad, &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Pool { x, kind, window, stride, argmax } => {
                    let dx = ops::pool2d_backward(self.value(*x).shape(), *kind, *window, *stride, argmax, &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    acc(&mut grads, *x, ops::global_avg_pool_backward(self.value(*x).shape(), &dy));
                }
                Op::Act { x, f } => {
                    let dx = ops::elementwise_backward(self.value(*x), &node.value, *f, &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::fully_connected_backward(self.value(*x), self.value(*w), &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Concat { parts } => {
                    let channels: Vec<usize> = parts.iter().map(|p| self.value(*p).shape()[1]).collect();
                    for (p, g) in parts.iter().zip(ops::concat_channels_backward(&channels, &dy)) {
                        acc(&mut grads, *p, g);
                    }
                }
                Op::BatchNorm { x, gamma, beta, saved } => {
                    let (dx, dg, db) = ops::batch_norm_backward(self.value(*gamma), saved, &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *beta, db);
                }
                Op::Dropout { x, mask } => {
                    let dx = if mask.is_empty() {
                        dy
                    } else {
                        let d = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                        Tensor::from_parts(dy.shape().to_vec(), d)
                    };
                    acc(&mut grads, *x, dx);
                }
                Op::ScaleChannels { u, s } => {
                    let (du, ds) = ops::scale_channels_backward(self.value(*u), self.value(*s), &dy);
                    acc(&mut grads, *u, du);
                    acc(&mut grads, *s, ds);
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = dy.data().iter().zip(tb.data()).map(|(g, v)| g * v).collect();
                    let db = dy.data().iter().zip(ta.data()).map(|(g, v)| g * v).collect();
                    acc(&mut grads, *a, Tensor::from_parts(ta.shape().to_vec(), da));
                    acc(&mut grads, *b, Tensor::from_parts(tb.shape().to_vec(), db));
                }
                Op::Sum { x } => {
                    let shape = self.value(*x).shape();
                    acc(&mut grads, *x, Tensor::full(shape, dy.data()[0]));
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let dx = ops::softmax_cross_entropy_backward(probs, labels, dy.data()[0]);
                    acc(&mut grads, *logits, dx);
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    /// Runs [`Tape::backward`] and adds each parameter's gradient into `params[index].grad`.
    pub fn backward_into(&self, loss: Var, params: &mut [Parameter]) -> Result<(), EngineError> {
        let grads = self.backward(loss)?;
        for (pid, g) in grads.params() {
            params[pid].grad.add_assign(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn linear_sum_gradient_is_input() {
        let x = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let mut params = vec![Parameter::new("w", Tensor::new(vec![3], vec![0.3, 0.1, -0.7]).unwrap())];
        let mut tape = Tape::new();
        let w = tape.param(0, &params[0].value);
        let xv = tape.input(x.clone());
        let p = tape.mul(w, xv).unwrap();
        let loss = tape.sum(p);
        tape.backward_into(loss, &mut params).unwrap();
        assert!(params[0].grad.bit_eq(&x));
    }

    #[test]
    fn reused_value_accumulates() {
        // loss = sum(x * x) → dx = 2x
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(EngineError::NonScalarLoss(_))));
    }
}
