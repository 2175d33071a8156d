//! Reverse-mode differentiation over a linear record of executed operations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::volgrad::kernels::{self, BatchMoments, BatchNormCache};
use crate::volgrad::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3d { input: Var, weight: Var, bias: Var, stride: usize, padding: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, cache: BatchNormCache<T> },
    LeakyRelu { input: Var, slope: f64 },
    MaxPool { input: Var, argmax: Vec<usize> },
    Reshape { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    Dropout { input: Var, multiplier: Vec<T> },
    Softmax { input: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
    ClassMean { input: Var, class: usize },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of operations. One tape per optimization job; not shared across threads.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; `None` for values that do not depend on a tracked leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
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

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or_else(|| Error::Tape(format!("unknown variable {}", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Only leaves with `track == true` (and what depends on them) get gradients.
    pub fn leaf(&mut self, value: Tensor<T>, track: bool) -> Var {
        self.push(value, Op::Leaf, track)
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv3d(
            &self.node(input)?.value,
            &self.node(weight)?.value,
            &self.node(bias)?.value,
            stride,
            padding,
        )?;
        let rg = self.requires(&[input, weight, bias]);
        Ok(self.push(out, Op::Conv3d { input, weight, bias, stride, padding }, rg))
    }

    /// Records a batch norm. In train mode the batch moments are returned so the
    /// caller can update its running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm3d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        train: bool,
        epsilon: f64,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let (out, cache, moments) = kernels::batchnorm3d(
            &self.node(input)?.value,
            &self.node(gamma)?.value,
            &self.node(beta)?.value,
            running_mean,
            running_var,
            train,
            epsilon,
        )?;
        let rg = self.requires(&[input, gamma, beta]);
        Ok((self.push(out, Op::BatchNorm { input, gamma, beta, cache }, rg), moments))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        let out = kernels::leaky_relu(&self.node(input)?.value, slope);
        let rg = self.requires(&[input]);
        Ok(self.push(out, Op::LeakyRelu { input, slope }, rg))
    }

    pub fn maxpool3d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool3d(&self.node(input)?.value, kernel, stride)?;
        let rg = self.requires(&[input]);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(input)?.value.clone().reshape(shape)?;
        let rg = self.requires(&[input]);
        Ok(self.push(out, Op::Reshape { input }, rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::linear(&self.node(input)?.value, &self.node(weight)?.value, &self.node(bias)?.value)?;
        let rg = self.requires(&[input, weight, bias]);
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    /// Inverted dropout; the identity when `train` is false.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        let x = &self.node(input)?.value;
        let multiplier = if train && rate > 0.0 {
            kernels::dropout_mask::<T, R>(x.numel(), rate, rng)?
        } else {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
            }
            vec![T::one(); x.numel()]
        };
        let data = x.data().iter().zip(&multiplier).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.requires(&[input]);
        Ok(self.push(out, Op::Dropout { input, multiplier }, rg))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let out = kernels::softmax(&self.node(input)?.value)?;
        let rg = self.requires(&[input]);
        Ok(self.push(out, Op::Softmax { input }, rg))
    }

    /// Scalar mean cross-entropy of `logits` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(&self.node(logits)?.value, labels)?;
        let rg = self.requires(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Scalar mean over rows of column `class` of an (N, K) value.
    pub fn class_mean(&mut self, input: Var, class: usize) -> Result<Var> {
        let x = &self.node(input)?.value;
        let (n, k) = match x.shape() {
            [n, k] => (*n, *k),
            s => return Err(Error::dim("class_mean", format!("expected (N, K), got {s:?}"))),
        };
        if class >= k {
            return Err(Error::InvalidArgument(format!("class {class} out of range for {k} columns")));
        }
        let sum: T = (0..n).map(|r| x.data()[r * k + class]).sum();
        let out = Tensor::scalar(sum / T::of(n.max(1) as f64));
        let rg = self.requires(&[input]);
        Ok(self.push(out, Op::ClassMean { input, class }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        if va.shape() != vb.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.requires(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out = self.node(input)?.value.map(|x| x * factor);
        let rg = self.requires(&[input]);
        Ok(self.push(out, Op::Scale { input, factor }, rg))
    }

    /// Back-propagates from a scalar `root`, visiting the record in reverse execution order.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_node = self.node(root)?;
        if root_node.value.numel() != 1 {
            return Err(Error::Tape(format!("backward root has shape {:?}, expected a scalar", root_node.value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_node.value.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let send = |v: Var, d: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv3d { input, weight, bias, stride, padding } => {
                    let need = [input, weight, bias].map(|v| self.nodes[v.0].requires_grad);
                    let cg = kernels::conv3d_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[weight.0].value,
                        &g,
                        *stride,
                        *padding,
                        need,
                    )?;
                    if let Some(d) = cg.input {
                        send(*input, d, &mut grads);
                    }
                    if let Some(d) = cg.weight {
                        send(*weight, d, &mut grads);
                    }
                    if let Some(d) = cg.bias {
                        send(*bias, d, &mut grads);
                    }
                }
                Op::BatchNorm { input, gamma, beta, cache } => {
                    let (dx, dg, db) = kernels::batchnorm3d_backward(&g, &self.nodes[gamma.0].value, cache)?;
                    send(*input, dx, &mut grads);
                    send(*gamma, dg, &mut grads);
                    send(*beta, db, &mut grads);
                }
                Op::LeakyRelu { input, slope } => {
                    let d = kernels::leaky_relu_backward(&self.nodes[input.0].value, &g, *slope);
                    send(*input, d, &mut grads);
                }
                Op::MaxPool { input, argmax } => {
                    let d = kernels::maxpool3d_backward(self.nodes[input.0].value.shape(), argmax, &g);
                    send(*input, d, &mut grads);
                }
                Op::Reshape { input } => {
                    let d = g.reshape(self.nodes[input.0].value.shape())?;
                    send(*input, d, &mut grads);
                }
                Op::Linear { input, weight, bias } => {
                    let (dx, dw, db) =
                        kernels::linear_backward(&self.nodes[input.0].value, &self.nodes[weight.0].value, &g);
                    send(*input, dx, &mut grads);
                    send(*weight, dw, &mut grads);
                    send(*bias, db, &mut grads);
                }
                Op::Dropout { input, multiplier } => {
                    let data = g.data().iter().zip(multiplier).map(|(&a, &m)| a * m).collect();
                    send(*input, Tensor::new(g.shape().to_vec(), data)?, &mut grads);
                }
                Op::Softmax { input } => {
                    let d = kernels::softmax_backward(&node.value, &g);
                    send(*input, d, &mut grads);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let d = kernels::softmax_cross_entropy_backward(probs, labels, g.item());
                    send(*logits, d, &mut grads);
                }
                Op::ClassMean { input, class } => {
                    let shape = self.nodes[input.0].value.shape();
                    let (n, k) = (shape[0], shape[1]);
                    let share = g.item() / T::of(n.max(1) as f64);
                    let d = Tensor::from_fn(shape, |j| if j % k == *class { share } else { T::zero() });
                    send(*input, d, &mut grads);
                }
                Op::Add { a, b } => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Scale { input, factor } => {
                    let f = *factor;
                    send(*input, g.map(|x| x * f), &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
