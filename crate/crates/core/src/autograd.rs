//! Reverse-mode differentiation over a fixed set of tensor operations.
//!
//! A [`Graph`] records every executed operation together with the values its
//! backward pass needs. Node ids are assigned in execution order, so the
//! record is already topologically sorted and [`Graph::backward`] walks it in
//! reverse, visiting each node once.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, BatchNormCache, BatchNormMode, Padding};
use crate::sparse::SparseMap;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Correlate2d {
        input: NodeId,
        kernel: NodeId,
        padding: Padding,
        stride: usize,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    BatchNorm {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        mode: BatchNormMode,
        cache: BatchNormCache<T>,
    },
    AddChannelBias {
        input: NodeId,
        bias: NodeId,
    },
    LogisticLoss {
        logit: NodeId,
        labels: Tensor<T>,
    },
    SparseLinear {
        input: NodeId,
        map: Arc<SparseMap<T>>,
    },
    ProjectMax {
        input: NodeId,
        argmax: Vec<usize>,
    },
    ProjectMean(NodeId),
    GlobalMaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    trainable: bool,
}

/// The computation record: values and cached backward state of every
/// executed operation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is not tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, false)
    }

    /// A trainable leaf; [`Graph::backward`] always reports a gradient for it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId], name: &'static str) -> Result<NodeId> {
        value.ensure_finite(name)?;
        let requires_grad = self.needs(inputs);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let v = Tensor::new(x.shape(), data)?;
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(format!("mul {:?} * {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let v = Tensor::new(x.shape(), data)?;
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor), &[a], "scale")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a), &[a], "reshape")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(shape_err("mean of an empty tensor"));
        }
        let v = Tensor::scalar(x.sum() / T::from_usize(x.len()).expect("length fits"));
        self.push(v, Op::Mean(a), &[a], "mean")
    }

    pub fn correlate2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        padding: Padding,
        stride: usize,
    ) -> Result<NodeId> {
        let v = ops::correlate2d(self.value(input), self.value(kernel), padding, stride)?;
        self.push(
            v,
            Op::Correlate2d {
                input,
                kernel,
                padding,
                stride,
            },
            &[input, kernel],
            "correlate2d",
        )
    }

    pub fn max_pool2d(&mut self, input: NodeId, window: usize) -> Result<NodeId> {
        let (v, argmax) = ops::max_pool2d(self.value(input), window)?;
        self.push(v, Op::MaxPool2d { input, argmax }, &[input], "max_pool2d")
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let v = ops::relu(self.value(input));
        self.push(v, Op::Relu(input), &[input], "relu")
    }

    /// Batch norm over every axis but the last. In inference mode the given
    /// running statistics are used; in train mode they are ignored and the
    /// batch statistics can be read back with [`Graph::batch_norm_stats`].
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        epsilon: f64,
        mode: BatchNormMode,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<NodeId> {
        let (v, cache) = ops::batch_norm(
            self.value(input),
            self.value(scale),
            self.value(shift),
            epsilon,
            mode,
            running_mean,
            running_var,
        )?;
        self.push(
            v,
            Op::BatchNorm {
                input,
                scale,
                shift,
                mode,
                cache,
            },
            &[input, scale, shift],
            "batch_norm",
        )
    }

    /// Per-channel `(mean, variance)` a batch norm node normalized with.
    pub fn batch_norm_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { cache, .. } => Some((&cache.mean, &cache.var)),
            _ => None,
        }
    }

    /// Adds `bias[c]` to every element of channel `c` (last axis).
    pub fn add_channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, b) = (self.value(input), self.value(bias));
        let c = *x.shape().last().ok_or_else(|| shape_err("bias needs a channel axis"))?;
        if b.len() != c {
            return Err(shape_err(format!("bias of {} for {c} channels", b.len())));
        }
        let bd = b.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % c])
            .collect();
        let v = Tensor::new(x.shape(), data)?;
        self.push(v, Op::AddChannelBias { input, bias }, &[input, bias], "add_channel_bias")
    }

    pub fn logistic_loss(&mut self, logit: NodeId, labels: &Tensor<T>) -> Result<NodeId> {
        let loss = ops::logistic_loss(self.value(logit), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::LogisticLoss {
                logit,
                labels: labels.clone(),
            },
            &[logit],
            "logistic_loss",
        )
    }

    /// Applies a sparse linear map to the flattened input.
    pub fn sparse_linear(&mut self, input: NodeId, map: Arc<SparseMap<T>>) -> Result<NodeId> {
        let v = map.apply(self.value(input).data())?;
        self.push(v, Op::SparseLinear { input, map }, &[input], "sparse_linear")
    }

    /// Maximum over the orientation axis of `[..., N, C]`.
    pub fn project_max(&mut self, input: NodeId) -> Result<NodeId> {
        let (v, argmax) = ops::project_max(self.value(input))?;
        self.push(v, Op::ProjectMax { input, argmax }, &[input], "project_max")
    }

    pub fn project_mean(&mut self, input: NodeId) -> Result<NodeId> {
        let v = ops::project_mean(self.value(input))?;
        self.push(v, Op::ProjectMean(input), &[input], "project_mean")
    }

    pub fn global_max_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let (v, argmax) = ops::global_max_pool(self.value(input))?;
        self.push(v, Op::GlobalMaxPool { input, argmax }, &[input], "global_max_pool")
    }

    /// Hash of every branch decision taken in the recorded forward pass:
    /// the sign of each ReLU input and each max-selection index. Two passes
    /// with equal signatures evaluate the same smooth piece of the function.
    pub fn activation_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &v in self.value(*a).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } | Op::GlobalMaxPool { argmax, .. } | Op::ProjectMax { argmax, .. } => {
                    argmax.hash(&mut h)
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Propagates `d loss / d node` from a scalar `loss` back to every node.
    ///
    /// Trainable leaves the loss does not depend on receive a zero gradient
    /// and a warning is logged.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.trainable && grads[idx].is_none() {
                log::warn!("parameter node {idx} is disconnected from the loss; gradient set to zero");
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut send = |id: NodeId, t: Tensor<T>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a = *a + v;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, y, |p, q| p * q);
                let gb = zip_map(g, x, |p, q| p * q);
                send(*a, ga);
                send(*b, gb);
            }
            Op::Scale(a, f) => send(*a, g.map(|v| v * *f)),
            Op::Reshape(a) => send(*a, g.clone().reshape(self.value(*a).shape())?),
            Op::Sum(a) => send(*a, Tensor::full(self.value(*a).shape(), g.data()[0])),
            Op::Mean(a) => {
                let x = self.value(*a);
                let v = g.data()[0] / T::from_usize(x.len()).expect("length fits");
                send(*a, Tensor::full(x.shape(), v));
            }
            Op::Correlate2d {
                input,
                kernel,
                padding,
                stride,
            } => {
                let (gi, gk) = ops::correlate2d_backward_select(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *padding,
                    *stride,
                    self.nodes[input.0].requires_grad,
                )?;
                if let Some(gi) = gi {
                    send(*input, gi);
                }
                send(*kernel, gk);
            }
            Op::MaxPool2d { input, argmax } | Op::GlobalMaxPool { input, argmax } | Op::ProjectMax { input, argmax } => {
                send(*input, ops::scatter_argmax(self.value(*input).shape(), argmax, g));
            }
            Op::Relu(a) => send(*a, ops::relu_backward(self.value(*a), g)),
            Op::BatchNorm {
                input,
                scale,
                shift,
                mode,
                cache,
            } => {
                let (gx, gs, gb) = ops::batch_norm_backward(cache, self.value(*scale), g, *mode);
                send(*input, gx);
                send(*scale, gs);
                send(*shift, gb);
            }
            Op::AddChannelBias { input, bias } => {
                let c = self.value(*bias).len();
                let mut gb = vec![T::zero(); c];
                for row in g.data().chunks_exact(c) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                send(*input, g.clone());
                send(*bias, Tensor::new(self.value(*bias).shape(), gb)?);
            }
            Op::LogisticLoss { logit, labels } => {
                send(
                    *logit,
                    ops::logistic_loss_backward(self.value(*logit), labels, g.data()[0]),
                );
            }
            Op::SparseLinear { input, map } => {
                let gi = map.apply_transpose(g.data())?;
                send(*input, Tensor::new(self.value(*input).shape(), gi)?);
            }
            Op::ProjectMean(a) => send(*a, ops::project_mean_backward(self.value(*a).shape(), g)),
        }
        Ok(())
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `id`, if it was reached.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but an error when the node has no gradient.
    pub fn expect(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("node {} has no gradient", id.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gives_identity() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn disconnected_parameter_gets_zero() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let q = g.param(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(q).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let p = g.param(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::new(&[1], vec![f64::MAX]).unwrap());
        assert!(matches!(g.scale(p, 10.0), Err(Error::NonFinite(_))));
    }
}
