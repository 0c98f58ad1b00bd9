//! Lifting, group correlation and orientation projection layers.
//!
//! Both correlation layers lower to a single [`correlate2d`]: the sparse
//! rotation operator expands the shared base weights into one wide dense
//! kernel whose output channels enumerate `(orientation, channel)` pairs,
//! which is exactly the `[.., N, C]` layout of an SE(2,N) image.
//!
//! [`correlate2d`]: crate::ops::correlate2d

use std::sync::Arc;

use crate::autograd::{Graph, NodeId};
use crate::error::{shape_err, Result};
use crate::geometry::OrientationSampling;
use crate::kernel_rotation::RotationOperator;
use crate::ops::{self, Padding};
use crate::sparse::SparseMap;
use crate::tensor::{Scalar, Tensor};

/// A sampled function on SE(2,N): `[H, W, N, C]` or a batch `[B, H, W, N, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SE2Image<T> {
    tensor: Tensor<T>,
    sampling: OrientationSampling,
}

impl<T: Scalar> SE2Image<T> {
    pub fn new(tensor: Tensor<T>, sampling: OrientationSampling) -> Result<Self> {
        let rank = tensor.rank();
        if !(4..=5).contains(&rank) {
            return Err(shape_err(format!(
                "SE(2) image must be [H,W,N,C] or [B,H,W,N,C], got {:?}",
                tensor.shape()
            )));
        }
        if tensor.shape()[rank - 2] != sampling.len() {
            return Err(shape_err(format!(
                "orientation axis {} but sampling has {}",
                tensor.shape()[rank - 2],
                sampling.len()
            )));
        }
        Ok(Self { tensor, sampling })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn sampling(&self) -> OrientationSampling {
        self.sampling
    }

    pub fn channels(&self) -> usize {
        *self.tensor.shape().last().expect("rank >= 4")
    }

    /// Cyclic shift of the orientation axis: slice `k` of the result is slice
    /// `(k − shift) mod N` of `self`.
    pub fn shift_orientations(&self, shift: usize) -> Self {
        let n = self.sampling.len();
        let c = self.channels();
        let src = self.tensor.data();
        let mut out = vec![T::zero(); src.len()];
        for (block_idx, block) in src.chunks_exact(n * c).enumerate() {
            for k in 0..n {
                let from = (k + n - shift % n) % n;
                let dst = block_idx * n * c + k * c;
                out[dst..dst + c].copy_from_slice(&block[from * c..(from + 1) * c]);
            }
        }
        Self {
            tensor: Tensor::new(self.tensor.shape(), out).expect("same shape"),
            sampling: self.sampling,
        }
    }
}

fn batch_prefix(shape: &[usize], inner_rank: usize) -> Result<(Vec<usize>, bool)> {
    if shape.len() == inner_rank {
        Ok((shape.to_vec(), false))
    } else if shape.len() == inner_rank + 1 {
        Ok((shape.to_vec(), true))
    } else {
        Err(shape_err(format!("unexpected rank for shape {shape:?}")))
    }
}

/// Lifting kernels `𝐤 = (k₁ … k_{C_out})`, each with `C_in` channels, stored
/// as masked base weights `[C_out, C_in, |mask|]`.
#[derive(Debug, Clone)]
pub struct LiftingKernelSet<T> {
    weights: Tensor<T>,
    c_in: usize,
    c_out: usize,
    op: Arc<RotationOperator>,
    map: Arc<SparseMap<T>>,
}

impl<T: Scalar> LiftingKernelSet<T> {
    pub fn new(op: Arc<RotationOperator>, weights: Tensor<T>) -> Result<Self> {
        let m = op.mask().len();
        let [c_out, c_in, len] = *weights.shape() else {
            return Err(shape_err(format!("lifting weights must be [C_out, C_in, {m}], got {:?}", weights.shape())));
        };
        if len != m {
            return Err(shape_err(format!("lifting weights need {m} mask entries, got {len}")));
        }
        let map = Arc::new(op.lifting_map(c_in, c_out)?);
        Ok(Self {
            weights,
            c_in,
            c_out,
            op,
            map,
        })
    }

    pub fn zeros(op: Arc<RotationOperator>, c_in: usize, c_out: usize) -> Result<Self> {
        let m = op.mask().len();
        Self::new(op, Tensor::zeros(&[c_out, c_in, m]))
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn operator(&self) -> &RotationOperator {
        &self.op
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn orientations(&self) -> usize {
        self.op.orientations()
    }

    pub fn kernel_size(&self) -> usize {
        self.op.kernel_size()
    }

    /// Dense correlation kernel `[n, n, C_in, N·C_out]`.
    pub fn dense_kernel(&self) -> Result<Tensor<T>> {
        self.map.apply(self.weights.data())
    }

    /// All rotated kernels as `[n, n, N, C_in, C_out]`.
    pub fn rotated_kernels(&self) -> Result<Tensor<T>> {
        let dense = self.dense_kernel()?;
        let (n, nn) = (self.kernel_size(), self.orientations());
        let (ci, co) = (self.c_in, self.c_out);
        Ok(Tensor::from_fn(&[n, n, nn, ci, co], |idx| {
            let j = idx % co;
            let c = idx / co % ci;
            let i = idx / (co * ci) % nn;
            let pq = idx / (co * ci * nn);
            dense.data()[(pq * ci + c) * nn * co + i * co + j]
        }))
    }

    pub(crate) fn map(&self) -> &Arc<SparseMap<T>> {
        &self.map
    }
}

/// SE(2,N) kernels `𝐊 = (K₁ … K_{C_out})` stored as masked base weights
/// `[C_out, C_in, N, |mask|]`.
#[derive(Debug, Clone)]
pub struct GroupKernelSet<T> {
    weights: Tensor<T>,
    c_in: usize,
    c_out: usize,
    op: Arc<RotationOperator>,
    map: Arc<SparseMap<T>>,
}

impl<T: Scalar> GroupKernelSet<T> {
    pub fn new(op: Arc<RotationOperator>, weights: Tensor<T>) -> Result<Self> {
        let (m, nn) = (op.mask().len(), op.orientations());
        let [c_out, c_in, wn, len] = *weights.shape() else {
            return Err(shape_err(format!(
                "group weights must be [C_out, C_in, {nn}, {m}], got {:?}",
                weights.shape()
            )));
        };
        if len != m || wn != nn {
            return Err(shape_err(format!(
                "group weights need [.., {nn}, {m}], got {:?}",
                weights.shape()
            )));
        }
        let map = Arc::new(op.group_map(c_in, c_out)?);
        Ok(Self {
            weights,
            c_in,
            c_out,
            op,
            map,
        })
    }

    pub fn zeros(op: Arc<RotationOperator>, c_in: usize, c_out: usize) -> Result<Self> {
        let (m, nn) = (op.mask().len(), op.orientations());
        Self::new(op, Tensor::zeros(&[c_out, c_in, nn, m]))
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn operator(&self) -> &RotationOperator {
        &self.op
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn orientations(&self) -> usize {
        self.op.orientations()
    }

    pub fn kernel_size(&self) -> usize {
        self.op.kernel_size()
    }

    /// Dense correlation kernel `[n, n, N·C_in, N·C_out]`.
    pub fn dense_kernel(&self) -> Result<Tensor<T>> {
        self.map.apply(self.weights.data())
    }

    pub(crate) fn map(&self) -> &Arc<SparseMap<T>> {
        &self.map
    }
}

/// How the projection layer collapses the orientation axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Projection {
    #[default]
    Max,
    Mean,
}

/// Lifting correlation: `out(x, θᵢ, j) = Σ_c ⟨U_{(x,θᵢ)} k_c^{(j)}, f_c⟩`.
///
/// `image` is `[H, W, C_in]` or `[B, H, W, C_in]`.
pub fn lift_correlate<T: Scalar>(image: &Tensor<T>, kernels: &LiftingKernelSet<T>) -> Result<SE2Image<T>> {
    let (mut shape, _) = batch_prefix(image.shape(), 3)?;
    let dense = kernels.dense_kernel()?;
    let out = ops::correlate2d(image, &dense, Padding::SameZero, 1)?;
    *shape.last_mut().expect("rank >= 3") = kernels.orientations();
    shape.push(kernels.c_out());
    SE2Image::new(out.reshape(&shape)?, kernels.operator().sampling())
}

/// Group correlation: `out(g, j) = Σ_c Σ_h K_c^{(j)}(g⁻¹·h) F_c(h)` with a
/// plain sum over SE(2,N).
pub fn group_correlate<T: Scalar>(input: &SE2Image<T>, kernels: &GroupKernelSet<T>) -> Result<SE2Image<T>> {
    let shape = input.tensor().shape();
    let rank = shape.len();
    if input.sampling().len() != kernels.orientations() {
        return Err(shape_err(format!(
            "image has {} orientations, kernels {}",
            input.sampling().len(),
            kernels.orientations()
        )));
    }
    if shape[rank - 1] != kernels.c_in() {
        return Err(shape_err(format!(
            "image has {} channels, kernels expect {}",
            shape[rank - 1],
            kernels.c_in()
        )));
    }
    let nn = kernels.orientations();
    let mut flat = shape[..rank - 2].to_vec();
    flat.push(nn * kernels.c_in());
    let x = input.tensor().clone().reshape(&flat)?;
    let out = ops::correlate2d(&x, &kernels.dense_kernel()?, Padding::SameZero, 1)?;
    let mut out_shape = shape[..rank - 1].to_vec();
    out_shape.push(kernels.c_out());
    SE2Image::new(out.reshape(&out_shape)?, input.sampling())
}

/// Per-pixel, per-channel maximum over orientations.
pub fn project_max_theta<T: Scalar>(input: &SE2Image<T>) -> Result<Tensor<T>> {
    Ok(ops::project_max(input.tensor())?.0)
}

pub fn project<T: Scalar>(input: &SE2Image<T>, mode: Projection) -> Result<Tensor<T>> {
    match mode {
        Projection::Max => project_max_theta(input),
        Projection::Mean => ops::project_mean(input.tensor()),
    }
}

/// Spatial max pooling of every `(orientation, channel)` slice.
pub fn se2_max_pool<T: Scalar>(input: &SE2Image<T>, window: usize) -> Result<SE2Image<T>> {
    let shape = input.tensor().shape();
    let rank = shape.len();
    let mut flat = shape[..rank - 2].to_vec();
    flat.push(shape[rank - 2] * shape[rank - 1]);
    let pooled = ops::max_pool2d(&input.tensor().clone().reshape(&flat)?, window)?.0;
    let mut out_shape = pooled.shape()[..pooled.rank() - 1].to_vec();
    out_shape.extend_from_slice(&shape[rank - 2..]);
    SE2Image::new(pooled.reshape(&out_shape)?, input.sampling())
}

/// Differentiable lifting on a batch node `[B, H, W, C_in]`; `weights` holds
/// the base weights `[C_out, C_in, |mask|]`. Returns `[B, H, W, N, C_out]`.
pub fn lift_node<T: Scalar>(
    graph: &mut Graph<T>,
    input: NodeId,
    weights: NodeId,
    kernels: &LiftingKernelSet<T>,
) -> Result<NodeId> {
    let [b, h, w, _] = *graph.value(input).shape() else {
        return Err(shape_err("lifting input must be [B,H,W,C]"));
    };
    let dense = graph.sparse_linear(weights, kernels.map().clone())?;
    let out = graph.correlate2d(input, dense, Padding::SameZero, 1)?;
    graph.reshape(out, &[b, h, w, kernels.orientations(), kernels.c_out()])
}

/// Differentiable group correlation on `[B, H, W, N, C_in]`.
pub fn group_node<T: Scalar>(
    graph: &mut Graph<T>,
    input: NodeId,
    weights: NodeId,
    kernels: &GroupKernelSet<T>,
) -> Result<NodeId> {
    let [b, h, w, n, c] = *graph.value(input).shape() else {
        return Err(shape_err("group correlation input must be [B,H,W,N,C]"));
    };
    if n != kernels.orientations() || c != kernels.c_in() {
        return Err(shape_err(format!(
            "input [.., {n}, {c}] vs kernels [.., {}, {}]",
            kernels.orientations(),
            kernels.c_in()
        )));
    }
    let flat = graph.reshape(input, &[b, h, w, n * c])?;
    let dense = graph.sparse_linear(weights, kernels.map().clone())?;
    let out = graph.correlate2d(flat, dense, Padding::SameZero, 1)?;
    graph.reshape(out, &[b, h, w, n, kernels.c_out()])
}

/// Differentiable spatial pooling of `[B, H, W, N, C]`.
pub fn se2_max_pool_node<T: Scalar>(graph: &mut Graph<T>, input: NodeId, window: usize) -> Result<NodeId> {
    let [b, h, w, n, c] = *graph.value(input).shape() else {
        return Err(shape_err("SE(2) pooling input must be [B,H,W,N,C]"));
    };
    let flat = graph.reshape(input, &[b, h, w, n * c])?;
    let pooled = graph.max_pool2d(flat, window)?;
    graph.reshape(pooled, &[b, h / window, w / window, n, c])
}

pub fn project_node<T: Scalar>(graph: &mut Graph<T>, input: NodeId, mode: Projection) -> Result<NodeId> {
    match mode {
        Projection::Max => graph.project_max(input),
        Projection::Mean => graph.project_mean(input),
    }
}
