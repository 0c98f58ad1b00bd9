//! Forward and backward kernels for the fixed operation set.
//!
//! These are plain functions over tensors; [`crate::autograd::Graph`] records
//! them and chains their backward passes. Batch items are processed in
//! parallel where outputs are disjoint; every cross-item reduction is summed
//! sequentially in batch order so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Spatial padding mode for [`correlate2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Zero padding so that the output has `ceil(H / stride)` rows.
    #[default]
    SameZero,
    /// No padding; the kernel stays inside the input.
    Valid,
}

#[derive(Debug, Clone, Copy)]
struct CorrGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    n: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    /// Zero rows/columns conceptually added before the first input row/column.
    pad: usize,
}

impl CorrGeom {
    /// Padded extent covering every tap of every output pixel.
    fn padded(&self) -> (usize, usize) {
        (
            (self.ho - 1) * self.stride + self.n,
            (self.wo - 1) * self.stride + self.n,
        )
    }
}

fn corr_geometry(
    input: &[usize],
    kernel: &[usize],
    padding: Padding,
    stride: usize,
) -> Result<CorrGeom> {
    let (batch, h, w, cin) = match *input {
        [h, w, c] => (1, h, w, c),
        [b, h, w, c] => (b, h, w, c),
        _ => return Err(shape_err(format!("correlate2d input must be [B,H,W,C], got {input:?}"))),
    };
    let [kh, kw, kcin, cout] = *kernel else {
        return Err(shape_err(format!("kernel must be [n,n,Cin,Cout], got {kernel:?}")));
    };
    if kh != kw || kh == 0 {
        return Err(shape_err(format!("kernel must be square and non-empty, got {kh}x{kw}")));
    }
    if kcin != cin {
        return Err(shape_err(format!("kernel expects {kcin} input channels, input has {cin}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if h == 0 || w == 0 {
        return Err(shape_err("correlate2d over an empty image"));
    }
    let n = kh;
    let (ho, wo, pad) = match padding {
        Padding::SameZero => (h.div_ceil(stride), w.div_ceil(stride), (n - 1) / 2),
        Padding::Valid => {
            if n > h || n > w {
                return Err(shape_err(format!("kernel size {n} exceeds input {h}x{w}")));
            }
            ((h - n) / stride + 1, (w - n) / stride + 1, 0)
        }
    };
    Ok(CorrGeom {
        batch,
        h,
        w,
        cin,
        n,
        cout,
        ho,
        wo,
        stride,
        pad,
    })
}

fn corr_out_shape(input: &[usize], g: &CorrGeom) -> Vec<usize> {
    if input.len() == 3 {
        vec![g.ho, g.wo, g.cout]
    } else {
        vec![g.batch, g.ho, g.wo, g.cout]
    }
}

/// Copies `[h, w, c]` into a zero `[hp, wp, c]` buffer at offset `(top, left)`.
/// Rows or columns beyond `hp`/`wp` are dropped.
fn pad_item<T: Scalar>(src: &[T], h: usize, w: usize, c: usize, hp: usize, wp: usize, top: usize, left: usize) -> Vec<T> {
    let mut out = vec![T::zero(); hp * wp * c];
    for r in 0..h.min(hp.saturating_sub(top)) {
        let cols = w.min(wp.saturating_sub(left));
        let s = r * w * c;
        let d = ((r + top) * wp + left) * c;
        out[d..d + cols * c].copy_from_slice(&src[s..s + cols * c]);
    }
    out
}

/// Upper bound on the elements of one patch matrix; larger batches are
/// processed in chunks of items.
const COL_BUDGET: usize = 1 << 23;

fn items_per_chunk(g: &CorrGeom) -> usize {
    let per_item = g.ho * g.wo * g.n * g.n * g.cin;
    (COL_BUDGET / per_item.max(1)).clamp(1, g.batch.max(1))
}

/// Patch matrix of items `start..end`: row `(item, r, q)` holds the
/// receptive field `xp[r·s + a, q·s + b, :]` in `(a, b, ci)` order.
fn im2col<T: Scalar>(g: &CorrGeom, input: &[T], start: usize, end: usize) -> Vec<T> {
    let (hp, wp) = g.padded();
    let in_item = g.h * g.w * g.cin;
    let (n, cin) = (g.n, g.cin);
    let k = n * n * cin;
    let rows = g.ho * g.wo;
    let mut col = vec![T::zero(); (end - start) * rows * k];
    col.par_chunks_mut(rows * k)
        .zip(input[start * in_item..end * in_item].par_chunks(in_item))
        .for_each(|(col_b, in_b)| {
            let xp = pad_item(in_b, g.h, g.w, cin, hp, wp, g.pad, g.pad);
            for r in 0..g.ho {
                for q in 0..g.wo {
                    let row = &mut col_b[(r * g.wo + q) * k..(r * g.wo + q + 1) * k];
                    for a in 0..n {
                        let src = ((r * g.stride + a) * wp + q * g.stride) * cin;
                        row[a * n * cin..(a + 1) * n * cin].copy_from_slice(&xp[src..src + n * cin]);
                    }
                }
            }
        });
    col
}

/// Adds a patch-matrix gradient back onto the input positions it was read
/// from; the inverse data movement of [`im2col`].
fn col2im<T: Scalar>(g: &CorrGeom, col: &[T], grad_in: &mut [T], start: usize, end: usize) {
    let (hp, wp) = g.padded();
    let in_item = g.h * g.w * g.cin;
    let (n, cin) = (g.n, g.cin);
    let k = n * n * cin;
    let rows = g.ho * g.wo;
    grad_in[start * in_item..end * in_item]
        .par_chunks_mut(in_item)
        .zip(col.par_chunks(rows * k))
        .for_each(|(gin_b, col_b)| {
            let mut gp = vec![T::zero(); hp * wp * cin];
            for r in 0..g.ho {
                for q in 0..g.wo {
                    let row = &col_b[(r * g.wo + q) * k..(r * g.wo + q + 1) * k];
                    for a in 0..n {
                        let dst = ((r * g.stride + a) * wp + q * g.stride) * cin;
                        for (d, &v) in gp[dst..dst + n * cin].iter_mut().zip(&row[a * n * cin..(a + 1) * n * cin]) {
                            *d = *d + v;
                        }
                    }
                }
            }
            // Crop the padding; the padded extent may also fall short of the input.
            for r in 0..g.h.min(hp.saturating_sub(g.pad)) {
                let cols = g.w.min(wp.saturating_sub(g.pad));
                let s = ((r + g.pad) * wp + g.pad) * cin;
                gin_b[r * g.w * cin..(r * g.w + cols) * cin].copy_from_slice(&gp[s..s + cols * cin]);
            }
        });
}

/// Cross-correlation `out[x, o] = Σ_c Σ_d k[d, c, o] · f[x + d, c]`.
///
/// `input` is `[H, W, Cin]` or `[B, H, W, Cin]`, `kernel` is
/// `[n, n, Cin, Cout]`. With [`Padding::SameZero`] the kernel is centered on
/// the output pixel and samples outside the input read as zero.
pub fn correlate2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = corr_geometry(input.shape(), kernel.shape(), padding, stride)?;
    input.ensure_finite("correlate2d input")?;
    let rows = g.ho * g.wo;
    let k = g.n * g.n * g.cin;
    let mut out = vec![T::zero(); g.batch * rows * g.cout];
    let chunk = items_per_chunk(&g);
    let mut start = 0;
    while start < g.batch {
        let end = (start + chunk).min(g.batch);
        let col = im2col(&g, input.data(), start, end);
        let m = (end - start) * rows;
        let dst = &mut out[start * rows * g.cout..end * rows * g.cout];
        T::gemm(m, k, g.cout, &col, [k as isize, 1], kernel.data(), [g.cout as isize, 1], T::zero(), dst);
        start = end;
    }
    let out = Tensor::new(&corr_out_shape(input.shape(), &g), out)?;
    out.ensure_finite("correlate2d")?;
    Ok(out)
}

/// Gradients of [`correlate2d`] with respect to its input and kernel.
pub fn correlate2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    padding: Padding,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (gi, gk) = correlate2d_backward_select(input, kernel, grad_out, padding, stride, true)?;
    Ok((gi.expect("input gradient requested"), gk))
}

/// As [`correlate2d_backward`], skipping the input gradient unless `want_input`.
pub fn correlate2d_backward_select<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    padding: Padding,
    stride: usize,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let g = corr_geometry(input.shape(), kernel.shape(), padding, stride)?;
    if grad_out.shape() != corr_out_shape(input.shape(), &g).as_slice() {
        return Err(shape_err("correlate2d gradient shape"));
    }
    let rows = g.ho * g.wo;
    let k = g.n * g.n * g.cin;
    let mut grad_in = if want_input { vec![T::zero(); input.len()] } else { Vec::new() };
    let mut grad_k = vec![T::zero(); kernel.len()];
    let chunk = items_per_chunk(&g);
    let mut start = 0;
    while start < g.batch {
        let end = (start + chunk).min(g.batch);
        let m = (end - start) * rows;
        let gout = &grad_out.data()[start * rows * g.cout..end * rows * g.cout];
        let col = im2col(&g, input.data(), start, end);
        // grad_k += colᵀ · grad_out, chunks accumulated in batch order.
        let beta = if start == 0 { T::zero() } else { T::one() };
        T::gemm(k, m, g.cout, &col, [1, k as isize], gout, [g.cout as isize, 1], beta, &mut grad_k);
        if want_input {
            // grad_col = grad_out · kernelᵀ, reusing the patch buffer.
            let mut grad_col = col;
            T::gemm(m, g.cout, k, gout, [g.cout as isize, 1], kernel.data(), [1, g.cout as isize], T::zero(), &mut grad_col);
            col2im(&g, &grad_col, &mut grad_in, start, end);
        }
        start = end;
    }
    let grad_in = if want_input { Some(Tensor::new(input.shape(), grad_in)?) } else { None };
    Ok((grad_in, Tensor::new(kernel.shape(), grad_k)?))
}

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(shape_err(format!("expected [B,H,W,C] or [H,W,C], got {shape:?}"))),
    }
}

/// Non-overlapping spatial max pooling. Returns the pooled tensor and, per
/// output element, the linear input index of its maximum (lowest index on
/// ties).
pub fn max_pool2d<T: Scalar>(input: &Tensor<T>, window: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (batch, h, w, c) = spatial_dims(input.shape())?;
    if window == 0 {
        return Err(Error::InvalidArgument("pooling window must be positive".into()));
    }
    if h % window != 0 || w % window != 0 {
        return Err(shape_err(format!(
            "spatial size {h}x{w} not divisible by pooling window {window}"
        )));
    }
    let (ho, wo) = (h / window, w / window);
    let x = input.data();
    let mut out = vec![T::zero(); batch * ho * wo * c];
    let mut argmax = vec![0usize; out.len()];
    for b in 0..batch {
        for r in 0..ho {
            for q in 0..wo {
                let o = ((b * ho + r) * wo + q) * c;
                let (best, arg) = (&mut out[o..o + c], &mut argmax[o..o + c]);
                // Scan in increasing linear index so strict `>` keeps the lowest.
                for dr in 0..window {
                    for dq in 0..window {
                        let base = ((b * h + r * window + dr) * w + q * window + dq) * c;
                        let row = &x[base..base + c];
                        let first = dr == 0 && dq == 0;
                        for ch in 0..c {
                            if first || row[ch] > best[ch] {
                                best[ch] = row[ch];
                                arg[ch] = base + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    let shape = if input.rank() == 3 {
        vec![ho, wo, c]
    } else {
        vec![batch, ho, wo, c]
    };
    Ok((Tensor::new(&shape, out)?, argmax))
}

/// Scatters `grad_out` to the recorded argmax positions of a max reduction.
pub fn scatter_argmax<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        gd[idx] = gd[idx] + v;
    }
    g
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

/// Whether batch norm uses the current batch statistics or stored ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Inference,
}

/// Per-channel statistics of a batch norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch mean per channel (train mode) or the stored running mean.
    pub mean: Vec<f64>,
    /// Biased batch variance per channel (train mode) or the stored running
    /// variance.
    pub var: Vec<f64>,
}

/// Batch normalization over every axis except the last (channel) axis.
///
/// For an SE(2,N) image `[B, H, W, N, C]` the statistics therefore pool over
/// batch, both spatial axes and the orientation axis.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    epsilon: f64,
    mode: BatchNormMode,
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = *input
        .shape()
        .last()
        .ok_or_else(|| shape_err("batch norm needs a channel axis"))?;
    if scale.len() != c || shift.len() != c {
        return Err(shape_err(format!(
            "batch norm over {c} channels got scale {:?} shift {:?}",
            scale.shape(),
            shift.shape()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("batch norm epsilon must be positive".into()));
    }
    let x = input.data();
    let m = x.len() / c.max(1);
    let (mean, var) = match mode {
        BatchNormMode::Train => {
            if m == 0 {
                return Err(shape_err("batch norm over an empty batch"));
            }
            let mut mean = vec![0.0f64; c];
            for row in x.chunks_exact(c) {
                for (acc, &v) in mean.iter_mut().zip(row) {
                    *acc += v.to_f64_lossy();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            let mut var = vec![0.0f64; c];
            for row in x.chunks_exact(c) {
                for ((acc, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v.to_f64_lossy() - mu;
                    *acc += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            (mean, var)
        }
        BatchNormMode::Inference => {
            if running_mean.len() != c || running_var.len() != c {
                return Err(shape_err("running statistics length"));
            }
            (running_mean.to_vec(), running_var.to_vec())
        }
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::from_f64_lossy(1.0 / (v + epsilon).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64_lossy(v)).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    let (s, b) = (scale.data(), shift.data());
    for row in x.chunks_exact(c) {
        for ch in 0..c {
            let xh = (row[ch] - mean_t[ch]) * inv_std[ch];
            xhat.push(xh);
            out.push(s[ch] * xh + b[ch]);
        }
    }
    let out = Tensor::new(input.shape(), out)?;
    out.ensure_finite("batch_norm")?;
    Ok((
        out,
        BatchNormCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Gradients of [`batch_norm`] for input, scale and shift.
pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
    mode: BatchNormMode,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = scale.len();
    let g = grad_out.data();
    let m = g.len() / c.max(1);
    let mut dscale = vec![0.0f64; c];
    let mut dshift = vec![0.0f64; c];
    for (grow, xrow) in g.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            dshift[ch] += grow[ch].to_f64_lossy();
            dscale[ch] += (grow[ch] * xrow[ch]).to_f64_lossy();
        }
    }
    let s = scale.data();
    let dx: Vec<T> = match mode {
        BatchNormMode::Inference => g
            .chunks_exact(c)
            .flat_map(|row| (0..c).map(move |ch| row[ch] * s[ch] * cache.inv_std[ch]))
            .collect(),
        BatchNormMode::Train => {
            let mf = m as f64;
            let mean_g: Vec<T> = dshift.iter().map(|&v| T::from_f64_lossy(v / mf)).collect();
            let mean_gx: Vec<T> = dscale.iter().map(|&v| T::from_f64_lossy(v / mf)).collect();
            g.chunks_exact(c)
                .zip(cache.xhat.chunks_exact(c))
                .flat_map(|(row, xrow)| {
                    let mean_g = &mean_g;
                    let mean_gx = &mean_gx;
                    (0..c).map(move |ch| {
                        s[ch] * cache.inv_std[ch] * (row[ch] - mean_g[ch] - xrow[ch] * mean_gx[ch])
                    })
                })
                .collect()
        }
    };
    let to_t = |v: Vec<f64>| {
        Tensor::new(&[c], v.into_iter().map(T::from_f64_lossy).collect()).expect("channel vector")
    };
    (
        Tensor::new(grad_out.shape(), dx).expect("same shape"),
        to_t(dscale),
        to_t(dshift),
    )
}

fn check_labels<T: Scalar>(labels: &Tensor<T>) -> Result<()> {
    for &y in labels.data() {
        if y != T::zero() && y != T::one() {
            return Err(Error::InvalidLabel(y.to_f64_lossy()));
        }
    }
    Ok(())
}

/// Mean binary cross-entropy of logits, `softplus(z) - y·z` per element.
pub fn logistic_loss<T: Scalar>(logit: &Tensor<T>, label: &Tensor<T>) -> Result<T> {
    if logit.shape() != label.shape() {
        return Err(shape_err(format!(
            "logits {:?} vs labels {:?}",
            logit.shape(),
            label.shape()
        )));
    }
    if logit.is_empty() {
        return Err(shape_err("logistic loss over zero elements"));
    }
    check_labels(label)?;
    let mut total = 0.0f64;
    for (&z, &y) in logit.data().iter().zip(label.data()) {
        let z = z.to_f64_lossy();
        let y = y.to_f64_lossy();
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    let loss = T::from_f64_lossy(total / logit.len() as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite("logistic_loss"));
    }
    Ok(loss)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logistic_loss_backward<T: Scalar>(logit: &Tensor<T>, label: &Tensor<T>, grad_out: T) -> Tensor<T> {
    let inv = 1.0 / logit.len() as f64;
    let g = grad_out.to_f64_lossy();
    let data = logit
        .data()
        .iter()
        .zip(label.data())
        .map(|(&z, &y)| T::from_f64_lossy((sigmoid(z.to_f64_lossy()) - y.to_f64_lossy()) * inv * g))
        .collect();
    Tensor::new(logit.shape(), data).expect("same shape")
}

/// Maximum over the second-to-last (orientation) axis of `[..., N, C]`.
pub fn project_max<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let rank = input.rank();
    if rank < 2 {
        return Err(shape_err("projection needs [..., N, C]"));
    }
    let (n, c) = (input.shape()[rank - 2], input.shape()[rank - 1]);
    if n == 0 {
        return Err(shape_err("projection over zero orientations"));
    }
    let x = input.data();
    let outer = x.len() / (n * c).max(1);
    let mut out = Vec::with_capacity(outer * c);
    let mut argmax = Vec::with_capacity(outer * c);
    for o in 0..outer {
        for ch in 0..c {
            let mut best = o * n * c + ch;
            for i in 1..n {
                let idx = (o * n + i) * c + ch;
                if x[idx] > x[best] {
                    best = idx;
                }
            }
            out.push(x[best]);
            argmax.push(best);
        }
    }
    let mut shape = input.shape()[..rank - 2].to_vec();
    shape.push(c);
    Ok((Tensor::new(&shape, out)?, argmax))
}

/// Mean over the orientation axis; the ablation alternative to [`project_max`].
pub fn project_mean<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let rank = input.rank();
    if rank < 2 {
        return Err(shape_err("projection needs [..., N, C]"));
    }
    let (n, c) = (input.shape()[rank - 2], input.shape()[rank - 1]);
    let x = input.data();
    let outer = x.len() / (n * c).max(1);
    let inv = T::from_f64_lossy(1.0 / n as f64);
    let mut out = vec![T::zero(); outer * c];
    for o in 0..outer {
        for i in 0..n {
            for ch in 0..c {
                out[o * c + ch] = out[o * c + ch] + x[(o * n + i) * c + ch];
            }
        }
    }
    out.iter_mut().for_each(|v| *v = *v * inv);
    let mut shape = input.shape()[..rank - 2].to_vec();
    shape.push(c);
    Tensor::new(&shape, out)
}

pub fn project_mean_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let rank = input_shape.len();
    let (n, c) = (input_shape[rank - 2], input_shape[rank - 1]);
    let inv = T::from_f64_lossy(1.0 / n as f64);
    let g = grad_out.data();
    Tensor::from_fn(input_shape, |idx| {
        let ch = idx % c;
        let o = idx / (n * c);
        g[o * c + ch] * inv
    })
}

/// Maximum over both spatial axes of `[B, H, W, C]`, giving `[B, C]`.
pub fn global_max_pool<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (batch, h, w, c) = spatial_dims(input.shape())?;
    let x = input.data();
    let mut out = Vec::with_capacity(batch * c);
    let mut argmax = Vec::with_capacity(batch * c);
    for b in 0..batch {
        for ch in 0..c {
            let mut best = b * h * w * c + ch;
            for p in 1..h * w {
                let idx = (b * h * w + p) * c + ch;
                if x[idx] > x[best] {
                    best = idx;
                }
            }
            out.push(x[best]);
            argmax.push(best);
        }
    }
    Ok((Tensor::new(&[batch, c], out)?, argmax))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn valid_correlation_of_three_by_three() {
        let input = t(&[3, 3, 1], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let kernel = t(&[2, 2, 1, 1], &[1., 0., 0., 1.]);
        let out = correlate2d(&input, &kernel, Padding::Valid, 1).unwrap();
        assert_eq!(out.shape(), &[2, 2, 1]);
        assert_eq!(out.data(), &[6., 8., 12., 14.]);
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let input = Tensor::from_fn(&[2, 4, 4, 1], |i| i as f64 - 7.0);
        let kernel = t(&[1, 1, 1, 1], &[2.0]);
        let out = correlate2d(&input, &kernel, Padding::SameZero, 1).unwrap();
        let expect = input.map(|v| 2.0 * v);
        assert_eq!(out, expect);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let input = Tensor::<f32>::zeros(&[5, 5, 2]);
        let kernel = Tensor::from_fn(&[3, 3, 2, 4], |i| i as f32 * 0.1 - 1.0);
        let out = correlate2d(&input, &kernel, Padding::SameZero, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strided_same_correlation_samples_every_other_pixel() {
        let input = Tensor::from_fn(&[4, 4, 1], |i| i as f64);
        let kernel = t(&[1, 1, 1, 1], &[1.0]);
        let out = correlate2d(&input, &kernel, Padding::SameZero, 2).unwrap();
        assert_eq!(out.shape(), &[2, 2, 1]);
        assert_eq!(out.data(), &[0., 2., 8., 10.]);
    }

    #[test]
    fn correlation_shape_errors() {
        let input = Tensor::<f64>::zeros(&[3, 3, 2]);
        assert!(correlate2d(&input, &Tensor::zeros(&[3, 3, 1, 1]), Padding::Valid, 1).is_err());
        assert!(correlate2d(&input, &Tensor::zeros(&[5, 5, 2, 1]), Padding::Valid, 1).is_err());
        assert!(correlate2d(&input, &Tensor::zeros(&[3, 3, 2, 1]), Padding::Valid, 0).is_err());
        let mut bad = Tensor::<f64>::zeros(&[3, 3, 1]);
        bad.data_mut()[4] = f64::NAN;
        assert!(matches!(
            correlate2d(&bad, &Tensor::zeros(&[1, 1, 1, 1]), Padding::Valid, 1),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn max_pool_examples() {
        let (out, arg) = max_pool2d(&t(&[2, 2, 1], &[1., 2., 3., 4.]), 2).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let (out, _) = max_pool2d(&Tensor::<f64>::full(&[4, 6, 2], 1.5), 2).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2]);
        assert!(out.data().iter().all(|&v| v == 1.5));
        assert!(max_pool2d(&Tensor::<f64>::zeros(&[3, 4, 1]), 2).is_err());
    }

    #[test]
    fn max_pool_ties_pick_lowest_index() {
        let (_, arg) = max_pool2d(&t(&[2, 2, 1], &[5., 5., 5., 5.]), 2).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
        assert!(relu(&t(&[2], &[-3., -0.5])).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_standardizes() {
        let x = t(&[4, 1], &[-1.5, -0.5, 0.5, 1.5]);
        let mean = 0.0;
        let var = (2.25 + 0.25 + 0.25 + 2.25) / 4.0;
        let x = x.map(|v| (v - mean) / f64::sqrt(var));
        let (y, _) = batch_norm(
            &x,
            &t(&[1], &[1.0]),
            &t(&[1], &[0.0]),
            1e-12,
            BatchNormMode::Train,
            &[],
            &[],
        )
        .unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-9);
    }

    #[test]
    fn batch_norm_constant_channel_gives_shift() {
        let x = Tensor::<f64>::full(&[2, 3, 3, 2], 4.0);
        let (y, _) = batch_norm(
            &x,
            &t(&[2], &[2.0, 3.0]),
            &t(&[2], &[0.25, -1.0]),
            1e-5,
            BatchNormMode::Train,
            &[],
            &[],
        )
        .unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.25, -1.0]);
        }
    }

    #[test]
    fn batch_norm_inference_uses_running_stats() {
        let x = t(&[2, 1], &[3.0, 5.0]);
        let (y, _) = batch_norm(
            &x,
            &t(&[1], &[1.0]),
            &t(&[1], &[0.0]),
            1e-12,
            BatchNormMode::Inference,
            &[1.0],
            &[4.0],
        )
        .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn logistic_loss_examples() {
        let l = logistic_loss(&t(&[2], &[0.0, 0.0]), &t(&[2], &[0.0, 1.0])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = logistic_loss(&t(&[1], &[1.0]), &t(&[1], &[1.0])).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.31326).abs() < 1e-5);
        let l = logistic_loss(&t(&[1], &[800.0]), &t(&[1], &[1.0])).unwrap();
        assert!(l < 1e-300);
        assert!(matches!(
            logistic_loss(&t(&[1], &[0.0]), &t(&[1], &[0.5])),
            Err(Error::InvalidLabel(_))
        ));
        assert!(logistic_loss(&t(&[2], &[0.0, 0.0]), &t(&[1], &[1.0])).is_err());
    }

    #[test]
    fn projection_examples() {
        let f = t(&[1, 1, 2, 1], &[1.0, 3.0]);
        let (p, arg) = project_max(&f).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1]);
        assert_eq!(p.data(), &[3.0]);
        assert_eq!(arg, vec![1]);
        let (_, arg) = project_max(&t(&[1, 3, 1], &[2.0, 2.0, 2.0])).unwrap();
        assert_eq!(arg, vec![0]);
        let m = project_mean(&f).unwrap();
        assert_eq!(m.data(), &[2.0]);
    }

    #[test]
    fn global_max_pool_picks_maximum() {
        let x = t(&[1, 2, 2, 1], &[0.5, 4.0, -1.0, 4.0]);
        let (y, arg) = global_max_pool(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![1]);
    }

    fn naive_correlate(x: &Tensor<f64>, k: &Tensor<f64>, padding: Padding, stride: usize) -> Tensor<f64> {
        let [b, h, w, cin] = *x.shape() else { panic!() };
        let [n, _, _, cout] = *k.shape() else { panic!() };
        let (ho, wo, pad) = match padding {
            Padding::SameZero => (h.div_ceil(stride), w.div_ceil(stride), (n - 1) / 2),
            Padding::Valid => ((h - n) / stride + 1, (w - n) / stride + 1, 0),
        };
        let mut out = Tensor::zeros(&[b, ho, wo, cout]);
        for bi in 0..b {
            for r in 0..ho {
                for q in 0..wo {
                    for o in 0..cout {
                        let mut acc = 0.0;
                        for a in 0..n {
                            for c in 0..n {
                                let ir = (r * stride + a) as isize - pad as isize;
                                let iq = (q * stride + c) as isize - pad as isize;
                                if ir < 0 || iq < 0 || ir >= h as isize || iq >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += k.get(&[a, c, ci, o]) * x.get(&[bi, ir as usize, iq as usize, ci]);
                                }
                            }
                        }
                        out.set(&[bi, r, q, o], acc);
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    const CASES: [([usize; 4], usize, usize, usize, Padding); 6] = [
        ([2, 7, 9, 3], 3, 4, 1, Padding::SameZero),
        ([1, 6, 6, 2], 5, 3, 1, Padding::SameZero),
        ([1, 3, 4, 2], 5, 2, 1, Padding::SameZero),
        ([2, 7, 8, 2], 3, 5, 2, Padding::SameZero),
        ([1, 7, 6, 2], 3, 3, 1, Padding::Valid),
        ([1, 9, 8, 1], 3, 2, 2, Padding::Valid),
    ];

    #[test]
    fn correlation_matches_nested_loops() {
        for (i, (shape, n, cout, stride, padding)) in CASES.into_iter().enumerate() {
            let x = pseudo(&shape, i as u64);
            let k = pseudo(&[n, n, shape[3], cout], 100 + i as u64);
            let fast = correlate2d(&x, &k, padding, stride).unwrap();
            let slow = naive_correlate(&x, &k, padding, stride);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "case {i}");
        }
    }

    #[test]
    fn correlation_backward_is_adjoint() {
        for (i, (shape, n, cout, stride, padding)) in CASES.into_iter().enumerate() {
            let x = pseudo(&shape, i as u64);
            let k = pseudo(&[n, n, shape[3], cout], 100 + i as u64);
            let y = naive_correlate(&x, &k, padding, stride);
            let gy = pseudo(y.shape(), 200 + i as u64);
            let (gx, gk) = correlate2d_backward(&x, &k, &gy, padding, stride).unwrap();
            // <gy, corr(x, k)> is bilinear, so <gx, x> and <gk, k> both equal it.
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
            let total = dot(&gy, &y);
            assert!((dot(&gx, &x) - total).abs() < 1e-10, "input grad, case {i}");
            assert!((dot(&gk, &k) - total).abs() < 1e-10, "kernel grad, case {i}");
            // Per-entry check of the input gradient against unit perturbations.
            for j in (0..x.len()).step_by(7) {
                let mut e = Tensor::zeros(x.shape());
                e.data_mut()[j] = 1.0;
                let expect = dot(&gy, &naive_correlate(&e, &k, padding, stride));
                assert!((gx.data()[j] - expect).abs() < 1e-12, "case {i} entry {j}");
            }
        }
    }
}
