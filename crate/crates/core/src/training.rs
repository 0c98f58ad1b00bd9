//! Training loop, dihedral augmentation and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::{LabelKind, LabeledPatchSet};
use crate::error::{Error, Result};
use crate::metrics::{self, Confusion};
use crate::network::Model;
use crate::ops::{sigmoid, BatchNormMode};
use crate::optim::SgdMomentum;
use crate::tensor::{Scalar, Tensor};

/// Training-time input augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Augmentation {
    #[default]
    None,
    /// Identity or transpose, chosen per sample.
    Transpose,
    /// Any of the eight quarter-turn and transpose combinations.
    TransposeRot90,
}

impl Augmentation {
    /// Number of [`dihedral_variant`] indices sampled from.
    pub fn variants(self) -> usize {
        match self {
            Augmentation::None => 1,
            Augmentation::Transpose => 2,
            Augmentation::TransposeRot90 => 8,
        }
    }

    /// Maps a draw in `0..variants()` to a [`dihedral_variant`] index.
    fn variant(self, draw: usize) -> usize {
        match self {
            Augmentation::Transpose => draw * 4,
            _ => draw,
        }
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Augmentation::None => "none",
            Augmentation::Transpose => "transpose",
            Augmentation::TransposeRot90 => "rot90",
        })
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augmentation::None),
            "transpose" => Ok(Augmentation::Transpose),
            "rot90" | "transpose+rot90" => Ok(Augmentation::TransposeRot90),
            other => Err(Error::InvalidArgument(format!(
                "unknown augmentation `{other}` (none, transpose, rot90)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub augmentation: Augmentation,
    pub seed: u64,
    /// Loss is recorded every `log_every` iterations and at the last one.
    pub log_every: usize,
    /// Re-estimate batch norm running statistics over the training set with
    /// the final weights.
    pub recalibrate: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            iterations: 2000,
            augmentation: Augmentation::None,
            seed: 0,
            log_every: 50,
            recalibrate: true,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::InvalidArgument("batch size and log interval must be positive".into()));
        }
        Ok(())
    }
}

/// Loss of the training batch at one iteration (1-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
}

impl TrainReport {
    /// One `iteration=<i> loss=<l>` line per record.
    pub fn log_lines(&self) -> String {
        self.losses
            .iter()
            .map(|r| format!("iteration={} loss={:.9e}\n", r.iteration, r.loss))
            .collect()
    }
}

fn square_dims(shape: &[usize]) -> Result<(usize, usize)> {
    let [h, w, c] = *shape else {
        return Err(Error::Shape(format!("expected [H,W,C], got {shape:?}")));
    };
    if h != w {
        return Err(Error::Shape(format!("augmentation needs square patches, got {h}x{w}")));
    }
    Ok((h, c))
}

/// Element `v` of the dihedral group acting on a square `[H, W, C]` image:
/// `v % 4` counterclockwise quarter turns, preceded by a transpose when
/// `v >= 4`.
pub fn dihedral_variant<T: Scalar>(image: &Tensor<T>, v: usize) -> Result<Tensor<T>> {
    let (n, c) = square_dims(image.shape())?;
    let src = image.data();
    let mut out = vec![T::zero(); src.len()];
    let last = n - 1;
    for r in 0..n {
        for q in 0..n {
            // Source pixel of output (r, q): undo the rotation, then the transpose.
            let (mut sr, mut sq) = (r, q);
            for _ in 0..v % 4 {
                (sr, sq) = (sq, last - sr);
            }
            if v >= 4 {
                (sr, sq) = (sq, sr);
            }
            let d = (r * n + q) * c;
            let s = (sr * n + sq) * c;
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Tensor::new(image.shape(), out)
}

/// Inverse element of [`dihedral_variant`]: the index `u` with
/// `dihedral_variant(dihedral_variant(x, v), u) == x`.
pub fn dihedral_inverse(v: usize) -> usize {
    if v >= 4 {
        v
    } else {
        (4 - v) % 4
    }
}

pub fn transpose_image<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    dihedral_variant(image, 4)
}

/// Rotates a square image counterclockwise by `quarter_turns · 90°`.
pub fn rot90_image<T: Scalar>(image: &Tensor<T>, quarter_turns: usize) -> Result<Tensor<T>> {
    dihedral_variant(image, quarter_turns % 4)
}

fn map_batch<T: Scalar>(batch: &Tensor<T>, variants: &[usize]) -> Result<Tensor<T>> {
    if batch.rank() != 4 {
        return Err(Error::Shape(format!("expected [B,H,W,C], got {:?}", batch.shape())));
    }
    let b = batch.shape()[0];
    let mut items = Vec::with_capacity(b * variants.len());
    for &v in variants {
        for i in 0..b {
            items.push(dihedral_variant(&batch.index_axis0(i), v)?);
        }
    }
    Tensor::stack(&items)
}

/// `[B, H, W, C]` to `[2B, H, W, C]`: the batch followed by its transposes.
pub fn augment_transpose<T: Scalar>(batch: &Tensor<T>) -> Result<Tensor<T>> {
    map_batch(batch, &[0, 4])
}

/// `[B, H, W, C]` to `[8B, H, W, C]`: all quarter turns, each with and
/// without transpose, grouped by variant.
pub fn augment_rot90<T: Scalar>(batch: &Tensor<T>) -> Result<Tensor<T>> {
    map_batch(batch, &[0, 1, 2, 3, 4, 5, 6, 7])
}

fn assemble_batch<T: Scalar>(
    data: &LabeledPatchSet,
    indices: &[usize],
    variants: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut xs = Vec::with_capacity(indices.len());
    let mut ys = Vec::with_capacity(indices.len());
    for (&i, &v) in indices.iter().zip(variants) {
        xs.push(dihedral_variant(&data.patches.index_axis0(i).cast::<T>(), v)?);
        let y = data.labels.index_axis0(i).cast::<T>();
        ys.push(match data.label_kind() {
            LabelKind::Patch => y,
            LabelKind::Pixel => dihedral_variant(&y, v)?,
        });
    }
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
}

/// Minibatch SGD with momentum on the logistic loss.
///
/// Batches are drawn from per-epoch shuffles seeded by `settings.seed`;
/// the result depends only on the seed and the data.
pub fn train<T: Scalar>(model: &mut Model<T>, data: &LabeledPatchSet, settings: &TrainSettings) -> Result<TrainReport> {
    settings.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if settings.augmentation != Augmentation::None {
        square_dims(&data.patches.shape()[1..])?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut opt = SgdMomentum::<T>::new(settings.learning_rate, settings.momentum)?;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut report = TrainReport::default();
    for it in 1..=settings.iterations {
        let mut indices = Vec::with_capacity(settings.batch_size);
        while indices.len() < settings.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }
        let variants: Vec<usize> = (0..indices.len())
            .map(|_| settings.augmentation.variant(rng.gen_range(0..settings.augmentation.variants())))
            .collect();
        let (x, y) = assemble_batch::<T>(data, &indices, &variants)?;

        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Diverged {
                iteration: it,
                loss: f64::NAN,
            },
            other => other,
        };
        let mut graph = Graph::new();
        let input = graph.constant(x);
        let pass = model.forward_graph(&mut graph, input, BatchNormMode::Train).map_err(diverged)?;
        let loss_node = graph.logistic_loss(pass.logits, &y).map_err(diverged)?;
        let loss = graph.value(loss_node).data()[0].to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it, loss });
        }
        let grads = graph.backward(loss_node).map_err(diverged)?;
        let grad_refs = pass
            .params
            .iter()
            .map(|&p| grads.expect(p))
            .collect::<Result<Vec<_>>>()?;
        model.update_running_stats(&graph, &pass);
        opt.step(&mut model.params_mut(), &grad_refs)?;

        if it % settings.log_every == 0 || it == settings.iterations {
            log::info!("iteration {it}: loss {loss:.6}");
            report.losses.push(LossRecord { iteration: it, loss });
        }
    }
    if settings.recalibrate && settings.iterations > 0 {
        recalibrate_batch_norm(model, data, settings.batch_size)?;
    }
    Ok(report)
}

/// Replaces the batch norm running statistics with population statistics of
/// `data` under the current weights: train-mode forward passes over
/// consecutive batches, pooled as `mean = E[μ_b]`, `var = E[σ²_b + μ_b²] − mean²`
/// with batches weighted by size.
pub fn recalibrate_batch_norm<T: Scalar>(model: &mut Model<T>, data: &LabeledPatchSet, batch_size: usize) -> Result<()> {
    if batch_size == 0 || data.is_empty() {
        return Err(Error::InvalidArgument("recalibration needs data and a positive batch size".into()));
    }
    let layers = model.norms().len();
    let mut sum_mean: Vec<Vec<f64>> = model.norms().iter().map(|bn| vec![0.0; bn.running_mean.len()]).collect();
    let mut sum_sq = sum_mean.clone();
    let mut total = 0.0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch_size).min(data.len());
        let items: Vec<_> = (start..end).map(|i| data.patches.index_axis0(i).cast::<T>()).collect();
        let mut graph = Graph::new();
        let input = graph.constant(Tensor::stack(&items)?);
        let pass = model.forward_graph(&mut graph, input, BatchNormMode::Train)?;
        let weight = (end - start) as f64;
        for l in 0..layers {
            let (mean, var) = graph
                .batch_norm_stats(pass.norms[l])
                .ok_or_else(|| Error::InvalidArgument("missing batch norm statistics".into()))?;
            for (c, (&m, &v)) in mean.iter().zip(var).enumerate() {
                sum_mean[l][c] += weight * m;
                sum_sq[l][c] += weight * (v + m * m);
            }
        }
        total += weight;
        start = end;
    }
    for (l, bn) in model.norms_mut().iter_mut().enumerate() {
        for c in 0..bn.running_mean.len() {
            let mean = sum_mean[l][c] / total;
            bn.running_mean[c] = mean;
            bn.running_var[c] = (sum_sq[l][c] / total - mean * mean).max(0.0);
        }
    }
    Ok(())
}

/// Inference-mode probabilities for `patches` (`[B, H, W, C]`), flattened in
/// output order: one per patch for a global head, one per output pixel for a
/// per-pixel head.
///
/// With `tta`, probabilities are averaged over the input and its transpose,
/// mapping per-pixel outputs back before averaging.
pub fn predict_probs<T: Scalar>(
    model: &Model<T>,
    patches: &Tensor<f32>,
    batch_size: usize,
    tta: bool,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let b = patches.shape().first().copied().unwrap_or(0);
    let mut out = Vec::new();
    let mut start = 0;
    while start < b {
        let end = (start + batch_size).min(b);
        let items: Vec<_> = (start..end).map(|i| patches.index_axis0(i).cast::<T>()).collect();
        let x = Tensor::stack(&items)?;
        let logits = model.forward(&x)?;
        let mut probs: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z.to_f64_lossy())).collect();
        if tta {
            let xt = map_batch(&x, &[4])?;
            let mut lt = model.forward(&xt)?;
            if lt.rank() == 4 {
                lt = map_batch(&lt, &[4])?;
            }
            for (p, &z) in probs.iter_mut().zip(lt.data()) {
                *p = 0.5 * (*p + sigmoid(z.to_f64_lossy()));
            }
        }
        out.extend(probs);
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1: f64,
    /// `None` when the evaluated set has a single class.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationMetrics {
    pub pixel_accuracy: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    /// Best mean Rand index over the threshold sweep.
    pub rand: f64,
    pub rand_threshold: f64,
}

/// Patch-level metrics at threshold 0.5.
pub fn evaluate_classification<T: Scalar>(
    model: &Model<T>,
    data: &LabeledPatchSet,
    batch_size: usize,
    tta: bool,
) -> Result<ClassificationMetrics> {
    if data.label_kind() != LabelKind::Patch {
        return Err(Error::InvalidArgument("classification needs per-patch labels".into()));
    }
    let probs = predict_probs(model, &data.patches, batch_size, tta)?;
    let truth: Vec<bool> = data.labels.data().iter().map(|&v| v == 1.0).collect();
    if probs.len() != truth.len() {
        return Err(Error::Shape(format!(
            "model emits {} outputs for {} labels; use a global head",
            probs.len(),
            truth.len()
        )));
    }
    let c = Confusion::from_scores(&probs, &truth, 0.5)?;
    Ok(ClassificationMetrics {
        accuracy: c.accuracy(),
        f1: c.f1(),
        auc: metrics::roc_auc(&probs, &truth).ok(),
    })
}

/// Pixel-level metrics at threshold 0.5 and the Rand index sweep over
/// 4-connected components.
pub fn evaluate_segmentation<T: Scalar>(
    model: &Model<T>,
    data: &LabeledPatchSet,
    batch_size: usize,
    tta: bool,
) -> Result<SegmentationMetrics> {
    let [b, h, w, _] = *data.labels.shape() else {
        return Err(Error::InvalidArgument("segmentation needs per-pixel labels".into()));
    };
    let probs = predict_probs(model, &data.patches, batch_size, tta)?;
    if probs.len() != data.labels.len() {
        return Err(Error::Shape(format!(
            "model emits {} outputs for {} pixel labels; use a per-pixel head without pooling",
            probs.len(),
            data.labels.len()
        )));
    }
    let truth: Vec<bool> = data.labels.data().iter().map(|&v| v == 1.0).collect();
    let c = Confusion::from_scores(&probs, &truth, 0.5)?;
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for t in metrics::rand_thresholds() {
        let mut total = 0.0;
        for i in 0..b {
            let span = i * h * w..(i + 1) * h * w;
            let pred: Vec<bool> = probs[span.clone()].iter().map(|&p| p >= t).collect();
            let a = metrics::connected_components(&pred, h, w)?;
            let r = metrics::connected_components(&truth[span], h, w)?;
            total += metrics::rand_index(&a, &r)?;
        }
        let mean = total / b as f64;
        if mean > best.1 {
            best = (t, mean);
        }
    }
    Ok(SegmentationMetrics {
        pixel_accuracy: c.accuracy(),
        f1: c.f1(),
        auc: metrics::roc_auc(&probs, &truth).ok(),
        rand: best.1,
        rand_threshold: best.0,
    })
}
