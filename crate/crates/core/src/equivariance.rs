//! Executable covariance and invariance checks for the layers and the full
//! chain, plus a finite-difference audit of every analytic gradient.
//!
//! Covariance errors are relative L2 norms over an interior disk: pixels
//! whose distance from the image center is at most
//! `(min(H, W) − 1) / 2 − margin − |t|`, where `t` is the translation.
//! Zero padding breaks covariance near the border, so the margin should be
//! the receptive radius of whatever sits between input and output.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Graph, NodeId};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{apply_l, apply_u, DiscreteGroupElement, GridFrame, OrientationSampling};
use crate::kernel_rotation::RotationOperator;
use crate::layers::{self, GroupKernelSet, LiftingKernelSet, Projection, SE2Image};
use crate::network::{Head, Model, NetworkConfig};
use crate::ops::{BatchNormMode, Padding};
use crate::tensor::{Scalar, Tensor};

/// Relative error allowed when the rotation maps the grid onto itself.
pub const GRID_EXACT_TOLERANCE: f64 = 1e-5;
/// Relative error allowed for rotations that need interpolation.
pub const INTERPOLATED_TOLERANCE: f64 = 5e-2;
/// Relative error allowed in the gradient audit.
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
/// Finite-difference step of the gradient audit.
pub const GRADIENT_EPSILON: f64 = 1e-5;
/// Gradient entries at most this large on both sides are not compared.
pub const GRADIENT_FLOOR: f64 = 1e-8;
/// Divisors of the step tried in turn when a probe crosses a kink.
const REFINED_STEPS: [f64; 3] = [1.0, 10.0, 100.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exactness {
    GridExact,
    Interpolated,
}

impl Exactness {
    pub fn of(g: &DiscreteGroupElement, sampling: OrientationSampling) -> Self {
        if g.is_grid_exact(sampling) {
            Exactness::GridExact
        } else {
            Exactness::Interpolated
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Exactness::GridExact => GRID_EXACT_TOLERANCE,
            Exactness::Interpolated => INTERPOLATED_TOLERANCE,
        }
    }
}

impl fmt::Display for Exactness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Exactness::GridExact => "grid-exact",
            Exactness::Interpolated => "interpolated",
        })
    }
}

/// Outcome of one covariance or invariance check.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivarianceReport {
    pub transformation: DiscreteGroupElement,
    pub name: String,
    /// Interior margin in pixels of the compared output.
    pub margin: usize,
    pub abs_error: f64,
    pub rel_error: f64,
    pub exactness: Exactness,
}

impl EquivarianceReport {
    pub fn tolerance(&self) -> f64 {
        self.exactness.tolerance()
    }

    pub fn passed(&self) -> bool {
        self.rel_error <= self.tolerance()
    }

    /// One `key=value` line for machine consumption.
    pub fn key_values(&self) -> String {
        format!(
            "check={} tx={} ty={} orientation={} margin={} abs_error={:.3e} rel_error={:.3e} class={} pass={}",
            self.name,
            self.transformation.x[0],
            self.transformation.x[1],
            self.transformation.orientation,
            self.margin,
            self.abs_error,
            self.rel_error,
            self.exactness,
            self.passed()
        )
    }
}

impl fmt::Display for EquivarianceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<12} t=({:>2},{:>2}) i={:<2} margin={:<2} abs={:.2e} rel={:.2e} [{}] {}",
            self.name,
            self.transformation.x[0],
            self.transformation.x[1],
            self.transformation.orientation,
            self.margin,
            self.abs_error,
            self.rel_error,
            self.exactness,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn check_sampled(g: &DiscreteGroupElement, sampling: OrientationSampling) -> Result<()> {
    if g.orientation >= sampling.len() {
        return Err(Error::UnsampledAngle {
            angle: std::f64::consts::TAU * g.orientation as f64 / sampling.len() as f64,
            n: sampling.len(),
        });
    }
    Ok(())
}

/// `(absolute, relative)` L2 error of `got` against `want` over the interior
/// disk. Both tensors share a shape whose spatial axes sit at `spatial` and
/// `spatial + 1`.
pub fn interior_error<T: Scalar>(
    got: &Tensor<T>,
    want: &Tensor<T>,
    spatial: usize,
    margin: usize,
    translation: [i64; 2],
) -> Result<(f64, f64)> {
    if got.shape() != want.shape() {
        return Err(shape_err(format!("{:?} vs {:?}", got.shape(), want.shape())));
    }
    let shape = got.shape();
    if shape.len() < spatial + 2 {
        return Err(shape_err(format!("no spatial axes at {spatial} in {shape:?}")));
    }
    let (h, w) = (shape[spatial], shape[spatial + 1]);
    let outer: usize = shape[..spatial].iter().product();
    let inner: usize = shape[spatial + 2..].iter().product();
    let t = ((translation[0] * translation[0] + translation[1] * translation[1]) as f64).sqrt();
    let radius = (h.min(w) as f64 - 1.0) / 2.0 - margin as f64 - t;
    let frame = GridFrame::new(h, w);
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for r in 0..h {
        for c in 0..w {
            let p = frame.to_math(r as f64, c as f64);
            if (p[0] * p[0] + p[1] * p[1]).sqrt() > radius + 1e-9 {
                continue;
            }
            for o in 0..outer {
                let base = ((o * h + r) * w + c) * inner;
                for k in base..base + inner {
                    let (a, b) = (got.data()[k].to_f64_lossy(), want.data()[k].to_f64_lossy());
                    diff += (a - b) * (a - b);
                    norm += b * b;
                }
            }
        }
    }
    let abs = diff.sqrt();
    let rel = if norm > 0.0 {
        abs / norm.sqrt()
    } else if abs == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok((abs, rel))
}

fn image_spatial_axis(shape: &[usize], rank: usize) -> Result<usize> {
    match shape.len() {
        r if r == rank => Ok(0),
        r if r == rank + 1 => Ok(1),
        _ => Err(shape_err(format!("unexpected rank for {shape:?}"))),
    }
}

/// Compares `lift(U_g f)` with `L_g lift(f)`. `margin` defaults to the kernel
/// size.
pub fn lifting_covariance_error<T: Scalar>(
    f: &Tensor<T>,
    kernels: &LiftingKernelSet<T>,
    g: DiscreteGroupElement,
    margin: Option<usize>,
) -> Result<EquivarianceReport> {
    let sampling = kernels.operator().sampling();
    check_sampled(&g, sampling)?;
    let spatial = image_spatial_axis(f.shape(), 3)?;
    let ge = g.to_continuous(sampling);
    let lhs = layers::lift_correlate(&apply_u(&ge, f)?, kernels)?;
    let rhs = apply_l(&ge, layers::lift_correlate(f, kernels)?.tensor(), sampling)?;
    let margin = margin.unwrap_or(kernels.kernel_size());
    let (abs_error, rel_error) = interior_error(lhs.tensor(), &rhs, spatial, margin, g.x)?;
    Ok(EquivarianceReport {
        transformation: g,
        name: "lifting".into(),
        margin,
        abs_error,
        rel_error,
        exactness: Exactness::of(&g, sampling),
    })
}

/// Compares `gconv(L_g F)` with `L_g gconv(F)`. `margin` defaults to the
/// kernel size.
pub fn gconv_covariance_error<T: Scalar>(
    input: &SE2Image<T>,
    kernels: &GroupKernelSet<T>,
    g: DiscreteGroupElement,
    margin: Option<usize>,
) -> Result<EquivarianceReport> {
    let sampling = input.sampling();
    check_sampled(&g, sampling)?;
    let spatial = image_spatial_axis(input.tensor().shape(), 4)?;
    let ge = g.to_continuous(sampling);
    let moved = SE2Image::new(apply_l(&ge, input.tensor(), sampling)?, sampling)?;
    let lhs = layers::group_correlate(&moved, kernels)?;
    let rhs = apply_l(&ge, layers::group_correlate(input, kernels)?.tensor(), sampling)?;
    let margin = margin.unwrap_or(kernels.kernel_size());
    let (abs_error, rel_error) = interior_error(lhs.tensor(), &rhs, spatial, margin, g.x)?;
    Ok(EquivarianceReport {
        transformation: g,
        name: "group-conv".into(),
        margin,
        abs_error,
        rel_error,
        exactness: Exactness::of(&g, sampling),
    })
}

/// Compares `project(L_g F)` with `U_g project(F)`.
pub fn projection_covariance_error<T: Scalar>(
    input: &SE2Image<T>,
    mode: Projection,
    g: DiscreteGroupElement,
    margin: Option<usize>,
) -> Result<EquivarianceReport> {
    let sampling = input.sampling();
    check_sampled(&g, sampling)?;
    let spatial = image_spatial_axis(input.tensor().shape(), 4)?;
    let ge = g.to_continuous(sampling);
    let moved = SE2Image::new(apply_l(&ge, input.tensor(), sampling)?, sampling)?;
    let lhs = layers::project(&moved, mode)?;
    let rhs = apply_u(&ge, &layers::project(input, mode)?)?;
    let margin = margin.unwrap_or(1);
    let (abs_error, rel_error) = interior_error(&lhs, &rhs, spatial, margin, g.x)?;
    Ok(EquivarianceReport {
        transformation: g,
        name: "projection".into(),
        margin,
        abs_error,
        rel_error,
        exactness: Exactness::of(&g, sampling),
    })
}

/// Forwards `f` and `U_g f` through `model` in inference mode.
///
/// With a global max head the logits are compared directly (invariance);
/// with a per-pixel head the logit map of the rotated input is compared with
/// the rotated logit map over the interior, `margin` defaulting to the
/// receptive radius in output pixels. The translation must be divisible by
/// the pooling factor.
pub fn chain_invariance_check<T: Scalar>(
    model: &Model<T>,
    f: &Tensor<T>,
    g: DiscreteGroupElement,
    margin: Option<usize>,
) -> Result<EquivarianceReport> {
    let sampling = OrientationSampling::new(model.config().orientations)?;
    chain_invariance_check_in(model, f, g, sampling, margin)
}

/// [`chain_invariance_check`] with the orientation of `g` read against
/// `sampling` rather than the model's own, so that e.g. a quarter turn can be
/// applied to a model with fewer than four orientations.
pub fn chain_invariance_check_in<T: Scalar>(
    model: &Model<T>,
    f: &Tensor<T>,
    g: DiscreteGroupElement,
    sampling: OrientationSampling,
    margin: Option<usize>,
) -> Result<EquivarianceReport> {
    let config = model.config();
    let batch = match f.rank() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(f.shape());
            f.clone().reshape(&shape)?
        }
        4 => f.clone(),
        _ => return Err(shape_err(format!("chain input must be [H,W,C] or [B,H,W,C], got {:?}", f.shape()))),
    };
    let factor = config.pool_factor() as i64;
    if g.x.iter().any(|t| t % factor != 0) {
        return Err(Error::InvalidArgument(format!(
            "translation ({}, {}) is not divisible by the pooling factor {factor}",
            g.x[0], g.x[1]
        )));
    }
    // The chain is invariant under any rotation, so orientations beyond the
    // sampled set are valid inputs; they are classified by the grid.
    let angle = std::f64::consts::TAU * g.orientation as f64 / sampling.len() as f64;
    let ge = crate::geometry::GroupElement::new([g.x[0] as f64, g.x[1] as f64], angle);
    let lhs = model.forward(&apply_u(&ge, &batch)?)?;
    let rhs = model.forward(&batch)?;
    let exactness = Exactness::of(&g, sampling);
    let (margin, abs_error, rel_error) = match config.head {
        Head::GlobalMax => {
            let (a, r) = l2_error(&lhs, &rhs);
            (0, a, r)
        }
        Head::PerPixel => {
            let scaled = crate::geometry::GroupElement::new(
                [(g.x[0] / factor) as f64, (g.x[1] / factor) as f64],
                angle,
            );
            let rhs = apply_u(&scaled, &rhs)?;
            let margin = margin.unwrap_or_else(|| config.receptive_radius().div_ceil(factor as usize));
            let t = [g.x[0] / factor, g.x[1] / factor];
            let (a, r) = interior_error(&lhs, &rhs, 1, margin, t)?;
            (margin, a, r)
        }
    };
    Ok(EquivarianceReport {
        transformation: g,
        name: format!("chain-N{}", config.orientations),
        margin,
        abs_error,
        rel_error,
        exactness,
    })
}

fn l2_error<T: Scalar>(got: &Tensor<T>, want: &Tensor<T>) -> (f64, f64) {
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (&a, &b) in got.data().iter().zip(want.data()) {
        let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
        diff += (a - b) * (a - b);
        norm += b * b;
    }
    let abs = diff.sqrt();
    let rel = if norm > 0.0 { abs / norm.sqrt() } else if abs == 0.0 { 0.0 } else { f64::INFINITY };
    (abs, rel)
}

/// A band-limited test image `[H, W, C]`: a sum of `count` isotropic
/// Gaussians of width `sigma` with centers inside the central disk and
/// amplitudes in `[-1, 1]` per channel.
pub fn gaussian_blobs<T: Scalar>(h: usize, w: usize, c: usize, sigma: f64, count: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = GridFrame::new(h, w);
    let reach = (h.min(w) as f64 - 1.0) / 2.0 - 2.0 * sigma;
    let pos = Uniform::new_inclusive(-reach.max(0.0), reach.max(0.0));
    let amp = Uniform::new_inclusive(-1.0, 1.0);
    let blobs: Vec<([f64; 2], Vec<f64>)> = (0..count)
        .map(|_| {
            let center = [pos.sample(&mut rng), pos.sample(&mut rng)];
            (center, (0..c).map(|_| amp.sample(&mut rng)).collect())
        })
        .collect();
    let mut out = Tensor::zeros(&[h, w, c]);
    for r in 0..h {
        for q in 0..w {
            let p = frame.to_math(r as f64, q as f64);
            for (center, amps) in &blobs {
                let d2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                for (k, a) in amps.iter().enumerate() {
                    let i = (r * w + q) * c + k;
                    out.data_mut()[i] = out.data()[i] + T::from_f64_lossy(a * v);
                }
            }
        }
    }
    out
}

/// Band-limited base weights `[rows, |mask|]` for the mask of `op`: each
/// row is a random combination of `1, x, y` under a Gaussian window of
/// width `n / 5`, so its bilinear rotations stay close to exact rotations.
pub fn smooth_kernel_weights<T: Scalar>(op: &RotationOperator, rows: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = op.kernel_size();
    let frame = GridFrame::new(n, n);
    let s = n as f64 / 5.0;
    let basis: Vec<[f64; 3]> = op
        .mask()
        .positions()
        .iter()
        .map(|&(r, c)| {
            let [x, y] = frame.to_math(r as f64, c as f64);
            let env = (-(x * x + y * y) / (2.0 * s * s)).exp();
            [env, env * x / s, env * y / s]
        })
        .collect();
    let mut data = Vec::with_capacity(rows * basis.len());
    for _ in 0..rows {
        let coef: Vec<f64> = (0..3).map(|_| normal.sample(&mut rng)).collect();
        data.extend(basis.iter().map(|b| T::from_f64_lossy(b.iter().zip(&coef).map(|(u, v)| u * v).sum())));
    }
    Tensor::new(&[rows, basis.len()], data).expect("rows x mask")
}

/// Tensor of independent `N(0, 1)` draws.
pub fn random_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
}

/// What [`gradient_audit`] differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditTarget {
    Lifting,
    GroupConv,
    BatchNorm,
    Relu,
    MaxPool,
    /// Orientation max projection followed by the logistic loss.
    ProjectionLoss,
    ProjectionMean,
    /// 1×1 correlation, bias, global max and logistic loss.
    OutputHead,
    /// The six-layer chain with the tabulated widths for `N` orientations,
    /// one pooling stage, train-mode batch norm and the logistic loss.
    Chain { orientations: usize },
}

impl AuditTarget {
    /// Every layer type and the chain at each tabulated orientation count.
    pub fn all() -> Vec<AuditTarget> {
        let mut out = vec![
            AuditTarget::Lifting,
            AuditTarget::GroupConv,
            AuditTarget::BatchNorm,
            AuditTarget::Relu,
            AuditTarget::MaxPool,
            AuditTarget::ProjectionLoss,
            AuditTarget::ProjectionMean,
            AuditTarget::OutputHead,
        ];
        out.extend([1, 2, 4, 8, 16].map(|orientations| AuditTarget::Chain { orientations }));
        out
    }
}

impl fmt::Display for AuditTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuditTarget::Lifting => f.write_str("lifting"),
            AuditTarget::GroupConv => f.write_str("group-conv"),
            AuditTarget::BatchNorm => f.write_str("batch-norm"),
            AuditTarget::Relu => f.write_str("relu"),
            AuditTarget::MaxPool => f.write_str("max-pool"),
            AuditTarget::ProjectionLoss => f.write_str("projection+loss"),
            AuditTarget::ProjectionMean => f.write_str("projection-mean"),
            AuditTarget::OutputHead => f.write_str("output-head"),
            AuditTarget::Chain { orientations } => write!(f, "chain-N{orientations}"),
        }
    }
}

/// Audit outcome for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAudit {
    pub target: String,
    pub block: String,
    /// Coordinates compared against finite differences.
    pub checked: usize,
    /// Checked coordinates whose ±ε probe crossed a kink (a ReLU sign or a
    /// max selection changed) and that were re-probed with a smaller step.
    pub refined: usize,
    /// Coordinates within the smallest step of a kink; not compared.
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl BlockAudit {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < GRADIENT_TOLERANCE
    }
}

impl fmt::Display for BlockAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} {:<20} checked={:<4} refined={:<3} skipped={:<3} max_rel={:.2e} {}",
            self.target,
            self.block,
            self.checked,
            self.refined,
            self.skipped,
            self.max_rel_error,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// A recorded scalar loss with the nodes holding each audited block.
struct Evaluation {
    graph: Graph<f64>,
    loss: NodeId,
    blocks: Vec<NodeId>,
}

/// Compares the analytic gradient of every block with central differences.
///
/// At most `limit` coordinates per block are compared, drawn in a seeded
/// random order. A probe that changes the activation signature straddles a
/// kink; it is retried with smaller steps, and if every step straddles the
/// coordinate is skipped and replaced by the next one.
fn audit_blocks<F>(
    target: &str,
    names: &[String],
    values: &[Tensor<f64>],
    limit: Option<usize>,
    seed: u64,
    mut eval: F,
) -> Result<Vec<BlockAudit>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<Evaluation>,
{
    let base = eval(values)?;
    let signature = base.graph.activation_signature();
    let grads = base.graph.backward(base.loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = values.to_vec();
    let mut out = Vec::with_capacity(values.len());
    for (b, name) in names.iter().enumerate() {
        let analytic = grads.expect(base.blocks[b])?.clone();
        let mut order: Vec<usize> = (0..values[b].len()).collect();
        order.shuffle(&mut rng);
        let limit = limit.unwrap_or(order.len());
        let mut report = BlockAudit {
            target: target.to_string(),
            block: name.clone(),
            checked: 0,
            refined: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for i in order {
            if report.checked == limit {
                break;
            }
            let orig = values[b].data()[i];
            let mut side = |delta: f64| -> Result<(f64, u64)> {
                probe[b].data_mut()[i] = orig + delta;
                let e = eval(&probe)?;
                Ok((e.graph.value(e.loss).data()[0], e.graph.activation_signature()))
            };
            let mut smooth = None;
            for (k, step) in REFINED_STEPS.iter().map(|d| GRADIENT_EPSILON / d).enumerate() {
                let (plus, sig_plus) = side(step)?;
                let (minus, sig_minus) = side(-step)?;
                if sig_plus == signature && sig_minus == signature {
                    smooth = Some((plus, minus, step, k > 0));
                    break;
                }
            }
            probe[b].data_mut()[i] = orig;
            let Some((plus, minus, step, refined)) = smooth else {
                report.skipped += 1;
                continue;
            };
            report.refined += refined as usize;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let scale = a.abs().max(numeric.abs());
            if scale > GRADIENT_FLOOR {
                report.max_rel_error = report.max_rel_error.max((a - numeric).abs() / scale);
            }
            report.checked += 1;
        }
        out.push(report);
    }
    Ok(out)
}

/// Builds `Σ R ⊙ out` with a fixed random `R`.
fn weighted_sum(graph: &mut Graph<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let r = random_tensor::<f64>(graph.value(out).shape(), seed);
    let r = graph.constant(r);
    let prod = graph.mul(out, r)?;
    graph.sum(prod)
}

fn binary_labels(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coin = Uniform::new(0u8, 2u8);
    Tensor::from_fn(shape, |_| coin.sample(&mut rng) as f64)
}

/// Audits one layer type or the full chain in double precision.
///
/// Layers are small enough to check every coordinate; the chain checks up to
/// twelve coordinates per parameter block, plus the input image.
pub fn gradient_audit(target: AuditTarget, seed: u64) -> Result<Vec<BlockAudit>> {
    let name = target.to_string();
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let loss_seed = seed ^ 0x5eed;
    // Layer audits register each value as a parameter and feed them to `f`.
    let layer = |values: Vec<Tensor<f64>>,
                 block_names: Vec<String>,
                 f: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>|
     -> Result<Vec<BlockAudit>> {
        audit_blocks(&name, &block_names, &values, None, seed, |vals| {
            let mut graph = Graph::new();
            let blocks: Vec<NodeId> = vals.iter().map(|v| graph.param(v.clone())).collect();
            let loss = f(&mut graph, &blocks)?;
            Ok(Evaluation { graph, loss, blocks })
        })
    };
    match target {
        AuditTarget::Lifting => {
            let op = Arc::new(RotationOperator::new(3, 4)?);
            let m = op.mask().len();
            let kernels = LiftingKernelSet::<f64>::zeros(op, 2, 3)?;
            let x = random_tensor(&[2, 6, 6, 2], seed);
            let w = random_tensor(&[3, 2, m], seed + 1);
            layer(vec![x, w], names(&["input", "weight"]), &|g, n| {
                let out = layers::lift_node(g, n[0], n[1], &kernels)?;
                weighted_sum(g, out, loss_seed)
            })
        }
        AuditTarget::GroupConv => {
            let op = Arc::new(RotationOperator::new(3, 4)?);
            let m = op.mask().len();
            let kernels = GroupKernelSet::<f64>::zeros(op, 2, 2)?;
            let x = random_tensor(&[2, 5, 5, 4, 2], seed);
            let w = random_tensor(&[2, 2, 4, m], seed + 1);
            layer(vec![x, w], names(&["input", "weight"]), &|g, n| {
                let out = layers::group_node(g, n[0], n[1], &kernels)?;
                weighted_sum(g, out, loss_seed)
            })
        }
        AuditTarget::BatchNorm => {
            let x = random_tensor(&[3, 3, 3, 2, 3], seed);
            let scale = random_tensor(&[3], seed + 1);
            let shift = random_tensor(&[3], seed + 2);
            layer(vec![x, scale, shift], names(&["input", "scale", "shift"]), &|g, n| {
                let out = g.batch_norm(n[0], n[1], n[2], 1e-5, BatchNormMode::Train, &[], &[])?;
                weighted_sum(g, out, loss_seed)
            })
        }
        AuditTarget::Relu => {
            let x = random_tensor(&[2, 4, 4, 3], seed);
            layer(vec![x], names(&["input"]), &|g, n| {
                let out = g.relu(n[0])?;
                weighted_sum(g, out, loss_seed)
            })
        }
        AuditTarget::MaxPool => {
            let x = random_tensor(&[2, 6, 6, 2, 2], seed);
            layer(vec![x], names(&["input"]), &|g, n| {
                let out = layers::se2_max_pool_node(g, n[0], 2)?;
                weighted_sum(g, out, loss_seed)
            })
        }
        AuditTarget::ProjectionLoss => {
            let x = random_tensor(&[2, 4, 4, 4, 1], seed);
            let labels = binary_labels(&[2, 4, 4, 1], loss_seed);
            layer(vec![x], names(&["input"]), &|g, n| {
                let out = layers::project_node(g, n[0], Projection::Max)?;
                g.logistic_loss(out, &labels)
            })
        }
        AuditTarget::ProjectionMean => {
            let x = random_tensor(&[2, 4, 4, 4, 2], seed);
            layer(vec![x], names(&["input"]), &|g, n| {
                let out = layers::project_node(g, n[0], Projection::Mean)?;
                weighted_sum(g, out, loss_seed)
            })
        }
        AuditTarget::OutputHead => {
            let x = random_tensor(&[3, 4, 4, 5], seed);
            let w = random_tensor(&[1, 1, 5, 1], seed + 1);
            let bias = random_tensor(&[1], seed + 2);
            let labels = Tensor::new(&[3, 1], vec![1.0, 0.0, 1.0])?;
            layer(vec![x, w, bias], names(&["input", "weight", "bias"]), &|g, n| {
                let out = g.correlate2d(n[0], n[1], Padding::SameZero, 1)?;
                let out = g.add_channel_bias(out, n[2])?;
                let out = g.global_max_pool(out)?;
                g.logistic_loss(out, &labels)
            })
        }
        AuditTarget::Chain { orientations } => {
            let config = NetworkConfig::new(orientations).with_pool_layers(&[1]);
            let mut model = Model::<f64>::new(config)?;
            model.init_weights(seed);
            // Batch norm starts at the identity; perturb it so its gradients
            // are generic.
            for (k, bn) in model.norms_mut().iter_mut().enumerate() {
                let c = bn.scale.len();
                bn.scale = random_tensor::<f64>(&[c], seed + 100 + k as u64).map(|v| 1.0 + 0.2 * v);
                bn.shift = random_tensor::<f64>(&[c], seed + 200 + k as u64).map(|v| 0.2 * v);
            }
            let x = random_tensor(&[2, 8, 8, 3], seed + 1);
            let labels = Tensor::new(&[2, 1], vec![1.0, 0.0])?;
            let mut block_names = vec!["input".to_string()];
            let mut values = vec![x];
            for (n, t) in model.named_params() {
                block_names.push(n);
                values.push(t.clone());
            }
            audit_blocks(&name, &block_names, &values, Some(12), seed, |vals| {
                for (dst, src) in model.params_mut().into_iter().zip(&vals[1..]) {
                    dst.data_mut().copy_from_slice(src.data());
                }
                let mut graph = Graph::new();
                let input = graph.param(vals[0].clone());
                let pass = model.forward_graph(&mut graph, input, BatchNormMode::Train)?;
                let loss = graph.logistic_loss(pass.logits, &labels)?;
                let mut blocks = vec![input];
                blocks.extend(pass.params);
                Ok(Evaluation { graph, loss, blocks })
            })
        }
    }
}
