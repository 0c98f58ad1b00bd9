//! The roto-translation group SE(2), its discretization SE(2,N), and its
//! left-regular representations on sampled 2D images and SE(2)-images.
//!
//! # Coordinates
//!
//! Group math uses x to the right and y up. Tensors store rows top to
//! bottom, so a pixel at `(row, col)` of an `H × W` grid sits at
//! `x = col − (W−1)/2`, `y = (H−1)/2 − row` relative to the grid center.
//! [`GridFrame`] is the only place that converts between the two.

use std::f64::consts::TAU;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 2×2 rotation matrix, row-major.
pub type Mat2 = [[f64; 2]; 2];

/// Counterclockwise rotation `[[cos θ, −sin θ], [sin θ, cos θ]]`.
pub fn rotation_matrix(theta: f64) -> Mat2 {
    let (s, c) = theta.sin_cos();
    [[c, -s], [s, c]]
}

pub fn mat_vec(m: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// Wraps an angle into `[0, 2π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// A roto-translation `g = (x, θ)` with θ kept in `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupElement {
    x: [f64; 2],
    theta: f64,
}

impl GroupElement {
    pub fn new(x: [f64; 2], theta: f64) -> Self {
        Self {
            x,
            theta: normalize_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self::new([0.0, 0.0], 0.0)
    }

    pub fn rotation(theta: f64) -> Self {
        Self::new([0.0, 0.0], theta)
    }

    pub fn translation(x: [f64; 2]) -> Self {
        Self::new(x, 0.0)
    }

    pub fn x(&self) -> [f64; 2] {
        self.x
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn rotation_matrix(&self) -> Mat2 {
        rotation_matrix(self.theta)
    }

    /// `g · g' = (R_θ x' + x, θ + θ')`.
    pub fn compose(&self, other: &GroupElement) -> GroupElement {
        let rx = mat_vec(&self.rotation_matrix(), other.x);
        GroupElement::new([rx[0] + self.x[0], rx[1] + self.x[1]], self.theta + other.theta)
    }

    /// `g⁻¹ = (−R_θ⁻¹ x, −θ)`.
    pub fn inverse(&self) -> GroupElement {
        let r = mat_vec(&rotation_matrix(-self.theta), self.x);
        GroupElement::new([-r[0], -r[1]], -self.theta)
    }

    /// Action on position-orientation space: `(R_θ p + x, θ + φ)`.
    pub fn act(&self, point: [f64; 2], angle: f64) -> ([f64; 2], f64) {
        let rp = mat_vec(&self.rotation_matrix(), point);
        (
            [rp[0] + self.x[0], rp[1] + self.x[1]],
            normalize_angle(self.theta + angle),
        )
    }

    /// Distance to another element: Euclidean in x plus wrapped angle
    /// difference.
    pub fn distance(&self, other: &GroupElement) -> f64 {
        let dx = ((self.x[0] - other.x[0]).powi(2) + (self.x[1] - other.x[1]).powi(2)).sqrt();
        let d = (self.theta - other.theta).rem_euclid(TAU);
        dx + d.min(TAU - d)
    }
}

/// `g · g'`.
pub fn group_product(g: &GroupElement, h: &GroupElement) -> GroupElement {
    g.compose(h)
}

pub fn group_inverse(g: &GroupElement) -> GroupElement {
    g.inverse()
}

pub fn group_action_point(g: &GroupElement, point: [f64; 2], angle: f64) -> ([f64; 2], f64) {
    g.act(point, angle)
}

/// `N` equally spaced orientations `θᵢ = 2πi/N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OrientationSampling {
    n: usize,
}

impl OrientationSampling {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("number of orientations must be positive".into()));
        }
        Ok(Self { n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn angle(&self, i: usize) -> f64 {
        TAU * (i % self.n) as f64 / self.n as f64
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.angle(i)).collect()
    }

    /// Index `j` with `θ = 2πj/N`, if `θ` is a sampled angle.
    pub fn index_of(&self, theta: f64) -> Option<usize> {
        let k = normalize_angle(theta) * self.n as f64 / TAU;
        let j = k.round();
        ((k - j).abs() < 1e-9).then_some(j as usize % self.n)
    }
}

/// An element of SE(2,N): integer translation and orientation index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DiscreteGroupElement {
    pub x: [i64; 2],
    pub orientation: usize,
}

impl DiscreteGroupElement {
    pub fn new(x: [i64; 2], orientation: usize) -> Self {
        Self { x, orientation }
    }

    pub fn to_continuous(&self, sampling: OrientationSampling) -> GroupElement {
        GroupElement::new(
            [self.x[0] as f64, self.x[1] as f64],
            sampling.angle(self.orientation),
        )
    }

    /// True when the rotation maps the pixel grid onto itself.
    pub fn is_grid_exact(&self, sampling: OrientationSampling) -> bool {
        (4 * self.orientation) % sampling.len() == 0
    }
}

/// Conversion between storage indices and centered math coordinates.
#[derive(Debug, Clone, Copy)]
pub struct GridFrame {
    cy: f64,
    cx: f64,
}

impl GridFrame {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            cy: (height as f64 - 1.0) / 2.0,
            cx: (width as f64 - 1.0) / 2.0,
        }
    }

    /// `(row, col)` → `(x, y)` with y up.
    pub fn to_math(&self, row: f64, col: f64) -> [f64; 2] {
        [col - self.cx, self.cy - row]
    }

    /// `(x, y)` → `(row, col)`.
    pub fn to_storage(&self, p: [f64; 2]) -> (f64, f64) {
        (self.cy - p[1], p[0] + self.cx)
    }
}

const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Bilinear interpolation weights `(row, col, weight)` at a fractional
/// storage position. Coordinates within `1e-9` of the grid snap to it, so
/// grid-aligned sampling is an exact copy.
pub fn bilinear_taps(row: f64, col: f64) -> [(i64, i64, f64); 4] {
    let (row, col) = (snap(row), snap(col));
    let (r0, c0) = (row.floor(), col.floor());
    let (fr, fc) = (row - r0, col - c0);
    let (r0, c0) = (r0 as i64, c0 as i64);
    [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1, (1.0 - fr) * fc),
        (r0 + 1, c0, fr * (1.0 - fc)),
        (r0 + 1, c0 + 1, fr * fc),
    ]
}

/// Precomputed resampling of an `H × W` grid under `x' ↦ R_θ⁻¹(x' − t)`.
///
/// Entry `p` lists the source pixels and weights feeding output pixel `p`.
struct Resampler {
    taps: Vec<Vec<(usize, f64)>>,
}

impl Resampler {
    fn new(height: usize, width: usize, g: &GroupElement) -> Self {
        let frame = GridFrame::new(height, width);
        let inv_rot = rotation_matrix(-g.theta());
        let t = g.x();
        let mut taps = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let p = frame.to_math(r as f64, c as f64);
                let src = mat_vec(&inv_rot, [p[0] - t[0], p[1] - t[1]]);
                let (sr, sc) = frame.to_storage(src);
                let list = bilinear_taps(sr, sc)
                    .into_iter()
                    .filter(|&(rr, cc, w)| {
                        w != 0.0 && rr >= 0 && cc >= 0 && (rr as usize) < height && (cc as usize) < width
                    })
                    .map(|(rr, cc, w)| (rr as usize * width + cc as usize, w))
                    .collect();
                taps.push(list);
            }
        }
        Self { taps }
    }

    /// Resamples every channel of a `[H, W, K]` block.
    fn apply<T: Scalar>(&self, src: &[T], channels: usize, dst: &mut [T]) {
        for (p, list) in self.taps.iter().enumerate() {
            for k in 0..channels {
                let mut acc = 0.0f64;
                for &(s, w) in list {
                    acc += w * src[s * channels + k].to_f64_lossy();
                }
                dst[p * channels + k] = T::from_f64_lossy(acc);
            }
        }
    }

    fn is_identity(&self) -> bool {
        self.taps
            .iter()
            .enumerate()
            .all(|(p, list)| list.len() == 1 && list[0] == (p, 1.0))
    }
}

/// `(U_g f)(x') = f(R_θ⁻¹(x' − x))`: roto-translates a `[H, W, C]` image
/// (or a batch `[B, H, W, C]`) about its center with bilinear sampling.
/// Samples falling outside the grid read as zero.
pub fn apply_u<T: Scalar>(g: &GroupElement, image: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, h, w, c) = match *image.shape() {
        [h, w, c] => (1, h, w, c),
        [b, h, w, c] => (b, h, w, c),
        _ => return Err(shape_err(format!("apply_U needs [H,W,C] or [B,H,W,C], got {:?}", image.shape()))),
    };
    let resampler = Resampler::new(h, w, g);
    if resampler.is_identity() {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(image.shape());
    let item = h * w * c;
    for b in 0..batch {
        resampler.apply(
            &image.data()[b * item..(b + 1) * item],
            c,
            &mut out.data_mut()[b * item..(b + 1) * item],
        );
    }
    Ok(out)
}

/// `(L_g F)(x', θ') = F(R_θ⁻¹(x' − x), θ' − θ)` on an SE(2,N) image
/// `[H, W, N, C]` (or a batch `[B, H, W, N, C]`).
///
/// The spatial part is bilinear; the orientation part is an exact cyclic
/// shift, so `θ` must be one of the `N` sampled angles.
pub fn apply_l<T: Scalar>(g: &GroupElement, image: &Tensor<T>, sampling: OrientationSampling) -> Result<Tensor<T>> {
    let (batch, h, w, n, c) = match *image.shape() {
        [h, w, n, c] => (1, h, w, n, c),
        [b, h, w, n, c] => (b, h, w, n, c),
        _ => return Err(shape_err(format!("apply_L needs [H,W,N,C] or [B,H,W,N,C], got {:?}", image.shape()))),
    };
    if n != sampling.len() {
        return Err(shape_err(format!("orientation axis {n} vs sampling {}", sampling.len())));
    }
    let shift = sampling.index_of(g.theta()).ok_or(Error::UnsampledAngle {
        angle: g.theta(),
        n,
    })?;
    let item = h * w * n * c;
    let mut twisted = vec![T::zero(); image.len()];
    // Orientation slice k of the output reads slice (k − shift) mod N.
    for b in 0..batch {
        for p in 0..h * w {
            for k in 0..n {
                let src_k = (k + n - shift) % n;
                let src = b * item + (p * n + src_k) * c;
                let dst = b * item + (p * n + k) * c;
                twisted[dst..dst + c].copy_from_slice(&image.data()[src..src + c]);
            }
        }
    }
    let twisted = Tensor::new(image.shape(), twisted)?;
    let resampler = Resampler::new(h, w, g);
    if resampler.is_identity() {
        return Ok(twisted);
    }
    let mut out = Tensor::zeros(image.shape());
    for b in 0..batch {
        resampler.apply(
            &twisted.data()[b * item..(b + 1) * item],
            n * c,
            &mut out.data_mut()[b * item..(b + 1) * item],
        );
    }
    Ok(out)
}
