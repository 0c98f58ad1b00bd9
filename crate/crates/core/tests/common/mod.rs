//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here goes through the library's rotation operator, sparse maps or
//! correlation kernels: group elements, disk masks, bilinear sampling and
//! convolutions are recomputed from their definitions with nested loops.

#![allow(dead_code)]

use se2cnn::tensor::{Scalar, Tensor};

/// Positions `(row, col)` of an `n × n` grid within distance `n/2` of the
/// center, row-major.
pub fn disk(n: usize) -> Vec<(usize, usize)> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut out = Vec::new();
    for r in 0..n {
        for q in 0..n {
            let (dy, dx) = (r as f64 - c, q as f64 - c);
            if dx * dx + dy * dy <= (n * n) as f64 / 4.0 {
                out.push((r, q));
            }
        }
    }
    out
}

/// Samples a masked base kernel, given as `|mask|` weights, at the math-frame
/// point `(x, y)` (x right, y up, origin at the kernel center) by bilinear
/// interpolation, treating positions off the mask as zero.
pub fn sample_kernel(weights: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let mask = disk(n);
    let c = (n as f64 - 1.0) / 2.0;
    let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
    let (row, col) = (snap(c - y), snap(x + c));
    let (r0, c0) = (row.floor(), col.floor());
    let (fr, fc) = (row - r0, col - c0);
    let mut acc = 0.0;
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let (r, q) = (r0 + dr, c0 + dc);
            if wr * wc == 0.0 || r < 0.0 || q < 0.0 {
                continue;
            }
            if let Some(k) = mask.iter().position(|&p| p == (r as usize, q as usize)) {
                acc += wr * wc * weights[k];
            }
        }
    }
    acc
}

/// `g⁻¹ · y` for `g = (x, θ)`: `R_θ⁻¹ (y − x)`.
fn pull_back(theta: f64, x: [f64; 2], y: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    let d = [y[0] - x[0], y[1] - x[1]];
    [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

/// Lifting correlation by direct summation over the definition
/// `out(x, θᵢ, j) = Σ_c Σ_y k_{j,c}(R_θᵢ⁻¹(y − x)) f_c(y)`.
///
/// `image` is `[B, H, W, C_in]`, `weights` `[C_out, C_in, |mask|]`; returns
/// `[B, H, W, N, C_out]` in f64.
pub fn brute_lift<T: Scalar>(image: &Tensor<T>, weights: &Tensor<T>, n: usize, orientations: usize) -> Tensor<f64> {
    let [b, h, w, c_in] = image.shape()[..] else { panic!("rank 4") };
    let [c_out, _, m] = weights.shape()[..] else { panic!("rank 3") };
    let f = to_f64(image);
    let wt = to_f64(weights);
    let half = (n / 2) as i64;
    let mut out = Tensor::zeros(&[b, h, w, orientations, c_out]);
    for bi in 0..b {
        for r in 0..h {
            for q in 0..w {
                // Math coordinates: x = column, y = −row.
                let x = [q as f64, -(r as f64)];
                for i in 0..orientations {
                    let theta = std::f64::consts::TAU * i as f64 / orientations as f64;
                    for j in 0..c_out {
                        let mut acc = 0.0;
                        for dr in -half..=half {
                            for dq in -half..=half {
                                let (rr, qq) = (r as i64 + dr, q as i64 + dq);
                                if rr < 0 || qq < 0 || rr >= h as i64 || qq >= w as i64 {
                                    continue;
                                }
                                let y = [qq as f64, -(rr as f64)];
                                let e = [y[0] - x[0], y[1] - x[1]];
                                if e[0] * e[0] + e[1] * e[1] > (n * n) as f64 / 4.0 {
                                    continue;
                                }
                                let p = pull_back(theta, x, y);
                                for c in 0..c_in {
                                    let k = &wt[(j * c_in + c) * m..(j * c_in + c + 1) * m];
                                    let fv = f[((bi * h + rr as usize) * w + qq as usize) * c_in + c];
                                    acc += sample_kernel(k, n, p[0], p[1]) * fv;
                                }
                            }
                        }
                        out.set(&[bi, r, q, i, j], acc);
                    }
                }
            }
        }
    }
    out
}

/// Group correlation by direct summation over
/// `out(g, j) = Σ_c Σ_h K_{j,c}(g⁻¹h) F_c(h)` with `h = (y, θ_m)` and the
/// orientation part of `g⁻¹h` equal to `θ_m − θᵢ`.
///
/// `input` is `[B, H, W, N, C_in]`, `weights` `[C_out, C_in, N, |mask|]`.
pub fn brute_gconv<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, n: usize) -> Tensor<f64> {
    let [b, h, w, nn, c_in] = input.shape()[..] else { panic!("rank 5") };
    let [c_out, _, _, m] = weights.shape()[..] else { panic!("rank 4") };
    let f = to_f64(input);
    let wt = to_f64(weights);
    let half = (n / 2) as i64;
    let mut out = Tensor::zeros(&[b, h, w, nn, c_out]);
    for bi in 0..b {
        for r in 0..h {
            for q in 0..w {
                let x = [q as f64, -(r as f64)];
                for i in 0..nn {
                    let theta = std::f64::consts::TAU * i as f64 / nn as f64;
                    for j in 0..c_out {
                        let mut acc = 0.0;
                        for dr in -half..=half {
                            for dq in -half..=half {
                                let (rr, qq) = (r as i64 + dr, q as i64 + dq);
                                if rr < 0 || qq < 0 || rr >= h as i64 || qq >= w as i64 {
                                    continue;
                                }
                                let y = [qq as f64, -(rr as f64)];
                                let e = [y[0] - x[0], y[1] - x[1]];
                                if e[0] * e[0] + e[1] * e[1] > (n * n) as f64 / 4.0 {
                                    continue;
                                }
                                let p = pull_back(theta, x, y);
                                for mi in 0..nn {
                                    let slice = (mi + nn - i) % nn;
                                    for c in 0..c_in {
                                        let start = ((j * c_in + c) * nn + slice) * m;
                                        let k = sample_kernel(&wt[start..start + m], n, p[0], p[1]);
                                        let fv = f[(((bi * h + rr as usize) * w + qq as usize) * nn + mi) * c_in + c];
                                        acc += k * fv;
                                    }
                                }
                            }
                        }
                        out.set(&[bi, r, q, i, j], acc);
                    }
                }
            }
        }
    }
    out
}

/// Plain zero-padded "same" 2D correlation, `[B, H, W, C_in]` with a dense
/// kernel `[n, n, C_in, C_out]`.
pub fn plain_conv(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let [b, h, w, c_in] = x.shape()[..] else { panic!("rank 4") };
    let [n, _, _, c_out] = k.shape()[..] else { panic!("rank 4") };
    let half = (n / 2) as i64;
    let mut out = Tensor::zeros(&[b, h, w, c_out]);
    for bi in 0..b {
        for r in 0..h {
            for q in 0..w {
                for o in 0..c_out {
                    let mut acc = 0.0;
                    for a in 0..n {
                        for bb in 0..n {
                            let (rr, qq) = (r as i64 + a as i64 - half, q as i64 + bb as i64 - half);
                            if rr < 0 || qq < 0 || rr >= h as i64 || qq >= w as i64 {
                                continue;
                            }
                            for c in 0..c_in {
                                acc += k.get(&[a, bb, c, o]) * x.get(&[bi, rr as usize, qq as usize, c]);
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

/// Places masked weights `[C_out, C_in, |mask|]` into a dense `[n, n, C_in,
/// C_out]` kernel.
pub fn dense_from_mask(weights: &Tensor<f64>, n: usize) -> Tensor<f64> {
    let [c_out, c_in, _] = weights.shape()[..] else { panic!("rank 3") };
    let mask = disk(n);
    let mut k = Tensor::zeros(&[n, n, c_in, c_out]);
    for o in 0..c_out {
        for c in 0..c_in {
            for (p, &(r, q)) in mask.iter().enumerate() {
                k.set(&[r, q, c, o], weights.get(&[o, c, p]));
            }
        }
    }
    k
}

pub fn batch_norm_inference(x: &Tensor<f64>, scale: &[f64], shift: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Tensor<f64> {
    let c = scale.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let k = i % c;
            scale[k] * (v - mean[k]) / (var[k] + eps).sqrt() + shift[k]
        })
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

pub fn relu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}

/// 2×2 max pooling of `[B, H, W, C]`.
pub fn max_pool2(x: &Tensor<f64>) -> Tensor<f64> {
    let [b, h, w, c] = x.shape()[..] else { panic!("rank 4") };
    let mut out = Tensor::zeros(&[b, h / 2, w / 2, c]);
    for bi in 0..b {
        for r in 0..h / 2 {
            for q in 0..w / 2 {
                for k in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for (dr, dq) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        best = best.max(x.get(&[bi, 2 * r + dr, 2 * q + dq, k]));
                    }
                    out.set(&[bi, r, q, k], best);
                }
            }
        }
    }
    out
}

/// Fraction of (positive, negative) pairs ordered correctly, ties ½.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut good, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    good += 1.0;
                } else if si == sj {
                    good += 0.5;
                }
            }
        }
    }
    good / pairs
}

/// Component count of a 4-connected binary mask by repeated label
/// propagation until a fixed point.
pub fn count_components(mask: &[bool], h: usize, w: usize) -> usize {
    let mut label: Vec<usize> = (0..mask.len()).map(|i| if mask[i] { i + 1 } else { 0 }).collect();
    loop {
        let mut changed = false;
        for r in 0..h {
            for q in 0..w {
                let i = r * w + q;
                if label[i] == 0 {
                    continue;
                }
                let mut best = label[i];
                for (dr, dq) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (rr, qq) = (r as i64 + dr, q as i64 + dq);
                    if rr >= 0 && qq >= 0 && rr < h as i64 && qq < w as i64 {
                        let l = label[rr as usize * w + qq as usize];
                        if l != 0 {
                            best = best.min(l);
                        }
                    }
                }
                if best < label[i] {
                    label[i] = best;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = label.into_iter().filter(|&l| l != 0).collect();
    roots.sort_unstable();
    roots.dedup();
    roots.len()
}
