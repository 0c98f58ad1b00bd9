//! Labeled patch sets, synthetic generators, and dataset persistence.
//!
//! Two generators stand in for real imaging tasks: rotated glyph
//! classification and thin-curve segmentation. Every sample draws from its
//! own RNG stream keyed by `(seed, index)`, so generation is deterministic and
//! independent of how samples are scheduled.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::write_atomic;
use crate::tensor::{RawTensor, Tensor};

/// Side length of generated patches.
pub const PATCH_SIZE: usize = 32;
/// Channels of generated patches.
pub const PATCH_CHANNELS: usize = 3;

pub const ROTATED_PATTERNS: &str = "rotated-patterns";
pub const CURVE_SEGMENTATION: &str = "curve-segmentation";

/// Whether labels are per patch (`[B, 1]`) or per pixel (`[B, H, W, 1]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Patch,
    Pixel,
}

/// Image patches `[B, H, W, C]` with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatchSet {
    pub patches: Tensor<f32>,
    pub labels: Tensor<f32>,
    pub seed: u64,
    pub generator: String,
}

impl LabeledPatchSet {
    pub fn new(patches: Tensor<f32>, labels: Tensor<f32>, seed: u64, generator: impl Into<String>) -> Result<Self> {
        let [b, h, w, _] = *patches.shape() else {
            return Err(Error::Shape(format!("patches must be [B,H,W,C], got {:?}", patches.shape())));
        };
        if b == 0 {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let ok = labels.shape() == [b, 1] || labels.shape() == [b, h, w, 1];
        if !ok {
            return Err(Error::Shape(format!(
                "labels {:?} do not match patches {:?}",
                labels.shape(),
                patches.shape()
            )));
        }
        if let Some(v) = labels.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidLabel(f64::from(*v)));
        }
        Ok(LabeledPatchSet {
            patches,
            labels,
            seed,
            generator: generator.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label_kind(&self) -> LabelKind {
        if self.labels.rank() == 2 {
            LabelKind::Patch
        } else {
            LabelKind::Pixel
        }
    }

    /// Fraction of positive labels.
    pub fn positive_fraction(&self) -> f64 {
        let pos = self.labels.data().iter().filter(|&&v| v == 1.0).count();
        pos as f64 / self.labels.len() as f64
    }

    /// Copies the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let patches: Vec<_> = indices.iter().map(|&i| self.patches.index_axis0(i)).collect();
        let labels: Vec<_> = indices.iter().map(|&i| self.labels.index_axis0(i)).collect();
        LabeledPatchSet::new(
            Tensor::stack(&patches)?,
            Tensor::stack(&labels)?,
            self.seed,
            self.generator.clone(),
        )
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split point {n} must lie strictly inside 0..{}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.select(&head)?, self.select(&tail)?))
    }

    /// Writes `patches.se2t`, `labels.se2t` and `manifest.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("patches.se2t"), &self.patches.to_se2t_bytes())?;
        write_atomic(&dir.join("labels.se2t"), &self.labels.to_se2t_bytes())?;
        let shape: Vec<String> = self.patches.shape().iter().map(|d| d.to_string()).collect();
        let manifest = format!(
            "count={}\nshape={}\nseed={}\ngenerator={}\nlabels={}\n",
            self.len(),
            shape.join(","),
            self.seed,
            self.generator,
            match self.label_kind() {
                LabelKind::Patch => "patch",
                LabelKind::Pixel => "pixel",
            }
        );
        write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())
    }

    /// Reads a dataset written by [`LabeledPatchSet::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let manifest = parse_key_values(&text)?;
        let get = |k: &str| {
            manifest
                .get(k)
                .ok_or_else(|| Error::Format(format!("manifest is missing `{k}`")))
        };
        let count: usize = parse_field(get("count")?, "count")?;
        let seed: u64 = parse_field(get("seed")?, "seed")?;
        let generator = get("generator")?.clone();
        let read = |name: &str| -> Result<Tensor<f32>> {
            let mut r = BufReader::new(fs::File::open(dir.join(name))?);
            Ok(RawTensor::read(&mut r)?.into_tensor())
        };
        let set = LabeledPatchSet::new(read("patches.se2t")?, read("labels.se2t")?, seed, generator)?;
        if set.len() != count {
            return Err(Error::Format(format!(
                "manifest count {count} does not match {} stored patches",
                set.len()
            )));
        }
        Ok(set)
    }
}

fn parse_field<F: std::str::FromStr>(value: &str, key: &str) -> Result<F> {
    value
        .parse()
        .map_err(|_| Error::Format(format!("bad value `{value}` for `{key}`")))
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", i + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Format(format!("line {}: duplicate key `{}`", i + 1, k.trim())));
        }
    }
    Ok(out)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Distance from `p` to the segment `a`–`b`.
fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (ex, ey) = (p[0] - a[0] - t * dx, p[1] - a[1] - t * dy);
    (ex * ex + ey * ey).sqrt()
}

/// Pixel center of `(row, col)` in coordinates with x right and y up, origin
/// at the patch center.
fn pixel_point(row: usize, col: usize, size: usize) -> [f64; 2] {
    let c = (size as f64 - 1.0) / 2.0;
    [col as f64 - c, c - row as f64]
}

/// Smooth random texture plus white noise, `[size, size, channels]`.
fn textured_noise(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> Vec<f64> {
    let white = Normal::new(0.0, 0.08).expect("valid sigma");
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let freq = rng.gen_range(0.1..0.5);
            (freq * angle.cos(), freq * angle.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.03..0.1))
        })
        .collect();
    let base: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.2..0.4)).collect();
    let mut out = vec![0.0; size * size * channels];
    for r in 0..size {
        for c in 0..size {
            let p = pixel_point(r, c, size);
            let tex: f64 = waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * p[0] + fy * p[1] + ph).sin()).sum();
            for (ch, b) in base.iter().enumerate() {
                out[(r * size + c) * channels + ch] = b + tex + white.sample(rng);
            }
        }
    }
    out
}

/// Shape drawn into a rotated-pattern patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    /// Two equal strokes meeting at a right angle.
    Ell,
    /// One straight stroke.
    Bar,
    /// Two strokes meeting at 120°.
    Wedge,
    /// Two strokes meeting at 60°.
    Acute,
    /// Two collinear strokes with a gap.
    Broken,
}

/// Placement of the glyph in one generated sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphParams {
    pub glyph: Glyph,
    /// Orientation in radians, uniform on `[0, 2π)`.
    pub angle: f64,
    /// Glyph anchor relative to the patch center (x right, y up).
    pub center: [f64; 2],
    pub intensity: f64,
}

const ARM: f64 = 7.0;
const STROKE_HALF_WIDTH: f64 = 0.9;

impl GlyphParams {
    /// Segments in patch coordinates.
    fn segments(&self) -> Vec<([f64; 2], [f64; 2])> {
        let local: Vec<([f64; 2], [f64; 2])> = match self.glyph {
            Glyph::Ell => vec![([0.0, 0.0], [ARM, 0.0]), ([0.0, 0.0], [0.0, ARM])],
            Glyph::Bar => vec![([-0.5 * ARM, 0.0], [ARM, 0.0])],
            Glyph::Wedge | Glyph::Acute => {
                let a = if self.glyph == Glyph::Wedge { 2.0 * PI / 3.0 } else { PI / 3.0 };
                vec![([0.0, 0.0], [ARM, 0.0]), ([0.0, 0.0], [ARM * a.cos(), ARM * a.sin()])]
            }
            Glyph::Broken => vec![([-ARM, 0.0], [-1.5, 0.0]), ([1.5, 0.0], [ARM, 0.0])],
        };
        let (s, c) = self.angle.sin_cos();
        let place = |p: [f64; 2]| [c * p[0] - s * p[1] + self.center[0], s * p[0] + c * p[1] + self.center[1]];
        local.into_iter().map(|(a, b)| (place(a), place(b))).collect()
    }

    /// Anti-aliased stroke coverage at `p`.
    fn coverage(&self, segments: &[([f64; 2], [f64; 2])], p: [f64; 2]) -> f64 {
        let d = segments
            .iter()
            .map(|&(a, b)| segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min);
        (STROKE_HALF_WIDTH + 0.5 - d).clamp(0.0, 1.0)
    }
}

/// Class of sample `index`: exactly `ceil(count/2)` positives, assigned by a
/// seeded permutation.
fn balanced_labels(count: usize, seed: u64) -> Vec<bool> {
    use rand::seq::SliceRandom;
    let mut labels: Vec<bool> = (0..count).map(|i| i % 2 == 0).collect();
    let mut rng = sample_rng(seed, usize::MAX);
    labels.shuffle(&mut rng);
    labels
}

/// Glyph placement of sample `index` in `synth_rotated_patterns(count, seed)`.
pub fn rotated_pattern_params(count: usize, seed: u64, index: usize) -> GlyphParams {
    let positive = balanced_labels(count, seed)[index];
    glyph_params(positive, &mut sample_rng(seed, index))
}

fn glyph_params(positive: bool, rng: &mut ChaCha8Rng) -> GlyphParams {
    let glyph = if positive {
        Glyph::Ell
    } else {
        [Glyph::Bar, Glyph::Wedge, Glyph::Acute, Glyph::Broken][rng.gen_range(0..4)]
    };
    GlyphParams {
        glyph,
        angle: rng.gen_range(0.0..2.0 * PI),
        center: [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)],
        intensity: rng.gen_range(0.45..0.7),
    }
}

/// Classification patches: label 1 patches contain a right-angled glyph with
/// unequal arms at a uniformly random orientation and position; label 0
/// patches contain a straight, obtuse or broken stroke drawn the same way.
pub fn synth_rotated_patterns(count: usize, seed: u64) -> Result<LabeledPatchSet> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be positive".into()));
    }
    let labels = balanced_labels(count, seed);
    let (size, ch) = (PATCH_SIZE, PATCH_CHANNELS);
    let items: Vec<Vec<f32>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let params = glyph_params(labels[i], &mut rng);
            let segments = params.segments();
            let mut img = textured_noise(&mut rng, size, ch);
            let tint: Vec<f64> = (0..ch).map(|_| rng.gen_range(0.8..1.0)).collect();
            for r in 0..size {
                for c in 0..size {
                    let cov = params.coverage(&segments, pixel_point(r, c, size));
                    if cov > 0.0 {
                        for (k, t) in tint.iter().enumerate() {
                            img[(r * size + c) * ch + k] += cov * params.intensity * t;
                        }
                    }
                }
            }
            img.into_iter().map(|v| v as f32).collect()
        })
        .collect();
    let patches = Tensor::new(&[count, size, size, ch], items.concat())?;
    let labels = Tensor::new(&[count, 1], labels.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect())?;
    LabeledPatchSet::new(patches, labels, seed, ROTATED_PATTERNS)
}

/// Bounds on the fraction of curve pixels per segmentation patch.
pub const CURVE_FRACTION_BAND: (f64, f64) = (0.03, 0.35);

/// Segmentation patches: one to three smooth quadratic curves of random
/// orientation on textured noise, with the stroke pixels as the label mask.
/// Patches whose curve fraction falls outside [`CURVE_FRACTION_BAND`] are
/// redrawn from the same sample stream.
pub fn synth_curve_segmentation(count: usize, seed: u64) -> Result<LabeledPatchSet> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be positive".into()));
    }
    let (size, ch) = (PATCH_SIZE, PATCH_CHANNELS);
    let items: Vec<(Vec<f32>, Vec<f32>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            loop {
                let (img, mask) = curve_patch(&mut rng, size, ch);
                let frac = mask.iter().filter(|&&m| m == 1.0).count() as f64 / mask.len() as f64;
                if (CURVE_FRACTION_BAND.0..=CURVE_FRACTION_BAND.1).contains(&frac) {
                    return (img, mask);
                }
            }
        })
        .collect();
    let mut patches = Vec::with_capacity(count * size * size * ch);
    let mut masks = Vec::with_capacity(count * size * size);
    for (img, mask) in items {
        patches.extend(img);
        masks.extend(mask);
    }
    LabeledPatchSet::new(
        Tensor::new(&[count, size, size, ch], patches)?,
        Tensor::new(&[count, size, size, 1], masks)?,
        seed,
        CURVE_SEGMENTATION,
    )
}

fn curve_patch(rng: &mut ChaCha8Rng, size: usize, ch: usize) -> (Vec<f32>, Vec<f32>) {
    let mut img = textured_noise(rng, size, ch);
    let mut mask = vec![0.0f32; size * size];
    let half = size as f64 / 2.0;
    for _ in 0..rng.gen_range(1..=3) {
        let angle = rng.gen_range(0.0..2.0 * PI);
        let (s, c) = angle.sin_cos();
        let offset = rng.gen_range(-0.6 * half..0.6 * half);
        let bend = rng.gen_range(-0.5 * half..0.5 * half);
        let width = rng.gen_range(0.6..1.4);
        let contrast = rng.gen_range(0.35..0.6);
        // Quadratic Bezier across the patch, rotated by `angle`.
        let ctrl = [[-1.2 * half, offset], [0.0, offset + bend], [1.2 * half, offset]];
        let pts: Vec<[f64; 2]> = (0..=24)
            .map(|k| {
                let t = k as f64 / 24.0;
                let (a, b, d) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
                let x = a * ctrl[0][0] + b * ctrl[1][0] + d * ctrl[2][0];
                let y = a * ctrl[0][1] + b * ctrl[1][1] + d * ctrl[2][1];
                [c * x - s * y, s * x + c * y]
            })
            .collect();
        for r in 0..size {
            for col in 0..size {
                let p = pixel_point(r, col, size);
                let d = pts
                    .windows(2)
                    .map(|w| segment_distance(p, w[0], w[1]))
                    .fold(f64::INFINITY, f64::min);
                let cov = (width + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    for k in 0..ch {
                        img[(r * size + col) * ch + k] += contrast * cov;
                    }
                }
                if d <= width {
                    mask[r * size + col] = 1.0;
                }
            }
        }
    }
    (img.into_iter().map(|v| v as f32).collect(), mask)
}

/// Coarse text rendering of channel 0 of a `[H, W, C]` patch.
pub fn render_ascii(patch: &Tensor<f32>) -> Result<String> {
    let [h, w, c] = *patch.shape() else {
        return Err(Error::Shape(format!("expected [H,W,C], got {:?}", patch.shape())));
    };
    let ramp = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    let vals: Vec<f32> = (0..h * w).map(|p| patch.data()[p * c]).collect();
    let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    let mut out = String::with_capacity(h * (w + 1));
    for r in 0..h {
        for q in 0..w {
            let t = (vals[r * w + q] - lo) / span;
            out.push(ramp[((t * (ramp.len() - 1) as f32).round() as usize).min(ramp.len() - 1)]);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Reads a binary or ASCII PGM/PPM (`P2`, `P3`, `P5`, `P6`) as `[H, W, C]`
/// with values scaled to `[0, 1]`.
pub fn read_pnm(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pnm(&bytes)
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let (channels, binary) = match magic.as_str() {
        "P2" => (1, false),
        "P5" => (1, true),
        "P3" => (3, false),
        "P6" => (3, true),
        other => return Err(Error::Format(format!("unsupported PNM type `{other}`"))),
    };
    let number = |t: String| t.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM number `{t}`")));
    let w = number(token()?)?;
    let h = number(token()?)?;
    let maxval = number(token()?)?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad PNM header {w}x{h} max {maxval}")));
    }
    let n = w * h * channels;
    let maxval_f = maxval as f32;
    let data: Vec<f32> = if binary {
        // Exactly one whitespace byte separates the header from the raster.
        let start = pos + 1;
        let width = if maxval < 256 { 1 } else { 2 };
        let raster = bytes
            .get(start..start + n * width)
            .ok_or_else(|| Error::Format("truncated PNM raster".into()))?;
        if width == 1 {
            raster.iter().map(|&b| b as f32 / maxval_f).collect()
        } else {
            raster
                .chunks_exact(2)
                .map(|p| u16::from_be_bytes([p[0], p[1]]) as f32 / maxval_f)
                .collect()
        }
    } else {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(number(token()?)? as f32 / maxval_f);
        }
        out
    };
    Tensor::new(&[h, w, channels], data)
}
