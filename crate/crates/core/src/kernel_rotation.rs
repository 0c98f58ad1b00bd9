//! Disk-shaped kernel supports and the sparse operator that turns one set of
//! shared base weights into all `N` rotated copies of a kernel.
//!
//! The operator has one block of `|mask|` rows per orientation. Row `p` of
//! block `i` samples the base kernel bilinearly at `R_{θᵢ}⁻¹ · d`, where `d`
//! is the offset of mask position `p` from the kernel center, so block `i`
//! holds the kernel rotated counterclockwise by `θᵢ`. Bilinear taps that land
//! outside the mask contribute nothing; rows are never renormalized.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::geometry::{bilinear_taps, mat_vec, rotation_matrix, GridFrame, OrientationSampling};
use crate::sparse::SparseMap;
use crate::tensor::{Scalar, Tensor};

/// Positions of an `n × n` grid within Euclidean distance `n/2` of the
/// center, in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiskMask {
    n: usize,
    positions: Vec<(usize, usize)>,
    index: HashMap<(usize, usize), usize>,
}

impl DiskMask {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size must be odd and positive, got {n}")));
        }
        let c = (n - 1) as f64 / 2.0;
        let radius = n as f64 / 2.0;
        let positions: Vec<(usize, usize)> = (0..n)
            .flat_map(|r| (0..n).map(move |q| (r, q)))
            .filter(|&(r, q)| {
                let (dr, dq) = (r as f64 - c, q as f64 - c);
                (dr * dr + dq * dq).sqrt() <= radius
            })
            .collect();
        let index = positions.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        Ok(Self { n, positions, index })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    /// Number of active positions.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn index_of(&self, row: usize, col: usize) -> Option<usize> {
        self.index.get(&(row, col)).copied()
    }

    pub fn contains(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && self.index.contains_key(&(row as usize, col as usize))
    }
}

pub fn build_disk_mask(n: usize) -> Result<DiskMask> {
    DiskMask::new(n)
}

/// Sparse `(N·|mask|) × |mask|` matrix mapping base weights to `N` rotated
/// kernels.
#[derive(Debug, Clone)]
pub struct RotationOperator {
    mask: DiskMask,
    sampling: OrientationSampling,
    matrix: SparseMap<f64>,
}

impl RotationOperator {
    pub fn new(n: usize, orientations: usize) -> Result<Self> {
        let mask = DiskMask::new(n)?;
        let sampling = OrientationSampling::new(orientations)?;
        let m = mask.len();
        let frame = GridFrame::new(n, n);
        let mut triplets = Vec::with_capacity(4 * m * orientations);
        for i in 0..orientations {
            let inv = rotation_matrix(-sampling.angle(i));
            for (p, &(r, q)) in mask.positions().iter().enumerate() {
                let d = frame.to_math(r as f64, q as f64);
                let (sr, sq) = frame.to_storage(mat_vec(&inv, d));
                for (tr, tq, w) in bilinear_taps(sr, sq) {
                    if w == 0.0 || !mask.contains(tr, tq) {
                        continue;
                    }
                    let col = mask.index_of(tr as usize, tq as usize).expect("tap in mask");
                    triplets.push(((i * m + p) as u32, col as u32, w));
                }
            }
        }
        let matrix = SparseMap::from_triplets(&[orientations * m], m, triplets)?;
        Ok(Self { mask, sampling, matrix })
    }

    pub fn mask(&self) -> &DiskMask {
        &self.mask
    }

    pub fn kernel_size(&self) -> usize {
        self.mask.size()
    }

    pub fn orientations(&self) -> usize {
        self.sampling.len()
    }

    pub fn sampling(&self) -> OrientationSampling {
        self.sampling
    }

    pub fn matrix(&self) -> &SparseMap<f64> {
        &self.matrix
    }

    /// Entries of block `i` as `(target, source, weight)` in mask indices.
    pub fn block(&self, i: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let m = self.mask.len();
        self.matrix
            .entries()
            .iter()
            .filter(move |e| e.0 as usize / m == i)
            .map(move |&(r, c, v)| (r as usize % m, c as usize, v))
    }

    /// Text dump, one `row col value` triplet per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for &(r, c, v) in self.matrix.entries() {
            writeln!(s, "{r} {c} {v:.17e}").expect("write to string");
        }
        s
    }

    /// Map from base weights `[P, |mask|]` to a dense stack `[n, n, N, P]`.
    pub fn stack_map<T: Scalar>(&self, pairs: usize) -> Result<SparseMap<T>> {
        let (n, nn, m) = (self.kernel_size(), self.orientations(), self.mask.len());
        let mut triplets = Vec::with_capacity(self.matrix.nnz() * pairs);
        for &(row, col, w) in self.matrix.entries() {
            let (i, p) = (row as usize / m, row as usize % m);
            let (r, q) = self.mask.positions()[p];
            for pair in 0..pairs {
                let out = ((r * n + q) * nn + i) * pairs + pair;
                triplets.push((out as u32, (pair * m + col as usize) as u32, T::from_f64_lossy(w)));
            }
        }
        SparseMap::from_triplets(&[n, n, nn, pairs], pairs * m, triplets)
    }

    /// Map from lifting base weights `[C_out, C_in, |mask|]` to the dense
    /// correlation kernel `[n, n, C_in, N·C_out]`, output channel `i·C_out + j`
    /// holding kernel `j` rotated by `θᵢ`.
    pub fn lifting_map<T: Scalar>(&self, c_in: usize, c_out: usize) -> Result<SparseMap<T>> {
        let (n, nn, m) = (self.kernel_size(), self.orientations(), self.mask.len());
        let wide = nn * c_out;
        let mut triplets = Vec::with_capacity(self.matrix.nnz() * c_in * c_out);
        for &(row, col, w) in self.matrix.entries() {
            let (i, p) = (row as usize / m, row as usize % m);
            let (r, q) = self.mask.positions()[p];
            let w = T::from_f64_lossy(w);
            for j in 0..c_out {
                for c in 0..c_in {
                    let out = ((r * n + q) * c_in + c) * wide + i * c_out + j;
                    let src = (j * c_in + c) * m + col as usize;
                    triplets.push((out as u32, src as u32, w));
                }
            }
        }
        SparseMap::from_triplets(&[n, n, c_in, wide], c_out * c_in * m, triplets)
    }

    /// Map from group-kernel base weights `[C_out, C_in, N, |mask|]` to the
    /// dense correlation kernel `[n, n, N·C_in, N·C_out]`.
    ///
    /// For output orientation `i` and input orientation `m` the kernel uses
    /// base orientation slice `(m − i) mod N`, spatially rotated by `θᵢ`.
    pub fn group_map<T: Scalar>(&self, c_in: usize, c_out: usize) -> Result<SparseMap<T>> {
        let (n, nn, msize) = (self.kernel_size(), self.orientations(), self.mask.len());
        let (wide_in, wide_out) = (nn * c_in, nn * c_out);
        let mut triplets = Vec::with_capacity(self.matrix.nnz() * nn * c_in * c_out);
        for &(row, col, w) in self.matrix.entries() {
            let (i, p) = (row as usize / msize, row as usize % msize);
            let (r, q) = self.mask.positions()[p];
            let w = T::from_f64_lossy(w);
            for m_in in 0..nn {
                let slice = (m_in + nn - i) % nn;
                for j in 0..c_out {
                    for c in 0..c_in {
                        let out = ((r * n + q) * wide_in + m_in * c_in + c) * wide_out + i * c_out + j;
                        let src = ((j * c_in + c) * nn + slice) * msize + col as usize;
                        triplets.push((out as u32, src as u32, w));
                    }
                }
            }
        }
        SparseMap::from_triplets(&[n, n, wide_in, wide_out], c_out * c_in * nn * msize, triplets)
    }
}

pub fn build_rotation_operator(n: usize, orientations: usize) -> Result<RotationOperator> {
    RotationOperator::new(n, orientations)
}

/// Expands base weights `[P, |mask|]` (or a flat `[|mask|]` vector, `P = 1`)
/// into the dense rotated stack `[n, n, N, P]`, zero off the mask.
pub fn rotate_kernel_stack<T: Scalar>(base: &Tensor<T>, op: &RotationOperator) -> Result<Tensor<T>> {
    let m = op.mask().len();
    let pairs = match *base.shape() {
        [len] if len == m => 1,
        [p, len] if len == m => p,
        _ => {
            return Err(shape_err(format!(
                "base weights {:?} do not match a mask of {m} positions",
                base.shape()
            )))
        }
    };
    op.stack_map::<T>(pairs)?.apply(base.data())
}

/// Shares rotation operators between layers with the same `(n, N)`.
#[derive(Debug, Default, Clone)]
pub struct OperatorCache {
    ops: HashMap<(usize, usize), Arc<RotationOperator>>,
}

impl OperatorCache {
    pub fn get(&mut self, n: usize, orientations: usize) -> Result<Arc<RotationOperator>> {
        if let Some(op) = self.ops.get(&(n, orientations)) {
            return Ok(op.clone());
        }
        let op = Arc::new(RotationOperator::new(n, orientations)?);
        self.ops.insert((n, orientations), op.clone());
        Ok(op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_cardinalities() {
        assert_eq!(DiskMask::new(1).unwrap().len(), 1);
        assert_eq!(DiskMask::new(3).unwrap().len(), 9);
        let m5 = DiskMask::new(5).unwrap();
        assert_eq!(m5.len(), 21);
        for corner in [(0, 0), (0, 4), (4, 0), (4, 4)] {
            assert!(m5.index_of(corner.0, corner.1).is_none());
        }
        assert!(DiskMask::new(4).is_err());
        assert!(DiskMask::new(0).is_err());
    }

    #[test]
    fn mask_is_invariant_under_grid_rotations() {
        for n in [1, 3, 5, 7, 9] {
            let m = DiskMask::new(n).unwrap();
            for &(r, q) in m.positions() {
                // Quarter turn maps (r, q) to (n-1-q, r).
                assert!(m.index_of(n - 1 - q, r).is_some());
                assert!(m.index_of(q, r).is_some());
            }
        }
    }

    #[test]
    fn single_orientation_is_identity() {
        let op = RotationOperator::new(5, 1).unwrap();
        let e = op.matrix().entries();
        assert_eq!(e.len(), 21);
        for (k, &(r, c, v)) in e.iter().enumerate() {
            assert_eq!((r as usize, c as usize, v), (k, k, 1.0));
        }
    }

    #[test]
    fn quarter_turns_are_permutations() {
        let op = RotationOperator::new(5, 4).unwrap();
        for i in 0..4 {
            let entries: Vec<_> = op.block(i).collect();
            assert_eq!(entries.len(), 21);
            assert!(entries.iter().all(|e| e.2 == 1.0));
            let mut cols: Vec<_> = entries.iter().map(|e| e.1).collect();
            cols.sort();
            assert_eq!(cols, (0..21).collect::<Vec<_>>());
        }
    }

    #[test]
    fn center_delta_is_fixed() {
        for nn in [4, 8] {
            let op = RotationOperator::new(5, nn).unwrap();
            let center = op.mask().index_of(2, 2).unwrap();
            let mut base = Tensor::<f64>::zeros(&[21]);
            base.data_mut()[center] = 1.0;
            let stack = rotate_kernel_stack(&base, &op).unwrap();
            assert_eq!(stack.shape(), &[5, 5, nn, 1]);
            for i in 0..nn {
                assert_eq!(stack.get(&[2, 2, i, 0]), 1.0);
                let grid_exact = 4 * i % nn == 0;
                for r in 0..5 {
                    for q in 0..5 {
                        let v = stack.get(&[r, q, i, 0]);
                        if (r, q) == (2, 2) {
                            continue;
                        }
                        if grid_exact {
                            assert_eq!(v, 0.0);
                        } else {
                            // Off-grid targets still pull a bilinear share of the center.
                            assert!((0.0..0.5).contains(&v));
                        }
                    }
                }
            }
        }
        // At 45° the axis neighbor (1, 0) samples (√½, −√½), a corner share of the center.
        let op = RotationOperator::new(5, 8).unwrap();
        let mut base = Tensor::<f64>::zeros(&[21]);
        base.data_mut()[op.mask().index_of(2, 2).unwrap()] = 1.0;
        let stack = rotate_kernel_stack(&base, &op).unwrap();
        let share = (1.0 - std::f64::consts::FRAC_1_SQRT_2).powi(2);
        assert!((stack.get(&[2, 3, 1, 0]) - share).abs() < 1e-12);
    }

    #[test]
    fn off_center_delta_visits_axis_neighbors() {
        let op = RotationOperator::new(5, 4).unwrap();
        // Storage (2, 3) is math offset (1, 0).
        let mut base = Tensor::<f64>::zeros(&[21]);
        base.data_mut()[op.mask().index_of(2, 3).unwrap()] = 1.0;
        let stack = rotate_kernel_stack(&base, &op).unwrap();
        // Counterclockwise quarter turns: (1,0) → (0,1) → (−1,0) → (0,−1).
        let expected = [(2, 3), (1, 2), (2, 1), (3, 2)];
        for (i, &(r, q)) in expected.iter().enumerate() {
            assert_eq!(stack.get(&[r, q, i, 0]), 1.0);
            let total: f64 = (0..25).map(|k| stack.get(&[k / 5, k % 5, i, 0])).sum();
            assert_eq!(total, 1.0);
        }
    }

    #[test]
    fn rows_are_subunit_and_nonnegative() {
        for n in [3, 5, 7] {
            for nn in [3, 6, 8, 16] {
                let op = RotationOperator::new(n, nn).unwrap();
                let m = op.mask().len();
                let mut sums = vec![0.0; nn * m];
                for &(r, _, v) in op.matrix().entries() {
                    assert!(v > 0.0 && v <= 1.0);
                    sums[r as usize] += v;
                }
                assert!(sums.iter().all(|&s| s <= 1.0 + 1e-12));
                assert!(op.matrix().nnz() <= 4 * nn * m);
            }
        }
    }

    #[test]
    fn rows_with_full_footprint_sum_to_one() {
        let op = RotationOperator::new(5, 8).unwrap();
        let frame = GridFrame::new(5, 5);
        let m = op.mask().len();
        for i in 0..8 {
            let inv = rotation_matrix(-op.sampling().angle(i));
            for (p, &(r, q)) in op.mask().positions().iter().enumerate() {
                let (sr, sq) = frame.to_storage(mat_vec(&inv, frame.to_math(r as f64, q as f64)));
                let inside = bilinear_taps(sr, sq)
                    .iter()
                    .all(|&(tr, tq, w)| w == 0.0 || op.mask().contains(tr, tq));
                if inside {
                    let s: f64 = op
                        .matrix()
                        .entries()
                        .iter()
                        .filter(|e| e.0 as usize == i * m + p)
                        .map(|e| e.2)
                        .sum();
                    assert!((s - 1.0).abs() < 1e-12, "block {i} row {p} sums to {s}");
                }
            }
        }
    }

    #[test]
    fn base_length_mismatch_is_rejected() {
        let op = RotationOperator::new(3, 4).unwrap();
        assert!(rotate_kernel_stack(&Tensor::<f64>::zeros(&[8]), &op).is_err());
    }

    #[test]
    fn dump_lists_triplets() {
        let op = RotationOperator::new(1, 2).unwrap();
        let dump = op.dump();
        let lines: Vec<_> = dump.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("1 0 1."));
    }
}
