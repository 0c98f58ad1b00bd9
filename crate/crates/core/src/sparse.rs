//! Coordinate-format sparse matrices used to expand shared kernel weights.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// A sparse matrix stored as `(row, col, value)` triplets sorted row-major.
///
/// Applying it maps a flat input vector of length `cols` to a tensor of shape
/// `out_shape` (whose size is `rows`).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap<T> {
    rows: usize,
    cols: usize,
    out_shape: Vec<usize>,
    entries: Vec<(u32, u32, T)>,
}

impl<T: Scalar> SparseMap<T> {
    /// Builds a map from unsorted triplets. Duplicate coordinates are summed.
    pub fn from_triplets(
        out_shape: &[usize],
        cols: usize,
        mut entries: Vec<(u32, u32, T)>,
    ) -> Result<Self> {
        let rows: usize = out_shape.iter().product();
        if let Some(&(r, c, _)) = entries
            .iter()
            .find(|&&(r, c, _)| r as usize >= rows || c as usize >= cols)
        {
            return Err(shape_err(format!(
                "triplet ({r}, {c}) outside a {rows}x{cols} matrix"
            )));
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut merged: Vec<(u32, u32, T)> = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 = last.2 + v,
                _ => merged.push((r, c, v)),
            }
        }
        merged.retain(|e| e.2 != T::zero());
        Ok(Self {
            rows,
            cols,
            out_shape: out_shape.to_vec(),
            entries: merged,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn entries(&self) -> &[(u32, u32, T)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// `out = M · input`, reshaped to `out_shape`.
    pub fn apply(&self, input: &[T]) -> Result<Tensor<T>> {
        if input.len() != self.cols {
            return Err(shape_err(format!(
                "sparse map expects {} inputs, got {}",
                self.cols,
                input.len()
            )));
        }
        let mut out = vec![T::zero(); self.rows];
        for &(r, c, v) in &self.entries {
            out[r as usize] = out[r as usize] + v * input[c as usize];
        }
        Tensor::new(&self.out_shape, out)
    }

    /// `Mᵀ · grad`, the adjoint used in the backward pass.
    pub fn apply_transpose(&self, grad: &[T]) -> Result<Vec<T>> {
        if grad.len() != self.rows {
            return Err(shape_err(format!(
                "sparse map transpose expects {} inputs, got {}",
                self.rows,
                grad.len()
            )));
        }
        let mut out = vec![T::zero(); self.cols];
        for &(r, c, v) in &self.entries {
            out[c as usize] = out[c as usize] + v * grad[r as usize];
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> SparseMap<U> {
        SparseMap {
            rows: self.rows,
            cols: self.cols,
            out_shape: self.out_shape.clone(),
            entries: self
                .entries
                .iter()
                .map(|&(r, c, v)| (r, c, U::from_f64_lossy(v.to_f64_lossy())))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_merge_and_sort() {
        let m = SparseMap::<f64>::from_triplets(
            &[2],
            2,
            vec![(1, 0, 1.0), (0, 1, 0.5), (1, 0, 2.0)],
        )
        .unwrap();
        assert_eq!(m.entries(), &[(0, 1, 0.5), (1, 0, 3.0)]);
        assert_eq!(m.apply(&[2.0, 4.0]).unwrap().data(), &[2.0, 6.0]);
        assert_eq!(m.apply_transpose(&[1.0, 1.0]).unwrap(), vec![3.0, 0.5]);
    }

    #[test]
    fn out_of_range_triplet_rejected() {
        assert!(SparseMap::<f32>::from_triplets(&[2], 2, vec![(2, 0, 1.0)]).is_err());
        let m = SparseMap::<f32>::from_triplets(&[1], 1, vec![]).unwrap();
        assert!(m.apply(&[1.0, 2.0]).is_err());
    }
}
