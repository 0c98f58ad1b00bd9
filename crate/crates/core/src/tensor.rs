//! Dense row-major tensors and the `SE2T` binary format.
//!
//! Layout is channel-last throughout: a batch of 2D images is `[B, H, W, C]`
//! and a batch of SE(2,N) images is `[B, H, W, N, C]`.

use std::fmt;
use std::io::{Read, Write};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Error, Result};

/// Floating point storage precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    /// Byte width, which doubles as the `SE2T` precision flag.
    pub fn width(self) -> u8 {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }

    pub fn from_width(width: u8) -> Result<Self> {
        match width {
            4 => Ok(Precision::Single),
            8 => Ok(Precision::Double),
            other => Err(Error::Format(format!("unknown precision flag {other}"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Single => f.write_str("single"),
            Precision::Double => f.write_str("double"),
        }
    }
}

/// Scalar types a [`Tensor`] can hold: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c ← a·b + beta·c` with `a: [m, k]`, `b: [k, n]` given by row and
    /// column strides and `c: [m, n]` contiguous row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], beta: Self, c: &mut [Self]);
}

fn check_gemm_extent(len: usize, rows: usize, cols: usize, s: [isize; 2]) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) as isize * s[0] + (cols - 1) as isize * s[1];
        assert!(s[0] >= 0 && s[1] >= 0 && (last as usize) < len, "gemm operand out of bounds");
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], beta: Self, c: &mut [Self]) {
        check_gemm_extent(a.len(), m, k, sa);
        check_gemm_extent(b.len(), k, n, sb);
        assert!(c.len() >= m * n, "gemm output too short");
        // SAFETY: the extent checks above keep every strided access in bounds.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), sa[0], sa[1], b.as_ptr(), sb[0], sb[1], beta, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], beta: Self, c: &mut [Self]) {
        check_gemm_extent(a.len(), m, k, sa);
        check_gemm_extent(b.len(), k, n, sb);
        assert!(c.len() >= m * n, "gemm output too short");
        // SAFETY: the extent checks above keep every strided access in bounds.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), sa[0], sa[1], b.as_ptr(), sb[0], sb[1], beta, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// A dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 32 {
            f.debug_struct("Tensor")
                .field("shape", &self.shape)
                .field("data", &self.data)
                .finish()
        } else {
            f.debug_struct("Tensor")
                .field("shape", &self.shape)
                .field("len", &self.data.len())
                .finish_non_exhaustive()
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the data under a new shape of equal size.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max))
    }

    /// Row-major linear index of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Takes item `b` along the leading axis.
    pub fn index_axis0(&self, b: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[b * inner..(b + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(shape_err(format!(
                    "stack of {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Serializes into `SE2T` bytes: magic, u32 rank, u32 dims, precision
    /// flag, then little-endian scalars.
    pub fn to_se2t_bytes(&self) -> Vec<u8> {
        let width = T::PRECISION.width() as usize;
        let mut out = Vec::with_capacity(4 + 4 * (1 + self.rank()) + 1 + width * self.len());
        out.extend_from_slice(SE2T_MAGIC);
        out.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(T::PRECISION.width());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn write_se2t<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.to_se2t_bytes())?;
        Ok(())
    }

    /// Reads one `SE2T` tensor. A file stored in the other precision is
    /// converted.
    pub fn read_se2t<R: Read>(r: &mut R) -> Result<Self> {
        let raw = RawTensor::read(r)?;
        Ok(raw.into_tensor())
    }
}

pub const SE2T_MAGIC: &[u8; 4] = b"SE2T";

/// An `SE2T` payload before conversion to a concrete precision.
#[derive(Debug, Clone)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub precision: Precision,
    bytes: Vec<u8>,
}

impl RawTensor {
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != SE2T_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let rank = read_u32(r)? as usize;
        if rank > 16 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let mut flag = [0u8; 1];
        read_exact(r, &mut flag)?;
        let precision = Precision::from_width(flag[0])?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let nbytes = len
            .checked_mul(precision.width() as usize)
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let mut bytes = Vec::new();
        r.take(nbytes as u64).read_to_end(&mut bytes)?;
        if bytes.len() != nbytes {
            return Err(Error::Format(format!(
                "truncated tensor data: expected {nbytes} bytes, got {}",
                bytes.len()
            )));
        }
        Ok(Self {
            shape,
            precision,
            bytes,
        })
    }

    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        let width = self.precision.width() as usize;
        let data = self
            .bytes
            .chunks_exact(width)
            .map(|c| match self.precision {
                Precision::Single => T::from_f64_lossy(f32::read_le(c) as f64),
                Precision::Double => T::from_f64_lossy(f64::read_le(c)),
            })
            .collect();
        Tensor {
            shape: self.shape,
            data,
        }
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("unexpected end of file".into())
        } else {
            Error::Io(e)
        }
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
