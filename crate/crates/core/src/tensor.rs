//! Dense row-major tensors and convolution geometry.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, SubAssign};
use std::sync::Arc;

use ndarray::LinalgScalar;
use num_traits::Float;
use rand::Rng;

use crate::binio::{self, ByteReader};
use crate::error::{Error, Result};

/// Element type of a tensor. Training runs in `f32`, gradient checks in `f64`.
pub trait Scalar:
    Float + LinalgScalar + AddAssign + SubAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub const MAX_RANK: usize = 5;
const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

/// A dense n-dimensional array. The buffer is reference counted, so
/// reshapes and clones share storage until one side is mutated.
#[derive(Clone, Debug)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: PartialEq> PartialEq for Tensor<F> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::shape(
                "tensor",
                format!("rank {} exceeds {MAX_RANK}", shape.len()),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn scalar(value: F) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| F::of(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<F> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        self.data[0]
    }

    /// Reinterpret the buffer under a new shape without copying.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.len() > MAX_RANK {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn shares_storage(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> F {
        self.sum() / F::of(self.numel() as f64)
    }

    pub fn max_abs(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |acc, v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn min_max(&self) -> (F, F) {
        self.data.iter().fold((F::infinity(), F::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum()
    }

    /// Write in the `TNSR` format: magic, u32 rank, u64 extents, f32 payload.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        binio::write_u32(w, self.rank() as u32)?;
        for &d in &self.shape {
            binio::write_u64(w, d as u64)?;
        }
        binio::write_f32s(w, self.data.iter().map(|v| v.as_f64() as f32))?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut ByteReader<R>) -> Result<Self> {
        r.expect_magic(TENSOR_MAGIC)?;
        let rank_at = r.offset();
        let rank = r.read_u32()? as usize;
        if rank > MAX_RANK {
            return Err(Error::parse(rank_at, format!("tensor rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = r.offset();
            let d = r.read_u64()?;
            if d > (1 << 32) {
                return Err(Error::parse(at, format!("implausible extent {d}")));
            }
            shape.push(d as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.read_f32_vec(n)?;
        Ok(Tensor::from_parts(shape, data.into_iter().map(|v| F::of(v as f64)).collect()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let t = Self::read_from(&mut r)?;
        r.at_eof()?;
        Ok(t)
    }
}

/// Geometry of a 2D (cross-correlation) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: [kernel, kernel],
            stride: [stride, stride],
            padding: [padding, padding],
        }
    }

    /// 4x4 kernel, stride 2, padding 1: doubles both spatial extents.
    pub fn upsample2x(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 4, 2, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride.contains(&0) {
            return Err(Error::config(format!("conv stride must be >= 1, got {:?}", self.stride)));
        }
        if self.kernel.contains(&0) || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    /// Output extent of a forward convolution along `axis` (0 = H, 1 = W).
    /// Uses floor division on the stride, as is conventional.
    pub fn output_extent(&self, input: usize, axis: usize) -> Result<usize> {
        self.validate()?;
        let padded = input + 2 * self.padding[axis];
        let k = self.kernel[axis];
        if padded < k {
            return Err(Error::config(format!(
                "conv axis {} input {input} with padding {} is smaller than kernel {k}",
                axis_name(axis),
                self.padding[axis]
            )));
        }
        Ok((padded - k) / self.stride[axis] + 1)
    }

    /// Output extent of the transposed convolution, `(in - 1) * s - 2p + k`.
    pub fn transpose_output_extent(&self, input: usize, axis: usize) -> Result<usize> {
        self.validate()?;
        let grown = (input.max(1) - 1) * self.stride[axis] + self.kernel[axis];
        let trim = 2 * self.padding[axis];
        if input == 0 || grown <= trim {
            return Err(Error::config(format!(
                "transpose conv axis {} input {input} does not produce a positive extent",
                axis_name(axis)
            )));
        }
        Ok(grown - trim)
    }
}

pub(crate) fn axis_name(axis: usize) -> &'static str {
    match axis {
        0 => "H",
        1 => "W",
        _ => "?",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn reshape_shares_storage() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        let v = t.reshape(&[6, 4]).unwrap();
        assert!(t.shares_storage(&v));
        assert_eq!(v.data(), t.data());
        assert!(t.reshape(&[5, 5]).is_err());
    }

    #[test]
    fn decoder_shape_algebra() {
        let up = ConvSpec::upsample2x(4, 4);
        let mut s = 56;
        for _ in 0..2 {
            s = up.transpose_output_extent(s, 0).unwrap();
        }
        assert_eq!(s, 224);
        let mut s = 7;
        for _ in 0..3 {
            s = up.transpose_output_extent(s, 1).unwrap();
        }
        assert_eq!(s, 56);
    }

    #[test]
    fn conv_extent_errors() {
        let bad = ConvSpec { stride: [0, 1], ..ConvSpec::new(1, 1, 3, 1, 1) };
        assert!(bad.output_extent(8, 0).is_err());
        let big = ConvSpec::new(1, 1, 7, 1, 0);
        let err = big.output_extent(3, 1).unwrap_err().to_string();
        assert!(err.contains("axis W"), "{err}");
        assert_eq!(ConvSpec::new(1, 1, 3, 1, 1).output_extent(9, 0).unwrap(), 9);
        // padding eats the whole output
        assert!(ConvSpec::new(1, 1, 1, 1, 1).transpose_output_extent(1, 0).is_err());
        assert!(ConvSpec::upsample2x(1, 1).transpose_output_extent(0, 0).is_err());
    }

    #[test]
    fn serialization_layout() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"TNSR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), 32);
        assert_eq!(Tensor::<f32>::from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let t = Tensor::<f32>::ones(&[4]);
        let bytes = t.to_bytes();
        match Tensor::<f32>::from_bytes(&bytes[..bytes.len() - 2]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected parse error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::<f32>::from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
    }
}
