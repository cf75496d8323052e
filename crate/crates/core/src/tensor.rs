//! Dense row-major tensors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;

/// Dense N-dimensional array stored row-major.
///
/// Tensors are plain values; gradients live on the [`Tape`](crate::autograd::Tape)
/// that recorded the computation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds from `f64` literals, converting to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor { shape, data }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!("item() on shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let st = strides(&self.shape);
        let off: usize = index.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "zip of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::from_usize(self.data.len())
    }

    pub fn max_all(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_all(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    /// Inner product of the flattened data.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "dot of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Copies channel plane `(b, c)` of a rank-4 tensor.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let [_, ch, h, w] = dims4(&self.shape);
        let hw = h * w;
        let off = (b * ch + c) * hw;
        &self.data[off..off + hw]
    }
}

/// Unpacks a rank-4 shape. Panics on other ranks; callers validate first.
pub(crate) fn dims4(shape: &[usize]) -> [usize; 4] {
    match shape {
        [a, b, c, d] => [*a, *b, *c, *d],
        _ => panic!("expected rank-4 shape, got {shape:?}"),
    }
}

pub(crate) fn expect_rank4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "{what} expects B×C×H×W, got {shape:?}"
        )));
    }
    Ok(dims4(shape))
}

/// Output shape of broadcasting `a` against `b`.
///
/// Shapes are right-aligned; the shorter one is padded with leading 1s and
/// any extent-1 axis stretches to match.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let da = padded_dim(a, rank, i);
        let db = padded_dim(b, rank, i);
        let d = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        };
        out.push(d);
    }
    Ok(out)
}

fn padded_dim(shape: &[usize], rank: usize, i: usize) -> usize {
    let lead = rank - shape.len();
    if i < lead {
        1
    } else {
        shape[i - lead]
    }
}

/// Strides of `shape` viewed inside `out` with zero stride on stretched axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let own = strides(shape);
    let lead = rank - shape.len();
    (0..rank)
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Visits every output position of a broadcast with the matching input offsets.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(&out[..rank - 1]);
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut o = 0;
    for _ in 0..outer {
        let mut oa: usize = idx.iter().zip(sa).map(|(i, s)| i * s).sum();
        let mut ob: usize = idx.iter().zip(sb).map(|(i, s)| i * s).sum();
        for _ in 0..inner {
            f(o, oa, ob);
            o += 1;
            oa += ia_step;
            ob += ib_step;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped like a broadcast output) back down to `target`.
pub(crate) fn sum_to_shape<T: Real>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let st = broadcast_strides(target, grad.shape());
    let mut out = vec![T::zero(); numel(target)];
    let zero = vec![0; st.len()];
    for_each_broadcast(grad.shape(), &st, &zero, |o, it, _| {
        out[it] += grad.data[o];
    });
    Tensor {
        shape: target.to_vec(),
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2], &[1]).unwrap(), vec![2]);
        assert_eq!(
            broadcast_shape(&[2, 3, 4, 4], &[1, 3, 1, 1]).unwrap(),
            vec![2, 3, 4, 4]
        );
        assert_eq!(broadcast_shape(&[4, 4], &[2, 1, 4]).unwrap(), vec![2, 4, 4]);
        assert!(broadcast_shape(&[2, 3], &[3, 2]).is_err());
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn sum_to_shape_reduces_stretched_axes() {
        let g = Tensor::<f64>::ones(vec![2, 3, 2, 2]);
        let r = sum_to_shape(&g, &[1, 3, 1, 1]);
        assert_eq!(r.shape(), &[1, 3, 1, 1]);
        assert!(r.data().iter().all(|&v| v == 8.0));
        let r = sum_to_shape(&g, &[2]);
        assert_eq!(r.data(), &[12.0, 12.0]);
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        let t = Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }
}
