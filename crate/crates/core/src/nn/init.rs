use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Semi-orthogonal `rows × cols` matrix from a seeded Gaussian draw.
///
/// The Gaussian matrix is orthonormalized by QR with column signs fixed by
/// `sign(diag(R))`; a square result is further flipped to determinant +1 so
/// it is a proper rotation. Wide outputs have orthonormal rows, tall outputs
/// orthonormal columns.
pub fn orthogonal_init<T: Real>(rows: usize, cols: usize, seed: u64) -> Result<Tensor<T>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Domain(format!(
            "orthogonal_init of {rows}×{cols} matrix"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::<f64>::from_fn(tall, short, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if tall == short && q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    let m = if rows >= cols { q } else { q.transpose() };
    // nalgebra is column-major
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols)
            .map(|i| T::lit(m[(i / cols, i % cols)]))
            .collect(),
    )
}

/// Gaussian weights with std `sqrt(2 / fan_in)`.
pub fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::randn(shape.to_vec(), std, rng)
}
