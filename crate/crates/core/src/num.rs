//! Scalar abstraction so the model and losses run in f32 (training,
//! persistence) or f64 (finite-difference gradient checks).

use ndarray::{Array1, Array2, LinalgScalar};
use rand::Rng;
use rand_distr::StandardNormal;

pub trait Real:
    LinalgScalar
    + num_traits::Float
    + num_traits::NumAssignOps
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Standard normal draw, always sampled in f64 so f32/f64 builds of the same
/// seed see the same underlying stream.
#[inline]
pub fn draw_normal<F: Real, R: Rng>(rng: &mut R) -> F {
    let x: f64 = rng.sample(StandardNormal);
    F::from_f64(x)
}

pub fn normal_vec<F: Real, R: Rng>(rng: &mut R, n: usize, std: f64) -> Array1<F> {
    Array1::from_iter((0..n).map(|_| F::from_f64(rng.sample::<f64, _>(StandardNormal) * std)))
}

pub fn normal_mat<F: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<F> {
    let data: Vec<F> = (0..rows * cols)
        .map(|_| F::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
}

/// Frobenius inner product of two equally shaped matrices.
pub fn frob_dot<F: Real>(a: &Array2<F>, b: &Array2<F>) -> F {
    debug_assert_eq!(a.dim(), b.dim());
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        acc += *x * *y;
    }
    acc
}

/// L2 norm of a matrix viewed as a flat vector.
pub fn frob_norm<F: Real>(a: &Array2<F>) -> F {
    frob_dot(a, a).sqrt()
}

pub fn cosine<F: Real>(a: &Array1<F>, b: &Array1<F>) -> F {
    let num = a.dot(b);
    let den = a.dot(a).sqrt() * b.dot(b).sqrt();
    if den == F::zero() {
        F::zero()
    } else {
        num / den
    }
}
