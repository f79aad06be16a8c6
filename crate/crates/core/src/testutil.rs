//! Random instances shared by unit tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::gp_core::{Kernel, MultiOutputCov};
use crate::vem::backend::{CondPart, Omega};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_mat(r: usize, c: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// A Aᵀ/q + floor·I.
pub fn random_spd(q: usize, floor: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = normal_mat(q, q, rng);
    &a * a.transpose() / q as f64 + DMatrix::identity(q, q) * floor
}

pub fn random_x(n: usize, p: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0))
}

pub fn random_cov(q: usize, rng: &mut impl Rng) -> MultiOutputCov {
    let g2 = rng.random_range(0.3..1.5);
    MultiOutputCov::new(random_spd(q, 0.3, rng), Kernel::se(g2))
}

pub fn random_lambdas(n: usize, q: usize, rng: &mut impl Rng) -> Vec<DMatrix<f64>> {
    (0..n).map(|_| random_spd(q, 0.2, rng)).collect()
}

/// Ω with a mean part, Ψ blocks, and optionally a dense part over two coordinates.
pub fn random_omega(n: usize, q: usize, with_cond: bool, rng: &mut impl Rng) -> Omega {
    let d = DVector::from_fn(n * q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let psi = (0..n).map(|_| random_spd(q, 0.05, rng) * 0.3).collect();
    let cond = with_cond.then(|| CondPart { idx: vec![1, n * q - 2], cov: random_spd(2, 0.1, rng) });
    Omega { d, psi, cond }
}

/// Central finite difference of a scalar function at `x` along coordinate `i`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut a = x.to_vec();
    let mut b = x.to_vec();
    a[i] += h;
    b[i] -= h;
    (f(&a) - f(&b)) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(a: f64, reference: f64) -> f64 {
    (a - reference).abs() / reference.abs().max(1e-6)
}
