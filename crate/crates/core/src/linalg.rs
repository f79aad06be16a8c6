//! Dense linear-algebra helpers: jittered Cholesky, fast SPD inverses,
//! and small symmetric-matrix utilities.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{HegpError, Result};

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-6;

/// Cholesky factor together with the jitter that was needed to obtain it.
#[derive(Clone, Debug)]
pub struct Chol {
    inner: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Chol {
    /// Factor `a`, adding ε·mean(diag) with ε doubling from 1e-10 to 1e-6 on failure.
    pub fn new(a: &DMatrix<f64>) -> Result<Chol> {
        if a.nrows() != a.ncols() {
            return Err(HegpError::Dimension(format!("cholesky of {}x{}", a.nrows(), a.ncols())));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(HegpError::LinAlg("non-finite entry in matrix to factor".into()));
        }
        if let Some(c) = Cholesky::new(a.clone()) {
            return Ok(Chol { inner: c, jitter: 0.0 });
        }
        let n = a.nrows();
        let scale = (a.diagonal().sum() / n as f64).abs().max(f64::MIN_POSITIVE);
        let mut eps = JITTER_START;
        while eps <= JITTER_MAX * (1.0 + 1e-12) {
            let mut b = a.clone();
            for i in 0..n {
                b[(i, i)] += eps * scale;
            }
            if let Some(c) = Cholesky::new(b) {
                return Ok(Chol { inner: c, jitter: eps * scale });
            }
            eps *= 2.0;
        }
        Err(HegpError::LinAlg(format!("matrix of size {n} not positive definite within jitter budget")))
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.inner.l()
    }

    /// Storage of the factor; only the lower triangle is meaningful.
    pub fn l_ref(&self) -> &DMatrix<f64> {
        self.inner.l_dirty()
    }

    pub fn dim(&self) -> usize {
        self.inner.l_dirty().nrows()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.inner.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.inner.solve(b)
    }

    /// Solves L x = b.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.l();
        l.solve_lower_triangular(b).expect("cholesky factor has positive diagonal")
    }

    pub fn logdet(&self) -> f64 {
        let l = self.inner.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Full inverse via a blocked triangular inverse and one symmetric product.
    pub fn inverse(&self) -> DMatrix<f64> {
        let linv = lower_tri_inverse(&self.l());
        let mut out = linv.transpose() * &linv;
        symmetrize(&mut out);
        out
    }

    /// Inverse of the lower factor.
    pub fn l_inverse(&self) -> DMatrix<f64> {
        lower_tri_inverse(&self.l())
    }
}

/// Inverse of a lower-triangular matrix by recursive 2x2 blocking.
pub fn lower_tri_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= 64 {
        let mut out = DMatrix::<f64>::identity(n, n);
        for j in 0..n {
            for i in j..n {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for k in j..i {
                    s -= l[(i, k)] * out[(k, j)];
                }
                out[(i, j)] = s / l[(i, i)];
            }
        }
        return out;
    }
    let k = n / 2;
    let l11 = l.view((0, 0), (k, k)).clone_owned();
    let l21 = l.view((k, 0), (n - k, k)).clone_owned();
    let l22 = l.view((k, k), (n - k, n - k)).clone_owned();
    let x11 = lower_tri_inverse(&l11);
    let x22 = lower_tri_inverse(&l22);
    let x21 = -(&x22 * (&l21 * &x11));
    let mut out = DMatrix::<f64>::zeros(n, n);
    out.view_mut((0, 0), (k, k)).copy_from(&x11);
    out.view_mut((k, 0), (n - k, k)).copy_from(&x21);
    out.view_mut((k, k), (n - k, n - k)).copy_from(&x22);
    out
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize(&mut out);
    out
}

/// Inverse of a small symmetric positive-definite matrix.
pub fn spd_inv(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(Chol::new(m)?.inverse())
}

pub fn spd_logdet(m: &DMatrix<f64>) -> Result<f64> {
    Ok(Chol::new(m)?.logdet())
}

/// Clamps eigenvalues from below at `floor`.
pub fn eigen_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrized(m));
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return m.clone();
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrized(m)).eigenvalues.min()
}

/// Symmetric square root of a PSD matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrized(m));
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// tr(A B) for square matrices of equal size without forming the product.
pub fn trace_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

/// Frobenius inner product Σ A_ij B_ij.
pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn rel_frob_err(a: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    (a - reference).norm() / reference.norm().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn blocked_inverse_matches_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 5, 64, 65, 150] {
            let a = random_spd(n, &mut rng);
            let inv = Chol::new(&a).unwrap().inverse();
            let reference = a.clone().try_inverse().unwrap();
            assert!(rel_frob_err(&inv, &reference) < 1e-9, "n={n}");
        }
    }

    #[test]
    fn jitter_rescues_singular_psd() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        let c = Chol::new(&a).unwrap();
        assert!(c.jitter > 0.0);
        assert!(c.jitter <= JITTER_MAX * a.diagonal().mean() * 1.000001);
    }

    #[test]
    fn indefinite_matrix_is_an_error() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(Chol::new(&a), Err(HegpError::LinAlg(_))));
    }

    #[test]
    fn logdet_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert!((Chol::new(&a).unwrap().logdet() - 6f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn eigen_floor_lifts_small_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = eigen_floor(&a, 1e-3);
        assert!(min_eigenvalue(&f) >= 1e-3 - 1e-12);
    }
}
