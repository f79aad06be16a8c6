//! Unconstrained parameterization of the GP hyperparameters Υ = (Σ, γ²):
//! the lower Cholesky factor of Σ with log-diagonal, followed by log γ².

use nalgebra::DMatrix;

use crate::gp_core::MultiOutputCov;

pub fn n_params(q: usize) -> usize {
    q * (q + 1) / 2 + 1
}

pub fn to_params(cov: &MultiOutputCov) -> Vec<f64> {
    let q = cov.q();
    let l = crate::linalg::Chol::new(&cov.sigma)
        .map(|c| c.l())
        .unwrap_or_else(|_| DMatrix::from_diagonal(&cov.sigma.diagonal().map(|v| v.abs().max(1e-12).sqrt())));
    let mut out = Vec::with_capacity(n_params(q));
    for i in 0..q {
        for j in 0..=i {
            out.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
        }
    }
    out.push(cov.kernel.gamma2.ln());
    out
}

pub fn chol_from_params(q: usize, p: &[f64]) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    let mut k = 0;
    for i in 0..q {
        for j in 0..=i {
            l[(i, j)] = if i == j { p[k].exp() } else { p[k] };
            k += 1;
        }
    }
    l
}

pub fn from_params(template: &MultiOutputCov, p: &[f64]) -> MultiOutputCov {
    let q = template.q();
    let l = chol_from_params(q, p);
    let mut out = template.clone();
    out.sigma = &l * l.transpose();
    out.kernel.gamma2 = p[n_params(q) - 1].exp();
    out
}

/// Chain rule from ∂F/∂Σ (entrywise, unsymmetrized) and ∂F/∂log γ² to the
/// parameter vector.
pub fn chain(cov: &MultiOutputCov, p: &[f64], d_sigma: &DMatrix<f64>, d_loggamma: f64) -> Vec<f64> {
    let q = cov.q();
    let l = chol_from_params(q, p);
    let dl = (d_sigma + d_sigma.transpose()) * &l;
    let mut out = Vec::with_capacity(n_params(q));
    for i in 0..q {
        for j in 0..=i {
            out.push(if i == j { dl[(i, i)] * l[(i, i)] } else { dl[(i, j)] });
        }
    }
    out.push(d_loggamma);
    out
}
