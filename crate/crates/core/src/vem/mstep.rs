//! M-step updates: closed-form base matrices L and Student-t scales P, the
//! mean function, third-level parameters Θ, and the standard Υ update.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{HegpError, Result};
use crate::gp_core::{vec_dm, MeanFunction, MultiOutputCov};
use crate::linalg::{eigen_floor, symmetrize, Chol};
use crate::optim::{maximize_scaled, AscentConfig};
use crate::precision::{row, MixtureComponent, PrecisionMixture, PrecisionPrior};
use crate::third_level::{ObsContext, ObservationModel, StateSpaceLink};
use crate::vem::backend::{kron_grad, Backend, Omega};
use crate::vem::state::VariationalState;
use crate::vem::upsilon;

/// Total weight below which a component is treated as unsupported.
const MIN_COMPONENT_WEIGHT: f64 = 1e-300;

/// 𝔸ₙ (Q×Q), 𝔹ₙ (Q×NQ) for every datum, and the dense Ω.
#[derive(Clone, Debug)]
pub struct MStepKernels {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub omega: DMatrix<f64>,
}

impl MStepKernels {
    /// Mₙ = 𝔸ₙ + 𝔹ₙ Ω 𝔹ₙᵀ.
    pub fn m_blocks(&self) -> Vec<DMatrix<f64>> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| {
                let mut m = a + b * &self.omega * b.transpose();
                symmetrize(&mut m);
                m
            })
            .collect()
    }
}

/// Explicit M-step kernels; O((NQ)²) memory, meant for small problems and tests.
pub fn mstep_kernels(backend: &Backend, om: &Omega) -> MStepKernels {
    let (a, b) = backend.mstep_kernels();
    MStepKernels { a, b, omega: om.dense() }
}

/// Weight vectors of one component at every training covariate.
pub fn component_weights(c: &MixtureComponent, x: &DMatrix<f64>) -> Vec<DVector<f64>> {
    (0..x.nrows()).map(|n| c.weights(&row(x, n))).collect()
}

fn sub_block(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

/// λ_d = (Γ₀ + Σₙ ω_nd Mₙ) / (c + Σₙ ω_nd), with Γ₀ = 0, c = 0 for the flat
/// prior and c = ν₀ + k + 1 for the inverse-Wishart prior. Components with
/// no weight keep their previous matrix.
pub fn weighted_update(
    weights: &[DVector<f64>],
    m: &[DMatrix<f64>],
    previous: &[DMatrix<f64>],
    prior: &PrecisionPrior,
) -> Vec<DMatrix<f64>> {
    let k = m.first().map_or(0, |b| b.nrows());
    (0..previous.len())
        .map(|d| {
            let mut num = DMatrix::zeros(k, k);
            let mut total = 0.0;
            for (w, mn) in weights.iter().zip(m) {
                if w[d] != 0.0 {
                    num += mn * w[d];
                    total += w[d];
                }
            }
            if total < MIN_COMPONENT_WEIGHT {
                log::warn!("induced covariate {d} carries no weight; keeping its base matrix");
                return previous[d].clone();
            }
            let mut lam = match prior {
                PrecisionPrior::Flat => num / total,
                PrecisionPrior::InverseWishart { gamma0, nu0 } => (gamma0 + num) / (nu0 + k as f64 + 1.0 + total),
            };
            symmetrize(&mut lam);
            let floor = 1e-10 * lam.trace().abs().max(f64::MIN_POSITIVE) / k as f64;
            eigen_floor(&lam, floor)
        })
        .collect()
}

/// Closed-form update of every base matrix from the per-datum Mₙ.
pub fn mstep_l(
    mixture: &PrecisionMixture,
    m: &[DMatrix<f64>],
    x: &DMatrix<f64>,
    prior: &PrecisionPrior,
) -> Vec<Vec<DMatrix<f64>>> {
    mixture
        .components
        .iter()
        .map(|c| {
            let w = component_weights(c, x);
            let sub: Vec<DMatrix<f64>> = m.iter().map(|mn| sub_block(mn, &c.outputs)).collect();
            weighted_update(&w, &sub, &c.lambdas, &prior.restrict(&c.outputs))
        })
        .collect()
}

/// φ_d = Σₙ ω_nd ξₙ²[(yₙ − ηₙ)(yₙ − ηₙ)ᵀ + Ψₙ] / Σₙ ω_nd on observed
/// coordinates; rows and columns of missing coordinates take the current Φ(xₙ).
pub fn mstep_p(
    mixture: &PrecisionMixture,
    phis: &[Vec<DMatrix<f64>>],
    data: &Dataset,
    state: &VariationalState,
    phi_now: &[DMatrix<f64>],
) -> Result<Vec<Vec<DMatrix<f64>>>> {
    let xi = state.xi.as_ref().ok_or_else(|| HegpError::Config("scale update needs ξ".into()))?;
    let q = data.q();
    let t: Vec<DMatrix<f64>> = (0..data.n())
        .map(|n| {
            let r = DVector::from_fn(q, |k, _| data.y[(n, k)] - state.eta[(n, k)]);
            let full = (&r * r.transpose() + &state.psi[n]) * (xi[n] * xi[n]);
            DMatrix::from_fn(q, q, |i, j| {
                if data.mask.is_observed(n, i) && data.mask.is_observed(n, j) {
                    full[(i, j)]
                } else {
                    phi_now[n][(i, j)]
                }
            })
        })
        .collect();
    Ok(mixture
        .components
        .iter()
        .zip(phis)
        .map(|(c, prev)| {
            let w = component_weights(c, &data.x);
            let sub: Vec<DMatrix<f64>> = t.iter().map(|m| sub_block(m, &c.outputs)).collect();
            weighted_update(&w, &sub, prev, &PrecisionPrior::Flat)
        })
        .collect())
}

/// Frozen draws f̃ₙ⁽ᵐ⁾ = ηₙ + chol(Ψₙ) εₙ⁽ᵐ⁾.
pub fn frozen_samples(state: &VariationalState, eps: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    (0..state.n())
        .map(|n| {
            let c = Chol::new(&state.psi[n])?.l();
            let eta = state.eta.row(n).transpose();
            let mut s = &c * &eps[n];
            for mut col in s.column_iter_mut() {
                col += &eta;
            }
            Ok(s)
        })
        .collect()
}

/// (1/M) Σₘ Σₙ log p(yₙ | f̃ₙ⁽ᵐ⁾; Θ) and its gradient in Θ.
pub fn theta_objective(
    link: &StateSpaceLink,
    data: &Dataset,
    samples: &[DMatrix<f64>],
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut l = link.clone();
    l.set_theta(theta);
    let mut value = 0.0;
    let mut grad = DVector::zeros(theta.len());
    for (n, s) in samples.iter().enumerate() {
        let y = data.y_row(n);
        let ctx = ObsContext { scale: None, observed: Some(data.mask.row(n)) };
        let inv = 1.0 / s.ncols() as f64;
        for f in s.column_iter() {
            let f: Vec<f64> = f.iter().copied().collect();
            value += inv * l.loglik(&y, &f, &ctx)?;
            grad += l.grad_theta(&y, &f, &ctx)? * inv;
        }
    }
    Ok((value, grad.iter().copied().collect()))
}

/// Gradient ascent in Θ on the frozen-sample objective.
pub fn mstep_theta(
    link: &StateSpaceLink,
    data: &Dataset,
    samples: &[DMatrix<f64>],
    iters: usize,
) -> Result<Vec<f64>> {
    if link.theta.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = AscentConfig { max_iter: iters, init_step: 0.05, ..Default::default() };
    let scales = vec![1.0; link.theta.len()];
    let res = maximize_scaled(|t| theta_objective(link, data, samples, t), &link.theta, &scales, None, &cfg)?;
    Ok(res.x)
}

/// Generalized least squares for the mean parameters given η.
pub fn gls_mean(mean: &MeanFunction, x: &DMatrix<f64>, eta: &DMatrix<f64>, backend: &Backend) -> Result<MeanFunction> {
    let (n, q, p) = (x.nrows(), eta.ncols(), x.ncols());
    let nb = mean.n_basis(p);
    if nb == 0 {
        return Ok(mean.clone());
    }
    let mut b = DMatrix::zeros(n * q, q * nb);
    for i in 0..n {
        let basis = mean.basis(&row(x, i));
        for k in 0..q {
            for (j, v) in basis.iter().enumerate() {
                b[(i * q + k, k * nb + j)] = *v;
            }
        }
    }
    let sb = backend.solve_mat(&b);
    let mut a = b.transpose() * &sb;
    symmetrize(&mut a);
    let rhs = sb.tr_mul(&vec_dm(eta));
    let beta = Chol::new(&a)?.solve_vec(&rhs);
    let mut out = mean.clone();
    out.set_params(beta.as_slice());
    Ok(out)
}

/// Expected prior second moment ℂ = 𝕍 − 𝕍(S⁻¹ − S⁻¹ΩS⁻¹)𝕍 of g_X under the
/// current iterate.
pub fn expected_g_moment(backend: &Backend, cov: &MultiOutputCov, x: &DMatrix<f64>, om: &Omega) -> Result<DMatrix<f64>> {
    let Backend::Dense(b) = backend else {
        return Err(HegpError::Config("the standard Υ update needs the dense backend".into()));
    };
    let v = cov.gram_dm(x, x)?;
    let g = &b.s_inv - &b.s_inv * om.dense() * &b.s_inv;
    let mut c = &v - &v * g * &v;
    symmetrize(&mut c);
    Ok(c)
}

/// −½tr(𝕍⁻¹ℂ) − ½log|𝕍| and its gradient; fails when 𝕍_XX needs jitter.
pub fn standard_upsilon_objective(
    template: &MultiOutputCov,
    x: &DMatrix<f64>,
    c: &DMatrix<f64>,
    p: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if p.iter().any(|v| !v.is_finite() || v.abs() > 700.0) {
        return Err(HegpError::Domain("hyperparameter out of range".into()));
    }
    let cov = upsilon::from_params(template, p);
    let v = cov.gram_dm(x, x)?;
    let ch = Chol::new(&v)?;
    if ch.jitter > 0.0 {
        return Err(HegpError::LinAlg("prior covariance of g_X is singular".into()));
    }
    let vinv = ch.inverse();
    let vc = &vinv * c;
    let value = -0.5 * vc.trace() - 0.5 * ch.logdet();
    let h = &vc * &vinv - &vinv;
    let g = kron_grad(&cov, x, &h);
    Ok((value, upsilon::chain(&cov, p, &g.d_sigma, g.d_loggamma)))
}

/// Ascent on E_q[log p(g_X | Υ)] with ℂ fixed at the current iterate.
pub fn mstep_upsilon(
    cov: &MultiOutputCov,
    x: &DMatrix<f64>,
    backend: &Backend,
    om: &Omega,
    steps: usize,
    steps0: Option<&[f64]>,
) -> Result<(MultiOutputCov, Vec<f64>)> {
    let c = expected_g_moment(backend, cov, x, om)?;
    let p0 = upsilon::to_params(cov);
    let cfg = AscentConfig { max_iter: steps, init_step: 0.05, max_step: 0.5, ..Default::default() };
    let scales = vec![1.0; p0.len()];
    let res = maximize_scaled(|p| standard_upsilon_objective(cov, x, &c, p), &p0, &scales, steps0, &cfg)?;
    Ok((upsilon::from_params(cov, &res.x), res.steps))
}
