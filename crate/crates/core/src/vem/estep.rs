//! The ELBO, variational updates of Γ, the exact Gaussian E-step, and joint
//! ascent of the ELBO in Υ.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{HegpError, Result};
use crate::gp_core::{vec_dm, MultiOutputCov};
use crate::linalg::{psd_sqrt, spd_inv, symmetrize, Chol};
use crate::optim::{maximize_scaled, AscentConfig};
use crate::special::LN_2PI;
use crate::third_level::{InverseGamma, ObsContext, ObservationModel, ThirdLevel};
use crate::vem::backend::{Backend, CondPart, Omega};
use crate::vem::state::{HegpModel, VariationalState};
use crate::vem::upsilon;

/// Standard-normal draws per datum (Q×M), the second half negating the first.
pub fn antithetic_noise(n: usize, q: usize, m: usize, seed: u64) -> Vec<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = m.div_ceil(2).max(1);
    (0..n)
        .map(|_| {
            let mut e = DMatrix::zeros(q, 2 * half);
            for j in 0..half {
                for i in 0..q {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    e[(i, j)] = v;
                    e[(i, j + half)] = -v;
                }
            }
            e
        })
        .collect()
}

/// Everything the ELBO needs besides Γ.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub data: &'a Dataset,
    pub backend: &'a Backend,
    /// μ_X, N×Q.
    pub mu: &'a DMatrix<f64>,
    pub third: &'a ThirdLevel,
    pub phi: Option<&'a [DMatrix<f64>]>,
    pub eps: Option<&'a [DMatrix<f64>]>,
}

/// E_q[log p(yₙ | fₙ)] (minus KL(q(αₙ) ‖ p(αₙ)) for Student-t) and its
/// gradients in ηₙ, in the Cholesky factor of Ψₙ, and in log ξₙ.
#[derive(Clone, Debug)]
pub struct LocalTerm {
    pub value: f64,
    pub d_eta: DVector<f64>,
    pub d_chol: DMatrix<f64>,
    pub d_logxi: f64,
}

fn lower(m: DMatrix<f64>) -> DMatrix<f64> {
    m.lower_triangle()
}

#[allow(clippy::too_many_arguments)]
pub fn local_term(
    third: &ThirdLevel,
    y: &[f64],
    obs: &[bool],
    eta: &[f64],
    chol: &DMatrix<f64>,
    xi: Option<f64>,
    phi: Option<&DMatrix<f64>>,
    eps: Option<&DMatrix<f64>>,
) -> Result<LocalTerm> {
    let q = y.len();
    let idx: Vec<usize> = (0..q).filter(|&i| obs[i]).collect();
    let mut d_eta = DVector::zeros(q);
    match third {
        ThirdLevel::Identity => Err(HegpError::Config("the identity third level uses the exact Gaussian path".into())),
        ThirdLevel::StudentT(t) => {
            let phi = phi.ok_or_else(|| HegpError::Config("Student-t term needs scale matrices".into()))?;
            let xi = xi.unwrap_or(1.0);
            let xi2 = xi * xi;
            let k = idx.len();
            let psi = chol * chol.transpose();
            let mut pinv = DMatrix::zeros(q, q);
            let (mut delta, mut logdet) = (0.0, 0.0);
            if k > 0 {
                let sub = DMatrix::from_fn(k, k, |i, j| phi[(idx[i], idx[j])]);
                let ch = Chol::new(&sub)?;
                let r = DVector::from_iterator(k, idx.iter().map(|&i| y[i] - eta[i]));
                let pr = ch.solve_vec(&r);
                let inv = ch.inverse();
                for a in 0..k {
                    d_eta[idx[a]] = xi2 * pr[a];
                    for b in 0..k {
                        pinv[(idx[a], idx[b])] = inv[(a, b)];
                        delta += inv[(a, b)] * psi[(idx[b], idx[a])];
                    }
                }
                delta += r.dot(&pr);
                logdet = ch.logdet();
            }
            let qa = InverseGamma::variational(t.nu, k, xi);
            let kf = k as f64;
            let value = -0.5 * kf * LN_2PI - 0.5 * logdet - 0.5 * kf * qa.mean_log() - 0.5 * xi2 * delta
                - qa.kl(&InverseGamma::prior(t.nu));
            Ok(LocalTerm {
                value,
                d_eta,
                d_chol: lower(-(pinv * chol) * xi2),
                d_logxi: kf + t.nu - xi2 * (delta + t.nu),
            })
        }
        ThirdLevel::Probit(p) => {
            let mut value = 0.0;
            let mut dpsi = DMatrix::zeros(q, q);
            for &i in &idx {
                let var = chol.row(i).norm_squared();
                let (v, dm, dv) = p.expected_loglik(y[i], eta[i], var)?;
                value += v;
                d_eta[i] = dm;
                dpsi[(i, i)] = 2.0 * dv;
            }
            Ok(LocalTerm { value, d_eta, d_chol: lower(dpsi * chol), d_logxi: 0.0 })
        }
        ThirdLevel::StateSpace(s) => {
            let eps = eps.ok_or_else(|| HegpError::Config("state-space term needs Monte-Carlo draws".into()))?;
            let ctx = ObsContext { scale: None, observed: Some(obs) };
            let m = eps.ncols();
            let eta_v = DVector::from_column_slice(eta);
            let mut value = 0.0;
            let mut d_chol = DMatrix::zeros(q, q);
            for j in 0..m {
                let e = eps.column(j);
                let f = &eta_v + chol * e;
                value += s.loglik(y, f.as_slice(), &ctx)?;
                let g = s.grad_f(y, f.as_slice(), &ctx)?;
                d_eta += &g;
                d_chol += &g * e.transpose();
            }
            let inv = 1.0 / m as f64;
            Ok(LocalTerm { value: value * inv, d_eta: d_eta * inv, d_chol: lower(d_chol * inv), d_logxi: 0.0 })
        }
    }
}

fn chol_or_domain(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Chol::new(p).map(|c| c.l()).map_err(|_| HegpError::Domain("Ψ block is not positive definite".into()))
}

fn local_sum(pb: &Problem, eta: &DMatrix<f64>, chols: &[DMatrix<f64>], xi: Option<&[f64]>) -> Result<Vec<LocalTerm>> {
    (0..pb.data.n())
        .map(|n| {
            local_term(
                pb.third,
                &pb.data.y_row(n),
                pb.data.mask.row(n),
                &eta.row(n).iter().copied().collect::<Vec<_>>(),
                &chols[n],
                xi.map(|x| x[n]),
                pb.phi.map(|p| &p[n]),
                pb.eps.map(|e| &e[n]),
            )
        })
        .collect()
}

/// −KL(q(f) ‖ N(μ, S)) plus the sparse correction, given the Cholesky factors of Ψ.
fn gaussian_part(backend: &Backend, om: &Omega, chols: &[DMatrix<f64>]) -> f64 {
    let nq = om.d.len() as f64;
    let logdet_psi: f64 = chols.iter().map(|c| 2.0 * c.diagonal().iter().map(|v| v.ln()).sum::<f64>()).sum();
    -0.5 * backend.trace_inv_omega(om) - 0.5 * backend.logdet() + 0.5 * logdet_psi + 0.5 * nq
        + backend.vfe_correction()
}

/// ELBO of a latent (non-identity) third level at Γ.
pub fn elbo(pb: &Problem, state: &VariationalState) -> Result<f64> {
    let chols: Vec<DMatrix<f64>> = state.psi.iter().map(chol_or_domain).collect::<Result<_>>()?;
    let locals = local_sum(pb, &state.eta, &chols, state.xi.as_deref())?;
    let om = state.omega(pb.mu);
    Ok(locals.iter().map(|l| l.value).sum::<f64>() + gaussian_part(pb.backend, &om, &chols))
}

/// ELBO of the two-level model y ≡ f with Γ read as a factorized Gaussian
/// q(g); bounded above by the exact log marginal likelihood.
pub fn elbo_identity(data: &Dataset, model: &HegpModel, state: &VariationalState) -> Result<f64> {
    let (n, q) = (data.n(), data.q());
    let lambdas = model.lambdas(&data.x)?;
    let mu = model.mean_at(&data.x);
    let mut value = 0.0;
    for i in 0..n {
        let idx: Vec<usize> = (0..q).filter(|&k| data.mask.is_observed(i, k)).collect();
        if idx.is_empty() {
            continue;
        }
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| lambdas[i][(idx[a], idx[b])]);
        let ch = Chol::new(&sub)?;
        let r = DVector::from_iterator(idx.len(), idx.iter().map(|&k| data.y[(i, k)] - state.eta[(i, k)]));
        let psub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| state.psi[i][(idx[a], idx[b])]);
        value += -0.5
            * (idx.len() as f64 * LN_2PI + ch.logdet() + r.dot(&ch.solve_vec(&r)) + ch.solve_mat(&psub).trace());
    }
    let v = model.cov.gram_dm(&data.x, &data.x)?;
    let vch = Chol::new(&v)?;
    let d = vec_dm(&(&state.eta - &mu));
    let mut tr = d.dot(&vch.solve_vec(&d));
    let vinv = vch.inverse();
    let mut logdet_psi = 0.0;
    for (i, p) in state.psi.iter().enumerate() {
        tr += vinv.view((i * q, i * q), (q, q)).component_mul(p).sum();
        logdet_psi += Chol::new(p)?.logdet();
    }
    Ok(value - 0.5 * (tr - (n * q) as f64 + vch.logdet() - logdet_psi))
}

fn n_tri(q: usize) -> usize {
    q * (q + 1) / 2
}

/// [vec(η) datum-major, lower Cholesky factors of Ψₙ with log-diagonal, log ξ].
pub fn pack(state: &VariationalState, with_xi: bool) -> Result<Vec<f64>> {
    let (n, q) = (state.n(), state.q());
    let mut out: Vec<f64> = vec_dm(&state.eta).iter().copied().collect();
    for p in &state.psi {
        let c = chol_or_domain(p)?;
        for i in 0..q {
            for j in 0..=i {
                out.push(if i == j { c[(i, i)].ln() } else { c[(i, j)] });
            }
        }
    }
    if with_xi {
        let xi = state.xi.clone().unwrap_or_else(|| vec![1.0; n]);
        out.extend(xi.iter().map(|v| v.ln()));
    }
    Ok(out)
}

struct Unpacked {
    eta: DMatrix<f64>,
    chols: Vec<DMatrix<f64>>,
    xi: Option<Vec<f64>>,
}

fn unpack(p: &[f64], n: usize, q: usize, with_xi: bool) -> Unpacked {
    let eta = DMatrix::from_fn(n, q, |i, k| p[i * q + k]);
    let t = n_tri(q);
    let chols = (0..n)
        .map(|i| {
            let base = n * q + i * t;
            let mut c = DMatrix::zeros(q, q);
            let mut k = 0;
            for a in 0..q {
                for b in 0..=a {
                    c[(a, b)] = if a == b { p[base + k].exp() } else { p[base + k] };
                    k += 1;
                }
            }
            c
        })
        .collect();
    let xi = with_xi.then(|| p[n * q + n * t..].iter().map(|v| v.exp()).collect());
    Unpacked { eta, chols, xi }
}

fn to_state(u: Unpacked) -> VariationalState {
    let psi = u
        .chols
        .iter()
        .map(|c| {
            let mut p = c * c.transpose();
            symmetrize(&mut p);
            p
        })
        .collect();
    VariationalState { eta: u.eta, psi, xi: u.xi, cond: None }
}

/// ELBO and its gradient in the packed parameterization.
pub fn elbo_and_grad(pb: &Problem, params: &[f64], with_xi: bool) -> Result<(f64, Vec<f64>)> {
    let (n, q) = (pb.data.n(), pb.data.q());
    let u = unpack(params, n, q, with_xi);
    if u.chols.iter().any(|c| c.iter().any(|v| !v.is_finite())) || u.eta.iter().any(|v| !v.is_finite()) {
        return Err(HegpError::Domain("non-finite variational parameter".into()));
    }
    let locals = local_sum(pb, &u.eta, &u.chols, u.xi.as_deref())?;
    let psi: Vec<DMatrix<f64>> = u.chols.iter().map(|c| c * c.transpose()).collect();
    let om = Omega { d: vec_dm(&(&u.eta - pb.mu)), psi, cond: None };
    let a = pb.backend.solve(&om.d);
    let value = locals.iter().map(|l| l.value).sum::<f64>() + gaussian_part(pb.backend, &om, &u.chols);
    let mut grad = Vec::with_capacity(params.len());
    for (i, l) in locals.iter().enumerate() {
        for k in 0..q {
            grad.push(l.d_eta[k] - a[i * q + k]);
        }
    }
    let inv_blocks = pb.backend.inv_blocks();
    for (i, l) in locals.iter().enumerate() {
        let c = &u.chols[i];
        let g = &l.d_chol - (&inv_blocks[i] * c).lower_triangle();
        for a in 0..q {
            for b in 0..=a {
                grad.push(if a == b { (g[(a, a)] + 1.0 / c[(a, a)]) * c[(a, a)] } else { g[(a, b)] });
            }
        }
    }
    if with_xi {
        grad.extend(locals.iter().map(|l| l.d_logxi));
    }
    Ok((value, grad))
}

fn ascent_scales(data: &Dataset, with_xi: bool) -> Vec<f64> {
    let (n, q) = (data.n(), data.q());
    let sd: Vec<f64> = data.output_variances().iter().map(|v| v.sqrt()).collect();
    let mut s = Vec::new();
    for _ in 0..n {
        s.extend_from_slice(&sd);
    }
    for _ in 0..n {
        for a in 0..q {
            for b in 0..=a {
                s.push(if a == b { 1.0 } else { sd[a].min(sd[b]) });
            }
        }
    }
    if with_xi {
        s.extend(std::iter::repeat_n(1.0, n));
    }
    s
}

/// Gradient ascent of the ELBO over Γ; never returns a lower ELBO than Γ₀.
pub fn estep_gradient(pb: &Problem, state0: &VariationalState, iters: usize) -> Result<(VariationalState, f64)> {
    let with_xi = matches!(pb.third, ThirdLevel::StudentT(_));
    let x0 = pack(state0, with_xi)?;
    let scales = ascent_scales(pb.data, with_xi);
    let cfg = AscentConfig { max_iter: iters, init_step: 0.1, ..Default::default() };
    let res = maximize_scaled(|p| elbo_and_grad(pb, p, with_xi), &x0, &scales, None, &cfg)?;
    let state = to_state(unpack(&res.x, pb.data.n(), pb.data.q(), with_xi));
    Ok((state, res.value))
}

fn embed(sub: &DMatrix<f64>, idx: &[usize], q: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(q, q);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            out[(i, j)] = sub[(a, b)];
        }
    }
    out
}

/// Coordinate ascent for Student-t observations: (η, Ψ) given ξ in closed
/// form, then ξₙ² = (ν + Qₙ)/(ν + δₙ).
pub fn estep_cavi(pb: &Problem, state0: &VariationalState, sweeps: usize) -> Result<(VariationalState, f64)> {
    let ThirdLevel::StudentT(t) = pb.third else {
        return Err(HegpError::Config("coordinate ascent applies to Student-t observations".into()));
    };
    let phi = pb.phi.ok_or_else(|| HegpError::Config("Student-t term needs scale matrices".into()))?;
    let (n, q) = (pb.data.n(), pb.data.q());
    let idx: Vec<Vec<usize>> = (0..n).map(|i| pb.data.mask.row(i).iter().enumerate().filter(|b| *b.1).map(|b| b.0).collect()).collect();
    let phi_inv: Vec<DMatrix<f64>> = (0..n)
        .map(|i| {
            let sub = DMatrix::from_fn(idx[i].len(), idx[i].len(), |a, b| phi[i][(idx[i][a], idx[i][b])]);
            Ok(embed(&spd_inv(&sub)?, &idx[i], q))
        })
        .collect::<Result<_>>()?;
    let resid = vec_dm(&(&pb.data.y - pb.mu));
    let mut state = state0.clone();
    let mut xi = state.xi.clone().unwrap_or_else(|| vec![1.0; n]);
    for _ in 0..sweeps {
        let prec: Vec<DMatrix<f64>> = (0..n).map(|i| &phi_inv[i] * (xi[i] * xi[i])).collect();
        let half: Vec<DMatrix<f64>> = prec.iter().map(psd_sqrt).collect();
        let mut w = DVector::zeros(n * q);
        for i in 0..n {
            let r = half[i].clone() * resid.rows(i * q, q);
            w.rows_mut(i * q, q).copy_from(&r);
        }
        let shift = pb.backend.shifted_mean(&half, &w)?;
        state.eta = DMatrix::from_fn(n, q, |i, k| pb.mu[(i, k)] + shift[i * q + k]);
        let inv_blocks = pb.backend.inv_blocks();
        state.psi = (0..n)
            .map(|i| {
                let mut p = spd_inv(&(&inv_blocks[i] + &prec[i]))?;
                symmetrize(&mut p);
                Ok(p)
            })
            .collect::<Result<_>>()?;
        for i in 0..n {
            let r = DVector::from_fn(q, |k, _| if pb.data.mask.is_observed(i, k) { pb.data.y[(i, k)] - state.eta[(i, k)] } else { 0.0 });
            let delta = r.dot(&(&phi_inv[i] * &r)) + phi_inv[i].component_mul(&state.psi[i]).sum();
            xi[i] = ((t.nu + idx[i].len() as f64) / (t.nu + delta)).sqrt();
        }
        state.xi = Some(xi.clone());
    }
    state.cond = None;
    let value = elbo(pb, &state)?;
    Ok((state, value))
}

/// Exact conditional moments of f_X given the observed responses when y ≡ f,
/// together with log p(Y_o).
pub fn gaussian_estep(data: &Dataset, backend: &Backend, mu: &DMatrix<f64>) -> Result<(VariationalState, f64)> {
    let (n, q) = (data.n(), data.q());
    let mut d = vec_dm(&(&data.y - mu));
    let missing: Vec<usize> = (0..n * q).filter(|&k| !data.mask.is_observed(k / q, k % q)).collect();
    for &k in &missing {
        d[k] = 0.0;
    }
    let mut cond = None;
    let mut logdet = backend.logdet();
    if !missing.is_empty() {
        let cols = backend.inv_columns(&missing);
        let pmm = DMatrix::from_fn(missing.len(), missing.len(), |i, j| cols[(missing[i], j)]);
        let ch = Chol::new(&symmetrize_owned(pmm))?;
        let dm = -ch.solve_vec(&cols.tr_mul(&d));
        for (i, &k) in missing.iter().enumerate() {
            d[k] = dm[i];
        }
        logdet += ch.logdet();
        cond = Some(CondPart { idx: missing.clone(), cov: ch.inverse() });
    }
    let quad = d.dot(&backend.solve(&d));
    let n_obs = (n * q - missing.len()) as f64;
    let loglik = -0.5 * quad - 0.5 * logdet - 0.5 * n_obs * LN_2PI + backend.vfe_correction();
    let eta = DMatrix::from_fn(n, q, |i, k| mu[(i, k)] + d[i * q + k]);
    let state = VariationalState { eta, psi: vec![DMatrix::zeros(q, q); n], xi: None, cond };
    Ok((state, loglik))
}

fn symmetrize_owned(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// F(Υ) = −½tr(S⁻¹Ω) − ½log|S| (+ sparse correction) with Ω held fixed, and
/// its gradient in the unconstrained Υ parameters.
pub fn upsilon_objective(
    template: &MultiOutputCov,
    x: &DMatrix<f64>,
    inducing: Option<&DMatrix<f64>>,
    lambdas: &[DMatrix<f64>],
    om: &Omega,
    p: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if p.iter().any(|v| !v.is_finite() || v.abs() > 700.0) {
        return Err(HegpError::Domain("hyperparameter out of range".into()));
    }
    let cov = upsilon::from_params(template, p);
    let model_backend = match inducing {
        Some(z) => Backend::Sparse(crate::sparse::SparseBackend::new(&cov, x, z, lambdas)?),
        None => Backend::dense(&cov, x, lambdas)?,
    };
    let value = -0.5 * model_backend.trace_inv_omega(om) - 0.5 * model_backend.logdet() + model_backend.vfe_correction();
    let g = model_backend.upsilon_grad(om)?;
    Ok((value, upsilon::chain(&cov, p, &g.d_sigma, g.d_loggamma)))
}

/// Rprop steps on F(Υ); returns the new covariance and the final step sizes.
pub fn joint_upsilon_steps(
    cov: &MultiOutputCov,
    x: &DMatrix<f64>,
    inducing: Option<&DMatrix<f64>>,
    lambdas: &[DMatrix<f64>],
    om: &Omega,
    steps: usize,
    steps0: Option<&[f64]>,
) -> Result<(MultiOutputCov, Vec<f64>)> {
    let p0 = upsilon::to_params(cov);
    let cfg = AscentConfig { max_iter: steps, init_step: 0.05, max_step: 0.5, ..Default::default() };
    let scales = vec![1.0; p0.len()];
    let res = maximize_scaled(|p| upsilon_objective(cov, x, inducing, lambdas, om, p), &p0, &scales, steps0, &cfg)?;
    Ok((upsilon::from_params(cov, &res.x), res.steps))
}
