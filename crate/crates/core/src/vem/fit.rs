//! The outer variational-EM loop, with an exact-EM specialization when y ≡ f.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{HegpError, Result};
use crate::gp_core::{Kernel, MeanFunction, MultiOutputCov};
use crate::linalg::{symmetrize, Chol};
use crate::precision::{log_prior_l, row, MixtureMode, PrecisionMixture, PrecisionPrior};
use crate::third_level::{PhiSource, ThirdLevel};
use crate::vem::backend::Backend;
use crate::vem::config::{EstepMethod, FitConfig, InducedSpec, ModelFamily, UpsilonMode};
use crate::vem::cv::cv_select_r;
use crate::vem::estep::{antithetic_noise, elbo, estep_cavi, estep_gradient, gaussian_estep, joint_upsilon_steps, Problem};
use crate::vem::mstep::{frozen_samples, gls_mean, mstep_l, mstep_p, mstep_theta, mstep_upsilon};
use crate::vem::state::{EMState, HegpModel, VariationalState};
use crate::vem::upsilon;

/// D evenly spaced points over the covariate range when P = 1; a uniform
/// subsample of min(D, N) rows otherwise.
pub fn default_induced(x: &DMatrix<f64>, d: usize, seed: u64) -> DMatrix<f64> {
    if x.ncols() == 1 {
        let lo = x.min();
        let hi = x.max();
        if d == 1 {
            return DMatrix::from_element(1, 1, 0.5 * (lo + hi));
        }
        return DMatrix::from_fn(d, 1, |i, _| lo + (hi - lo) * i as f64 / (d - 1) as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = d.min(x.nrows());
    let mut idx = rand::seq::index::sample(&mut rng, x.nrows(), k).into_vec();
    idx.sort_unstable();
    DMatrix::from_fn(k, x.ncols(), |i, j| x[(idx[i], j)])
}

fn points_matrix(points: &[Vec<f64>], p: usize) -> Result<DMatrix<f64>> {
    if points.is_empty() || points.iter().any(|r| r.len() != p) {
        return Err(HegpError::Config(format!("induced points must be non-empty rows of length {p}")));
    }
    Ok(DMatrix::from_fn(points.len(), p, |i, j| points[i][j]))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    s[(s.len() - 1) / 2]
}

/// Ordinary least squares per output over observed entries.
fn initial_mean(data: &Dataset, form: &str) -> Result<MeanFunction> {
    let (q, p) = (data.q(), data.p());
    let mut mean = MeanFunction::zeros_like(form, q, p)?;
    let nb = mean.n_basis(p);
    if nb == 0 {
        return Ok(mean);
    }
    let mut theta = Vec::with_capacity(q * nb);
    for k in 0..q {
        let rows: Vec<usize> = (0..data.n()).filter(|&n| data.mask.is_observed(n, k)).collect();
        let b = DMatrix::from_fn(rows.len(), nb, |i, j| mean.basis(&row(&data.x, rows[i]))[j]);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&n| data.y[(n, k)]));
        let mut a = b.tr_mul(&b) + DMatrix::identity(nb, nb) * 1e-10;
        symmetrize(&mut a);
        let beta = Chol::new(&a)?.solve_vec(&b.tr_mul(&y));
        theta.extend(beta.iter());
    }
    mean.set_params(&theta);
    Ok(mean)
}

fn residual_variances(data: &Dataset, mean: &MeanFunction) -> Vec<f64> {
    let mu = mean.eval_set(&data.x, data.q());
    let resid = &data.y - mu;
    let r = Dataset::with_mask(data.x.clone(), resid, data.mask.clone());
    r.map(|d| d.output_variances()).unwrap_or_else(|_| vec![1.0; data.q()])
}

/// Parameters and Γ before the first iteration.
pub fn initialize(data: &Dataset, config: &FitConfig) -> Result<EMState> {
    config.validate()?;
    let (q, p) = (data.q(), data.p());
    let mean = initial_mean(data, &config.mean)?;
    let latent_scale = matches!(config.model_family, ModelFamily::Probit | ModelFamily::StateSpace);
    let var = if latent_scale { vec![1.0; q] } else { residual_variances(data, &mean) };
    let lam0 = DMatrix::from_diagonal(&DVector::from_column_slice(&var));
    let range = (0..p)
        .map(|j| data.x.column(j).max() - data.x.column(j).min())
        .fold(0.0_f64, f64::max)
        .max(1e-12);
    let gamma2 = config.gamma2.unwrap_or((10.0 / range).powi(2));
    let kernel = Kernel::new(config.kernel, 1.0, gamma2);
    let cov = MultiOutputCov::new(lam0.clone(), kernel);
    let induced = match &config.induced_points {
        InducedSpec::Auto => default_induced(&data.x, config.d, config.seed),
        InducedSpec::Points(pts) => points_matrix(pts, p)?,
    };
    let mode = if config.diagonal_mode { MixtureMode::Diagonal } else { MixtureMode::Full };
    let r0 = median(&config.r_grid);
    let mixture = PrecisionMixture::new(mode, &induced, &lam0, &data.x, r0)?;
    let phi0 = (config.model_family == ModelFamily::StudentT)
        .then(|| mixture.components.iter().map(|c| c.lambdas.iter().map(|l| l * 0.5).collect()).collect());
    let third = config.third_level(q, phi0)?;
    let model = HegpModel { cov, mean, mixture, third };
    let inducing = if config.sparse.enabled {
        Some(match (&config.sparse.inducing, config.sparse.m) {
            (Some(pts), _) => points_matrix(pts, p)?,
            (None, Some(m)) => default_induced(&data.x, m, config.seed.wrapping_add(1)),
            (None, None) => induced.clone(),
        })
    } else {
        None
    };
    let mu = model.mean_at(&data.x);
    let with_xi = matches!(model.third, ThirdLevel::StudentT(_)) && !model.third.is_effectively_gaussian();
    let gamma = if latent_scale {
        VariationalState::with_eta(data, mu, false)
    } else {
        VariationalState::regression_init(data, &mu, with_xi)
    };
    let upsilon_mode = resolve_upsilon_mode(config, &model.cov, &data.x, inducing.is_some());
    Ok(EMState {
        config: config.clone(),
        sigma0: model_sigma0(&model.third),
        model,
        gamma,
        x: data.x.clone(),
        inducing,
        r_hat: vec![r0; if config.diagonal_mode { q } else { 1 }],
        sigma1_sq: 1.0,
        trace: Vec::new(),
        iterations: 0,
        converged: false,
        upsilon_mode,
    })
}

fn model_sigma0(third: &ThirdLevel) -> f64 {
    match third {
        ThirdLevel::StudentT(t) => t.sigma0().unwrap_or(0.0),
        _ => 0.0,
    }
}

/// Standard Υ updates need a 𝕍_XX that factors without jitter; otherwise,
/// and always for the sparse backend, Υ is learned jointly with Γ.
fn resolve_upsilon_mode(config: &FitConfig, cov: &MultiOutputCov, x: &DMatrix<f64>, sparse: bool) -> UpsilonMode {
    if sparse {
        return UpsilonMode::Joint;
    }
    match config.upsilon_mode {
        UpsilonMode::Auto => {
            if prior_factors_cleanly(cov, x) {
                UpsilonMode::Standard
            } else {
                log::info!("prior covariance of g_X is near singular; learning Υ jointly in the E-step");
                UpsilonMode::Joint
            }
        }
        m => m,
    }
}

fn prior_factors_cleanly(cov: &MultiOutputCov, x: &DMatrix<f64>) -> bool {
    let Ok(v) = cov.gram_dm(x, x) else { return false };
    match Chol::new(&v) {
        Ok(ch) if ch.jitter == 0.0 => {
            let d = ch.l_ref().diagonal();
            let (lo, hi) = (d.min(), d.max());
            lo > 0.0 && (hi / lo).powi(2) < 1e12
        }
        _ => false,
    }
}

fn param_vector(model: &HegpModel) -> Vec<f64> {
    let mut v: Vec<f64> = model.cov.sigma.iter().copied().collect();
    v.push(model.cov.kernel.gamma2);
    v.extend(model.mean.params());
    for c in &model.mixture.components {
        for l in &c.lambdas {
            v.extend(l.iter());
        }
    }
    if let ThirdLevel::StudentT(t) = &model.third {
        if let PhiSource::FreeMixture { phis } = &t.source {
            v.extend(phis.iter().flatten().flat_map(|m| m.iter().copied()));
        }
    }
    if let ThirdLevel::StateSpace(s) = &model.third {
        v.extend(s.theta.iter());
    }
    v
}

fn max_rel_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter().zip(new).map(|(a, b)| (b - a).abs() / a.abs().max(1.0)).fold(0.0, f64::max)
}

struct Convergence {
    streak: usize,
}

impl Convergence {
    fn update(&mut self, old: &[f64], new: &[f64], config: &FitConfig) -> bool {
        let change = max_rel_change(old, new);
        log::debug!("max relative parameter change {change:.3e}");
        if change < config.tol {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.streak >= config.patience.max(1)
    }
}

/// σ₁⁻² = (1/N) Σₙ ξₙ²/(ξₙ² + σ₀²).
pub fn sigma1_sq(xi: &[f64], sigma0: f64) -> f64 {
    if sigma0 == 0.0 || xi.is_empty() {
        return 1.0;
    }
    let s2 = sigma0 * sigma0;
    let mean = xi.iter().map(|x| x * x / (x * x + s2)).sum::<f64>() / xi.len() as f64;
    1.0 / mean
}

fn update_l(state: &mut EMState, m: &[DMatrix<f64>], prior: &PrecisionPrior) -> Result<()> {
    let cfg = &state.config;
    if cfg.r_grid.len() > 1 {
        let cv = cv_select_r(&state.model.mixture, &state.x, m, &cfg.r_grid, cfg.adjacent_percent, prior)?;
        state.model.mixture.set_bandwidths(&state.x, &cv.r)?;
        state.model.mixture = state.model.mixture.with_lambdas(cv.lambdas);
        state.r_hat = cv.r;
    } else {
        let r = vec![cfg.r_grid[0]; state.model.mixture.components.len()];
        if state.model.mixture.components.iter().any(|c| c.r != cfg.r_grid[0]) {
            state.model.mixture.set_bandwidths(&state.x, &r)?;
        }
        let lam = mstep_l(&state.model.mixture, m, &state.x, prior);
        state.model.mixture = state.model.mixture.with_lambdas(lam);
        state.r_hat = r;
    }
    Ok(())
}

/// Trains the model selected by `config`.
pub fn fit(data: &Dataset, config: &FitConfig) -> Result<EMState> {
    let init = initialize(data, config)?;
    fit_from(data, init)
}

/// Continues training from an existing state, using its configuration.
pub fn fit_from(data: &Dataset, state: EMState) -> Result<EMState> {
    if state.model.third.is_effectively_gaussian() {
        exact_loop(data, state)
    } else {
        latent_loop(data, state)
    }
}

/// Exact EM for y ≡ f (HeGPR-G, and HeGPR-O with σ₀ = 0).
pub fn fit_hegpr_g(data: &Dataset, config: &FitConfig) -> Result<EMState> {
    let init = initialize(data, config)?;
    if !init.model.third.is_effectively_gaussian() {
        return Err(HegpError::Config("exact EM needs an identity third level".into()));
    }
    exact_loop(data, init)
}

fn exact_objective(state: &EMState, loglik: f64, prior: &PrecisionPrior) -> Result<f64> {
    Ok(loglik + log_prior_l(&state.model.mixture, prior, &state.x)?)
}

fn exact_loop(data: &Dataset, mut state: EMState) -> Result<EMState> {
    let prior = state.config.prior.to_prior(data.q())?;
    let mut conv = Convergence { streak: 0 };
    let mut ups_steps: Option<Vec<f64>> = None;
    let x = data.x.clone();
    for t in 0..state.config.outer_iters {
        let mut step = || -> Result<bool> {
            let z = state.inducing.clone();
            let backend = state.model.backend(&x, z.as_ref())?;
            let mu = state.model.mean_at(&x);
            let (gamma, ll) = gaussian_estep(data, &backend, &mu)?;
            let obj = exact_objective(&state, ll, &prior)?;
            if !obj.is_finite() {
                return Err(HegpError::Diverged { iteration: t, message: "non-finite log-likelihood".into() });
            }
            state.trace.push(obj);
            log::info!("iteration {t}: objective {obj:.6}");
            let before = param_vector(&state.model);
            let mut backend = backend;
            if state.config.learn_upsilon && state.config.upsilon_steps > 0 {
                let om = gamma.omega(&mu);
                let (cov, steps) = match state.upsilon_mode {
                    UpsilonMode::Standard => mstep_upsilon(
                        &state.model.cov,
                        &x,
                        &backend,
                        &om,
                        state.config.upsilon_steps,
                        ups_steps.as_deref(),
                    )?,
                    _ => joint_upsilon_steps(
                        &state.model.cov,
                        &x,
                        z.as_ref(),
                        backend.lambdas(),
                        &om,
                        state.config.upsilon_steps,
                        ups_steps.as_deref(),
                    )?,
                };
                ups_steps = Some(steps);
                state.model.cov = cov;
                backend = state.model.backend_with(&x, z.as_ref(), backend.lambdas())?;
            }
            if state.model.mean.n_basis(data.p()) > 0 {
                state.model.mean = gls_mean(&state.model.mean, &x, &gamma.eta, &backend)?;
            }
            let mu = state.model.mean_at(&x);
            let (gamma, _) = gaussian_estep(data, &backend, &mu)?;
            let m = backend.m_blocks(&gamma.omega(&mu));
            update_l(&mut state, &m, &prior)?;
            state.iterations = t + 1;
            Ok(conv.update(&before, &param_vector(&state.model), &state.config))
        };
        if step().map_err(|e| e.at(t))? {
            state.converged = true;
            break;
        }
    }
    let backend = state.backend()?;
    let mu = state.model.mean_at(&x);
    let (gamma, ll) = gaussian_estep(data, &backend, &mu).map_err(|e| e.at(state.iterations))?;
    let obj = exact_objective(&state, ll, &prior)?;
    state.trace.push(obj);
    state.gamma = gamma;
    state.sigma1_sq = 1.0;
    Ok(state)
}

fn run_estep(pb: &Problem, gamma: &VariationalState, iters: usize, method: EstepMethod) -> Result<(VariationalState, f64)> {
    match (pb.third, method) {
        (ThirdLevel::StudentT(_), EstepMethod::Auto) => estep_cavi(pb, gamma, iters),
        _ => estep_gradient(pb, gamma, iters),
    }
}

fn latent_loop(data: &Dataset, mut state: EMState) -> Result<EMState> {
    let prior = state.config.prior.to_prior(data.q())?;
    let mut conv = Convergence { streak: 0 };
    let mut ups_steps: Option<Vec<f64>> = None;
    let x = data.x.clone();
    let cfg = state.config.clone();
    let needs_eps = matches!(state.model.third, ThirdLevel::StateSpace(_));
    for t in 0..cfg.outer_iters {
        let mut step = || -> Result<bool> {
            let z = state.inducing.clone();
            let lambdas = state.model.lambdas(&x)?;
            let mut backend = state.model.backend_with(&x, z.as_ref(), &lambdas)?;
            let phi = state.model.phi_set(&x, &lambdas)?;
            let eps = needs_eps.then(|| antithetic_noise(data.n(), data.q(), cfg.mc_samples, cfg.seed.wrapping_add(t as u64)));
            let mut mu = state.model.mean_at(&x);
            let before = param_vector(&state.model);
            let pb = Problem { data, backend: &backend, mu: &mu, third: &state.model.third, phi: phi.as_deref(), eps: eps.as_deref() };
            let (mut gamma, _) = run_estep(&pb, &state.gamma, cfg.estep_iters, cfg.estep_method)?;
            if cfg.learn_upsilon && cfg.upsilon_steps > 0 && state.upsilon_mode != UpsilonMode::Standard {
                let (cov, steps) = joint_upsilon_steps(
                    &state.model.cov,
                    &x,
                    z.as_ref(),
                    &lambdas,
                    &gamma.omega(&mu),
                    cfg.upsilon_steps,
                    ups_steps.as_deref(),
                )?;
                ups_steps = Some(steps);
                state.model.cov = cov;
                backend = state.model.backend_with(&x, z.as_ref(), &lambdas)?;
            }
            if state.model.mean.n_basis(data.p()) > 0 {
                state.model.mean = gls_mean(&state.model.mean, &x, &gamma.eta, &backend)?;
                mu = state.model.mean_at(&x);
            }
            let pb = Problem { data, backend: &backend, mu: &mu, third: &state.model.third, phi: phi.as_deref(), eps: eps.as_deref() };
            let (g2, value) = run_estep(&pb, &gamma, cfg.estep_iters.div_ceil(2), cfg.estep_method)?;
            gamma = g2;
            if !value.is_finite() {
                return Err(HegpError::Diverged { iteration: t, message: "non-finite ELBO".into() });
            }
            state.trace.push(value);
            log::info!("iteration {t}: ELBO {value:.6}");
            let om = gamma.omega(&mu);
            let m = backend.m_blocks(&om);
            if cfg.learn_upsilon && cfg.upsilon_steps > 0 && state.upsilon_mode == UpsilonMode::Standard {
                match mstep_upsilon(&state.model.cov, &x, &backend, &om, cfg.upsilon_steps, ups_steps.as_deref()) {
                    Ok((cov, steps)) => {
                        ups_steps = Some(steps);
                        state.model.cov = cov;
                    }
                    Err(HegpError::LinAlg(msg)) => {
                        log::info!("standard Υ update failed ({msg}); switching to the joint update");
                        state.upsilon_mode = UpsilonMode::Joint;
                        ups_steps = None;
                    }
                    Err(e) => return Err(e),
                }
            }
            update_l(&mut state, &m, &prior)?;
            if let (ThirdLevel::StudentT(tobs), Some(phi_now)) = (&mut state.model.third, &phi) {
                if let PhiSource::FreeMixture { phis } = &mut tobs.source {
                    *phis = mstep_p(&state.model.mixture, phis, data, &gamma, phi_now)?;
                }
            }
            if let (ThirdLevel::StateSpace(link), Some(eps)) = (&mut state.model.third, &eps) {
                if !link.theta.is_empty() {
                    let samples = frozen_samples(&gamma, eps)?;
                    link.theta = mstep_theta(link, data, &samples, cfg.estep_iters)?;
                }
            }
            state.gamma = gamma;
            state.iterations = t + 1;
            Ok(conv.update(&before, &param_vector(&state.model), &cfg))
        };
        if step().map_err(|e| e.at(t))? {
            state.converged = true;
            break;
        }
    }
    let it = state.iterations;
    let finish = || -> Result<(VariationalState, f64)> {
        let z = state.inducing.clone();
        let lambdas = state.model.lambdas(&x)?;
        let backend = state.model.backend_with(&x, z.as_ref(), &lambdas)?;
        let phi = state.model.phi_set(&x, &lambdas)?;
        let eps = needs_eps.then(|| antithetic_noise(data.n(), data.q(), cfg.mc_samples, cfg.seed.wrapping_add(it as u64)));
        let mu = state.model.mean_at(&x);
        let pb = Problem { data, backend: &backend, mu: &mu, third: &state.model.third, phi: phi.as_deref(), eps: eps.as_deref() };
        run_estep(&pb, &state.gamma, cfg.estep_iters, cfg.estep_method)
    };
    let (gamma, value) = finish().map_err(|e| e.at(it))?;
    state.trace.push(value);
    state.gamma = gamma;
    state.sigma1_sq = match (&state.gamma.xi, state.sigma0) {
        (Some(xi), s0) => sigma1_sq(xi, s0),
        _ => 1.0,
    };
    Ok(state)
}

/// ELBO of a trained latent-family state at its own parameters.
pub fn state_elbo(data: &Dataset, state: &EMState) -> Result<f64> {
    let lambdas = state.model.lambdas(&data.x)?;
    let backend: Backend = state.model.backend_with(&data.x, state.inducing.as_ref(), &lambdas)?;
    let phi = state.model.phi_set(&data.x, &lambdas)?;
    let eps = matches!(state.model.third, ThirdLevel::StateSpace(_)).then(|| {
        antithetic_noise(data.n(), data.q(), state.config.mc_samples, state.config.seed.wrapping_add(state.iterations as u64))
    });
    let mu = state.model.mean_at(&data.x);
    let pb = Problem { data, backend: &backend, mu: &mu, third: &state.model.third, phi: phi.as_deref(), eps: eps.as_deref() };
    elbo(&pb, &state.gamma)
}

/// Unconstrained Υ parameters of a state, for diagnostics.
pub fn upsilon_params(state: &EMState) -> Vec<f64> {
    upsilon::to_params(&state.model.cov)
}
