//! Posterior predictive distributions, classification probabilities, and the
//! outlier machinery of the tied Student-t family.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{HegpError, Result};
use crate::gp_core::GaussianDist;
use crate::linalg::{symmetrize, Chol};
use crate::precision::row;
use crate::special::chi2_cdf;
use crate::third_level::{NoiseSpec, ThirdLevel};
use crate::vem::config::{FitConfig, ModelFamily};
use crate::vem::fit::{fit, fit_from};
use crate::vem::state::EMState;

pub use crate::vem::fit::sigma1_sq;

/// μ̄(x), ν̄(x) and Λ̂(x) at one query covariate, with the rescaling σ₁².
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorPredictive {
    pub mean: DVector<f64>,
    pub nu: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub sigma1_sq: f64,
}

impl PosteriorPredictive {
    /// N(μ̄, ν̄).
    pub fn g(&self) -> GaussianDist {
        GaussianDist { mean: self.mean.clone(), cov: self.nu.clone() }
    }

    /// N(μ̄, ν̄ + σ₁²Λ̂).
    pub fn f(&self) -> GaussianDist {
        let mut cov = &self.nu + &self.lambda * self.sigma1_sq;
        symmetrize(&mut cov);
        GaussianDist { mean: self.mean.clone(), cov }
    }
}

/// Predictive summaries at every row of `xq`.
pub fn predict(state: &EMState, xq: &DMatrix<f64>) -> Result<Vec<PosteriorPredictive>> {
    if xq.ncols() != state.x.ncols() {
        return Err(HegpError::Dimension(format!(
            "query covariates have {} columns, the model expects {}",
            xq.ncols(),
            state.x.ncols()
        )));
    }
    let backend = state.backend()?;
    let mu_x = state.model.mean_at(&state.x);
    let om = state.gamma.omega(&mu_x);
    let parts = backend.predict_parts(xq, &om)?;
    let q = state.model.q();
    parts
        .into_iter()
        .enumerate()
        .map(|(i, (shift, nu))| {
            let x = row(xq, i);
            Ok(PosteriorPredictive {
                mean: state.model.mean.eval(&x, q) + shift,
                nu,
                lambda: state.model.mixture.lambda_at(&x)?,
                sigma1_sq: state.sigma1_sq,
            })
        })
        .collect()
}

pub fn predict_g(state: &EMState, xq: &DMatrix<f64>) -> Result<Vec<GaussianDist>> {
    Ok(predict(state, xq)?.iter().map(PosteriorPredictive::g).collect())
}

pub fn predict_f(state: &EMState, xq: &DMatrix<f64>) -> Result<Vec<GaussianDist>> {
    Ok(predict(state, xq)?.iter().map(PosteriorPredictive::f).collect())
}

/// p(y_q = 1) = δ + (1−2δ)Φ(μ̄_q / √(ν̄_qq + Λ̂_qq)) per query and output.
pub fn predict_y_class(state: &EMState, xq: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
    let ThirdLevel::Probit(p) = &state.model.third else {
        return Err(HegpError::Config("label probabilities need the probit family".into()));
    };
    Ok(predict(state, xq)?
        .iter()
        .map(|pp| {
            let f = pp.f();
            (0..f.dim()).map(|k| p.prob(f.mean[k] / f.cov[(k, k)].sqrt())).collect()
        })
        .collect())
}

/// Monte Carlo summary of y at one query covariate.
#[derive(Clone, Debug, PartialEq)]
pub struct YSummary {
    pub mean: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

/// Mean and central 95% interval of y by sampling f from its predictive and
/// y from the third level.
pub fn predict_y_mc(state: &EMState, xq: &DMatrix<f64>, samples: usize, seed: u64) -> Result<Vec<YSummary>> {
    if samples < 2 {
        return Err(HegpError::Config("at least two samples are required".into()));
    }
    let preds = predict(state, xq)?;
    let q = state.model.q();
    let phis = state.model.phi_set(xq, &preds.iter().map(|p| p.lambda.clone()).collect::<Vec<_>>())?;
    preds
        .iter()
        .enumerate()
        .map(|(i, pp)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let f = pp.f();
            let lf = Chol::new(&f.cov)?.l();
            let lphi = match &phis {
                Some(p) if p[i].iter().any(|v| *v != 0.0) => Some(Chol::new(&p[i])?.l()),
                _ => None,
            };
            let mut draws: Vec<DVector<f64>> = Vec::with_capacity(samples);
            for _ in 0..samples {
                let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
                let fs = &f.mean + &lf * z;
                draws.push(sample_y(&state.model.third, &fs, lphi.as_ref(), &mut rng)?);
            }
            let mean = draws.iter().fold(DVector::zeros(q), |a, d| a + d) / samples as f64;
            let mut lower = DVector::zeros(q);
            let mut upper = DVector::zeros(q);
            for k in 0..q {
                let mut v: Vec<f64> = draws.iter().map(|d| d[k]).collect();
                v.sort_by(|a, b| a.total_cmp(b));
                lower[k] = v[((samples as f64 * 0.025).floor() as usize).min(samples - 1)];
                upper[k] = v[((samples as f64 * 0.975).ceil() as usize).min(samples) - 1];
            }
            Ok(YSummary { mean, lower, upper })
        })
        .collect()
}

fn sample_y(third: &ThirdLevel, f: &DVector<f64>, lphi: Option<&DMatrix<f64>>, rng: &mut impl Rng) -> Result<DVector<f64>> {
    let q = f.len();
    Ok(match third {
        ThirdLevel::Identity => f.clone(),
        ThirdLevel::StudentT(t) => match lphi {
            Some(l) => {
                let g = Gamma::new(0.5 * t.nu, 2.0 / t.nu).map_err(|e| HegpError::Domain(e.to_string()))?;
                let alpha = 1.0 / g.sample(rng);
                let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
                f + l * z * alpha.sqrt()
            }
            None => f.clone(),
        },
        ThirdLevel::Probit(p) => f.map(|v| {
            let label = v > 0.0;
            if (rng.random::<f64>() < p.delta) != label {
                1.0
            } else {
                0.0
            }
        }),
        ThirdLevel::StateSpace(s) => {
            let h = s.mean_response(f.as_slice());
            let mut y = DVector::zeros(q);
            for k in 0..q {
                let e = match s.noise[k] {
                    NoiseSpec::Gaussian { scale } => scale * rng.sample::<f64, _>(StandardNormal),
                    NoiseSpec::StudentT { nu, scale } => {
                        scale * StudentT::new(nu).map_err(|e| HegpError::Domain(e.to_string()))?.sample(rng)
                    }
                };
                y[k] = h[k] + e;
            }
            y
        }
    })
}

/// wₙ = σ₀²/(ξ̂ₙ² + σ₀²), the weight of g in the posterior mean of fₙ.
pub fn outlier_weights(state: &EMState) -> Vec<f64> {
    let s2 = state.sigma0 * state.sigma0;
    match &state.gamma.xi {
        Some(xi) if s2 > 0.0 => xi.iter().map(|x| s2 / (x * x + s2)).collect(),
        _ => vec![0.0; state.gamma.n()],
    }
}

/// Given g, fₙ has mean a·yₙ + b·g(xₙ) with (a, b) = (ξ̂ₙ², σ₀²)/(ξ̂ₙ² + σ₀²).
pub fn weighted_average_pair(xi: f64, sigma0: f64) -> (f64, f64) {
    let (x2, s2) = (xi * xi, sigma0 * sigma0);
    if x2 + s2 == 0.0 {
        return (1.0, 0.0);
    }
    (x2 / (x2 + s2), s2 / (x2 + s2))
}

/// J = 1/(12N) + Σₙ (W₍ₙ₎ − (2n−1)/(2N))² over the sorted W.
pub fn cvm_statistic(w: &[f64]) -> f64 {
    let mut s = w.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    1.0 / (12.0 * n) + s.iter().enumerate().map(|(i, v)| (v - (2.0 * i as f64 + 1.0) / (2.0 * n)).powi(2)).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvmScore {
    pub j: f64,
    /// Sorted Wₙ = F_k(rₙᵀSₙ⁻¹rₙ).
    pub w: Vec<f64>,
}

/// Cramér–von Mises uniformity score of the fitted residuals with
/// Sₙ = ν̄(xₙ) + (1 + σ₀²/ξ̂ₙ²)Λ̂(xₙ), over observed coordinates.
pub fn cvm_score(state: &EMState, data: &Dataset) -> Result<CvmScore> {
    let preds = predict(state, &data.x)?;
    let s2 = state.sigma0 * state.sigma0;
    let mut w = Vec::with_capacity(data.n());
    for (n, pp) in preds.iter().enumerate() {
        let obs: Vec<usize> = (0..data.q()).filter(|&k| data.mask.is_observed(n, k)).collect();
        if obs.is_empty() {
            continue;
        }
        let scale = match &state.gamma.xi {
            Some(xi) if s2 > 0.0 => 1.0 + s2 / (xi[n] * xi[n]),
            _ => 1.0,
        };
        let s = DMatrix::from_fn(obs.len(), obs.len(), |i, j| {
            pp.nu[(obs[i], obs[j])] + scale * pp.lambda[(obs[i], obs[j])]
        });
        let r = DVector::from_iterator(obs.len(), obs.iter().map(|&k| data.y[(n, k)] - pp.mean[k]));
        let v = r.dot(&Chol::new(&s)?.solve_vec(&r));
        w.push(chi2_cdf(v, obs.len() as f64));
    }
    w.sort_by(|a, b| a.total_cmp(b));
    Ok(CvmScore { j: cvm_statistic(&w), w })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvmReport {
    pub grid: Vec<f64>,
    pub j: Vec<f64>,
    pub sigma0_hat: f64,
    /// Sorted W statistics at σ̂₀.
    pub w: Vec<f64>,
}

/// The report and the fitted state for every grid value.
#[derive(Clone, Debug)]
pub struct Sigma0Selection {
    pub report: CvmReport,
    pub fits: Vec<EMState>,
}

impl Sigma0Selection {
    pub fn selected(&self) -> &EMState {
        let i = self.report.grid.iter().position(|s| *s == self.report.sigma0_hat).unwrap_or(0);
        &self.fits[i]
    }
}

/// Starts a tied Student-t fit at σ₀ from a converged Gaussian fit.
pub fn warm_start(base: &EMState, sigma0: f64) -> Result<EMState> {
    let mut s = base.clone();
    s.config.model_family = ModelFamily::Outlier;
    s.config.sigma0 = sigma0;
    s.model.third = s.config.third_level(s.model.q(), None)?;
    s.sigma0 = sigma0;
    if sigma0 > 0.0 {
        s.gamma.xi = Some(vec![1.0; s.gamma.n()]);
        s.gamma.cond = None;
    }
    s.trace.clear();
    s.iterations = 0;
    s.converged = false;
    Ok(s)
}

/// Fits the tied Student-t family at every σ₀ in the grid and picks the
/// minimizer of J; ties go to the smaller σ₀. Every positive σ₀ is started
/// from the σ₀ = 0 fit.
pub fn select_sigma0(data: &Dataset, grid: &[f64], config: &FitConfig) -> Result<Sigma0Selection> {
    if grid.is_empty() || grid.iter().any(|s| !(*s >= 0.0)) {
        return Err(HegpError::Config("sigma0 grid must be non-empty and nonnegative".into()));
    }
    let mut cfg = config.clone();
    cfg.model_family = ModelFamily::Outlier;
    cfg.sigma0 = 0.0;
    let base = fit(data, &cfg)?;
    let fits: Vec<EMState> = grid
        .par_iter()
        .map(|&s0| if s0 == 0.0 { Ok(base.clone()) } else { fit_from(data, warm_start(&base, s0)?) })
        .collect::<Result<_>>()?;
    let scores: Vec<CvmScore> = fits.iter().map(|f| cvm_score(f, data)).collect::<Result<_>>()?;
    let mut best = 0;
    for i in 1..grid.len() {
        let (a, b) = (scores[i].j, scores[best].j);
        if a < b || (a == b && grid[i] < grid[best]) {
            best = i;
        }
    }
    let report = CvmReport {
        grid: grid.to_vec(),
        j: scores.iter().map(|s| s.j).collect(),
        sigma0_hat: grid[best],
        w: scores[best].w.clone(),
    };
    Ok(Sigma0Selection { report, fits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cvm_hand_examples() {
        assert_relative_eq!(cvm_statistic(&[0.5]), 1.0 / 12.0, epsilon = 1e-15);
        let n = 7.0;
        let uniform: Vec<f64> = (0..7).map(|i| (2.0 * i as f64 + 1.0) / (2.0 * n)).collect();
        assert_relative_eq!(cvm_statistic(&uniform), 1.0 / (12.0 * n), epsilon = 1e-15);
        let zeros = vec![0.0; 7];
        let expected = 1.0 / (12.0 * n) + (0..7).map(|i| ((2.0 * i as f64 + 1.0) / (2.0 * n)).powi(2)).sum::<f64>();
        assert_relative_eq!(cvm_statistic(&zeros), expected, epsilon = 1e-14);
        let hand = 1.0 / 36.0 + (0.1f64 - 1.0 / 6.0).powi(2) + (0.9f64 - 5.0 / 6.0).powi(2);
        assert_relative_eq!(cvm_statistic(&[0.9, 0.1, 0.5]), hand, epsilon = 1e-15);
    }

    #[test]
    fn weights_and_pairs() {
        assert_eq!(weighted_average_pair(1.0, 0.0), (1.0, 0.0));
        let (a, b) = weighted_average_pair(2.0, 1.0);
        assert_relative_eq!(a, 0.8);
        assert_relative_eq!(b, 0.2);
        assert_relative_eq!(a + b, 1.0);
    }

    #[test]
    fn sigma1_cases() {
        assert_eq!(sigma1_sq(&[0.3, 2.0], 0.0), 1.0);
        assert_relative_eq!(sigma1_sq(&[1.0; 5], 1.0), 2.0, epsilon = 1e-15);
        assert!(sigma1_sq(&[1.0; 5], 1e6) > 1e11);
    }
}
