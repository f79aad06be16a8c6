//! Observation models p(y | f; Θ) linking the latent target function to data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HegpError, Result};
use crate::linalg::Chol;
use crate::special::{digamma, ln_gamma, ln_norm_cdf, norm_cdf, norm_pdf, LN_2PI};

/// Temperature of the smoothed probit surrogate used for f-gradients.
pub const PROBIT_SURROGATE_TAU: f64 = 0.05;

/// Per-datum inputs an observation model may need beyond (y, f).
#[derive(Clone, Copy, Debug, Default)]
pub struct ObsContext<'a> {
    /// Scale matrix Φ(x) for Student-t observations.
    pub scale: Option<&'a DMatrix<f64>>,
    /// Observed coordinates; `None` means all observed.
    pub observed: Option<&'a [bool]>,
}

impl<'a> ObsContext<'a> {
    pub fn is_observed(&self, q: usize) -> bool {
        self.observed.is_none_or(|m| m[q])
    }

    pub fn observed_indices(&self, q: usize) -> Vec<usize> {
        (0..q).filter(|&i| self.is_observed(i)).collect()
    }
}

pub trait ObservationModel {
    /// True when y ≡ f and the engine may use exact Gaussian conditionals.
    fn exact_gaussian(&self) -> bool {
        false
    }

    fn theta(&self) -> Vec<f64> {
        Vec::new()
    }

    fn set_theta(&mut self, _theta: &[f64]) {}

    fn loglik(&self, y: &[f64], f: &[f64], ctx: &ObsContext) -> Result<f64>;

    fn grad_f(&self, y: &[f64], f: &[f64], ctx: &ObsContext) -> Result<DVector<f64>>;

    fn grad_theta(&self, _y: &[f64], _f: &[f64], _ctx: &ObsContext) -> Result<DVector<f64>> {
        Ok(DVector::zeros(0))
    }
}

fn check_finite(f: &[f64]) -> Result<()> {
    if f.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HegpError::Domain("non-finite latent value".into()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityGaussian;

impl ObservationModel for IdentityGaussian {
    fn exact_gaussian(&self) -> bool {
        true
    }

    /// Degenerate point mass: 0 when f reproduces the observed y, −∞ otherwise.
    fn loglik(&self, y: &[f64], f: &[f64], ctx: &ObsContext) -> Result<f64> {
        check_finite(f)?;
        let hit = (0..y.len()).filter(|&q| ctx.is_observed(q)).all(|q| y[q] == f[q]);
        Ok(if hit { 0.0 } else { f64::NEG_INFINITY })
    }

    fn grad_f(&self, _y: &[f64], f: &[f64], _ctx: &ObsContext) -> Result<DVector<f64>> {
        Ok(DVector::zeros(f.len()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhiSource {
    /// Φ(x)⁻¹ = Σ_d ω_xd φ_d⁻¹ with base matrices aligned to the Λ mixture components.
    FreeMixture {
        #[serde(with = "crate::serde_mat::nested")]
        phis: Vec<Vec<DMatrix<f64>>>,
    },
    /// Φ(x) = σ₀² Λ(x).
    Tied { sigma0: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentTObservation {
    pub nu: f64,
    pub source: PhiSource,
}

impl StudentTObservation {
    pub fn tied(nu: f64, sigma0: f64) -> StudentTObservation {
        StudentTObservation { nu, source: PhiSource::Tied { sigma0 } }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) {
            return Err(HegpError::Domain(format!("degrees of freedom {} must be positive", self.nu)));
        }
        match &self.source {
            PhiSource::Tied { sigma0 } if !(*sigma0 >= 0.0 && sigma0.is_finite()) => {
                Err(HegpError::Domain(format!("sigma0 {sigma0} must be nonnegative")))
            }
            PhiSource::FreeMixture { phis } => {
                for p in phis.iter().flatten() {
                    Chol::new(p).map_err(|_| HegpError::Domain("scale base matrix not positive definite".into()))?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn sigma0(&self) -> Option<f64> {
        match self.source {
            PhiSource::Tied { sigma0 } => Some(sigma0),
            PhiSource::FreeMixture { .. } => None,
        }
    }

    fn observed_parts(y: &[f64], f: &[f64], ctx: &ObsContext) -> Result<(DVector<f64>, DMatrix<f64>, Vec<usize>)> {
        let phi = ctx
            .scale
            .ok_or_else(|| HegpError::Config("Student-t observation needs a scale matrix".into()))?;
        let idx = ctx.observed_indices(y.len());
        let r = DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i] - f[i]));
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| phi[(idx[i], idx[j])]);
        Ok((r, sub, idx))
    }
}

impl ObservationModel for StudentTObservation {
    fn loglik(&self, y: &[f64], f: &[f64], ctx: &ObsContext) -> Result<f64> {
        check_finite(f)?;
        let (r, phi, idx) = Self::observed_parts(y, f, ctx)?;
        if idx.is_empty() {
            return Ok(0.0);
        }
        let k = idx.len() as f64;
        let ch = Chol::new(&phi)?;
        let delta = r.dot(&ch.solve_vec(&r));
        let nu = self.nu;
        Ok(ln_gamma(0.5 * (nu + k)) - ln_gamma(0.5 * nu) - 0.5 * k * (nu * std::f64::consts::PI).ln()
            - 0.5 * ch.logdet()
            - 0.5 * (nu + k) * (delta / nu).ln_1p())
    }

    fn grad_f(&self, y: &[f64], f: &[f64], ctx: &ObsContext) -> Result<DVector<f64>> {
        check_finite(f)?;
        let (r, phi, idx) = Self::observed_parts(y, f, ctx)?;
        let mut g = DVector::zeros(y.len());
        if idx.is_empty() {
            return Ok(g);
        }
        let ch = Chol::new(&phi)?;
        let pr = ch.solve_vec(&r);
        let delta = r.dot(&pr);
        let c = (self.nu + idx.len() as f64) / (self.nu + delta);
        for (a, &i) in idx.iter().enumerate() {
            g[i] = c * pr[a];
        }
        Ok(g)
    }
}

/// Inverse-Gamma IG(shape, rate) on α, equivalently Gamma(shape, rate) on α⁻¹.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseGamma {
    pub shape: f64,
    pub rate: f64,
}

impl InverseGamma {
    /// q(α) = IG((ν+Q)/2, (ν+Q)/2 · ξ⁻²).
    pub fn variational(nu: f64, q: usize, xi: f64) -> InverseGamma {
        let a = 0.5 * (nu + q as f64);
        InverseGamma { shape: a, rate: a / (xi * xi) }
    }

    pub fn prior(nu: f64) -> InverseGamma {
        InverseGamma { shape: 0.5 * nu, rate: 0.5 * nu }
    }

    pub fn mean_inv(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn mean_log(&self) -> f64 {
        self.rate.ln() - digamma(self.shape)
    }

    pub fn ln_pdf(&self, alpha: f64) -> f64 {
        self.shape * self.rate.ln() - ln_gamma(self.shape) - (self.shape + 1.0) * alpha.ln() - self.rate / alpha
    }

    /// KL(self ‖ other).
    pub fn kl(&self, other: &InverseGamma) -> f64 {
        let (a, b, a0, b0) = (self.shape, self.rate, other.shape, other.rate);
        (a - a0) * digamma(a) - ln_gamma(a) + ln_gamma(a0) + a0 * (b.ln() - b0.ln()) + a * (b0 - b) / b
    }
}

/// Binary labels with mislabel probability δ on each output coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbitClassifier {
    pub delta: f64,
}

impl ProbitClassifier {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.delta) {
            return Err(HegpError::Domain(format!("mislabel probability {} outside [0, 0.5)", self.delta)));
        }
        Ok(())
    }

    fn sign(y: f64) -> Result<f64> {
        if y == 1.0 {
            Ok(1.0)
        } else if y == 0.0 {
            Ok(-1.0)
        } else {
            Err(HegpError::Domain(format!("label {y} not in {{0, 1}}")))
        }
    }

    /// δ + (1−2δ)Φ(z).
    pub fn prob(&self, z: f64) -> f64 {
        self.delta + (1.0 - 2.0 * self.delta) * norm_cdf(z)
    }

    /// Smoothed surrogate log(δ + (1−2δ)Φ(s f / τ)).
    pub fn smoothed_loglik(&self, y: &[f64], f: &[f64], ctx: &ObsContext) -> Result<f64> {
        let mut total = 0.0;
        for q in 0..y.len() {
            if ctx.is_observed(q) {
                let s = Self::sign(y[q])?;
                total += self.prob(s * f[q] / PROBIT_SURROGATE_TAU).ln();
            }
        }
        Ok(total)
    }

    /// E_q[log p(y|f)] for f ~ N(mean, var), per coordinate, with gradients
    /// in the mean and the variance.
    pub fn expected_loglik(&self, y: f64, mean: f64, var: f64) -> Result<(f64, f64, f64)> {
        let s = Self::sign(y)?;
        if self.delta <= 0.0 {
            return Err(HegpError::Config("training needs a positive mislabel probability".into()));
        }
        let sd = var.max(1e-300).sqrt();
        let z = s * mean / sd;
        let c = ((1.0 - self.delta) / self.delta).ln();
        let value = self.delta.ln() + c * norm_cdf(z);
        let pdf = norm_pdf(z);
        Ok((value, c * pdf * s / sd, -0.5 * c * pdf * z / var.max(1e-300)))
    }
}

impl ObservationModel for ProbitClassifier {
    fn loglik(&self, y: &[f64], f: &[f64], ctx: &ObsContext) -> Result<f64> {
        check_finite(f)?;
        let mut total = 0.0;
        for q in 0..y.len() {
            if ctx.is_observed(q) {
                let s = Self::sign(y[q])?;
                total += if s * f[q] > 0.0 { (1.0 - self.delta).ln() } else { self.delta.ln() };
            }
        }
        Ok(total)
    }

    /// Gradient of the smoothed surrogate; the hard indicator is flat almost everywhere.
    fn grad_f(&self, y: &[f64], f: &[f64], ctx: &ObsContext) -> Result<DVector<f64>> {
        check_finite(f)?;
        let mut g = DVector::zeros(y.len());
        for q in 0..y.len() {
            if ctx.is_observed(q) {
                let s = Self::sign(y[q])?;
                let z = s * f[q] / PROBIT_SURROGATE_TAU;
                // d/dz log(δ + (1−2δ)Φ(z)) computed stably in the left tail
                let ratio = if self.delta > 0.0 {
                    (1.0 - 2.0 * self.delta) * norm_pdf(z) / self.prob(z)
                } else {
                    (-0.5 * z * z - 0.5 * LN_2PI - ln_norm_cdf(z)).exp()
                };
                g[q] = ratio * s / PROBIT_SURROGATE_TAU;
            }
        }
        Ok(g)
    }
}

/// Composable deterministic link expression in the latent coordinates f and
/// free parameters Θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Expr {
    Var { index: usize },
    Const { value: f64 },
    Param { index: usize },
    Affine { scale: f64, offset: f64, arg: Box<Expr> },
    Exp { arg: Box<Expr> },
    Pow { arg: Box<Expr>, power: i32 },
    Sum { terms: Vec<Expr> },
}

/// Value together with its gradients in f and in Θ.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual {
    pub value: f64,
    pub df: Vec<f64>,
    pub dtheta: Vec<f64>,
}

impl Expr {
    pub fn var(index: usize) -> Expr {
        Expr::Var { index }
    }

    pub fn exp(arg: Expr) -> Expr {
        Expr::Exp { arg: Box::new(arg) }
    }

    pub fn pow(arg: Expr, power: i32) -> Expr {
        Expr::Pow { arg: Box::new(arg), power }
    }

    pub fn affine(scale: f64, offset: f64, arg: Expr) -> Expr {
        Expr::Affine { scale, offset, arg: Box::new(arg) }
    }

    pub fn sum(terms: Vec<Expr>) -> Expr {
        Expr::Sum { terms }
    }

    pub fn validate(&self, q: usize, n_theta: usize) -> Result<()> {
        match self {
            Expr::Var { index } if *index >= q => Err(HegpError::Config(format!("link variable {index} out of range"))),
            Expr::Param { index } if *index >= n_theta => {
                Err(HegpError::Config(format!("link parameter {index} out of range")))
            }
            Expr::Affine { arg, .. } | Expr::Exp { arg } | Expr::Pow { arg, .. } => arg.validate(q, n_theta),
            Expr::Sum { terms } => terms.iter().try_for_each(|t| t.validate(q, n_theta)),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, f: &[f64], theta: &[f64]) -> Dual {
        let zero = |q: usize, t: usize| (vec![0.0; q], vec![0.0; t]);
        match self {
            Expr::Var { index } => {
                let (mut df, dtheta) = zero(f.len(), theta.len());
                df[*index] = 1.0;
                Dual { value: f[*index], df, dtheta }
            }
            Expr::Const { value } => {
                let (df, dtheta) = zero(f.len(), theta.len());
                Dual { value: *value, df, dtheta }
            }
            Expr::Param { index } => {
                let (df, mut dtheta) = zero(f.len(), theta.len());
                dtheta[*index] = 1.0;
                Dual { value: theta[*index], df, dtheta }
            }
            Expr::Affine { scale, offset, arg } => arg.eval(f, theta).chain(*scale, |v| scale * v + offset),
            Expr::Exp { arg } => {
                let inner = arg.eval(f, theta);
                let e = inner.value.exp();
                inner.chain(e, |_| e)
            }
            Expr::Pow { arg, power } => {
                let inner = arg.eval(f, theta);
                let p = *power;
                let slope = if p == 0 { 0.0 } else { p as f64 * inner.value.powi(p - 1) };
                inner.chain(slope, |v| v.powi(p))
            }
            Expr::Sum { terms } => {
                let (df, dtheta) = zero(f.len(), theta.len());
                let mut acc = Dual { value: 0.0, df, dtheta };
                for t in terms {
                    let d = t.eval(f, theta);
                    acc.value += d.value;
                    acc.df.iter_mut().zip(&d.df).for_each(|(a, b)| *a += b);
                    acc.dtheta.iter_mut().zip(&d.dtheta).for_each(|(a, b)| *a += b);
                }
                acc
            }
        }
    }
}

impl Dual {
    fn chain(mut self, slope: f64, map: impl Fn(f64) -> f64) -> Dual {
        self.value = map(self.value);
        self.df.iter_mut().for_each(|g| *g *= slope);
        self.dtheta.iter_mut().for_each(|g| *g *= slope);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    Gaussian { scale: f64 },
    StudentT { nu: f64, scale: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseSpec::Gaussian { scale } => scale > 0.0,
            NoiseSpec::StudentT { nu, scale } => scale > 0.0 && nu > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(HegpError::Domain("noise scale and degrees of freedom must be positive".into()))
        }
    }

    pub fn ln_pdf(&self, r: f64) -> f64 {
        match *self {
            NoiseSpec::Gaussian { scale } => -0.5 * LN_2PI - scale.ln() - 0.5 * (r / scale).powi(2),
            NoiseSpec::StudentT { nu, scale } => {
                ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln() - scale.ln()
                    - 0.5 * (nu + 1.0) * (r * r / (nu * scale * scale)).ln_1p()
            }
        }
    }

    /// d/dr of `ln_pdf`.
    pub fn dln_pdf(&self, r: f64) -> f64 {
        match *self {
            NoiseSpec::Gaussian { scale } => -r / (scale * scale),
            NoiseSpec::StudentT { nu, scale } => -(nu + 1.0) * r / (nu * scale * scale + r * r),
        }
    }
}

/// y_q = h_q(f; Θ) + ε_q with independent fixed-scale noise per output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceLink {
    pub links: Vec<Expr>,
    pub noise: Vec<NoiseSpec>,
    #[serde(default)]
    pub theta: Vec<f64>,
}

impl StateSpaceLink {
    pub fn validate(&self, q: usize) -> Result<()> {
        if self.links.len() != q || self.noise.len() != q {
            return Err(HegpError::Dimension(format!("state-space link needs {q} links and noise specs")));
        }
        for (l, n) in self.links.iter().zip(&self.noise) {
            l.validate(q, self.theta.len())?;
            n.validate()?;
        }
        Ok(())
    }

    /// The three-output link used by the state-space simulation.
    pub fn paper_3d() -> StateSpaceLink {
        StateSpaceLink {
            links: vec![
                Expr::var(0),
                Expr::sum(vec![Expr::exp(Expr::var(1)), Expr::var(1)]),
                Expr::sum(vec![Expr::exp(Expr::affine(0.5, 0.0, Expr::var(2))), Expr::pow(Expr::var(2), 3)]),
            ],
            noise: [0.05, 0.10, 0.15].iter().map(|&s| NoiseSpec::StudentT { nu: 6.0, scale: s }).collect(),
            theta: Vec::new(),
        }
    }

    /// Noise-free response h(f).
    pub fn mean_response(&self, f: &[f64]) -> Vec<f64> {
        self.links.iter().map(|l| l.eval(f, &self.theta).value).collect()
    }

    fn fold(&self, y: &[f64], f: &[f64], ctx: &ObsContext) -> Result<(f64, DVector<f64>, DVector<f64>)> {
        check_finite(f)?;
        let mut value = 0.0;
        let mut gf = DVector::zeros(f.len());
        let mut gt = DVector::zeros(self.theta.len());
        for (q, (link, noise)) in self.links.iter().zip(&self.noise).enumerate() {
            if !ctx.is_observed(q) {
                continue;
            }
            let h = link.eval(f, &self.theta);
            let r = y[q] - h.value;
            value += noise.ln_pdf(r);
            let s = -noise.dln_pdf(r);
            for (i, g) in h.df.iter().enumerate() {
                gf[i] += s * g;
            }
            for (i, g) in h.dtheta.iter().enumerate() {
                gt[i] += s * g;
            }
        }
        Ok((value, gf, gt))
    }
}

impl ObservationModel for StateSpaceLink {
    fn theta(&self) -> Vec<f64> {
        self.theta.clone()
    }

    fn set_theta(&mut self, theta: &[f64]) {
        self.theta = theta.to_vec();
    }

    fn loglik(&self, y: &[f64], f: &[f64], ctx: &ObsContext) -> Result<f64> {
        Ok(self.fold(y, f, ctx)?.0)
    }

    fn grad_f(&self, y: &[f64], f: &[f64], ctx: &ObsContext) -> Result<DVector<f64>> {
        Ok(self.fold(y, f, ctx)?.1)
    }

    fn grad_theta(&self, y: &[f64], f: &[f64], ctx: &ObsContext) -> Result<DVector<f64>> {
        Ok(self.fold(y, f, ctx)?.2)
    }
}

/// Third-level family selected by configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ThirdLevel {
    Identity,
    StudentT(StudentTObservation),
    Probit(ProbitClassifier),
    StateSpace(StateSpaceLink),
}

impl ThirdLevel {
    pub fn validate(&self, q: usize) -> Result<()> {
        match self {
            ThirdLevel::Identity => Ok(()),
            ThirdLevel::StudentT(t) => t.validate(),
            ThirdLevel::Probit(p) => p.validate(),
            ThirdLevel::StateSpace(s) => s.validate(q),
        }
    }

    /// Identity, or a tied Student-t with σ₀ = 0.
    pub fn is_effectively_gaussian(&self) -> bool {
        match self {
            ThirdLevel::Identity => true,
            ThirdLevel::StudentT(t) => t.sigma0() == Some(0.0),
            _ => false,
        }
    }

    pub fn as_model(&self) -> &dyn ObservationModel {
        match self {
            ThirdLevel::Identity => &IdentityGaussian,
            ThirdLevel::StudentT(t) => t,
            ThirdLevel::Probit(p) => p,
            ThirdLevel::StateSpace(s) => s,
        }
    }

    pub fn as_model_mut(&mut self) -> Option<&mut dyn ObservationModel> {
        match self {
            ThirdLevel::StateSpace(s) => Some(s),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_grad(g: impl Fn(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..at.len())
            .map(|i| {
                let mut p = at.to_vec();
                let mut m = at.to_vec();
                p[i] += h;
                m[i] -= h;
                (g(&p) - g(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
        assert!(num / den < tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn probit_correct_sign_gives_one_minus_delta() {
        let m = ProbitClassifier { delta: 0.1 };
        let v = m.loglik(&[1.0], &[2.0], &ObsContext::default()).unwrap();
        assert!((v - 0.9f64.ln()).abs() < 1e-15);
        assert!(m.loglik(&[2.0], &[1.0], &ObsContext::default()).is_err());
    }

    #[test]
    fn student_t_density_at_center() {
        let phi = DMatrix::identity(1, 1);
        let ctx = ObsContext { scale: Some(&phi), observed: None };
        let m = StudentTObservation::tied(6.0, 1.0);
        let v = m.loglik(&[0.3], &[0.3], &ctx).unwrap();
        let want = (ln_gamma(3.5) - ln_gamma(3.0)) - 0.5 * (6.0 * std::f64::consts::PI).ln();
        assert!((v - want).abs() < 1e-13);
    }

    #[test]
    fn student_t_large_nu_approaches_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let ctx = ObsContext { scale: Some(&phi), observed: None };
        let m = StudentTObservation::tied(1e6, 1.0);
        let gauss = crate::gp_core::GaussianDist::new(DVector::zeros(2), phi.clone()).unwrap();
        for _ in 0..50 {
            let y = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let t = m.loglik(&y, &[0.0, 0.0], &ctx).unwrap();
            let g = crate::gp_core::logpdf(&gauss, &DVector::from_row_slice(&y)).unwrap();
            assert!((t - g).abs() < 1e-3);
        }
    }

    #[test]
    fn student_t_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = StudentTObservation::tied(6.0, 1.0);
        for _ in 0..100 {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let phi = &a * a.transpose() + DMatrix::identity(2, 2) * 0.3;
            let ctx = ObsContext { scale: Some(&phi), observed: None };
            let y = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let f = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let g = m.grad_f(&y, &f, &ctx).unwrap();
            let fd = fd_grad(|ff| m.loglik(&y, ff, &ctx).unwrap(), &f);
            assert_close(g.as_slice(), &fd, 1e-4);
        }
    }

    #[test]
    fn student_t_masked_coordinates_are_ignored() {
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let mask = [true, false];
        let m = StudentTObservation::tied(6.0, 1.0);
        let ctx = ObsContext { scale: Some(&phi), observed: Some(&mask) };
        let a = m.loglik(&[0.4, 9.0], &[0.0, 0.0], &ctx).unwrap();
        let b = m.loglik(&[0.4, -3.0], &[0.0, 5.0], &ctx).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.grad_f(&[0.4, 9.0], &[0.0, 0.0], &ctx).unwrap()[1], 0.0);
    }

    #[test]
    fn probit_surrogate_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = ProbitClassifier { delta: 0.1 };
        let ctx = ObsContext::default();
        for _ in 0..100 {
            let y = [if rng.random_bool(0.5) { 1.0 } else { 0.0 }];
            let f = [rng.random_range(-0.3..0.3)];
            let g = m.grad_f(&y, &f, &ctx).unwrap();
            let fd = fd_grad(|ff| m.smoothed_loglik(&y, ff, &ctx).unwrap(), &f);
            assert_close(g.as_slice(), &fd, 1e-4);
        }
    }

    #[test]
    fn probit_expected_loglik_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = ProbitClassifier { delta: 0.1 };
        for _ in 0..100 {
            let y = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            let p = [rng.random_range(-2.0..2.0), rng.random_range(0.05..2.0)];
            let (_, gm, gv) = m.expected_loglik(y, p[0], p[1]).unwrap();
            let fd = fd_grad(|pp| m.expected_loglik(y, pp[0], pp[1]).unwrap().0, &p);
            assert_close(&[gm, gv], &fd, 1e-4);
        }
    }

    #[test]
    fn probit_expected_loglik_matches_quadrature() {
        let m = ProbitClassifier { delta: 0.2 };
        let (mean, var) = (0.4, 0.7);
        let (v, _, _) = m.expected_loglik(1.0, mean, var).unwrap();
        let sd: f64 = var.sqrt();
        // split at the discontinuity so each piece is smooth
        let n = 100_000;
        let mut acc = 0.0;
        for (lo, hi, ll) in [(mean - 12.0 * sd, 0.0, 0.2f64.ln()), (0.0, mean + 12.0 * sd, 0.8f64.ln())] {
            let dx = (hi - lo) / n as f64;
            for i in 0..n {
                let x = lo + (i as f64 + 0.5) * dx;
                acc += ll * norm_pdf((x - mean) / sd) / sd * dx;
            }
        }
        assert!((v - acc).abs() < 1e-6);
    }

    #[test]
    fn exp_link_chain_rule_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = StateSpaceLink {
            links: vec![Expr::sum(vec![Expr::exp(Expr::var(0)), Expr::var(0)])],
            noise: vec![NoiseSpec::Gaussian { scale: 0.3 }],
            theta: vec![],
        };
        let ctx = ObsContext::default();
        for _ in 0..100 {
            let y = [rng.random_range(-1.0..3.0)];
            let f = [rng.random_range(-1.5..1.5)];
            let g = m.grad_f(&y, &f, &ctx).unwrap();
            let fd = fd_grad(|ff| m.loglik(&y, ff, &ctx).unwrap(), &f);
            assert_close(g.as_slice(), &fd, 1e-4);
        }
    }

    #[test]
    fn state_space_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = StateSpaceLink::paper_3d();
        m.links[0] = Expr::sum(vec![Expr::var(0), Expr::Param { index: 0 }]);
        m.links[2] = Expr::sum(vec![m.links[2].clone(), Expr::affine(1.0, 0.0, Expr::Param { index: 1 })]);
        m.theta = vec![0.2, -0.1];
        let ctx = ObsContext::default();
        for _ in 0..100 {
            let f: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..3.0)).collect();
            let g = m.grad_f(&y, &f, &ctx).unwrap();
            let fd = fd_grad(|ff| m.loglik(&y, ff, &ctx).unwrap(), &f);
            assert_close(g.as_slice(), &fd, 1e-4);
            let gt = m.grad_theta(&y, &f, &ctx).unwrap();
            let fdt = fd_grad(
                |t| {
                    let mut mm = m.clone();
                    mm.set_theta(t);
                    mm.loglik(&y, &f, &ctx).unwrap()
                },
                &m.theta,
            );
            assert_close(gt.as_slice(), &fdt, 1e-4);
        }
    }

    #[test]
    fn inverse_gamma_moments_match_quadrature() {
        for &(nu, q, xi) in &[(6.0, 1usize, 0.7), (6.0, 3, 1.4), (3.0, 2, 1.0)] {
            let d = InverseGamma::variational(nu, q, xi);
            let prior = InverseGamma::prior(nu);
            // substitution α = e^t turns the integrals into smooth ones over t
            let n = 400_000;
            let (lo, hi) = (-25.0, 25.0);
            let dt = (hi - lo) / n as f64;
            let (mut m0, mut minv, mut mlog, mut kl) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                let t = lo + (i as f64 + 0.5) * dt;
                let a = f64::exp(t);
                let lp = d.ln_pdf(a);
                let w = (lp + t).exp() * dt;
                m0 += w;
                minv += w / a;
                mlog += w * t;
                kl += w * (lp - prior.ln_pdf(a));
            }
            assert!((m0 - 1.0).abs() < 1e-8);
            assert!((minv - xi * xi).abs() < 1e-8);
            assert!((d.mean_inv() - xi * xi).abs() < 1e-12);
            assert!((mlog - d.mean_log()).abs() < 1e-8);
            assert!((kl - d.kl(&prior)).abs() < 1e-8);
        }
    }

    #[test]
    fn third_level_round_trips_through_json() {
        let cases = vec![
            ThirdLevel::Identity,
            ThirdLevel::StudentT(StudentTObservation::tied(6.0, 0.1)),
            ThirdLevel::Probit(ProbitClassifier { delta: 0.1 }),
            ThirdLevel::StateSpace(StateSpaceLink::paper_3d()),
        ];
        for c in cases {
            let s = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<ThirdLevel>(&s).unwrap(), c);
        }
    }

    #[test]
    fn tied_zero_is_effectively_gaussian() {
        assert!(ThirdLevel::StudentT(StudentTObservation::tied(6.0, 0.0)).is_effectively_gaussian());
        assert!(!ThirdLevel::StudentT(StudentTObservation::tied(6.0, 0.1)).is_effectively_gaussian());
    }
}
