//! Kernels, separable multi-output covariances, mean functions and
//! closed-form Gaussian operations.
//!
//! Two index layouts appear. The *output-major* layout stacks the columns of
//! an N×Q matrix, so coordinate `q` of datum `n` sits at `q*N + n`; this is the
//! layout returned by [`MultiOutputCov::gram`]. The *datum-major* layout puts
//! it at `n*Q + q`, which keeps per-datum Q×Q blocks contiguous and is what
//! the training engine uses internally.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HegpError, Result};
use crate::linalg::{symmetrize, Chol};
use crate::special::LN_2PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    Matern32,
}

/// Stationary scalar kernel. `gamma2` is the squared inverse lengthscale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub family: KernelFamily,
    pub sigma2: f64,
    pub gamma2: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    (0..m.ncols()).map(|j| m[(i, j)]).collect()
}

impl Kernel {
    pub fn new(family: KernelFamily, sigma2: f64, gamma2: f64) -> Kernel {
        Kernel { family, sigma2, gamma2 }
    }

    pub fn se(gamma2: f64) -> Kernel {
        Kernel::new(KernelFamily::SquaredExponential, 1.0, gamma2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0 && self.gamma2.is_finite() && self.gamma2 > 0.0) {
            return Err(HegpError::Domain(format!(
                "kernel hyperparameters must be positive and finite (sigma2={}, gamma2={})",
                self.sigma2, self.gamma2
            )));
        }
        Ok(())
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.eval_with_grad(a, b).0
    }

    /// Kernel value and its derivative with respect to log γ².
    pub fn eval_with_grad(&self, a: &[f64], b: &[f64]) -> (f64, f64) {
        let d2 = sq_dist(a, b);
        match self.family {
            KernelFamily::SquaredExponential => {
                let k = self.sigma2 * (-self.gamma2 * d2).exp();
                (k, -self.gamma2 * d2 * k)
            }
            KernelFamily::Matern32 => {
                let u = 3f64.sqrt() * self.gamma2 * d2.sqrt();
                let e = (-u).exp();
                (self.sigma2 * (1.0 + u) * e, -self.sigma2 * u * u * e)
            }
        }
    }

    /// Gram matrix between the rows of `a` and the rows of `b`.
    pub fn gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let ra: Vec<Vec<f64>> = (0..a.nrows()).map(|i| row(a, i)).collect();
        let rb: Vec<Vec<f64>> = (0..b.nrows()).map(|i| row(b, i)).collect();
        DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| self.eval(&ra[i], &rb[j]))
    }

    /// Gram matrix and its derivative with respect to log γ².
    pub fn gram_with_grad(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let ra: Vec<Vec<f64>> = (0..a.nrows()).map(|i| row(a, i)).collect();
        let rb: Vec<Vec<f64>> = (0..b.nrows()).map(|i| row(b, i)).collect();
        let mut k = DMatrix::zeros(a.nrows(), b.nrows());
        let mut dk = DMatrix::zeros(a.nrows(), b.nrows());
        for i in 0..a.nrows() {
            for j in 0..b.nrows() {
                let (v, g) = self.eval_with_grad(&ra[i], &rb[j]);
                k[(i, j)] = v;
                dk[(i, j)] = g;
            }
        }
        (k, dk)
    }
}

/// Separable covariance Σ ⊗ 𝕂.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiOutputCov {
    pub sigma: DMatrix<f64>,
    pub kernel: Kernel,
}

impl MultiOutputCov {
    pub fn new(sigma: DMatrix<f64>, kernel: Kernel) -> MultiOutputCov {
        MultiOutputCov { sigma, kernel }
    }

    pub fn q(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.sigma.nrows() != self.sigma.ncols() {
            return Err(HegpError::Dimension("output covariance must be square".into()));
        }
        if self.sigma.iter().any(|v| !v.is_finite()) {
            return Err(HegpError::Domain("output covariance has non-finite entries".into()));
        }
        Ok(())
    }

    /// 𝕍_AB in output-major layout: entry [p|A|+m, q|B|+n] = Σ_pq k(a_m, b_n).
    pub fn gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.validate()?;
        if a.nrows() == 0 || b.nrows() == 0 {
            return Err(HegpError::Dimension("covariate sets must be non-empty".into()));
        }
        let k = self.kernel.gram(a, b);
        Ok(self.sigma.kronecker(&k))
    }

    /// 𝕍_AB in datum-major layout: entry [mQ+p, nQ+q] = Σ_pq k(a_m, b_n).
    pub fn gram_dm(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.validate()?;
        let k = self.kernel.gram(a, b);
        Ok(k.kronecker(&self.sigma))
    }
}

/// Row n of the returned matrix is μ(x_n)ᵀ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum MeanFunction {
    Zero,
    Constant { b: Vec<f64> },
    /// μ_q(x) = a_qᵀx + b_q
    Linear { a: Vec<Vec<f64>>, b: Vec<f64> },
}

impl MeanFunction {
    pub fn eval(&self, x: &[f64], q: usize) -> DVector<f64> {
        match self {
            MeanFunction::Zero => DVector::zeros(q),
            MeanFunction::Constant { b } => DVector::from_column_slice(b),
            MeanFunction::Linear { a, b } => DVector::from_fn(q, |i, _| {
                b[i] + a[i].iter().zip(x).map(|(u, v)| u * v).sum::<f64>()
            }),
        }
    }

    pub fn eval_set(&self, x: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), q);
        for n in 0..x.nrows() {
            let m = self.eval(&row(x, n), q);
            out.row_mut(n).copy_from(&m.transpose());
        }
        out
    }

    /// Basis functions per output; empty for `Zero`.
    pub fn basis(&self, x: &[f64]) -> Vec<f64> {
        match self {
            MeanFunction::Zero => vec![],
            MeanFunction::Constant { .. } => vec![1.0],
            MeanFunction::Linear { .. } => std::iter::once(1.0).chain(x.iter().copied()).collect(),
        }
    }

    pub fn n_basis(&self, p: usize) -> usize {
        match self {
            MeanFunction::Zero => 0,
            MeanFunction::Constant { .. } => 1,
            MeanFunction::Linear { .. } => 1 + p,
        }
    }

    /// Flat parameters, output by output, in basis order.
    pub fn params(&self) -> Vec<f64> {
        match self {
            MeanFunction::Zero => vec![],
            MeanFunction::Constant { b } => b.clone(),
            MeanFunction::Linear { a, b } => {
                let mut out = Vec::new();
                for (aq, bq) in a.iter().zip(b) {
                    out.push(*bq);
                    out.extend_from_slice(aq);
                }
                out
            }
        }
    }

    pub fn set_params(&mut self, theta: &[f64]) {
        match self {
            MeanFunction::Zero => {}
            MeanFunction::Constant { b } => b.copy_from_slice(theta),
            MeanFunction::Linear { a, b } => {
                let stride = 1 + a.first().map_or(0, |r| r.len());
                for (q, (aq, bq)) in a.iter_mut().zip(b.iter_mut()).enumerate() {
                    *bq = theta[q * stride];
                    aq.copy_from_slice(&theta[q * stride + 1..(q + 1) * stride]);
                }
            }
        }
    }

    /// Zero-initialized mean of the given form.
    pub fn zeros_like(form: &str, q: usize, p: usize) -> Result<MeanFunction> {
        match form {
            "zero" => Ok(MeanFunction::Zero),
            "constant" => Ok(MeanFunction::Constant { b: vec![0.0; q] }),
            "linear" => Ok(MeanFunction::Linear { a: vec![vec![0.0; p]; q], b: vec![0.0; q] }),
            other => Err(HegpError::Config(format!("unknown mean function '{other}'"))),
        }
    }
}

/// Column stacking of an N×Q matrix (output-major).
pub fn vec_om(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Row stacking of an N×Q matrix (datum-major).
pub fn vec_dm(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), (0..m.nrows()).flat_map(|n| (0..m.ncols()).map(move |q| m[(n, q)])))
}

/// Permutation p with p[dm_index] = om_index.
pub fn dm_to_om_perm(n: usize, q: usize) -> Vec<usize> {
    (0..n * q).map(|i| (i % q) * n + i / q).collect()
}

pub fn permute_sym(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(perm.len(), perm.len(), |i, j| m[(perm[i], perm[j])])
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDist {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<GaussianDist> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(HegpError::Dimension(format!(
                "mean of length {} with covariance {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(GaussianDist { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Exact log-density via Cholesky.
pub fn logpdf(dist: &GaussianDist, x: &DVector<f64>) -> Result<f64> {
    if x.len() != dist.dim() {
        return Err(HegpError::Dimension(format!("point of length {} for dimension {}", x.len(), dist.dim())));
    }
    let ch = Chol::new(&dist.cov)?;
    let r = x - &dist.mean;
    let a = ch.solve_vec(&r);
    Ok(-0.5 * r.dot(&a) - 0.5 * ch.logdet() - 0.5 * dist.dim() as f64 * LN_2PI)
}

/// KL(p ‖ q) in closed form.
pub fn gaussian_kl(p: &GaussianDist, q: &GaussianDist) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(HegpError::Dimension(format!("KL between dimensions {} and {}", p.dim(), q.dim())));
    }
    if p == q {
        return Ok(0.0);
    }
    let cq = Chol::new(&q.cov)?;
    let cp = Chol::new(&p.cov)?;
    let k = p.dim() as f64;
    let tr = cq.solve_mat(&p.cov).trace();
    let d = &q.mean - &p.mean;
    let maha = d.dot(&cq.solve_vec(&d));
    Ok((0.5 * (tr + maha - k + cq.logdet() - cp.logdet())).max(0.0))
}

/// Conditional distribution of the unobserved coordinates given the observed ones.
pub fn gaussian_condition(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    observed: &[usize],
    values: &DVector<f64>,
) -> Result<GaussianDist> {
    let d = mean.len();
    if cov.nrows() != d || cov.ncols() != d || observed.len() != values.len() {
        return Err(HegpError::Dimension("conditioning inputs disagree in size".into()));
    }
    if observed.iter().any(|&i| i >= d) {
        return Err(HegpError::Dimension("observed index out of range".into()));
    }
    if observed.is_empty() {
        return GaussianDist::new(mean.clone(), cov.clone());
    }
    let free: Vec<usize> = (0..d).filter(|i| !observed.contains(i)).collect();
    let s_oo = DMatrix::from_fn(observed.len(), observed.len(), |i, j| cov[(observed[i], observed[j])]);
    let s_fo = DMatrix::from_fn(free.len(), observed.len(), |i, j| cov[(free[i], observed[j])]);
    let s_ff = DMatrix::from_fn(free.len(), free.len(), |i, j| cov[(free[i], free[j])]);
    let ch = Chol::new(&s_oo)?;
    let resid = DVector::from_fn(observed.len(), |i, _| values[i] - mean[observed[i]]);
    let m_f = DVector::from_fn(free.len(), |i, _| mean[free[i]]);
    let new_mean = m_f + &s_fo * ch.solve_vec(&resid);
    let mut new_cov = s_ff - &s_fo * ch.solve_mat(&s_fo.transpose());
    symmetrize(&mut new_cov);
    GaussianDist::new(new_mean, new_cov)
}

/// Textbook multi-output GP regression with a constant noise covariance,
/// assembled densely in the output-major layout. Returns the posterior of
/// g(x*) given Y.
pub fn gp_regression_posterior(
    cov: &MultiOutputCov,
    mean: &MeanFunction,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    xstar: &[f64],
) -> Result<GaussianDist> {
    let n = x.nrows();
    let q = cov.q();
    let xs = DMatrix::from_row_slice(1, xstar.len(), xstar);
    let v_xx = cov.gram(x, x)?;
    let v_sx = cov.gram(&xs, x)?;
    let v_ss = cov.gram(&xs, &xs)?;
    let noise_full = noise.kronecker(&DMatrix::<f64>::identity(n, n));
    let ch = Chol::new(&(v_xx + noise_full))?;
    let resid = vec_om(y) - vec_om(&mean.eval_set(x, q));
    let m = &v_sx * ch.solve_vec(&resid) + mean.eval(xstar, q);
    let mut c = v_ss - &v_sx * ch.solve_mat(&v_sx.transpose());
    symmetrize(&mut c);
    GaussianDist::new(m, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn pts(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn identity_sigma_single_point() {
        let cov = MultiOutputCov::new(DMatrix::identity(2, 2), Kernel::se(1.0));
        let g = cov.gram(&pts(&[0.0]), &pts(&[0.0])).unwrap();
        assert_eq!(g, DMatrix::identity(2, 2));
    }

    #[test]
    fn single_point_gram_is_sigma() {
        let s = DMatrix::from_row_slice(2, 2, &[4.29, 6.09, 6.09, 8.63]);
        let cov = MultiOutputCov::new(s.clone(), Kernel::se(0.7));
        let g = cov.gram(&pts(&[1.3]), &pts(&[1.3])).unwrap();
        assert!((g - s).norm() < 1e-14);
    }

    #[test]
    fn matern32_at_unit_distance() {
        let k = Kernel::new(KernelFamily::Matern32, 1.0, 1.0);
        let v = k.eval(&[0.0], &[1.0]);
        let expect = (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp();
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 0.48335).abs() < 1e-5);
    }

    #[test]
    fn output_major_layout_entries() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let k = Kernel::se(0.3);
        let cov = MultiOutputCov::new(s.clone(), k.clone());
        let a = pts(&[0.0, 1.0, 2.5]);
        let b = pts(&[0.2, -1.0]);
        let g = cov.gram(&a, &b).unwrap();
        for p in 0..2 {
            for qq in 0..2 {
                for m in 0..3 {
                    for n in 0..2 {
                        let expect = s[(p, qq)] * k.eval(&[a[(m, 0)]], &[b[(n, 0)]]);
                        assert!((g[(p * 3 + m, qq * 2 + n)] - expect).abs() < 1e-15);
                    }
                }
            }
        }
        let gd = cov.gram_dm(&a, &b).unwrap();
        for p in 0..2 {
            for qq in 0..2 {
                for m in 0..3 {
                    for n in 0..2 {
                        assert_eq!(gd[(m * 2 + p, n * 2 + qq)], g[(p * 3 + m, qq * 2 + n)]);
                    }
                }
            }
        }
    }

    #[test]
    fn non_finite_hyperparameters_rejected() {
        let cov = MultiOutputCov::new(DMatrix::identity(1, 1), Kernel::se(f64::NAN));
        assert!(matches!(cov.gram(&pts(&[0.0]), &pts(&[0.0])), Err(HegpError::Domain(_))));
    }

    #[test]
    fn kernel_log_gamma_gradient_matches_fd() {
        for fam in [KernelFamily::SquaredExponential, KernelFamily::Matern32] {
            let k = Kernel::new(fam, 1.3, 0.8);
            let (_, g) = k.eval_with_grad(&[0.1, 0.4], &[0.9, -0.2]);
            let h: f64 = 1e-6;
            let kp = Kernel::new(fam, 1.3, 0.8 * h.exp()).eval(&[0.1, 0.4], &[0.9, -0.2]);
            let km = Kernel::new(fam, 1.3, 0.8 * (-h).exp()).eval(&[0.1, 0.4], &[0.9, -0.2]);
            assert!((g - (kp - km) / (2.0 * h)).abs() < 1e-8);
        }
    }

    #[test]
    fn logpdf_reference_values() {
        let d = GaussianDist::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        assert!((logpdf(&d, &DVector::zeros(1)).unwrap() + 0.5 * LN_2PI).abs() < 1e-15);
        let d2 = GaussianDist::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let v = logpdf(&d2, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert!((v - (-LN_2PI - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn logpdf_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: DMatrix<f64> = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let cov = &a * a.transpose() + DMatrix::identity(3, 3) * 0.3;
        let mean = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let inv: DMatrix<f64> = cov.clone().try_inverse().unwrap();
        let r = &x - &mean;
        let expect = -0.5 * (r.transpose() * inv * &r)[(0, 0)] - 0.5 * cov.determinant().ln() - 1.5 * LN_2PI;
        let d = GaussianDist::new(mean, cov).unwrap();
        assert!((logpdf(&d, &x).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_scalar_values() {
        let p = GaussianDist::new(DVector::from_vec(vec![1.0]), DMatrix::identity(1, 1)).unwrap();
        let q = GaussianDist::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        assert_eq!(gaussian_kl(&q, &q).unwrap(), 0.0);
        assert!((gaussian_kl(&p, &q).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            gaussian_kl(&p, &GaussianDist::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap()),
            Err(HegpError::Dimension(_))
        ));
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |rng: &mut ChaCha8Rng| {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let c = &a * a.transpose() + DMatrix::identity(3, 3) * 0.5;
            let m = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            GaussianDist::new(m, c).unwrap()
        };
        let p = mk(&mut rng);
        let q = mk(&mut rng);
        let kl = gaussian_kl(&p, &q).unwrap();
        let l = Chol::new(&p.cov).unwrap().l();
        let n = 100_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let z = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &p.mean + &l * z;
            vals.push(logpdf(&p, &x).unwrap() - logpdf(&q, &x).unwrap());
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - kl).abs() < 3.0 * se, "kl={kl} mc={mean} se={se}");
    }

    #[test]
    fn condition_on_nothing_is_identity() {
        let m = DVector::from_vec(vec![1.0, 2.0]);
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let g = gaussian_condition(&m, &c, &[], &DVector::zeros(0)).unwrap();
        assert_eq!(g.mean, m);
        assert_eq!(g.cov, c);
    }

    #[test]
    fn condition_uncorrelated_standard_normal() {
        let g = gaussian_condition(&DVector::zeros(2), &DMatrix::identity(2, 2), &[0], &DVector::zeros(1)).unwrap();
        assert!((g.mean[0]).abs() < 1e-15 && (g.cov[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn condition_matches_grid_density_ratio() {
        // conditional of coordinate 3 given coordinates 0..3 on a random 4x4 covariance;
        // the density ratio p(x_obs, t)/p(x_obs, t0) must equal the conditional ratio.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let cov = &a * a.transpose() + DMatrix::identity(4, 4) * 0.2;
        let mean = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let obs = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let c = gaussian_condition(&mean, &cov, &[0, 1, 2], &obs).unwrap();
        let joint = GaussianDist::new(mean, cov).unwrap();
        let full = |t: f64| DVector::from_vec(vec![obs[0], obs[1], obs[2], t]);
        // numerical normalization over a fine grid
        let (lo, hi, k) = (c.mean[0] - 12.0 * c.cov[(0, 0)].sqrt(), c.mean[0] + 12.0 * c.cov[(0, 0)].sqrt(), 20001);
        let h = (hi - lo) / (k - 1) as f64;
        let mut z = 0.0;
        for i in 0..k {
            let w = if i == 0 || i == k - 1 { 0.5 } else { 1.0 };
            z += w * logpdf(&joint, &full(lo + i as f64 * h)).unwrap().exp() * h;
        }
        for &t in &[c.mean[0] - 0.7, c.mean[0], c.mean[0] + 1.1] {
            let num = logpdf(&joint, &full(t)).unwrap().exp() / z;
            let cond = GaussianDist::new(c.mean.clone(), c.cov.clone()).unwrap();
            let expect = logpdf(&cond, &DVector::from_vec(vec![t])).unwrap().exp();
            assert!((num - expect).abs() < 1e-8 * expect.max(1.0));
        }
    }

    #[test]
    fn gp_regression_single_output_reference() {
        // N=1: posterior mean at the training point is k/(k+s) y
        let cov = MultiOutputCov::new(DMatrix::identity(1, 1), Kernel::se(1.0));
        let post = gp_regression_posterior(
            &cov,
            &MeanFunction::Zero,
            &pts(&[0.0]),
            &DMatrix::from_element(1, 1, 2.0),
            &DMatrix::from_element(1, 1, 1.0),
            &[0.0],
        )
        .unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-14);
        assert!((post.cov[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn mean_function_params_round_trip() {
        let mut m = MeanFunction::zeros_like("linear", 2, 3).unwrap();
        let theta: Vec<f64> = (0..8).map(|i| i as f64).collect();
        m.set_params(&theta);
        assert_eq!(m.params(), theta);
        let v = m.eval(&[1.0, 1.0, 1.0], 2);
        assert_eq!(v[0], 0.0 + 1.0 + 2.0 + 3.0);
        assert_eq!(v[1], 4.0 + 5.0 + 6.0 + 7.0);
    }

    #[test]
    fn vec_layouts_agree_with_permutation() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let om = vec_om(&m);
        let dm = vec_dm(&m);
        let perm = dm_to_om_perm(3, 2);
        for i in 0..6 {
            assert_eq!(dm[i], om[perm[i]]);
        }
    }

    fn arb_set(max: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, 1..=max)
    }

    proptest! {
        #[test]
        fn gram_transpose_symmetry(a in arb_set(5), b in arb_set(5), q in 1usize..=3, g2 in 0.1f64..3.0) {
            let s = DMatrix::from_fn(q, q, |i, j| if i == j { 1.0 + i as f64 } else { 0.3 });
            for fam in [KernelFamily::SquaredExponential, KernelFamily::Matern32] {
                let cov = MultiOutputCov::new(s.clone(), Kernel::new(fam, 1.0, g2));
                let ab = cov.gram(&pts(&a), &pts(&b)).unwrap();
                let ba = cov.gram(&pts(&b), &pts(&a)).unwrap();
                prop_assert!((ab - ba.transpose()).norm() < 1e-14);
            }
        }

        #[test]
        fn quadratic_form_nonnegative(a in arb_set(5), seed in 0u64..1000, g2 in 0.1f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = 2;
            let l = DMatrix::from_fn(q, q, |_, _| rng.random_range(-1.0..1.0));
            let s = &l * l.transpose();
            let cov = MultiOutputCov::new(s, Kernel::new(KernelFamily::Matern32, 1.0, g2));
            let x = pts(&a);
            let v = cov.gram(&x, &x).unwrap();
            let w = DVector::from_fn(a.len() * q, |_, _| rng.random_range(-1.0..1.0));
            let val = (w.transpose() * &v * &w)[(0, 0)];
            prop_assert!(val >= -1e-8 * w.norm_squared());
        }

        #[test]
        fn kl_nonnegative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| {
                let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
                GaussianDist::new(
                    DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
                    &a * a.transpose() + DMatrix::identity(2, 2) * 0.1,
                ).unwrap()
            };
            let p = mk(&mut rng);
            let q = mk(&mut rng);
            prop_assert!(gaussian_kl(&p, &q).unwrap() >= 0.0);
            prop_assert!(gaussian_kl(&p, &p).unwrap() == 0.0);
        }

        #[test]
        fn kernel_symmetric(a in arb_set(3), g2 in 0.1f64..3.0) {
            let b: Vec<f64> = a.iter().map(|v| v * 0.5 + 0.1).collect();
            for fam in [KernelFamily::SquaredExponential, KernelFamily::Matern32] {
                let k = Kernel::new(fam, 1.7, g2);
                prop_assert_eq!(k.eval(&a, &b), k.eval(&b, &a));
            }
        }
    }
}
