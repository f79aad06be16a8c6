//! Synthetic scenarios with known generative truth, and evaluation metrics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{HegpError, Result};
use crate::gp_core::{gaussian_kl, GaussianDist, Kernel, MultiOutputCov};
use crate::linalg::{symmetrize, Chol};
use crate::serde_mat;
use crate::special::{chi2_cdf, ks_test};
use crate::predict::{cvm_score, predict_f, select_sigma0};
use crate::third_level::StateSpaceLink;
use crate::vem::{fit, EMState, FitConfig, ModelFamily};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// Two correlated outputs with covariate-dependent noise correlation.
    HeteroBivariate,
    /// One output with covariate-dependent noise variance and a fraction of
    /// responses replaced by uniform draws.
    HeteroUnivariateOutliers,
    /// Binary labels in (−2, 2)² with two biased circles.
    ClassificationCircles,
    /// Three hidden signals observed through nonlinear links with t noise.
    #[serde(rename = "state-space-3d")]
    StateSpace3D,
    /// Two correlated outputs with a constant noise correlation.
    HomoscedasticControl,
}

impl std::str::FromStr for ScenarioKind {
    type Err = HegpError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| HegpError::Config(format!("unknown scenario '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub kind: ScenarioKind,
    pub n: usize,
    pub contamination: f64,
    pub seed: u64,
}

impl SimScenario {
    /// Default size and contamination for a scenario kind.
    pub fn new(kind: ScenarioKind, seed: u64) -> SimScenario {
        let (n, contamination) = match kind {
            ScenarioKind::HeteroBivariate | ScenarioKind::HomoscedasticControl => (500, 0.0),
            ScenarioKind::HeteroUnivariateOutliers => (500, 0.05),
            ScenarioKind::ClassificationCircles => (1000, 0.0),
            ScenarioKind::StateSpace3D => (400, 0.0),
        };
        SimScenario { kind, n, contamination, seed }
    }

    pub fn with_n(mut self, n: usize) -> SimScenario {
        self.n = n;
        self
    }

    pub fn with_contamination(mut self, c: f64) -> SimScenario {
        self.contamination = c;
        self
    }
}

/// The generative truth at evaluation covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: SimScenario,
    /// Evaluation covariates, one row each.
    #[serde(with = "serde_mat")]
    pub eval_x: DMatrix<f64>,
    /// True mean of f at each evaluation covariate (regression and state-space).
    #[serde(with = "serde_mat")]
    pub mean: DMatrix<f64>,
    /// True covariance of f at each evaluation covariate.
    #[serde(with = "serde_mat::vec")]
    pub cov: Vec<DMatrix<f64>>,
    /// True p(y = 1) at each evaluation covariate (classification).
    pub prob: Vec<f64>,
    /// Replaced response indices, sorted.
    pub outliers: Vec<usize>,
    /// Hidden signals at the training covariates (state-space).
    #[serde(with = "serde_mat")]
    pub hidden: DMatrix<f64>,
}

impl GroundTruth {
    pub fn truth_at(&self, i: usize) -> Result<GaussianDist> {
        GaussianDist::new(self.mean.row(i).transpose(), self.cov[i].clone())
    }
}

/// Correlation matrix of A Aᵀ with standard normal A.
pub fn random_correlation(q: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(q, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let c = &a * a.transpose();
    let d = c.diagonal().map(|v| 1.0 / v.sqrt());
    let mut r = DMatrix::from_fn(q, q, |i, j| c[(i, j)] * d[i] * d[j]);
    symmetrize(&mut r);
    r
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Kernel-weighted mixture Σₖ e^{−|x−cₖ|²} Vₖ / Σₗ e^{−|x−cₗ|²}.
pub fn mixture_cov(x: f64, centers: &[f64], v: &[DMatrix<f64>]) -> DMatrix<f64> {
    let w: Vec<f64> = centers.iter().map(|c| -(x - c).powi(2)).collect();
    let top = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = e.iter().sum();
    let q = v[0].nrows();
    let mut out = DMatrix::zeros(q, q);
    for (ek, vk) in e.iter().zip(v) {
        out += vk * (ek / total);
    }
    out
}

/// A joint draw of a zero-mean multi-output GP at the rows of `x`, N×Q.
fn draw_gp(cov: &MultiOutputCov, x: &DMatrix<f64>, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    let k = cov.gram_dm(x, x)?;
    let ch = Chol::new(&k)?;
    let z = DVector::from_fn(k.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let v = ch.l() * z;
    let q = cov.q();
    Ok(DMatrix::from_fn(x.nrows(), q, |n, j| v[n * q + j]))
}

fn draw_mvn(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut impl Rng) -> Result<DVector<f64>> {
    let ch = Chol::new(cov)?;
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mean + ch.l() * z)
}

fn stack_x(parts: &[&[f64]]) -> DMatrix<f64> {
    let all: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    DMatrix::from_column_slice(all.len(), 1, &all)
}

/// Empirical quantile by linear interpolation between order statistics.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Generates a dataset and its ground truth; a pure function of the scenario.
pub fn simulate(sc: &SimScenario) -> Result<(Dataset, GroundTruth)> {
    if sc.n == 0 {
        return Err(HegpError::Config("scenario size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&sc.contamination) {
        return Err(HegpError::Config("contamination must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    match sc.kind {
        ScenarioKind::HeteroBivariate | ScenarioKind::HomoscedasticControl | ScenarioKind::HeteroUnivariateOutliers => {
            regression(sc, &mut rng)
        }
        ScenarioKind::ClassificationCircles => circles(sc, &mut rng),
        ScenarioKind::StateSpace3D => state_space(sc, &mut rng),
    }
}

fn regression(sc: &SimScenario, rng: &mut ChaCha8Rng) -> Result<(Dataset, GroundTruth)> {
    let univariate = sc.kind == ScenarioKind::HeteroUnivariateOutliers;
    let q = if univariate { 1 } else { 2 };
    let sigma = if univariate { DMatrix::identity(1, 1) } else { random_correlation(2, rng) };
    let centers: Vec<f64> = (1..=5).map(|k| 2.0 * k as f64 - 6.0).collect();
    let v: Vec<DMatrix<f64>> = match sc.kind {
        ScenarioKind::HomoscedasticControl => vec![random_correlation(2, rng); 5],
        ScenarioKind::HeteroBivariate => (0..5).map(|_| random_correlation(2, rng)).collect(),
        _ => (0..5)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                DMatrix::from_element(1, 1, 0.25 * (a * a + b * b))
            })
            .collect(),
    };
    let xs: Vec<f64> = (0..sc.n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let grid = linspace(-5.0, 5.0, 201);
    let cov = MultiOutputCov::new(sigma, Kernel::se(1.0));
    let mu = draw_gp(&cov, &stack_x(&[&xs, &grid]), rng)?;
    let mut y = DMatrix::zeros(sc.n, q);
    for (n, &x) in xs.iter().enumerate() {
        let r = mixture_cov(x, &centers, &v);
        let m = mu.row(n).transpose();
        y.set_row(n, &draw_mvn(&m, &r, rng)?.transpose());
    }
    let mut outliers = Vec::new();
    if sc.contamination > 0.0 {
        let k = (sc.contamination * sc.n as f64 + 1e-9).floor() as usize;
        let mut vals: Vec<f64> = y.iter().copied().collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        let (a, b) = (quantile(&vals, 0.05), quantile(&vals, 0.95));
        outliers = rand::seq::index::sample(rng, sc.n, k).into_vec();
        outliers.sort_unstable();
        for &i in &outliers {
            for j in 0..q {
                y[(i, j)] = rng.random_range(a..=b);
            }
        }
    }
    let truth = GroundTruth {
        scenario: sc.clone(),
        eval_x: stack_x(&[&grid]),
        mean: mu.rows(sc.n, grid.len()).into_owned(),
        cov: grid.iter().map(|&x| mixture_cov(x, &centers, &v)).collect(),
        prob: Vec::new(),
        outliers,
        hidden: DMatrix::zeros(0, q),
    };
    Ok((Dataset::new(stack_x(&[&xs]), y)?, truth))
}

/// Probability of label 1: 0.95 in the circle at (1, 1), 0.05 in the circle
/// at (−1, −1), 0.5 elsewhere; both circles have unit radius.
pub fn circles_prob(x: f64, y: f64) -> f64 {
    if (x - 1.0).powi(2) + (y - 1.0).powi(2) < 1.0 {
        0.95
    } else if (x + 1.0).powi(2) + (y + 1.0).powi(2) < 1.0 {
        0.05
    } else {
        0.5
    }
}

fn circles(sc: &SimScenario, rng: &mut ChaCha8Rng) -> Result<(Dataset, GroundTruth)> {
    let pts: Vec<(f64, f64)> = (0..sc.n).map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
    let x = DMatrix::from_fn(sc.n, 2, |i, j| if j == 0 { pts[i].0 } else { pts[i].1 });
    let y = DMatrix::from_fn(sc.n, 1, |i, _| {
        let p = circles_prob(pts[i].0, pts[i].1);
        if rng.random::<f64>() < p {
            1.0
        } else {
            0.0
        }
    });
    let g = linspace(-2.0, 2.0, 50);
    let eval_x = DMatrix::from_fn(g.len() * g.len(), 2, |i, j| if j == 0 { g[i / g.len()] } else { g[i % g.len()] });
    let prob = (0..eval_x.nrows()).map(|i| circles_prob(eval_x[(i, 0)], eval_x[(i, 1)])).collect();
    let truth = GroundTruth {
        scenario: sc.clone(),
        eval_x,
        mean: DMatrix::zeros(0, 1),
        cov: Vec::new(),
        prob,
        outliers: Vec::new(),
        hidden: DMatrix::zeros(0, 1),
    };
    Ok((Dataset::new(x, y)?, truth))
}

fn state_space(sc: &SimScenario, rng: &mut ChaCha8Rng) -> Result<(Dataset, GroundTruth)> {
    let q = 3;
    let sigma = random_correlation(q, rng) / 9.0;
    let centers: Vec<f64> = (1..=5).map(|k| 1.5 * k as f64 - 4.5).collect();
    let v: Vec<DMatrix<f64>> = (0..5)
        .map(|_| {
            let u = DMatrix::from_fn(q, q, |_, _| rng.random_range(0.0..0.3));
            &u * u.transpose()
        })
        .collect();
    let xs = linspace(-3.0, 3.0, sc.n);
    let x = stack_x(&[&xs]);
    let cov = MultiOutputCov::new(sigma, Kernel::se(2.0));
    let mu = draw_gp(&cov, &x, rng)?;
    let link = StateSpaceLink::paper_3d();
    let t6 = StudentT::new(6.0).map_err(|e| HegpError::Config(e.to_string()))?;
    let scales = [0.05, 0.10, 0.15];
    let mut hidden = DMatrix::zeros(sc.n, q);
    let mut y = DMatrix::zeros(sc.n, q);
    let covs: Vec<DMatrix<f64>> = xs.iter().map(|&x| mixture_cov(x, &centers, &v)).collect();
    for n in 0..sc.n {
        let f = draw_mvn(&mu.row(n).transpose(), &covs[n], rng)?;
        hidden.set_row(n, &f.transpose());
        let h = link.mean_response(f.as_slice());
        for j in 0..q {
            y[(n, j)] = h[j] + scales[j] * t6.sample(rng);
        }
    }
    let truth = GroundTruth {
        scenario: sc.clone(),
        eval_x: x.clone(),
        mean: mu,
        cov: covs,
        prob: Vec::new(),
        outliers: Vec::new(),
        hidden,
    };
    Ok((Dataset::new(x, y)?, truth))
}

/// Mean of KL(truth ‖ fitted) over evaluation covariates.
pub fn akld(fitted: &[GaussianDist], truth: &GroundTruth) -> Result<f64> {
    if fitted.len() != truth.cov.len() || fitted.is_empty() {
        return Err(HegpError::Dimension("one fitted predictive per evaluation covariate is required".into()));
    }
    let mut total = 0.0;
    for (i, f) in fitted.iter().enumerate() {
        total += gaussian_kl(&truth.truth_at(i)?, f)?;
    }
    Ok(total / fitted.len() as f64)
}

/// KL(Bernoulli(p) ‖ Bernoulli(q)).
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

/// Mean Bernoulli KL of fitted label probabilities from the truth.
pub fn classification_kl(fitted: &[f64], truth: &GroundTruth) -> Result<f64> {
    if fitted.len() != truth.prob.len() || fitted.is_empty() {
        return Err(HegpError::Dimension("one fitted probability per evaluation covariate is required".into()));
    }
    Ok(fitted.iter().zip(&truth.prob).map(|(q, p)| bernoulli_kl(*p, *q)).sum::<f64>() / fitted.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Squared Mahalanobis norms of standardized residuals.
    pub sq_norms: Vec<f64>,
    pub ks_statistic: f64,
    pub ks_pvalue: f64,
    /// Percentage of observed responses inside their marginal 95% bands.
    pub coverage: f64,
}

/// Compares squared standardized residual norms with χ²(k), where k counts
/// the observed coordinates of each datum, and measures 95% band coverage.
pub fn residual_calibration(predictive: &[GaussianDist], data: &Dataset) -> Result<Calibration> {
    if predictive.len() != data.n() {
        return Err(HegpError::Dimension("one predictive per datum is required".into()));
    }
    let z = 1.959_963_984_540_054;
    let mut sq = Vec::with_capacity(data.n());
    let mut u = Vec::with_capacity(data.n());
    let (mut inside, mut total) = (0usize, 0usize);
    for (n, p) in predictive.iter().enumerate() {
        let obs: Vec<usize> = (0..data.q()).filter(|&k| data.mask.is_observed(n, k)).collect();
        if obs.is_empty() {
            continue;
        }
        let r = DVector::from_iterator(obs.len(), obs.iter().map(|&k| data.y[(n, k)] - p.mean[k]));
        let s = DMatrix::from_fn(obs.len(), obs.len(), |i, j| p.cov[(obs[i], obs[j])]);
        let v = r.dot(&Chol::new(&s)?.solve_vec(&r));
        sq.push(v);
        u.push(chi2_cdf(v, obs.len() as f64));
        for (i, _) in obs.iter().enumerate() {
            total += 1;
            if r[i].abs() <= z * s[(i, i)].sqrt() {
                inside += 1;
            }
        }
    }
    let (d, pv) = ks_test(&u, |t| t.clamp(0.0, 1.0));
    Ok(Calibration { sq_norms: sq, ks_statistic: d, ks_pvalue: pv, coverage: 100.0 * inside as f64 / total.max(1) as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Homoscedastic Gaussian residuals (a single induced covariate).
    Hogp,
    #[serde(rename = "hegpr-g")]
    HegprG,
    /// Outlier-nullifying fit at the σ₀ chosen by the Cramér–von Mises score.
    #[serde(rename = "hegpr-o")]
    HegprO,
}

impl std::str::FromStr for Method {
    type Err = HegpError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| HegpError::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    /// Present when ground truth is supplied.
    pub akld: Option<f64>,
    pub coverage: f64,
    pub ks_statistic: f64,
    pub ks_pvalue: f64,
    /// Cramér–von Mises score of the fitted residuals.
    pub cvm: f64,
    pub sigma0: f64,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MethodReport>,
}

impl EvalReport {
    /// One CSV line per method; AKLD is empty without ground truth.
    pub fn table(&self) -> String {
        let mut out = String::from("method,akld,coverage,ks_statistic,ks_pvalue,cvm,sigma0,objective,iterations\n");
        for r in &self.rows {
            let name = serde_json::to_value(r.method).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            let akld = r.akld.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{name},{akld},{},{},{},{},{},{},{}\n",
                r.coverage, r.ks_statistic, r.ks_pvalue, r.cvm, r.sigma0, r.objective, r.iterations
            ));
        }
        out
    }
}

/// Evaluates a fitted model on its training data and, when given, the truth.
pub fn evaluate(state: &EMState, data: &Dataset, truth: Option<&GroundTruth>) -> Result<(Calibration, f64, Option<f64>)> {
    let cal = residual_calibration(&predict_f(state, &data.x)?, data)?;
    let cvm = cvm_score(state, data)?.j;
    let akld = match truth {
        Some(t) => Some(akld(&predict_f(state, &t.eval_x)?, t)?),
        None => None,
    };
    Ok((cal, cvm, akld))
}

/// Fits every requested method with the shared configuration and tabulates
/// calibration, CvM and (with truth) AKLD.
pub fn compare_methods(
    data: &Dataset,
    truth: Option<&GroundTruth>,
    methods: &[Method],
    config: &FitConfig,
) -> Result<EvalReport> {
    if methods.is_empty() {
        return Err(HegpError::Config("no methods to compare".into()));
    }
    let mut rows = Vec::with_capacity(methods.len());
    for &method in methods {
        let mut cfg = config.clone();
        cfg.model_family = ModelFamily::Gaussian;
        let state = match method {
            Method::Hogp => {
                cfg.d = 1;
                cfg.r_grid.truncate(1);
                fit(data, &cfg)?
            }
            Method::HegprG => fit(data, &cfg)?,
            Method::HegprO => {
                let sel = select_sigma0(data, &config.sigma0_grid, &cfg)?;
                sel.selected().clone()
            }
        };
        let (cal, cvm, a) = evaluate(&state, data, truth)?;
        rows.push(MethodReport {
            method,
            akld: a,
            coverage: cal.coverage,
            ks_statistic: cal.ks_statistic,
            ks_pvalue: cal.ks_pvalue,
            cvm,
            sigma0: state.sigma0,
            objective: state.final_objective(),
            iterations: state.iterations,
        });
    }
    Ok(EvalReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn generators_are_deterministic() {
        for kind in [
            ScenarioKind::HeteroBivariate,
            ScenarioKind::HeteroUnivariateOutliers,
            ScenarioKind::ClassificationCircles,
            ScenarioKind::StateSpace3D,
            ScenarioKind::HomoscedasticControl,
        ] {
            let sc = SimScenario::new(kind, 7).with_n(60);
            let (a, ta) = simulate(&sc).unwrap();
            let (b, tb) = simulate(&sc).unwrap();
            assert_eq!(a.y, b.y);
            assert_eq!(a.x, b.x);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn outlier_bookkeeping() {
        let sc = SimScenario::new(ScenarioKind::HeteroUnivariateOutliers, 3).with_n(500);
        let (_, t) = simulate(&sc).unwrap();
        assert_eq!(t.outliers.len(), 25);
        assert!(t.outliers.windows(2).all(|w| w[0] < w[1]));
        let sc = sc.with_n(99);
        let (_, t) = simulate(&sc).unwrap();
        assert_eq!(t.outliers.len(), 4);
    }

    #[test]
    fn mixture_concentrates_at_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<DMatrix<f64>> = (0..5).map(|_| random_correlation(2, &mut rng)).collect();
        let centers: Vec<f64> = (1..=5).map(|k| 2.0 * k as f64 - 6.0).collect();
        for (k, c) in centers.iter().enumerate() {
            let r = mixture_cov(*c, &centers, &v);
            let own = 1.0 / centers.iter().map(|d| (-(c - d).powi(2)).exp()).sum::<f64>();
            assert!(own > 0.96);
            assert_relative_eq!(r[(0, 0)], 1.0, epsilon = 1e-12);
            assert!((r[(0, 1)] - v[k][(0, 1)]).abs() < 2.0 * (1.0 - own) + 1e-12);
        }
    }

    #[test]
    fn random_correlation_is_a_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let r = random_correlation(3, &mut rng);
            for i in 0..3 {
                assert_relative_eq!(r[(i, i)], 1.0, epsilon = 1e-12);
            }
            assert!(Chol::new(&r).is_ok());
        }
    }

    #[test]
    fn akld_identities() {
        let sc = SimScenario::new(ScenarioKind::HeteroBivariate, 2).with_n(20);
        let (_, t) = simulate(&sc).unwrap();
        let fitted: Vec<GaussianDist> = (0..t.cov.len()).map(|i| t.truth_at(i).unwrap()).collect();
        assert_eq!(akld(&fitted, &t).unwrap(), 0.0);
        let mut t1 = t.clone();
        t1.mean = DMatrix::zeros(1, 1);
        t1.cov = vec![DMatrix::identity(1, 1)];
        let f = vec![GaussianDist::new(DVector::zeros(1), DMatrix::identity(1, 1) * 2.0).unwrap()];
        assert_relative_eq!(akld(&f, &t1).unwrap(), 0.5 * (0.5 + 2f64.ln() - 1.0), epsilon = 1e-14);
    }

    #[test]
    fn calibration_of_exact_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 500;
        let mut passes = 0;
        for _ in 0..20 {
            let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]);
            let ch = Chol::new(&s).unwrap();
            let y = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = (ch.l() * y.transpose()).transpose();
            let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
            let data = Dataset::new(x, y).unwrap();
            let p = vec![GaussianDist::new(DVector::zeros(2), s.clone()).unwrap(); n];
            let c = residual_calibration(&p, &data).unwrap();
            if c.ks_pvalue > 0.01 {
                passes += 1;
            }
            assert!((88.0..=99.5).contains(&c.coverage));
        }
        assert!(passes >= 19);
    }

    #[test]
    fn calibration_of_zero_residuals() {
        let x = DMatrix::from_fn(4, 1, |i, _| i as f64);
        let data = Dataset::new(x, DMatrix::zeros(4, 2)).unwrap();
        let p = vec![GaussianDist::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap(); 4];
        let c = residual_calibration(&p, &data).unwrap();
        assert!(c.sq_norms.iter().all(|v| *v == 0.0));
        assert_eq!(c.coverage, 100.0);
    }

    #[test]
    fn scenario_names_parse() {
        assert_eq!("hetero-bivariate".parse::<ScenarioKind>().unwrap(), ScenarioKind::HeteroBivariate);
        assert_eq!("state-space-3d".parse::<ScenarioKind>().unwrap(), ScenarioKind::StateSpace3D);
        assert!("nope".parse::<ScenarioKind>().is_err());
    }

    #[test]
    fn empty_method_list_is_rejected() {
        let (data, truth) = simulate(&SimScenario::new(ScenarioKind::HeteroBivariate, 1).with_n(20)).unwrap();
        let r = compare_methods(&data, Some(&truth), &[], &FitConfig::default());
        assert!(matches!(r, Err(HegpError::Config(_))));
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("hogp".parse::<Method>().unwrap(), Method::Hogp);
        assert_eq!("hegpr-o".parse::<Method>().unwrap(), Method::HegprO);
        assert!("kersting".parse::<Method>().is_err());
    }
}
