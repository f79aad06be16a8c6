//! Covariate-indexed noise covariance Λ(x) = (Σ_d ω_xd λ_d⁻¹)⁻¹ built from a
//! mixture of base precisions anchored at induced covariates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HegpError, Result};
use crate::linalg::{spd_inv, spd_logdet, symmetrize, Chol};

/// Below this every kernel value counts as underflowed.
pub const WEIGHT_UNDERFLOW: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixtureMode {
    #[default]
    Full,
    Diagonal,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PrecisionPrior {
    Flat,
    InverseWishart { gamma0: DMatrix<f64>, nu0: f64 },
}

impl PrecisionPrior {
    pub fn validate(&self, q: usize) -> Result<()> {
        if let PrecisionPrior::InverseWishart { gamma0, nu0 } = self {
            if gamma0.nrows() != q || gamma0.ncols() != q {
                return Err(HegpError::Dimension("inverse-Wishart scale must be Q×Q".into()));
            }
            if *nu0 <= q as f64 - 1.0 {
                return Err(HegpError::Domain(format!("inverse-Wishart degrees {nu0} must exceed Q-1")));
            }
            Chol::new(gamma0)?;
        }
        Ok(())
    }

    /// Restriction to a subset of output coordinates.
    pub fn restrict(&self, outputs: &[usize]) -> PrecisionPrior {
        match self {
            PrecisionPrior::Flat => PrecisionPrior::Flat,
            PrecisionPrior::InverseWishart { gamma0, nu0 } => PrecisionPrior::InverseWishart {
                gamma0: DMatrix::from_fn(outputs.len(), outputs.len(), |i, j| gamma0[(outputs[i], outputs[j])]),
                nu0: *nu0,
            },
        }
    }
}

/// One set of induced covariates with its base matrices and bandwidths.
/// In full mode a single component covers every output; in diagonal mode
/// each output has its own component of dimension one.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureComponent {
    pub outputs: Vec<usize>,
    /// D×P, one induced covariate per row.
    pub induced: DMatrix<f64>,
    pub lambdas: Vec<DMatrix<f64>>,
    pub bandwidths: Vec<f64>,
    /// Percentage that produced `bandwidths`.
    pub r: f64,
}

impl MixtureComponent {
    pub fn d(&self) -> usize {
        self.induced.nrows()
    }

    pub fn dim(&self) -> usize {
        self.outputs.len()
    }

    pub fn weights(&self, x: &[f64]) -> DVector<f64> {
        density_weights(&self.induced, &self.bandwidths, x)
    }

    pub fn precisions(&self) -> Result<Vec<DMatrix<f64>>> {
        self.lambdas.iter().map(spd_inv).collect()
    }

    /// Λ for a given weight vector, using precomputed precisions.
    pub fn lambda_from_weights(&self, w: &DVector<f64>, precisions: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
        let k = self.dim();
        let mut p = DMatrix::zeros(k, k);
        for (wd, pd) in w.iter().zip(precisions) {
            if *wd != 0.0 {
                p += pd * *wd;
            }
        }
        symmetrize(&mut p);
        let mut l = spd_inv(&p)?;
        symmetrize(&mut l);
        Ok(l)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionMixture {
    pub mode: MixtureMode,
    pub q: usize,
    pub components: Vec<MixtureComponent>,
}

impl PrecisionMixture {
    /// Every λ_d set to `init` (restricted per component in diagonal mode).
    pub fn new(
        mode: MixtureMode,
        induced: &DMatrix<f64>,
        init: &DMatrix<f64>,
        x: &DMatrix<f64>,
        r: f64,
    ) -> Result<PrecisionMixture> {
        let q = init.nrows();
        if induced.nrows() == 0 {
            return Err(HegpError::Config("at least one induced covariate is required".into()));
        }
        let groups: Vec<Vec<usize>> = match mode {
            MixtureMode::Full => vec![(0..q).collect()],
            MixtureMode::Diagonal => (0..q).map(|i| vec![i]).collect(),
        };
        let bandwidths = bandwidths_from_percentage(induced, x, r)?;
        let components = groups
            .into_iter()
            .map(|outputs| {
                let sub = DMatrix::from_fn(outputs.len(), outputs.len(), |i, j| init[(outputs[i], outputs[j])]);
                MixtureComponent {
                    lambdas: vec![sub; induced.nrows()],
                    outputs,
                    induced: induced.clone(),
                    bandwidths: bandwidths.clone(),
                    r,
                }
            })
            .collect();
        Ok(PrecisionMixture { mode, q, components })
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.components {
            if c.lambdas.len() != c.d() || c.bandwidths.len() != c.d() {
                return Err(HegpError::Dimension("mixture component sizes disagree".into()));
            }
            if c.bandwidths.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
                return Err(HegpError::Domain("bandwidths must be positive".into()));
            }
            for l in &c.lambdas {
                Chol::new(l).map_err(|_| HegpError::Domain("base matrix is not positive definite".into()))?;
            }
        }
        Ok(())
    }

    /// Weight vector of every component at `x`.
    pub fn weights(&self, x: &[f64]) -> Vec<DVector<f64>> {
        self.components.iter().map(|c| c.weights(x)).collect()
    }

    pub fn lambda_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let precs = self.all_precisions()?;
        self.lambda_at_with(x, &precs)
    }

    pub fn all_precisions(&self) -> Result<Vec<Vec<DMatrix<f64>>>> {
        self.components
            .iter()
            .map(|c| c.precisions().map_err(|_| HegpError::Domain("singular base matrix".into())))
            .collect()
    }

    pub fn lambda_at_with(&self, x: &[f64], precs: &[Vec<DMatrix<f64>>]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.q, self.q);
        for (c, p) in self.components.iter().zip(precs) {
            let l = c.lambda_from_weights(&c.weights(x), p)?;
            for (i, &oi) in c.outputs.iter().enumerate() {
                for (j, &oj) in c.outputs.iter().enumerate() {
                    out[(oi, oj)] = l[(i, j)];
                }
            }
        }
        Ok(out)
    }

    /// Λ(x_n) for every row of `x`.
    pub fn lambda_set(&self, x: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let precs = self.all_precisions()?;
        (0..x.nrows()).map(|n| self.lambda_at_with(&row(x, n), &precs)).collect()
    }

    /// Same mixture with every base matrix replaced.
    pub fn with_lambdas(&self, lambdas: Vec<Vec<DMatrix<f64>>>) -> PrecisionMixture {
        let mut out = self.clone();
        for (c, l) in out.components.iter_mut().zip(lambdas) {
            c.lambdas = l;
        }
        out
    }

    pub fn set_bandwidths(&mut self, x: &DMatrix<f64>, r: &[f64]) -> Result<()> {
        for (c, &rc) in self.components.iter_mut().zip(r) {
            c.bandwidths = bandwidths_from_percentage(&c.induced, x, rc)?;
            c.r = rc;
        }
        Ok(())
    }
}

pub(crate) fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    (0..m.ncols()).map(|j| m[(i, j)]).collect()
}

fn dist2(m: &DMatrix<f64>, i: usize, x: &[f64]) -> f64 {
    (0..m.ncols()).map(|j| (m[(i, j)] - x[j]).powi(2)).sum()
}

/// Normalized Gaussian-kernel weights exp(−d²/2h²); all mass goes to the
/// nearest induced covariate when every kernel value underflows.
pub fn density_weights(induced: &DMatrix<f64>, bandwidths: &[f64], x: &[f64]) -> DVector<f64> {
    let d = induced.nrows();
    let d2: Vec<f64> = (0..d).map(|i| dist2(induced, i, x)).collect();
    let raw: Vec<f64> = d2.iter().zip(bandwidths).map(|(s, h)| (-s / (2.0 * h * h)).exp()).collect();
    if raw.iter().all(|&v| v < WEIGHT_UNDERFLOW) {
        let nearest = (0..d).min_by(|&a, &b| d2[a].total_cmp(&d2[b])).unwrap_or(0);
        let mut w = DVector::zeros(d);
        w[nearest] = 1.0;
        return w;
    }
    let total: f64 = raw.iter().sum();
    DVector::from_iterator(d, raw.into_iter().map(|v| v / total))
}

/// r%-nearest-neighbor bandwidths: midpoint between the k-th and (k+1)-th
/// neighbor distances with k = ⌈rN/100⌉; when k = N the upper radius is 2·d_N.
pub fn bandwidths_from_percentage(induced: &DMatrix<f64>, x: &DMatrix<f64>, r: f64) -> Result<Vec<f64>> {
    let n = x.nrows();
    if n == 0 {
        return Err(HegpError::Dimension("no training covariates".into()));
    }
    if !(r > 0.0 && r <= 100.0) {
        return Err(HegpError::Domain(format!("percentage {r} outside (0, 100]")));
    }
    let k = ((r * n as f64 / 100.0 - 1e-9).ceil() as usize).clamp(1, n);
    let mut scale: f64 = 0.0;
    let mut out = Vec::with_capacity(induced.nrows());
    for d in 0..induced.nrows() {
        let xd = row(induced, d);
        let mut dists: Vec<f64> = (0..n).map(|i| dist2(x, i, &xd).sqrt()).collect();
        dists.sort_by(|a, b| a.total_cmp(b));
        scale = scale.max(dists[n - 1]);
        let lower = dists[k - 1];
        let upper = if k < n { dists[k] } else { 2.0 * dists[n - 1] };
        out.push(0.5 * (lower + upper));
    }
    let floor = 1e-8 * scale.max(1e-300);
    Ok(out.into_iter().map(|h| h.max(floor).max(f64::MIN_POSITIVE)).collect())
}

/// ½ΣₙΣ_d ω log|λ_d⁻¹| − ½Σₙ log|Σ_d ω λ_d⁻¹| + log π(L), up to a constant.
pub fn log_prior_l(pm: &PrecisionMixture, prior: &PrecisionPrior, x: &DMatrix<f64>) -> Result<f64> {
    let mut total = jensen_term(pm, x)?;
    if let PrecisionPrior::InverseWishart { .. } = prior {
        for c in &pm.components {
            let pr = prior.restrict(&c.outputs);
            if let PrecisionPrior::InverseWishart { gamma0, nu0 } = pr {
                let k = c.dim() as f64;
                for l in &c.lambdas {
                    let ch = Chol::new(l)?;
                    total += -0.5 * (nu0 + k + 1.0) * ch.logdet() - 0.5 * ch.solve_mat(&gamma0).trace();
                }
            }
        }
    }
    Ok(total)
}

/// The first two terms of the prior; never positive by Jensen's inequality.
pub fn jensen_term(pm: &PrecisionMixture, x: &DMatrix<f64>) -> Result<f64> {
    let mut total = 0.0;
    for c in &pm.components {
        let precs = c.precisions().map_err(|_| HegpError::Domain("singular base matrix".into()))?;
        let logdets: Vec<f64> = precs.iter().map(spd_logdet).collect::<Result<_>>()?;
        for n in 0..x.nrows() {
            let w = c.weights(&row(x, n));
            let mut mix = DMatrix::zeros(c.dim(), c.dim());
            for d in 0..c.d() {
                if w[d] != 0.0 {
                    total += 0.5 * w[d] * logdets[d];
                    mix += &precs[d] * w[d];
                }
            }
            total -= 0.5 * spd_logdet(&mix)?;
        }
    }
    Ok(total)
}
