//! Model parameters, the variational state Γ, and the trained-model record.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{HegpError, Result};
use crate::gp_core::{vec_dm, MeanFunction, MultiOutputCov};
use crate::linalg::Chol;
use crate::precision::PrecisionMixture;
use crate::third_level::{PhiSource, ThirdLevel};
use crate::vem::backend::{Backend, CondPart, Omega};
use crate::vem::config::{FitConfig, UpsilonMode};
use crate::sparse::SparseBackend;

/// Parameters (Υ, μ, L, H, Θ) of the three-level model.
#[derive(Clone, Debug, PartialEq)]
pub struct HegpModel {
    pub cov: MultiOutputCov,
    pub mean: MeanFunction,
    pub mixture: PrecisionMixture,
    pub third: ThirdLevel,
}

impl HegpModel {
    pub fn q(&self) -> usize {
        self.cov.q()
    }

    pub fn lambdas(&self, x: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        self.mixture.lambda_set(x)
    }

    /// Marginal covariance backend at the training covariates; sparse when
    /// inducing covariates are given.
    pub fn backend(&self, x: &DMatrix<f64>, inducing: Option<&DMatrix<f64>>) -> Result<Backend> {
        let lambdas = self.lambdas(x)?;
        self.backend_with(x, inducing, &lambdas)
    }

    pub fn backend_with(
        &self,
        x: &DMatrix<f64>,
        inducing: Option<&DMatrix<f64>>,
        lambdas: &[DMatrix<f64>],
    ) -> Result<Backend> {
        match inducing {
            Some(z) => Ok(Backend::Sparse(SparseBackend::new(&self.cov, x, z, lambdas)?)),
            None => Backend::dense(&self.cov, x, lambdas),
        }
    }

    /// Student-t scale matrices Φ(x_n), if the third level has them.
    pub fn phi_set(&self, x: &DMatrix<f64>, lambdas: &[DMatrix<f64>]) -> Result<Option<Vec<DMatrix<f64>>>> {
        match &self.third {
            ThirdLevel::StudentT(t) => match &t.source {
                PhiSource::Tied { sigma0 } => Ok(Some(lambdas.iter().map(|l| l * (sigma0 * sigma0)).collect())),
                PhiSource::FreeMixture { phis } => Ok(Some(self.mixture.with_lambdas(phis.clone()).lambda_set(x)?)),
            },
            _ => Ok(None),
        }
    }

    pub fn mean_at(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.mean.eval_set(x, self.q())
    }
}

/// Γ = {ηₙ, Ψₙ} plus ξₙ for Student-t families. `cond` carries the exact
/// joint conditional covariance of missing coordinates on the Gaussian path.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalState {
    /// N×Q.
    pub eta: DMatrix<f64>,
    pub psi: Vec<DMatrix<f64>>,
    pub xi: Option<Vec<f64>>,
    pub cond: Option<CondPart>,
}

impl VariationalState {
    pub fn n(&self) -> usize {
        self.eta.nrows()
    }

    pub fn q(&self) -> usize {
        self.eta.ncols()
    }

    pub fn omega(&self, mu: &DMatrix<f64>) -> Omega {
        Omega { d: vec_dm(&(&self.eta - mu)), psi: self.psi.clone(), cond: self.cond.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.psi.len() != self.n() {
            return Err(HegpError::Dimension("one Ψ block per datum is required".into()));
        }
        for p in &self.psi {
            if p.nrows() != self.q() || p.ncols() != self.q() {
                return Err(HegpError::Dimension("Ψ blocks must be Q×Q".into()));
            }
            Chol::new(p).map_err(|_| HegpError::Domain("Ψ block is not positive definite".into()))?;
        }
        if let Some(xi) = &self.xi {
            if xi.len() != self.n() || xi.iter().any(|v| !(*v > 0.0)) {
                return Err(HegpError::Domain("ξ must hold one positive value per datum".into()));
            }
        }
        Ok(())
    }

    /// η = Y on observed entries (μ elsewhere), Ψₙ = 0.1·diag(var Y), ξ = 1.
    pub fn regression_init(data: &Dataset, mu: &DMatrix<f64>, with_xi: bool) -> VariationalState {
        let mut eta = mu.clone();
        for n in 0..data.n() {
            for q in 0..data.q() {
                if data.mask.is_observed(n, q) {
                    eta[(n, q)] = data.y[(n, q)];
                }
            }
        }
        VariationalState::with_eta(data, eta, with_xi)
    }

    pub fn with_eta(data: &Dataset, eta: DMatrix<f64>, with_xi: bool) -> VariationalState {
        let var = data.output_variances();
        let psi0 = DMatrix::from_diagonal(&DVector::from_iterator(var.len(), var.iter().map(|v| 0.1 * v)));
        VariationalState {
            eta,
            psi: vec![psi0; data.n()],
            xi: with_xi.then(|| vec![1.0; data.n()]),
            cond: None,
        }
    }
}

/// Outcome of training: parameters, Γ̂, selected bandwidth percentages, and traces.
#[derive(Clone, Debug)]
pub struct EMState {
    pub config: FitConfig,
    pub model: HegpModel,
    pub gamma: VariationalState,
    /// Training covariates.
    pub x: DMatrix<f64>,
    /// Inducing covariates of the sparse approximation.
    pub inducing: Option<DMatrix<f64>>,
    /// Selected percentage per mixture component.
    pub r_hat: Vec<f64>,
    pub sigma0: f64,
    pub sigma1_sq: f64,
    /// Objective at the start of every iteration and after the last one.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub upsilon_mode: UpsilonMode,
}

impl EMState {
    pub fn backend(&self) -> Result<Backend> {
        self.model.backend(&self.x, self.inducing.as_ref())
    }

    pub fn final_objective(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::NAN)
    }
}
