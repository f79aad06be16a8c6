//! Training configuration, deserializable from the JSON config file.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{HegpError, Result};
use crate::gp_core::KernelFamily;
use crate::precision::PrecisionPrior;
use crate::third_level::{
    PhiSource, ProbitClassifier, StateSpaceLink, StudentTObservation, ThirdLevel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// HeGPR-G: y ≡ f.
    #[default]
    #[serde(alias = "hegpr_g", alias = "hegpr-g")]
    Gaussian,
    /// HeGPR-H: Student-t residuals with a free scale mixture.
    #[serde(alias = "hegpr_h", alias = "hegpr-h")]
    StudentT,
    /// HeGPR-O: Student-t residuals with Φ = σ₀²Λ.
    #[serde(alias = "hegpr_o", alias = "hegpr-o")]
    Outlier,
    /// HeGPC: probit labels with mislabel probability δ.
    #[serde(alias = "hegpc")]
    Probit,
    StateSpace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsilonMode {
    /// Separate M-step ascent on E_q[log p(g_X | Υ)]; needs an invertible 𝕍_XX.
    Standard,
    /// Ascent on the ELBO in Υ inside the E-step, through (𝕍 + Λ)⁻¹ only.
    Joint,
    /// Standard when 𝕍_XX factors without jitter, joint otherwise.
    #[default]
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstepMethod {
    /// Closed-form coordinate updates where available, gradient ascent otherwise.
    #[default]
    Auto,
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(untagged)]
pub enum InducedSpec {
    #[default]
    #[serde(with = "auto_tag")]
    Auto,
    Points(Vec<Vec<f64>>),
}

mod auto_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("expected \"auto\", found \"{s}\"")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SparseSpec {
    pub enabled: bool,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    /// Separate inducing set; defaults to the precision-mixture induced points.
    pub inducing: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    #[default]
    Flat,
    InverseWishart {
        gamma0: Vec<Vec<f64>>,
        nu0: f64,
    },
}

impl PriorSpec {
    pub fn to_prior(&self, q: usize) -> Result<PrecisionPrior> {
        match self {
            PriorSpec::Flat => Ok(PrecisionPrior::Flat),
            PriorSpec::InverseWishart { gamma0, nu0 } => {
                if gamma0.len() != q || gamma0.iter().any(|r| r.len() != q) {
                    return Err(HegpError::Config("inverse-Wishart scale must be Q×Q".into()));
                }
                let g = DMatrix::from_fn(q, q, |i, j| gamma0[i][j]);
                let p = PrecisionPrior::InverseWishart { gamma0: g, nu0: *nu0 };
                p.validate(q)?;
                Ok(p)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub model_family: ModelFamily,
    pub kernel: KernelFamily,
    /// "zero", "constant" or "linear".
    pub mean: String,
    #[serde(rename = "D")]
    pub d: usize,
    pub induced_points: InducedSpec,
    #[serde(rename = "R_grid")]
    pub r_grid: Vec<f64>,
    #[serde(rename = "adjacent_percent_A")]
    pub adjacent_percent: f64,
    pub sigma0: f64,
    pub sigma0_grid: Vec<f64>,
    pub nu: f64,
    pub delta: f64,
    pub link: Option<StateSpaceLink>,
    pub outer_iters: usize,
    pub estep_iters: usize,
    /// Υ ascent steps per outer iteration.
    pub upsilon_steps: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub diagonal_mode: bool,
    pub sparse: SparseSpec,
    pub prior: PriorSpec,
    pub upsilon_mode: UpsilonMode,
    pub learn_upsilon: bool,
    pub estep_method: EstepMethod,
    /// Initial squared inverse lengthscale; defaults to (10 / covariate range)².
    pub gamma2: Option<f64>,
    pub tol: f64,
    pub patience: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            model_family: ModelFamily::Gaussian,
            kernel: KernelFamily::SquaredExponential,
            mean: "zero".into(),
            d: 100,
            induced_points: InducedSpec::Auto,
            r_grid: (0..39).map(|i| 1.0 + 0.5 * i as f64).collect(),
            adjacent_percent: 5.0,
            sigma0: 0.0,
            sigma0_grid: default_sigma0_grid(),
            nu: 6.0,
            delta: 0.1,
            link: None,
            outer_iters: 300,
            estep_iters: 100,
            upsilon_steps: 5,
            mc_samples: 64,
            seed: 0,
            diagonal_mode: false,
            sparse: SparseSpec::default(),
            prior: PriorSpec::Flat,
            upsilon_mode: UpsilonMode::Auto,
            learn_upsilon: true,
            estep_method: EstepMethod::Auto,
            gamma2: None,
            tol: 1e-6,
            patience: 5,
        }
    }
}

pub fn default_sigma0_grid() -> Vec<f64> {
    (0..=12).map(|i| 0.025 * i as f64).collect()
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(HegpError::Config("D must be at least 1".into()));
        }
        if self.r_grid.is_empty() || self.r_grid.iter().any(|r| !(*r > 0.0 && *r <= 100.0)) {
            return Err(HegpError::Config("R_grid must be non-empty with entries in (0, 100]".into()));
        }
        if !(0.0..=100.0).contains(&self.adjacent_percent) {
            return Err(HegpError::Config("adjacent_percent_A must lie in [0, 100]".into()));
        }
        if self.sigma0_grid.iter().any(|s| !(*s >= 0.0)) || !(self.sigma0 >= 0.0) {
            return Err(HegpError::Config("sigma0 values must be nonnegative".into()));
        }
        if !(self.nu > 0.0) {
            return Err(HegpError::Config("nu must be positive".into()));
        }
        if self.model_family == ModelFamily::Probit && !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(HegpError::Config("delta must lie in (0, 0.5) for training".into()));
        }
        if self.mc_samples == 0 {
            return Err(HegpError::Config("mc_samples must be positive".into()));
        }
        if !["zero", "constant", "linear"].contains(&self.mean.as_str()) {
            return Err(HegpError::Config(format!("unknown mean function '{}'", self.mean)));
        }
        if self.sparse.enabled && self.sparse.m == Some(0) {
            return Err(HegpError::Config("sparse M must be positive".into()));
        }
        if let Some(g) = self.gamma2 {
            if !(g > 0.0) {
                return Err(HegpError::Config("gamma2 must be positive".into()));
            }
        }
        Ok(())
    }

    /// Third-level model with initial parameters; `phi0` seeds a free scale mixture.
    pub fn third_level(&self, q: usize, phi0: Option<Vec<Vec<DMatrix<f64>>>>) -> Result<ThirdLevel> {
        let t = match self.model_family {
            ModelFamily::Gaussian => ThirdLevel::Identity,
            ModelFamily::Outlier => ThirdLevel::StudentT(StudentTObservation::tied(self.nu, self.sigma0)),
            ModelFamily::StudentT => ThirdLevel::StudentT(StudentTObservation {
                nu: self.nu,
                source: PhiSource::FreeMixture { phis: phi0.unwrap_or_default() },
            }),
            ModelFamily::Probit => ThirdLevel::Probit(ProbitClassifier { delta: self.delta }),
            ModelFamily::StateSpace => ThirdLevel::StateSpace(match &self.link {
                Some(l) => l.clone(),
                None if q == 3 => StateSpaceLink::paper_3d(),
                None => return Err(HegpError::Config("state-space family needs a link specification".into())),
            }),
        };
        t.validate(q)?;
        Ok(t)
    }

    pub fn from_json(s: &str) -> Result<FitConfig> {
        let c: FitConfig = serde_json::from_str(s).map_err(|e| HegpError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_keys_are_accepted() {
        let c = FitConfig::from_json(
            r#"{"model_family": "hegpr_o", "D": 100, "induced_points": "auto",
                "R_grid": [1, 1.5, 2], "adjacent_percent_A": 5, "sigma0_grid": [0, 0.1],
                "nu": 6, "delta": 0.1, "outer_iters": 300, "estep_iters": 100,
                "mc_samples": 64, "seed": 3, "diagonal_mode": false,
                "sparse": {"enabled": true, "M": 20}}"#,
        )
        .unwrap();
        assert_eq!(c.model_family, ModelFamily::Outlier);
        assert_eq!(c.sparse.m, Some(20));
        assert_eq!(c.induced_points, InducedSpec::Auto);
    }

    #[test]
    fn explicit_points_and_bad_keys() {
        let c = FitConfig::from_json(r#"{"induced_points": [[0.0], [1.0]]}"#).unwrap();
        assert_eq!(c.induced_points, InducedSpec::Points(vec![vec![0.0], vec![1.0]]));
        assert!(FitConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(FitConfig::from_json(r#"{"R_grid": []}"#).is_err());
    }

    #[test]
    fn default_grid_matches_documented_values() {
        let c = FitConfig::default();
        assert_eq!(c.r_grid.first(), Some(&1.0));
        assert_eq!(c.r_grid.last(), Some(&20.0));
        assert_eq!(c.sigma0_grid.len(), 13);
        assert!((c.sigma0_grid[12] - 0.3).abs() < 1e-15);
    }
}
