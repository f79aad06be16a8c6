//! File formats: CSV datasets with missing responses as empty cells, a
//! versioned JSON model file, and prediction tables.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MissingMask};
use crate::error::{HegpError, Result};
use crate::gp_core::{Kernel, MeanFunction, MultiOutputCov};
use crate::precision::{MixtureComponent, MixtureMode, PrecisionMixture};
use crate::predict::PosteriorPredictive;
use crate::serde_mat;
use crate::third_level::ThirdLevel;
use crate::vem::backend::CondPart;
use crate::vem::{EMState, FitConfig, HegpModel, UpsilonMode, VariationalState};

pub const MODEL_FILE_VERSION: u32 = 1;

fn parse_err(e: impl std::fmt::Display) -> HegpError {
    HegpError::Parse(e.to_string())
}

/// Attaches the path to an I/O error.
pub fn with_path(path: &Path) -> impl FnOnce(std::io::Error) -> HegpError + '_ {
    move |e| HegpError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn column_index(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?.parse::<usize>().ok().filter(|&i| i >= 1)
}

/// Columns `x_1..x_P` then `y_1..y_Q`, in that order.
fn check_header(names: &[String], allow_y: bool) -> Result<(usize, usize)> {
    let p = names.iter().take_while(|h| h.starts_with("x_")).count();
    let q = names.len() - p;
    for (i, h) in names[..p].iter().enumerate() {
        if column_index(h, "x_") != Some(i + 1) {
            return Err(HegpError::Parse(format!("expected column x_{} but found '{h}'", i + 1)));
        }
    }
    for (i, h) in names[p..].iter().enumerate() {
        if !allow_y || column_index(h, "y_") != Some(i + 1) {
            return Err(HegpError::Parse(format!("unexpected column '{h}'")));
        }
    }
    if p == 0 {
        return Err(HegpError::Parse("no covariate columns".into()));
    }
    Ok((p, q))
}

struct Table {
    p: usize,
    q: usize,
    x: Vec<f64>,
    y: Vec<Option<f64>>,
    rows: usize,
}

fn read_table(reader: impl Read, allow_y: bool) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let names: Vec<String> = rdr.headers().map_err(parse_err)?.iter().map(str::to_string).collect();
    let (p, q) = check_header(&names, allow_y)?;
    let mut t = Table { p, q, x: Vec::new(), y: Vec::new(), rows: 0 };
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(parse_err)?;
        for (j, cell) in rec.iter().enumerate() {
            let value = if cell.is_empty() {
                None
            } else {
                Some(cell.parse::<f64>().map_err(|e| HegpError::Parse(format!("row {}, column {}: {e}", r + 1, names[j])))?)
            };
            if j < p {
                t.x.push(value.ok_or_else(|| HegpError::Parse(format!("row {}: missing covariate {}", r + 1, names[j])))?);
            } else {
                t.y.push(value);
            }
        }
        t.rows += 1;
    }
    if t.rows == 0 {
        return Err(HegpError::Parse("no data rows".into()));
    }
    Ok(t)
}

/// Reads a dataset; empty response cells are missing.
pub fn parse_data_csv(reader: impl Read) -> Result<Dataset> {
    let t = read_table(reader, true)?;
    if t.q == 0 {
        return Err(HegpError::Parse("no response columns".into()));
    }
    let x = DMatrix::from_row_slice(t.rows, t.p, &t.x);
    let y = DMatrix::from_row_iterator(t.rows, t.q, t.y.iter().map(|v| v.unwrap_or(0.0)));
    let mask = MissingMask::from_rows(t.y.chunks(t.q).map(|r| r.iter().map(Option::is_some).collect()).collect())
        .map_err(|_| HegpError::Parse("no observed response".into()))?;
    Dataset::with_mask(x, y, mask)
}

pub fn read_data_csv(path: &Path) -> Result<Dataset> {
    parse_data_csv(fs::File::open(path).map_err(with_path(path))?)
}

/// Query covariates; response columns, if present, are ignored.
pub fn parse_query_csv(reader: impl Read) -> Result<DMatrix<f64>> {
    let t = read_table(reader, true)?;
    Ok(DMatrix::from_row_slice(t.rows, t.p, &t.x))
}

pub fn read_query_csv(path: &Path) -> Result<DMatrix<f64>> {
    parse_query_csv(fs::File::open(path).map_err(with_path(path))?)
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_data_csv(writer: impl Write, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<String> =
        (1..=data.p()).map(|i| format!("x_{i}")).chain((1..=data.q()).map(|i| format!("y_{i}"))).collect();
    w.write_record(&header).map_err(parse_err)?;
    for n in 0..data.n() {
        let mut rec: Vec<String> = data.x_row(n).into_iter().map(fmt).collect();
        for q in 0..data.q() {
            rec.push(if data.mask.is_observed(n, q) { fmt(data.y[(n, q)]) } else { String::new() });
        }
        w.write_record(&rec).map_err(parse_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-row predictive table: covariates, μ̄, diag ν̄, diag Λ̂, and a 95% band
/// for f from N(μ̄, ν̄ + σ₁²Λ̂); `prob` adds p(y = 1) per output.
pub fn write_predictions(
    writer: impl Write,
    xq: &DMatrix<f64>,
    pred: &[PosteriorPredictive],
    prob: Option<&[Vec<f64>]>,
) -> Result<()> {
    let q = pred.first().map_or(0, |p| p.mean.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=xq.ncols()).map(|i| format!("x_{i}")).collect();
    for name in ["mean", "nu", "lambda", "lower95", "upper95"] {
        header.extend((1..=q).map(|k| format!("{name}_{k}")));
    }
    if prob.is_some() {
        header.extend((1..=q).map(|k| format!("p_y1_{k}")));
    }
    w.write_record(&header).map_err(parse_err)?;
    for (i, p) in pred.iter().enumerate() {
        let f = p.f();
        let sd: Vec<f64> = (0..q).map(|k| f.cov[(k, k)].max(0.0).sqrt()).collect();
        let mut rec: Vec<String> = xq.row(i).iter().map(|v| fmt(*v)).collect();
        rec.extend(p.mean.iter().map(|v| fmt(*v)));
        rec.extend((0..q).map(|k| fmt(p.nu[(k, k)])));
        rec.extend((0..q).map(|k| fmt(p.lambda[(k, k)])));
        rec.extend((0..q).map(|k| fmt(p.mean[k] - 1.96 * sd[k])));
        rec.extend((0..q).map(|k| fmt(p.mean[k] + 1.96 * sd[k])));
        if let Some(pr) = prob {
            rec.extend(pr[i].iter().map(|v| fmt(*v)));
        }
        w.write_record(&rec).map_err(parse_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Affine response transform y' = (y − shift) / scale applied before fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Per-output mean and standard deviation over observed entries.
    pub fn fit(data: &Dataset) -> Standardization {
        let q = data.q();
        let mut shift = vec![0.0; q];
        let mut scale = vec![1.0; q];
        for k in 0..q {
            let v: Vec<f64> = (0..data.n()).filter(|&n| data.mask.is_observed(n, k)).map(|n| data.y[(n, k)]).collect();
            if v.is_empty() {
                continue;
            }
            let m = v.iter().sum::<f64>() / v.len() as f64;
            shift[k] = m;
            if v.len() > 1 {
                let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
                if sd > 0.0 {
                    scale[k] = sd;
                }
            }
        }
        Standardization { shift, scale }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        self.check(data.q())?;
        let mut y = data.y.clone();
        for n in 0..data.n() {
            for k in 0..data.q() {
                if data.mask.is_observed(n, k) {
                    y[(n, k)] = (y[(n, k)] - self.shift[k]) / self.scale[k];
                }
            }
        }
        Dataset::with_mask(data.x.clone(), y, data.mask.clone())
    }

    /// Maps a predictive back to the original response units.
    pub fn invert(&self, p: &PosteriorPredictive) -> Result<PosteriorPredictive> {
        self.check(p.mean.len())?;
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(&self.scale));
        Ok(PosteriorPredictive {
            mean: DVector::from_fn(p.mean.len(), |k, _| p.mean[k] * self.scale[k] + self.shift[k]),
            nu: &s * &p.nu * &s,
            lambda: &s * &p.lambda * &s,
            sigma1_sq: p.sigma1_sq,
        })
    }

    fn check(&self, q: usize) -> Result<()> {
        if self.shift.len() != q || self.scale.len() != q || self.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(HegpError::Dimension("standardization does not match the responses".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ComponentFile {
    outputs: Vec<usize>,
    #[serde(with = "serde_mat")]
    induced: DMatrix<f64>,
    #[serde(with = "serde_mat::vec")]
    lambdas: Vec<DMatrix<f64>>,
    bandwidths: Vec<f64>,
    r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MixtureFile {
    mode: MixtureMode,
    q: usize,
    components: Vec<ComponentFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CondFile {
    idx: Vec<usize>,
    #[serde(with = "serde_mat")]
    cov: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GammaFile {
    #[serde(with = "serde_mat")]
    eta: DMatrix<f64>,
    #[serde(with = "serde_mat::vec")]
    psi: Vec<DMatrix<f64>>,
    xi: Option<Vec<f64>>,
    cond: Option<CondFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainingFile {
    seed: u64,
    iterations: usize,
    converged: bool,
    upsilon_mode: UpsilonMode,
    trace: Vec<f64>,
}

/// Serialized trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub config: FitConfig,
    #[serde(with = "serde_mat")]
    sigma: DMatrix<f64>,
    kernel: Kernel,
    mean: MeanFunction,
    mixture: MixtureFile,
    third: ThirdLevel,
    #[serde(with = "serde_mat")]
    x: DMatrix<f64>,
    #[serde(with = "serde_mat::option")]
    inducing: Option<DMatrix<f64>>,
    gamma: GammaFile,
    sigma0: f64,
    sigma1_sq: f64,
    r_hat: Vec<f64>,
    training: TrainingFile,
    pub standardization: Option<Standardization>,
}

impl ModelFile {
    pub fn from_state(state: &EMState, standardization: Option<Standardization>) -> ModelFile {
        let m = &state.model;
        ModelFile {
            version: MODEL_FILE_VERSION,
            config: state.config.clone(),
            sigma: m.cov.sigma.clone(),
            kernel: m.cov.kernel.clone(),
            mean: m.mean.clone(),
            mixture: MixtureFile {
                mode: m.mixture.mode,
                q: m.mixture.q,
                components: m
                    .mixture
                    .components
                    .iter()
                    .map(|c| ComponentFile {
                        outputs: c.outputs.clone(),
                        induced: c.induced.clone(),
                        lambdas: c.lambdas.clone(),
                        bandwidths: c.bandwidths.clone(),
                        r: c.r,
                    })
                    .collect(),
            },
            third: m.third.clone(),
            x: state.x.clone(),
            inducing: state.inducing.clone(),
            gamma: GammaFile {
                eta: state.gamma.eta.clone(),
                psi: state.gamma.psi.clone(),
                xi: state.gamma.xi.clone(),
                cond: state.gamma.cond.as_ref().map(|c| CondFile { idx: c.idx.clone(), cov: c.cov.clone() }),
            },
            sigma0: state.sigma0,
            sigma1_sq: state.sigma1_sq,
            r_hat: state.r_hat.clone(),
            training: TrainingFile {
                seed: state.config.seed,
                iterations: state.iterations,
                converged: state.converged,
                upsilon_mode: state.upsilon_mode,
                trace: state.trace.clone(),
            },
            standardization,
        }
    }

    pub fn to_state(&self) -> Result<EMState> {
        let q = self.sigma.nrows();
        let cov = MultiOutputCov::new(self.sigma.clone(), self.kernel.clone());
        cov.validate()?;
        let mixture = PrecisionMixture {
            mode: self.mixture.mode,
            q: self.mixture.q,
            components: self
                .mixture
                .components
                .iter()
                .map(|c| MixtureComponent {
                    outputs: c.outputs.clone(),
                    induced: c.induced.clone(),
                    lambdas: c.lambdas.clone(),
                    bandwidths: c.bandwidths.clone(),
                    r: c.r,
                })
                .collect(),
        };
        self.third.validate(q)?;
        let gamma = VariationalState {
            eta: self.gamma.eta.clone(),
            psi: self.gamma.psi.clone(),
            xi: self.gamma.xi.clone(),
            cond: self.gamma.cond.as_ref().map(|c| CondPart { idx: c.idx.clone(), cov: c.cov.clone() }),
        };
        if self.mixture.q != q || gamma.q() != q || gamma.n() != self.x.nrows() {
            return Err(HegpError::Dimension("model file components disagree on N or Q".into()));
        }
        gamma.validate()?;
        Ok(EMState {
            config: self.config.clone(),
            model: HegpModel { cov, mean: self.mean.clone(), mixture, third: self.third.clone() },
            gamma,
            x: self.x.clone(),
            inducing: self.inducing.clone(),
            r_hat: self.r_hat.clone(),
            sigma0: self.sigma0,
            sigma1_sq: self.sigma1_sq,
            trace: self.training.trace.clone(),
            iterations: self.training.iterations,
            converged: self.training.converged,
            upsilon_mode: self.training.upsilon_mode,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(parse_err)
    }

    pub fn from_json(s: &str) -> Result<ModelFile> {
        let m: ModelFile = serde_json::from_str(s).map_err(parse_err)?;
        if m.version != MODEL_FILE_VERSION {
            return Err(HegpError::Parse(format!(
                "model file version {} is not supported (expected {MODEL_FILE_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(with_path(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelFile> {
        ModelFile::from_json(&fs::read_to_string(path).map_err(with_path(path))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_cells_become_missing() {
        let d = parse_data_csv("x_1,y_1,y_2\n0.5,1.0,\n1.5,,2.0\n2.5,3.0,4.0\n".as_bytes()).unwrap();
        assert_eq!((d.n(), d.p(), d.q()), (3, 1, 2));
        assert!(!d.mask.is_observed(0, 1));
        assert!(!d.mask.is_observed(1, 0));
        assert_eq!(d.y[(2, 1)], 4.0);
    }

    #[test]
    fn malformed_tables_are_rejected() {
        assert!(parse_data_csv("x_1,y_1\n1.0,\n".as_bytes()).is_err());
        assert!(parse_data_csv("x_1,y_1\n,1.0\n".as_bytes()).is_err());
        assert!(parse_data_csv("y_1,x_1\n1.0,1.0\n".as_bytes()).is_err());
        assert!(parse_data_csv("x_1,y_1\n1.0,abc\n".as_bytes()).is_err());
        assert!(parse_data_csv("x_1,y_1\n1.0,2.0,3.0\n".as_bytes()).is_err());
        assert!(parse_data_csv("x_1,y_1\n".as_bytes()).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let x = DMatrix::from_row_slice(3, 1, &[0.1, 1.0 / 3.0, -2.5e-17]);
        let y = DMatrix::from_row_slice(3, 2, &[std::f64::consts::PI, 1e300, 0.0, -7.25, 2.0, 3.0]);
        let mask = MissingMask::from_rows(vec![vec![true, true], vec![false, true], vec![true, true]]).unwrap();
        let d = Dataset::with_mask(x, y, mask).unwrap();
        let mut buf = Vec::new();
        write_data_csv(&mut buf, &d).unwrap();
        assert_eq!(parse_data_csv(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn query_ignores_responses() {
        let xq = parse_query_csv("x_1,x_2,y_1\n1,2,\n3,4,5\n".as_bytes()).unwrap();
        assert_eq!(xq, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn standardization_inverts() {
        let d = Dataset::new(
            DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]),
            DMatrix::from_row_slice(3, 1, &[1.0, 3.0, 5.0]),
        )
        .unwrap();
        let s = Standardization::fit(&d);
        assert_eq!(s.shift, vec![3.0]);
        assert_eq!(s.scale, vec![2.0]);
        let z = s.apply(&d).unwrap();
        assert_eq!(z.y.as_slice(), &[-1.0, 0.0, 1.0]);
        let p = PosteriorPredictive {
            mean: DVector::from_element(1, 0.5),
            nu: DMatrix::from_element(1, 1, 0.25),
            lambda: DMatrix::from_element(1, 1, 1.0),
            sigma1_sq: 1.0,
        };
        let back = s.invert(&p).unwrap();
        assert_eq!(back.mean[0], 4.0);
        assert_eq!(back.nu[(0, 0)], 1.0);
        assert_eq!(back.lambda[(0, 0)], 4.0);
    }
}
