//! Subcommand implementations; each returns the one-line JSON summary.

use std::fs;
use std::path::{Path, PathBuf};

use hegp::data::Dataset;
use hegp::io::{with_path, read_data_csv, read_query_csv, write_data_csv, write_predictions, ModelFile, Standardization};
use hegp::predict::{cvm_score, predict, predict_f, predict_y_class, select_sigma0};
use hegp::sim::{
    akld, classification_kl, compare_methods, residual_calibration, simulate, GroundTruth, SimScenario,
};
use hegp::third_level::ThirdLevel;
use hegp::vem::{fit, EMState, FitConfig, ModelFamily};
use hegp::{HegpError, Result};
use nalgebra::DMatrix;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::{Cli, Command, CompareArgs, EvaluateArgs, FitArgs, PredictArgs, SelectArgs, SimulateArgs};

pub fn run(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, cli.seed),
        Command::Fit(a) => cmd_fit(a, cli.seed),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::SelectSigma0(a) => cmd_select(a, cli.seed),
        Command::Compare(a) => cmd_compare(a, cli.seed),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Preprocess {
    #[serde(default)]
    standardize: bool,
}

/// Configuration file contents: the fit settings plus the optional
/// `preprocess` block, and whether a σ₀ grid was given explicitly.
struct RunConfig {
    fit: FitConfig,
    preprocess: Preprocess,
    explicit_grid: bool,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut value = match path {
        Some(p) => serde_json::from_str::<Value>(&fs::read_to_string(p).map_err(with_path(p))?)
            .map_err(|e| HegpError::Config(format!("{}: {e}", p.display())))?,
        None => json!({}),
    };
    let obj = value.as_object_mut().ok_or_else(|| HegpError::Config("configuration must be a JSON object".into()))?;
    let preprocess = match obj.remove("preprocess") {
        Some(v) => serde_json::from_value(v).map_err(|e| HegpError::Config(format!("preprocess: {e}")))?,
        None => Preprocess::default(),
    };
    let explicit_grid = obj.contains_key("sigma0_grid");
    let mut fit = FitConfig::from_json(&value.to_string())?;
    if let Some(s) = seed {
        fit.seed = s;
    }
    if preprocess.standardize && matches!(fit.model_family, ModelFamily::Probit | ModelFamily::StateSpace) {
        return Err(HegpError::Config("standardization applies to regression families only".into()));
    }
    Ok(RunConfig { fit, preprocess, explicit_grid })
}

fn load_truth(path: &Path) -> Result<GroundTruth> {
    serde_json::from_str(&fs::read_to_string(path).map_err(with_path(path))?)
        .map_err(|e| HegpError::Parse(format!("{}: {e}", path.display())))
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(with_path(path))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(with_path(path))
}

fn to_json(v: &impl serde::Serialize) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| HegpError::Parse(e.to_string()))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// The affine map applied to responses and to the true predictive alike.
fn standardize_truth(t: &GroundTruth, s: &Standardization) -> GroundTruth {
    let mut out = t.clone();
    let q = s.scale.len();
    if t.mean.ncols() != q {
        return out;
    }
    for i in 0..t.mean.nrows() {
        for k in 0..q {
            out.mean[(i, k)] = (t.mean[(i, k)] - s.shift[k]) / s.scale[k];
        }
        out.cov[i] = DMatrix::from_fn(q, q, |a, b| t.cov[i][(a, b)] / (s.scale[a] * s.scale[b]));
    }
    out
}

fn cmd_simulate(a: &SimulateArgs, seed: Option<u64>) -> Result<Value> {
    let mut sc = SimScenario::new(a.scenario, seed.unwrap_or(0));
    if let Some(n) = a.n {
        sc = sc.with_n(n);
    }
    if let Some(c) = a.contamination {
        if !(0.0..=1.0).contains(&c) {
            return Err(HegpError::Config("contamination must lie in [0, 1]".into()));
        }
        sc = sc.with_contamination(c);
    }
    let (data, truth) = simulate(&sc)?;
    fs::create_dir_all(&a.out).map_err(with_path(&a.out))?;
    let data_path = a.out.join("data.csv");
    let truth_path = a.out.join("truth.json");
    write_data_csv(create_file(&data_path)?, &data)?;
    write_file(&truth_path, to_json(&truth)?)?;
    Ok(json!({
        "command": "simulate",
        "scenario": sc,
        "data": path_str(&data_path),
        "truth": path_str(&truth_path),
    }))
}

fn fit_summary(command: &str, state: &EMState, out: &Path) -> Value {
    json!({
        "command": command,
        "model": path_str(out),
        "objective": state.final_objective(),
        "r_hat": state.r_hat,
        "sigma0": state.sigma0,
        "sigma1_sq": state.sigma1_sq,
        "iterations": state.iterations,
        "converged": state.converged,
    })
}

fn prepare(data: &Dataset, rc: &RunConfig) -> Result<(Dataset, Option<Standardization>)> {
    if rc.preprocess.standardize {
        let s = Standardization::fit(data);
        Ok((s.apply(data)?, Some(s)))
    } else {
        Ok((data.clone(), None))
    }
}

fn cmd_fit(a: &FitArgs, seed: Option<u64>) -> Result<Value> {
    let rc = load_config(a.config.as_deref(), seed)?;
    let raw = read_data_csv(&a.data)?;
    let (data, std) = prepare(&raw, &rc)?;
    let state = if rc.fit.model_family == ModelFamily::Outlier && rc.explicit_grid {
        select_sigma0(&data, &rc.fit.sigma0_grid, &rc.fit)?.selected().clone()
    } else {
        fit(&data, &rc.fit)?
    };
    ModelFile::from_state(&state, std).save(&a.out)?;
    Ok(fit_summary("fit", &state, &a.out))
}

/// `lo:hi:count` over every covariate dimension, as a Cartesian product.
pub fn parse_grid(spec: &str, p: usize) -> Result<DMatrix<f64>> {
    let bad = || HegpError::Config(format!("grid '{spec}' must look like lo:hi:count"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if count == 0 || !lo.is_finite() || !hi.is_finite() || hi < lo {
        return Err(bad());
    }
    let axis: Vec<f64> = (0..count)
        .map(|i| if count == 1 { lo } else { lo + (hi - lo) * i as f64 / (count - 1) as f64 })
        .collect();
    let total = count.checked_pow(p as u32).filter(|t| *t <= 10_000_000).ok_or_else(|| {
        HegpError::Config(format!("grid of {count} points per axis over {p} dimensions is too large"))
    })?;
    Ok(DMatrix::from_fn(total, p, |r, j| {
        let stride = count.pow((p - 1 - j) as u32);
        axis[(r / stride) % count]
    }))
}

fn cmd_predict(a: &PredictArgs) -> Result<Value> {
    let mf = ModelFile::load(&a.model)?;
    let state = mf.to_state()?;
    let xq = match (&a.query, &a.grid) {
        (Some(q), _) => read_query_csv(q)?,
        (None, Some(g)) => parse_grid(g, state.x.ncols())?,
        (None, None) => return Err(HegpError::Config("either --query or --grid is required".into())),
    };
    let mut preds = predict(&state, &xq)?;
    if let Some(s) = &mf.standardization {
        preds = preds.iter().map(|p| s.invert(p)).collect::<Result<_>>()?;
    }
    let prob = match state.model.third {
        ThirdLevel::Probit(_) => Some(predict_y_class(&state, &xq)?),
        _ => None,
    };
    write_predictions(create_file(&a.out)?, &xq, &preds, prob.as_deref())?;
    Ok(json!({
        "command": "predict",
        "predictions": path_str(&a.out),
        "rows": xq.nrows(),
        "probabilities": prob.is_some(),
    }))
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<Value> {
    let mf = ModelFile::load(&a.model)?;
    let state = mf.to_state()?;
    let raw = read_data_csv(&a.data)?;
    if raw.p() != state.x.ncols() || raw.q() != state.model.q() {
        return Err(HegpError::Dimension("data columns do not match the model".into()));
    }
    let truth = a.truth.as_deref().map(load_truth).transpose()?;
    let (data, truth) = match &mf.standardization {
        Some(s) => (s.apply(&raw)?, truth.map(|t| standardize_truth(&t, s))),
        None => (raw, truth),
    };
    let mut report = json!({
        "command": "evaluate",
        "report": path_str(&a.out),
        "sigma0": state.sigma0,
        "sigma1_sq": state.sigma1_sq,
    });
    match &state.model.third {
        ThirdLevel::Probit(_) => {
            if let Some(t) = &truth {
                let p: Vec<f64> = predict_y_class(&state, &t.eval_x)?.iter().map(|v| v[0]).collect();
                report["classification_kl"] = json!(classification_kl(&p, t)?);
            }
        }
        third => {
            if !matches!(third, ThirdLevel::StateSpace(_)) {
                let cal = residual_calibration(&predict_f(&state, &data.x)?, &data)?;
                report["coverage"] = json!(cal.coverage);
                report["ks_statistic"] = json!(cal.ks_statistic);
                report["ks_pvalue"] = json!(cal.ks_pvalue);
                report["cvm"] = json!(cvm_score(&state, &data)?.j);
            }
            if let Some(t) = &truth {
                if t.cov.is_empty() {
                    return Err(HegpError::Config("ground truth carries no predictive to compare with".into()));
                }
                report["akld"] = json!(akld(&predict_f(&state, &t.eval_x)?, t)?);
            }
        }
    }
    write_file(&a.out, to_json(&report)?)?;
    Ok(report)
}

fn cmd_select(a: &SelectArgs, seed: Option<u64>) -> Result<Value> {
    let mut rc = load_config(a.config.as_deref(), seed)?;
    rc.fit.model_family = ModelFamily::Outlier;
    let raw = read_data_csv(&a.data)?;
    let (data, std) = prepare(&raw, &rc)?;
    let sel = select_sigma0(&data, &rc.fit.sigma0_grid, &rc.fit)?;
    fs::create_dir_all(&a.out).map_err(with_path(&a.out))?;
    let report_path = a.out.join("report.json");
    let model_path = a.out.join("model.json");
    write_file(&report_path, to_json(&sel.report)?)?;
    ModelFile::from_state(sel.selected(), std).save(&model_path)?;
    let mut summary = fit_summary("select-sigma0", sel.selected(), &model_path);
    summary["report"] = json!(path_str(&report_path));
    summary["grid"] = json!(sel.report.grid);
    summary["j"] = json!(sel.report.j);
    Ok(summary)
}

fn cmd_compare(a: &CompareArgs, seed: Option<u64>) -> Result<Value> {
    let rc = load_config(a.config.as_deref(), seed)?;
    let raw = read_data_csv(&a.data)?;
    let truth = a.truth.as_deref().map(load_truth).transpose()?;
    let (data, std) = prepare(&raw, &rc)?;
    let truth = match (&std, truth) {
        (Some(s), Some(t)) => Some(standardize_truth(&t, s)),
        (_, t) => t,
    };
    let report = compare_methods(&data, truth.as_ref(), &a.methods, &rc.fit)?;
    fs::create_dir_all(&a.out).map_err(with_path(&a.out))?;
    let json_path: PathBuf = a.out.join("report.json");
    let csv_path: PathBuf = a.out.join("report.csv");
    write_file(&json_path, to_json(&report)?)?;
    write_file(&csv_path, report.table())?;
    Ok(json!({
        "command": "compare",
        "report": path_str(&json_path),
        "table": path_str(&csv_path),
        "rows": report.rows,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_a_cartesian_product() {
        let g = parse_grid("-1:1:3", 2).unwrap();
        assert_eq!(g.nrows(), 9);
        assert_eq!(g.row(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, -1.0]);
        assert_eq!(g.row(1).iter().copied().collect::<Vec<_>>(), vec![-1.0, 0.0]);
        assert_eq!(g.row(8).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
        let g = parse_grid("-5:5:201", 1).unwrap();
        assert_eq!(g[(100, 0)], 0.0);
        assert_eq!(g[(200, 0)], 5.0);
    }

    #[test]
    fn malformed_grids_are_rejected() {
        for s in ["1:2", "a:1:3", "2:1:3", "0:1:0", "0:1:3:4"] {
            assert!(parse_grid(s, 1).is_err(), "{s}");
        }
    }
}
