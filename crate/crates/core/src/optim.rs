//! Sign-based adaptive-step gradient ascent with backtracking.

use crate::error::{HegpError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AscentConfig {
    pub max_iter: usize,
    pub init_step: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub grow: f64,
    pub shrink: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig { max_iter: 100, init_step: 0.05, min_step: 1e-10, max_step: 1.0, grow: 1.2, shrink: 0.5 }
    }
}

#[derive(Clone, Debug)]
pub struct AscentResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
    /// Final per-coordinate step sizes.
    pub steps: Vec<f64>,
}

/// Maximizes `f`, which returns the objective and its gradient. Steps that
/// lower the objective (or make it non-finite) are undone and every step
/// size is halved, so the returned value never falls below the initial one.
pub fn maximize<F>(f: F, x0: &[f64], cfg: &AscentConfig) -> Result<AscentResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    maximize_scaled(f, x0, &vec![1.0; x0.len()], None, cfg)
}

/// As [`maximize`], with every step bound of coordinate i multiplied by
/// `scales[i]`, optionally resuming from the step sizes of an earlier run.
pub fn maximize_scaled<F>(
    mut f: F,
    x0: &[f64],
    scales: &[f64],
    steps0: Option<&[f64]>,
    cfg: &AscentConfig,
) -> Result<AscentResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (v0, g0) = f(x0)?;
    if !v0.is_finite() {
        return Err(HegpError::Diverged { iteration: 0, message: "non-finite objective at start".into() });
    }
    let mut x = x0.to_vec();
    let mut value = v0;
    let mut grad = g0;
    let mut prev_grad = vec![0.0; n];
    let mut steps: Vec<f64> = match steps0 {
        Some(s) => s.iter().zip(scales).map(|(v, c)| v.max(cfg.min_step * c)).collect(),
        None => scales.iter().map(|s| cfg.init_step * s).collect(),
    };
    let mut trace = vec![v0];
    let mut iterations = 0;
    if n == 0 {
        return Ok(AscentResult { x, value, iterations, trace, steps });
    }
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let mut cand = x.clone();
        for i in 0..n {
            let prod = grad[i] * prev_grad[i];
            if prod > 0.0 {
                steps[i] = (steps[i] * cfg.grow).min(cfg.max_step * scales[i]);
            } else if prod < 0.0 {
                steps[i] = (steps[i] * cfg.shrink).max(cfg.min_step * scales[i]);
            }
            if grad[i] != 0.0 {
                cand[i] += grad[i].signum() * steps[i];
            }
        }
        let attempt = f(&cand);
        match attempt {
            Ok((v, g)) if v.is_finite() && v >= value => {
                x = cand;
                value = v;
                prev_grad = std::mem::replace(&mut grad, g);
                trace.push(value);
            }
            Ok(_) | Err(HegpError::LinAlg(_)) | Err(HegpError::Domain(_)) => {
                steps.iter_mut().for_each(|s| *s *= cfg.shrink);
                prev_grad.iter_mut().for_each(|g| *g = 0.0);
            }
            Err(e) => return Err(e),
        }
        if steps.iter().zip(scales).all(|(&s, &c)| s < cfg.min_step * c) {
            break;
        }
    }
    Ok(AscentResult { x, value, iterations, trace, steps })
}
