//! Bandwidth selection by cross-validation over the r%-nearest-neighbor rule.

use nalgebra::{DMatrix, DVector};

use crate::error::{HegpError, Result};
use crate::linalg::{spd_inv, spd_logdet, symmetrize};
use crate::precision::{bandwidths_from_percentage, row, PrecisionMixture, PrecisionPrior, WEIGHT_UNDERFLOW};
use crate::special::LN_2PI;
use crate::vem::mstep::weighted_update;

#[derive(Clone, Debug, PartialEq)]
pub struct CvOutcome {
    /// Selected percentage per mixture component.
    pub r: Vec<f64>,
    /// Base matrices fitted under the selected bandwidths.
    pub lambdas: Vec<Vec<DMatrix<f64>>>,
    /// 𝒯(r) per component, in grid order.
    pub scores: Vec<Vec<f64>>,
}

/// Weights with the `exclude` nearest induced covariates removed and the
/// rest renormalized; `None` when nothing remains.
fn held_out_weights(d2: &[f64], order: &[usize], h: &[f64], exclude: usize) -> Option<DVector<f64>> {
    let d = d2.len();
    if exclude >= d {
        return None;
    }
    let kept = &order[exclude..];
    let mut w = DVector::zeros(d);
    let mut total = 0.0;
    for &j in kept {
        let v = (-d2[j] / (2.0 * h[j] * h[j])).exp();
        w[j] = v;
        total += v;
    }
    if kept.iter().all(|&j| w[j] < WEIGHT_UNDERFLOW) {
        w.fill(0.0);
        w[kept[0]] = 1.0;
        return Some(w);
    }
    Some(w / total)
}

/// For every r in the grid: bandwidths H⁽ʳ⁾, base matrices L̂⁽ʳ⁾ from the
/// closed-form update, and the held-out score
/// 𝒯(r) = −½Σₙ[tr(Λ̃ₙ⁻¹Mₙ) + log|Λ̃ₙ|] − ½NQ log 2π, where Λ̃ₙ drops the
/// ⌈A·D/100⌉ induced covariates nearest to xₙ. Ties go to the smaller r.
pub fn cv_select_r(
    mixture: &PrecisionMixture,
    x: &DMatrix<f64>,
    m: &[DMatrix<f64>],
    r_grid: &[f64],
    adjacent_percent: f64,
    prior: &PrecisionPrior,
) -> Result<CvOutcome> {
    if r_grid.is_empty() {
        return Err(HegpError::Config("empty bandwidth grid".into()));
    }
    let n = x.nrows();
    let mut out = CvOutcome { r: Vec::new(), lambdas: Vec::new(), scores: Vec::new() };
    for c in &mixture.components {
        let dd = c.d();
        let exclude = ((adjacent_percent * dd as f64 / 100.0 - 1e-9).ceil().max(0.0)) as usize;
        let d2: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let xi = row(x, i);
                (0..dd).map(|j| row(&c.induced, j).iter().zip(&xi).map(|(a, b)| (a - b).powi(2)).sum()).collect()
            })
            .collect();
        let order: Vec<Vec<usize>> = d2
            .iter()
            .map(|v| {
                let mut o: Vec<usize> = (0..dd).collect();
                o.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
                o
            })
            .collect();
        let msub: Vec<DMatrix<f64>> = m
            .iter()
            .map(|mn| DMatrix::from_fn(c.dim(), c.dim(), |i, j| mn[(c.outputs[i], c.outputs[j])]))
            .collect();
        let prior_c = prior.restrict(&c.outputs);
        let mut best: Option<(f64, f64, Vec<DMatrix<f64>>)> = None;
        let mut scores = Vec::with_capacity(r_grid.len());
        for &r in r_grid {
            let h = bandwidths_from_percentage(&c.induced, x, r)?;
            let w: Vec<DVector<f64>> = (0..n).map(|i| crate::precision::density_weights(&c.induced, &h, &row(x, i))).collect();
            let lam = weighted_update(&w, &msub, &c.lambdas, &prior_c);
            let precs: Vec<DMatrix<f64>> = lam.iter().map(spd_inv).collect::<Result<_>>()?;
            let mut score = 0.0;
            let mut used = 0usize;
            for i in 0..n {
                let Some(wt) = held_out_weights(&d2[i], &order[i], &h, exclude) else {
                    log::warn!("every induced covariate is excluded for datum {i}; skipping it");
                    continue;
                };
                let mut p = DMatrix::zeros(c.dim(), c.dim());
                for (j, pj) in precs.iter().enumerate() {
                    if wt[j] != 0.0 {
                        p += pj * wt[j];
                    }
                }
                symmetrize(&mut p);
                score -= 0.5 * ((&p * &msub[i]).trace() - spd_logdet(&p)?);
                used += 1;
            }
            score -= 0.5 * (used * c.dim()) as f64 * LN_2PI;
            scores.push(score);
            let better = match &best {
                None => true,
                Some((bs, br, _)) => score > *bs || (score == *bs && r < *br),
            };
            if better && score.is_finite() {
                best = Some((score, r, lam));
            }
        }
        let (_, r, lam) = best.ok_or_else(|| HegpError::Domain("no finite cross-validation score".into()))?;
        out.r.push(r);
        out.lambdas.push(lam);
        out.scores.push(scores);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precision::MixtureMode;
    use crate::testutil::*;

    fn problem(seed: u64, d: usize) -> (PrecisionMixture, DMatrix<f64>, Vec<DMatrix<f64>>) {
        let mut r = rng(seed);
        let x = random_x(30, 1, &mut r);
        let induced = DMatrix::from_fn(d, 1, |i, _| -2.0 + 4.0 * i as f64 / (d.max(2) - 1) as f64);
        let pm = PrecisionMixture::new(MixtureMode::Full, &induced, &DMatrix::identity(2, 2), &x, 20.0).unwrap();
        let m = (0..30)
            .map(|i| random_spd(2, 0.1, &mut r) * (1.0 + x[(i, 0)].powi(2)))
            .collect();
        (pm, x, m)
    }

    #[test]
    fn selection_is_deterministic_and_on_the_grid() {
        let (pm, x, m) = problem(1, 8);
        let grid = [5.0, 10.0, 20.0, 40.0];
        let a = cv_select_r(&pm, &x, &m, &grid, 5.0, &PrecisionPrior::Flat).unwrap();
        let b = cv_select_r(&pm, &x, &m, &grid, 5.0, &PrecisionPrior::Flat).unwrap();
        assert_eq!(a, b);
        assert!(grid.contains(&a.r[0]));
        let best = a.scores[0].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.scores[0][grid.iter().position(|&r| r == a.r[0]).unwrap()], best);
    }

    #[test]
    fn ties_go_to_the_smaller_percentage() {
        let (pm, x, m) = problem(2, 1);
        let out = cv_select_r(&pm, &x, &m, &[30.0, 10.0, 20.0], 0.0, &PrecisionPrior::Flat).unwrap();
        assert!(out.scores[0].windows(2).all(|w| w[0] == w[1]));
        assert_eq!(out.r, vec![10.0]);
    }

    #[test]
    fn selected_matrices_match_the_closed_form_update() {
        let (mut pm, x, m) = problem(3, 6);
        let out = cv_select_r(&pm, &x, &m, &[10.0, 30.0], 5.0, &PrecisionPrior::Flat).unwrap();
        pm.set_bandwidths(&x, &out.r).unwrap();
        let direct = crate::vem::mstep::mstep_l(&pm, &m, &x, &PrecisionPrior::Flat);
        assert_eq!(direct, out.lambdas);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let (pm, x, m) = problem(4, 3);
        assert!(matches!(cv_select_r(&pm, &x, &m, &[], 5.0, &PrecisionPrior::Flat), Err(HegpError::Config(_))));
    }
}
