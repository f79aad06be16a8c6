//! Training data with a per-entry observation mask.

use nalgebra::DMatrix;

use crate::error::{HegpError, Result};

/// N×Q observation indicator; `true` means observed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MissingMask {
    n: usize,
    q: usize,
    observed: Vec<bool>,
}

impl MissingMask {
    pub fn all_observed(n: usize, q: usize) -> MissingMask {
        MissingMask { n, q, observed: vec![true; n * q] }
    }

    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<MissingMask> {
        let n = rows.len();
        let q = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != q) {
            return Err(HegpError::Dimension("ragged mask".into()));
        }
        let m = MissingMask { n, q, observed: rows.into_iter().flatten().collect() };
        if !m.observed.iter().any(|&b| b) {
            return Err(HegpError::Config("mask has no observed entry".into()));
        }
        Ok(m)
    }

    pub fn is_observed(&self, n: usize, q: usize) -> bool {
        self.observed[n * self.q + q]
    }

    pub fn row(&self, n: usize) -> &[bool] {
        &self.observed[n * self.q..(n + 1) * self.q]
    }

    pub fn all_true(&self) -> bool {
        self.observed.iter().all(|&b| b)
    }

    pub fn count_row(&self, n: usize) -> usize {
        self.row(n).iter().filter(|&&b| b).count()
    }

    pub fn count(&self) -> usize {
        self.observed.iter().filter(|&&b| b).count()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.q)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// N×P covariates.
    pub x: DMatrix<f64>,
    /// N×Q responses; entries that are not observed hold 0.
    pub y: DMatrix<f64>,
    pub mask: MissingMask,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Dataset> {
        let mask = MissingMask::all_observed(y.nrows(), y.ncols());
        Dataset::with_mask(x, y, mask)
    }

    pub fn with_mask(x: DMatrix<f64>, mut y: DMatrix<f64>, mask: MissingMask) -> Result<Dataset> {
        if x.nrows() != y.nrows() || mask.shape() != (y.nrows(), y.ncols()) {
            return Err(HegpError::Dimension(format!(
                "covariates {}x{}, responses {}x{}, mask {:?}",
                x.nrows(),
                x.ncols(),
                y.nrows(),
                y.ncols(),
                mask.shape()
            )));
        }
        if x.nrows() == 0 || y.ncols() == 0 {
            return Err(HegpError::Dimension("empty dataset".into()));
        }
        if mask.count() == 0 {
            return Err(HegpError::Config("no observed response".into()));
        }
        for n in 0..y.nrows() {
            for q in 0..y.ncols() {
                if !mask.is_observed(n, q) {
                    y[(n, q)] = 0.0;
                } else if !y[(n, q)].is_finite() {
                    return Err(HegpError::Domain(format!("non-finite response at row {n}")));
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(HegpError::Domain("non-finite covariate".into()));
        }
        Ok(Dataset { x, y, mask })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    pub fn x_row(&self, n: usize) -> Vec<f64> {
        self.x.row(n).iter().copied().collect()
    }

    pub fn y_row(&self, n: usize) -> Vec<f64> {
        self.y.row(n).iter().copied().collect()
    }

    /// Per-output sample variance over observed entries.
    pub fn output_variances(&self) -> Vec<f64> {
        (0..self.q())
            .map(|q| {
                let v: Vec<f64> = (0..self.n()).filter(|&n| self.mask.is_observed(n, q)).map(|n| self.y[(n, q)]).collect();
                if v.len() < 2 {
                    return 1.0;
                }
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
                if var > 0.0 { var } else { 1.0 }
            })
            .collect()
    }
}
