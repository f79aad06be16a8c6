//! Variational-free-energy sparse approximation: 𝕍_XX is replaced by the
//! Nyström surrogate 𝕍̃ = U Uᵀ with U = 𝕍_XZ chol(𝕍_ZZ)⁻ᵀ, and every solve
//! with S̃ = 𝕍̃ + Λ goes through the Woodbury identity with block-diagonal Λ⁻¹.

use nalgebra::{DMatrix, DVector};

use crate::error::{HegpError, Result};
use crate::gp_core::MultiOutputCov;
use crate::linalg::{spd_inv, symmetrize, Chol};
use crate::vem::backend::{block_apply, Backend, Omega, UpsilonGrad};
use crate::vem::mstep::MStepKernels;

/// Low-rank factor of the Nyström surrogate.
#[derive(Clone, Debug)]
pub struct NystromFactor {
    /// NQ×MQ, datum-major rows.
    pub u: DMatrix<f64>,
    pub lz: Chol,
}

pub fn nystrom_cov(cov: &MultiOutputCov, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<NystromFactor> {
    if z.nrows() == 0 {
        return Err(HegpError::Config("at least one inducing covariate is required".into()));
    }
    let kzz = cov.gram_dm(z, z)?;
    let lz = Chol::new(&kzz).map_err(|e| HegpError::LinAlg(format!("inducing Gram: {e}")))?;
    let kxz = cov.gram_dm(x, z)?;
    let u = lz.solve_lower(&kxz.transpose()).transpose();
    Ok(NystromFactor { u, lz })
}

fn prior_diag(cov: &MultiOutputCov, x: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let xi: Vec<f64> = x.row(n).iter().copied().collect();
    &cov.sigma * cov.kernel.eval(&xi, &xi)
}

/// −½ Σₙ tr(Λₙ⁻¹(𝕍ₙₙ − 𝕍̃ₙₙ)).
pub fn vfe_elbo_correction(
    cov: &MultiOutputCov,
    lambdas: &[DMatrix<f64>],
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<f64> {
    Ok(SparseBackend::new(cov, x, z, lambdas)?.correction)
}

/// 𝔸 and 𝔹 computed through the Woodbury path, with Ω passed through.
pub fn vfe_mstep_kernels(
    cov: &MultiOutputCov,
    lambdas: &[DMatrix<f64>],
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    omega: &Omega,
) -> Result<MStepKernels> {
    let b = Backend::Sparse(SparseBackend::new(cov, x, z, lambdas)?);
    let (a, bb) = b.mstep_kernels();
    Ok(MStepKernels { a, b: bb, omega: omega.dense() })
}

#[derive(Clone, Debug)]
pub struct SparseBackend {
    pub n: usize,
    pub q: usize,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub cov: MultiOutputCov,
    pub lambdas: Vec<DMatrix<f64>>,
    pub lam_inv: Vec<DMatrix<f64>>,
    pub u: DMatrix<f64>,
    /// Λ⁻¹U.
    pub w: DMatrix<f64>,
    pub lz: Chol,
    /// (I + UᵀΛ⁻¹U)⁻¹.
    pub c: DMatrix<f64>,
    pub logdet: f64,
    pub jitter: f64,
    pub inv_blocks: Vec<DMatrix<f64>>,
    pub deficit: Vec<DMatrix<f64>>,
    pub correction: f64,
}

impl SparseBackend {
    pub fn new(
        cov: &MultiOutputCov,
        x: &DMatrix<f64>,
        z: &DMatrix<f64>,
        lambdas: &[DMatrix<f64>],
    ) -> Result<SparseBackend> {
        let n = x.nrows();
        let q = cov.q();
        let NystromFactor { u, lz } = nystrom_cov(cov, x, z)?;
        let mq = u.ncols();
        let lam_inv: Vec<DMatrix<f64>> = lambdas.iter().map(spd_inv).collect::<Result<_>>()?;
        let mut w = DMatrix::zeros(n * q, mq);
        let mut logdet_lam = 0.0;
        for i in 0..n {
            let wi = &lam_inv[i] * u.rows(i * q, q);
            w.rows_mut(i * q, q).copy_from(&wi);
            logdet_lam += Chol::new(&lambdas[i])?.logdet();
        }
        let mut cinv = u.transpose() * &w + DMatrix::<f64>::identity(mq, mq);
        symmetrize(&mut cinv);
        let cch = Chol::new(&cinv)?;
        let c = cch.inverse();
        let mut inv_blocks = Vec::with_capacity(n);
        let mut deficit = Vec::with_capacity(n);
        let mut correction = 0.0;
        for i in 0..n {
            let wi = w.rows(i * q, q);
            let mut ib = &lam_inv[i] - wi * &c * wi.transpose();
            symmetrize(&mut ib);
            inv_blocks.push(ib);
            let ui = u.rows(i * q, q);
            let mut def = prior_diag(cov, x, i) - ui * ui.transpose();
            symmetrize(&mut def);
            correction -= 0.5 * lam_inv[i].component_mul(&def).sum();
            deficit.push(def);
        }
        Ok(SparseBackend {
            n,
            q,
            x: x.clone(),
            z: z.clone(),
            cov: cov.clone(),
            lambdas: lambdas.to_vec(),
            lam_inv,
            jitter: lz.jitter.max(cch.jitter),
            u,
            w,
            lz,
            c,
            logdet: logdet_lam + cch.logdet(),
            inv_blocks,
            deficit,
            correction,
        })
    }

    fn lam_inv_apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        block_apply(&self.lam_inv, v)
    }

    pub fn solve_mat(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.lam_inv_apply(v) - &self.w * (&self.c * self.w.tr_mul(v))
    }

    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        DVector::from_column_slice(self.solve_mat(&m).as_slice())
    }

    /// S̃ v.
    pub fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let q = self.q;
        let mut out = &self.u * self.u.tr_mul(v);
        for i in 0..self.n {
            let b = &self.lambdas[i] * v.rows(i * q, q);
            let mut dst = out.rows_mut(i * q, q);
            dst += b;
        }
        out
    }

    fn weighted_psi(&self, psi: &[DMatrix<f64>]) -> DMatrix<f64> {
        let q = self.q;
        let mq = self.w.ncols();
        let mut zsum = DMatrix::zeros(mq, mq);
        for (i, p) in psi.iter().enumerate() {
            let wi = self.w.rows(i * q, q);
            zsum += wi.transpose() * p * wi;
        }
        zsum
    }

    pub fn psi_sandwich_blocks(&self, psi: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let q = self.q;
        let czc = &self.c * self.weighted_psi(psi) * &self.c;
        (0..self.n)
            .map(|i| {
                let wi = self.w.rows(i * q, q);
                let li = &self.lam_inv[i];
                let cross = li * &psi[i] * wi * &self.c * wi.transpose();
                let mut b = li * &psi[i] * li - &cross - cross.transpose() + wi * &czc * wi.transpose();
                symmetrize(&mut b);
                b
            })
            .collect()
    }

    pub fn upsilon_grad(&self, om: &Omega) -> Result<UpsilonGrad> {
        let q = self.q;
        let m = self.z.nrows();
        // A = 𝕍_ZZ⁻¹𝕍_ZX = Lz⁻ᵀUᵀ
        let a = self
            .lz
            .l()
            .transpose()
            .solve_upper_triangular(&self.u.transpose())
            .ok_or_else(|| HegpError::LinAlg("singular inducing factor".into()))?;
        let at = a.transpose();
        let sa = self.solve_mat(&at);
        let y = self.solve_mat(&om.apply(&sa)) - &sa + self.lam_inv_apply(&at);
        let ay = at.tr_mul(&y);
        let (kxz, dkxz) = self.cov.kernel.gram_with_grad(&self.x, &self.z);
        let (kzz, dkzz) = self.cov.kernel.gram_with_grad(&self.z, &self.z);
        let mut d_sigma = DMatrix::zeros(q, q);
        let mut d_loggamma = 0.0;
        let sigma = &self.cov.sigma;
        for i in 0..self.n {
            for j in 0..m {
                let b = y.view((i * q, j * q), (q, q));
                d_sigma += b * kxz[(i, j)];
                d_loggamma += dkxz[(i, j)] * b.component_mul(sigma).sum();
            }
        }
        for a in 0..m {
            for c in 0..m {
                let b = ay.view((a * q, c * q), (q, q));
                d_sigma -= b * (0.5 * kzz[(a, c)]);
                d_loggamma -= 0.5 * dkzz[(a, c)] * b.component_mul(sigma).sum();
            }
        }
        for i in 0..self.n {
            let xi: Vec<f64> = self.x.row(i).iter().copied().collect();
            d_sigma -= &self.lam_inv[i] * (0.5 * self.cov.kernel.eval(&xi, &xi));
        }
        Ok(UpsilonGrad { d_sigma, d_loggamma })
    }

    pub fn predict_parts(&self, xq: &DMatrix<f64>, om: &Omega) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        let q = self.q;
        let mq = self.c.nrows();
        let h = &self.c * self.w.tr_mul(&om.d);
        let r = &self.c * self.weighted_psi(&om.psi) * &self.c;
        let i_minus_c = DMatrix::<f64>::identity(mq, mq) - &self.c;
        let cond = om.cond.as_ref().map(|c| {
            let rows = DMatrix::from_fn(c.idx.len(), mq, |i, j| self.w[(c.idx[i], j)]);
            (&self.c * rows.transpose(), &c.cov)
        });
        let vzx = self.cov.gram_dm(&self.z, xq)?;
        let ux = self.lz.solve_lower(&vzx);
        let mut out = Vec::with_capacity(xq.nrows());
        for i in 0..xq.nrows() {
            let xi: Vec<f64> = xq.row(i).iter().copied().collect();
            let u = ux.columns(i * q, q);
            let mean = u.transpose() * &h;
            let mut cov = &self.cov.sigma * self.cov.kernel.eval(&xi, &xi) - u.transpose() * &i_minus_c * u
                + u.transpose() * &r * u;
            if let Some((wc, cc)) = &cond {
                let t = u.transpose() * wc;
                cov += &t * *cc * t.transpose();
            }
            symmetrize(&mut cov);
            out.push((mean, cov));
        }
        Ok(out)
    }

    pub fn shifted_mean(&self, p_half: &[DMatrix<f64>], wv: &DVector<f64>) -> Result<DVector<f64>> {
        let q = self.q;
        let mq = self.u.ncols();
        let d_blocks: Vec<DMatrix<f64>> = (0..self.n)
            .map(|i| {
                let mut b = &p_half[i] * &self.lambdas[i] * &p_half[i] + DMatrix::<f64>::identity(q, q);
                symmetrize(&mut b);
                b
            })
            .collect();
        let d_inv: Vec<DMatrix<f64>> = d_blocks.iter().map(spd_inv).collect::<Result<_>>()?;
        let pu = block_apply(p_half, &self.u);
        let dpu = block_apply(&d_inv, &pu);
        let mut inner = pu.transpose() * &dpu + DMatrix::<f64>::identity(mq, mq);
        symmetrize(&mut inner);
        let ich = Chol::new(&inner)?;
        let wm = DMatrix::from_column_slice(wv.len(), 1, wv.as_slice());
        let dw = block_apply(&d_inv, &wm);
        let x = &dw - &dpu * ich.solve_mat(&(pu.transpose() * &dw));
        let m = block_apply(p_half, &x);
        Ok(DVector::from_column_slice(self.apply(&m).as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_frob_err;
    use crate::testutil::*;
    use crate::vem::backend::{blockdiag, DenseBackend};
    use crate::vem::estep::upsilon_objective;
    use crate::vem::upsilon;

    struct Instance {
        cov: MultiOutputCov,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        lambdas: Vec<DMatrix<f64>>,
        om: Omega,
    }

    fn instance(seed: u64, n: usize, m: usize, q: usize) -> Instance {
        let mut r = rng(seed);
        let cov = random_cov(q, &mut r);
        let x = random_x(n, 1, &mut r);
        let z = DMatrix::from_fn(m, 1, |i, _| -2.0 + 4.0 * i as f64 / (m - 1) as f64);
        let lambdas = random_lambdas(n, q, &mut r);
        let om = random_omega(n, q, true, &mut r);
        Instance { cov, x, z, lambdas, om }
    }

    fn surrogate(i: &Instance) -> DMatrix<f64> {
        let f = nystrom_cov(&i.cov, &i.x, &i.z).unwrap();
        &f.u * f.u.transpose() + blockdiag(&i.lambdas)
    }

    #[test]
    fn woodbury_matches_dense_inverse() {
        for seed in 0..3 {
            let i = instance(seed, 12, 4, 2);
            let b = SparseBackend::new(&i.cov, &i.x, &i.z, &i.lambdas).unwrap();
            let s = surrogate(&i);
            let sinv = s.clone().try_inverse().unwrap();
            let eye = DMatrix::<f64>::identity(24, 24);
            assert!(rel_frob_err(&b.solve_mat(&eye), &sinv) < 1e-8);
            assert!((b.logdet - s.clone().lu().determinant().ln()).abs() < 1e-8);
            assert!(rel_frob_err(&b.apply(&eye), &s) < 1e-12);
            for (n, blk) in b.inv_blocks.iter().enumerate() {
                assert!(rel_frob_err(blk, &sinv.view((2 * n, 2 * n), (2, 2)).clone_owned()) < 1e-8);
            }
        }
    }

    #[test]
    fn correction_is_the_trace_of_the_deficit() {
        let i = instance(3, 10, 3, 2);
        let b = SparseBackend::new(&i.cov, &i.x, &i.z, &i.lambdas).unwrap();
        let v = i.cov.gram_dm(&i.x, &i.x).unwrap();
        let f = nystrom_cov(&i.cov, &i.x, &i.z).unwrap();
        let deficit = &v - &f.u * f.u.transpose();
        let lam_inv = blockdiag(&i.lambdas).try_inverse().unwrap();
        let reference = -0.5 * (&lam_inv * &deficit).trace();
        assert!((b.correction - reference).abs() < 1e-10);
        assert!(b.correction <= 0.0);
        assert!(vfe_elbo_correction(&i.cov, &i.lambdas, &i.x, &i.z).unwrap() == b.correction);
    }

    #[test]
    fn inducing_at_training_points_reproduces_the_dense_backend() {
        let mut i = instance(4, 6, 6, 2);
        i.x = DMatrix::from_fn(6, 1, |k, _| -2.0 + 0.8 * k as f64);
        i.z = i.x.clone();
        let s = Backend::Sparse(SparseBackend::new(&i.cov, &i.x, &i.z, &i.lambdas).unwrap());
        let d = Backend::Dense(DenseBackend::new(&i.cov, &i.x, &i.lambdas).unwrap());
        assert!(s.vfe_correction().abs() < 1e-10);
        assert!((s.logdet() - d.logdet()).abs() < 1e-8);
        for (a, b) in s.m_blocks(&i.om).iter().zip(d.m_blocks(&i.om)) {
            assert!(rel_frob_err(a, &b) < 1e-8);
        }
        let xq = DMatrix::from_row_slice(3, 1, &[-1.3, 0.1, 2.9]);
        for (a, b) in s.predict_parts(&xq, &i.om).unwrap().iter().zip(d.predict_parts(&xq, &i.om).unwrap()) {
            assert!((&a.0 - &b.0).norm() < 1e-8);
            assert!(rel_frob_err(&a.1, &b.1) < 1e-7);
        }
        let gs = s.upsilon_grad(&i.om).unwrap();
        let gd = d.upsilon_grad(&i.om).unwrap();
        assert!(rel_frob_err(&gs.d_sigma, &gd.d_sigma) < 1e-7);
        assert!(rel_err(gs.d_loggamma, gd.d_loggamma) < 1e-7);
    }

    #[test]
    fn sparse_kernels_agree_with_the_surrogate() {
        let i = instance(5, 9, 4, 2);
        let b = Backend::Sparse(SparseBackend::new(&i.cov, &i.x, &i.z, &i.lambdas).unwrap());
        let k = vfe_mstep_kernels(&i.cov, &i.lambdas, &i.x, &i.z, &i.om).unwrap();
        for (fast, slow) in b.m_blocks(&i.om).iter().zip(k.m_blocks()) {
            assert!(rel_frob_err(fast, &slow) < 1e-8);
        }
        let sinv = surrogate(&i).try_inverse().unwrap();
        let psi = blockdiag(&i.om.psi);
        let sand = &sinv * &psi * &sinv;
        for (n, blk) in b.psi_sandwich_blocks(&i.om.psi).iter().enumerate() {
            assert!(rel_frob_err(blk, &sand.view((2 * n, 2 * n), (2, 2)).clone_owned()) < 1e-8);
        }
    }

    #[test]
    fn sparse_shifted_mean_matches_direct_formula() {
        let mut r = rng(6);
        let i = instance(6, 8, 3, 2);
        let halves: Vec<DMatrix<f64>> = (0..8).map(|_| crate::linalg::psd_sqrt(&random_spd(2, 0.1, &mut r))).collect();
        let w = DVector::from_fn(16, |k, _| (k as f64).cos());
        let b = SparseBackend::new(&i.cov, &i.x, &i.z, &i.lambdas).unwrap();
        let s = surrogate(&i);
        let ph = blockdiag(&halves);
        let m = DMatrix::<f64>::identity(16, 16) + &ph * &s * &ph;
        let reference = &s * &ph * m.try_inverse().unwrap() * &w;
        let got = b.shifted_mean(&halves, &w).unwrap();
        assert!((&got - &reference).norm() / reference.norm() < 1e-9);
    }

    #[test]
    fn sparse_upsilon_gradient_matches_finite_differences() {
        for (seed, q) in [(7, 1), (8, 2)] {
            let i = instance(seed, 10, 4, q);
            let p = upsilon::to_params(&i.cov);
            let f = |v: &[f64]| upsilon_objective(&i.cov, &i.x, Some(&i.z), &i.lambdas, &i.om, v).unwrap().0;
            let (_, g) = upsilon_objective(&i.cov, &i.x, Some(&i.z), &i.lambdas, &i.om, &p).unwrap();
            for k in 0..p.len() {
                let fd = central_diff(f, &p, k, 1e-5);
                assert!(rel_err(g[k], fd) < 1e-5, "q={q} k={k}: {} vs {fd}", g[k]);
            }
        }
    }
}
