//! Operations on the marginal covariance S = 𝕍_XX + Λ_XX of f_X, in the
//! datum-major layout, with a dense and a sparse (Nyström) realization.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::gp_core::MultiOutputCov;
use crate::linalg::{symmetrize, Chol};
use crate::sparse::SparseBackend;

/// Second-moment matrix Ω = d dᵀ + blockdiag(Ψ) + E C Eᵀ, where the optional
/// last term is a dense covariance over a subset of coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Omega {
    /// vec(η − μ), datum-major.
    pub d: DVector<f64>,
    pub psi: Vec<DMatrix<f64>>,
    pub cond: Option<CondPart>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondPart {
    /// Datum-major coordinate indices.
    pub idx: Vec<usize>,
    pub cov: DMatrix<f64>,
}

impl Omega {
    pub fn q(&self) -> usize {
        self.psi.first().map_or(0, |p| p.nrows())
    }

    /// Ω X for an NQ×k matrix X.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let q = self.q();
        let mut out = &self.d * (self.d.transpose() * x);
        for (n, p) in self.psi.iter().enumerate() {
            let block = p * x.rows(n * q, q);
            let mut dst = out.rows_mut(n * q, q);
            dst += block;
        }
        if let Some(c) = &self.cond {
            let sub = DMatrix::from_fn(c.idx.len(), x.ncols(), |i, j| x[(c.idx[i], j)]);
            let prod = &c.cov * sub;
            for (i, &r) in c.idx.iter().enumerate() {
                for j in 0..x.ncols() {
                    out[(r, j)] += prod[(i, j)];
                }
            }
        }
        out
    }

    /// Dense NQ×NQ matrix; for tests and small problems.
    pub fn dense(&self) -> DMatrix<f64> {
        let nq = self.d.len();
        self.apply(&DMatrix::identity(nq, nq))
    }
}

pub fn block(m: &DMatrix<f64>, n: usize, k: usize, q: usize) -> DMatrix<f64> {
    m.view((n * q, k * q), (q, q)).clone_owned()
}

/// blockdiag(blocks) · v without forming the block-diagonal matrix.
pub fn block_apply(blocks: &[DMatrix<f64>], v: &DMatrix<f64>) -> DMatrix<f64> {
    let q = blocks.first().map_or(0, |b| b.nrows());
    let mut out = DMatrix::zeros(v.nrows(), v.ncols());
    for (i, b) in blocks.iter().enumerate() {
        let r = b * v.rows(i * q, q);
        out.rows_mut(i * q, q).copy_from(&r);
    }
    out
}

pub fn blockdiag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let q = blocks.first().map_or(0, |b| b.nrows());
    let mut out = DMatrix::zeros(blocks.len() * q, blocks.len() * q);
    for (n, b) in blocks.iter().enumerate() {
        out.view_mut((n * q, n * q), (q, q)).copy_from(b);
    }
    out
}

/// Gradient of F(Υ) = −½tr(S⁻¹Ω) − ½log|S| (plus the sparse correction) in
/// Σ (entrywise) and in log γ².
#[derive(Clone, Debug)]
pub struct UpsilonGrad {
    pub d_sigma: DMatrix<f64>,
    pub d_loggamma: f64,
}

/// Gradient of a function of 𝕍_XX whose matrix derivative is ½G, in Σ and log γ².
pub fn kron_grad(cov: &MultiOutputCov, x: &DMatrix<f64>, g: &DMatrix<f64>) -> UpsilonGrad {
    let q = cov.q();
    let (k, dk) = cov.kernel.gram_with_grad(x, x);
    let mut d_sigma = DMatrix::zeros(q, q);
    let mut d_loggamma = 0.0;
    for nn in 0..x.nrows() {
        for mm in 0..x.nrows() {
            let b = g.view((nn * q, mm * q), (q, q));
            d_sigma += b * (0.5 * k[(nn, mm)]);
            d_loggamma += 0.5 * dk[(nn, mm)] * b.component_mul(&cov.sigma).sum();
        }
    }
    UpsilonGrad { d_sigma, d_loggamma }
}

#[derive(Clone, Debug)]
pub struct DenseBackend {
    pub n: usize,
    pub q: usize,
    pub x: DMatrix<f64>,
    pub cov: MultiOutputCov,
    pub lambdas: Vec<DMatrix<f64>>,
    pub s: DMatrix<f64>,
    pub s_inv: DMatrix<f64>,
    pub logdet: f64,
    pub jitter: f64,
    pub inv_blocks: Vec<DMatrix<f64>>,
}

impl DenseBackend {
    pub fn new(cov: &MultiOutputCov, x: &DMatrix<f64>, lambdas: &[DMatrix<f64>]) -> Result<DenseBackend> {
        let n = x.nrows();
        let q = cov.q();
        let mut s = cov.gram_dm(x, x)?;
        for (i, l) in lambdas.iter().enumerate() {
            let mut v = s.view_mut((i * q, i * q), (q, q));
            v += l;
        }
        symmetrize(&mut s);
        let ch = Chol::new(&s)?;
        let s_inv = ch.inverse();
        let inv_blocks = (0..n).map(|i| block(&s_inv, i, i, q)).collect();
        Ok(DenseBackend {
            n,
            q,
            x: x.clone(),
            cov: cov.clone(),
            lambdas: lambdas.to_vec(),
            s,
            logdet: ch.logdet(),
            jitter: ch.jitter,
            s_inv,
            inv_blocks,
        })
    }

    fn psi_sandwich_blocks(&self, psi: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let q = self.q;
        let nq = self.n * q;
        // T = S⁻¹ blockdiag(Ψ)
        let mut t = DMatrix::zeros(nq, nq);
        for (m, p) in psi.iter().enumerate() {
            let cols = self.s_inv.columns(m * q, q) * p;
            t.columns_mut(m * q, q).copy_from(&cols);
        }
        (0..self.n)
            .map(|i| {
                let mut b = t.rows(i * q, q) * self.s_inv.columns(i * q, q);
                symmetrize(&mut b);
                b
            })
            .collect()
    }

    fn upsilon_grad(&self, om: &Omega) -> Result<UpsilonGrad> {
        let q = self.q;
        let a = &self.s_inv * &om.d;
        let mut g = -&self.s_inv;
        if om.psi.iter().any(|p| p.iter().any(|v| *v != 0.0)) {
            let mut t = DMatrix::zeros(self.n * q, self.n * q);
            for (m, p) in om.psi.iter().enumerate() {
                let cols = self.s_inv.columns(m * q, q) * p;
                t.columns_mut(m * q, q).copy_from(&cols);
            }
            g += &t * &self.s_inv;
        }
        g.ger(1.0, &a, &a, 1.0);
        if let Some(c) = &om.cond {
            let cols = DMatrix::from_fn(self.n * q, c.idx.len(), |i, j| self.s_inv[(i, c.idx[j])]);
            g += &cols * &c.cov * cols.transpose();
        }
        Ok(kron_grad(&self.cov, &self.x, &g))
    }

    fn predict_parts(
        &self,
        xq: &DMatrix<f64>,
        om: &Omega,
    ) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        let q = self.q;
        let mut out = Vec::with_capacity(xq.nrows());
        let chunk = 128;
        let mut start = 0;
        while start < xq.nrows() {
            let len = chunk.min(xq.nrows() - start);
            let xs = xq.rows(start, len).clone_owned();
            let vq = self.cov.gram_dm(&xs, &self.x)?;
            let a = &vq * &self.s_inv;
            let mean = &a * &om.d;
            let cond_cols = om.cond.as_ref().map(|c| {
                let cols = DMatrix::from_fn(a.nrows(), c.idx.len(), |i, j| a[(i, c.idx[j])]);
                (cols, &c.cov)
            });
            for i in 0..len {
                let xi = xs.row(i).iter().copied().collect::<Vec<_>>();
                let kxx = self.cov.kernel.eval(&xi, &xi);
                let ai = a.rows(i * q, q);
                let mut c = &self.cov.sigma * kxx - ai * vq.rows(i * q, q).transpose();
                for (m, p) in om.psi.iter().enumerate() {
                    let am = ai.columns(m * q, q);
                    c += am * p * am.transpose();
                }
                if let Some((cols, cc)) = &cond_cols {
                    let r = cols.rows(i * q, q);
                    c += r * *cc * r.transpose();
                }
                symmetrize(&mut c);
                out.push((mean.rows(i * q, q).clone_owned(), c));
            }
            start += len;
        }
        Ok(out)
    }

    fn shifted_mean(&self, p_half: &[DMatrix<f64>], w: &DVector<f64>) -> Result<DVector<f64>> {
        let q = self.q;
        let nq = self.n * q;
        let mut left = DMatrix::zeros(nq, nq);
        for (i, p) in p_half.iter().enumerate() {
            left.rows_mut(i * q, q).copy_from(&(p * self.s.rows(i * q, q)));
        }
        let mut m = DMatrix::zeros(nq, nq);
        for (j, p) in p_half.iter().enumerate() {
            m.columns_mut(j * q, q).copy_from(&(left.columns(j * q, q) * p));
        }
        for i in 0..nq {
            m[(i, i)] += 1.0;
        }
        symmetrize(&mut m);
        let x = Chol::new(&m)?.solve_vec(w);
        Ok(&self.s * block_apply(p_half, &DMatrix::from_column_slice(nq, 1, x.as_slice())).column(0))
    }
}

#[derive(Clone, Debug)]
pub enum Backend {
    Dense(DenseBackend),
    Sparse(SparseBackend),
}

impl Backend {
    pub fn dense(cov: &MultiOutputCov, x: &DMatrix<f64>, lambdas: &[DMatrix<f64>]) -> Result<Backend> {
        Ok(Backend::Dense(DenseBackend::new(cov, x, lambdas)?))
    }

    pub fn n(&self) -> usize {
        match self {
            Backend::Dense(b) => b.n,
            Backend::Sparse(b) => b.n,
        }
    }

    pub fn q(&self) -> usize {
        match self {
            Backend::Dense(b) => b.q,
            Backend::Sparse(b) => b.q,
        }
    }

    pub fn lambdas(&self) -> &[DMatrix<f64>] {
        match self {
            Backend::Dense(b) => &b.lambdas,
            Backend::Sparse(b) => &b.lambdas,
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, Backend::Sparse(_))
    }

    pub fn jitter(&self) -> f64 {
        match self {
            Backend::Dense(b) => b.jitter,
            Backend::Sparse(b) => b.jitter,
        }
    }

    /// log|S| (the Nyström surrogate for the sparse backend).
    pub fn logdet(&self) -> f64 {
        match self {
            Backend::Dense(b) => b.logdet,
            Backend::Sparse(b) => b.logdet,
        }
    }

    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Backend::Dense(b) => &b.s_inv * v,
            Backend::Sparse(b) => b.solve(v),
        }
    }

    pub fn solve_mat(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Backend::Dense(b) => &b.s_inv * v,
            Backend::Sparse(b) => b.solve_mat(v),
        }
    }

    /// Diagonal Q×Q blocks of S⁻¹.
    pub fn inv_blocks(&self) -> &[DMatrix<f64>] {
        match self {
            Backend::Dense(b) => &b.inv_blocks,
            Backend::Sparse(b) => &b.inv_blocks,
        }
    }

    /// Columns of S⁻¹ at the given coordinates.
    pub fn inv_columns(&self, idx: &[usize]) -> DMatrix<f64> {
        let nq = self.n() * self.q();
        match self {
            Backend::Dense(b) => DMatrix::from_fn(nq, idx.len(), |i, j| b.s_inv[(i, idx[j])]),
            Backend::Sparse(b) => {
                let mut e = DMatrix::zeros(nq, idx.len());
                for (j, &i) in idx.iter().enumerate() {
                    e[(i, j)] = 1.0;
                }
                b.solve_mat(&e)
            }
        }
    }

    /// Diagonal blocks of 𝕍 − 𝕍̃ (zero for the dense backend).
    pub fn deficit_blocks(&self) -> Option<&[DMatrix<f64>]> {
        match self {
            Backend::Dense(_) => None,
            Backend::Sparse(b) => Some(&b.deficit),
        }
    }

    /// −½Σₙ tr(Λₙ⁻¹(𝕍ₙₙ − 𝕍̃ₙₙ)); zero for the dense backend.
    pub fn vfe_correction(&self) -> f64 {
        match self {
            Backend::Dense(_) => 0.0,
            Backend::Sparse(b) => b.correction,
        }
    }

    /// Diagonal blocks of S⁻¹ blockdiag(Ψ) S⁻¹.
    pub fn psi_sandwich_blocks(&self, psi: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        if psi.iter().all(|p| p.iter().all(|v| *v == 0.0)) {
            let q = self.q();
            return vec![DMatrix::zeros(q, q); self.n()];
        }
        match self {
            Backend::Dense(b) => b.psi_sandwich_blocks(psi),
            Backend::Sparse(b) => b.psi_sandwich_blocks(psi),
        }
    }

    /// tr(S⁻¹Ω).
    pub fn trace_inv_omega(&self, om: &Omega) -> f64 {
        let mut t = om.d.dot(&self.solve(&om.d));
        for (ib, p) in self.inv_blocks().iter().zip(&om.psi) {
            t += ib.component_mul(p).sum();
        }
        if let Some(c) = &om.cond {
            let cols = self.inv_columns(&c.idx);
            let sub = DMatrix::from_fn(c.idx.len(), c.idx.len(), |i, j| cols[(c.idx[i], j)]);
            t += sub.component_mul(&c.cov).sum();
        }
        t
    }

    /// Per-datum Mₙ = 𝔸ₙ + 𝔹ₙΩ𝔹ₙᵀ.
    pub fn m_blocks(&self, om: &Omega) -> Vec<DMatrix<f64>> {
        let q = self.q();
        let a = self.solve(&om.d);
        let sand = self.psi_sandwich_blocks(&om.psi);
        let cond = om.cond.as_ref().map(|c| (self.inv_columns(&c.idx), &c.cov));
        let deficit = self.deficit_blocks();
        (0..self.n())
            .map(|n| {
                let l = &self.lambdas()[n];
                let an = a.rows(n * q, q);
                let mut inner = &an * an.transpose() + &sand[n];
                if let Some((cols, cc)) = &cond {
                    let r = cols.rows(n * q, q);
                    inner += r * *cc * r.transpose();
                }
                inner -= &self.inv_blocks()[n];
                let mut m = l + l * inner * l;
                if let Some(def) = deficit {
                    m += &def[n];
                }
                symmetrize(&mut m);
                m
            })
            .collect()
    }

    /// Explicit 𝔸ₙ and 𝔹ₙ (Q×NQ) for every datum; O((NQ)²) memory.
    pub fn mstep_kernels(&self) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let q = self.q();
        let nq = self.n() * q;
        let s_inv = self.solve_mat(&DMatrix::identity(nq, nq));
        let deficit = self.deficit_blocks();
        let mut a_blocks = Vec::with_capacity(self.n());
        let mut b_blocks = Vec::with_capacity(self.n());
        for n in 0..self.n() {
            let l = &self.lambdas()[n];
            let mut a = l - l * &self.inv_blocks()[n] * l;
            if let Some(def) = deficit {
                a += &def[n];
            }
            symmetrize(&mut a);
            a_blocks.push(a);
            b_blocks.push(l * s_inv.rows(n * q, q));
        }
        (a_blocks, b_blocks)
    }

    pub fn upsilon_grad(&self, om: &Omega) -> Result<UpsilonGrad> {
        match self {
            Backend::Dense(b) => b.upsilon_grad(om),
            Backend::Sparse(b) => b.upsilon_grad(om),
        }
    }

    /// Per query point: (𝕍_xX S⁻¹ d, ν̄(x)).
    pub fn predict_parts(&self, xq: &DMatrix<f64>, om: &Omega) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        match self {
            Backend::Dense(b) => b.predict_parts(xq, om),
            Backend::Sparse(b) => b.predict_parts(xq, om),
        }
    }

    /// S P½ (I + P½ S P½)⁻¹ w for block-diagonal PSD P½.
    pub fn shifted_mean(&self, p_half: &[DMatrix<f64>], w: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Backend::Dense(b) => b.shifted_mean(p_half, w),
            Backend::Sparse(b) => b.shifted_mean(p_half, w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_frob_err;
    use crate::testutil::*;
    use crate::vem::estep::upsilon_objective;
    use crate::vem::mstep::mstep_kernels;
    use crate::vem::upsilon;

    struct Instance {
        cov: MultiOutputCov,
        x: DMatrix<f64>,
        lambdas: Vec<DMatrix<f64>>,
        om: Omega,
    }

    fn instance(seed: u64, n: usize, q: usize, with_cond: bool) -> Instance {
        let mut r = rng(seed);
        let cov = random_cov(q, &mut r);
        let x = random_x(n, 1, &mut r);
        let lambdas = random_lambdas(n, q, &mut r);
        let om = random_omega(n, q, with_cond, &mut r);
        Instance { cov, x, lambdas, om }
    }

    fn explicit_s(i: &Instance) -> DMatrix<f64> {
        blockdiag(&i.lambdas) + i.cov.gram_dm(&i.x, &i.x).unwrap()
    }

    #[test]
    fn dense_inverse_and_logdet() {
        let i = instance(1, 7, 2, false);
        let b = DenseBackend::new(&i.cov, &i.x, &i.lambdas).unwrap();
        let s = explicit_s(&i);
        let eye = DMatrix::<f64>::identity(14, 14);
        assert!((&b.s_inv * &s - &eye).norm() < 1e-10);
        let lu = s.clone().lu().determinant().ln();
        assert!((b.logdet - lu).abs() < 1e-10);
        for (n, blk) in b.inv_blocks.iter().enumerate() {
            assert_eq!(blk, &block(&b.s_inv, n, n, 2));
        }
    }

    #[test]
    fn m_blocks_match_explicit_kernels() {
        for seed in 0..4 {
            let i = instance(seed, 6, 2, seed % 2 == 0);
            let b = Backend::dense(&i.cov, &i.x, &i.lambdas).unwrap();
            let k = mstep_kernels(&b, &i.om);
            for (fast, slow) in b.m_blocks(&i.om).iter().zip(k.m_blocks()) {
                assert!(rel_frob_err(fast, &slow) < 1e-10);
            }
        }
    }

    #[test]
    fn m_blocks_match_kronecker_assembly() {
        let i = instance(9, 5, 3, true);
        let b = Backend::dense(&i.cov, &i.x, &i.lambdas).unwrap();
        let s = explicit_s(&i);
        let sinv = s.clone().try_inverse().unwrap();
        let om = i.om.dense();
        let lam = blockdiag(&i.lambdas);
        let full = &lam - &lam * &sinv * &lam + &lam * &sinv * &om * &sinv * &lam;
        for (n, m) in b.m_blocks(&i.om).iter().enumerate() {
            assert!(rel_frob_err(m, &block(&full, n, n, 3)) < 1e-9);
        }
    }

    #[test]
    fn trace_inv_omega_matches_dense() {
        let i = instance(3, 6, 2, true);
        let b = Backend::dense(&i.cov, &i.x, &i.lambdas).unwrap();
        let sinv = explicit_s(&i).try_inverse().unwrap();
        let reference = (&sinv * i.om.dense()).trace();
        assert!(rel_err(b.trace_inv_omega(&i.om), reference) < 1e-10);
    }

    #[test]
    fn upsilon_gradient_matches_finite_differences() {
        for (seed, q) in [(0, 1), (1, 2), (2, 3)] {
            let i = instance(seed, 6, q, seed == 1);
            let p = upsilon::to_params(&i.cov);
            let f = |v: &[f64]| upsilon_objective(&i.cov, &i.x, None, &i.lambdas, &i.om, v).unwrap().0;
            let (_, g) = upsilon_objective(&i.cov, &i.x, None, &i.lambdas, &i.om, &p).unwrap();
            for k in 0..p.len() {
                let fd = central_diff(f, &p, k, 1e-5);
                assert!(rel_err(g[k], fd) < 1e-5, "q={q} k={k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn upsilon_gradient_vanishes_when_omega_equals_s() {
        let i = instance(4, 5, 2, false);
        let s = explicit_s(&i);
        let om = Omega {
            d: DVector::zeros(10),
            psi: vec![DMatrix::zeros(2, 2); 5],
            cond: Some(CondPart { idx: (0..10).collect(), cov: s }),
        };
        let b = Backend::dense(&i.cov, &i.x, &i.lambdas).unwrap();
        let g = b.upsilon_grad(&om).unwrap();
        assert!(g.d_sigma.norm() < 1e-9);
        assert!(g.d_loggamma.abs() < 1e-9);
    }

    #[test]
    fn shifted_mean_matches_direct_formula() {
        let mut r = rng(5);
        let i = instance(5, 6, 2, false);
        let halves: Vec<DMatrix<f64>> = (0..6).map(|_| crate::linalg::psd_sqrt(&random_spd(2, 0.1, &mut r))).collect();
        let w = DVector::from_fn(12, |k, _| (k as f64).sin());
        let b = Backend::dense(&i.cov, &i.x, &i.lambdas).unwrap();
        let s = explicit_s(&i);
        let ph = blockdiag(&halves);
        let m = DMatrix::<f64>::identity(12, 12) + &ph * &s * &ph;
        let reference = &s * &ph * m.try_inverse().unwrap() * &w;
        let got = b.shifted_mean(&halves, &w).unwrap();
        assert!((&got - &reference).norm() / reference.norm() < 1e-10);
    }

    #[test]
    fn predictive_parts_match_dense_conditioning() {
        let i = instance(6, 5, 2, false);
        let b = Backend::dense(&i.cov, &i.x, &i.lambdas).unwrap();
        let xq = DMatrix::from_row_slice(2, 1, &[0.3, 50.0]);
        let parts = b.predict_parts(&xq, &i.om).unwrap();
        let sinv = explicit_s(&i).try_inverse().unwrap();
        let vqx = i.cov.gram_dm(&xq, &i.x).unwrap();
        let vqq = i.cov.gram_dm(&xq, &xq).unwrap();
        let a = &vqx * &sinv;
        let mean = &a * &i.om.d;
        let psi = blockdiag(&i.om.psi);
        let cov = &vqq - &a * vqx.transpose() + &a * psi * a.transpose();
        for (k, (m, c)) in parts.iter().enumerate() {
            assert!((m - mean.rows(2 * k, 2)).norm() < 1e-10);
            assert!(rel_frob_err(c, &block(&cov, k, k, 2)) < 1e-10);
        }
        assert!(parts[1].0.norm() < 1e-10);
        assert!(rel_frob_err(&parts[1].1, &i.cov.sigma) < 1e-10);
    }
}
