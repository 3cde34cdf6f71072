//! Structured linear algebra for the batch solves.
//!
//! Two system shapes appear in this crate: symmetric positive-definite
//! block-tridiagonal systems (the trajectory normal equations) and arrowhead
//! systems (trajectory block plus block-diagonal landmark block with sparse
//! coupling). Both are factored by a block Cholesky decomposition whose cost
//! is linear in the number of trajectory knots; the landmark reduction adds
//! O(L^3 + L^2 N).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative pivot tolerance: a scalar Cholesky pivot below this fraction of
/// the largest diagonal entry of the source system is treated as zero.
const PIVOT_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorStage {
    Trajectory,
    Landmark,
}

#[derive(Debug, Error)]
pub enum BlocklinError {
    #[error("matrix not positive definite at {stage:?} block {block}")]
    NotPositiveDefinite { stage: FactorStage, block: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Symmetric block-tridiagonal matrix, stored as dense per-knot blocks.
///
/// `offdiag[n]` is the *lower* block coupling knots `n` and `n + 1`, i.e. the
/// block at block-row `n + 1`, block-column `n`. The upper counterpart is its
/// transpose.
#[derive(Debug, Clone)]
pub struct BlockTridiagonalSystem {
    block_dim: usize,
    diag: Vec<DMatrix<f64>>,
    offdiag: Vec<DMatrix<f64>>,
}

impl BlockTridiagonalSystem {
    pub fn zeros(block_dim: usize, n_blocks: usize) -> Self {
        assert!(block_dim > 0 && n_blocks > 0);
        Self {
            block_dim,
            diag: vec![DMatrix::zeros(block_dim, block_dim); n_blocks],
            offdiag: vec![DMatrix::zeros(block_dim, block_dim); n_blocks - 1],
        }
    }

    pub fn from_blocks(diag: Vec<DMatrix<f64>>, offdiag: Vec<DMatrix<f64>>) -> Self {
        assert!(!diag.is_empty());
        assert_eq!(offdiag.len(), diag.len() - 1);
        let bd = diag[0].nrows();
        for d in &diag {
            assert_eq!((d.nrows(), d.ncols()), (bd, bd));
        }
        for o in &offdiag {
            assert_eq!((o.nrows(), o.ncols()), (bd, bd));
        }
        Self { block_dim: bd, diag, offdiag }
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn n_blocks(&self) -> usize {
        self.diag.len()
    }

    /// Total scalar dimension.
    pub fn dim(&self) -> usize {
        self.block_dim * self.diag.len()
    }

    pub fn diag_block(&self, n: usize) -> &DMatrix<f64> {
        &self.diag[n]
    }

    pub fn offdiag_block(&self, n: usize) -> &DMatrix<f64> {
        &self.offdiag[n]
    }

    pub fn add_to_diag(&mut self, n: usize, m: &DMatrix<f64>) {
        self.diag[n] += m;
    }

    /// Adds to the lower block at (n + 1, n).
    pub fn add_to_offdiag(&mut self, n: usize, m: &DMatrix<f64>) {
        self.offdiag[n] += m;
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.diag
            .iter()
            .all(|d| (d - d.transpose()).amax() <= tol)
    }

    /// Dense assembly, for oracles and small-instance checks only.
    pub fn assemble_dense(&self) -> DMatrix<f64> {
        let bd = self.block_dim;
        let mut full = DMatrix::zeros(self.dim(), self.dim());
        for (n, d) in self.diag.iter().enumerate() {
            full.view_mut((n * bd, n * bd), (bd, bd)).copy_from(d);
        }
        for (n, o) in self.offdiag.iter().enumerate() {
            full.view_mut(((n + 1) * bd, n * bd), (bd, bd)).copy_from(o);
            full.view_mut((n * bd, (n + 1) * bd), (bd, bd))
                .copy_from(&o.transpose());
        }
        full
    }

    /// y = W x without assembling the dense matrix.
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let bd = self.block_dim;
        let n = self.n_blocks();
        let mut y = DVector::zeros(self.dim());
        for i in 0..n {
            let xi = x.rows(i * bd, bd);
            let mut yi = self.diag[i].clone() * xi;
            if i > 0 {
                yi += &self.offdiag[i - 1] * x.rows((i - 1) * bd, bd);
            }
            if i + 1 < n {
                yi += self.offdiag[i].transpose() * x.rows((i + 1) * bd, bd);
            }
            y.rows_mut(i * bd, bd).copy_from(&yi);
        }
        y
    }

    fn max_diag_entry(&self) -> f64 {
        self.diag
            .iter()
            .flat_map(|d| (0..self.block_dim).map(move |i| d[(i, i)].abs()))
            .fold(0.0, f64::max)
    }

    /// Block Cholesky factorization W = L L^T with L lower block-bidiagonal.
    pub fn cholesky(&self) -> Result<BlockCholesky, BlocklinError> {
        let tol = PIVOT_REL_TOL * self.max_diag_entry().max(f64::MIN_POSITIVE);
        let n = self.n_blocks();
        let mut diag = Vec::with_capacity(n);
        let mut offdiag = Vec::with_capacity(n.saturating_sub(1));
        let mut schur = self.diag[0].clone();
        for i in 0..n {
            let l = dense_chol_lower(&schur, tol).ok_or(BlocklinError::NotPositiveDefinite {
                stage: FactorStage::Trajectory,
                block: i,
            })?;
            if i + 1 < n {
                // E_i solves E_i L_i^T = W_{i+1,i}
                let e = solve_upper_right(&l, &self.offdiag[i]);
                schur = &self.diag[i + 1] - &e * e.transpose();
                offdiag.push(e);
            }
            diag.push(l);
        }
        Ok(BlockCholesky { block_dim: self.block_dim, diag, offdiag, arrow: None })
    }
}

/// STEAM normal equations: block-tridiagonal trajectory part, block-diagonal
/// landmark part, sparse coupling, and the stacked right-hand side.
#[derive(Debug, Clone)]
pub struct ArrowheadSystem {
    pub traj: BlockTridiagonalSystem,
    pub lm_dim: usize,
    pub lm_diag: Vec<DMatrix<f64>>,
    /// (landmark index, knot index) -> lm_dim x block_dim coupling block.
    pub coupling: BTreeMap<(usize, usize), DMatrix<f64>>,
    pub rhs_traj: DVector<f64>,
    pub rhs_lm: DVector<f64>,
}

impl ArrowheadSystem {
    pub fn new(traj: BlockTridiagonalSystem, lm_dim: usize, n_landmarks: usize) -> Self {
        let dim_x = traj.dim();
        Self {
            traj,
            lm_dim,
            lm_diag: vec![DMatrix::zeros(lm_dim, lm_dim); n_landmarks],
            coupling: BTreeMap::new(),
            rhs_traj: DVector::zeros(dim_x),
            rhs_lm: DVector::zeros(lm_dim * n_landmarks),
        }
    }

    pub fn n_landmarks(&self) -> usize {
        self.lm_diag.len()
    }

    pub fn add_coupling(&mut self, landmark: usize, knot: usize, m: &DMatrix<f64>) {
        let bd = self.traj.block_dim();
        assert_eq!((m.nrows(), m.ncols()), (self.lm_dim, bd));
        self.coupling
            .entry((landmark, knot))
            .and_modify(|b| *b += m)
            .or_insert_with(|| m.clone());
    }

    /// Three-stage factorization: trajectory block, coupling reduction,
    /// landmark Schur complement.
    pub fn cholesky(&self) -> Result<BlockCholesky, BlocklinError> {
        let mut chol = self.traj.cholesky()?;
        let l = self.n_landmarks();
        if l == 0 {
            return Ok(chol);
        }
        let bd = self.traj.block_dim();
        let nb = self.traj.n_blocks();
        let ld = self.lm_dim;
        // V_lx solves V_lx V_xx^T = W_lx, one forward sweep per landmark.
        let mut v_lx = DMatrix::zeros(l * ld, nb * bd);
        for i in 0..l {
            let mut prev = DMatrix::zeros(ld, bd);
            for n in 0..nb {
                let mut b = match self.coupling.get(&(i, n)) {
                    Some(blk) => blk.clone(),
                    None => DMatrix::zeros(ld, bd),
                };
                if n > 0 {
                    b -= &prev * chol.offdiag[n - 1].transpose();
                }
                let x = solve_upper_right(&chol.diag[n], &b);
                v_lx.view_mut((i * ld, n * bd), (ld, bd)).copy_from(&x);
                prev = x;
            }
        }
        // Landmark Schur complement S = W_ll - V_lx V_lx^T.
        let mut schur = DMatrix::zeros(l * ld, l * ld);
        for (i, d) in self.lm_diag.iter().enumerate() {
            schur.view_mut((i * ld, i * ld), (ld, ld)).copy_from(d);
        }
        schur -= &v_lx * v_lx.transpose();
        let tol = PIVOT_REL_TOL
            * self
                .lm_diag
                .iter()
                .flat_map(|d| (0..ld).map(move |i| d[(i, i)].abs()))
                .fold(self.traj.max_diag_entry(), f64::max)
                .max(f64::MIN_POSITIVE);
        let v_ll = dense_chol_lower_report(&schur, tol).map_err(|pivot| {
            BlocklinError::NotPositiveDefinite { stage: FactorStage::Landmark, block: pivot / ld }
        })?;
        chol.arrow = Some(ArrowFactor { lm_dim: ld, v_lx, v_ll });
        Ok(chol)
    }

    /// Solves the full arrowhead system for (delta_x, delta_lm).
    pub fn solve(&self) -> Result<(DVector<f64>, DVector<f64>), BlocklinError> {
        let chol = self.cholesky()?;
        chol.solve_arrowhead(&self.rhs_traj, &self.rhs_lm)
    }
}

/// Landmark portion of an arrowhead factor.
#[derive(Debug, Clone)]
pub struct ArrowFactor {
    lm_dim: usize,
    /// Dense lm-by-trajectory factor block (L*lm_dim x N*block_dim).
    v_lx: DMatrix<f64>,
    /// Lower Cholesky factor of the landmark Schur complement.
    v_ll: DMatrix<f64>,
}

/// Lower block Cholesky factor: `diag[n]` are lower-triangular blocks,
/// `offdiag[n]` sits at block position (n + 1, n). `arrow` carries the
/// landmark stages of an arrowhead factorization when present.
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    block_dim: usize,
    diag: Vec<DMatrix<f64>>,
    offdiag: Vec<DMatrix<f64>>,
    arrow: Option<ArrowFactor>,
}

/// Block-tridiagonal portion of a matrix inverse (posterior covariance).
///
/// `offdiag[n]` is the lower block at (n + 1, n); the (n, n + 1) block is its
/// transpose.
#[derive(Debug, Clone)]
pub struct CovBlocks {
    pub diag: Vec<DMatrix<f64>>,
    pub offdiag: Vec<DMatrix<f64>>,
}

impl BlockCholesky {
    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn n_blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn has_landmarks(&self) -> bool {
        self.arrow.is_some()
    }

    /// Number of stored scalars; the factor is linear in the number of knots
    /// for a fixed landmark count.
    pub fn stored_scalars(&self) -> usize {
        let bd2 = self.block_dim * self.block_dim;
        let mut n = (self.diag.len() + self.offdiag.len()) * bd2;
        if let Some(a) = &self.arrow {
            n += a.v_lx.len() + a.v_ll.len();
        }
        n
    }

    /// log |W| of the factored trajectory system, from the factor diagonals.
    pub fn log_det(&self) -> f64 {
        let mut out = 0.0;
        for d in &self.diag {
            for i in 0..d.nrows() {
                out += 2.0 * d[(i, i)].ln();
            }
        }
        if let Some(a) = &self.arrow {
            for i in 0..a.v_ll.nrows() {
                out += 2.0 * a.v_ll[(i, i)].ln();
            }
        }
        out
    }

    /// Reconstructs V for small-instance verification.
    pub fn assemble_dense_factor(&self) -> DMatrix<f64> {
        let bd = self.block_dim;
        let nb = self.diag.len();
        let dim_x = bd * nb;
        let dim_l = self.arrow.as_ref().map_or(0, |a| a.v_ll.nrows());
        let mut v = DMatrix::zeros(dim_x + dim_l, dim_x + dim_l);
        for (n, d) in self.diag.iter().enumerate() {
            v.view_mut((n * bd, n * bd), (bd, bd)).copy_from(d);
        }
        for (n, e) in self.offdiag.iter().enumerate() {
            v.view_mut(((n + 1) * bd, n * bd), (bd, bd)).copy_from(e);
        }
        if let Some(a) = &self.arrow {
            v.view_mut((dim_x, 0), (dim_l, dim_x)).copy_from(&a.v_lx);
            v.view_mut((dim_x, dim_x), (dim_l, dim_l)).copy_from(&a.v_ll);
        }
        v
    }

    /// Forward-backward solve of the trajectory-only system W x = rhs.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, BlocklinError> {
        let bd = self.block_dim;
        let nb = self.diag.len();
        if rhs.len() != bd * nb {
            return Err(BlocklinError::DimensionMismatch { expected: bd * nb, got: rhs.len() });
        }
        let mut d = DVector::zeros(rhs.len());
        for n in 0..nb {
            let mut b = rhs.rows(n * bd, bd).clone_owned();
            if n > 0 {
                b -= &self.offdiag[n - 1] * d.rows((n - 1) * bd, bd);
            }
            d.rows_mut(n * bd, bd)
                .copy_from(&solve_lower_vec(&self.diag[n], &b));
        }
        let mut x = DVector::zeros(rhs.len());
        for n in (0..nb).rev() {
            let mut b = d.rows(n * bd, bd).clone_owned();
            if n + 1 < nb {
                b -= self.offdiag[n].transpose() * x.rows((n + 1) * bd, bd);
            }
            x.rows_mut(n * bd, bd)
                .copy_from(&solve_lower_transpose_vec(&self.diag[n], &b));
        }
        Ok(x)
    }

    /// Forward-backward solve of the full arrowhead system.
    pub fn solve_arrowhead(
        &self,
        rhs_traj: &DVector<f64>,
        rhs_lm: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), BlocklinError> {
        let arrow = match &self.arrow {
            Some(a) => a,
            None => {
                if !rhs_lm.is_empty() {
                    return Err(BlocklinError::DimensionMismatch { expected: 0, got: rhs_lm.len() });
                }
                return Ok((self.solve(rhs_traj)?, DVector::zeros(0)));
            }
        };
        let bd = self.block_dim;
        let nb = self.diag.len();
        if rhs_traj.len() != bd * nb {
            return Err(BlocklinError::DimensionMismatch { expected: bd * nb, got: rhs_traj.len() });
        }
        if rhs_lm.len() != arrow.v_ll.nrows() {
            return Err(BlocklinError::DimensionMismatch {
                expected: arrow.v_ll.nrows(),
                got: rhs_lm.len(),
            });
        }
        // Forward pass V d = b.
        let mut d_x = DVector::zeros(rhs_traj.len());
        for n in 0..nb {
            let mut b = rhs_traj.rows(n * bd, bd).clone_owned();
            if n > 0 {
                b -= &self.offdiag[n - 1] * d_x.rows((n - 1) * bd, bd);
            }
            d_x.rows_mut(n * bd, bd)
                .copy_from(&solve_lower_vec(&self.diag[n], &b));
        }
        let d_l = solve_lower_vec(&arrow.v_ll, &(rhs_lm - &arrow.v_lx * &d_x));
        // Backward pass V^T z = d.
        let delta_lm = solve_lower_transpose_vec(&arrow.v_ll, &d_l);
        let adj = &d_x - arrow.v_lx.transpose() * &delta_lm;
        let mut delta_x = DVector::zeros(rhs_traj.len());
        for n in (0..nb).rev() {
            let mut b = adj.rows(n * bd, bd).clone_owned();
            if n + 1 < nb {
                b -= self.offdiag[n].transpose() * delta_x.rows((n + 1) * bd, bd);
            }
            delta_x
                .rows_mut(n * bd, bd)
                .copy_from(&solve_lower_transpose_vec(&self.diag[n], &b));
        }
        Ok((delta_x, delta_lm))
    }

    /// Block-tridiagonal portion of W^{-1} for a trajectory-only factor,
    /// by backward recursion on the Cholesky blocks (O(N)).
    pub fn inverse_blocks(&self) -> CovBlocks {
        let nb = self.diag.len();
        let mut diag = vec![DMatrix::zeros(0, 0); nb];
        let mut offdiag = vec![DMatrix::zeros(0, 0); nb.saturating_sub(1)];
        // Sigma_NN = L_N^{-T} L_N^{-1}
        let linv = lower_inverse(&self.diag[nb - 1]);
        diag[nb - 1] = linv.transpose() * &linv;
        for n in (0..nb.saturating_sub(1)).rev() {
            let linv = lower_inverse(&self.diag[n]);
            // Sigma_{n,n+1} = -L_n^{-T} E_n^T Sigma_{n+1,n+1}
            let upper = -linv.transpose() * self.offdiag[n].transpose() * &diag[n + 1];
            // Sigma_nn = L_n^{-T} L_n^{-1} - Sigma_{n,n+1} E_n L_n^{-1}
            // (the second term is +L^{-T} E^T Sigma_{n+1,n+1} E L^{-1}).
            let mut s = linv.transpose() * &linv;
            s -= &upper * &self.offdiag[n] * &linv;
            s = (&s + s.transpose()) * 0.5;
            offdiag[n] = upper.transpose();
            diag[n] = s;
        }
        CovBlocks { diag, offdiag }
    }

    /// Block-tridiagonal trajectory portion of the full arrowhead inverse,
    /// plus per-landmark marginal covariance blocks.
    ///
    /// With V = [[Vxx, 0], [Vlx, Vll]], the trajectory block of W^{-1} is
    /// Vxx^{-T} Vxx^{-1} + T^T T with T = Vll^{-1} Vlx Vxx^{-1}, and the
    /// landmark block is Vll^{-T} Vll^{-1}. Never materializes Wxx^{-1}.
    pub fn inverse_blocks_steam(&self) -> (CovBlocks, Vec<DMatrix<f64>>) {
        let mut base = self.inverse_blocks();
        let arrow = match &self.arrow {
            Some(a) => a,
            None => return (base, Vec::new()),
        };
        let bd = self.block_dim;
        let nb = self.diag.len();
        let ld = arrow.lm_dim;
        let l = arrow.v_ll.nrows() / ld;
        // U solves U Vxx = Vlx (backward sweep over block columns).
        let mut u = DMatrix::zeros(l * ld, nb * bd);
        for n in (0..nb).rev() {
            let mut b = arrow.v_lx.columns(n * bd, bd).clone_owned();
            if n + 1 < nb {
                b -= u.columns((n + 1) * bd, bd) * &self.offdiag[n];
            }
            let x = solve_lower_right(&self.diag[n], &b);
            u.columns_mut(n * bd, bd).copy_from(&x);
        }
        let t = solve_lower_mat(&arrow.v_ll, &u);
        for n in 0..nb {
            let tn = t.columns(n * bd, bd);
            base.diag[n] += tn.transpose() * tn;
            if n + 1 < nb {
                let tn1 = t.columns((n + 1) * bd, bd);
                base.offdiag[n] += tn1.transpose() * tn;
            }
        }
        let k = lower_inverse(&arrow.v_ll);
        let lm_cov_full = k.transpose() * &k;
        let lm_cov = (0..l)
            .map(|i| lm_cov_full.view((i * ld, i * ld), (ld, ld)).clone_owned())
            .collect();
        (base, lm_cov)
    }
}

/// Lower-triangular Cholesky of a dense symmetric matrix; `None` when a pivot
/// falls below `tol`.
fn dense_chol_lower(m: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    dense_chol_lower_report(m, tol).ok()
}

fn dense_chol_lower_report(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>, usize> {
    let n = m.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut s = m[(j, j)];
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if s < tol {
            return Err(j);
        }
        let piv = s.sqrt();
        l[(j, j)] = piv;
        for i in (j + 1)..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / piv;
        }
    }
    Ok(l)
}

/// Solves L x = b for lower-triangular L.
fn solve_lower_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        for k in 0..i {
            let v = x[k];
            x[i] -= l[(i, k)] * v;
        }
        x[i] /= l[(i, i)];
    }
    x
}

/// Solves L^T x = b for lower-triangular L.
fn solve_lower_transpose_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let v = x[k];
            x[i] -= l[(k, i)] * v;
        }
        x[i] /= l[(i, i)];
    }
    x
}

/// Solves L X = B columnwise for lower-triangular L.
fn solve_lower_mat(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    for c in 0..b.ncols() {
        let col = solve_lower_vec(l, &x.column(c).clone_owned());
        x.column_mut(c).copy_from(&col);
    }
    x
}

/// Solves X L^T = B (right triangular solve), i.e. X = B L^{-T}.
fn solve_upper_right(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for j in 0..n {
        for k in 0..j {
            let coeff = l[(j, k)];
            for r in 0..x.nrows() {
                let v = x[(r, k)];
                x[(r, j)] -= coeff * v;
            }
        }
        let piv = l[(j, j)];
        for r in 0..x.nrows() {
            x[(r, j)] /= piv;
        }
    }
    x
}

/// Solves X L = B, i.e. X = B L^{-1}.
fn solve_lower_right(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for j in (0..n).rev() {
        let piv = l[(j, j)];
        for r in 0..x.nrows() {
            x[(r, j)] /= piv;
        }
        for k in 0..j {
            let coeff = l[(j, k)];
            for r in 0..x.nrows() {
                let v = x[(r, j)];
                x[(r, k)] -= coeff * v;
            }
        }
    }
    x
}

/// Explicit inverse of a small lower-triangular block.
fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    solve_lower_mat(l, &DMatrix::identity(n, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn random_spd_tridiag(seed: u64, bd: usize, nb: usize) -> BlockTridiagonalSystem {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut sys = BlockTridiagonalSystem::zeros(bd, nb);
        // Diagonally dominant random symmetric blocks.
        for n in 0..nb {
            let a = DMatrix::from_fn(bd, bd, |_, _| rng.gen_range(-1.0..1.0));
            let spd = &a * a.transpose() + DMatrix::identity(bd, bd) * (bd as f64 * 4.0);
            sys.add_to_diag(n, &spd);
        }
        for n in 0..nb - 1 {
            let o = DMatrix::from_fn(bd, bd, |_, _| rng.gen_range(-0.5..0.5));
            sys.add_to_offdiag(n, &o);
        }
        sys
    }

    #[test]
    fn scalar_block_cholesky() {
        let sys = BlockTridiagonalSystem::from_blocks(
            vec![DMatrix::from_element(1, 1, 4.0)],
            vec![],
        );
        let chol = sys.cholesky().unwrap();
        assert_abs_diff_eq!(chol.diag[0][(0, 0)], 2.0);
        let inv = chol.inverse_blocks();
        assert_abs_diff_eq!(inv.diag[0][(0, 0)], 0.25);
    }

    #[test]
    fn reconstruction_matches_dense_cholesky() {
        let sys = random_spd_tridiag(7, 3, 3);
        let chol = sys.cholesky().unwrap();
        let v = chol.assemble_dense_factor();
        let w = sys.assemble_dense();
        let err = (&v * v.transpose() - &w).norm() / w.norm();
        assert!(err < 1e-10, "reconstruction error {err}");
    }

    #[test]
    fn sparse_solve_matches_dense_lu() {
        let sys = random_spd_tridiag(11, 3, 4);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let rhs = DVector::from_fn(sys.dim(), |_, _| rng.gen_range(-1.0..1.0));
        let x = sys.cholesky().unwrap().solve(&rhs).unwrap();
        let dense = sys.assemble_dense();
        let x_dense = dense.lu().solve(&rhs).unwrap();
        assert!((&x - &x_dense).norm() / x_dense.norm() < 1e-9);
        // Residual check too.
        assert!((sys.mul_vec(&x) - &rhs).norm() / rhs.norm() < 1e-9);
    }

    #[test]
    fn identity_and_zero_rhs() {
        let sys = BlockTridiagonalSystem::from_blocks(
            vec![DMatrix::identity(2, 2); 3],
            vec![DMatrix::zeros(2, 2); 2],
        );
        let chol = sys.cholesky().unwrap();
        let b = DVector::from_fn(6, |i, _| i as f64);
        assert_abs_diff_eq!(chol.solve(&b).unwrap(), b, epsilon = 1e-14);
        let z = DVector::zeros(6);
        assert_abs_diff_eq!(chol.solve(&z).unwrap(), z, epsilon = 1e-14);
    }

    #[test]
    fn solve_rejects_wrong_rhs_length() {
        let sys = random_spd_tridiag(3, 2, 3);
        let chol = sys.cholesky().unwrap();
        let bad = DVector::zeros(5);
        assert!(matches!(
            chol.solve(&bad),
            Err(BlocklinError::DimensionMismatch { expected: 6, got: 5 })
        ));
    }

    #[test]
    fn non_positive_definite_reports_block() {
        let mut sys = random_spd_tridiag(5, 2, 3);
        sys.diag[1] = DMatrix::zeros(2, 2);
        match sys.cholesky() {
            Err(BlocklinError::NotPositiveDefinite { stage: FactorStage::Trajectory, block }) => {
                assert_eq!(block, 1)
            }
            other => panic!("expected NPD, got {other:?}"),
        }
    }

    #[test]
    fn inverse_blocks_match_dense_inverse() {
        let sys = random_spd_tridiag(13, 3, 3);
        let chol = sys.cholesky().unwrap();
        let inv = chol.inverse_blocks();
        let dense_inv = sys.assemble_dense().try_inverse().unwrap();
        for n in 0..3 {
            let blk = dense_inv.view((n * 3, n * 3), (3, 3));
            assert!((&inv.diag[n] - blk).norm() < 1e-9 * dense_inv.norm());
        }
        for n in 0..2 {
            let blk = dense_inv.view(((n + 1) * 3, n * 3), (3, 3));
            assert!((&inv.offdiag[n] - blk).norm() < 1e-9 * dense_inv.norm());
        }
    }

    fn random_arrowhead(seed: u64, bd: usize, nb: usize, l: usize) -> ArrowheadSystem {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut sys = ArrowheadSystem::new(random_spd_tridiag(seed, bd, nb), 2, l);
        for i in 0..l {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
            sys.lm_diag[i] = &a * a.transpose() + DMatrix::identity(2, 2) * 6.0;
            // Observe each landmark from a couple of knots.
            for _ in 0..2 {
                let n = rng.gen_range(0..nb);
                let c = DMatrix::from_fn(2, bd, |_, _| rng.gen_range(-0.3..0.3));
                sys.add_coupling(i, n, &c);
            }
        }
        sys.rhs_traj = DVector::from_fn(nb * bd, |_, _| rng.gen_range(-1.0..1.0));
        sys.rhs_lm = DVector::from_fn(l * 2, |_, _| rng.gen_range(-1.0..1.0));
        sys
    }

    fn assemble_arrowhead_dense(sys: &ArrowheadSystem) -> DMatrix<f64> {
        let bd = sys.traj.block_dim();
        let dim_x = sys.traj.dim();
        let dim_l = sys.lm_dim * sys.n_landmarks();
        let mut full = DMatrix::zeros(dim_x + dim_l, dim_x + dim_l);
        full.view_mut((0, 0), (dim_x, dim_x))
            .copy_from(&sys.traj.assemble_dense());
        for (i, d) in sys.lm_diag.iter().enumerate() {
            full.view_mut((dim_x + i * 2, dim_x + i * 2), (2, 2)).copy_from(d);
        }
        for ((i, n), c) in &sys.coupling {
            let mut lower = full.view_mut((dim_x + i * 2, n * bd), (2, bd));
            lower += c;
            let mut upper = full.view_mut((n * bd, dim_x + i * 2), (bd, 2));
            upper += c.transpose();
        }
        full
    }

    #[test]
    fn arrowhead_solve_matches_dense() {
        let sys = random_arrowhead(17, 3, 4, 2);
        let (dx, dl) = sys.solve().unwrap();
        let full = assemble_arrowhead_dense(&sys);
        let mut rhs = DVector::zeros(full.nrows());
        rhs.rows_mut(0, sys.rhs_traj.len()).copy_from(&sys.rhs_traj);
        rhs.rows_mut(sys.rhs_traj.len(), sys.rhs_lm.len())
            .copy_from(&sys.rhs_lm);
        let z = full.lu().solve(&rhs).unwrap();
        let mut got = DVector::zeros(z.len());
        got.rows_mut(0, dx.len()).copy_from(&dx);
        got.rows_mut(dx.len(), dl.len()).copy_from(&dl);
        assert!((&got - &z).norm() / z.norm() < 1e-9);
    }

    #[test]
    fn arrowhead_without_landmarks_reduces_to_tridiagonal() {
        let tri = random_spd_tridiag(23, 2, 5);
        let mut sys = ArrowheadSystem::new(tri.clone(), 2, 0);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        sys.rhs_traj = DVector::from_fn(tri.dim(), |_, _| rng.gen_range(-1.0..1.0));
        let (dx, dl) = sys.solve().unwrap();
        assert!(dl.is_empty());
        let direct = tri.cholesky().unwrap().solve(&sys.rhs_traj).unwrap();
        assert_abs_diff_eq!(dx, direct, epsilon = 1e-12);
    }

    #[test]
    fn unobserved_landmark_fails_at_landmark_stage() {
        let mut sys = random_arrowhead(29, 2, 3, 2);
        // Landmark 1 never observed and with zero information.
        sys.lm_diag[1] = DMatrix::zeros(2, 2);
        sys.coupling.retain(|(i, _), _| *i != 1);
        match sys.cholesky() {
            Err(BlocklinError::NotPositiveDefinite { stage: FactorStage::Landmark, block }) => {
                assert_eq!(block, 1)
            }
            other => panic!("expected landmark-stage NPD, got {other:?}"),
        }
    }

    #[test]
    fn steam_inverse_blocks_match_dense() {
        let sys = random_arrowhead(31, 3, 4, 2);
        let chol = sys.cholesky().unwrap();
        let (cov, lm_cov) = chol.inverse_blocks_steam();
        let full_inv = assemble_arrowhead_dense(&sys).try_inverse().unwrap();
        let bd = 3;
        for n in 0..4 {
            let blk = full_inv.view((n * bd, n * bd), (bd, bd));
            assert!((&cov.diag[n] - blk).norm() < 1e-9 * full_inv.norm());
        }
        for n in 0..3 {
            let blk = full_inv.view(((n + 1) * bd, n * bd), (bd, bd));
            assert!((&cov.offdiag[n] - blk).norm() < 1e-9 * full_inv.norm());
        }
        let dim_x = 4 * bd;
        for i in 0..2 {
            let blk = full_inv.view((dim_x + 2 * i, dim_x + 2 * i), (2, 2));
            assert!((&lm_cov[i] - blk).norm() < 1e-9 * full_inv.norm());
        }
    }

    #[test]
    fn factor_storage_is_linear_in_knots() {
        // Fixed L, growing N: stored scalars grow linearly (never a dense
        // N x N inverse).
        let s1 = random_arrowhead(41, 3, 50, 3).cholesky().unwrap().stored_scalars();
        let s2 = random_arrowhead(41, 3, 100, 3).cholesky().unwrap().stored_scalars();
        let per_knot_1 = s1 as f64 / 50.0;
        let per_knot_2 = s2 as f64 / 100.0;
        assert!((per_knot_1 - per_knot_2).abs() / per_knot_1 < 0.2);
    }
}
