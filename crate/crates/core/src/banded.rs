//! Symmetric block-pentadiagonal matrices and their banded block Cholesky
//! (block Thomas) factorization.
//!
//! Only the lower band is stored: diagonal blocks `D_k = H[k,k]`, first
//! sub-diagonal blocks `H[k,k-1]` and second sub-diagonal blocks `H[k,k-2]`.
//! Elimination runs forward in `k` and never touches anything outside the
//! band, so the factor has exactly the same three block arrays.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPentaMatrix {
    block_size: usize,
    diag: Vec<DMatrix<f64>>,
    /// `sub1[k-1] = H[k, k-1]`
    sub1: Vec<DMatrix<f64>>,
    /// `sub2[k-2] = H[k, k-2]`
    sub2: Vec<DMatrix<f64>>,
}

impl BlockPentaMatrix {
    pub fn zeros(block_count: usize, block_size: usize) -> Self {
        let z = DMatrix::zeros(block_size, block_size);
        Self {
            block_size,
            diag: vec![z.clone(); block_count],
            sub1: vec![z.clone(); block_count.saturating_sub(1)],
            sub2: vec![z; block_count.saturating_sub(2)],
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn block_count(&self) -> usize {
        self.diag.len()
    }

    pub fn dim(&self) -> usize {
        self.block_size * self.diag.len()
    }

    pub fn diag_block(&self, k: usize) -> &DMatrix<f64> {
        &self.diag[k]
    }

    pub fn diag_block_mut(&mut self, k: usize) -> &mut DMatrix<f64> {
        &mut self.diag[k]
    }

    /// `H[k, k-1]`, for `k >= 1`.
    pub fn sub1_block(&self, k: usize) -> &DMatrix<f64> {
        &self.sub1[k - 1]
    }

    pub fn sub1_block_mut(&mut self, k: usize) -> &mut DMatrix<f64> {
        &mut self.sub1[k - 1]
    }

    /// `H[k, k-2]`, for `k >= 2`.
    pub fn sub2_block(&self, k: usize) -> &DMatrix<f64> {
        &self.sub2[k - 2]
    }

    pub fn sub2_block_mut(&mut self, k: usize) -> &mut DMatrix<f64> {
        &mut self.sub2[k - 2]
    }

    pub fn diagonal(&self) -> DVector<f64> {
        let n = self.block_size;
        DVector::from_fn(self.dim(), |i, _| self.diag[i / n][(i % n, i % n)])
    }

    /// Extracts the band of a dense symmetric matrix; entries outside the band
    /// are ignored.
    pub fn from_dense(dense: &DMatrix<f64>, block_size: usize) -> Self {
        let count = dense.nrows() / block_size;
        let n = block_size;
        let block = |r: usize, c: usize| dense.view((r * n, c * n), (n, n)).into_owned();
        Self {
            block_size,
            diag: (0..count).map(|k| block(k, k)).collect(),
            sub1: (1..count).map(|k| block(k, k - 1)).collect(),
            sub2: (2..count).map(|k| block(k, k - 2)).collect(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.block_size;
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for k in 0..self.block_count() {
            m.view_mut((k * n, k * n), (n, n)).copy_from(&self.diag[k]);
            if k >= 1 {
                let b = &self.sub1[k - 1];
                m.view_mut((k * n, (k - 1) * n), (n, n)).copy_from(b);
                m.view_mut(((k - 1) * n, k * n), (n, n)).copy_from(&b.transpose());
            }
            if k >= 2 {
                let b = &self.sub2[k - 2];
                m.view_mut((k * n, (k - 2) * n), (n, n)).copy_from(b);
                m.view_mut(((k - 2) * n, k * n), (n, n)).copy_from(&b.transpose());
            }
        }
        m
    }

    /// `H x` using only the stored band.
    pub fn mul_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("x", self.dim(), x.len())?;
        let n = self.block_size;
        let mut y = DVector::zeros(self.dim());
        let seg = |k: usize| x.rows(k * n, n);
        for k in 0..self.block_count() {
            let mut acc = &self.diag[k] * seg(k);
            if k >= 1 {
                acc += &self.sub1[k - 1] * seg(k - 1);
            }
            if k >= 2 {
                acc += &self.sub2[k - 2] * seg(k - 2);
            }
            if k + 1 < self.block_count() {
                acc += self.sub1[k].tr_mul(&seg(k + 1));
            }
            if k + 2 < self.block_count() {
                acc += self.sub2[k].tr_mul(&seg(k + 2));
            }
            y.rows_mut(k * n, n).copy_from(&acc);
        }
        Ok(y)
    }

    pub fn factorize(&self) -> Result<BlockFactorization> {
        factorize(self)
    }
}

/// Lower block-banded Cholesky factor `L` with `H = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct BlockFactorization {
    block_size: usize,
    diag: Vec<DMatrix<f64>>,
    sub1: Vec<DMatrix<f64>>,
    sub2: Vec<DMatrix<f64>>,
}

/// `X L⁻ᵀ` for lower-triangular `L`.
fn right_solve_lower_transpose(l: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    // X L⁻ᵀ = (L⁻¹ Xᵀ)ᵀ
    l.solve_lower_triangular(&x.transpose())
        .expect("cholesky factor has a nonzero diagonal")
        .transpose()
}

pub fn factorize(h: &BlockPentaMatrix) -> Result<BlockFactorization> {
    let count = h.block_count();
    let mut diag: Vec<DMatrix<f64>> = Vec::with_capacity(count);
    let mut sub1: Vec<DMatrix<f64>> = Vec::with_capacity(count.saturating_sub(1));
    let mut sub2: Vec<DMatrix<f64>> = Vec::with_capacity(count.saturating_sub(2));
    for k in 0..count {
        let mut pivot = h.diag[k].clone();
        let l2 = if k >= 2 {
            let b = right_solve_lower_transpose(&diag[k - 2], &h.sub2[k - 2]);
            pivot -= &b * b.transpose();
            Some(b)
        } else {
            None
        };
        if k >= 1 {
            let mut rhs = h.sub1[k - 1].clone();
            if let Some(b) = &l2 {
                // L[k-1, k-2] exists only when k - 1 >= 1.
                if k >= 2 {
                    rhs -= b * sub1[k - 2].transpose();
                }
            }
            let b = right_solve_lower_transpose(&diag[k - 1], &rhs);
            pivot -= &b * b.transpose();
            sub1.push(b);
        }
        if let Some(b) = l2 {
            sub2.push(b);
        }
        let chol = pivot.cholesky().ok_or(Error::NotPositiveDefinite { block: k })?;
        diag.push(chol.unpack());
    }
    Ok(BlockFactorization {
        block_size: h.block_size,
        diag,
        sub1,
        sub2,
    })
}

impl BlockFactorization {
    pub fn dim(&self) -> usize {
        self.block_size * self.diag.len()
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("rhs", self.dim(), b.len())?;
        let n = self.block_size;
        let count = self.diag.len();
        // Forward: L y = b
        let mut y = b.clone();
        for k in 0..count {
            let mut r = y.rows(k * n, n).into_owned();
            if k >= 1 {
                r -= &self.sub1[k - 1] * y.rows((k - 1) * n, n);
            }
            if k >= 2 {
                r -= &self.sub2[k - 2] * y.rows((k - 2) * n, n);
            }
            let s = self.diag[k]
                .solve_lower_triangular(&r)
                .expect("cholesky factor has a nonzero diagonal");
            y.rows_mut(k * n, n).copy_from(&s);
        }
        // Backward: Lᵀ x = y
        let mut x = y;
        for k in (0..count).rev() {
            let mut r = x.rows(k * n, n).into_owned();
            if k + 1 < count {
                r -= self.sub1[k].tr_mul(&x.rows((k + 1) * n, n));
            }
            if k + 2 < count {
                r -= self.sub2[k].tr_mul(&x.rows((k + 2) * n, n));
            }
            let s = self.diag[k]
                .tr_solve_lower_triangular(&r)
                .expect("cholesky factor has a nonzero diagonal");
            x.rows_mut(k * n, n).copy_from(&s);
        }
        Ok(x)
    }

    /// Solves for every column of `rhs` independently.
    pub fn solve_multi(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("rhs rows", self.dim(), rhs.nrows())?;
        let cols: Vec<DVector<f64>> = (0..rhs.ncols())
            .into_par_iter()
            .map(|c| self.solve(&rhs.column(c).into_owned()))
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(self.dim(), rhs.ncols(), |r, c| cols[c][r]))
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand::Rng;

    /// Random SPD block-pentadiagonal matrix with a prescribed spread of
    /// diagonal scales, built as `B Bᵀ + shift I` where `B` is block
    /// lower-bidiagonal (so the product has bandwidth two).
    pub fn random_spd<R: Rng>(rng: &mut R, count: usize, n: usize, log10_cond: f64) -> BlockPentaMatrix {
        let dim = count * n;
        let mut b = DMatrix::zeros(dim, dim);
        for k in 0..count {
            for i in 0..n {
                for j in 0..n {
                    b[(k * n + i, k * n + j)] = rng.gen_range(-1.0..1.0);
                    if k >= 1 {
                        b[(k * n + i, (k - 1) * n + j)] = rng.gen_range(-1.0..1.0);
                    }
                }
            }
        }
        let scale = DVector::from_fn(dim, |i, _| 10f64.powf(0.5 * log10_cond * i as f64 / dim as f64));
        let s = DMatrix::from_diagonal(&scale);
        let dense = &s * (&b * b.transpose() + DMatrix::identity(dim, dim) * 0.5) * &s;
        BlockPentaMatrix::from_dense(&dense, n)
    }
}
