//! Dense Cholesky kernels and the block-arrowhead factorization used for the
//! latent Hessian.
//!
//! The latent Hessian has one dense block per river basin (residuals couple
//! along flow paths) and a small dense year block coupled to all of them:
//!
//! ```text
//! H = | A_1           B_1 |
//!     |     ...       ... |
//!     |          A_m  B_m |
//!     | B_1' ... B_m'  C  |
//! ```
//!
//! It is factored through the Schur complement `S = C - sum_b B_b' A_b^-1 B_b`.

use crate::scalar::Real;

/// Square matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub n: usize,
    pub data: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![T::zero(); n * n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.n + j] = self.data[i * self.n + j] + v;
    }

    pub fn add_diagonal(&mut self, v: T) {
        for i in 0..self.n {
            self.add(i, i, v);
        }
    }

    /// Mirrors the lower triangle into the upper one.
    pub fn symmetrize_from_lower(&mut self) {
        for i in 0..self.n {
            for j in 0..i {
                self.data[j * self.n + i] = self.data[i * self.n + j];
            }
        }
    }
}

/// Lower Cholesky factor `A = L L'`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Dense<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factors `a + ridge I`, reading only the lower triangle. Returns the
    /// failing pivot index if the matrix is not positive definite.
    pub fn new(a: &Dense<T>, ridge: T) -> Result<Self, usize> {
        let n = a.n;
        let mut l = Dense::zeros(n);
        for j in 0..n {
            let mut d = a.get(j, j) + ridge;
            for k in 0..j {
                let v = l.get(j, k);
                d = d - v * v;
            }
            if !(d > T::zero() && d.is_finite()) {
                return Err(j);
            }
            let d = d.sqrt();
            l.data[j * n + j] = d;
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                let (ri, rj) = (i * n, j * n);
                for k in 0..j {
                    s = s - l.data[ri + k] * l.data[rj + k];
                }
                l.data[ri + j] = s / d;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.n
    }

    pub fn log_det(&self) -> T {
        (0..self.l.n)
            .map(|i| self.l.get(i, i).ln())
            .fold(T::zero(), |a, b| a + b)
            * T::lit(2.0)
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.l.n;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s = s - self.l.data[i * n + k] * b[k];
            }
            b[i] = s / self.l.data[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s = s - self.l.data[k * n + i] * b[k];
            }
            b[i] = s / self.l.data[i * n + i];
        }
    }

    /// Diagonal of `A^-1`.
    pub fn inverse_diagonal(&self) -> Vec<T> {
        let n = self.l.n;
        let mut diag = vec![T::zero(); n];
        let mut col = vec![T::zero(); n];
        // Column j of L^-1 by forward substitution; diag(A^-1)_i = sum_j (L^-1)_{ji}^2.
        for j in 0..n {
            col.iter_mut().for_each(|c| *c = T::zero());
            col[j] = T::one() / self.l.get(j, j);
            for i in (j + 1)..n {
                let mut s = T::zero();
                for k in j..i {
                    s = s + self.l.get(i, k) * col[k];
                }
                col[i] = -s / self.l.get(i, i);
            }
            for i in j..n {
                diag[j] = diag[j] + col[i] * col[i];
            }
        }
        diag
    }
}

/// Block-arrowhead symmetric matrix.
#[derive(Debug, Clone)]
pub struct ArrowMatrix<T> {
    /// Diagonal blocks `A_b`.
    pub blocks: Vec<Dense<T>>,
    /// Coupling `B_b`, `block size x n_years`, row-major.
    pub coupling: Vec<Vec<T>>,
    /// Year block `C`.
    pub corner: Dense<T>,
}

impl<T: Real> ArrowMatrix<T> {
    pub fn n_years(&self) -> usize {
        self.corner.n
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.n).sum::<usize>() + self.corner.n
    }

    pub fn factor(&self, ridge: T) -> Result<ArrowFactor<T>, NotPositiveDefinite> {
        let ny = self.n_years();
        let mut block_chol = Vec::with_capacity(self.blocks.len());
        let mut reduced = Vec::with_capacity(self.blocks.len());
        let mut schur = self.corner.clone();
        for (bi, (a, b)) in self.blocks.iter().zip(&self.coupling).enumerate() {
            let chol = Cholesky::new(a, ridge).map_err(|_| NotPositiveDefinite { block: Some(bi) })?;
            let s = a.n;
            // V = A^-1 B, stored column-major (one column per year).
            let mut v = vec![T::zero(); s * ny];
            for y in 0..ny {
                let col = &mut v[y * s..(y + 1) * s];
                for k in 0..s {
                    col[k] = b[k * ny + y];
                }
                chol.solve_in_place(col);
            }
            for y1 in 0..ny {
                for y2 in 0..=y1 {
                    let mut acc = T::zero();
                    for k in 0..s {
                        acc = acc + b[k * ny + y1] * v[y2 * s + k];
                    }
                    schur.add(y1, y2, -acc);
                }
            }
            block_chol.push(chol);
            reduced.push(v);
        }
        let schur_chol = Cholesky::new(&schur, ridge).map_err(|_| NotPositiveDefinite { block: None })?;
        Ok(ArrowFactor {
            block_chol,
            reduced,
            schur_chol,
            n_years: ny,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotPositiveDefinite {
    /// Failing basin block, `None` for the year Schur complement.
    pub block: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ArrowFactor<T> {
    block_chol: Vec<Cholesky<T>>,
    reduced: Vec<Vec<T>>,
    schur_chol: Cholesky<T>,
    n_years: usize,
}

impl<T: Real> ArrowFactor<T> {
    pub fn log_det(&self) -> T {
        self.block_chol
            .iter()
            .map(Cholesky::log_det)
            .fold(self.schur_chol.log_det(), |a, b| a + b)
    }

    /// Solves `H [x; y] = [r; q]` in place; `r` is split per block.
    pub fn solve_in_place(&self, r: &mut [Vec<T>], q: &mut [T], coupling: &[Vec<T>]) {
        let ny = self.n_years;
        for (chol, rb) in self.block_chol.iter().zip(r.iter_mut()) {
            chol.solve_in_place(rb);
        }
        // q - sum_b B_b' A_b^-1 r_b
        for (rb, b) in r.iter().zip(coupling) {
            for (k, &rk) in rb.iter().enumerate() {
                for y in 0..ny {
                    q[y] = q[y] - b[k * ny + y] * rk;
                }
            }
        }
        self.schur_chol.solve_in_place(q);
        for (rb, v) in r.iter_mut().zip(&self.reduced) {
            let s = rb.len();
            for y in 0..ny {
                for k in 0..s {
                    rb[k] = rb[k] - v[y * s + k] * q[y];
                }
            }
        }
    }

    /// Diagonal of `H^-1`: per-block entries and the year entries.
    pub fn inverse_diagonal(&self) -> (Vec<Vec<T>>, Vec<T>) {
        let ny = self.n_years;
        // S^-1 columns.
        let mut s_inv = vec![T::zero(); ny * ny];
        for y in 0..ny {
            let col = &mut s_inv[y * ny..(y + 1) * ny];
            col[y] = T::one();
            self.schur_chol.solve_in_place(col);
        }
        let blocks = self
            .block_chol
            .iter()
            .zip(&self.reduced)
            .map(|(chol, v)| {
                let s = chol.dim();
                let mut d = chol.inverse_diagonal();
                for (k, dk) in d.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for y1 in 0..ny {
                        for y2 in 0..ny {
                            acc = acc + v[y1 * s + k] * s_inv[y1 * ny + y2] * v[y2 * s + k];
                        }
                    }
                    *dk = *dk + acc;
                }
                d
            })
            .collect();
        let years = (0..ny).map(|y| s_inv[y * ny + y]).collect();
        (blocks, years)
    }
}
