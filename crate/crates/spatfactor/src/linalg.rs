//! Dense helpers on top of nalgebra plus a small compressed-row sparse type.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub type Chol = Cholesky<f64, Dyn>;

/// Jitter added to the diagonal before the first dense factorization attempt.
pub const JITTER: f64 = 1e-10;

/// Cholesky with the standard jitter; on failure the jitter grows tenfold up
/// to five times before giving up.
pub fn chol_jitter(a: &DMatrix<f64>) -> Result<Chol> {
    let scale = a.diagonal().iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
    let mut eps = JITTER * scale;
    for _ in 0..6 {
        let mut b = a.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += eps;
        }
        if let Some(c) = Cholesky::new(b) {
            return Ok(c);
        }
        eps *= 10.0;
    }
    Err(Error::Numerical(format!(
        "matrix of order {} not positive definite after jitter",
        a.nrows()
    )))
}

/// Plain Cholesky without any jitter.
pub fn chol_exact(a: &DMatrix<f64>) -> Result<Chol> {
    Cholesky::new(a.clone())
        .ok_or_else(|| Error::Numerical(format!("order-{} matrix not positive definite", a.nrows())))
}

pub fn chol_logdet(c: &Chol) -> f64 {
    let l = c.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Symmetrize in place, averaging mirrored entries.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut inv = chol_jitter(a)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Kronecker product a ⊗ b.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Lower Cholesky factor solve: returns L^{-T} z, i.e. a draw with covariance
/// (L L^T)^{-1} when z is standard normal.
pub fn solve_lt(c: &Chol, z: &DVector<f64>) -> DVector<f64> {
    let l = c.l_dirty();
    // nalgebra leaves the strict upper part untouched, so use the lower
    // triangle only.
    l.tr_solve_lower_triangular(z).expect("triangular factor is nonsingular")
}

/// L z for the lower Cholesky factor: a draw with covariance L L^T.
pub fn mul_l(c: &Chol, z: &DVector<f64>) -> DVector<f64> {
    let l = c.l();
    l * z
}

/// Compressed sparse row matrix with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Build from triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, mut trip: Vec<(usize, usize, f64)>) -> Csr {
        trip.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(trip.len());
        let mut values: Vec<f64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            assert!(r < nrows && c < ncols, "triplet out of range");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Csr { nrows, ncols, indptr, indices, values }
    }

    pub fn identity(n: usize) -> Csr {
        Csr::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        self.indices[a..b].iter().copied().zip(self.values[a..b].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        match self.indices[a..b].binary_search(&c) {
            Ok(k) => self.values[a + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                d[(r, c)] = v;
            }
        }
        d
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    /// x^T A x.
    pub fn quad(&self, x: &[f64]) -> f64 {
        (0..self.nrows)
            .map(|r| x[r] * self.row(r).map(|(c, v)| v * x[c]).sum::<f64>())
            .sum()
    }
}
