//! Spatial prior N(0, F ⊗ κ) on site-major fields (entry i·O + o), under the
//! identity, a dense exponential GP or its NNGP approximation.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::covspatial::{build_f, SpatialKind};
use crate::dist::LN_2PI;
use crate::error::Result;
use crate::linalg::{chol_jitter, chol_logdet, symmetrize, Chol, Csr};
use crate::nngp::{local_factors, quad_outer, sparse_precision, LocalFactors, NeighborGraph};

#[derive(Debug, Clone)]
pub enum SpatialPrior {
    Independent {
        m: usize,
    },
    Dense {
        f: DMatrix<f64>,
        chol: Chol,
        finv: DMatrix<f64>,
        logdet: f64,
    },
    Nngp {
        graph: Arc<NeighborGraph>,
        local: LocalFactors,
        logdet: f64,
    },
}

impl SpatialPrior {
    pub fn independent(m: usize) -> SpatialPrior {
        SpatialPrior::Independent { m }
    }

    /// Dense exp(−ρD) with the standard diagonal jitter.
    pub fn dense(rho: f64, d: &DMatrix<f64>) -> Result<SpatialPrior> {
        let f = build_f(SpatialKind::Exponential, rho, d);
        let chol = chol_jitter(&f)?;
        let mut finv = chol.inverse();
        symmetrize(&mut finv);
        let logdet = chol_logdet(&chol);
        Ok(SpatialPrior::Dense { f, chol, finv, logdet })
    }

    pub fn nngp(graph: Arc<NeighborGraph>, coords: &[Vec<f64>], rho: f64) -> Result<SpatialPrior> {
        let local = local_factors(&graph, coords, rho)?;
        let logdet = local.f.iter().map(|f| f.ln()).sum();
        Ok(SpatialPrior::Nngp { graph, local, logdet })
    }

    pub fn m(&self) -> usize {
        match self {
            SpatialPrior::Independent { m } => *m,
            SpatialPrior::Dense { f, .. } => f.nrows(),
            SpatialPrior::Nngp { graph, .. } => graph.m(),
        }
    }

    /// ln det F (or F̃).
    pub fn logdet_f(&self) -> f64 {
        match self {
            SpatialPrior::Independent { .. } => 0.0,
            SpatialPrior::Dense { logdet, .. } | SpatialPrior::Nngp { logdet, .. } => *logdet,
        }
    }

    /// A F⁻¹ Aᵀ for the O×m matrix A holding a site-major field.
    pub fn quad_outer(&self, a: &[f64], o: usize) -> DMatrix<f64> {
        let m = self.m();
        match self {
            SpatialPrior::Independent { .. } => {
                let mut s = DMatrix::zeros(o, o);
                for i in 0..m {
                    for p in 0..o {
                        for q in 0..o {
                            s[(p, q)] += a[i * o + p] * a[i * o + q];
                        }
                    }
                }
                s
            }
            SpatialPrior::Dense { finv, .. } => {
                let am = DMatrix::from_column_slice(o, m, a);
                let mut s = &am * finv * am.transpose();
                symmetrize(&mut s);
                s
            }
            SpatialPrior::Nngp { graph, local, .. } => quad_outer(graph, local, a, o),
        }
    }

    /// F⁻¹ (or F̃⁻¹) as a dense m×m matrix.
    pub fn precision_dense(&self) -> DMatrix<f64> {
        match self {
            SpatialPrior::Independent { m } => DMatrix::identity(*m, *m),
            SpatialPrior::Dense { finv, .. } => finv.clone(),
            SpatialPrior::Nngp { graph, local, .. } => sparse_precision(graph, local).to_dense(),
        }
    }

    pub fn precision_csr(&self) -> Csr {
        match self {
            SpatialPrior::Independent { m } => Csr::identity(*m),
            SpatialPrior::Nngp { graph, local, .. } => sparse_precision(graph, local),
            SpatialPrior::Dense { finv, .. } => {
                let m = finv.nrows();
                let mut t = Vec::with_capacity(m * m);
                for i in 0..m {
                    for j in 0..m {
                        t.push((i, j, finv[(i, j)]));
                    }
                }
                Csr::from_triplets(m, m, t)
            }
        }
    }

    /// Σ over fields of ln N(α | 0, F ⊗ κ).
    pub fn log_density(&self, fields: &[&[f64]], kappa_inv: &DMatrix<f64>, logdet_kappa: f64) -> f64 {
        let o = kappa_inv.nrows();
        let m = self.m();
        let per = -0.5 * ((m * o) as f64 * LN_2PI + o as f64 * self.logdet_f() + m as f64 * logdet_kappa);
        let mut total = 0.0;
        for a in fields {
            let s = self.quad_outer(a, o);
            total += per - 0.5 * (kappa_inv.component_mul(&s)).sum();
        }
        total
    }
}

/// Per-site conditional of a site-major field under a precision matrix Q:
/// α_i | α_{−i} ~ N(a_i / c_i, κ / c_i) with c_i = Q_ii and
/// a_i = −Σ_{j≠i} Q_ij α_j.
pub fn precision_site_coeffs(q: &Csr, a: &[f64], o: usize, i: usize) -> (f64, Vec<f64>) {
    let mut c = 0.0;
    let mut acc = vec![0.0; o];
    for (j, v) in q.row(i) {
        if j == i {
            c = v;
        } else {
            for p in 0..o {
                acc[p] -= v * a[j * o + p];
            }
        }
    }
    (c, acc)
}
