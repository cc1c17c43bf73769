//! Nearest-neighbor Gaussian process: neighbor DAG over ordered locations,
//! local conditional-normal factors, sparse precision, log-determinant and
//! kriging factors for new locations. Indices are 0-based.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};

use crate::covspatial::{corr, dist};
use crate::error::{Error, Result};
use crate::linalg::{chol_exact, Csr, JITTER};

pub const DEFAULT_H: usize = 15;
/// Floor applied to the conditional variances f_i.
pub const F_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub h: usize,
    /// N(s_i): nearest predecessors, closest first.
    pub neighbors: Vec<Vec<usize>>,
    /// {r : s_i ∈ N(s_r)}, increasing.
    pub reverse: Vec<Vec<usize>>,
    /// For each reverse entry r of i, the position of i inside N(s_r).
    pub reverse_pos: Vec<Vec<usize>>,
}

impl NeighborGraph {
    pub fn m(&self) -> usize {
        self.neighbors.len()
    }
}

/// The `count` nearest points of `pool` to `p`, ties broken by lower index.
fn nearest(pool: impl Iterator<Item = (usize, f64)>, count: usize) -> Vec<usize> {
    let mut c: Vec<(f64, usize)> = pool.map(|(j, d)| (d, j)).collect();
    c.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    c.truncate(count);
    c.into_iter().map(|(_, j)| j).collect()
}

pub fn build_graph(coords: &[Vec<f64>], h: usize) -> Result<NeighborGraph> {
    if h == 0 {
        return Err(Error::Spec("neighbor count h must be at least 1".into()));
    }
    let m = coords.len();
    let mut neighbors = Vec::with_capacity(m);
    for i in 0..m {
        let pool = (0..i).map(|j| (j, dist(&coords[i], &coords[j])));
        neighbors.push(nearest(pool, h.min(i)));
    }
    let mut reverse = vec![Vec::new(); m];
    let mut reverse_pos = vec![Vec::new(); m];
    for (r, nb) in neighbors.iter().enumerate() {
        for (k, &i) in nb.iter().enumerate() {
            reverse[i].push(r);
            reverse_pos[i].push(k);
        }
    }
    Ok(NeighborGraph { h, neighbors, reverse, reverse_pos })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFactors {
    /// b_i = F_{i,N(i)} F_{N(i)}⁻¹.
    pub b: Vec<Vec<f64>>,
    /// f_i = 1 − b_i F_{N(i),i}, floored at F_FLOOR.
    pub f: Vec<f64>,
    /// Number of kernel evaluations performed while building.
    pub kernel_evals: usize,
}

/// Solve the neighbor system for one target; retries once with jitter.
fn solve_local(cnn: &DMatrix<f64>, cni: &DVector<f64>) -> Result<DVector<f64>> {
    if let Ok(c) = chol_exact(cnn) {
        return Ok(c.solve(cni));
    }
    let mut j = cnn.clone();
    for d in 0..j.nrows() {
        j[(d, d)] += JITTER * 1e2;
    }
    chol_exact(&j)
        .map(|c| c.solve(cni))
        .map_err(|_| Error::Numerical("singular neighbor correlation submatrix".into()))
}

/// Local factors under F(ρ) = exp(−ρD). Only neighbor-indexed correlations are
/// evaluated.
pub fn local_factors(graph: &NeighborGraph, coords: &[Vec<f64>], rho: f64) -> Result<LocalFactors> {
    let evals = Cell::new(0usize);
    let k = |a: usize, b: usize| {
        evals.set(evals.get() + 1);
        corr(rho, dist(&coords[a], &coords[b]))
    };
    let m = graph.m();
    let mut b = Vec::with_capacity(m);
    let mut f = Vec::with_capacity(m);
    for i in 0..m {
        let nb = &graph.neighbors[i];
        let n = nb.len();
        if n == 0 {
            b.push(vec![]);
            f.push(1.0);
            continue;
        }
        let mut cnn = DMatrix::<f64>::identity(n, n);
        for a in 0..n {
            for c in 0..a {
                let v = k(nb[a], nb[c]);
                cnn[(a, c)] = v;
                cnn[(c, a)] = v;
            }
        }
        let cni = DVector::from_iterator(n, nb.iter().map(|&j| k(i, j)));
        let bi = solve_local(&cnn, &cni)?;
        let fi = (1.0 - bi.dot(&cni)).max(F_FLOOR);
        b.push(bi.iter().copied().collect());
        f.push(fi);
    }
    Ok(LocalFactors { b, f, kernel_evals: evals.get() })
}

/// F̃⁻¹ = Σ_i b*_iᵀ b*_i / f_i with b*_i = e_i − Σ_k b_ik e_{N(i)_k}.
pub fn sparse_precision(graph: &NeighborGraph, local: &LocalFactors) -> Csr {
    let m = graph.m();
    let mut trip = Vec::new();
    for i in 0..m {
        let mut idx = vec![i];
        let mut val = vec![1.0];
        for (k, &j) in graph.neighbors[i].iter().enumerate() {
            idx.push(j);
            val.push(-local.b[i][k]);
        }
        let w = 1.0 / local.f[i];
        for a in 0..idx.len() {
            for c in 0..idx.len() {
                trip.push((idx[a], idx[c], w * val[a] * val[c]));
            }
        }
    }
    Csr::from_triplets(m, m, trip)
}

/// ln det(F̃ ⊗ κ) = Σ_i [O ln f_i + ln det κ].
pub fn nngp_logdet(local: &LocalFactors, kappa: &DMatrix<f64>) -> Result<f64> {
    let o = kappa.nrows();
    let c = chol_exact(kappa).map_err(|_| Error::Numerical("kappa not positive definite".into()))?;
    let ld_k = crate::linalg::chol_logdet(&c);
    Ok(local.f.iter().map(|&fi| o as f64 * fi.ln() + ld_k).sum())
}

/// Residual e_i = a_i − Σ_k b_ik a_{N(i)_k} of an O×m field stored
/// site-major (a[i*O + o]).
pub fn site_residual(graph: &NeighborGraph, local: &LocalFactors, a: &[f64], o: usize, i: usize) -> Vec<f64> {
    let mut e: Vec<f64> = a[i * o..(i + 1) * o].to_vec();
    for (k, &j) in graph.neighbors[i].iter().enumerate() {
        let bk = local.b[i][k];
        for c in 0..o {
            e[c] -= bk * a[j * o + c];
        }
    }
    e
}

/// Σ_i e_i e_iᵀ / f_i = A F̃⁻¹ Aᵀ for a site-major field.
pub fn quad_outer(graph: &NeighborGraph, local: &LocalFactors, a: &[f64], o: usize) -> DMatrix<f64> {
    let mut s = DMatrix::<f64>::zeros(o, o);
    for i in 0..graph.m() {
        let e = site_residual(graph, local, a, o, i);
        let w = 1.0 / local.f[i];
        for p in 0..o {
            for q in 0..o {
                s[(p, q)] += w * e[p] * e[q];
            }
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrigeFactor {
    pub neighbors: Vec<usize>,
    pub b: Vec<f64>,
    pub f: f64,
    /// The new point coincides with a reference point.
    pub degenerate: bool,
}

/// Kriging factors of each new point on its min(h, m) nearest reference points.
pub fn krige_factors(reference: &[Vec<f64>], new_points: &[Vec<f64>], h: usize, rho: f64) -> Result<Vec<KrigeFactor>> {
    let m = reference.len();
    let mut out = Vec::with_capacity(new_points.len());
    for p in new_points {
        let pool = (0..m).map(|j| (j, dist(p, &reference[j])));
        let nb = nearest(pool, h.min(m));
        if let Some(&j) = nb.first() {
            if dist(p, &reference[j]) == 0.0 {
                out.push(KrigeFactor { neighbors: vec![j], b: vec![1.0], f: 0.0, degenerate: true });
                continue;
            }
        }
        let n = nb.len();
        let cnn = DMatrix::from_fn(n, n, |a, c| if a == c { 1.0 } else { corr(rho, dist(&reference[nb[a]], &reference[nb[c]])) });
        let cni = DVector::from_iterator(n, nb.iter().map(|&j| corr(rho, dist(p, &reference[j]))));
        let bi = solve_local(&cnn, &cni)?;
        let f = (1.0 - bi.dot(&cni)).max(F_FLOOR).min(1.0);
        out.push(KrigeFactor { neighbors: nb, b: bi.iter().copied().collect(), f, degenerate: false });
    }
    Ok(out)
}
