//! Probit stick-breaking machinery for one factor: weights, slice variables,
//! truncation updates, label and atom draws, the multiplicative gamma
//! shrinkage, the latent-z device and the α kernels.
//!
//! Two orderings coexist. Rows r = o·m + i (space fastest) index weights,
//! labels, slice variables and loadings. Fields α and z are site-major,
//! entry i·O + o.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dist::{
    categorical_log, gamma, norm_cdf, norm_isf, norm_ppf, norm_sf, std_normal, std_normal_vec, trunc_normal, uniform_open, Q_CLAMP,
};
use crate::error::{Error, Result};
use crate::linalg::{chol_jitter, kron, solve_lt, Chol};
use crate::nngp::{LocalFactors, NeighborGraph};
use crate::spatialprior::{precision_site_coeffs, SpatialPrior};

/// Stick-breaking weights from α_1..α_{L−1} at one site; returns L weights.
/// The "1 − Φ" factors use the upper-tail function so they stay exact for
/// large α.
pub fn weights_from_alpha(alpha: &[f64]) -> Vec<f64> {
    let mut w = Vec::with_capacity(alpha.len() + 1);
    let mut rest = 1.0;
    for &a in alpha {
        w.push(norm_cdf(a) * rest);
        rest *= norm_sf(a);
    }
    w.push(rest);
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorClusterState {
    pub m: usize,
    pub o: usize,
    /// Current truncation L_j.
    pub l: usize,
    pub atoms: Vec<f64>,
    /// L_j − 1 site-major fields.
    pub alpha: Vec<Vec<f64>>,
    /// Row-major (m·O) × L_j.
    pub weights: Vec<f64>,
    /// 0-based labels per row.
    pub labels: Vec<usize>,
    /// Slice variables per row (varying-L only).
    pub u: Vec<f64>,
    /// Latent normals, site-major like α (fixed-L only).
    pub z: Vec<Vec<f64>>,
}

impl FactorClusterState {
    pub fn n(&self) -> usize {
        self.m * self.o
    }

    /// Site-major index of row r.
    pub fn aidx(&self, r: usize) -> usize {
        (r % self.m) * self.o + r / self.m
    }

    pub fn row(&self, i: usize, o: usize) -> usize {
        o * self.m + i
    }

    pub fn alpha_at_row(&self, r: usize) -> Vec<f64> {
        let a = self.aidx(r);
        self.alpha.iter().map(|f| f[a]).collect()
    }

    pub fn weight(&self, r: usize, l: usize) -> f64 {
        self.weights[r * self.l + l]
    }

    pub fn weight_row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.l..(r + 1) * self.l]
    }

    pub fn refresh_row(&mut self, r: usize) {
        let w = weights_from_alpha(&self.alpha_at_row(r));
        let l = self.l;
        self.weights[r * l..(r + 1) * l].copy_from_slice(&w);
    }

    pub fn refresh_weights(&mut self) {
        self.weights = vec![0.0; self.n() * self.l];
        for r in 0..self.n() {
            self.refresh_row(r);
        }
    }

    /// Loading of row r.
    pub fn loading(&self, r: usize) -> f64 {
        self.atoms[self.labels[r]]
    }

    /// Number of rows with u ≥ w at their own label.
    pub fn slice_violations(&self) -> usize {
        if self.u.is_empty() {
            return 0;
        }
        (0..self.n()).filter(|&r| !(self.u[r] < self.weight(r, self.labels[r]))).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageState {
    pub a1: f64,
    pub a2: f64,
    pub delta: Vec<f64>,
    pub use_shrinkage: bool,
}

impl ShrinkageState {
    pub fn tau(&self, j: usize) -> f64 {
        if self.use_shrinkage {
            self.delta[..=j].iter().product()
        } else {
            self.delta[j]
        }
    }

    pub fn taus(&self) -> Vec<f64> {
        (0..self.delta.len()).map(|j| self.tau(j)).collect()
    }
}

/// Sufficient statistics of the likelihood for factor j with every other
/// factor held fixed: e_rt = y_rt − x_rtβ − Σ_{h≠j} Λ_rh η_th.
#[derive(Debug, Clone)]
pub struct FactorStats {
    /// Σ_t e_rt η_tj per row.
    pub s_e_eta: Vec<f64>,
    /// Σ_t η_tj².
    pub s_eta_eta: f64,
    /// σ⁻² per row.
    pub inv_s2: Vec<f64>,
}

impl FactorStats {
    /// ln Π_t N(e_rt | θ η_tj, σ²) up to terms free of θ.
    pub fn loglik(&self, r: usize, theta: f64) -> f64 {
        -0.5 * self.inv_s2[r] * (theta * theta * self.s_eta_eta - 2.0 * theta * self.s_e_eta[r])
    }
}

/// u_r ~ Uniform(0, w_{r,ξ_r}), floored at the smallest positive normal.
pub fn sample_slice<R: Rng + ?Sized>(st: &mut FactorClusterState, rng: &mut R) -> Result<()> {
    let n = st.n();
    st.u.resize(n, 0.0);
    for r in 0..n {
        let w = st.weight(r, st.labels[r]);
        if !(w > 0.0) {
            return Err(Error::Numerical(format!("zero weight at own label for row {r}")));
        }
        let mut u = uniform_open(rng) * w;
        while u >= w {
            u = uniform_open(rng) * w;
        }
        st.u[r] = u.max(f64::MIN_POSITIVE);
        if st.u[r] >= w {
            // w itself below the normal range: keep the invariant checkable.
            st.u[r] = w * 0.5;
        }
    }
    Ok(())
}

/// Smallest 1-based n with Σ_{l≤n} w_l > 1 − u, or the full length if rounding
/// never crosses the threshold.
pub fn site_truncation(w: &[f64], u: f64) -> usize {
    let target = 1.0 - u;
    let mut acc = 0.0;
    for (l, &v) in w.iter().enumerate() {
        acc += v;
        if acc > target {
            return l + 1;
        }
    }
    w.len()
}

/// New L_j = max over rows of the per-row truncation, then drop components
/// beyond it. Returns the new L_j.
pub fn update_lj(st: &mut FactorClusterState) -> usize {
    let n = st.n();
    let mut lnew = 1;
    for r in 0..n {
        let lr = site_truncation(st.weight_row(r), st.u[r]).max(st.labels[r] + 1);
        lnew = lnew.max(lr);
    }
    let lnew = lnew.min(st.l);
    if lnew < st.l {
        st.alpha.truncate(lnew - 1);
        st.atoms.truncate(lnew);
        st.l = lnew;
        st.refresh_weights();
    }
    lnew
}

/// Labels under the slice sampler: ξ_r ∝ 1{w_l > u_r} Π_t N(y | …, θ_l).
pub fn sample_labels_vary_l<R: Rng + ?Sized>(st: &mut FactorClusterState, stats: &FactorStats, rng: &mut R) -> Result<()> {
    let mut lw = vec![0.0; st.l];
    for r in 0..st.n() {
        for l in 0..st.l {
            lw[l] = if st.weight(r, l) > st.u[r] { stats.loglik(r, st.atoms[l]) } else { f64::NEG_INFINITY };
        }
        if lw.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::Numerical(format!("empty label support at row {r} (u = {:e})", st.u[r])));
        }
        st.labels[r] = categorical_log(rng, &lw);
    }
    Ok(())
}

/// Labels with weights as prior mass: ξ_r ∝ w_l Π_t N(y | …, θ_l).
pub fn sample_labels_fixed_l<R: Rng + ?Sized>(st: &mut FactorClusterState, stats: &FactorStats, rng: &mut R) -> Result<()> {
    let mut lw = vec![0.0; st.l];
    for r in 0..st.n() {
        for l in 0..st.l {
            let w = st.weight(r, l);
            lw[l] = if w > 0.0 { w.ln() + stats.loglik(r, st.atoms[l]) } else { f64::NEG_INFINITY };
        }
        if lw.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::Numerical(format!("empty label support at row {r}")));
        }
        st.labels[r] = categorical_log(rng, &lw);
    }
    Ok(())
}

/// θ_l ~ N(Vμ, V), V = [τ + Σ_{r: ξ_r = l} σ_r⁻² Σ_t η_tj²]⁻¹,
/// μ = Σ_{r: ξ_r = l} σ_r⁻² Σ_t η_tj e_rt. Empty clusters reduce to the prior.
pub fn sample_atoms<R: Rng + ?Sized>(st: &mut FactorClusterState, tau: f64, stats: &FactorStats, rng: &mut R) {
    let mut prec = vec![tau; st.l];
    let mut lin = vec![0.0; st.l];
    for r in 0..st.n() {
        let l = st.labels[r];
        prec[l] += stats.inv_s2[r] * stats.s_eta_eta;
        lin[l] += stats.inv_s2[r] * stats.s_e_eta[r];
    }
    for l in 0..st.l {
        let v = 1.0 / prec[l];
        st.atoms[l] = v * lin[l] + v.sqrt() * std_normal(rng);
    }
}

/// Gamma (shape, rate) of the δ_h full conditional given the other δ's.
pub fn delta_conditional(sh: &ShrinkageState, atoms: &[&[f64]], h: usize) -> (f64, f64) {
    let k = sh.delta.len();
    if !sh.use_shrinkage {
        let ss: f64 = atoms[h].iter().map(|t| t * t).sum();
        return (sh.a1 + atoms[h].len() as f64 / 2.0, sh.a2 + 0.5 * ss);
    }
    let a_h = if h == 0 { sh.a1 } else { sh.a2 };
    let mut shape = a_h;
    let mut rate = 1.0;
    for j in h..k {
        shape += atoms[j].len() as f64 / 2.0;
        let prod: f64 = (0..=j).filter(|&x| x != h).map(|x| sh.delta[x]).product();
        let ss: f64 = atoms[j].iter().map(|t| t * t).sum();
        rate += 0.5 * prod * ss;
    }
    (shape, rate)
}

/// Sequential δ_1..δ_k update; `atoms[j]` has length L_j.
pub fn sample_delta<R: Rng + ?Sized>(sh: &mut ShrinkageState, atoms: &[&[f64]], rng: &mut R) {
    for h in 0..sh.delta.len() {
        let (shape, rate) = delta_conditional(sh, atoms, h);
        sh.delta[h] = gamma(rng, shape, rate);
    }
}

/// z_l ~ N(α_l, 1) truncated to ℝ₋ if ξ > l, ℝ₊ if ξ = l, free if ξ < l.
pub fn sample_z<R: Rng + ?Sized>(st: &mut FactorClusterState, rng: &mut R) {
    let n = st.n();
    st.z.resize(st.l - 1, vec![0.0; n]);
    for l in 0..st.l - 1 {
        for r in 0..n {
            let a = st.aidx(r);
            let mean = st.alpha[l][a];
            let xi = st.labels[r];
            st.z[l][a] = if xi > l {
                trunc_normal(rng, mean, 1.0, f64::NEG_INFINITY, 0.0)
            } else if xi == l {
                trunc_normal(rng, mean, 1.0, 0.0, f64::INFINITY)
            } else {
                mean + std_normal(rng)
            };
        }
    }
}

/// Cholesky of the fixed-L block posterior precision I + F⁻¹ ⊗ κ⁻¹, shared by
/// every (j, l) within a sweep.
pub struct BlockPosterior {
    pub chol: Chol,
}

impl BlockPosterior {
    pub fn new(prior: &SpatialPrior, kappa_inv: &DMatrix<f64>) -> Result<BlockPosterior> {
        let fi = prior.precision_dense();
        let mut p = kron(&fi, kappa_inv);
        for d in 0..p.nrows() {
            p[(d, d)] += 1.0;
        }
        Ok(BlockPosterior { chol: chol_jitter(&p)? })
    }

    /// One draw of N(P⁻¹ z, P⁻¹).
    pub fn draw<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Vec<f64> {
        let zv = DVector::from_column_slice(z);
        let mean = self.chol.solve(&zv);
        let e = std_normal_vec(rng, z.len());
        (mean + solve_lt(&self.chol, &e)).iter().copied().collect()
    }
}

/// Fixed-L block update of every α field of one factor.
pub fn sample_alpha_block_fixed_l<R: Rng + ?Sized>(st: &mut FactorClusterState, post: &BlockPosterior, rng: &mut R) {
    for l in 0..st.l - 1 {
        st.alpha[l] = post.draw(&st.z[l], rng);
    }
    st.refresh_weights();
}

/// Admissible interval for α_l at row r under the slice constraint
/// u_r < w_{r,ξ_r}. Quantiles are computed with tail-stable functions, and
/// the ±Q_CLAMP clamp is applied only where it tightens the interval.
pub fn alpha_bounds(st: &FactorClusterState, l: usize, r: usize) -> (f64, f64) {
    let xi = st.labels[r];
    let u = st.u[r];
    let a = st.aidx(r);
    if l > xi {
        return (f64::NEG_INFINITY, f64::INFINITY);
    }
    // Product of the factors of w_ξ other than the one carrying α_l.
    let mut rest = 1.0;
    for q in 0..xi.min(st.l - 1) {
        if q != l {
            rest *= norm_sf(st.alpha[q][a]);
        }
    }
    if l == xi {
        // Φ(α_l) > u / rest.
        let p = u / rest;
        let lo = if p < 0.5 { norm_ppf(p) } else { norm_isf((rest - u) / rest) };
        let lo = if lo < -Q_CLAMP { -Q_CLAMP } else { lo };
        let lo = if lo.is_finite() { lo } else { f64::NEG_INFINITY };
        (lo, f64::INFINITY)
    } else {
        // l < ξ: w_ξ = sf(α_l) · rest · Φ(α_ξ) (no Φ factor when ξ is last).
        if xi < st.l - 1 {
            rest *= norm_cdf(st.alpha[xi][a]);
        }
        // sf(α_l) > u / rest.
        let q = u / rest;
        let hi = if q < 0.5 { norm_isf(q) } else { norm_ppf((rest - u) / rest) };
        let hi = if hi > Q_CLAMP { Q_CLAMP } else { hi };
        let hi = if hi.is_finite() { hi } else { f64::INFINITY };
        (f64::NEG_INFINITY, hi)
    }
}

/// Varying-L block update by rejection from the prior N(0, F ⊗ κ). Returns the
/// number of fields that fell back to the per-site kernel.
pub fn sample_alpha_block_vary_l<R: Rng + ?Sized>(
    st: &mut FactorClusterState,
    prior: &SpatialPrior,
    kappa: &DMatrix<f64>,
    max_attempts: usize,
    rng: &mut R,
) -> Result<usize> {
    let m = st.m;
    let o = st.o;
    let f = match prior {
        SpatialPrior::Independent { m } => DMatrix::identity(*m, *m),
        SpatialPrior::Dense { f, .. } => f.clone(),
        SpatialPrior::Nngp { .. } => crate::linalg::spd_inverse(&prior.precision_dense())?,
    };
    let lf = chol_jitter(&f)?.l();
    let lk = chol_jitter(kappa)?.l();
    let mut fallbacks = 0;
    let q = prior.precision_csr();
    for l in 0..st.l - 1 {
        let bounds: Vec<(f64, f64)> = (0..st.n()).map(|r| alpha_bounds(st, l, r)).collect();
        let mut accepted = None;
        for _ in 0..max_attempts {
            let e = DMatrix::from_fn(o, m, |_, _| std_normal(rng));
            let a = &lk * e * lf.transpose();
            let cand: Vec<f64> = a.as_slice().to_vec();
            let ok = (0..st.n()).all(|r| {
                let v = cand[st.aidx(r)];
                v >= bounds[r].0 && v <= bounds[r].1
            });
            if ok {
                accepted = Some(cand);
                break;
            }
        }
        match accepted {
            Some(c) => {
                st.alpha[l] = c;
                for r in 0..st.n() {
                    st.refresh_row(r);
                }
            }
            None => {
                fallbacks += 1;
                sequential_field_vary_l(st, l, kappa, rng, |a, i| precision_site_coeffs(&q, a, o, i))?;
            }
        }
    }
    Ok(fallbacks)
}

/// NNGP site coefficients: α_i | rest ~ N(a_i / c_i, κ / c_i) with
/// c_i = 1/f_i + Σ_{r: i∈N(r)} b_{r,k}²/f_r and
/// a_i = B_i α_{N(i)}/f_i + Σ_r (b_{r,k}/f_r)(α_r − Σ_{k'≠k} b_{r,k'} α_{N(r)_{k'}}).
pub fn nngp_site_coeffs(graph: &NeighborGraph, local: &LocalFactors, a: &[f64], o: usize, i: usize) -> (f64, Vec<f64>) {
    let mut c = 1.0 / local.f[i];
    let mut acc = vec![0.0; o];
    for (k, &j) in graph.neighbors[i].iter().enumerate() {
        let b = local.b[i][k] / local.f[i];
        for p in 0..o {
            acc[p] += b * a[j * o + p];
        }
    }
    for (idx, &r) in graph.reverse[i].iter().enumerate() {
        let k = graph.reverse_pos[i][idx];
        let brk = local.b[r][k];
        let fr = local.f[r];
        c += brk * brk / fr;
        let mut e: Vec<f64> = a[r * o..(r + 1) * o].to_vec();
        for (kk, &j) in graph.neighbors[r].iter().enumerate() {
            if kk != k {
                let b = local.b[r][kk];
                for p in 0..o {
                    e[p] -= b * a[j * o + p];
                }
            }
        }
        for p in 0..o {
            acc[p] += brk / fr * e[p];
        }
    }
    (c, acc)
}

/// Site-by-site fixed-L update of one field: precision I_O + c_i κ⁻¹ and
/// linear term z_i + κ⁻¹ a_i.
fn sequential_field_fixed_l<R: Rng + ?Sized, F>(st: &mut FactorClusterState, l: usize, kappa_inv: &DMatrix<f64>, rng: &mut R, coeffs: F)
where
    F: Fn(&[f64], usize) -> (f64, Vec<f64>),
{
    let o = st.o;
    for i in 0..st.m {
        let (c, a) = coeffs(&st.alpha[l], i);
        let av = DVector::from_column_slice(&a);
        let mut prec = kappa_inv * c;
        for d in 0..o {
            prec[(d, d)] += 1.0;
        }
        let lin = DVector::from_column_slice(&st.z[l][i * o..(i + 1) * o]) + kappa_inv * av;
        let draw = if o == 1 {
            let v = 1.0 / prec[(0, 0)];
            vec![v * lin[0] + v.sqrt() * std_normal(rng)]
        } else {
            crate::dist::mvn_precision(rng, &prec, &lin).expect("site precision is positive definite").iter().copied().collect()
        };
        st.alpha[l][i * o..(i + 1) * o].copy_from_slice(&draw);
    }
}

/// Site-by-site varying-L update of one field: N(a_i/c_i, κ/c_i) with each
/// coordinate truncated to its admissible interval (coordinate-wise Gibbs when
/// O > 1). Weights of the touched rows are refreshed after every draw.
fn sequential_field_vary_l<R: Rng + ?Sized, F>(st: &mut FactorClusterState, l: usize, kappa: &DMatrix<f64>, rng: &mut R, coeffs: F) -> Result<()>
where
    F: Fn(&[f64], usize) -> (f64, Vec<f64>),
{
    let o = st.o;
    let kinv = crate::linalg::spd_inverse(kappa)?;
    for i in 0..st.m {
        let (c, a) = coeffs(&st.alpha[l], i);
        let mean: Vec<f64> = a.iter().map(|v| v / c).collect();
        for p in 0..o {
            // Conditional of coordinate p given the others under precision c κ⁻¹.
            let lam_pp = c * kinv[(p, p)];
            let mut cm = mean[p];
            for q in 0..o {
                if q != p {
                    cm -= c * kinv[(p, q)] / lam_pp * (st.alpha[l][i * o + q] - mean[q]);
                }
            }
            let r = st.row(i, p);
            let (lo, hi) = alpha_bounds(st, l, r);
            let x = trunc_normal(rng, cm, 1.0 / lam_pp, lo, hi);
            assert!(x >= lo && x <= hi, "truncated draw {x} outside [{lo}, {hi}]");
            st.alpha[l][i * o + p] = x;
            st.refresh_row(r);
        }
    }
    Ok(())
}

/// Sequential NNGP kernel over all fields of one factor.
pub fn sample_alpha_sequential<R: Rng + ?Sized>(
    st: &mut FactorClusterState,
    graph: &NeighborGraph,
    local: &LocalFactors,
    kappa: &DMatrix<f64>,
    vary_l: bool,
    rng: &mut R,
) -> Result<()> {
    let o = st.o;
    if vary_l {
        for l in 0..st.l - 1 {
            sequential_field_vary_l(st, l, kappa, rng, |a, i| nngp_site_coeffs(graph, local, a, o, i))?;
        }
    } else {
        let kinv = crate::linalg::spd_inverse(kappa)?;
        for l in 0..st.l - 1 {
            sequential_field_fixed_l(st, l, &kinv, rng, |a, i| nngp_site_coeffs(graph, local, a, o, i));
        }
        st.refresh_weights();
    }
    Ok(())
}

/// Prior draw of a site-major field from N(0, F ⊗ κ).
pub fn draw_prior_field<R: Rng + ?Sized>(prior: &SpatialPrior, kappa: &DMatrix<f64>, rng: &mut R) -> Result<Vec<f64>> {
    let m = prior.m();
    let o = kappa.nrows();
    let lk = chol_jitter(kappa)?.l();
    let e = DMatrix::from_fn(o, m, |_, _| std_normal(rng));
    let a = match prior {
        SpatialPrior::Independent { .. } => &lk * e,
        SpatialPrior::Dense { chol, .. } => &lk * e * chol.l().transpose(),
        SpatialPrior::Nngp { graph, local, .. } => {
            // Sequential draw following the DAG: α_i = Σ b α_N + √f_i ε_i.
            let mut a = vec![0.0; m * o];
            let ek = &lk * e;
            for i in 0..m {
                for p in 0..o {
                    let mut v = local.f[i].sqrt() * ek[(p, i)];
                    for (k, &j) in graph.neighbors[i].iter().enumerate() {
                        v += local.b[i][k] * a[j * o + p];
                    }
                    a[i * o + p] = v;
                }
            }
            return Ok(a);
        }
    };
    Ok(a.as_slice().to_vec())
}

/// Fresh state with α from the prior and labels uniform on 1..L.
pub fn init_state<R: Rng + ?Sized>(
    m: usize,
    o: usize,
    l: usize,
    tau: f64,
    prior: &SpatialPrior,
    kappa: &DMatrix<f64>,
    vary_l: bool,
    rng: &mut R,
) -> Result<FactorClusterState> {
    let n = m * o;
    let atoms = (0..l).map(|_| std_normal(rng) / tau.sqrt()).collect();
    let mut alpha = Vec::with_capacity(l.saturating_sub(1));
    for _ in 1..l {
        alpha.push(draw_prior_field(prior, kappa, rng)?);
    }
    let labels = (0..n).map(|_| rng.random_range(0..l)).collect();
    let mut st = FactorClusterState {
        m,
        o,
        l,
        atoms,
        alpha,
        weights: vec![],
        labels,
        u: vec![],
        z: vec![],
    };
    st.refresh_weights();
    if !vary_l {
        st.z = st.alpha.clone();
    }
    Ok(st)
}
