//! Composition sampling from the posterior predictive at future time points
//! and at new locations. Each kept iteration draws from its own random stream,
//! so iterations can be evaluated in any order.

use nalgebra::DMatrix;
use rand_chacha::ChaCha20Rng;

use crate::covspatial::{cross_f, dist, distance_matrix, SpatialKind};
use crate::covtemporal::extension_coeffs;
use crate::data::Dataset;
use crate::dist::{categorical, inv_gamma, std_normal};
use crate::error::{spec as spec_err, Result};
use crate::gibbs::{ModelSpec, PosteriorStore, Sample, Variant};
use crate::linalg::{chol_jitter, symmetrize};
use crate::nngp::{krige_factors, KrigeFactor};
use crate::psbp::weights_from_alpha;
use crate::rng::{stream_rng, Stream};

fn iter_rng(seed: u64, w: usize) -> ChaCha20Rng {
    stream_rng(seed, w as u32, Stream::Predict)
}

fn check_covariates(x: Option<&[DMatrix<f64>]>, rows: usize, cols_t: usize, p: usize) -> Result<()> {
    match x {
        None if p > 0 => spec_err(format!("model has {p} covariates; prediction targets need them too")),
        None => Ok(()),
        Some(x) => {
            if p == 0 {
                return spec_err("covariates supplied but the model has none");
            }
            if x.len() != cols_t || x.iter().any(|b| b.nrows() != rows || b.ncols() != p) {
                return spec_err(format!("target covariates must be {cols_t} blocks of {rows}x{p}"));
            }
            Ok(())
        }
    }
}

/// Per kept iteration, a (m·O) × q matrix of draws of y at `new_times`.
/// `x_new`, when the model has covariates, holds one (m·O) × p block per new
/// time.
pub fn predict_future(
    store: &PosteriorStore,
    spec: &ModelSpec,
    data: &Dataset,
    new_times: &[f64],
    x_new: Option<&[DMatrix<f64>]>,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    let q = new_times.len();
    if q == 0 {
        return spec_err("no future time points requested");
    }
    let tmax = data.timepoints.last().copied().unwrap_or(f64::NEG_INFINITY);
    if new_times[0] <= tmax || new_times.windows(2).any(|w| !(w[1] > w[0])) {
        return spec_err("future time points must be increasing and after the last observed time");
    }
    check_covariates(x_new, data.n(), q, data.p())?;
    let n = data.n();
    let k = spec.k;
    let mut out = Vec::with_capacity(store.samples.len());
    for (w, s) in store.samples.iter().enumerate() {
        let mut rng = iter_rng(seed, w);
        let ts = spec.temporal.with_psi(s.psi);
        let (hp, hs) = extension_coeffs(&ts, new_times)?;
        let mean = &hp * &s.eta;
        let lh = chol_jitter(&hs)?.l();
        let lu = chol_jitter(&s.upsilon)?.l();
        let z = DMatrix::from_fn(q, k, |_, _| std_normal(&mut rng));
        let eta_new = mean + lh * z * lu.transpose();
        let mut y = &s.loadings * eta_new.transpose();
        for c in 0..q {
            for r in 0..n {
                if let Some(x) = x_new {
                    y[(r, c)] += (0..data.p()).map(|a| x[c][(r, a)] * s.beta[a]).sum::<f64>();
                }
                y[(r, c)] += s.sigma2[r].sqrt() * std_normal(&mut rng);
            }
        }
        out.push(y);
    }
    Ok(out)
}

/// How the latent fields are extended to new sites for a given spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialPath {
    Independent,
    Dense,
    Nngp,
}

pub fn spatial_path(spec: &ModelSpec) -> SpatialPath {
    if spec.spatial.kind == SpatialKind::Independent {
        SpatialPath::Independent
    } else if spec.variant.nngp() || (spec.variant == Variant::Baseline && spec.baseline_nngp) {
        SpatialPath::Nngp
    } else {
        SpatialPath::Dense
    }
}

/// Joint-normal kriging operator B = F_no F_oo⁻¹ (r×m) and conditional
/// correlation F_nn − B F_on (r×r).
pub fn dense_krige(reference: &[Vec<f64>], new_points: &[Vec<f64>], rho: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = distance_matrix(reference)?;
    let foo = d.map(|v| (-rho * v).exp());
    let fno = cross_f(rho, new_points, reference);
    let fnn = cross_f(rho, new_points, new_points);
    let c = chol_jitter(&foo)?;
    let b = c.solve(&fno.transpose()).transpose();
    let mut cond = fnn - &b * fno.transpose();
    symmetrize(&mut cond);
    Ok((b, cond))
}

/// Extends site-major fields on the reference sites to the new sites.
struct Extender {
    path: SpatialPath,
    o: usize,
    r: usize,
    /// Dense path: kriging operator restricted to non-coincident points and
    /// the lower factor of their conditional correlation.
    dense: Option<(DMatrix<f64>, DMatrix<f64>)>,
    /// Index of the reference site each new point coincides with, if any.
    copy_of: Vec<Option<usize>>,
    /// New points that are kriged (not copied), in order.
    free: Vec<usize>,
    nngp: Vec<KrigeFactor>,
}

impl Extender {
    fn new(path: SpatialPath, reference: &[Vec<f64>], new_points: &[Vec<f64>], o: usize, h: usize, rho: f64) -> Result<Extender> {
        let copy_of: Vec<Option<usize>> = new_points
            .iter()
            .map(|p| reference.iter().position(|q| dist(p, q) == 0.0))
            .collect();
        let free: Vec<usize> = (0..new_points.len()).filter(|&i| copy_of[i].is_none()).collect();
        let mut ext = Extender { path, o, r: new_points.len(), dense: None, copy_of, free, nngp: vec![] };
        match path {
            SpatialPath::Independent => {}
            SpatialPath::Dense => {
                if !ext.free.is_empty() {
                    let pts: Vec<Vec<f64>> = ext.free.iter().map(|&i| new_points[i].clone()).collect();
                    let (b, cond) = dense_krige(reference, &pts, rho)?;
                    let l = chol_jitter(&cond)?.l();
                    ext.dense = Some((b, l));
                }
            }
            SpatialPath::Nngp => {
                ext.nngp = krige_factors(reference, new_points, h, rho)?;
            }
        }
        Ok(ext)
    }

    /// Draw a new-site field (site-major, length r·O) given a reference field.
    fn draw(&self, a: &[f64], lk: &DMatrix<f64>, rng: &mut ChaCha20Rng) -> Vec<f64> {
        let o = self.o;
        let mut out = vec![0.0; self.r * o];
        match self.path {
            SpatialPath::Independent => {
                for i in 0..self.r {
                    let z: Vec<f64> = (0..o).map(|_| std_normal(rng)).collect();
                    for p in 0..o {
                        out[i * o + p] = (0..o).map(|q| lk[(p, q)] * z[q]).sum();
                    }
                }
            }
            SpatialPath::Dense => {
                for (i, c) in self.copy_of.iter().enumerate() {
                    if let Some(j) = c {
                        out[i * o..(i + 1) * o].copy_from_slice(&a[j * o..(j + 1) * o]);
                    }
                }
                if let Some((b, lf)) = &self.dense {
                    let m = b.ncols();
                    let rf = self.free.len();
                    let aobs = DMatrix::from_column_slice(o, m, a);
                    let z = DMatrix::from_fn(o, rf, |_, _| std_normal(rng));
                    let anew = &aobs * b.transpose() + lk * z * lf.transpose();
                    for (c, &i) in self.free.iter().enumerate() {
                        for p in 0..o {
                            out[i * o + p] = anew[(p, c)];
                        }
                    }
                }
            }
            SpatialPath::Nngp => {
                for (i, kf) in self.nngp.iter().enumerate() {
                    let z: Vec<f64> = (0..o).map(|_| std_normal(rng)).collect();
                    let sf = kf.f.sqrt();
                    for p in 0..o {
                        let mut v: f64 = kf.neighbors.iter().zip(&kf.b).map(|(&j, &bk)| bk * a[j * o + p]).sum();
                        if !kf.degenerate {
                            v += sf * (0..o).map(|q| lk[(p, q)] * z[q]).sum::<f64>();
                        }
                        out[i * o + p] = v;
                    }
                }
            }
        }
        out
    }
}

/// Loadings at the new sites for one iteration, (r·O) × k with rows o·r + i.
fn new_loadings(
    s: &Sample,
    spec: &ModelSpec,
    ext: &Extender,
    m: usize,
    o: usize,
    rng: &mut ChaCha20Rng,
) -> Result<DMatrix<f64>> {
    let r = ext.r;
    let k = spec.k;
    let lk = chol_jitter(&s.kappa)?.l();
    let mut lam = DMatrix::zeros(r * o, k);
    for j in 0..k {
        if spec.variant.clustering() {
            let f = &s.factors[j];
            let fields: Vec<Vec<f64>> = f.alpha.iter().map(|a| ext.draw(a, &lk, rng)).collect();
            for i in 0..r {
                for p in 0..o {
                    let al: Vec<f64> = fields.iter().map(|v| v[i * o + p]).collect();
                    let w = weights_from_alpha(&al);
                    let label = categorical(rng, &w);
                    lam[(p * r + i, j)] = f.atoms[label];
                }
            }
        } else {
            let col: Vec<f64> = s.loadings.column(j).iter().copied().collect();
            let mut a = vec![0.0; m * o];
            for p in 0..o {
                for i in 0..m {
                    a[i * o + p] = col[p * m + i];
                }
            }
            let v = ext.draw(&a, &lk, rng);
            for i in 0..r {
                for p in 0..o {
                    lam[(p * r + i, j)] = v[i * o + p];
                }
            }
        }
    }
    Ok(lam)
}

/// Per kept iteration, an (r·O) × T matrix of draws of y at the new sites
/// (rows o·r + i). `x_new`, when the model has covariates, holds one
/// (r·O) × p block per observed time.
pub fn predict_locations(
    store: &PosteriorStore,
    spec: &ModelSpec,
    data: &Dataset,
    new_coords: &[Vec<f64>],
    x_new: Option<&[DMatrix<f64>]>,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    let r = new_coords.len();
    if r == 0 {
        return spec_err("no new locations requested");
    }
    let dim = data.coords[0].len();
    if new_coords.iter().any(|c| c.len() != dim) {
        return spec_err(format!("new locations must have dimension {dim}"));
    }
    let o = data.o;
    let m = data.m();
    let tl = data.t();
    check_covariates(x_new, r * o, tl, data.p())?;
    let path = spatial_path(spec);
    let (a, b) = (spec.priors.a, spec.priors.b);
    let mut out = Vec::with_capacity(store.samples.len());
    for (w, s) in store.samples.iter().enumerate() {
        let mut rng = iter_rng(seed, w);
        let ext = Extender::new(path, &data.coords, new_coords, o, spec.h, s.rho)?;
        let lam = new_loadings(s, spec, &ext, m, o, &mut rng)?;
        let sig: Vec<f64> = (0..r * o).map(|_| inv_gamma(&mut rng, a, b)).collect();
        let mut y = &lam * s.eta.transpose();
        for t in 0..tl {
            for row in 0..r * o {
                if let Some(x) = x_new {
                    y[(row, t)] += (0..data.p()).map(|c| x[t][(row, c)] * s.beta[c]).sum::<f64>();
                }
                y[(row, t)] += sig[row].sqrt() * std_normal(&mut rng);
            }
        }
        out.push(y);
    }
    Ok(out)
}
