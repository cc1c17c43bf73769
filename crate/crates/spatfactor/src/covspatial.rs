//! Spatial correlation F(ρ) = exp(−ρD) and the bounded-interval logit
//! transform used by the ρ and ψ Metropolis steps.

use nalgebra::DMatrix;

use crate::error::{spec, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialKind {
    Independent,
    Exponential,
}

impl SpatialKind {
    pub fn name(self) -> &'static str {
        match self {
            SpatialKind::Independent => "independent",
            SpatialKind::Exponential => "exponential",
        }
    }

    pub fn parse(s: &str) -> Option<SpatialKind> {
        match s {
            "independent" => Some(SpatialKind::Independent),
            "exponential" | "continuous" | "continuous_exponential" => Some(SpatialKind::Exponential),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSpec {
    pub kind: SpatialKind,
    pub rho: f64,
    pub coords: Vec<Vec<f64>>,
    pub bounds: (f64, f64),
}

impl SpatialSpec {
    pub fn new(kind: SpatialKind, rho: f64, coords: Vec<Vec<f64>>, bounds: Option<(f64, f64)>) -> Result<SpatialSpec> {
        let bounds = match bounds {
            Some(b) => b,
            None => default_bounds(&coords)?,
        };
        let s = SpatialSpec { kind, rho, coords, bounds };
        s.validate()?;
        Ok(s)
    }

    pub fn m(&self) -> usize {
        self.coords.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return spec("no spatial locations");
        }
        let dim = self.coords[0].len();
        if self.coords.iter().any(|c| c.len() != dim) {
            return spec("coordinates of mixed dimension");
        }
        if self.kind == SpatialKind::Exponential {
            let (a, b) = self.bounds;
            if !(a > 0.0 && a < b && b.is_finite()) {
                return spec(format!("invalid rho bounds ({a}, {b})"));
            }
            if !(self.rho > a && self.rho < b) {
                return spec(format!("rho {} outside bounds ({a}, {b})", self.rho));
            }
        }
        Ok(())
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean distance matrix; duplicate points are rejected.
pub fn distance_matrix(coords: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let m = coords.len();
    let mut d = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..i {
            let v = dist(&coords[i], &coords[j]);
            if v == 0.0 {
                return Err(Error::Data(format!("locations {} and {} coincide", j + 1, i + 1)));
            }
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

pub fn corr(rho: f64, d: f64) -> f64 {
    (-rho * d).exp()
}

/// Elementwise exp(−ρD), or the identity for the independent kind.
pub fn build_f(kind: SpatialKind, rho: f64, d: &DMatrix<f64>) -> DMatrix<f64> {
    match kind {
        SpatialKind::Independent => DMatrix::identity(d.nrows(), d.ncols()),
        SpatialKind::Exponential => d.map(|v| corr(rho, v)),
    }
}

/// Cross-correlation between two point sets.
pub fn cross_f(rho: f64, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| corr(rho, dist(&a[i], &b[j])))
}

/// Default (a, b): a = 1e−3, b puts correlation 0.01 at the closest pair.
pub fn default_bounds(coords: &[Vec<f64>]) -> Result<(f64, f64)> {
    let mut dmin = f64::INFINITY;
    for i in 0..coords.len() {
        for j in 0..i {
            let v = dist(&coords[i], &coords[j]);
            if v > 0.0 && v < dmin {
                dmin = v;
            }
        }
    }
    if !dmin.is_finite() {
        // A single location: any positive range works.
        dmin = 1.0;
    }
    Ok((1e-3, -(0.01f64).ln() / dmin))
}

/// Bounds for ψ from the minimum time spacing, same rule as for ρ. For the
/// ar1 family ψ itself is a correlation, so the bounds are (0, 1).
pub fn default_psi_bounds(psi_is_rho: bool, timepoints: &[f64]) -> (f64, f64) {
    if psi_is_rho {
        return (0.0, 1.0);
    }
    let dmin = timepoints
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let dmin = if dmin.is_finite() && dmin > 0.0 { dmin } else { 1.0 };
    (1e-3, -(0.01f64).ln() / dmin)
}

/// Δ = ln((x − a)/(b − x)).
pub fn interval_logit(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(x > a && x < b) {
        return Err(Error::Spec(format!("{x} outside ({a}, {b})")));
    }
    Ok(((x - a) / (b - x)).ln())
}

/// x = (b e^Δ + a)/(1 + e^Δ), written to stay finite for large |Δ|.
pub fn interval_logit_inv(delta: f64, a: f64, b: f64) -> f64 {
    if delta >= 0.0 {
        let e = (-delta).exp();
        (b + a * e) / (1.0 + e)
    } else {
        let e = delta.exp();
        (b * e + a) / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// ln |dx/dΔ| up to the additive constant ln(b − a).
pub fn log_jacobian(delta: f64) -> f64 {
    delta - 2.0 * log1p_exp(delta)
}
