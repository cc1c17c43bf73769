//! Temporal correlation structures H(ψ) with closed-form precision, inverse
//! Cholesky factor, log-determinant and leave-one-out conditional
//! coefficients for equispaced grids. Non-equispaced grids go through dense
//! linear algebra.
//!
//! Time indices are 0-based throughout. A vector "indexed by −t" has length
//! T−1 and lists every time except t in increasing order, so time s sits at
//! position s when s < t and at s−1 when s > t.

use nalgebra::DMatrix;

use crate::error::{spec, Error, Result};
use crate::linalg::{chol_exact, Csr};

/// Smallest admissible distance of ρ from 0 and 1.
pub const RHO_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalKind {
    Independent,
    Ar1,
    Exponential,
    Sar1,
    Sexponential,
}

impl TemporalKind {
    pub fn is_seasonal(self) -> bool {
        matches!(self, TemporalKind::Sar1 | TemporalKind::Sexponential)
    }

    /// ρ = ψ for the ar1 family, ρ = e^{−ψ} for the exponential family.
    pub fn psi_is_rho(self) -> bool {
        matches!(self, TemporalKind::Ar1 | TemporalKind::Sar1)
    }

    pub fn name(self) -> &'static str {
        match self {
            TemporalKind::Independent => "independent",
            TemporalKind::Ar1 => "ar1",
            TemporalKind::Exponential => "exponential",
            TemporalKind::Sar1 => "sar1",
            TemporalKind::Sexponential => "sexponential",
        }
    }

    pub fn parse(s: &str) -> Option<TemporalKind> {
        Some(match s {
            "independent" => TemporalKind::Independent,
            "ar1" => TemporalKind::Ar1,
            "exponential" => TemporalKind::Exponential,
            "sar1" => TemporalKind::Sar1,
            "sexponential" => TemporalKind::Sexponential,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSpec {
    pub kind: TemporalKind,
    pub psi: f64,
    /// Seasonal period d. Always 1 for non-seasonal kinds; seasonal kinds
    /// accept d = 1, which reproduces the non-seasonal matrix.
    pub period: usize,
    pub timepoints: Vec<f64>,
    pub equispaced: bool,
}

impl TemporalSpec {
    /// Unit-spaced grid 1..=T.
    pub fn equispaced(kind: TemporalKind, psi: f64, period: usize, t: usize) -> Result<TemporalSpec> {
        let s = TemporalSpec {
            kind,
            psi,
            period,
            timepoints: (1..=t).map(|v| v as f64).collect(),
            equispaced: true,
        };
        s.validate()?;
        Ok(s)
    }

    /// Arbitrary increasing grid. `equispaced = true` requires unit spacing.
    pub fn with_timepoints(kind: TemporalKind, psi: f64, period: usize, timepoints: Vec<f64>, equispaced: bool) -> Result<TemporalSpec> {
        let s = TemporalSpec { kind, psi, period, timepoints, equispaced };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.timepoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timepoints.is_empty()
    }

    pub fn with_psi(&self, psi: f64) -> TemporalSpec {
        TemporalSpec { psi, ..self.clone() }
    }

    pub fn rho(&self) -> f64 {
        if self.kind.psi_is_rho() {
            self.psi
        } else {
            (-self.psi).exp()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timepoints.is_empty() {
            return spec("temporal grid is empty");
        }
        if self.timepoints.windows(2).any(|w| !(w[1] > w[0])) {
            return spec("timepoints must be strictly increasing");
        }
        if self.equispaced {
            for w in self.timepoints.windows(2) {
                if ((w[1] - w[0]) - 1.0).abs() > 1e-9 {
                    return spec("equispaced grid must have unit spacing");
                }
            }
        }
        if self.period == 0 {
            return spec("seasonal period must be at least 1");
        }
        if !self.kind.is_seasonal() && self.period != 1 {
            return spec(format!("period {} given for non-seasonal kind {}", self.period, self.kind.name()));
        }
        if self.kind == TemporalKind::Independent {
            return Ok(());
        }
        if !self.psi.is_finite() {
            return spec("psi must be finite");
        }
        let rho = self.rho();
        if !(rho > RHO_EPS && rho < 1.0 - RHO_EPS) {
            return spec(format!("derived rho {rho} outside (0, 1)"));
        }
        Ok(())
    }

    /// True when the period leaves every chain of length one (H is the
    /// identity); legal but worth a warning.
    pub fn degenerate_period(&self) -> bool {
        self.kind.is_seasonal() && self.period > self.len().saturating_sub(1)
    }
}

/// Dense T×T correlation matrix.
pub fn build_h(s: &TemporalSpec) -> Result<DMatrix<f64>> {
    s.validate()?;
    let t = s.len();
    if s.kind == TemporalKind::Independent {
        return Ok(DMatrix::identity(t, t));
    }
    let rho = s.rho();
    let d = s.period;
    let h = DMatrix::from_fn(t, t, |a, b| {
        if s.kind.is_seasonal() {
            let lag = a.abs_diff(b);
            if lag % d == 0 {
                rho.powi((lag / d) as i32)
            } else {
                0.0
            }
        } else {
            rho.powf((s.timepoints[a] - s.timepoints[b]).abs())
        }
    });
    Ok(h)
}

#[derive(Debug, Clone)]
pub struct TemporalFactors {
    /// H⁻¹.
    pub precision: Csr,
    /// Upper-triangular [Chol(H)]⁻¹ with rooti · rootiᵀ = H⁻¹.
    pub rooti: Csr,
    /// ln det H.
    pub logdet: f64,
}

/// Closed-form sparse factors on a unit-spaced grid. Time t's chain
/// predecessor is t−d; a chain of length one contributes a unit diagonal.
pub fn closed_factors(s: &TemporalSpec) -> Result<TemporalFactors> {
    s.validate()?;
    if !s.equispaced {
        return spec("closed-form factors need an equispaced grid; use dense_factors");
    }
    if s.kind == TemporalKind::Independent {
        return spec("closed-form factors are defined for correlated kinds only");
    }
    let t = s.len();
    let d = if s.kind.is_seasonal() { s.period } else { 1 };
    let rho = s.rho();
    let one_m = 1.0 - rho * rho;
    let inv_sd = 1.0 / one_m.sqrt();

    let mut rt = Vec::with_capacity(2 * t);
    for c in 0..t {
        if c < d {
            rt.push((c, c, 1.0));
        } else {
            rt.push((c, c, inv_sd));
            rt.push((c - d, c, -rho * inv_sd));
        }
    }
    let rooti = Csr::from_triplets(t, t, rt);

    // precision = rooti rootiᵀ, accumulated column by column.
    let mut pt = Vec::with_capacity(3 * t);
    for c in 0..t {
        let diag = rooti.get(c, c);
        pt.push((c, c, diag * diag));
        if c >= d {
            let up = rooti.get(c - d, c);
            pt.push((c - d, c - d, up * up));
            pt.push((c - d, c, up * diag));
            pt.push((c, c - d, up * diag));
        }
    }
    let precision = Csr::from_triplets(t, t, pt);
    let logdet = (t.saturating_sub(d.min(t))) as f64 * one_m.ln();
    Ok(TemporalFactors { precision, rooti, logdet })
}

/// Dense fallback: factorize build_H directly.
pub fn dense_factors(s: &TemporalSpec) -> Result<TemporalFactors> {
    let h = build_h(s)?;
    let t = h.nrows();
    let c = chol_exact(&h)?;
    let l = c.l();
    let logdet = 2.0 * (0..t).map(|i| l[(i, i)].ln()).sum::<f64>();
    // Upper factor U = Lᵀ, rooti = U⁻¹.
    let u = l.transpose();
    let rooti_d = u
        .solve_upper_triangular(&DMatrix::identity(t, t))
        .ok_or_else(|| Error::Numerical("singular temporal factor".into()))?;
    let prec_d = &rooti_d * rooti_d.transpose();
    Ok(TemporalFactors {
        precision: dense_to_csr(&prec_d),
        rooti: dense_to_csr(&rooti_d),
        logdet,
    })
}

fn dense_to_csr(a: &DMatrix<f64>) -> Csr {
    let mut trip = Vec::new();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if a[(i, j)] != 0.0 {
                trip.push((i, j, a[(i, j)]));
            }
        }
    }
    Csr::from_triplets(a.nrows(), a.ncols(), trip)
}

/// Factors by the cheapest valid route.
pub fn factors(s: &TemporalSpec) -> Result<TemporalFactors> {
    if s.kind == TemporalKind::Independent {
        s.validate()?;
        let t = s.len();
        return Ok(TemporalFactors { precision: Csr::identity(t), rooti: Csr::identity(t), logdet: 0.0 });
    }
    if s.equispaced {
        closed_factors(s)
    } else {
        dense_factors(s)
    }
}

/// Conditional law η_t | η_{−t}: mean (H⁺_t ⊗ I) η_{−t}, covariance H*_t Υ.
#[derive(Debug, Clone, PartialEq)]
pub struct CondCoeffs {
    pub t: usize,
    /// Nonzero entries of H⁺_t as (position in the −t vector, value).
    pub hplus: Vec<(usize, f64)>,
    pub hstar: f64,
}

impl CondCoeffs {
    /// Nonzeros keyed by absolute time index instead of −t position.
    pub fn by_time(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.hplus.iter().map(move |&(p, v)| (if p < self.t { p } else { p + 1 }, v))
    }

    /// Dense length T−1 vector.
    pub fn dense(&self, tlen: usize) -> Vec<f64> {
        let mut v = vec![0.0; tlen.saturating_sub(1)];
        for &(p, x) in &self.hplus {
            v[p] = x;
        }
        v
    }
}

/// Conditional coefficients for time t (0-based).
pub fn conditional_coeffs(s: &TemporalSpec, t: usize) -> Result<CondCoeffs> {
    s.validate()?;
    let tl = s.len();
    if t >= tl {
        return Err(Error::Spec(format!("time index {t} out of range for T = {tl}")));
    }
    if s.kind == TemporalKind::Independent {
        return Ok(CondCoeffs { t, hplus: vec![], hstar: 1.0 });
    }
    if !s.equispaced {
        return conditional_coeffs_dense(s, t);
    }
    let d = if s.kind.is_seasonal() { s.period } else { 1 };
    let rho = s.rho();
    let prev = t >= d;
    let next = t + d < tl;
    let (hplus, hstar) = match (prev, next) {
        (true, true) => {
            let c = rho / (1.0 + rho * rho);
            (vec![(t - d, c), (t + d - 1, c)], (1.0 - rho * rho) / (1.0 + rho * rho))
        }
        (false, true) => (vec![(t + d - 1, rho)], 1.0 - rho * rho),
        (true, false) => (vec![(t - d, rho)], 1.0 - rho * rho),
        (false, false) => (vec![], 1.0),
    };
    Ok(CondCoeffs { t, hplus, hstar })
}

/// Dense definition H⁺_t = H_{t,−t} H_{−t,−t}⁻¹, H*_t = H_tt − H⁺_t H_{−t,t}.
pub fn conditional_coeffs_dense(s: &TemporalSpec, t: usize) -> Result<CondCoeffs> {
    let h = build_h(s)?;
    let tl = h.nrows();
    if t >= tl {
        return Err(Error::Spec(format!("time index {t} out of range for T = {tl}")));
    }
    if tl == 1 {
        return Ok(CondCoeffs { t, hplus: vec![], hstar: 1.0 });
    }
    let idx: Vec<usize> = (0..tl).filter(|&s| s != t).collect();
    let hmm = DMatrix::from_fn(tl - 1, tl - 1, |a, b| h[(idx[a], idx[b])]);
    let hmt = DMatrix::from_fn(tl - 1, 1, |a, _| h[(idx[a], t)]);
    let c = chol_exact(&hmm)?;
    let coef = c.solve(&hmt);
    let hstar = h[(t, t)] - (hmt.transpose() * &coef)[(0, 0)];
    let hplus = (0..tl - 1).filter(|&p| coef[(p, 0)] != 0.0).map(|p| (p, coef[(p, 0)])).collect();
    Ok(CondCoeffs { t, hplus, hstar })
}

pub fn all_conditional_coeffs(s: &TemporalSpec) -> Result<Vec<CondCoeffs>> {
    (0..s.len()).map(|t| conditional_coeffs(s, t)).collect()
}

/// Extension to future times: returns (H⁺, H*) with H⁺ = H_{new,old} H_old⁻¹
/// (q×T) and H* = H_{new,new} − H⁺ H_{old,new} (q×q). Uses the closed-form
/// H_old⁻¹ when the grid is equispaced.
pub fn extension_coeffs(s: &TemporalSpec, new_times: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let t = s.len();
    let q = new_times.len();
    if q == 0 {
        return spec("no future time points requested");
    }
    if s.kind == TemporalKind::Independent {
        return Ok((DMatrix::zeros(q, t), DMatrix::identity(q, q)));
    }
    let mut all = s.timepoints.clone();
    all.extend_from_slice(new_times);
    let equi = s.equispaced
        && all.windows(2).all(|w| ((w[1] - w[0]) - 1.0).abs() <= 1e-9);
    let ext = TemporalSpec::with_timepoints(s.kind, s.psi, s.period, all, equi)?;
    let h = build_h(&ext)?;
    let prec_old = factors(s)?.precision.to_dense();
    let h_no = h.view((t, 0), (q, t)).into_owned();
    let h_nn = h.view((t, t), (q, q)).into_owned();
    let hp = &h_no * &prec_old;
    let mut hs = h_nn - &hp * h_no.transpose();
    crate::linalg::symmetrize(&mut hs);
    Ok((hp, hs))
}
