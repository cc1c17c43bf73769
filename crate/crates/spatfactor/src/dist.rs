//! Scalar and matrix samplers used by the Gibbs kernels.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::linalg::{chol_jitter, solve_lt, spd_inverse, symmetrize};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Quantile clamp for truncation bounds.
pub const Q_CLAMP: f64 = 8.2;

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail 1 − Φ(x), accurate in the right tail.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Φ⁻¹(p), accurate in the left tail.
pub fn norm_ppf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    // One Newton step; erfc_inv alone is good to about 1e-11.
    let pdf = (-0.5 * x * x - 0.5 * LN_2PI).exp();
    if !(pdf > 0.0) || !x.is_finite() {
        return x;
    }
    let err = if p < 0.5 { norm_cdf(x) - p } else { (1.0 - p) - norm_sf(x) };
    x - err / pdf
}

/// Φ⁻¹(1 − q), accurate when q is small.
pub fn norm_isf(q: f64) -> f64 {
    -norm_ppf(q)
}

pub fn norm_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn std_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| std_normal(rng)))
}

/// Uniform on (0, 1), never returning 0.
pub fn uniform_open<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Standard normal restricted to [a, b] by inverse CDF. The upper tail is
/// handled through the survival function so bounds far out stay exact.
pub fn trunc_std_normal<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    assert!(a < b || (a == b && a.is_finite()), "empty truncation interval [{a}, {b}]");
    if a == b {
        return a;
    }
    let u = uniform_open(rng);
    let x = if a >= 0.0 {
        let (sa, sb) = (norm_sf(a), norm_sf(b));
        let mass = sa - sb;
        if !(mass > 0.0) {
            return tail_exponential(rng, a, b);
        }
        norm_isf(sb + u * mass)
    } else if b <= 0.0 {
        let (ca, cb) = (norm_cdf(a), norm_cdf(b));
        let mass = cb - ca;
        if !(mass > 0.0) {
            return -tail_exponential(rng, -b, -a);
        }
        norm_ppf(ca + u * mass)
    } else {
        let (ca, cb) = (norm_cdf(a), norm_cdf(b));
        norm_ppf(ca + u * (cb - ca))
    };
    x.clamp(a, b)
}

// Exponential-proposal rejection for intervals so far in the tail that the
// survival masses underflow.
fn tail_exponential<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    let lam = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let x = a - uniform_open(rng).ln() / lam;
        if x > b {
            continue;
        }
        let d = x - lam;
        if uniform_open(rng).ln() <= -0.5 * d * d {
            return x;
        }
    }
}

/// N(mean, var) restricted to [lo, hi].
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, var: f64, lo: f64, hi: f64) -> f64 {
    let sd = var.sqrt();
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    let x = mean + sd * trunc_std_normal(rng, a, b);
    x.clamp(lo, hi)
}

/// Gamma with shape and rate.
pub fn gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate).expect("valid gamma parameters").sample(rng)
}

/// Inverse gamma with shape a and scale b (density ∝ x^{-a-1} e^{-b/x}).
pub fn inv_gamma<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    b / gamma(rng, a, 1.0)
}

/// Wishart(df, sigma) draw through the Bartlett decomposition.
pub fn wishart<R: Rng + ?Sized>(rng: &mut R, df: f64, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = sigma.nrows();
    if df <= (p as f64) - 1.0 {
        return Err(Error::Numerical(format!("wishart df {df} too small for order {p}")));
    }
    let l = chol_jitter(sigma)?.l();
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        a[(i, i)] = (2.0 * gamma(rng, 0.5 * (df - i as f64), 1.0)).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    let la = &l * a;
    let mut w = &la * la.transpose();
    symmetrize(&mut w);
    Ok(w)
}

/// Inverse-Wishart(df, scale): the inverse of a Wishart(df, scale⁻¹) draw.
/// For order 1 this is IG(df/2, scale/2).
pub fn inv_wishart<R: Rng + ?Sized>(rng: &mut R, df: f64, scale: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if scale.nrows() == 1 {
        let v = inv_gamma(rng, 0.5 * df, 0.5 * scale[(0, 0)]);
        return Ok(DMatrix::from_element(1, 1, v));
    }
    let sinv = spd_inverse(scale)?;
    let w = wishart(rng, df, &sinv)?;
    spd_inverse(&w)
}

/// Draw from N(Q⁻¹ b, Q⁻¹) given the precision Q.
pub fn mvn_precision<R: Rng + ?Sized>(rng: &mut R, q: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let c = chol_jitter(q)?;
    let mean = c.solve(b);
    let z = std_normal_vec(rng, q.nrows());
    Ok(mean + solve_lt(&c, &z))
}

/// Draw from N(0, cov).
pub fn mvn_cov<R: Rng + ?Sized>(rng: &mut R, cov: &DMatrix<f64>) -> Result<DVector<f64>> {
    let c = chol_jitter(cov)?;
    let z = std_normal_vec(rng, cov.nrows());
    Ok(c.l() * z)
}

/// Categorical draw from unnormalized log weights.
pub fn categorical_log<R: Rng + ?Sized>(rng: &mut R, logw: &[f64]) -> usize {
    let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(mx.is_finite(), "categorical with empty support");
    let w: Vec<f64> = logw.iter().map(|&v| (v - mx).exp()).collect();
    categorical(rng, &w)
}

/// Categorical draw from nonnegative weights.
pub fn categorical<R: Rng + ?Sized>(rng: &mut R, w: &[f64]) -> usize {
    let total: f64 = w.iter().sum();
    assert!(total > 0.0, "categorical with zero total mass");
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (l, &v) in w.iter().enumerate() {
        if v > 0.0 {
            last = l;
            acc += v;
            if target < acc {
                return l;
            }
        }
    }
    last
}

/// Multivariate normal log density for N(0, cov) given its Cholesky factor.
pub fn mvn_logpdf_chol(x: &DVector<f64>, c: &crate::linalg::Chol) -> f64 {
    let n = x.len() as f64;
    let l = c.l_dirty();
    let y = l.solve_lower_triangular(x).expect("nonsingular factor");
    -0.5 * (n * LN_2PI + crate::linalg::chol_logdet(c) + y.norm_squared())
}
