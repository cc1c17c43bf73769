//! Fit metrics over kept iterations: posterior predictive MSE family, DIC and
//! WAIC. Every function takes an explicit iteration subset.

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::dist::{norm_logpdf, std_normal};
use crate::error::{spec, Result};
use crate::gibbs::{PosteriorStore, Sample};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitMetrics {
    pub post_mean_mse: f64,
    pub post_mse: f64,
    pub post_var: f64,
    pub p_d: f64,
    pub dic: f64,
    pub p_waic_1: f64,
    pub p_waic_2: f64,
    pub lppd: f64,
    pub waic: f64,
}

impl FitMetrics {
    pub const NAMES: [&'static str; 9] =
        ["postMeanMSE", "postMSE", "postVar", "pD", "dic", "p_waic_1", "p_waic_2", "lppd", "waic"];

    pub fn values(&self) -> [f64; 9] {
        [
            self.post_mean_mse,
            self.post_mse,
            self.post_var,
            self.p_d,
            self.dic,
            self.p_waic_1,
            self.p_waic_2,
            self.lppd,
            self.waic,
        ]
    }
}

/// Xβ + Λη for one sample, (m·O) × T.
pub fn fitted_mean(s: &Sample, data: &Dataset) -> DMatrix<f64> {
    let mut f = &s.loadings * s.eta.transpose();
    if data.p() > 0 {
        for t in 0..data.t() {
            let xb = data.xbeta(t, &s.beta);
            for r in 0..data.n() {
                f[(r, t)] += xb[r];
            }
        }
    }
    f
}

fn check_iters(store: &PosteriorStore, iters: &[usize]) -> Result<()> {
    if iters.is_empty() {
        return spec("no iterations selected");
    }
    if let Some(&bad) = iters.iter().find(|&&i| i >= store.samples.len()) {
        return spec(format!("iteration {bad} out of range ({} kept)", store.samples.len()));
    }
    Ok(())
}

/// One ŷ = Xβ + Λη + N(0, σ²) draw per selected iteration.
pub fn posterior_predictive_draws(store: &PosteriorStore, data: &Dataset, iters: &[usize], seed: u64) -> Result<Vec<DMatrix<f64>>> {
    check_iters(store, iters)?;
    Ok(iters
        .iter()
        .map(|&w| {
            let s = &store.samples[w];
            let mut rng = stream_rng(seed, w as u32, Stream::Diagnostics);
            let mut y = fitted_mean(s, data);
            for t in 0..data.t() {
                for r in 0..data.n() {
                    y[(r, t)] += s.sigma2[r].sqrt() * std_normal(&mut rng);
                }
            }
            y
        })
        .collect())
}

/// (postMeanMSE, postMSE, postVar); the variance uses divisor W − 1.
pub fn mse_family(draws: &[DMatrix<f64>], y: &DMatrix<f64>) -> (f64, f64, f64) {
    let w = draws.len();
    assert!(w > 0, "no draws");
    let cells = (y.nrows() * y.ncols()) as f64;
    let (mut mean_mse, mut mse, mut var) = (0.0, 0.0, 0.0);
    for r in 0..y.nrows() {
        for t in 0..y.ncols() {
            let mean = draws.iter().map(|d| d[(r, t)]).sum::<f64>() / w as f64;
            mean_mse += (mean - y[(r, t)]).powi(2);
            mse += draws.iter().map(|d| (d[(r, t)] - y[(r, t)]).powi(2)).sum::<f64>() / w as f64;
            if w > 1 {
                var += draws.iter().map(|d| (d[(r, t)] - mean).powi(2)).sum::<f64>() / (w - 1) as f64;
            }
        }
    }
    (mean_mse / cells, mse / cells, var / cells)
}

/// (pD, dic) from per-iteration log-likelihoods and the log-likelihood at
/// the posterior point estimate.
pub fn dic(loglik: &[f64], loglik_at_mean: f64) -> (f64, f64) {
    let dbar = loglik.iter().map(|l| -2.0 * l).sum::<f64>() / loglik.len() as f64;
    let pd = dbar + 2.0 * loglik_at_mean;
    (pd, dbar + pd)
}

/// (p_waic_1, p_waic_2, lppd, waic) from a W × cells pointwise matrix.
pub fn waic(ll: &DMatrix<f64>) -> (f64, f64, f64, f64) {
    let w = ll.nrows();
    assert!(w > 0, "no draws");
    let (mut lppd, mut p1, mut p2) = (0.0, 0.0, 0.0);
    for c in 0..ll.ncols() {
        let col = ll.column(c);
        let mx = col.max();
        let lme = mx + (col.iter().map(|v| (v - mx).exp()).sum::<f64>() / w as f64).ln();
        let mean = col.mean();
        lppd += lme;
        p1 += 2.0 * (lme - mean);
        if w > 1 {
            p2 += col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w - 1) as f64;
        }
    }
    (p1, p2, lppd, -2.0 * lppd + 2.0 * p2)
}

/// Pointwise log N(y | fit, σ²) per selected iteration.
pub fn pointwise_loglik(store: &PosteriorStore, data: &Dataset, iters: &[usize]) -> Result<DMatrix<f64>> {
    check_iters(store, iters)?;
    let (n, t) = (data.n(), data.t());
    let mut ll = DMatrix::zeros(iters.len(), n * t);
    for (row, &w) in iters.iter().enumerate() {
        let s = &store.samples[w];
        let f = fitted_mean(s, data);
        for c in 0..t {
            for r in 0..n {
                ll[(row, c * n + r)] = norm_logpdf(data.y[(r, c)], f[(r, c)], s.sigma2[r]);
            }
        }
    }
    Ok(ll)
}

/// Posterior point estimate: elementwise means of the continuous draws with
/// labels replaced by their per-row modes. Returns the log-likelihood there.
pub fn loglik_at_posterior_mean(store: &PosteriorStore, data: &Dataset, iters: &[usize]) -> Result<f64> {
    check_iters(store, iters)?;
    let w = iters.len() as f64;
    let first = &store.samples[iters[0]];
    let (n, k) = (data.n(), store.k);
    let mut eta = DMatrix::zeros(first.eta.nrows(), k);
    let mut beta = vec![0.0; first.beta.len()];
    let mut sigma2 = vec![0.0; n];
    for &i in iters {
        let s = &store.samples[i];
        eta += &s.eta;
        for (b, v) in beta.iter_mut().zip(&s.beta) {
            *b += v;
        }
        for (a, v) in sigma2.iter_mut().zip(&s.sigma2) {
            *a += v;
        }
    }
    eta /= w;
    beta.iter_mut().for_each(|b| *b /= w);
    sigma2.iter_mut().for_each(|v| *v /= w);
    let mut lam = DMatrix::zeros(n, k);
    if store.variant.clustering() {
        for j in 0..k {
            let lmax = iters.iter().map(|&i| store.samples[i].factors[j].l).max().unwrap_or(1);
            let mut atom_sum = vec![0.0; lmax];
            let mut atom_cnt = vec![0usize; lmax];
            for &i in iters {
                for (l, &a) in store.samples[i].factors[j].atoms.iter().enumerate() {
                    atom_sum[l] += a;
                    atom_cnt[l] += 1;
                }
            }
            for r in 0..n {
                let mut counts = vec![0usize; lmax];
                for &i in iters {
                    counts[store.samples[i].factors[j].labels[r]] += 1;
                }
                let mode = (0..lmax).max_by_key(|&l| (counts[l], std::cmp::Reverse(l))).unwrap_or(0);
                lam[(r, j)] = atom_sum[mode] / atom_cnt[mode].max(1) as f64;
            }
        }
    } else {
        for &i in iters {
            lam += &store.samples[i].loadings;
        }
        lam /= w;
    }
    let mut f = &lam * eta.transpose();
    let mut ll = 0.0;
    for t in 0..data.t() {
        let xb = data.xbeta(t, &beta);
        for r in 0..n {
            f[(r, t)] += xb[r];
            ll += norm_logpdf(data.y[(r, t)], f[(r, t)], sigma2[r]);
        }
    }
    Ok(ll)
}

/// All nine metrics over the selected iterations.
pub fn fit_metrics(store: &PosteriorStore, data: &Dataset, iters: &[usize], seed: u64) -> Result<FitMetrics> {
    let draws = posterior_predictive_draws(store, data, iters, seed)?;
    let (post_mean_mse, post_mse, post_var) = mse_family(&draws, &data.y);
    let pl = pointwise_loglik(store, data, iters)?;
    let per_iter: Vec<f64> = (0..pl.nrows()).map(|r| pl.row(r).sum()).collect();
    let (p_d, dic) = dic(&per_iter, loglik_at_posterior_mean(store, data, iters)?);
    let (p_waic_1, p_waic_2, lppd, waic) = waic(&pl);
    Ok(FitMetrics { post_mean_mse, post_mse, post_var, p_d, dic, p_waic_1, p_waic_2, lppd, waic })
}
