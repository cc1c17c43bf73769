//! Full MCMC sweeps for the five model variants.
//!
//! Step order per sweep:
//! - varying L: u, L_j and ξ, θ, δ, α and w, κ, ρ, η, Υ, ψ, β, σ²
//! - fixed L: ξ, θ, δ, z, α and w, κ, ρ, η, Υ, ψ, β, σ²
//! - baseline: λ, κ, ρ, η, Υ, ψ, β, σ²

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::covspatial::{default_bounds, default_psi_bounds, distance_matrix, interval_logit, interval_logit_inv, log_jacobian, SpatialKind, SpatialSpec};
use crate::covtemporal::{all_conditional_coeffs, factors, CondCoeffs, TemporalFactors, TemporalKind, TemporalSpec};
use crate::data::Dataset;
use crate::dist::{gamma, inv_gamma, inv_wishart, mvn_precision, norm_logpdf, std_normal, uniform_open};
use crate::error::{spec, Error, Result};
use crate::linalg::{chol_exact, chol_jitter, chol_logdet, kron, spd_inverse};
use crate::nngp::{build_graph, NeighborGraph};
use crate::psbp::{self, BlockPosterior, FactorClusterState, FactorStats, ShrinkageState};
use crate::rng::{ChainRngs, Stream};
use crate::spatialprior::SpatialPrior;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    FullGpFixedL,
    NngpBlockFixedL,
    NngpSequenFixedL,
    NngpSequenVaryLj,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::FullGpFixedL,
        Variant::NngpBlockFixedL,
        Variant::NngpSequenFixedL,
        Variant::NngpSequenVaryLj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baselineNoClustering",
            Variant::FullGpFixedL => "fullGPfixedL",
            Variant::NngpBlockFixedL => "NNGPblockFixedL",
            Variant::NngpSequenFixedL => "NNGPsequenFixedL",
            Variant::NngpSequenVaryLj => "NNGPsequenVaryLj",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }

    pub fn clustering(self) -> bool {
        self != Variant::Baseline
    }

    pub fn vary_l(self) -> bool {
        self == Variant::NngpSequenVaryLj
    }

    pub fn nngp(self) -> bool {
        matches!(self, Variant::NngpBlockFixedL | Variant::NngpSequenFixedL | Variant::NngpSequenVaryLj)
    }

    pub fn sequential(self) -> bool {
        matches!(self, Variant::NngpSequenFixedL | Variant::NngpSequenVaryLj)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    /// σ² ~ IG(a, b).
    pub a: f64,
    pub b: f64,
    pub beta_mean: Vec<f64>,
    pub beta_var: DMatrix<f64>,
    /// Υ ~ IW(ζ, Ω).
    pub zeta: f64,
    pub omega: DMatrix<f64>,
    /// κ ~ IW(ν, Θ).
    pub nu: f64,
    pub theta_scale: DMatrix<f64>,
    pub psi_bounds: (f64, f64),
    pub rho_bounds: (f64, f64),
    /// Shape parameters of the transformed Beta prior on ψ for the ar1 family.
    pub psi_gamma: f64,
    pub psi_beta: f64,
    pub a1: f64,
    pub a2: f64,
    pub use_shrinkage: bool,
}

impl PriorSet {
    /// Weakly informative defaults for k factors, O types and p covariates.
    pub fn defaults(k: usize, o: usize, p: usize, psi_bounds: (f64, f64), rho_bounds: (f64, f64)) -> PriorSet {
        PriorSet {
            a: 1.0,
            b: 1.0,
            beta_mean: vec![0.0; p],
            beta_var: DMatrix::identity(p, p) * 100.0,
            zeta: k as f64 + 1.0,
            omega: DMatrix::identity(k, k),
            nu: o as f64 + 1.0,
            theta_scale: DMatrix::identity(o, o),
            psi_bounds,
            rho_bounds,
            psi_gamma: 1.0,
            psi_beta: 1.0,
            a1: 2.0,
            a2: 3.0,
            use_shrinkage: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub burnin: usize,
    pub post_burnin: usize,
    pub thin: usize,
    pub seed: u64,
    pub adapt_window: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { burnin: 1000, post_burnin: 1000, thin: 1, seed: 1, adapt_window: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub k: usize,
    /// L for fixed-L variants, the starting upper bound for varying L.
    pub l: usize,
    pub h: usize,
    pub temporal: TemporalSpec,
    pub spatial: SpatialSpec,
    pub priors: PriorSet,
    pub schedule: Schedule,
    pub alpha_block_max_attempts: usize,
    /// Baseline only: put the NNGP prior on λ_j instead of the dense GP.
    pub baseline_nngp: bool,
}

impl ModelSpec {
    /// Spec with default priors and schedule for a dataset. Equispacing is
    /// detected from the data's time grid.
    pub fn with_defaults(
        variant: Variant,
        data: &Dataset,
        k: usize,
        l: usize,
        temporal_kind: TemporalKind,
        period: usize,
        spatial_kind: SpatialKind,
    ) -> Result<ModelSpec> {
        let times = data.timepoints.clone();
        let equi = times.windows(2).all(|w| ((w[1] - w[0]) - 1.0).abs() <= 1e-9);
        let psi_bounds = default_psi_bounds(temporal_kind.psi_is_rho(), &times);
        let temporal = TemporalSpec::with_timepoints(temporal_kind, midpoint(psi_bounds), period, times, equi)?;
        let rho_bounds = default_bounds(&data.coords)?;
        let spatial = SpatialSpec::new(spatial_kind, midpoint(rho_bounds), data.coords.clone(), Some(rho_bounds))?;
        let priors = PriorSet::defaults(k, data.o, data.p(), psi_bounds, rho_bounds);
        let s = ModelSpec {
            variant,
            k,
            l,
            h: crate::nngp::DEFAULT_H,
            temporal,
            spatial,
            priors,
            schedule: Schedule::default(),
            alpha_block_max_attempts: 10_000,
            baseline_nngp: false,
        };
        s.validate(data)?;
        Ok(s)
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        self.temporal.validate()?;
        self.spatial.validate()?;
        let o = data.o;
        let p = data.p();
        if self.k == 0 {
            return spec("k must be at least 1");
        }
        if self.variant.clustering() && self.l == 0 {
            return spec("L must be at least 1");
        }
        if self.h == 0 {
            return spec("h must be at least 1");
        }
        if self.variant.nngp() && self.spatial.kind != SpatialKind::Exponential {
            return spec(format!("variant {} needs a continuous spatial structure", self.variant.name()));
        }
        let s = &self.schedule;
        if s.thin == 0 || s.post_burnin % s.thin != 0 {
            return spec(format!("thin {} must divide post_burnin {}", s.thin, s.post_burnin));
        }
        if s.adapt_window == 0 {
            return spec("adapt_window must be at least 1");
        }
        if data.m() != self.spatial.m() {
            return spec(format!("spatial spec has {} sites, data has {}", self.spatial.m(), data.m()));
        }
        if data.t() != self.temporal.len() {
            return spec(format!("temporal spec has {} times, data has {}", self.temporal.len(), data.t()));
        }
        let pr = &self.priors;
        if !(pr.a > 0.0 && pr.b > 0.0 && pr.a1 > 0.0 && pr.a2 > 0.0) {
            return spec("a, b, a1, a2 must be positive");
        }
        if !(pr.psi_gamma > 0.0 && pr.psi_beta > 0.0) {
            return spec("psi prior shapes must be positive");
        }
        if pr.beta_mean.len() != p || pr.beta_var.nrows() != p || pr.beta_var.ncols() != p {
            return spec(format!("beta prior must have dimension p = {p}"));
        }
        if p > 0 && chol_exact(&pr.beta_var).is_err() {
            return spec("beta prior covariance not positive definite");
        }
        if pr.omega.nrows() != self.k || pr.omega.ncols() != self.k || chol_exact(&pr.omega).is_err() {
            return spec("Omega must be a k x k positive definite matrix");
        }
        if pr.theta_scale.nrows() != o || pr.theta_scale.ncols() != o || chol_exact(&pr.theta_scale).is_err() {
            return spec("Theta must be an O x O positive definite matrix");
        }
        if !(pr.zeta > self.k as f64 - 1.0) {
            return spec("zeta must exceed k - 1");
        }
        if !(pr.nu > o as f64 - 1.0) {
            return spec("nu must exceed O - 1");
        }
        let (pa, pb) = pr.psi_bounds;
        if self.temporal.kind != TemporalKind::Independent && !(pa < pb) {
            return spec("psi bounds must be increasing");
        }
        let (ra, rb) = pr.rho_bounds;
        if self.spatial.kind == SpatialKind::Exponential && !(ra > 0.0 && ra < rb && rb.is_finite()) {
            return spec("rho bounds must satisfy 0 < a < b < inf");
        }
        Ok(())
    }

    pub fn n_kept(&self) -> usize {
        self.schedule.post_burnin / self.schedule.thin
    }
}

/// Accumulated wall time and call counts per step family.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepTimings {
    pub steps: BTreeMap<&'static str, (u128, u64)>,
}

impl StepTimings {
    fn add(&mut self, step: &'static str, nanos: u128) {
        let e = self.steps.entry(step).or_insert((0, 0));
        e.0 += nanos;
        e.1 += 1;
    }

    pub fn mean_nanos(&self, step: &str) -> Option<f64> {
        self.steps.get(step).map(|&(n, c)| n as f64 / c.max(1) as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metropolis {
    pub delta: f64,
    pub accepted: usize,
    pub tried: usize,
    win_accepted: usize,
    win_tried: usize,
}

impl Metropolis {
    fn new() -> Metropolis {
        Metropolis { delta: 1.0, ..Default::default() }
    }

    fn record(&mut self, acc: bool) {
        self.tried += 1;
        self.win_tried += 1;
        if acc {
            self.accepted += 1;
            self.win_accepted += 1;
        }
    }

    /// Multiplicative tuning toward an acceptance rate in [0.25, 0.5]; the
    /// step grows with the distance from the band's center.
    fn adapt(&mut self) {
        if self.win_tried > 0 {
            let rate = self.win_accepted as f64 / self.win_tried as f64;
            if !(0.25..=0.5).contains(&rate) {
                self.delta *= (3.0 * (rate - 0.375)).exp();
            }
        }
        self.win_accepted = 0;
        self.win_tried = 0;
    }

    /// Counters as persisted alongside a stored chain.
    pub fn from_counts(delta: f64, accepted: usize, tried: usize) -> Metropolis {
        Metropolis { delta, accepted, tried, ..Default::default() }
    }

    pub fn rate(&self) -> f64 {
        if self.tried == 0 {
            0.0
        } else {
            self.accepted as f64 / self.tried as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainState {
    /// T × k.
    pub eta: DMatrix<f64>,
    pub upsilon: DMatrix<f64>,
    pub psi: f64,
    pub rho: f64,
    pub beta: Vec<f64>,
    /// Per row r = o·m + i.
    pub sigma2: Vec<f64>,
    pub kappa: DMatrix<f64>,
    pub factors: Vec<FactorClusterState>,
    /// Baseline loadings, (m·O) × k. Empty for clustering variants.
    pub lambda: DMatrix<f64>,
    pub shrink: ShrinkageState,
    pub mh_psi: Metropolis,
    pub mh_rho: Metropolis,
    pub iter: usize,
}

/// One kept iteration. Weights are not stored; `weights` rebuilds them from α.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub iter: usize,
    pub eta: DMatrix<f64>,
    pub upsilon: DMatrix<f64>,
    pub psi: f64,
    pub rho: f64,
    pub beta: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub kappa: DMatrix<f64>,
    pub delta: Vec<f64>,
    /// Per factor: (L_j, atoms, labels, α fields).
    pub factors: Vec<FactorSample>,
    /// (m·O) × k.
    pub loadings: DMatrix<f64>,
    pub deviance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSample {
    pub l: usize,
    pub atoms: Vec<f64>,
    pub labels: Vec<usize>,
    pub alpha: Vec<Vec<f64>>,
}

impl FactorSample {
    /// Row-major (m·O) × L weights rebuilt from α.
    pub fn weights(&self, m: usize, o: usize) -> Vec<f64> {
        let n = m * o;
        let mut w = Vec::with_capacity(n * self.l);
        for r in 0..n {
            let a = (r % m) * o + r / m;
            let al: Vec<f64> = self.alpha.iter().map(|f| f[a]).collect();
            w.extend(psbp::weights_from_alpha(&al));
        }
        w
    }
}

/// Chain audit kept at every iteration, not just kept ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Audit {
    /// L_j after each sweep.
    pub l_trace: Vec<Vec<usize>>,
    /// Rows violating u < w_ξ after each sweep, summed over factors.
    pub slice_violations: Vec<usize>,
    /// α fields that fell back from block rejection to the per-site kernel.
    pub alpha_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStore {
    pub variant: Variant,
    pub chain: u32,
    pub m: usize,
    pub o: usize,
    pub t: usize,
    pub k: usize,
    pub samples: Vec<Sample>,
    pub mh_psi: Metropolis,
    pub mh_rho: Metropolis,
    pub audit: Audit,
    pub timings: StepTimings,
}

impl PosteriorStore {
    pub fn deviance(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.deviance).collect()
    }
}

struct Context {
    temporal: TemporalSpec,
    tfac: TemporalFactors,
    cond: Vec<CondCoeffs>,
    dist: Option<DMatrix<f64>>,
    graph: Option<Arc<NeighborGraph>>,
    prior: SpatialPrior,
}

/// A single chain: state, precomputed structure and its random streams.
pub struct Sampler {
    pub spec: ModelSpec,
    pub data: Dataset,
    pub state: ChainState,
    /// 1 for the posterior; 0 switches the likelihood off so every step
    /// draws from its prior.
    pub likelihood_weight: f64,
    pub timings: StepTimings,
    pub audit: Audit,
    ctx: Context,
    rngs: ChainRngs,
}

fn midpoint(b: (f64, f64)) -> f64 {
    0.5 * (b.0 + b.1)
}

fn site_major(col: &[f64], m: usize, o: usize) -> Vec<f64> {
    let mut a = vec![0.0; m * o];
    for oo in 0..o {
        for i in 0..m {
            a[i * o + oo] = col[oo * m + i];
        }
    }
    a
}

fn step_err(iter: usize, step: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Step { .. } => e,
        other => Error::Step { iter, step, msg: other.to_string() },
    }
}

impl Sampler {
    pub fn new(spec: ModelSpec, data: Dataset, chain: u32) -> Result<Sampler> {
        spec.validate(&data)?;
        let mut rngs = ChainRngs::new(spec.schedule.seed, chain);
        let m = data.m();
        let o = data.o;
        let n = data.n();
        let k = spec.k;
        let psi = if spec.temporal.kind == TemporalKind::Independent {
            spec.temporal.psi
        } else {
            midpoint(spec.priors.psi_bounds)
        };
        let temporal = spec.temporal.with_psi(psi);
        temporal.validate()?;
        let tfac = factors(&temporal)?;
        let cond = all_conditional_coeffs(&temporal)?;
        let rho = if spec.spatial.kind == SpatialKind::Exponential {
            midpoint(spec.priors.rho_bounds)
        } else {
            spec.spatial.rho
        };
        let use_nngp = spec.variant.nngp() || (spec.variant == Variant::Baseline && spec.baseline_nngp);
        let mut dist = None;
        let mut graph = None;
        let prior = match spec.spatial.kind {
            SpatialKind::Independent => SpatialPrior::independent(m),
            SpatialKind::Exponential if use_nngp => {
                let g = Arc::new(build_graph(&spec.spatial.coords, spec.h)?);
                graph = Some(g.clone());
                SpatialPrior::nngp(g, &spec.spatial.coords, rho)?
            }
            SpatialKind::Exponential => {
                let d = distance_matrix(&spec.spatial.coords)?;
                let p = SpatialPrior::dense(rho, &d)?;
                dist = Some(d);
                p
            }
        };
        let kappa = DMatrix::identity(o, o);
        let shrink = ShrinkageState {
            a1: spec.priors.a1,
            a2: spec.priors.a2,
            delta: vec![1.0; k],
            use_shrinkage: spec.priors.use_shrinkage,
        };
        let mut fs = Vec::new();
        let mut lambda = DMatrix::zeros(0, 0);
        if spec.variant.clustering() {
            let rng = rngs.get(Stream::Init);
            for j in 0..k {
                fs.push(psbp::init_state(m, o, spec.l, shrink.tau(j), &prior, &kappa, spec.variant.vary_l(), rng)?);
            }
        } else {
            lambda = DMatrix::zeros(n, k);
        }
        let p = data.p();
        let state = ChainState {
            eta: DMatrix::zeros(data.t(), k),
            upsilon: DMatrix::identity(k, k),
            psi,
            rho,
            beta: vec![0.0; p],
            sigma2: vec![1.0; n],
            kappa,
            factors: fs,
            lambda,
            shrink,
            mh_psi: Metropolis::new(),
            mh_rho: Metropolis::new(),
            iter: 0,
        };
        Ok(Sampler {
            spec,
            data,
            state,
            likelihood_weight: 1.0,
            timings: StepTimings::default(),
            audit: Audit::default(),
            ctx: Context { temporal, tfac, cond, dist, graph, prior },
            rngs,
        })
    }

    pub fn spatial_prior(&self) -> &SpatialPrior {
        &self.ctx.prior
    }

    pub fn temporal(&self) -> &TemporalSpec {
        &self.ctx.temporal
    }

    pub fn rng(&mut self, s: Stream) -> &mut rand_chacha::ChaCha20Rng {
        self.rngs.get(s)
    }

    /// Current loadings Λ, (m·O) × k.
    pub fn loadings(&self) -> DMatrix<f64> {
        if self.spec.variant.clustering() {
            let n = self.data.n();
            DMatrix::from_fn(n, self.spec.k, |r, j| self.state.factors[j].loading(r))
        } else {
            self.state.lambda.clone()
        }
    }

    /// y − Xβ.
    fn y_minus_xb(&self) -> DMatrix<f64> {
        let mut yb = self.data.y.clone();
        if self.data.p() > 0 {
            for t in 0..self.data.t() {
                let xb = self.data.xbeta(t, &self.state.beta);
                for r in 0..self.data.n() {
                    yb[(r, t)] -= xb[r];
                }
            }
        }
        yb
    }

    /// Xβ + Λη, (m·O) × T.
    pub fn fitted(&self) -> DMatrix<f64> {
        let lam = self.loadings();
        let mut f = &lam * self.state.eta.transpose();
        if self.data.p() > 0 {
            for t in 0..self.data.t() {
                let xb = self.data.xbeta(t, &self.state.beta);
                for r in 0..self.data.n() {
                    f[(r, t)] += xb[r];
                }
            }
        }
        f
    }

    pub fn loglik(&self) -> f64 {
        let f = self.fitted();
        let mut ll = 0.0;
        for r in 0..self.data.n() {
            for t in 0..self.data.t() {
                ll += norm_logpdf(self.data.y[(r, t)], f[(r, t)], self.state.sigma2[r]);
            }
        }
        ll
    }

    /// Replace y by a draw from the likelihood at the current parameters.
    pub fn resimulate_y<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let f = self.fitted();
        for r in 0..self.data.n() {
            let sd = self.state.sigma2[r].sqrt();
            for t in 0..self.data.t() {
                self.data.y[(r, t)] = f[(r, t)] + sd * std_normal(rng);
            }
        }
    }

    fn inv_s2(&self) -> Vec<f64> {
        self.state.sigma2.iter().map(|s| self.likelihood_weight / s).collect()
    }

    fn factor_stats(&self, j: usize, lam: &DMatrix<f64>, yb: &DMatrix<f64>, inv_s2: &[f64]) -> FactorStats {
        let eta = &self.state.eta;
        let g = eta.transpose() * eta;
        let ye = yb * eta.column(j);
        let s_e_eta = (0..self.data.n())
            .map(|r| {
                let mut v = ye[r];
                for h in 0..self.spec.k {
                    if h != j {
                        v -= lam[(r, h)] * g[(h, j)];
                    }
                }
                v
            })
            .collect();
        FactorStats { s_e_eta, s_eta_eta: g[(j, j)], inv_s2: inv_s2.to_vec() }
    }

    fn set_lambda_col(&self, lam: &mut DMatrix<f64>, j: usize) {
        let f = &self.state.factors[j];
        for r in 0..self.data.n() {
            lam[(r, j)] = f.loading(r);
        }
    }

    fn timed<T>(&mut self, step: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let iter = self.state.iter;
        let out = f(self).map_err(step_err(iter, step));
        self.timings.add(step, start.elapsed().as_nanos());
        out
    }

    /// One full sweep. `adapt` enables Metropolis tuning at window ends.
    pub fn sweep(&mut self, adapt: bool) -> Result<()> {
        match self.spec.variant {
            Variant::Baseline => {
                self.timed("lambda", |s| s.step_lambda())?;
            }
            Variant::NngpSequenVaryLj => {
                self.timed("slice", |s| s.step_slice())?;
                self.timed("labels", |s| s.step_truncation_and_labels())?;
                self.timed("atoms", |s| s.step_atoms())?;
                self.timed("delta", |s| s.step_delta())?;
                self.timed("alpha", |s| s.step_alpha())?;
            }
            _ => {
                self.timed("labels", |s| s.step_labels_fixed())?;
                self.timed("atoms", |s| s.step_atoms())?;
                self.timed("delta", |s| s.step_delta())?;
                self.timed("z", |s| s.step_z())?;
                self.timed("alpha", |s| s.step_alpha())?;
            }
        }
        self.timed("kappa", |s| s.step_kappa())?;
        self.timed("rho", |s| s.step_rho())?;
        self.timed("eta", |s| s.step_eta())?;
        self.timed("upsilon", |s| s.step_upsilon())?;
        self.timed("psi", |s| s.step_psi())?;
        self.timed("beta", |s| s.step_beta())?;
        self.timed("sigma2", |s| s.step_sigma2())?;

        let iter = self.state.iter;
        if self.spec.variant.clustering() {
            let ls: Vec<usize> = self.state.factors.iter().map(|f| f.l).collect();
            if let Some(prev) = self.audit.l_trace.last() {
                if ls.iter().zip(prev).any(|(a, b)| a > b) {
                    return Err(Error::Step { iter, step: "truncation", msg: format!("L increased from {prev:?} to {ls:?}") });
                }
            }
            self.audit.l_trace.push(ls);
            let v = if self.spec.variant.vary_l() {
                self.state.factors.iter().map(|f| f.slice_violations()).sum()
            } else {
                0
            };
            self.audit.slice_violations.push(v);
        }
        if adapt && (iter + 1) % self.spec.schedule.adapt_window == 0 {
            self.state.mh_psi.adapt();
            self.state.mh_rho.adapt();
        }
        self.state.iter += 1;
        Ok(())
    }

    fn step_slice(&mut self) -> Result<()> {
        let rng = self.rngs.get(Stream::Slice);
        for f in self.state.factors.iter_mut() {
            psbp::sample_slice(f, rng)?;
        }
        Ok(())
    }

    fn step_truncation_and_labels(&mut self) -> Result<()> {
        let yb = self.y_minus_xb();
        let inv_s2 = self.inv_s2();
        let mut lam = self.loadings();
        for j in 0..self.spec.k {
            let before = self.state.factors[j].l;
            let after = psbp::update_lj(&mut self.state.factors[j]);
            debug_assert!(after <= before);
            let stats = self.factor_stats(j, &lam, &yb, &inv_s2);
            psbp::sample_labels_vary_l(&mut self.state.factors[j], &stats, self.rngs.get(Stream::Labels))?;
            self.set_lambda_col(&mut lam, j);
        }
        Ok(())
    }

    fn step_labels_fixed(&mut self) -> Result<()> {
        let yb = self.y_minus_xb();
        let inv_s2 = self.inv_s2();
        let mut lam = self.loadings();
        for j in 0..self.spec.k {
            let stats = self.factor_stats(j, &lam, &yb, &inv_s2);
            psbp::sample_labels_fixed_l(&mut self.state.factors[j], &stats, self.rngs.get(Stream::Labels))?;
            self.set_lambda_col(&mut lam, j);
        }
        Ok(())
    }

    fn step_atoms(&mut self) -> Result<()> {
        let yb = self.y_minus_xb();
        let inv_s2 = self.inv_s2();
        let mut lam = self.loadings();
        for j in 0..self.spec.k {
            let stats = self.factor_stats(j, &lam, &yb, &inv_s2);
            let tau = self.state.shrink.tau(j);
            psbp::sample_atoms(&mut self.state.factors[j], tau, &stats, self.rngs.get(Stream::Atoms));
            self.set_lambda_col(&mut lam, j);
        }
        Ok(())
    }

    fn step_delta(&mut self) -> Result<()> {
        let atoms: Vec<&[f64]> = self.state.factors.iter().map(|f| f.atoms.as_slice()).collect();
        psbp::sample_delta(&mut self.state.shrink, &atoms, self.rngs.get(Stream::Delta));
        Ok(())
    }

    fn step_z(&mut self) -> Result<()> {
        let rng = self.rngs.get(Stream::LatentZ);
        for f in self.state.factors.iter_mut() {
            psbp::sample_z(f, rng);
        }
        Ok(())
    }

    fn step_alpha(&mut self) -> Result<()> {
        let kappa = self.state.kappa.clone();
        let rng = self.rngs.get(Stream::Alpha);
        match self.spec.variant {
            Variant::FullGpFixedL | Variant::NngpBlockFixedL => {
                if self.state.factors.iter().all(|f| f.l < 2) {
                    return Ok(());
                }
                let kinv = spd_inverse(&kappa)?;
                let post = BlockPosterior::new(&self.ctx.prior, &kinv)?;
                for f in self.state.factors.iter_mut() {
                    psbp::sample_alpha_block_fixed_l(f, &post, rng);
                }
            }
            Variant::NngpSequenFixedL | Variant::NngpSequenVaryLj => {
                let SpatialPrior::Nngp { graph, local, .. } = &self.ctx.prior else {
                    return spec("sequential kernel needs the NNGP prior");
                };
                let vary = self.spec.variant.vary_l();
                for f in self.state.factors.iter_mut() {
                    psbp::sample_alpha_sequential(f, graph, local, &kappa, vary, rng)?;
                }
            }
            Variant::Baseline => unreachable!("baseline has no alpha fields"),
        }
        Ok(())
    }

    /// Site-major fields entering the N(0, F ⊗ κ) prior.
    fn spatial_fields(&self) -> Vec<Vec<f64>> {
        let m = self.data.m();
        let o = self.data.o;
        if self.spec.variant.clustering() {
            self.state.factors.iter().flat_map(|f| f.alpha.iter().cloned()).collect()
        } else {
            (0..self.spec.k)
                .map(|j| site_major(self.state.lambda.column(j).as_slice(), m, o))
                .collect()
        }
    }

    fn step_kappa(&mut self) -> Result<()> {
        let o = self.data.o;
        let quads: Vec<DMatrix<f64>> = self.spatial_fields().iter().map(|a| self.ctx.prior.quad_outer(a, o)).collect();
        let (df, scale) = kappa_conditional(self.spec.priors.nu, &self.spec.priors.theta_scale, self.data.m(), &quads);
        let k = inv_wishart(self.rngs.get(Stream::Kappa), df, &scale)?;
        chol_exact(&k).map_err(|_| Error::Numerical("kappa draw not positive definite".into()))?;
        self.state.kappa = k;
        Ok(())
    }

    fn prior_at(&self, rho: f64) -> Result<SpatialPrior> {
        match &self.ctx.prior {
            SpatialPrior::Independent { m } => Ok(SpatialPrior::independent(*m)),
            SpatialPrior::Dense { .. } => SpatialPrior::dense(rho, self.ctx.dist.as_ref().expect("distance matrix")),
            SpatialPrior::Nngp { .. } => {
                SpatialPrior::nngp(self.ctx.graph.clone().expect("neighbor graph"), &self.spec.spatial.coords, rho)
            }
        }
    }

    /// Log target of the ρ step at Δ, up to a constant. Exposed for checks.
    pub fn rho_log_target(&self, prior: &SpatialPrior, rho: f64) -> Result<f64> {
        let (a, b) = self.spec.priors.rho_bounds;
        let d = interval_logit(rho, a, b)?;
        let fields = self.spatial_fields();
        let refs: Vec<&[f64]> = fields.iter().map(|f| f.as_slice()).collect();
        let kc = chol_jitter(&self.state.kappa)?;
        let kinv = spd_inverse(&self.state.kappa)?;
        Ok(prior.log_density(&refs, &kinv, chol_logdet(&kc)) + log_jacobian(d))
    }

    fn step_rho(&mut self) -> Result<()> {
        if self.spec.spatial.kind != SpatialKind::Exponential {
            return Ok(());
        }
        let (a, b) = self.spec.priors.rho_bounds;
        let rho0 = self.state.rho;
        let d0 = interval_logit(rho0, a, b)?;
        let sd = self.state.mh_rho.delta.sqrt();
        let (d1, lu) = {
            let rng = self.rngs.get(Stream::Rho);
            (d0 + sd * std_normal(rng), uniform_open(rng).ln())
        };
        let rho1 = interval_logit_inv(d1, a, b);
        let mut accepted = false;
        if rho1 > a && rho1 < b {
            if let Ok(p1) = self.prior_at(rho1) {
                let lp0 = self.rho_log_target(&self.ctx.prior, rho0)?;
                let lp1 = self.rho_log_target(&p1, rho1)?;
                if lu < lp1 - lp0 {
                    self.ctx.prior = p1;
                    self.state.rho = rho1;
                    accepted = true;
                }
            }
        }
        self.state.mh_rho.record(accepted);
        Ok(())
    }

    fn step_eta(&mut self) -> Result<()> {
        let k = self.spec.k;
        let lam = self.loadings();
        let inv_s2 = self.inv_s2();
        let yb = self.y_minus_xb();
        let mut ltl = DMatrix::zeros(k, k);
        for r in 0..self.data.n() {
            for p in 0..k {
                for q in 0..k {
                    ltl[(p, q)] += inv_s2[r] * lam[(r, p)] * lam[(r, q)];
                }
            }
        }
        let uinv = spd_inverse(&self.state.upsilon)?;
        let rng = self.rngs.get(Stream::Eta);
        for t in 0..self.data.t() {
            let c = &self.ctx.cond[t];
            let mut m0 = DVector::zeros(k);
            for (s, v) in c.by_time() {
                m0 += self.state.eta.row(s).transpose() * v;
            }
            let mut data_lin = DVector::zeros(k);
            for r in 0..self.data.n() {
                let w = inv_s2[r] * yb[(r, t)];
                for p in 0..k {
                    data_lin[p] += lam[(r, p)] * w;
                }
            }
            let (prec, lin) = eta_conditional(&uinv, c.hstar, &m0, &ltl, &data_lin);
            let e = mvn_precision(rng, &prec, &lin)?;
            self.state.eta.set_row(t, &e.transpose());
        }
        Ok(())
    }

    /// ηᵀ H⁻¹ η under the given temporal factors.
    fn eta_quad(&self, tf: &TemporalFactors) -> DMatrix<f64> {
        let k = self.spec.k;
        let eta = &self.state.eta;
        let qe: Vec<Vec<f64>> = (0..k).map(|j| tf.precision.mul_vec(eta.column(j).as_slice())).collect();
        DMatrix::from_fn(k, k, |p, q| eta.column(p).iter().zip(&qe[q]).map(|(a, b)| a * b).sum())
    }

    fn step_upsilon(&mut self) -> Result<()> {
        let (df, scale) = upsilon_conditional(self.spec.priors.zeta, &self.spec.priors.omega, self.data.t(), &self.eta_quad(&self.ctx.tfac));
        let u = inv_wishart(self.rngs.get(Stream::Upsilon), df, &scale)?;
        chol_exact(&u).map_err(|_| Error::Numerical("Upsilon draw not positive definite".into()))?;
        self.state.upsilon = u;
        Ok(())
    }

    fn psi_log_prior(&self, psi: f64) -> f64 {
        if self.ctx.temporal.kind.psi_is_rho() {
            let pr = &self.spec.priors;
            (pr.psi_gamma - 1.0) * (1.0 + psi).ln() + (pr.psi_beta - 1.0) * (1.0 - psi).ln()
        } else {
            0.0
        }
    }

    /// Log target of the ψ step, up to a constant.
    pub fn psi_log_target(&self, tf: &TemporalFactors, psi: f64) -> Result<f64> {
        let (a, b) = self.spec.priors.psi_bounds;
        let d = interval_logit(psi, a, b)?;
        let uinv = spd_inverse(&self.state.upsilon)?;
        let s = self.eta_quad(tf);
        let tr = uinv.component_mul(&s).sum();
        Ok(-0.5 * self.spec.k as f64 * tf.logdet - 0.5 * tr + self.psi_log_prior(psi) + log_jacobian(d))
    }

    fn step_psi(&mut self) -> Result<()> {
        if self.ctx.temporal.kind == TemporalKind::Independent {
            return Ok(());
        }
        let (a, b) = self.spec.priors.psi_bounds;
        let psi0 = self.state.psi;
        let d0 = interval_logit(psi0, a, b)?;
        let sd = self.state.mh_psi.delta.sqrt();
        let (d1, lu) = {
            let rng = self.rngs.get(Stream::Psi);
            (d0 + sd * std_normal(rng), uniform_open(rng).ln())
        };
        let psi1 = interval_logit_inv(d1, a, b);
        let mut accepted = false;
        if psi1 > a && psi1 < b {
            let s1 = self.ctx.temporal.with_psi(psi1);
            if s1.validate().is_ok() {
                let tf1 = factors(&s1)?;
                let lp0 = self.psi_log_target(&self.ctx.tfac, psi0)?;
                let lp1 = self.psi_log_target(&tf1, psi1)?;
                if lu < lp1 - lp0 {
                    self.ctx.cond = all_conditional_coeffs(&s1)?;
                    self.ctx.tfac = tf1;
                    self.ctx.temporal = s1;
                    self.state.psi = psi1;
                    accepted = true;
                }
            }
        }
        self.state.mh_psi.record(accepted);
        Ok(())
    }

    fn step_beta(&mut self) -> Result<()> {
        let p = self.data.p();
        if p == 0 {
            return Ok(());
        }
        let pr = &self.spec.priors;
        let res = &self.data.y - self.loadings() * self.state.eta.transpose();
        let (prec, lin) = beta_conditional(&pr.beta_mean, &pr.beta_var, &self.data.x, &self.inv_s2(), &res)?;
        let beta = mvn_precision(self.rngs.get(Stream::Beta), &prec, &lin)?;
        self.state.beta = beta.iter().copied().collect();
        Ok(())
    }

    fn step_sigma2(&mut self) -> Result<()> {
        let f = self.fitted();
        let w = self.likelihood_weight;
        let t = self.data.t() as f64;
        let (a, b) = (self.spec.priors.a, self.spec.priors.b);
        let rng = self.rngs.get(Stream::Sigma2);
        for r in 0..self.data.n() {
            let ss: f64 = (0..self.data.t()).map(|c| (self.data.y[(r, c)] - f[(r, c)]).powi(2)).sum();
            let (shape, rate) = sigma2_conditional(a, b, w, t, ss);
            let s = inv_gamma(rng, shape, rate);
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Numerical(format!("sigma2 draw {s} at row {r}")));
            }
            self.state.sigma2[r] = s;
        }
        Ok(())
    }

    fn step_lambda(&mut self) -> Result<()> {
        let kinv = spd_inverse(&self.state.kappa)?;
        let finv = self.ctx.prior.precision_dense();
        let p0 = kron(&kinv, &finv);
        let yb = self.y_minus_xb();
        let inv_s2 = self.inv_s2();
        let mut lam = self.state.lambda.clone();
        for j in 0..self.spec.k {
            let stats = self.factor_stats(j, &lam, &yb, &inv_s2);
            let mut prec = p0.clone();
            let mut lin = DVector::zeros(self.data.n());
            for r in 0..self.data.n() {
                prec[(r, r)] += stats.s_eta_eta * inv_s2[r];
                lin[r] = inv_s2[r] * stats.s_e_eta[r];
            }
            let draw = mvn_precision(self.rngs.get(Stream::Lambda), &prec, &lin)?;
            lam.set_column(j, &draw);
        }
        self.state.lambda = lam;
        Ok(())
    }

    /// Snapshot of the current state as a stored sample.
    pub fn sample(&self) -> Sample {
        let st = &self.state;
        Sample {
            iter: st.iter,
            eta: st.eta.clone(),
            upsilon: st.upsilon.clone(),
            psi: st.psi,
            rho: st.rho,
            beta: st.beta.clone(),
            sigma2: st.sigma2.clone(),
            kappa: st.kappa.clone(),
            delta: st.shrink.delta.clone(),
            factors: st
                .factors
                .iter()
                .map(|f| FactorSample { l: f.l, atoms: f.atoms.clone(), labels: f.labels.clone(), alpha: f.alpha.clone() })
                .collect(),
            loadings: self.loadings(),
            deviance: -2.0 * self.loglik(),
        }
    }

    /// Overwrite every parameter with a draw from its prior (the
    /// marginal-conditional simulator of a joint-distribution test), then
    /// draw y given those parameters. Priors on ψ and ρ must be proper.
    pub fn draw_from_prior(&mut self) -> Result<()> {
        let k = self.spec.k;
        let m = self.data.m();
        let o = self.data.o;
        let n = self.data.n();
        let pr = self.spec.priors.clone();
        let mut rng = std::mem::replace(self.rngs.get(Stream::Init), crate::rng::stream_rng(0, 0, Stream::Init));

        if self.ctx.temporal.kind != TemporalKind::Independent {
            let (a, b) = pr.psi_bounds;
            let psi = if self.ctx.temporal.kind.psi_is_rho() && (pr.psi_gamma != 1.0 || pr.psi_beta != 1.0) {
                let beta = Beta::new(pr.psi_gamma, pr.psi_beta).map_err(|e| Error::Spec(e.to_string()))?;
                loop {
                    let v = 2.0 * beta.sample(&mut rng) - 1.0;
                    if v > a && v < b {
                        break v;
                    }
                }
            } else {
                a + (b - a) * uniform_open(&mut rng)
            };
            let s1 = self.ctx.temporal.with_psi(psi);
            s1.validate()?;
            self.ctx.tfac = factors(&s1)?;
            self.ctx.cond = all_conditional_coeffs(&s1)?;
            self.ctx.temporal = s1;
            self.state.psi = psi;
        }
        if self.spec.spatial.kind == SpatialKind::Exponential {
            let (a, b) = pr.rho_bounds;
            let rho = a + (b - a) * uniform_open(&mut rng);
            self.ctx.prior = self.prior_at(rho)?;
            self.state.rho = rho;
        }
        self.state.upsilon = inv_wishart(&mut rng, pr.zeta, &pr.omega)?;
        self.state.kappa = inv_wishart(&mut rng, pr.nu, &pr.theta_scale)?;
        // η ~ N(0, H ⊗ Υ): rows of L_H E L_Υᵀ.
        let h = crate::covtemporal::build_h(&self.ctx.temporal)?;
        let lh = chol_jitter(&h)?.l();
        let lu = chol_jitter(&self.state.upsilon)?.l();
        let e = DMatrix::from_fn(self.data.t(), k, |_, _| std_normal(&mut rng));
        self.state.eta = lh * e * lu.transpose();
        if self.data.p() > 0 {
            let d = crate::dist::mvn_cov(&mut rng, &pr.beta_var)?;
            self.state.beta = d.iter().zip(&pr.beta_mean).map(|(x, mu)| x + mu).collect();
        }
        for r in 0..n {
            self.state.sigma2[r] = inv_gamma(&mut rng, pr.a, pr.b);
        }
        if self.spec.variant.clustering() {
            let sh = &mut self.state.shrink;
            for h in 0..k {
                sh.delta[h] = if !sh.use_shrinkage {
                    gamma(&mut rng, sh.a1, sh.a2)
                } else if h == 0 {
                    gamma(&mut rng, sh.a1, 1.0)
                } else {
                    gamma(&mut rng, sh.a2, 1.0)
                };
            }
            let vary = self.spec.variant.vary_l();
            for j in 0..k {
                let tau = self.state.shrink.tau(j);
                let l = self.state.factors[j].l;
                let f = &mut self.state.factors[j];
                f.alpha = (1..l).map(|_| psbp::draw_prior_field(&self.ctx.prior, &self.state.kappa, &mut rng)).collect::<Result<_>>()?;
                f.atoms = (0..l).map(|_| std_normal(&mut rng) / tau.sqrt()).collect();
                f.refresh_weights();
                if vary {
                    for r in 0..n {
                        f.labels[r] = crate::dist::categorical(&mut rng, f.weight_row(r));
                    }
                    f.u = (0..n).map(|r| uniform_open(&mut rng) * f.weight(r, f.labels[r])).collect();
                } else {
                    // z ~ N(α, 1) and ξ = first l with z_l > 0.
                    f.z = f.alpha.iter().map(|a| a.iter().map(|v| v + std_normal(&mut rng)).collect()).collect();
                    for r in 0..n {
                        let a = (r % m) * o + r / m;
                        f.labels[r] = (0..l - 1).find(|&q| f.z[q][a] > 0.0).unwrap_or(l - 1);
                    }
                }
            }
        } else {
            let kinv = spd_inverse(&self.state.kappa)?;
            let p0 = kron(&kinv, &self.ctx.prior.precision_dense());
            for j in 0..k {
                let d = mvn_precision(&mut rng, &p0, &DVector::zeros(n))?;
                self.state.lambda.set_column(j, &d);
            }
        }
        self.resimulate_y(&mut rng);
        *self.rngs.get(Stream::Init) = rng;
        Ok(())
    }

    pub fn into_store(self, chain: u32, samples: Vec<Sample>) -> PosteriorStore {
        PosteriorStore {
            variant: self.spec.variant,
            chain,
            m: self.data.m(),
            o: self.data.o,
            t: self.data.t(),
            k: self.spec.k,
            samples,
            mh_psi: self.state.mh_psi,
            mh_rho: self.state.mh_rho,
            audit: self.audit,
            timings: self.timings,
        }
    }
}

/// Inverse-gamma (shape, rate) of σ²_r given the residual sum of squares
/// over `t` times; `weight` scales the likelihood.
pub fn sigma2_conditional(a: f64, b: f64, weight: f64, t: f64, ss: f64) -> (f64, f64) {
    (a + weight * t / 2.0, b + weight * 0.5 * ss)
}

/// Inverse-Wishart (df, scale) of Υ given ηᵀH⁻¹η.
pub fn upsilon_conditional(zeta: f64, omega: &DMatrix<f64>, t: usize, eta_quad: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    (t as f64 + zeta, eta_quad + omega)
}

/// Inverse-Wishart (df, scale) of κ given the per-field outer products
/// Σ_s α_s,o F⁻¹ α_s,o'.
pub fn kappa_conditional(nu: f64, theta: &DMatrix<f64>, m: usize, quads: &[DMatrix<f64>]) -> (f64, DMatrix<f64>) {
    let mut scale = theta.clone();
    for q in quads {
        scale += q;
    }
    ((m * quads.len()) as f64 + nu, scale)
}

/// Precision and linear term of η_t given its temporal neighbors (conditional
/// mean `m0`, variance factor `hstar`) and the data term ΛᵀΣ⁻¹(y_t − X_tβ).
pub fn eta_conditional(
    upsilon_inv: &DMatrix<f64>,
    hstar: f64,
    m0: &DVector<f64>,
    ltl: &DMatrix<f64>,
    data_lin: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let c0inv = upsilon_inv / hstar;
    let prec = &c0inv + ltl;
    let lin = &c0inv * m0 + data_lin;
    (prec, lin)
}

/// Precision and linear term of β given residuals y − Λη and weights 1/σ².
pub fn beta_conditional(
    mean: &[f64],
    var: &DMatrix<f64>,
    x: &[DMatrix<f64>],
    inv_s2: &[f64],
    res: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let p = mean.len();
    let s0inv = spd_inverse(var)?;
    let mut prec = s0inv.clone();
    let mut lin = &s0inv * DVector::from_column_slice(mean);
    for (t, xt) in x.iter().enumerate() {
        for r in 0..xt.nrows() {
            let w = inv_s2[r];
            for a in 0..p {
                lin[a] += w * xt[(r, a)] * res[(r, t)];
                for b in 0..p {
                    prec[(a, b)] += w * xt[(r, a)] * xt[(r, b)];
                }
            }
        }
    }
    Ok((prec, lin))
}

/// Burn-in plus post-burn-in sweeps, keeping every `thin`-th sample.
pub fn run_chain(spec: &ModelSpec, data: &Dataset, chain: u32) -> Result<PosteriorStore> {
    let mut s = Sampler::new(spec.clone(), data.clone(), chain)?;
    let sched = spec.schedule.clone();
    for _ in 0..sched.burnin {
        s.sweep(true)?;
    }
    let mut samples = Vec::with_capacity(spec.n_kept());
    for i in 0..sched.post_burnin {
        s.sweep(false)?;
        if (i + 1) % sched.thin == 0 {
            let smp = s.sample();
            if !smp.deviance.is_finite() {
                return Err(Error::Step { iter: smp.iter, step: "deviance", msg: "non-finite deviance".into() });
            }
            samples.push(smp);
        }
    }
    Ok(s.into_store(chain, samples))
}
