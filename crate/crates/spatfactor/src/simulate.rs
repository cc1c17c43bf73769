//! Synthetic datasets from the generative model, with the generating values
//! kept as ground truth.

use nalgebra::DMatrix;
use rand::Rng;

use crate::covspatial::{build_f, distance_matrix, SpatialKind};
use crate::covtemporal::{build_h, TemporalKind, TemporalSpec};
use crate::data::Dataset;
use crate::dist::{categorical, std_normal};
use crate::error::{spec, Result};
use crate::linalg::chol_jitter;
use crate::psbp::weights_from_alpha;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub enum ClusterDesign {
    /// Per factor, a cluster count drawn uniformly from 1..=max_clusters,
    /// stick-breaking weights from GP-distributed α and atoms from N(0, 1).
    Psbp { max_clusters: usize },
    /// Each location joins one group uniformly at random; `atoms[g][j]` is
    /// the loading of group g on factor j for every observation type.
    Groups { atoms: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDesign {
    pub coords: Vec<Vec<f64>>,
    pub o: usize,
    pub t: usize,
    pub k: usize,
    pub temporal_kind: TemporalKind,
    pub psi: f64,
    pub period: usize,
    /// Spatial range of the α fields (Psbp design).
    pub rho: f64,
    pub sigma2: f64,
    pub clusters: ClusterDesign,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    /// (m·O) × k.
    pub loadings: DMatrix<f64>,
    /// Per factor, labels per row (0-based).
    pub labels: Vec<Vec<usize>>,
    /// Per factor, atom values.
    pub atoms: Vec<Vec<f64>>,
    /// T × k.
    pub eta: DMatrix<f64>,
    /// Group per location (Groups design only).
    pub groups: Option<Vec<usize>>,
    pub sigma2: f64,
    pub upsilon: DMatrix<f64>,
}

/// side × side grid on the unit square, x varying fastest.
pub fn grid(side: usize) -> Vec<Vec<f64>> {
    let step = if side > 1 { 1.0 / (side - 1) as f64 } else { 0.0 };
    (0..side * side).map(|c| vec![(c % side) as f64 * step, (c / side) as f64 * step]).collect()
}

impl SimDesign {
    fn validate(&self) -> Result<()> {
        if self.coords.is_empty() || self.o == 0 || self.t == 0 || self.k == 0 {
            return spec("simulation design has an empty dimension");
        }
        if !(self.sigma2 >= 0.0) {
            return spec("sigma2 must be nonnegative");
        }
        match &self.clusters {
            ClusterDesign::Psbp { max_clusters } if *max_clusters == 0 => spec("max_clusters must be at least 1"),
            ClusterDesign::Groups { atoms } if atoms.is_empty() || atoms.iter().any(|a| a.len() != self.k) => {
                spec("group atoms must be nonempty with k entries each")
            }
            _ => Ok(()),
        }
    }
}

pub fn simulate(d: &SimDesign) -> Result<(Dataset, Truth)> {
    d.validate()?;
    let mut rng = stream_rng(d.seed, 0, Stream::Simulate);
    let m = d.coords.len();
    let o = d.o;
    let n = m * o;
    let k = d.k;

    let ts = TemporalSpec::equispaced(d.temporal_kind, d.psi, d.period, d.t)?;
    let lh = chol_jitter(&build_h(&ts)?)?.l();
    let e = DMatrix::from_fn(d.t, k, |_, _| std_normal(&mut rng));
    let eta = lh * e;

    let mut loadings = DMatrix::zeros(n, k);
    let mut labels = Vec::with_capacity(k);
    let mut atoms = Vec::with_capacity(k);
    let mut groups = None;
    match &d.clusters {
        ClusterDesign::Psbp { max_clusters } => {
            let f = build_f(SpatialKind::Exponential, d.rho, &distance_matrix(&d.coords)?);
            let lf = chol_jitter(&f)?.l();
            for j in 0..k {
                let l = rng.random_range(1..=*max_clusters);
                // Fields indexed by row r = o·m + i, independent across types.
                let fields: Vec<Vec<f64>> = (1..l)
                    .map(|_| {
                        let z = DMatrix::from_fn(m, o, |_, _| std_normal(&mut rng));
                        (&lf * z).as_slice().to_vec()
                    })
                    .collect();
                let at: Vec<f64> = (0..l).map(|_| std_normal(&mut rng)).collect();
                let mut lab = vec![0; n];
                for r in 0..n {
                    let al: Vec<f64> = fields.iter().map(|f| f[r]).collect();
                    lab[r] = categorical(&mut rng, &weights_from_alpha(&al));
                    loadings[(r, j)] = at[lab[r]];
                }
                labels.push(lab);
                atoms.push(at);
            }
        }
        ClusterDesign::Groups { atoms: ga } => {
            let g: Vec<usize> = (0..m).map(|_| rng.random_range(0..ga.len())).collect();
            for j in 0..k {
                let mut lab = vec![0; n];
                for r in 0..n {
                    lab[r] = g[r % m];
                    loadings[(r, j)] = ga[lab[r]][j];
                }
                labels.push(lab);
                atoms.push(ga.iter().map(|a| a[j]).collect());
            }
            groups = Some(g);
        }
    }

    let sd = d.sigma2.sqrt();
    let mut y = &loadings * eta.transpose();
    for t in 0..d.t {
        for r in 0..n {
            y[(r, t)] += sd * std_normal(&mut rng);
        }
    }
    let data = Dataset::new(d.coords.clone(), o, ts.timepoints.clone(), y, vec![])?;
    let truth = Truth { loadings, labels, atoms, eta, groups, sigma2: d.sigma2, upsilon: DMatrix::identity(k, k) };
    Ok((data, truth))
}

/// Two-group design: atoms (5, 10) and (5, −10) on two factors, assigned
/// with equal probability over a side × side grid.
pub fn two_group_design(side: usize, t: usize, sigma2: f64, psi: f64, seed: u64) -> SimDesign {
    SimDesign {
        coords: grid(side),
        o: 1,
        t,
        k: 2,
        temporal_kind: TemporalKind::Exponential,
        psi,
        period: 1,
        rho: 1.0,
        sigma2,
        clusters: ClusterDesign::Groups { atoms: vec![vec![5.0, 10.0], vec![5.0, -10.0]] },
        seed,
    }
}
