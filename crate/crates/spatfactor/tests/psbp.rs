use std::sync::Arc;

use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatfactor::dist::{norm_cdf, norm_ppf};
use spatfactor::nngp::build_graph;
use spatfactor::psbp::*;
use spatfactor::spatialprior::SpatialPrior;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// State with m sites, one type, given fields and labels.
fn state(alpha: Vec<Vec<f64>>, labels: Vec<usize>, atoms: Vec<f64>) -> FactorClusterState {
    let m = labels.len();
    let l = alpha.len() + 1;
    let mut st = FactorClusterState { m, o: 1, l, atoms, alpha, weights: vec![], labels, u: vec![], z: vec![] };
    st.refresh_weights();
    st
}

fn stats(e: Vec<f64>, eta2: f64) -> FactorStats {
    let n = e.len();
    FactorStats { s_e_eta: e, s_eta_eta: eta2, inv_s2: vec![1.0; n] }
}

#[test]
fn weights_examples() {
    assert_eq!(weights_from_alpha(&[0.0, 0.0]), vec![0.5, 0.25, 0.25]);
    assert_eq!(weights_from_alpha(&[]), vec![1.0]);
    let w = weights_from_alpha(&[norm_ppf(0.9)]);
    assert_abs_diff_eq!(w[0], 0.9, epsilon = 1e-12);
    assert_abs_diff_eq!(w[1], 0.1, epsilon = 1e-12);
}

#[test]
fn weights_stay_exact_in_the_tail() {
    let w = weights_from_alpha(&[9.0, 0.0]);
    assert!(w[1] > 0.0 && w[2] > 0.0);
    assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
}

#[test]
fn slice_draws_below_own_weight() {
    let mut st = state(vec![vec![norm_ppf(0.4); 4]], vec![0, 0, 1, 1], vec![0.0, 1.0]);
    let mut r = rng(1);
    let mut sum = 0.0;
    let draws = 100_000 / 4;
    for _ in 0..draws {
        sample_slice(&mut st, &mut r).unwrap();
        assert_eq!(st.slice_violations(), 0);
        sum += st.u[0] + st.u[1];
    }
    assert_abs_diff_eq!(sum / (2 * draws) as f64, 0.2, epsilon = 0.005);
}

#[test]
fn slice_with_unit_weight_is_uniform() {
    let mut st = state(vec![], vec![0; 3], vec![0.0]);
    sample_slice(&mut st, &mut rng(2)).unwrap();
    assert!(st.u.iter().all(|&u| u > 0.0 && u < 1.0));
}

#[test]
fn truncation_examples() {
    let w = [0.6, 0.3, 0.1];
    assert_eq!(site_truncation(&w, 0.05), 3);
    assert_eq!(site_truncation(&w, 0.5), 1);
    assert_eq!(site_truncation(&w, 0.2), 2);
}

#[test]
fn lj_is_the_max_rule() {
    // Three sites whose own truncations are 1, 3 and 2.
    let a1 = norm_ppf(0.6);
    let a2 = norm_ppf(0.75);
    let mut st = state(vec![vec![a1; 3], vec![a2; 3], vec![0.0; 3]], vec![0, 0, 0], vec![0.0; 4]);
    st.u = vec![0.5, 0.08, 0.2];
    assert_eq!(update_lj(&mut st), 3);
    assert_eq!(st.l, 3);
    assert_eq!(st.alpha.len(), 2);
    assert_eq!(st.atoms.len(), 3);
    assert_abs_diff_eq!(st.weight_row(0).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
}

#[test]
fn single_admissible_label() {
    let mut st = state(vec![vec![norm_ppf(0.9)]], vec![0], vec![0.0, 5.0]);
    st.u = vec![0.5];
    let s = stats(vec![1.0], 1.0);
    for seed in 0..20 {
        sample_labels_vary_l(&mut st, &s, &mut rng(seed)).unwrap();
        assert_eq!(st.labels[0], 0);
    }
}

#[test]
fn equal_likelihood_splits_evenly() {
    let mut st = state(vec![vec![0.0; 1]], vec![0], vec![1.0, 1.0]);
    st.u = vec![0.1];
    let s = stats(vec![0.3], 1.0);
    let mut r = rng(3);
    let n = 10_000;
    let hits = (0..n)
        .filter(|_| {
            sample_labels_vary_l(&mut st, &s, &mut r).unwrap();
            st.labels[0] == 1
        })
        .count();
    assert_abs_diff_eq!(hits as f64 / n as f64, 0.5, epsilon = 0.01);
}

#[test]
fn label_probability_from_normal_densities() {
    // T = 1, σ² = 1, residual 1, η = 1, atoms {0, 1}, both admissible.
    let mut st = state(vec![vec![0.0]], vec![0], vec![0.0, 1.0]);
    st.u = vec![0.01];
    let s = stats(vec![1.0], 1.0);
    assert_abs_diff_eq!(s.loglik(0, 1.0) - s.loglik(0, 0.0), 0.5, epsilon = 1e-15);
    let mut r = rng(4);
    let n = 40_000;
    let hits = (0..n)
        .filter(|_| {
            sample_labels_vary_l(&mut st, &s, &mut r).unwrap();
            st.labels[0] == 1
        })
        .count();
    assert_abs_diff_eq!(hits as f64 / n as f64, 0.6224593312018546, epsilon = 0.01);
}

#[test]
fn fixed_l_labels_weight_the_prior() {
    // Equal likelihoods, weights (0.9, 0.1).
    let mut st = state(vec![vec![norm_ppf(0.9)]], vec![0], vec![2.0, 2.0]);
    let s = stats(vec![0.0], 1.0);
    let mut r = rng(5);
    let n = 20_000;
    let hits = (0..n)
        .filter(|_| {
            sample_labels_fixed_l(&mut st, &s, &mut r).unwrap();
            st.labels[0] == 0
        })
        .count();
    assert_abs_diff_eq!(hits as f64 / n as f64, 0.9, epsilon = 0.01);
}

#[test]
fn empty_support_is_an_error() {
    let mut st = state(vec![vec![0.0]], vec![0], vec![0.0, 1.0]);
    st.u = vec![0.9];
    assert!(sample_labels_vary_l(&mut st, &stats(vec![0.0], 1.0), &mut rng(6)).is_err());
}

fn atom_moments(st: &mut FactorClusterState, tau: f64, s: &FactorStats, n: usize) -> (f64, f64) {
    let mut r = rng(7);
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            sample_atoms(st, tau, s, &mut r);
            st.atoms[0]
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var)
}

#[test]
fn occupied_atom_posterior() {
    let mut st = state(vec![], vec![0], vec![0.0]);
    let (mean, var) = atom_moments(&mut st, 1.0, &stats(vec![1.4], 1.0), 40_000);
    assert_abs_diff_eq!(mean, 0.7, epsilon = 0.02);
    assert_abs_diff_eq!(var, 0.5, epsilon = 0.02);
}

#[test]
fn empty_atom_draws_from_prior() {
    let mut st = state(vec![vec![0.0]], vec![1], vec![0.0, 0.0]);
    let (mean, var) = atom_moments(&mut st, 4.0, &stats(vec![3.0], 1.0), 40_000);
    assert_abs_diff_eq!(mean, 0.0, epsilon = 0.02);
    assert_abs_diff_eq!(var, 0.25, epsilon = 0.01);
}

#[test]
fn uninformative_factor_leaves_prior() {
    let mut st = state(vec![], vec![0], vec![0.0]);
    let (mean, var) = atom_moments(&mut st, 2.0, &stats(vec![0.0], 0.0), 40_000);
    assert_abs_diff_eq!(mean, 0.0, epsilon = 0.02);
    assert_abs_diff_eq!(var, 0.5, epsilon = 0.02);
}

#[test]
fn delta_conditionals() {
    let sh = ShrinkageState { a1: 1.0, a2: 3.0, delta: vec![1.0], use_shrinkage: true };
    assert_eq!(delta_conditional(&sh, &[&[0.0, 0.0]], 0), (2.0, 1.0));

    let sh = ShrinkageState { a1: 2.0, a2: 1.0, delta: vec![1.0], use_shrinkage: false };
    let atoms = [1.0, 1.0, 0.0, 0.0];
    assert_eq!(delta_conditional(&sh, &[&atoms], 0), (4.0, 2.0));

    let sh = ShrinkageState { a1: 2.0, a2: 2.0, delta: vec![1.5, 2.0, 0.5], use_shrinkage: true };
    let a: Vec<&[f64]> = vec![&[0.1, 0.2], &[0.3, 0.4], &[0.5, 0.6]];
    let shapes: Vec<f64> = (0..3).map(|h| delta_conditional(&sh, &a, h).0).collect();
    assert!(shapes[0] > shapes[1] && shapes[1] > shapes[2]);
    // Rate for h = 1 sums over j = 1, 2 with δ_1 left out.
    let rate = 1.0 + 0.5 * (1.5 * (0.09 + 0.16) + 1.5 * 0.5 * (0.25 + 0.36));
    assert_abs_diff_eq!(delta_conditional(&sh, &a, 1).1, rate, epsilon = 1e-14);
}

#[test]
fn tau_is_cumulative_product() {
    let sh = ShrinkageState { a1: 2.0, a2: 2.0, delta: vec![2.0, 3.0, 0.5], use_shrinkage: true };
    assert_eq!(sh.taus(), vec![2.0, 6.0, 3.0]);
}

#[test]
fn latent_z_branches() {
    // Row 0: ξ = 0 < l = 1 free; row 1: ξ = 1 = l; row 2: ξ = 2 > l.
    let mut st = state(vec![vec![0.0; 3], vec![0.0; 3]], vec![0, 1, 2], vec![0.0; 3]);
    st.z = st.alpha.clone();
    let mut r = rng(8);
    let n = 100_000;
    let (mut free, mut pos) = (0.0, 0.0);
    for _ in 0..n {
        sample_z(&mut st, &mut r);
        assert!(st.z[1][1] > 0.0);
        assert!(st.z[1][2] < 0.0);
        assert!(st.z[0][1] < 0.0 && st.z[0][2] < 0.0);
        assert!(st.z[0][0] > 0.0);
        free += st.z[1][0];
        pos += st.z[1][1];
    }
    assert_abs_diff_eq!(free / n as f64, 0.0, epsilon = 0.01);
    assert_abs_diff_eq!(pos / n as f64, 0.7978845608028654, epsilon = 0.01);
}

#[test]
fn scalar_block_posterior() {
    let post = BlockPosterior::new(&SpatialPrior::independent(1), &DMatrix::identity(1, 1)).unwrap();
    let mut r = rng(9);
    let n = 40_000;
    let d: Vec<f64> = (0..n).map(|_| post.draw(&[2.0], &mut r)[0]).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert_abs_diff_eq!(mean, 1.0, epsilon = 0.02);
    assert_abs_diff_eq!(var, 0.5, epsilon = 0.02);
}

#[test]
fn block_posterior_covariance_below_identity() {
    let coords: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.3, 0.0]).collect();
    let d = spatfactor::covspatial::distance_matrix(&coords).unwrap();
    let prior = SpatialPrior::dense(1.0, &d).unwrap();
    let post = BlockPosterior::new(&prior, &DMatrix::from_element(1, 1, 2.0)).unwrap();
    let cov = post.chol.inverse();
    for e in cov.symmetric_eigenvalues().iter() {
        assert!(*e <= 1.0 + 1e-12);
    }
    let mean = post.chol.solve(&nalgebra::DVector::zeros(5));
    assert!(mean.iter().all(|v| *v == 0.0));
}

#[test]
fn lower_bound_at_own_label() {
    let mut st = state(vec![vec![0.3], vec![-0.2]], vec![1], vec![0.0; 3]);
    st.u = vec![0.1];
    let (lo, hi) = alpha_bounds(&st, 1, 0);
    let want = norm_ppf(st.u[0] / (1.0 - norm_cdf(0.3)));
    assert_abs_diff_eq!(lo, want, epsilon = 1e-12);
    assert_eq!(hi, f64::INFINITY);
    assert_eq!(alpha_bounds(&st, 2, 0), (f64::NEG_INFINITY, f64::INFINITY));
}

#[test]
fn vary_l_block_keeps_slice_invariant() {
    let coords: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.2, 0.0]).collect();
    let d = spatfactor::covspatial::distance_matrix(&coords).unwrap();
    let prior = SpatialPrior::dense(2.0, &d).unwrap();
    let kappa = DMatrix::identity(1, 1);
    let mut r = rng(10);
    let mut st = init_state(6, 1, 4, 1.0, &prior, &kappa, true, &mut r).unwrap();
    for _ in 0..50 {
        sample_slice(&mut st, &mut r).unwrap();
        sample_alpha_block_vary_l(&mut st, &prior, &kappa, 1000, &mut r).unwrap();
        assert_eq!(st.slice_violations(), 0);
    }
}

#[test]
fn sequential_matches_block_at_one_site() {
    let coords = vec![vec![0.0, 0.0]];
    let g = Arc::new(build_graph(&coords, 3).unwrap());
    let prior = SpatialPrior::nngp(g.clone(), &coords, 1.0).unwrap();
    let SpatialPrior::Nngp { local, .. } = &prior else { unreachable!() };
    let kappa = DMatrix::identity(1, 1);
    let mut st = state(vec![vec![0.0]], vec![0], vec![0.0, 0.0]);
    st.z = vec![vec![3.0]];
    let mut r = rng(11);
    let n = 40_000;
    let mut d = Vec::with_capacity(n);
    for _ in 0..n {
        sample_alpha_sequential(&mut st, &g, local, &kappa, false, &mut r).unwrap();
        d.push(st.alpha[0][0]);
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert_abs_diff_eq!(mean, 1.5, epsilon = 0.02);
    assert_abs_diff_eq!(var, 0.5, epsilon = 0.02);
}

#[test]
fn isolated_site_coefficients() {
    let coords = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
    let g = build_graph(&coords, 1).unwrap();
    let lf = spatfactor::nngp::local_factors(&g, &coords, 0.8).unwrap();
    // Site 1 has no reverse neighbors: precision 1/f_1, linear term b α_0 / f_1.
    let (c, a) = nngp_site_coeffs(&g, &lf, &[2.0, 0.0], 1, 1);
    assert_abs_diff_eq!(c, 1.0 / lf.f[1], epsilon = 1e-14);
    assert_abs_diff_eq!(a[0] / c, lf.b[1][0] * 2.0, epsilon = 1e-14);
}

#[test]
fn init_state_is_consistent() {
    let prior = SpatialPrior::independent(5);
    let st = init_state(5, 2, 3, 1.0, &prior, &DMatrix::identity(2, 2), false, &mut rng(12)).unwrap();
    assert_eq!(st.alpha.len(), 2);
    assert_eq!(st.weights.len(), 10 * 3);
    assert_eq!(st.z, st.alpha);
    assert!(st.labels.iter().all(|&l| l < 3));
    for r in 0..10 {
        assert_abs_diff_eq!(st.weight_row(r).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}
