use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use spatfactor::covtemporal::TemporalKind;
use spatfactor::simulate::*;

#[test]
fn grid_layout() {
    let g = grid(3);
    assert_eq!(g.len(), 9);
    assert_eq!(g[1], vec![0.5, 0.0]);
    assert_eq!(g[3], vec![0.0, 0.5]);
    assert_eq!(g[8], vec![1.0, 1.0]);
    assert_eq!(grid(1), vec![vec![0.0, 0.0]]);
}

#[test]
fn zero_noise_and_zero_loadings_give_zero_data() {
    let mut d = two_group_design(3, 8, 0.0, 0.5, 1);
    d.clusters = ClusterDesign::Groups { atoms: vec![vec![0.0, 0.0]] };
    let (data, truth) = simulate(&d).unwrap();
    assert_eq!(data.y, DMatrix::zeros(9, 8));
    assert_eq!(truth.loadings, DMatrix::zeros(9, 2));
}

#[test]
fn two_group_atoms() {
    let (data, truth) = simulate(&two_group_design(5, 10, 0.1, 0.5, 2)).unwrap();
    assert_eq!(data.m(), 25);
    assert_eq!(truth.atoms, vec![vec![5.0, 5.0], vec![10.0, -10.0]]);
    let g = truth.groups.as_ref().unwrap();
    assert!(g.contains(&0) && g.contains(&1));
    for i in 0..25 {
        let want = if g[i] == 0 { [5.0, 10.0] } else { [5.0, -10.0] };
        assert_eq!(truth.loadings[(i, 0)], want[0]);
        assert_eq!(truth.loadings[(i, 1)], want[1]);
        assert_eq!(truth.labels[0][i], g[i]);
    }
}

#[test]
fn temporal_lag_one_autocorrelation() {
    let mut d = two_group_design(2, 500, 0.1, 0.0, 3);
    d.temporal_kind = TemporalKind::Ar1;
    d.psi = 0.6;
    let (_, truth) = simulate(&d).unwrap();
    for j in 0..2 {
        let x: Vec<f64> = truth.eta.column(j).iter().copied().collect();
        let mean = x.iter().sum::<f64>() / 500.0;
        let c0: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let c1: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        assert_abs_diff_eq!(c1 / c0, 0.6, epsilon = 0.1);
    }
}

#[test]
fn psbp_design_truth_is_consistent() {
    let d = SimDesign {
        coords: grid(4),
        o: 2,
        t: 6,
        k: 3,
        temporal_kind: TemporalKind::Exponential,
        psi: 0.4,
        period: 1,
        rho: 2.0,
        sigma2: 0.2,
        clusters: ClusterDesign::Psbp { max_clusters: 4 },
        seed: 4,
    };
    let (data, truth) = simulate(&d).unwrap();
    assert_eq!(data.y.shape(), (32, 6));
    assert_eq!(truth.eta.shape(), (6, 3));
    for j in 0..3 {
        assert!(!truth.atoms[j].is_empty() && truth.atoms[j].len() <= 4);
        for r in 0..32 {
            assert_eq!(truth.loadings[(r, j)], truth.atoms[j][truth.labels[j][r]]);
        }
    }
    assert!(truth.groups.is_none());
}

#[test]
fn deterministic_under_seed() {
    let d = two_group_design(3, 5, 0.3, 0.5, 9);
    let (a, ta) = simulate(&d).unwrap();
    let (b, tb) = simulate(&d).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let mut e = d.clone();
    e.seed = 10;
    assert_ne!(simulate(&e).unwrap().0.y, a.y);
}

#[test]
fn invalid_designs() {
    let mut d = two_group_design(3, 5, 0.3, 0.5, 9);
    d.sigma2 = -1.0;
    assert!(simulate(&d).is_err());
    let mut d = two_group_design(3, 5, 0.3, 0.5, 9);
    d.clusters = ClusterDesign::Groups { atoms: vec![vec![1.0]] };
    assert!(simulate(&d).is_err());
    let mut d = two_group_design(3, 5, 0.3, 0.5, 9);
    d.clusters = ClusterDesign::Psbp { max_clusters: 0 };
    assert!(simulate(&d).is_err());
}
