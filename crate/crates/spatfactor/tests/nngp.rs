use std::sync::Arc;

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatfactor::covspatial::{build_f, distance_matrix, SpatialKind};
use spatfactor::nngp::*;
use spatfactor::spatialprior::SpatialPrior;

fn line(m: usize) -> Vec<Vec<f64>> {
    (1..=m).map(|i| vec![i as f64]).collect()
}

fn random_points(m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect()
}

fn dense_f(coords: &[Vec<f64>], rho: f64) -> DMatrix<f64> {
    build_f(SpatialKind::Exponential, rho, &distance_matrix(coords).unwrap())
}

#[test]
fn line_neighbors() {
    let g = build_graph(&line(5), 2).unwrap();
    let want: Vec<Vec<usize>> = vec![vec![], vec![0], vec![1, 0], vec![2, 1], vec![3, 2]];
    assert_eq!(g.neighbors, want);
    assert_eq!(g.reverse[2], vec![3, 4]);
    assert_eq!(g.reverse[0], vec![1, 2]);
    assert_eq!(g.reverse[4], Vec::<usize>::new());
}

#[test]
fn saturated_graph_uses_all_predecessors() {
    let g = build_graph(&random_points(7, 1), 10).unwrap();
    for i in 0..7 {
        let mut n = g.neighbors[i].clone();
        n.sort_unstable();
        assert_eq!(n, (0..i).collect::<Vec<_>>());
    }
}

#[test]
fn zero_neighbors_rejected() {
    assert!(build_graph(&line(3), 0).is_err());
}

#[test]
fn two_site_factors() {
    let coords = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
    let g = build_graph(&coords, 1).unwrap();
    let lf = local_factors(&g, &coords, 0.8).unwrap();
    assert!(lf.b[0].is_empty());
    assert_eq!(lf.f[0], 1.0);
    assert_abs_diff_eq!(lf.b[1][0], 0.44932896411722156, epsilon = 1e-15);
    assert_abs_diff_eq!(lf.f[1], 0.7981034820053446, epsilon = 1e-15);
}

#[test]
fn saturated_precision_is_dense_inverse() {
    let coords = random_points(6, 2);
    let g = build_graph(&coords, 5).unwrap();
    let lf = local_factors(&g, &coords, 3.0).unwrap();
    let q = sparse_precision(&g, &lf).to_dense();
    let inv = dense_f(&coords, 3.0).try_inverse().unwrap();
    for (a, b) in q.iter().zip(inv.iter()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-8);
    }
}

#[test]
fn single_site_precision() {
    let coords = vec![vec![0.3, 0.3]];
    let g = build_graph(&coords, 3).unwrap();
    let lf = local_factors(&g, &coords, 1.0).unwrap();
    assert_eq!(sparse_precision(&g, &lf).to_dense(), DMatrix::identity(1, 1));
    assert_abs_diff_eq!(nngp_logdet(&lf, &DMatrix::identity(1, 1)).unwrap(), 0.0, epsilon = 1e-15);
}

#[test]
fn saturated_logdet() {
    let coords = random_points(5, 3);
    let g = build_graph(&coords, 4).unwrap();
    let lf = local_factors(&g, &coords, 2.0).unwrap();
    let want = (dense_f(&coords, 2.0) * 2.0).determinant().ln();
    assert_abs_diff_eq!(nngp_logdet(&lf, &DMatrix::from_element(1, 1, 2.0)).unwrap(), want, epsilon = 1e-8);
    let two: f64 = 2.0 * lf.f.iter().map(|f| f.ln()).sum::<f64>();
    assert_abs_diff_eq!(nngp_logdet(&lf, &DMatrix::identity(2, 2)).unwrap(), two, epsilon = 1e-12);
    assert!(nngp_logdet(&lf, &DMatrix::from_element(1, 1, -1.0)).is_err());
}

#[test]
fn saturated_density_equals_gp_density() {
    let coords = random_points(5, 4);
    let g = Arc::new(build_graph(&coords, 4).unwrap());
    let nn = SpatialPrior::nngp(g, &coords, 1.5).unwrap();
    let f = dense_f(&coords, 1.5);
    let chol = f.clone().cholesky().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..5).map(|_| rng.random::<f64>() - 0.5).collect();
    let v = DVector::from_column_slice(&a);
    let quad = v.dot(&chol.solve(&v));
    let want = -0.5 * (5.0 * (2.0 * std::f64::consts::PI).ln() + f.determinant().ln() + quad);
    let got = nn.log_density(&[&a], &DMatrix::identity(1, 1), 0.0);
    assert_abs_diff_eq!(got, want, epsilon = 1e-8);
}

#[test]
fn nnz_bound() {
    let coords = random_points(400, 5);
    for h in [5, 10, 15] {
        let g = build_graph(&coords, h).unwrap();
        let lf = local_factors(&g, &coords, 5.0).unwrap();
        let q = sparse_precision(&g, &lf);
        assert!(q.nnz() <= 400 * (h * (h + 1) + 1));
        assert!(lf.kernel_evals <= 400 * (h * h + h));
    }
}

#[test]
fn quad_outer_matches_precision_form() {
    let coords = random_points(8, 6);
    let g = build_graph(&coords, 3).unwrap();
    let lf = local_factors(&g, &coords, 2.0).unwrap();
    let q = sparse_precision(&g, &lf).to_dense();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
    let am = DMatrix::from_column_slice(2, 8, &a);
    let want = &am * q * am.transpose();
    let got = quad_outer(&g, &lf, &a, 2);
    for (x, y) in got.iter().zip(want.iter()) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-10);
    }
}

#[test]
fn kriging_on_a_line() {
    let k = krige_factors(&line(5), &[vec![3.2]], 2, 0.7).unwrap();
    assert_eq!(k[0].neighbors, vec![2, 3]);
    assert_abs_diff_eq!(k[0].b[0], 0.7774115325620211, epsilon = 1e-13);
    assert_abs_diff_eq!(k[0].b[1], 0.18515792178055848, epsilon = 1e-13);
    assert_abs_diff_eq!(k[0].f, 0.21838699870873512, epsilon = 1e-13);
    assert!(!k[0].degenerate);
}

#[test]
fn kriging_at_existing_point_is_degenerate() {
    let k = krige_factors(&line(5), &[vec![2.0]], 3, 0.7).unwrap();
    assert!(k[0].degenerate);
    assert_eq!(k[0].neighbors, vec![1]);
    assert_eq!(k[0].f, 0.0);
}

#[test]
fn kriging_variance_in_unit_interval() {
    let reference = random_points(30, 7);
    let new = random_points(20, 8);
    for kf in krige_factors(&reference, &new, 6, 4.0).unwrap() {
        assert!(kf.f > 0.0 && kf.f <= 1.0);
        assert_eq!(kf.neighbors.len(), 6);
    }
}
