use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use spatfactor::covspatial::*;

#[test]
fn distances() {
    let d = distance_matrix(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(d, DMatrix::from_row_slice(2, 2, &[0.0, 5.0, 5.0, 0.0]));
    assert_eq!(distance_matrix(&[vec![1.0, 1.0]]).unwrap(), DMatrix::zeros(1, 1));
    let g = distance_matrix(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    assert_abs_diff_eq!(g[(0, 3)], 2f64.sqrt(), epsilon = 1e-15);
}

#[test]
fn correlation_matrix() {
    let d = DMatrix::from_row_slice(2, 2, &[0.0, 5.0, 5.0, 0.0]);
    let f = build_f(SpatialKind::Exponential, 0.8, &d);
    assert_abs_diff_eq!(f[(0, 1)], (-4.0f64).exp(), epsilon = 1e-15);
    assert_eq!(f[(0, 0)], 1.0);
    assert_eq!(build_f(SpatialKind::Independent, 0.8, &DMatrix::zeros(3, 3)), DMatrix::identity(3, 3));
}

#[test]
fn large_range_decays() {
    let coords: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 0.0]).collect();
    let f = build_f(SpatialKind::Exponential, 50.0, &distance_matrix(&coords).unwrap());
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                assert!(f[(i, j)] < 2e-22);
            }
        }
    }
}

#[test]
fn logit_midpoint_and_roundtrip() {
    assert_abs_diff_eq!(interval_logit(1.5, 1.0, 2.0).unwrap(), 0.0, epsilon = 1e-15);
    let d = interval_logit(0.3, 0.0, 1.0).unwrap();
    assert_abs_diff_eq!(interval_logit_inv(d, 0.0, 1.0), 0.3, epsilon = 1e-12);
    assert!(interval_logit(1.0, 0.0, 1.0).is_err());
    assert!(interval_logit(-0.1, 0.0, 1.0).is_err());
}

#[test]
fn jacobian_difference() {
    assert_abs_diff_eq!(log_jacobian(0.0) - log_jacobian(2.0), 0.8675616609660548, epsilon = 1e-14);
}

#[test]
fn inverse_logit_stays_inside_for_large_input() {
    assert_abs_diff_eq!(interval_logit_inv(800.0, 0.5, 2.0), 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(interval_logit_inv(-800.0, 0.5, 2.0), 0.5, epsilon = 1e-15);
    assert!(log_jacobian(800.0).is_finite());
}

#[test]
fn default_bounds_put_small_correlation_at_closest_pair() {
    let (a, b) = default_bounds(&[vec![0.0, 0.0], vec![0.5, 0.0], vec![3.0, 0.0]]).unwrap();
    assert_eq!(a, 1e-3);
    assert_abs_diff_eq!(corr(b, 0.5), 0.01, epsilon = 1e-14);
    assert_eq!(default_psi_bounds(true, &[1.0, 2.0]), (0.0, 1.0));
}

#[test]
fn spec_validates_range() {
    let c = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
    assert!(SpatialSpec::new(SpatialKind::Exponential, 0.5, c.clone(), Some((0.1, 1.0))).is_ok());
    assert!(SpatialSpec::new(SpatialKind::Exponential, 2.0, c, Some((0.1, 1.0))).is_err());
}
