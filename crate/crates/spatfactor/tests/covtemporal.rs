use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use spatfactor::covtemporal::*;

fn spec(kind: TemporalKind, rho: f64, d: usize, t: usize) -> TemporalSpec {
    let psi = if kind.psi_is_rho() { rho } else { -rho.ln() };
    TemporalSpec::equispaced(kind, psi, d, t).unwrap()
}

fn assert_mat(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.iter().zip(b.iter()) {
        assert_abs_diff_eq!(x, y, epsilon = tol);
    }
}

#[test]
fn ar1_matrix() {
    let h = build_h(&spec(TemporalKind::Ar1, 0.5, 1, 3)).unwrap();
    let want = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0]);
    assert_mat(&h, &want, 1e-15);
}

#[test]
fn independent_is_identity() {
    let s = TemporalSpec::equispaced(TemporalKind::Independent, 0.0, 1, 4).unwrap();
    assert_eq!(build_h(&s).unwrap(), DMatrix::identity(4, 4));
}

#[test]
fn seasonal_matrix() {
    let h = build_h(&spec(TemporalKind::Sar1, 0.5, 2, 4)).unwrap();
    #[rustfmt::skip]
    let want = DMatrix::from_row_slice(4, 4, &[
        1.0, 0.0, 0.5, 0.0,
        0.0, 1.0, 0.0, 0.5,
        0.5, 0.0, 1.0, 0.0,
        0.0, 0.5, 0.0, 1.0,
    ]);
    assert_mat(&h, &want, 1e-15);
}

#[test]
fn exponential_matches_ar1_with_exp_psi() {
    let a = build_h(&spec(TemporalKind::Ar1, 0.3, 1, 6)).unwrap();
    let b = build_h(&TemporalSpec::equispaced(TemporalKind::Exponential, -(0.3f64).ln(), 1, 6).unwrap()).unwrap();
    assert_mat(&a, &b, 1e-14);
}

#[test]
fn ar1_closed_precision_and_logdet() {
    let f = closed_factors(&spec(TemporalKind::Ar1, 0.5, 1, 3)).unwrap();
    #[rustfmt::skip]
    let want = DMatrix::from_row_slice(3, 3, &[
        1.3333333333333333, -0.6666666666666666, 0.0,
        -0.6666666666666666, 1.6666666666666665, -0.6666666666666666,
        0.0, -0.6666666666666666, 1.3333333333333333,
    ]);
    assert_mat(&f.precision.to_dense(), &want, 1e-14);
    assert_abs_diff_eq!(f.logdet, -0.5753641449035618, epsilon = 1e-14);
}

#[test]
fn seasonal_closed_precision() {
    let f = closed_factors(&spec(TemporalKind::Sar1, 0.5, 2, 5)).unwrap();
    let p = f.precision.to_dense();
    let diag = [1.3333333333333333, 1.3333333333333333, 1.6666666666666665, 1.3333333333333333, 1.3333333333333333];
    for i in 0..5 {
        assert_abs_diff_eq!(p[(i, i)], diag[i], epsilon = 1e-14);
        for j in 0..5 {
            if i == j {
                continue;
            }
            let want = if i.abs_diff(j) == 2 { -0.6666666666666666 } else { 0.0 };
            assert_abs_diff_eq!(p[(i, j)], want, epsilon = 1e-14);
        }
    }
    assert_abs_diff_eq!(f.logdet, -0.8630462173553427, epsilon = 1e-14);
}

#[test]
fn closed_matches_dense_on_grid() {
    for kind in [TemporalKind::Ar1, TemporalKind::Exponential, TemporalKind::Sar1, TemporalKind::Sexponential] {
        for t in 2..=50 {
            for rho in [0.1, 0.5, 0.9] {
                for d in 1..=3 {
                    if !kind.is_seasonal() && d > 1 {
                        continue;
                    }
                    let s = spec(kind, rho, d, t);
                    let c = closed_factors(&s).unwrap();
                    let e = dense_factors(&s).unwrap();
                    assert_mat(&c.precision.to_dense(), &e.precision.to_dense(), 1e-10);
                    assert_abs_diff_eq!(c.logdet, e.logdet, epsilon = 1e-10);
                    let r = c.rooti.to_dense();
                    assert_mat(&(&r * r.transpose()), &c.precision.to_dense(), 1e-10);
                }
            }
        }
    }
}

#[test]
fn closed_rejects_uneven_grid() {
    let s = TemporalSpec::with_timepoints(TemporalKind::Exponential, 0.5, 1, vec![1.0, 2.0, 4.0], false).unwrap();
    assert!(closed_factors(&s).is_err());
    assert_eq!(factors(&s).unwrap().precision.nrows, 3);
}

#[test]
fn interior_conditional() {
    let c = conditional_coeffs(&spec(TemporalKind::Ar1, 0.5, 1, 10), 4).unwrap();
    assert_eq!(c.hplus.len(), 2);
    assert_eq!(c.hplus[0].0, 3);
    assert_eq!(c.hplus[1].0, 4);
    assert_abs_diff_eq!(c.hplus[0].1, 0.4, epsilon = 1e-15);
    assert_abs_diff_eq!(c.hplus[1].1, 0.4, epsilon = 1e-15);
    assert_abs_diff_eq!(c.hstar, 0.6, epsilon = 1e-15);
}

#[test]
fn boundary_conditional() {
    let c = conditional_coeffs(&spec(TemporalKind::Ar1, 0.5, 1, 10), 0).unwrap();
    assert_eq!(c.hplus, vec![(0, 0.5)]);
    assert_abs_diff_eq!(c.hstar, 0.75, epsilon = 1e-15);
}

#[test]
fn conditional_matches_dense_and_variance_identity() {
    for kind in [TemporalKind::Ar1, TemporalKind::Sexponential] {
        let periods = if kind.is_seasonal() { 1..=3 } else { 1..=1 };
        for d in periods {
            let s = spec(kind, 0.7, d, 9);
            let h = build_h(&s).unwrap();
            for t in 0..9 {
                let c = conditional_coeffs(&s, t).unwrap();
                let e = conditional_coeffs_dense(&s, t).unwrap();
                let (cv, ev) = (c.dense(9), e.dense(9));
                for p in 0..8 {
                    assert_abs_diff_eq!(cv[p], ev[p], epsilon = 1e-10);
                }
                assert_abs_diff_eq!(c.hstar, e.hstar, epsilon = 1e-10);
                let explained: f64 = c.by_time().map(|(s, v)| v * h[(s, t)]).sum();
                assert_abs_diff_eq!(explained + c.hstar, 1.0, epsilon = 1e-10);
            }
        }
    }
}

#[test]
fn conditional_out_of_range() {
    assert!(conditional_coeffs(&spec(TemporalKind::Ar1, 0.5, 1, 3), 3).is_err());
}

#[test]
fn one_step_extension() {
    let s = spec(TemporalKind::Ar1, 0.6, 1, 7);
    let (hp, hs) = extension_coeffs(&s, &[8.0]).unwrap();
    for t in 0..6 {
        assert_abs_diff_eq!(hp[(0, t)], 0.0, epsilon = 1e-12);
    }
    assert_abs_diff_eq!(hp[(0, 6)], 0.6, epsilon = 1e-12);
    assert_abs_diff_eq!(hs[(0, 0)], 1.0 - 0.36, epsilon = 1e-12);
}

#[test]
fn seasonal_extension_uses_one_lag() {
    let s = spec(TemporalKind::Sar1, 0.5, 2, 6);
    let (hp, _) = extension_coeffs(&s, &[7.0]).unwrap();
    for t in 0..6 {
        let want = if t == 4 { 0.5 } else { 0.0 };
        assert_abs_diff_eq!(hp[(0, t)], want, epsilon = 1e-12);
    }
}
