use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use spatfactor::covspatial::SpatialKind;
use spatfactor::covtemporal::TemporalKind;
use spatfactor::data::Dataset;
use spatfactor::diagnostics::*;
use spatfactor::gibbs::*;
use spatfactor::simulate::{simulate, two_group_design};

fn fit(v: Variant) -> (Dataset, PosteriorStore) {
    let data = simulate(&two_group_design(3, 6, 0.1, 0.5, 31)).unwrap().0;
    let mut s = ModelSpec::with_defaults(v, &data, 2, 3, TemporalKind::Exponential, 1, SpatialKind::Exponential).unwrap();
    s.schedule.burnin = 20;
    s.schedule.post_burnin = 10;
    let st = run_chain(&s, &data, 0).unwrap();
    (data, st)
}

#[test]
fn exact_draws_give_zero_error() {
    let y = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(mse_family(&[y.clone(), y.clone()], &y), (0.0, 0.0, 0.0));
}

#[test]
fn symmetric_pair_of_draws() {
    let y = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0]);
    let up = y.map(|v| v + 1.0);
    let down = y.map(|v| v - 1.0);
    let (mm, m, v) = mse_family(&[up, down], &y);
    assert_abs_diff_eq!(mm, 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(m, 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(v, 2.0, epsilon = 1e-15);
}

#[test]
fn total_variance_decomposition() {
    let y = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 2.0, 0.0]);
    let draws: Vec<DMatrix<f64>> = (0..5).map(|w| y.map(|v| v + (w as f64 - 1.3) * 0.7 + v * 0.1 * w as f64)).collect();
    let (mm, m, v) = mse_family(&draws, &y);
    let width = draws.len() as f64;
    assert_abs_diff_eq!(m, mm + (width - 1.0) / width * v, epsilon = 1e-12);
}

#[test]
fn dic_identities() {
    assert_eq!(dic(&[-3.0, -3.0], -3.0), (0.0, 6.0));
    let (pd, d) = dic(&[-1.0, -3.0], -1.5);
    assert_abs_diff_eq!(pd, 4.0 - 3.0, epsilon = 1e-15);
    assert_abs_diff_eq!(d, 4.0 + 1.0, epsilon = 1e-15);
    // A reported pair (pD, DIC) fixes the mean deviance: DIC − pD.
    let (p_d, dic_v) = (-201218.8, -186963.2);
    assert_abs_diff_eq!(dic_v - p_d, 14255.6, epsilon = 1e-6);
    // A negative pD arises when the plug-in fits better than the average draw.
    let (pd, _) = dic(&[-10.0, -10.0], -20.0);
    assert!(pd < 0.0);
}

#[test]
fn waic_identities() {
    let (lppd, p2) = (6757.339, 9794.118);
    assert_abs_diff_eq!(-2.0 * lppd + 2.0 * p2, 6073.557, epsilon = 0.01);
    let flat = DMatrix::from_element(4, 3, -1.2);
    let (p1, p2, lppd, w) = waic(&flat);
    assert_abs_diff_eq!(p1, 0.0, epsilon = 1e-12);
    assert_eq!(p2, 0.0);
    assert_abs_diff_eq!(lppd, -3.6, epsilon = 1e-12);
    assert_abs_diff_eq!(w, 7.2, epsilon = 1e-12);
}

#[test]
fn waic_log_sum_exp_matches_naive() {
    let ll = DMatrix::from_row_slice(3, 2, &[-0.5, -1.0, -0.2, -2.0, -1.1, -0.7]);
    let (p1, p2, lppd, w) = waic(&ll);
    let mut nl = 0.0;
    let mut np1 = 0.0;
    for c in 0..2 {
        let col = ll.column(c);
        let m = (col.iter().map(|v| v.exp()).sum::<f64>() / 3.0).ln();
        nl += m;
        np1 += 2.0 * (m - col.mean());
    }
    assert_abs_diff_eq!(lppd, nl, epsilon = 1e-10);
    assert_abs_diff_eq!(p1, np1, epsilon = 1e-10);
    assert!(p1 >= 0.0 && p2 >= 0.0);
    assert_abs_diff_eq!(w, -2.0 * lppd + 2.0 * p2, epsilon = 1e-12);
}

#[test]
fn noise_free_draws_equal_fitted_mean() {
    let (data, mut st) = fit(Variant::NngpSequenFixedL);
    for s in &mut st.samples {
        s.sigma2.iter_mut().for_each(|v| *v = 0.0);
    }
    let iters: Vec<usize> = (0..st.samples.len()).collect();
    let draws = posterior_predictive_draws(&st, &data, &iters, 1).unwrap();
    for (d, s) in draws.iter().zip(&st.samples) {
        assert_eq!(*d, fitted_mean(s, &data));
    }
}

#[test]
fn predictive_draws_center_on_fitted_mean() {
    let (data, mut st) = fit(Variant::FullGpFixedL);
    let proto = st.samples[0].clone();
    st.samples = vec![proto.clone(); 2000];
    let iters: Vec<usize> = (0..2000).collect();
    let draws = posterior_predictive_draws(&st, &data, &iters, 2).unwrap();
    let f = fitted_mean(&proto, &data);
    let sd = proto.sigma2[0].sqrt();
    let mean = draws.iter().map(|d| d[(0, 0)]).sum::<f64>() / 2000.0;
    assert_abs_diff_eq!(mean, f[(0, 0)], epsilon = 4.0 * sd / 2000f64.sqrt());
    assert_eq!(draws, posterior_predictive_draws(&st, &data, &iters, 2).unwrap());
}

#[test]
fn metrics_on_a_short_fit() {
    for v in [Variant::Baseline, Variant::NngpSequenVaryLj] {
        let (data, st) = fit(v);
        let iters: Vec<usize> = (0..st.samples.len()).collect();
        let m = fit_metrics(&st, &data, &iters, 3).unwrap();
        assert!(m.values().iter().all(|x| x.is_finite()));
        assert!(m.p_waic_1 >= 0.0 && m.p_waic_2 >= 0.0);
        assert_abs_diff_eq!(m.waic, -2.0 * m.lppd + 2.0 * m.p_waic_2, epsilon = 1e-9);
        let ll = pointwise_loglik(&st, &data, &iters).unwrap();
        assert_eq!(ll.shape(), (iters.len(), data.n() * data.t()));
        // Per-iteration sums reproduce the stored deviance.
        for (row, s) in st.samples.iter().enumerate() {
            assert_abs_diff_eq!(-2.0 * ll.row(row).sum(), s.deviance, epsilon = 1e-6 * s.deviance.abs().max(1.0));
        }
        assert!(fit_metrics(&st, &data, &[], 3).is_err());
        assert!(fit_metrics(&st, &data, &[iters.len()], 3).is_err());
    }
}
