use std::f64::consts::PI;
use std::sync::Arc;

use matzoh_core::classify::{classify, Branch, ClassifyConfig};
use matzoh_core::grid::{DomainMask, Grid, ScalarField, TimeSeriesField};
use matzoh_core::invariance::invariance_residual;
use matzoh_core::isoparametric::{classify_surface, isoparametric_residual, IsoConfig, SurfaceKind};
use matzoh_core::operators::QuasiLinearOperator;
use proptest::prelude::*;

fn series(grid: Grid, times: &[f64], u: impl Fn(&[f64], f64) -> f64 + Sync + Send) -> TimeSeriesField {
    let grid = Arc::new(grid);
    let mask = Arc::new(DomainMask::full(&grid));
    let snaps = times
        .iter()
        .map(|&t| ScalarField::from_fn(grid.clone(), mask.clone(), Some(t), |x| u(x, t)).unwrap())
        .collect();
    TimeSeriesField::new(snaps).unwrap()
}

fn times() -> Vec<f64> {
    (1..=8).map(|k| 0.1 * k as f64).collect()
}

fn line() -> Grid {
    Grid::spanning(&[0.0], &[PI], &[161]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn eigen_rate_is_invariant_under_affine_maps(c in 0.5f64..3.0, flip in any::<bool>(), d in -5.0f64..5.0) {
        let c = if flip { -c } else { c };
        let s = series(line(), &times(), |x, t| c * (-t).exp() * x[0].sin() + d);
        let r = classify(&s, &QuasiLinearOperator::heat(1), &ClassifyConfig::default()).unwrap();
        prop_assert_eq!(r.branch, Branch::EigenSplit);
        prop_assert!((r.lambda.unwrap() - 1.0).abs() < 1e-2, "lambda {:?}", r.lambda);
        prop_assert!((r.mu.unwrap() - d).abs() < 1e-6 * (1.0 + d.abs()), "mu {:?}", r.mu);
    }

    #[test]
    fn monotone_reparametrization_stays_invariant(k in 0.5f64..4.0, p in 1u32..4) {
        // u = eta(phi, t) with eta increasing in its first argument
        let s = series(line(), &times(), |x, t| (k * x[0].sin() + 1.0 + t).powi(2 * p as i32 - 1));
        let res = invariance_residual(&s, None).unwrap();
        prop_assert!(res.iter().all(|&r| r < 1e-2), "{res:?}");
    }

    #[test]
    fn drift_rate_matches_source(gamma in 0.2f64..3.0, w0 in -2.0f64..2.0) {
        let s = series(line(), &times(), |x, t| gamma * (t + 0.5 * x[0] * x[0]) + w0);
        let r = classify(&s, &QuasiLinearOperator::heat(1), &ClassifyConfig::default()).unwrap();
        prop_assert_eq!(r.branch, Branch::LinearDrift);
        prop_assert!((r.gamma.unwrap() - gamma).abs() < 1e-6 * gamma, "gamma {:?}", r.gamma);
        let d = r.d_test.unwrap();
        prop_assert!(!d.nonzero);
    }

    #[test]
    fn spheres_are_found_at_any_centre(cx in -0.5f64..0.5, cy in -0.5f64..0.5) {
        let grid = Arc::new(Grid::spanning(&[-2.0, -2.0], &[2.0, 2.0], &[81, 81]).unwrap());
        let mask = Arc::new(DomainMask::full(&grid));
        let phi = ScalarField::from_fn(grid, mask, None, |x| (x[0] - cx).powi(2) + (x[1] - cy).powi(2)).unwrap();
        let iso = isoparametric_residual(
            &phi,
            &QuasiLinearOperator::heat(2),
            &IsoConfig { exclude_critical: true, ..IsoConfig::default() },
        )
        .unwrap();
        prop_assert!(iso.pass);
        let r = classify_surface(&phi, 0.5, None).unwrap();
        prop_assert_eq!(r.kind, SurfaceKind::Sphere);
        let c = r.center.unwrap();
        prop_assert!((c[0] - cx).hypot(c[1] - cy) < 1e-3, "{c:?}");
        prop_assert!((r.radius.unwrap() - 0.5f64.sqrt()).abs() < 1e-3);
    }
}
