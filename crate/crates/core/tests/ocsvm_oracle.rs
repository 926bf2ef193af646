mod common;

use anomkit::numcore::Rng;
use anomkit::ocsvm::{fit_ocsvm, solve_dual, OcSvmParams, Origin};
use common::oracles::ocsvm_brute_force;
use proptest::prelude::*;

fn points(n: usize, d: usize, offset: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| (0..d).map(|_| offset + rng.normal()).collect()).collect()
}

#[test]
fn matches_brute_force_on_fixed_instances() {
    for (n, d, nu, seed) in [(5, 2, 0.5, 1), (8, 3, 0.3, 2), (6, 1, 0.4, 3), (7, 2, 0.9, 4), (8, 2, 0.15, 5)] {
        let x = points(n, d, 1.5, seed);
        let oracle = ocsvm_brute_force(&x, nu);
        let sol = solve_dual(&x, nu, 1e-12, 100_000).unwrap();
        assert!((sol.objective() - oracle.objective).abs() <= 1e-8);
        for (a, b) in sol.alpha.iter().zip(&oracle.alpha) {
            assert!((a - b).abs() <= 1e-6, "alpha {a} vs {b}");
        }
        if let Some(rho) = oracle.rho {
            assert!((sol.rho - rho).abs() <= 1e-6, "rho {} vs {rho}", sol.rho);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solver_agrees_with_enumeration(n in 2usize..=8, d in 1usize..=3, nu in 0.05f64..=1.0, offset in 0.0f64..3.0, seed in any::<u64>()) {
        let x = points(n, d, offset, seed);
        let oracle = ocsvm_brute_force(&x, nu);
        let sol = solve_dual(&x, nu, 1e-12, 100_000).unwrap();
        prop_assert!((sol.objective() - oracle.objective).abs() <= 1e-8);
        for (a, b) in sol.w.iter().zip(&oracle.w) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn dual_stays_feasible(n in 2usize..200, nu in 0.02f64..=1.0, seed in any::<u64>()) {
        let x = points(n, 3, 2.0, seed);
        let sol = solve_dual(&x, nu, 1e-9, 1_000_000).unwrap();
        let c = 1.0 / (nu * n as f64);
        prop_assert!((sol.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
        prop_assert!(sol.alpha.iter().all(|&a| a >= 0.0 && a <= c + 1e-12));
    }

    #[test]
    fn nu_bounds_hold(n in 20usize..300, nu in 0.05f64..0.95, seed in any::<u64>()) {
        let x: Vec<Vec<f32>> = points(n, 3, 2.5, seed)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v as f32).collect())
            .collect();
        let params = OcSvmParams { nu, tol: 1e-9, origin: Origin::Zero, ..Default::default() };
        let (m, sol) = fit_ocsvm(&x, &params, None).unwrap();
        let slack = 2.0 / (n as f64).sqrt();
        let outliers = x.iter().filter(|p| m.decision(p).unwrap() < 0.0).count() as f64 / n as f64;
        let svs = sol.alpha.iter().filter(|&&a| a > 0.0).count() as f64 / n as f64;
        prop_assert!(outliers <= nu + slack, "outliers {outliers} nu {nu}");
        prop_assert!(svs >= nu - slack, "svs {svs} nu {nu}");
    }

    #[test]
    fn constant_dimension_is_ignored(n in 5usize..80, value in -5.0f32..5.0, seed in any::<u64>()) {
        let base: Vec<Vec<f32>> = points(n, 2, 2.0, seed)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v as f32).collect())
            .collect();
        let extended: Vec<Vec<f32>> = base.iter().map(|r| { let mut r = r.clone(); r.push(value); r }).collect();
        let params = OcSvmParams { nu: 0.3, tol: 1e-10, origin: Origin::Zero, ..Default::default() };
        let (a, _) = fit_ocsvm(&base, &params, None).unwrap();
        let (b, _) = fit_ocsvm(&extended, &params, None).unwrap();
        prop_assert_eq!(b.w[2], 0.0);
        let probe = [0.3f32, -1.2];
        let sa = a.decision(&probe).unwrap();
        let sb = b.decision(&[probe[0], probe[1], value + 7.0]).unwrap();
        prop_assert!((sa - sb).abs() <= 1e-9 * (1.0 + sa.abs()));
    }
}
