use num_rational::Ratio;
use proptest::prelude::*;

use fbsde::analysis::{fit_slope, sup_bound_check, LatticePlan, Tolerances};
use fbsde::grids::{
    gaussian_moment_coefficient, moment_exact, trinomial, weight_values, TruncMode, TruncationConfig,
    WeightRule,
};
use fbsde::model::{Coefficient, DriverSpec, ModelSpec, TerminalCondition};
use fbsde::parallel::Parallelism;
use fbsde::schemes::{run_backward, SchemeConfig, SchemeKind};

fn spec(sigma: f64, c1: f64, c3: f64, z: f64, lo: f64) -> ModelSpec {
    ModelSpec::new(
        1.0,
        0.0,
        Coefficient::Constant(0.0),
        Coefficient::Constant(sigma),
        TerminalCondition::Clamp { lo, hi: -lo, slope: 1.0 },
        DriverSpec::polynomial(vec![0.0, c1, 0.0, c3], z).unwrap(),
    )
    .unwrap()
}

fn trunc(r0: f64, mode: TruncMode) -> TruncationConfig {
    TruncationConfig {
        r0,
        alpha: 0.249,
        epsilon: None,
        mode,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pre_and_post_agree_nodewise(
        sigma in 0.3f64..2.5,
        c1 in -2.0f64..0.0,
        c3 in -1.0f64..0.0,
        z in -0.5f64..0.5,
        n in 2usize..30,
        r0 in 0.5f64..5.0,
        moll in any::<bool>(),
    ) {
        let s = spec(sigma, c1, c3, z, -5.0);
        let t = trunc(r0, if moll { TruncMode::Mollified } else { TruncMode::Hard });
        let lat = LatticePlan::Tree.build(&s, n).unwrap();
        let pre = run_backward(&SchemeConfig::new(SchemeKind::FullProjectionPre).with_truncation(t), &lat, &s).unwrap();
        let post = run_backward(&SchemeConfig::new(SchemeKind::FullProjectionPost).with_truncation(t), &lat, &s).unwrap();
        let th = pre.truncation.unwrap();
        for i in 0..=n {
            for (a, b) in pre.y[i].iter().zip(&post.y[i]) {
                prop_assert!((th.apply(*a) - b).abs() <= 1e-12);
            }
            prop_assert_eq!(&pre.z[i], &post.z[i]);
        }
    }

    #[test]
    fn projected_values_stay_in_the_truncation_band(
        sigma in 0.3f64..2.5,
        c3 in -1.0f64..0.0,
        n in 2usize..30,
        r0 in 0.5f64..5.0,
    ) {
        let s = spec(sigma, -1.0, c3, 0.0, -7.0);
        let t = trunc(r0, TruncMode::Hard);
        let lat = LatticePlan::Tree.build(&s, n).unwrap();
        let post = run_backward(&SchemeConfig::new(SchemeKind::FullProjectionPost).with_truncation(t), &lat, &s).unwrap();
        let radius = post.truncation.unwrap().radius;
        for level in &post.y[..n] {
            prop_assert!(level.iter().all(|y| y.abs() <= radius));
        }
    }

    #[test]
    fn monotone_drivers_keep_the_sup_bound(
        sigma in 0.3f64..2.5,
        c1 in -2.0f64..0.0,
        c3 in -1.0f64..0.0,
        n in 2usize..30,
    ) {
        // zero-z drivers with f(0) = 0 and f_y <= 0 under a bounded terminal;
        // the projection step needs y + h f(y) monotone on |y| <= 3
        let s = spec(sigma, c1, c3, 0.0, -3.0);
        let lat = LatticePlan::Tree.build(&s, n).unwrap();
        let mut kinds = vec![SchemeKind::ImplicitBtz];
        if (c1.abs() + 27.0 * c3.abs()) / n as f64 <= 1.0 {
            kinds.push(SchemeKind::FullProjectionPre);
        }
        for kind in kinds {
            let run = run_backward(&SchemeConfig::new(kind).with_truncation(trunc(2.0, TruncMode::Hard)), &lat, &s).unwrap();
            let led = sup_bound_check(&run, Tolerances { abs: 1e-10, rel: 0.0 });
            prop_assert_eq!(led.violations(), 0);
        }
    }

    #[test]
    fn execution_policy_does_not_change_results(n in 2usize..40, theta in 0.0f64..=1.0) {
        let s = spec(1.5, -1.0, -1.0, 0.2, -7.0);
        let lat = LatticePlan::Tree.build(&s, n).unwrap();
        let cfg = SchemeConfig::new(SchemeKind::Theta(theta)).with_truncation(trunc(2.0, TruncMode::Hard));
        // bitwise, so exploded (NaN) runs compare too; a diverging solve must
        // fail identically under both policies
        let outcome = |p| match run_backward(&cfg.clone().with_parallelism(p), &lat, &s) {
            Ok(r) => Ok(r.y.iter().chain(&r.z).flatten().map(|v| v.to_bits()).collect::<Vec<u64>>()),
            Err(e) => Err(format!("{e:?}")),
        };
        prop_assert_eq!(outcome(Parallelism::Sequential), outcome(Parallelism::Parallel));
    }

    #[test]
    fn trinomial_matches_gaussian_to_order_five(num in 1i64..1000, den in 1i64..1000) {
        let h = num as f64 / den as f64;
        let d = trinomial(h).unwrap();
        for k in 0..=5 {
            prop_assert_eq!(moment_exact(&d, k), Some(gaussian_moment_coefficient(k)));
        }
        prop_assert_eq!(moment_exact(&d, 6), Some(Ratio::from_integer(9)));
        let w = weight_values(WeightRule::Truncated, &d, h).unwrap();
        prop_assert!(w.lambda <= 1.0 && w.lambda > 0.0);
    }

    #[test]
    fn slope_fit_recovers_power_laws(p in 0.2f64..3.0, c in 0.01f64..100.0) {
        let pts: Vec<(f64, f64)> = [5.0f64, 10.0, 20.0, 40.0].iter().map(|&n| (1.0 / n, c * n.powf(-p))).collect();
        prop_assert!((fit_slope(&pts).unwrap().slope - p).abs() < 1e-9);
    }
}
