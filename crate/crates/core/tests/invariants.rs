use std::sync::Arc;

use proptest::prelude::*;
use volterra_lab::backward::{solve_bsde, solve_bsvie_family, weak_comparison_functional, BsdeSpec, LinearBsde};
use volterra_lab::cones::{cone_preservation_check, is_metzler, is_nonneg, DenseMatrix};
use volterra_lab::forward::{solve_linear_fsvie, FreeTerm, FsvieSpec};
use volterra_lab::harness::families::{bsvie_comparison_trial, FamilyBounds};
use volterra_lab::harness::{render_report, run_experiment, ReportFormat, ScenarioConfig};
use volterra_lab::lattice::{expectation, martingale_representation, AdaptedProcess, BinaryLattice};

fn matrix(max: usize) -> impl Strategy<Value = DenseMatrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1.0f64..1.0, r * c).prop_map(move |data| DenseMatrix::new(r, c, data).unwrap())
    })
}

fn leaves(depth: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 1 << depth)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn orthant_preservation_matches_entry_signs(a in matrix(4), seed in any::<u64>()) {
        prop_assert_eq!(cone_preservation_check(&a, 16, seed).preserves, is_nonneg(&a, 0.0));
    }

    #[test]
    fn metzler_plus_shift_is_nonneg(a in matrix(4)) {
        prop_assume!(a.is_square());
        let shift = a.max_abs();
        let shifted = a.add(&DenseMatrix::identity(a.rows()).scale(shift)).unwrap();
        prop_assert_eq!(is_metzler(&a, 0.0).unwrap(), is_nonneg(&shifted, 0.0));
    }

    #[test]
    fn martingale_representation_reconstructs(xi in leaves(6)) {
        let lattice = BinaryLattice::new(1.0, 6).unwrap();
        let rep = martingale_representation(&lattice, &xi, 6, 1).unwrap();
        let back = rep.reconstruct(&lattice);
        for (a, b) in back.iter().zip(&xi) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert!((rep.mean[0] - expectation(&lattice, &xi, 6, 1).unwrap()[0]).abs() <= 1e-13);
    }

    /// Linear BSDEs with a Metzler drift and diagonal z-coefficient under the
    /// step bound preserve the order of terminal values.
    #[test]
    fn linear_bsde_is_monotone_in_terminal_value(
        lower in leaves(5),
        bump in prop::collection::vec(0.0f64..1.0, 32),
        a in -1.0f64..1.0,
        b in -1.0f64..1.0,
    ) {
        let lattice = BinaryLattice::new(0.5, 5).unwrap();
        let coefficients = || LinearBsde {
            drift_matrix: Arc::new(move |_, _| DenseMatrix::scalar(a)),
            z_matrix: Arc::new(move |_, _| DenseMatrix::scalar(b)),
            forcing: Arc::new(|t, _, out| out[0] = t.sin()),
        };
        let upper: Vec<f64> = lower.iter().zip(&bump).map(|(l, d)| l + d).collect();
        let lo = solve_bsde(&BsdeSpec::linear(1, lower, coefficients(), &lattice), &lattice, 0).unwrap();
        let up = solve_bsde(&BsdeSpec::linear(1, upper, coefficients(), &lattice), &lattice, 0).unwrap();
        prop_assert!(up.y.min_difference(&lo.y).0 >= -1e-12);
    }

    #[test]
    fn drift_only_volterra_with_nonneg_data_stays_nonneg(
        base in 0.0f64..2.0,
        slope in 0.0f64..2.0,
        phi in 0.0f64..1.0,
        depth in 1usize..8,
    ) {
        let lattice = BinaryLattice::new(1.0, depth).unwrap();
        let spec = FsvieSpec::new(1, FreeTerm::constant(vec![phi]))
            .with_drift_kernel(Arc::new(move |t, s, _| DenseMatrix::scalar(base + slope * (t - s))));
        let x = solve_linear_fsvie(&spec, &lattice).unwrap();
        prop_assert!(x.min_value() >= phi - 1e-14);
    }

    #[test]
    fn random_bsvie_pairs_stay_ordered(seed in any::<u64>(), trial in 0usize..1000) {
        let bounds = FamilyBounds { max_dim: 2, max_depth: 5, coefficient_scale: 1.0 };
        let t = bsvie_comparison_trial(seed, trial, &bounds).unwrap();
        prop_assert!(t.hypotheses.all_satisfied());
        let lower = solve_bsvie_family(&t.lower, &t.lattice).unwrap();
        let upper = solve_bsvie_family(&t.upper, &t.lattice).unwrap();
        prop_assert!(upper.y.min_difference(&lower.y).0 >= -1e-12);
    }

    /// The weak functional of a nonnegative process is nonnegative and, at
    /// the leaves, vanishes.
    #[test]
    fn weak_functional_is_positive_and_vanishes_at_the_horizon(values in prop::collection::vec(0.0f64..1.0, 63)) {
        let lattice = BinaryLattice::new(1.0, 5).unwrap();
        let mut it = values.into_iter();
        let y = AdaptedProcess::from_fn(&lattice, 1, |_, out| out[0] = it.next().unwrap_or(0.0));
        let f = weak_comparison_functional(&y, &lattice).unwrap();
        prop_assert!(f.min_value() >= 0.0);
        prop_assert!(f.level(5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scenario_reports_depend_only_on_the_config(seed in 0u64..1000) {
        let cfg = ScenarioConfig { seed: Some(seed), trials: Some(5), ..ScenarioConfig::named("thm3.2-random") };
        let a = render_report(&[run_experiment(&cfg).unwrap()], ReportFormat::Json).unwrap();
        let b = render_report(&[run_experiment(&cfg).unwrap()], ReportFormat::Json).unwrap();
        prop_assert_eq!(a, b);
    }
}
