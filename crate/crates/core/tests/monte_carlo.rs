//! Gaussian Euler simulations of the forward counterexamples: negativity
//! must show up off the lattice too, well outside sampling noise.

use std::sync::Arc;

use volterra_lab::cones::DenseMatrix;
use volterra_lab::forward::{
    euler_monte_carlo, DiffusionKernel, ForwardModel, FreeTerm, FsdeSpec, FsvieSpec, LinearCoefficients,
    MonteCarloConfig,
};

/// `X = 2T - t + int_0^t X dW` is the SDE `dX = -dt + X dW`, `X(0) = 2T`.
#[test]
fn decreasing_free_term_goes_negative_under_gaussian_noise() {
    let horizon = 1.0;
    let coefficients = LinearCoefficients {
        drift_matrix: Arc::new(|_, _| DenseMatrix::scalar(0.0)),
        diffusion_matrix: Arc::new(|_, _| DenseMatrix::scalar(1.0)),
        forcing: Arc::new(|_, _, out| out[0] = -1.0),
    };
    let spec = FsdeSpec::linear(0, vec![2.0 * horizon], coefficients).unwrap();
    let config = MonteCarloConfig::new(horizon, 1024, 100_000, 7);
    let summary = euler_monte_carlo(ForwardModel::Sde(&spec), &config).unwrap();
    let (freq, se) = (summary.violation_frequency[1024], summary.standard_error[1024]);
    assert!(freq > 3.0 * se, "P(X(T) < 0) = {freq} with standard error {se}");
    // The mean solves m' = -1.
    assert!((summary.mean[1024][0] - 1.0).abs() < 0.02, "mean {}", summary.mean[1024][0]);
}

#[test]
fn switched_drift_goes_negative_under_gaussian_noise() {
    let tau = 0.5;
    let spec = FsvieSpec::new(1, FreeTerm::constant(vec![1.0]))
        .with_drift_kernel(Arc::new(move |t, _, _| DenseMatrix::scalar(if t < tau { 1.0 } else { 0.0 })))
        .with_diffusion(DiffusionKernel::Separated(Arc::new(|_, _| DenseMatrix::scalar(1.0))));
    let config = MonteCarloConfig::new(1.0, 256, 20_000, 11);
    let summary = euler_monte_carlo(ForwardModel::Volterra(&spec), &config).unwrap();
    let (freq, se) = (summary.violation_frequency[256], summary.standard_error[256]);
    assert!(freq > 3.0 * se, "P(X(T) < 0) = {freq} with standard error {se}");
    // Strictly before the switch the equation is a positive linear SDE; at
    // the switch itself the drift vanishes for the whole history.
    assert_eq!(summary.violation_frequency[127], 0.0);
    assert!(summary.violation_frequency[128] > 0.0);
}
