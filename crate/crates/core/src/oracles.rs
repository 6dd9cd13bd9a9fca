//! Reference solutions for the counterexample gallery.
//!
//! Path-dependent formulas read the lattice's own Brownian values at grid
//! times and integrate with the trapezoid rule over those values, so a
//! solver-versus-oracle gap measures scheme error only.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lattice::{BinaryLattice, NodeId};

/// A reference value with a bound on its quadrature error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub value: f64,
    pub error_bound: f64,
}

impl OracleValue {
    fn exact(value: f64) -> Self {
        Self { value, error_bound: 0.0 }
    }
}

/// `X(t) = 1 - 2 e^t int_0^t e^{-s} X(s) ds`, solved in closed form:
/// `2 e^{-t} - 1`, negative once `t > ln 2`.
pub fn negative_kernel_forward(t: f64) -> f64 {
    2.0 * (-t).exp() - 1.0
}

/// Grid values of the Brownian path leading to `node`, levels `0..=node.level`.
fn path_values(lattice: &BinaryLattice, node: NodeId) -> Vec<f64> {
    (0..=node.level).map(|j| lattice.brownian(node.ancestor(j))).collect()
}

/// Trapezoid rule for `int e^{a s + b W(s)} ds` over grid cells `0..cells`,
/// with a bound against the integral along the linearly interpolated path.
fn trapezoid_exp(lattice: &BinaryLattice, w: &[f64], cells: usize, rate: f64, sign: f64) -> OracleValue {
    let h = lattice.step();
    let f = |j: usize| (rate * lattice.time(j) + sign * w[j]).exp();
    let mut value = 0.0;
    let mut bound = 0.0;
    for j in 0..cells {
        let (left, right) = (f(j), f(j + 1));
        value += 0.5 * h * (left + right);
        let slope = rate + sign * (w[j + 1] - w[j]) / h;
        bound += h.powi(3) / 12.0 * slope * slope * left.max(right);
    }
    OracleValue { value, error_bound: bound }
}

/// `X(t) = 2T - t + int_0^t X dW`, i.e.
/// `e^{-t/2 + W(t)} [2T - int_0^t e^{s/2 - W(s)} ds]` along the lattice path.
pub fn decreasing_free_term_forward(lattice: &BinaryLattice, node: NodeId) -> OracleValue {
    let w = path_values(lattice, node);
    let t = lattice.time(node.level);
    let integral = trapezoid_exp(lattice, &w, node.level, 0.5, -1.0);
    let factor = (-0.5 * t + w[node.level]).exp();
    OracleValue {
        value: factor * (2.0 * lattice.horizon() - integral.value),
        error_bound: factor * integral.error_bound,
    }
}

/// Value of the switched-drift forward equation together with both forms
/// of its negativity test at the switch time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchedDrift {
    pub value: OracleValue,
    /// `sum_{j < switch} t_j dW_j - (ln tau - tau/4)`; negative values are
    /// the criterion as usually quoted.
    pub quoted_criterion: f64,
    /// `tau W(tau) - int_0^tau W ds - tau (ln tau - tau/4)`; a negative
    /// value forces `X(t) < 0` for every `t >= tau` on this path.
    pub sufficient_criterion: f64,
}

/// `X(t) = 1 + int_0^t 1{t < tau} X ds + int_0^t X dW` along the path to
/// `node`: `e^{t/2 + W(t)}` before the switch and
/// `e^{-(t - tau)/2 + W(t) - W(tau)} [e^{tau/2 + W(tau)} - int_0^tau e^{s/2 + W(s)} ds]`
/// from the switch on. The switch time must be a grid time.
pub fn switched_drift_forward(lattice: &BinaryLattice, node: NodeId, switch_index: usize) -> Result<SwitchedDrift> {
    let n = lattice.depth();
    if switch_index == 0 || switch_index >= n {
        return Err(LabError::Argument(format!(
            "switch index must lie strictly inside the grid 0..{n}, got {switch_index}"
        )));
    }
    let leafward = if node.level >= switch_index {
        node
    } else {
        // Extend along down moves so the criterion is defined; it only uses levels <= tau.
        NodeId::new(switch_index, node.path << (switch_index - node.level))
    };
    let w = path_values(lattice, leafward);
    let tau = lattice.time(switch_index);
    let t = lattice.time(node.level);
    let value = if node.level < switch_index {
        OracleValue::exact((0.5 * t + w[node.level]).exp())
    } else {
        let integral = trapezoid_exp(lattice, &w, switch_index, 0.5, 1.0);
        let factor = (-0.5 * (t - tau) + w[node.level] - w[switch_index]).exp();
        OracleValue {
            value: factor * ((0.5 * tau + w[switch_index]).exp() - integral.value),
            error_bound: factor * integral.error_bound,
        }
    };
    let threshold = tau.ln() - tau / 4.0;
    let ito: f64 = (0..switch_index).map(|j| lattice.time(j) * (w[j + 1] - w[j])).sum();
    let h = lattice.step();
    let trap_w: f64 = (0..switch_index).map(|j| 0.5 * h * (w[j] + w[j + 1])).sum();
    Ok(SwitchedDrift {
        value,
        quoted_criterion: ito - threshold,
        sufficient_criterion: tau * w[switch_index] - trap_w - tau * threshold,
    })
}

/// `Y(t) = t - int_t^T Y ds - int_t^T Z dW`: `e^{t-T}(T+1) - 1`.
pub fn increasing_free_term_backward(t: f64, horizon: f64) -> f64 {
    (t - horizon).exp() * (horizon + 1.0) - 1.0
}

/// Last time at which [`increasing_free_term_backward`] is negative.
pub fn increasing_free_term_sign_change(horizon: f64) -> f64 {
    horizon - (horizon + 1.0).ln()
}

/// `Y(t) = int_t^T (s - t - Y(s)) ds - int_t^T Z dW`: `e^{s-T} + T - s - 1`.
pub fn shifted_generator_backward(s: f64, horizon: f64) -> f64 {
    (s - horizon).exp() + horizon - s - 1.0
}

/// `Y(t) = 1 + int_t^T (t - 1) Y ds - int_t^T Z dW`:
/// `1 + (t - 1) int_t^T e^{(r^2 - t^2)/2 - (r - t)} dr`.
pub fn increasing_kernel_backward(t: f64, horizon: f64, tol: f64) -> Result<OracleValue> {
    if !(0.0..=horizon).contains(&t) {
        return Err(LabError::Argument(format!("time {t} outside [0, {horizon}]")));
    }
    let integral = adaptive_simpson(|r| (0.5 * (r * r - t * t) - (r - t)).exp(), t, horizon, tol)?;
    Ok(OracleValue {
        value: 1.0 + (t - 1.0) * integral.value,
        error_bound: (t - 1.0).abs() * integral.error_bound,
    })
}

const SIMPSON_MAX_DEPTH: u32 = 48;

/// Adaptive Simpson quadrature with Richardson correction. The reported
/// bound is the sum of the local error estimates.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<OracleValue> {
    if a == b {
        return Ok(OracleValue::exact(0.0));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(LabError::Quadrature(format!("tolerance must be positive, got {tol}")));
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut bound = 0.0;
    let value = simpson_step(&f, [a, m, b], [fa, fm, fb], whole, tol, SIMPSON_MAX_DEPTH, &mut bound)?;
    Ok(OracleValue { value, error_bound: bound })
}

fn simpson_step(
    f: &impl Fn(f64) -> f64,
    [a, m, b]: [f64; 3],
    [fa, fm, fb]: [f64; 3],
    whole: f64,
    tol: f64,
    depth: u32,
    bound: &mut f64,
) -> Result<f64> {
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if !delta.is_finite() {
        return Err(LabError::Quadrature(format!("non-finite integrand on [{a}, {b}]")));
    }
    if delta.abs() <= 15.0 * tol {
        *bound += delta.abs() / 15.0;
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(LabError::Quadrature(format!(
            "no convergence on [{a}, {b}], local error {:.3e}",
            delta.abs() / 15.0
        )));
    }
    let l = simpson_step(f, [a, lm, m], [fa, flm, fm], left, 0.5 * tol, depth - 1, bound)?;
    let r = simpson_step(f, [m, rm, b], [fm, frm, fb], right, 0.5 * tol, depth - 1, bound)?;
    Ok(l + r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_at_landmarks() {
        assert_eq!(negative_kernel_forward(0.0), 1.0);
        assert!(negative_kernel_forward(2f64.ln()).abs() < 1e-15);
        assert!((negative_kernel_forward(1.0) + 0.264_241_117_657_115_4).abs() < 1e-15);
        assert!((increasing_free_term_backward(2.0, 2.0) - 2.0).abs() < 1e-15);
        assert!((increasing_free_term_backward(0.0, 2.0) - (3.0 * (-2.0f64).exp() - 1.0)).abs() < 1e-15);
        assert_eq!(shifted_generator_backward(3.0, 3.0), 0.0);
    }

    #[test]
    fn simpson_integrates_polynomials_and_exponentials() {
        let cubic = adaptive_simpson(|x| x * x * x, 0.0, 2.0, 1e-12).unwrap();
        assert!((cubic.value - 4.0).abs() < 1e-12);
        let e = adaptive_simpson(f64::exp, 0.0, 1.0, 1e-12).unwrap();
        assert!((e.value - (std::f64::consts::E - 1.0)).abs() < 1e-11);
        assert!(adaptive_simpson(|_| f64::NAN, 0.0, 1.0, 1e-8).is_err());
    }

    #[test]
    fn increasing_kernel_landmarks() {
        for t in [1.0, 3.0] {
            assert!((increasing_kernel_backward(t, 3.0, 1e-10).unwrap().value - 1.0).abs() < 1e-14);
        }
        assert!(increasing_kernel_backward(0.0, 3.0, 1e-10).unwrap().value < 0.0);
    }

    #[test]
    fn decreasing_free_term_starts_at_twice_horizon() {
        let l = BinaryLattice::new(1.5, 6).unwrap();
        assert!((decreasing_free_term_forward(&l, NodeId::ROOT).value - 3.0).abs() < 1e-15);
    }

    #[test]
    fn switched_drift_is_exponential_before_switch() {
        let l = BinaryLattice::new(1.0, 8).unwrap();
        let node = NodeId::new(3, 0b101);
        let out = switched_drift_forward(&l, node, 4).unwrap();
        let expected = (0.5 * l.time(3) + l.brownian(node)).exp();
        assert!((out.value.value - expected).abs() < 1e-15);
        assert!(switched_drift_forward(&l, node, 0).is_err());
    }

    #[test]
    fn frozen_reference_values() {
        // Independent high-precision quadrature and direct path evaluation.
        let y0 = increasing_kernel_backward(0.0, 3.0, 1e-10).unwrap();
        assert!((y0.value + 2.593_006_017_933_572).abs() < 1e-9);
        let y2 = increasing_kernel_backward(2.0, 3.0, 1e-10).unwrap();
        assert!((y2.value - 3.143_449_099_919_419).abs() < 1e-9);
        let l = BinaryLattice::new(1.0, 12).unwrap();
        let down = NodeId::new(12, 0);
        assert!((decreasing_free_term_forward(&l, down).value + 0.211_750_949_928_406_6).abs() < 1e-13);
        let up = NodeId::new(12, (1 << 12) - 1);
        assert!((decreasing_free_term_forward(&l, up).value - 32.523_131_287_450_73).abs() < 1e-10);
        let switched = switched_drift_forward(&l, down, 6).unwrap();
        assert!((switched.value.value + 0.004_806_329_067_506_029).abs() < 1e-14);
        assert!((switched.quoted_criterion - 0.457_303_262_316_429_26).abs() < 1e-13);
        assert!((switched.sufficient_criterion + 0.023_939_111_612_246_655).abs() < 1e-13);
    }
}
