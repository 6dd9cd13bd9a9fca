//! Backward equations on the lattice.
//!
//! Every backward step is implicit in `y` and explicit in `z`:
//! `Z = (Y_up - Y_down) / (2 sqrt(h))` and `y = E[Y_next] + h g(t, y, Z)`.
//! The implicit equation is solved by a shifted fixed point that is monotone
//! in its data whenever `g(y) + L_y y` is nondecreasing in `y`.

mod bsde;
mod bsvie;
mod duality;
mod stepfn;

pub use bsde::{bsde_duality_check, solve_bsde, BsdeGenerator, BsdeSolution, BsdeSpec, LinearBsde};
pub use bsvie::{
    picard_bsvie, solve_bsvie_family, solve_bsvie_msolution, weak_comparison_functional, BsvieGenerator,
    BsvieSolution, BsvieSpec, GenArgs, PicardBsvie, PicardIterate, DEFAULT_MSOLUTION_MAX_ITER,
    MONOTONICITY_SLACK,
};
pub use duality::{bsvie_duality_check, LinearMBsvie};
pub use stepfn::{solve_linear_bsvie_stepfn, Precondition, StepFnBsvie, StepFnOutcome};

use crate::error::{LabError, Result};
use crate::lattice::NodeId;

/// Tolerance of the implicit fixed point.
pub const FIXED_POINT_TOL: f64 = 1e-13;
/// Iteration cap of the implicit fixed point.
pub const FIXED_POINT_MAX_ITER: usize = 50;

/// Solver for `y = c + h g(y)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ImplicitStep {
    pub step: f64,
    pub shift: f64,
}

impl ImplicitStep {
    pub fn new(step: f64, lipschitz_y: f64) -> Self {
        Self {
            step,
            shift: lipschitz_y.max(0.0),
        }
    }

    /// Iterates `y <- (c + h (g(y) + k y)) / (1 + h k)` from `y = c`.
    pub fn solve(
        &self,
        c: &[f64],
        mut generator: impl FnMut(&[f64], &mut [f64]),
        y: &mut [f64],
        scratch: &mut [f64],
        node: NodeId,
    ) -> Result<()> {
        let h = self.step;
        let denom = 1.0 + h * self.shift;
        y.copy_from_slice(c);
        for _ in 0..FIXED_POINT_MAX_ITER {
            generator(y, scratch);
            let mut delta = 0.0f64;
            let mut scale = 1.0f64;
            for d in 0..y.len() {
                let next = (c[d] + h * (scratch[d] + self.shift * y[d])) / denom;
                delta = delta.max((next - y[d]).abs());
                scale = scale.max(next.abs());
                y[d] = next;
            }
            if !delta.is_finite() {
                break;
            }
            if delta <= FIXED_POINT_TOL * scale {
                return Ok(());
            }
        }
        if y.iter().all(|v| v.is_finite()) {
            Err(LabError::FixedPoint {
                node,
                iterations: FIXED_POINT_MAX_ITER,
                lipschitz_step: self.shift * h,
            })
        } else {
            Err(LabError::Divergence {
                node,
                detail: "implicit step produced a non-finite value".into(),
            })
        }
    }

    /// `y = c + h g` with a generator that ignores `y`.
    pub fn explicit(&self, c: &[f64], g: &[f64], y: &mut [f64], node: NodeId) -> Result<()> {
        for d in 0..y.len() {
            y[d] = c[d] + self.step * g[d];
        }
        if y.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(LabError::Divergence {
                node,
                detail: "backward step produced a non-finite value".into(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn implicit_step_solves_linear_equation() {
        let step = ImplicitStep::new(0.1, 2.0);
        let mut y = [0.0];
        let mut s = [0.0];
        step.solve(&[1.0], |y, out| out[0] = -2.0 * y[0], &mut y, &mut s, NodeId::ROOT)
            .unwrap();
        assert!((y[0] - 1.0 / 1.2).abs() < 1e-13);
    }

    #[test]
    fn implicit_step_reports_stiffness() {
        let step = ImplicitStep::new(1.0, 0.0);
        let mut y = [0.0];
        let mut s = [0.0];
        let err = step
            .solve(&[1.0], |y, out| out[0] = 0.99 * y[0], &mut y, &mut s, NodeId::ROOT)
            .unwrap_err();
        assert!(matches!(err, LabError::FixedPoint { .. }));
    }
}
