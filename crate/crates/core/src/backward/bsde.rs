use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ImplicitStep;
use crate::cones::DenseMatrix;
use crate::error::{LabError, Result};
use crate::forward::{MatrixFn, VectorFn};
use crate::lattice::{average_children, children_slope, AdaptedProcess, BinaryLattice, NodeId};

/// `(t, y, z, node, out)`: writes the generator value into `out`.
pub type BsdeGenerator = Arc<dyn Fn(f64, &[f64], &[f64], NodeId, &mut [f64]) + Send + Sync>;

/// Coefficients of `dY = (A Y + B Z - g) dt + Z dW`, i.e. the generator
/// `-A y - B z + g`.
#[derive(Clone)]
pub struct LinearBsde {
    pub drift_matrix: MatrixFn,
    pub z_matrix: MatrixFn,
    pub forcing: VectorFn,
}

#[derive(Clone)]
pub struct BsdeSpec {
    pub dim: usize,
    /// Terminal value at the leaves, `leaf_count * dim` entries.
    pub terminal: Vec<f64>,
    pub generator: BsdeGenerator,
    pub lipschitz_y: f64,
    pub lipschitz_z: f64,
    pub linear: Option<LinearBsde>,
}

impl BsdeSpec {
    pub fn new(dim: usize, terminal: Vec<f64>, generator: BsdeGenerator) -> Self {
        Self {
            dim,
            terminal,
            generator,
            lipschitz_y: 0.0,
            lipschitz_z: 0.0,
            linear: None,
        }
    }

    pub fn with_lipschitz(mut self, lipschitz_y: f64, lipschitz_z: f64) -> Self {
        self.lipschitz_y = lipschitz_y;
        self.lipschitz_z = lipschitz_z;
        self
    }

    /// Linear specification; Lipschitz bounds are the largest row-sum norms
    /// of `A` and `B` over the grid.
    pub fn linear(dim: usize, terminal: Vec<f64>, coefficients: LinearBsde, lattice: &BinaryLattice) -> Self {
        let mut ly = 0.0f64;
        let mut lz = 0.0f64;
        for k in 0..lattice.depth() {
            let t = lattice.time(k);
            for node in lattice.nodes(k) {
                ly = ly.max((coefficients.drift_matrix)(t, node).inf_norm());
                lz = lz.max((coefficients.z_matrix)(t, node).inf_norm());
            }
        }
        let c = coefficients.clone();
        let generator: BsdeGenerator = Arc::new(move |t, y, z, node, out| {
            (c.forcing)(t, node, out);
            (c.drift_matrix)(t, node).mul_vec_acc(y, -1.0, out);
            (c.z_matrix)(t, node).mul_vec_acc(z, -1.0, out);
        });
        Self {
            dim,
            terminal,
            generator,
            lipschitz_y: ly,
            lipschitz_z: lz,
            linear: Some(coefficients),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BsdeSolution {
    /// Populated on levels `from..=N`.
    pub y: AdaptedProcess,
    /// Populated on levels `from..N`; the leaf level is zero.
    pub z: AdaptedProcess,
}

/// Backward induction from the leaves down to level `from`.
pub fn solve_bsde(spec: &BsdeSpec, lattice: &BinaryLattice, from: usize) -> Result<BsdeSolution> {
    let n = lattice.depth();
    let dim = spec.dim;
    if from > n {
        return Err(LabError::OutOfHorizon { level: from, depth: n });
    }
    if spec.terminal.len() != lattice.leaf_count() * dim {
        return Err(LabError::IncompleteProcess(format!(
            "terminal value holds {} entries, expected {}",
            spec.terminal.len(),
            lattice.leaf_count() * dim
        )));
    }
    let mut y = AdaptedProcess::zeros_from(lattice, dim, from);
    let mut z = AdaptedProcess::zeros_from(lattice, dim, from);
    y.level_mut(n).copy_from_slice(&spec.terminal);
    let stepper = ImplicitStep::new(lattice.step(), spec.lipschitz_y);
    for k in (from..n).rev() {
        let t = lattice.time(k);
        let (current, next) = y.level_and_next_mut(k);
        current
            .par_chunks_mut(dim)
            .zip(z.level_mut(k).par_chunks_mut(dim))
            .enumerate()
            .try_for_each_init(
                || (vec![0.0; dim], vec![0.0; dim]),
                |(c, scratch), (idx, (y_out, z_out))| {
                    let node = NodeId::new(k, idx as u64);
                    average_children(lattice, next, dim, idx, c);
                    children_slope(lattice, next, dim, idx, z_out);
                    let z_val: &[f64] = z_out;
                    stepper.solve(c, |yv, out| (spec.generator)(t, yv, z_val, node, out), y_out, scratch, node)
                },
            )?;
    }
    Ok(BsdeSolution { y, z })
}

/// Maximum over level-`s` nodes of `|<x, Y_s> - E_s[<X_N, xi> + sum_k h <Xhat_k, g_k>]|`.
///
/// The adjoint runs `Xhat_k = (I + h A_k^T)^{-1} X_k`,
/// `X_{k+1} = (I - B_k^T dW_k) Xhat_k` from `X_s = x`, which makes the
/// discrete product rule telescope exactly.
pub fn bsde_duality_check(spec: &BsdeSpec, x: &[f64], start: usize, lattice: &BinaryLattice) -> Result<f64> {
    let linear = spec
        .linear
        .as_ref()
        .ok_or_else(|| LabError::Argument("duality check requires a linear specification".into()))?;
    let dim = spec.dim;
    if x.len() != dim {
        return Err(LabError::Dimension(format!("adjoint start of length {} for dimension {dim}", x.len())));
    }
    let n = lattice.depth();
    if start > n {
        return Err(LabError::OutOfHorizon { level: start, depth: n });
    }
    let solution = solve_bsde(spec, lattice, start)?;
    let h = lattice.step();
    // Forward sweep: adjoint state and accumulated forcing pairing per node.
    let mut state = vec![x.to_vec(); lattice.level_len(start)];
    let mut pairing = vec![0.0; lattice.level_len(start)];
    let mut g = vec![0.0; dim];
    for k in start..n {
        let t = lattice.time(k);
        let mut next_state = vec![Vec::new(); lattice.level_len(k + 1)];
        let mut next_pairing = vec![0.0; lattice.level_len(k + 1)];
        for node in lattice.nodes(k) {
            let idx = node.path as usize;
            let a = (linear.drift_matrix)(t, node);
            let system = DenseMatrix::identity(dim).add(&a.transpose().scale(h))?;
            let hat = system.solve(&state[idx])?;
            (linear.forcing)(t, node, &mut g);
            let paired = pairing[idx] + h * dot(&hat, &g);
            let bt = (linear.z_matrix)(t, node).transpose();
            for child in lattice.children(idx) {
                let dw = lattice.increment_into(NodeId::new(k + 1, child as u64));
                let mut next = hat.clone();
                bt.mul_vec_acc(&hat, -dw, &mut next);
                next_state[child] = next;
                next_pairing[child] = paired;
            }
        }
        state = next_state;
        pairing = next_pairing;
    }
    // Leaf values of the right-hand side, conditioned back to level `start`.
    let mut rhs: Vec<f64> = (0..lattice.leaf_count())
        .map(|leaf| dot(&state[leaf], &spec.terminal[leaf * dim..(leaf + 1) * dim]) + pairing[leaf])
        .collect();
    for k in (start..n).rev() {
        rhs = crate::lattice::condition_level(lattice, &rhs, k, 1)?;
    }
    let ys = solution.y.level(start);
    Ok(rhs
        .iter()
        .enumerate()
        .map(|(idx, r)| (dot(x, &ys[idx * dim..(idx + 1) * dim]) - r).abs())
        .fold(0.0, f64::max))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{condition_to, martingale_representation};

    fn zero_generator() -> BsdeGenerator {
        Arc::new(|_, _, _, _, out| out.fill(0.0))
    }

    #[test]
    fn zero_generator_gives_conditional_expectations() {
        let l = BinaryLattice::new(1.0, 6).unwrap();
        let xi: Vec<f64> = l.nodes(6).map(|n| (l.brownian(n) * 1.7).sin()).collect();
        let sol = solve_bsde(&BsdeSpec::new(1, xi.clone(), zero_generator()), &l, 0).unwrap();
        let rep = martingale_representation(&l, &xi, 6, 1).unwrap();
        for k in 0..6 {
            let e = condition_to(&l, &xi, 6, k, 1).unwrap();
            for (a, b) in sol.y.level(k).iter().zip(&e) {
                assert!((a - b).abs() < 1e-14);
            }
            for (a, b) in sol.z.level(k).iter().zip(&rep.integrand[k]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_decay_matches_exponential() {
        let l = BinaryLattice::deterministic(1.0, 1000).unwrap();
        let spec = BsdeSpec::new(1, vec![1.0], Arc::new(|_, y, _, _, out| out[0] = -y[0])).with_lipschitz(1.0, 0.0);
        let sol = solve_bsde(&spec, &l, 0).unwrap();
        assert!((sol.y.value(NodeId::ROOT)[0] - (-1.0f64).exp()).abs() < l.step());
    }

    #[test]
    fn duality_trivial_case() {
        let l = BinaryLattice::new(1.0, 5).unwrap();
        let zero: MatrixFn = Arc::new(|_, _| DenseMatrix::zeros(2, 2));
        let forcing: VectorFn = Arc::new(|t, _, out| {
            out[0] = t;
            out[1] = 1.0;
        });
        let xi: Vec<f64> = (0..64).map(|i| i as f64 * 0.1).collect();
        let spec = BsdeSpec::linear(
            2,
            xi,
            LinearBsde {
                drift_matrix: zero.clone(),
                z_matrix: zero,
                forcing,
            },
            &l,
        );
        assert!(bsde_duality_check(&spec, &[1.0, 2.0], 2, &l).unwrap() < 1e-13);
    }

    #[test]
    fn incomplete_terminal_is_rejected() {
        let l = BinaryLattice::new(1.0, 3).unwrap();
        let spec = BsdeSpec::new(1, vec![0.0; 3], zero_generator());
        assert!(matches!(solve_bsde(&spec, &l, 0), Err(LabError::IncompleteProcess(_))));
    }
}
