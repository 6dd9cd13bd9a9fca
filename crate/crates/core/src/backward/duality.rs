use std::sync::Arc;

use super::bsde::dot;
use super::{solve_bsvie_msolution, BsvieGenerator, BsvieSolution, BsvieSpec, DEFAULT_MSOLUTION_MAX_ITER};
use crate::cones::DenseMatrix;
use crate::error::{LabError, Result};
use crate::forward::{KernelFn, MatrixFn};
use crate::lattice::{expectation, AdaptedProcess, BinaryLattice, TerminalField};

/// Linear M-solution equation with generator `A(t, s) y + C(t) zeta`.
///
/// `A(t, s)` is read at the node of level `s`, `C(t)` at the node of level `t`.
#[derive(Clone)]
pub struct LinearMBsvie {
    pub dim: usize,
    pub free_term: TerminalField,
    pub kernel: KernelFn,
    pub zeta_matrix: MatrixFn,
}

impl LinearMBsvie {
    /// The equivalent general spec, with Lipschitz bounds scanned on the grid.
    pub fn to_spec(&self, lattice: &BinaryLattice) -> BsvieSpec {
        let n = lattice.depth();
        let mut ly = 0.0f64;
        let mut lzeta = 0.0f64;
        for i in 0..n {
            let t = lattice.time(i);
            for node in lattice.nodes(i) {
                lzeta = lzeta.max((self.zeta_matrix)(t, node).inf_norm());
            }
            for k in i..n {
                for node in lattice.nodes(k) {
                    ly = ly.max((self.kernel)(t, lattice.time(k), node).inf_norm());
                }
            }
        }
        let kernel = self.kernel.clone();
        let zeta_matrix = self.zeta_matrix.clone();
        let generator: BsvieGenerator = Arc::new(move |a, out| {
            kernel(a.t, a.s, a.node).mul_vec_into(a.y, out);
            zeta_matrix(a.t, a.node.ancestor(a.t_index)).mul_vec_acc(a.zeta, 1.0, out);
        });
        BsvieSpec::new(self.free_term.clone(), generator)
            .with_dependencies(false, true)
            .with_lipschitz(ly, 0.0, lzeta)
    }

    pub fn solve(&self, lattice: &BinaryLattice) -> Result<BsvieSolution> {
        solve_bsvie_msolution(&self.to_spec(lattice), lattice, DEFAULT_MSOLUTION_MAX_ITER, 1e-14)
    }
}

/// `|E sum_{i<N} h <psi_i, X_i> - E sum_{k<N} h <phi_k, Y_k>|` where
/// `phi_k = h sum_{j<=k} eta_j` and `X` solves the adjoint Volterra recursion
/// `(I - h A(t_k,t_k)^T) X_k = phi_k + h sum_{i<k} A(t_i,t_k)^T X_i + sum_{i<k} C(t_i)^T X_i dW_i`.
pub fn bsvie_duality_check(equation: &LinearMBsvie, eta: &AdaptedProcess, lattice: &BinaryLattice) -> Result<f64> {
    let dim = equation.dim;
    if eta.dim() != dim || eta.first_level() != 0 {
        return Err(LabError::Dimension("eta must be a full process of the equation's dimension".into()));
    }
    let n = lattice.depth();
    let h = lattice.step();
    let solution = equation.solve(lattice)?;
    let phi = AdaptedProcess::from_fn(lattice, dim, |node, out| {
        for j in 0..=node.level {
            for (o, e) in out.iter_mut().zip(eta.value(node.ancestor(j))) {
                *o += h * e;
            }
        }
    });
    let mut x = AdaptedProcess::zeros(lattice, dim);
    for k in 0..n {
        let s = lattice.time(k);
        for node in lattice.nodes(k) {
            let mut rhs = phi.value(node).to_vec();
            for i in 0..k {
                let anc = node.ancestor(i);
                let xi = x.value(anc).to_vec();
                let t_i = lattice.time(i);
                (equation.kernel)(t_i, s, node).transpose().mul_vec_acc(&xi, h, &mut rhs);
                let dw = lattice.increment_into(node.ancestor(i + 1));
                (equation.zeta_matrix)(t_i, anc).transpose().mul_vec_acc(&xi, dw, &mut rhs);
            }
            let system = DenseMatrix::identity(dim).sub(&(equation.kernel)(s, s, node).transpose().scale(h))?;
            let value = system.solve(&rhs)?;
            x.value_mut(node).copy_from_slice(&value);
        }
    }
    let mut forward_pairing = 0.0;
    let mut backward_pairing = 0.0;
    for k in 0..n {
        let leaf_pairs: Vec<f64> = lattice
            .nodes(n)
            .map(|leaf| dot(equation.free_term.value(k, leaf), x.value(leaf.ancestor(k))))
            .collect();
        forward_pairing += h * expectation(lattice, &leaf_pairs, n, 1)?[0];
        let node_pairs: Vec<f64> = lattice
            .nodes(k)
            .map(|node| dot(phi.value(node), solution.y.value(node)))
            .collect();
        backward_pairing += h * expectation(lattice, &node_pairs, k, 1)?[0];
    }
    Ok((forward_pairing - backward_pairing).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_eta_gives_zero_discrepancy() {
        let l = BinaryLattice::new(1.0, 4).unwrap();
        let psi = TerminalField::from_fn(&l, 1, |i, leaf, out| out[0] = (i as f64 + leaf.path as f64).sin());
        let eq = LinearMBsvie {
            dim: 1,
            free_term: psi,
            kernel: Arc::new(|t, s, _| DenseMatrix::scalar(t - s)),
            zeta_matrix: Arc::new(|_, _| DenseMatrix::scalar(0.5)),
        };
        let eta = AdaptedProcess::zeros(&l, 1);
        assert_eq!(bsvie_duality_check(&eq, &eta, &l).unwrap(), 0.0);
    }
}
