use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BsvieGenerator, BsvieSolution, BsvieSpec, ImplicitStep};
use crate::cones::{is_diagonal, is_metzler, is_nonneg};
use crate::error::{LabError, Result};
use crate::forward::MatrixFn;
use crate::lattice::{average_children, children_slope, AdaptedProcess, BinaryLattice, TerminalField, TwoParamProcess};

/// Linear equation with generator `A_m(s) y + B(s) z` and free term `psi_m`
/// for `t` in the `m`-th interval of a partition.
///
/// `partition = [p_0 = 0, p_1, ..., p_M = N]`; interval `m` (1-based) holds
/// the time indices `p_{m-1} <= i < p_m`, and the last interval also holds `N`.
#[derive(Clone)]
pub struct StepFnBsvie {
    pub dim: usize,
    pub partition: Vec<usize>,
    /// `A_m(s, node)`, one per interval.
    pub drift_matrices: Vec<MatrixFn>,
    pub z_matrix: MatrixFn,
    /// Leaf fields `psi_m`, one per interval.
    pub free_terms: Vec<Vec<f64>>,
}

/// One checked hypothesis of the step-function solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Precondition {
    pub name: String,
    pub satisfied: bool,
    pub witness: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepFnOutcome {
    pub solution: BsvieSolution,
    pub preconditions: Vec<Precondition>,
}

impl StepFnOutcome {
    pub fn hypotheses_met(&self) -> bool {
        self.preconditions.iter().all(|p| p.satisfied)
    }
}

impl StepFnBsvie {
    fn intervals(&self) -> usize {
        self.partition.len() - 1
    }

    /// 0-based interval of a time index.
    pub fn interval_of(&self, time_index: usize) -> usize {
        let m = self.intervals();
        (0..m)
            .find(|&j| time_index < self.partition[j + 1])
            .unwrap_or(m - 1)
    }

    fn validate(&self, lattice: &BinaryLattice) -> Result<()> {
        let n = lattice.depth();
        let p = &self.partition;
        let ok = p.len() >= 2 && p[0] == 0 && p[p.len() - 1] == n && p.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(LabError::Argument(format!(
                "partition must increase strictly from 0 to {n}, got {p:?}"
            )));
        }
        let m = self.intervals();
        if self.drift_matrices.len() != m || self.free_terms.len() != m {
            return Err(LabError::Dimension(format!(
                "{m} intervals but {} drift matrices and {} free terms",
                self.drift_matrices.len(),
                self.free_terms.len()
            )));
        }
        let leaves = lattice.leaf_count() * self.dim;
        if self.free_terms.iter().any(|f| f.len() != leaves) {
            return Err(LabError::IncompleteProcess(format!("free terms must hold {leaves} leaf values")));
        }
        Ok(())
    }

    fn bounds(&self, lattice: &BinaryLattice) -> (f64, f64) {
        let mut la = 0.0f64;
        let mut lb = 0.0f64;
        for k in 0..lattice.depth() {
            let s = lattice.time(k);
            for node in lattice.nodes(k) {
                for a in &self.drift_matrices {
                    la = la.max(a(s, node).inf_norm());
                }
                lb = lb.max((self.z_matrix)(s, node).inf_norm());
            }
        }
        (la, lb)
    }

    /// Hypotheses of the positivity result, each with its first witness.
    pub fn preconditions(&self, lattice: &BinaryLattice) -> Vec<Precondition> {
        let n = lattice.depth();
        let m = self.intervals();
        let mut metzler = None;
        let mut ordered = None;
        let mut diagonal = None;
        for k in 0..n {
            let s = lattice.time(k);
            for node in lattice.nodes(k) {
                let mats: Vec<_> = self.drift_matrices.iter().map(|a| a(s, node)).collect();
                for (j, a) in mats.iter().enumerate() {
                    if metzler.is_none() && !is_metzler(a, 0.0).unwrap_or(false) {
                        metzler = Some(format!("A_{} at s={s:.6} {node}", j + 1));
                    }
                }
                for j in 1..m {
                    if ordered.is_none() && !mats[j - 1].sub(&mats[j]).map(|d| is_nonneg(&d, 0.0)).unwrap_or(false) {
                        ordered = Some(format!("A_{} - A_{} at s={s:.6} {node}", j, j + 1));
                    }
                }
                if diagonal.is_none() && !is_diagonal(&(self.z_matrix)(s, node), 0.0).unwrap_or(false) {
                    diagonal = Some(format!("B at s={s:.6} {node}"));
                }
            }
        }
        let mut free = None;
        for j in 0..m {
            let next = self.free_terms.get(j + 1);
            for (idx, v) in self.free_terms[j].iter().enumerate() {
                let lower = next.map_or(0.0, |f| f[idx]);
                if free.is_none() && *v < lower {
                    free = Some(format!("psi_{} below {} at leaf entry {idx}", j + 1, if next.is_some() { "the next interval" } else { "zero" }));
                }
            }
        }
        let (la, lb) = self.bounds(lattice);
        let h = lattice.step();
        let step_ok = h * la <= 1.0 && lattice.sqrt_step() * lb <= 1.0;
        let entry = |name: &str, witness: Option<String>| Precondition {
            name: name.to_string(),
            satisfied: witness.is_none(),
            witness,
        };
        vec![
            entry("metzler_drift", metzler),
            entry("drift_nonincreasing_in_t", ordered),
            entry("free_term_nonincreasing_nonneg", free),
            entry("diagonal_z_coefficient", diagonal),
            entry(
                "step_bound",
                (!step_ok).then(|| format!("h*|A| = {:.3e}, sqrt(h)*|B| = {:.3e}", h * la, lattice.sqrt_step() * lb)),
            ),
        ]
    }

    /// The same equation as a general spec for the family solver.
    pub fn to_bsvie_spec(&self, lattice: &BinaryLattice) -> Result<BsvieSpec> {
        self.validate(lattice)?;
        let dim = self.dim;
        let intervals: Vec<usize> = (0..=lattice.depth()).map(|i| self.interval_of(i)).collect();
        let frees = self.free_terms.clone();
        let psi = TerminalField::from_fn(lattice, dim, |i, leaf, out| {
            let start = leaf.path as usize * dim;
            out.copy_from_slice(&frees[intervals[i]][start..start + dim]);
        });
        let drifts = self.drift_matrices.clone();
        let b = self.z_matrix.clone();
        let generator: BsvieGenerator = Arc::new(move |a, out| {
            drifts[intervals[a.t_index]](a.s, a.node).mul_vec_into(a.y, out);
            b(a.s, a.node).mul_vec_acc(a.z, 1.0, out);
        });
        let (la, lb) = self.bounds(lattice);
        Ok(BsvieSpec::new(psi, generator).with_lipschitz(la, lb, 0.0))
    }
}

/// Interval-by-interval nested BSDE induction, last interval first.
///
/// For interval `m` with indices `lo..=hi`: a z-only BSDE carries
/// `psi_m + h sum_{k>hi} A_m(t_k) Y_k` from the leaves to level `hi + 1`,
/// then a BSDE with generator `A_m y + B z` runs from there down to `lo`.
/// Hypothesis violations are reported in the outcome, not as errors.
pub fn solve_linear_bsvie_stepfn(data: &StepFnBsvie, lattice: &BinaryLattice) -> Result<StepFnOutcome> {
    data.validate(lattice)?;
    let preconditions = data.preconditions(lattice);
    let n = lattice.depth();
    let dim = data.dim;
    let h = lattice.step();
    let (la, _) = data.bounds(lattice);
    let implicit = ImplicitStep::new(h, la);
    let mut y = AdaptedProcess::zeros(lattice, dim);
    let mut z = TwoParamProcess::zeros(lattice, dim);
    let m_count = data.intervals();
    let mut scratch = vec![0.0; dim];
    let mut c = vec![0.0; dim];
    let mut zv = vec![0.0; dim];
    for m in (0..m_count).rev() {
        let lo = data.partition[m];
        let hi = if m + 1 == m_count { n } else { data.partition[m + 1] - 1 };
        let a_m = &data.drift_matrices[m];
        let members: Vec<usize> = (lo..=hi).collect();
        // Terminal of the inner BSDE at level hi + 1 (or the leaves).
        let mut lam: Vec<f64> = if hi == n {
            data.free_terms[m].clone()
        } else {
            let mut eta = data.free_terms[m].clone();
            for leaf in lattice.nodes(n) {
                let out = &mut eta[leaf.path as usize * dim..(leaf.path as usize + 1) * dim];
                for k in hi + 1..n {
                    let node = leaf.ancestor(k);
                    a_m(lattice.time(k), node).mul_vec_acc(y.value(node), h, out);
                }
            }
            let mut u = eta;
            for k in (hi + 1..n).rev() {
                let s = lattice.time(k);
                let mut level = vec![0.0; lattice.level_len(k) * dim];
                for node in lattice.nodes(k) {
                    let idx = node.path as usize;
                    average_children(lattice, &u, dim, idx, &mut c);
                    children_slope(lattice, &u, dim, idx, &mut zv);
                    (data.z_matrix)(s, node).mul_vec_into(&zv, &mut scratch);
                    let out = &mut level[idx * dim..(idx + 1) * dim];
                    implicit.explicit(&c, &scratch, out, node)?;
                    for &i in &members {
                        z.slice_mut(i).value_mut(node).copy_from_slice(&zv);
                    }
                }
                u = level;
            }
            u
        };
        if hi == n {
            y.level_mut(n).copy_from_slice(&lam);
        }
        let top = hi.min(n - 1);
        for k in (lo..=top).rev() {
            let s = lattice.time(k);
            let mut level = vec![0.0; lattice.level_len(k) * dim];
            for node in lattice.nodes(k) {
                let idx = node.path as usize;
                average_children(lattice, &lam, dim, idx, &mut c);
                children_slope(lattice, &lam, dim, idx, &mut zv);
                let a = a_m(s, node);
                let b = (data.z_matrix)(s, node);
                let out = &mut level[idx * dim..(idx + 1) * dim];
                implicit.solve(
                    &c,
                    |yv, g| {
                        a.mul_vec_into(yv, g);
                        b.mul_vec_acc(&zv, 1.0, g);
                    },
                    out,
                    &mut scratch,
                    node,
                )?;
                for &i in members.iter().filter(|&&i| i <= k) {
                    z.slice_mut(i).value_mut(node).copy_from_slice(&zv);
                }
            }
            y.level_mut(k).copy_from_slice(&level);
            lam = level;
        }
    }
    Ok(StepFnOutcome {
        solution: BsvieSolution {
            y,
            z,
            msolution_residual: None,
        },
        preconditions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward::{solve_bsde, solve_bsvie_family, BsdeSpec};
    use crate::cones::DenseMatrix;

    fn constant(v: f64) -> MatrixFn {
        Arc::new(move |_, _| DenseMatrix::scalar(v))
    }

    #[test]
    fn single_interval_is_one_bsde() {
        let l = BinaryLattice::new(1.0, 6).unwrap();
        let xi: Vec<f64> = l.nodes(6).map(|n| 1.0 + l.brownian(n).sin()).collect();
        let data = StepFnBsvie {
            dim: 1,
            partition: vec![0, 6],
            drift_matrices: vec![constant(-0.7)],
            z_matrix: constant(0.4),
            free_terms: vec![xi.clone()],
        };
        let out = solve_linear_bsvie_stepfn(&data, &l).unwrap();
        let bsde = BsdeSpec::new(1, xi, Arc::new(|_, y, z, _, o| o[0] = -0.7 * y[0] + 0.4 * z[0])).with_lipschitz(0.7, 0.4);
        let single = solve_bsde(&bsde, &l, 0).unwrap();
        assert!(out.solution.y.max_abs_diff(&single.y) < 1e-12);
        assert!(out.hypotheses_met());
    }

    #[test]
    fn two_intervals_zero_drift_stay_nonnegative() {
        let l = BinaryLattice::new(1.0, 8).unwrap();
        let psi2: Vec<f64> = l.nodes(8).map(|n| (n.path % 3) as f64).collect();
        let psi1: Vec<f64> = psi2.iter().map(|v| v + 0.5).collect();
        let data = StepFnBsvie {
            dim: 1,
            partition: vec![0, 3, 8],
            drift_matrices: vec![constant(0.0), constant(0.0)],
            z_matrix: constant(0.0),
            free_terms: vec![psi1, psi2],
        };
        let out = solve_linear_bsvie_stepfn(&data, &l).unwrap();
        assert!(out.hypotheses_met());
        assert!(out.solution.y.min_value() >= 0.0);
        let family = solve_bsvie_family(&data.to_bsvie_spec(&l).unwrap(), &l).unwrap();
        assert!(out.solution.y.max_abs_diff(&family.y) < 1e-12);
    }

    #[test]
    fn bad_partition_is_an_error() {
        let l = BinaryLattice::new(1.0, 4).unwrap();
        let data = StepFnBsvie {
            dim: 1,
            partition: vec![0, 2],
            drift_matrices: vec![constant(0.0)],
            z_matrix: constant(0.0),
            free_terms: vec![vec![0.0; 16]],
        };
        assert!(matches!(solve_linear_bsvie_stepfn(&data, &l), Err(LabError::Argument(_))));
    }
}
