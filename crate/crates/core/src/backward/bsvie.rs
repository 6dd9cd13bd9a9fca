use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ImplicitStep;
use crate::error::{LabError, Result};
use crate::lattice::{
    average_children, children_slope, condition_level, martingale_representation, AdaptedProcess, BinaryLattice,
    NodeId, TerminalField, TwoParamProcess,
};

/// Arguments of a BSVIE generator `g(t, s, y, z, zeta)` at a node of the
/// level of `s`.
#[derive(Clone, Copy, Debug)]
pub struct GenArgs<'a> {
    pub t_index: usize,
    pub s_index: usize,
    pub t: f64,
    pub s: f64,
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub zeta: &'a [f64],
    pub node: NodeId,
}

pub type BsvieGenerator = Arc<dyn Fn(&GenArgs<'_>, &mut [f64]) + Send + Sync>;

/// `Y(t) = psi(t) + int_t^T g(t, s, Y(s), Z(t,s), Z(s,t)) ds - int_t^T Z(t,s) dW(s)`.
#[derive(Clone)]
pub struct BsvieSpec {
    pub dim: usize,
    pub free_term: TerminalField,
    pub generator: BsvieGenerator,
    pub uses_z: bool,
    pub uses_zeta: bool,
    pub lipschitz_y: f64,
    pub lipschitz_z: f64,
    pub lipschitz_zeta: f64,
}

impl BsvieSpec {
    /// A spec whose generator may depend on `z` but not on `zeta`.
    pub fn new(free_term: TerminalField, generator: BsvieGenerator) -> Self {
        Self {
            dim: free_term.dim(),
            free_term,
            generator,
            uses_z: true,
            uses_zeta: false,
            lipschitz_y: 0.0,
            lipschitz_z: 0.0,
            lipschitz_zeta: 0.0,
        }
    }

    pub fn with_dependencies(mut self, uses_z: bool, uses_zeta: bool) -> Self {
        self.uses_z = uses_z;
        self.uses_zeta = uses_zeta;
        self
    }

    pub fn with_lipschitz(mut self, y: f64, z: f64, zeta: f64) -> Self {
        self.lipschitz_y = y;
        self.lipschitz_z = z;
        self.lipschitz_zeta = zeta;
        self
    }

    fn validate(&self, lattice: &BinaryLattice) -> Result<()> {
        if self.dim != self.free_term.dim() || !self.free_term.matches(lattice) {
            return Err(LabError::Dimension("free term does not match the lattice and dimension".into()));
        }
        self.probe_dependencies(lattice)
    }

    /// Rejects declared-independent arguments the generator actually reads.
    fn probe_dependencies(&self, lattice: &BinaryLattice) -> Result<()> {
        let n = lattice.depth();
        let dim = self.dim;
        let y: Vec<f64> = (0..dim).map(|d| 0.3 + 0.1 * d as f64).collect();
        let probe: Vec<f64> = (0..dim).map(|d| 0.7 - 0.2 * d as f64).collect();
        let zero = vec![0.0; dim];
        let mut base = vec![0.0; dim];
        let mut moved = vec![0.0; dim];
        for i in [0, n / 2] {
            for k in [i, n - 1] {
                if k < i {
                    continue;
                }
                let node = NodeId::new(k, (lattice.level_len(k) - 1) as u64);
                let args = GenArgs {
                    t_index: i,
                    s_index: k,
                    t: lattice.time(i),
                    s: lattice.time(k),
                    y: &y,
                    z: &zero,
                    zeta: &zero,
                    node,
                };
                (self.generator)(&args, &mut base);
                if !self.uses_z {
                    (self.generator)(&GenArgs { z: &probe, ..args }, &mut moved);
                    if moved != base {
                        return Err(LabError::Argument("generator reads z but declares uses_z = false".into()));
                    }
                }
                if !self.uses_zeta {
                    (self.generator)(&GenArgs { zeta: &probe, ..args }, &mut moved);
                    if moved != base {
                        return Err(LabError::Argument(
                            "generator reads zeta but declares uses_zeta = false".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BsvieSolution {
    pub y: AdaptedProcess,
    /// `Z(t_i, s_j)`: levels `j >= i` always, levels `j < i` for M-solutions.
    pub z: TwoParamProcess,
    /// Largest martingale-representation residual of `Y`, for M-solutions.
    pub msolution_residual: Option<f64>,
}

pub(crate) enum YInput<'a> {
    /// `y` is the solution itself, implicit on the diagonal.
    Own,
    /// `y` is read from a given process everywhere.
    Frozen(&'a AdaptedProcess),
}

/// One backward sweep per time index `t_i`, from the leaves down to level `i`.
pub(crate) fn family_sweep(
    spec: &BsvieSpec,
    lattice: &BinaryLattice,
    y_input: YInput<'_>,
    zeta: Option<&TwoParamProcess>,
) -> Result<(AdaptedProcess, TwoParamProcess)> {
    let n = lattice.depth();
    let dim = spec.dim;
    let stepper = ImplicitStep::new(lattice.step(), spec.lipschitz_y);
    let mut y = AdaptedProcess::zeros(lattice, dim);
    let mut z = TwoParamProcess::zeros(lattice, dim);
    y.level_mut(n).copy_from_slice(spec.free_term.slice(n));
    let zero = vec![0.0; dim];
    for i in (0..n).rev() {
        let t = lattice.time(i);
        let mut lam = spec.free_term.slice(i).to_vec();
        for k in (i..n).rev() {
            let s = lattice.time(k);
            let mut level = vec![0.0; lattice.level_len(k) * dim];
            let own = &y;
            let zero = &zero;
            let y_input = &y_input;
            let lam_ref = &lam;
            level
                .par_chunks_mut(dim)
                .zip(z.slice_mut(i).level_mut(k).par_chunks_mut(dim))
                .enumerate()
                .try_for_each_init(
                    || (vec![0.0; dim], vec![0.0; dim]),
                    |(c, scratch), (idx, (out, z_out))| {
                        let node = NodeId::new(k, idx as u64);
                        average_children(lattice, lam_ref, dim, idx, c);
                        children_slope(lattice, lam_ref, dim, idx, z_out);
                        let zeta_val: &[f64] = match zeta {
                            Some(zs) if k > i => zs.value(k, node.ancestor(i)),
                            _ => zero,
                        };
                        let args = GenArgs {
                            t_index: i,
                            s_index: k,
                            t,
                            s,
                            y: zero,
                            z: z_out,
                            zeta: zeta_val,
                            node,
                        };
                        match y_input {
                            YInput::Own if k == i => stepper.solve(
                                c,
                                |yv, o| (spec.generator)(&GenArgs { y: yv, ..args }, o),
                                out,
                                scratch,
                                node,
                            ),
                            YInput::Own => {
                                (spec.generator)(&GenArgs { y: own.value(node), ..args }, scratch);
                                stepper.explicit(c, scratch, out, node)
                            }
                            YInput::Frozen(frozen) => {
                                (spec.generator)(&GenArgs { y: frozen.value(node), ..args }, scratch);
                                stepper.explicit(c, scratch, out, node)
                            }
                        }
                    },
                )?;
            lam = level;
        }
        y.level_mut(i).copy_from_slice(&lam);
    }
    Ok((y, z))
}

/// Adapted solution through the family of BSDEs indexed by `t_i`.
pub fn solve_bsvie_family(spec: &BsvieSpec, lattice: &BinaryLattice) -> Result<BsvieSolution> {
    if spec.uses_zeta {
        return Err(LabError::Argument(
            "the family solver needs a generator independent of zeta".into(),
        ));
    }
    spec.validate(lattice)?;
    let (y, z) = family_sweep(spec, lattice, YInput::Own, None)?;
    Ok(BsvieSolution {
        y,
        z,
        msolution_residual: None,
    })
}

/// Iteration cap used by the harness for M-solutions; the iteration is
/// nilpotent and settles within `N + 2` rounds.
pub const DEFAULT_MSOLUTION_MAX_ITER: usize = 64;

/// Adapted M-solution: alternates the martingale representation of `Y` with
/// a family solve fed by `zeta(t_i, t_k) = Z(t_k, t_i)` (`k > i`; zero on
/// the diagonal).
pub fn solve_bsvie_msolution(
    spec: &BsvieSpec,
    lattice: &BinaryLattice,
    max_iter: usize,
    tol: f64,
) -> Result<BsvieSolution> {
    if spec.uses_z {
        return Err(LabError::Argument(
            "M-solutions are supported for generators independent of z".into(),
        ));
    }
    spec.validate(lattice)?;
    let n = lattice.depth();
    let dim = spec.dim;
    let mut lower = TwoParamProcess::zeros(lattice, dim);
    let mut previous: Option<AdaptedProcess> = None;
    let mut last_delta = f64::INFINITY;
    let mut prev_delta = f64::NAN;
    for _ in 0..max_iter.max(1) {
        let (y, upper) = family_sweep(spec, lattice, YInput::Own, spec.uses_zeta.then_some(&lower))?;
        lower = lower_part(lattice, &y)?;
        let delta = previous.as_ref().map_or(f64::INFINITY, |p| p.max_abs_diff(&y));
        if delta < tol || !spec.uses_zeta {
            let z = merge(lattice, upper, &lower, n);
            let residual = msolution_residual(lattice, &y, &z)?;
            return Ok(BsvieSolution {
                y,
                z,
                msolution_residual: Some(residual),
            });
        }
        prev_delta = last_delta;
        last_delta = delta;
        previous = Some(y);
    }
    Err(LabError::NonConvergence {
        iterations: max_iter,
        last_delta,
        last_ratio: last_delta / prev_delta,
    })
}

/// `Z(t_i, s_j)` for `j < i` from the martingale representation of `Y(t_i)`.
fn lower_part(lattice: &BinaryLattice, y: &AdaptedProcess) -> Result<TwoParamProcess> {
    let dim = y.dim();
    let mut lower = TwoParamProcess::zeros(lattice, dim);
    for i in 1..=lattice.depth() {
        let rep = martingale_representation(lattice, y.level(i), i, dim)?;
        for (j, values) in rep.integrand.into_iter().enumerate() {
            lower.slice_mut(i).level_mut(j).copy_from_slice(&values);
        }
    }
    Ok(lower)
}

fn merge(lattice: &BinaryLattice, mut upper: TwoParamProcess, lower: &TwoParamProcess, n: usize) -> TwoParamProcess {
    for i in 1..=n {
        for j in 0..i.min(lattice.depth() + 1) {
            upper.slice_mut(i).level_mut(j).copy_from_slice(lower.slice(i).level(j));
        }
    }
    upper
}

/// `max |Y(t_i) - (E Y(t_i) + sum_{j<i} Z(t_i, s_j) dW_j)|`.
fn msolution_residual(lattice: &BinaryLattice, y: &AdaptedProcess, z: &TwoParamProcess) -> Result<f64> {
    let dim = y.dim();
    let mut worst = 0.0f64;
    for i in 0..=lattice.depth() {
        let mean = crate::lattice::expectation(lattice, y.level(i), i, dim)?;
        let rep = crate::lattice::MartingaleRepresentation {
            dim,
            level: i,
            mean,
            integrand: (0..i).map(|j| z.slice(i).level(j).to_vec()).collect(),
        };
        let rebuilt = rep.reconstruct(lattice);
        for (a, b) in rebuilt.iter().zip(y.level(i)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Slack allowed when checking `Y_k <= Y_{k-1}` between Picard iterates.
pub const MONOTONICITY_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardIterate {
    pub index: usize,
    /// Weighted norm of the difference to the previous iterate.
    pub difference: f64,
    /// `difference / previous difference`, when the previous difference is
    /// above rounding level.
    pub ratio: Option<f64>,
    /// Largest increase `Y_k - Y_{k-1}` over all nodes.
    pub worst_increase: f64,
    pub monotone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardBsvie {
    pub solution: BsvieSolution,
    pub history: Vec<PicardIterate>,
    pub beta: f64,
    /// Map applications until the next one changed the iterate by less than
    /// the tolerance.
    pub iterations: usize,
    pub max_ratio: Option<f64>,
    pub monotone: bool,
}

/// Monotone Picard scheme: `Y_0` solves the upper spec (`psi^1`, `g^1`);
/// each further iterate solves the comparator spec with `y` frozen at the
/// previous iterate.
pub fn picard_bsvie(
    upper: &BsvieSpec,
    comparator: &BsvieSpec,
    lattice: &BinaryLattice,
    beta: Option<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<PicardBsvie> {
    if comparator.uses_zeta || upper.uses_zeta {
        return Err(LabError::Argument("Picard iteration needs generators independent of zeta".into()));
    }
    comparator.validate(lattice)?;
    let start = solve_bsvie_family(upper, lattice)?;
    let lipschitz = comparator.lipschitz_y.max(comparator.lipschitz_z);
    let beta = beta.unwrap_or(4.0 * (1.0 + lipschitz).powi(2) * lattice.horizon());
    let mut previous = start;
    let mut history: Vec<PicardIterate> = Vec::new();
    let mut first_difference = None;
    for index in 1..=max_iter {
        let (y, z) = family_sweep(comparator, lattice, YInput::Frozen(&previous.y), None)?;
        let difference = weighted_distance(lattice, beta, &y, &z, &previous.y, &previous.z);
        let first = *first_difference.get_or_insert(difference);
        let ratio = history
            .last()
            .filter(|p| p.difference > 1e-9 * first && p.difference > 1e-13)
            .map(|p| difference / p.difference);
        let (gap, _) = previous.y.min_difference(&y);
        let worst_increase = -gap;
        history.push(PicardIterate {
            index,
            difference,
            ratio,
            worst_increase,
            monotone: worst_increase <= MONOTONICITY_SLACK,
        });
        let converged = difference < tol;
        let current = BsvieSolution {
            y,
            z,
            msolution_residual: None,
        };
        if converged {
            let max_ratio = history.iter().filter_map(|h| h.ratio).reduce(f64::max);
            let monotone = history.iter().all(|h| h.monotone);
            return Ok(PicardBsvie {
                solution: current,
                iterations: (index - 1).max(1),
                history,
                beta,
                max_ratio,
                monotone,
            });
        }
        previous = current;
    }
    let last = history.last().expect("at least one iterate");
    Err(LabError::NonConvergence {
        iterations: max_iter,
        last_delta: last.difference,
        last_ratio: last.ratio.unwrap_or(f64::NAN),
    })
}

/// `sqrt(E sum_i e^{beta t_i} (|dY_i|^2 + sum_{k>=i} |dZ(t_i,t_k)|^2 h) h)` over `i < N`.
fn weighted_distance(
    lattice: &BinaryLattice,
    beta: f64,
    y: &AdaptedProcess,
    z: &TwoParamProcess,
    y_prev: &AdaptedProcess,
    z_prev: &TwoParamProcess,
) -> f64 {
    let h = lattice.step();
    let n = lattice.depth();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let weight = (beta * lattice.time(i)).exp();
        let mut term = lattice.node_probability(i).to_f64() * sq(y.level(i), y_prev.level(i));
        for k in i..n {
            term += h * lattice.node_probability(k).to_f64() * sq(z.slice(i).level(k), z_prev.slice(i).level(k));
        }
        total += weight * term * h;
    }
    total.sqrt()
}

/// `node -> E_node[sum_{j >= level, j < N} Y(t_j) h]` by one backward sweep.
pub fn weak_comparison_functional(y: &AdaptedProcess, lattice: &BinaryLattice) -> Result<AdaptedProcess> {
    if y.first_level() != 0 || y.depth() != lattice.depth() {
        return Err(LabError::IncompleteProcess("process must be populated on every level".into()));
    }
    let dim = y.dim();
    let h = lattice.step();
    let n = lattice.depth();
    let mut f = AdaptedProcess::zeros(lattice, dim);
    for k in (0..n).rev() {
        let conditioned = condition_level(lattice, f.level(k + 1), k, dim)?;
        for (out, (c, v)) in f.level_mut(k).iter_mut().zip(conditioned.iter().zip(y.level(k))) {
            *out = c + h * v;
        }
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward::{solve_bsde, BsdeSpec};

    #[test]
    fn time_independent_family_matches_single_bsde() {
        let l = BinaryLattice::new(1.0, 6).unwrap();
        let xi: Vec<f64> = l.nodes(6).map(|n| l.brownian(n).cos()).collect();
        let psi = TerminalField::constant_in_time(&l, 1, &xi).unwrap();
        let g: BsvieGenerator = Arc::new(|a, out| out[0] = -0.5 * a.y[0] + 0.3 * a.z[0] + a.s);
        let spec = BsvieSpec::new(psi, g).with_lipschitz(0.5, 0.3, 0.0);
        let family = solve_bsvie_family(&spec, &l).unwrap();
        let bsde = BsdeSpec::new(1, xi, Arc::new(|t, y, z, _, out| out[0] = -0.5 * y[0] + 0.3 * z[0] + t))
            .with_lipschitz(0.5, 0.3);
        let single = solve_bsde(&bsde, &l, 0).unwrap();
        assert!(family.y.max_abs_diff(&single.y) < 1e-12);
    }

    #[test]
    fn family_rejects_zeta_dependence() {
        let l = BinaryLattice::new(1.0, 3).unwrap();
        let psi = TerminalField::zeros(&l, 1);
        let g: BsvieGenerator = Arc::new(|a, out| out[0] = a.zeta[0]);
        let declared = BsvieSpec::new(psi.clone(), g.clone()).with_dependencies(false, true);
        assert!(matches!(solve_bsvie_family(&declared, &l), Err(LabError::Argument(_))));
        let hidden = BsvieSpec::new(psi, g).with_dependencies(false, false);
        assert!(matches!(solve_bsvie_family(&hidden, &l), Err(LabError::Argument(_))));
    }

    #[test]
    fn weak_functional_of_one_is_remaining_time() {
        let l = BinaryLattice::new(2.0, 5).unwrap();
        let one = AdaptedProcess::from_fn(&l, 1, |_, v| v[0] = 1.0);
        let f = weak_comparison_functional(&one, &l).unwrap();
        for (node, v) in f.iter() {
            assert!((v[0] - (2.0 - l.time(node.level))).abs() < 1e-14);
        }
        let w = AdaptedProcess::from_fn(&l, 1, |n, v| v[0] = l.brownian(n));
        let f = weak_comparison_functional(&w, &l).unwrap();
        assert!(f.value(NodeId::ROOT)[0].abs() < 1e-15);
    }

    #[test]
    fn msolution_without_zeta_equals_family() {
        let l = BinaryLattice::new(1.0, 5).unwrap();
        let psi = TerminalField::from_fn(&l, 1, |i, leaf, out| out[0] = l.brownian(leaf) + i as f64 * 0.1);
        let g: BsvieGenerator = Arc::new(|a, out| out[0] = 0.4 * a.y[0] - a.t);
        let m = BsvieSpec::new(psi.clone(), g.clone())
            .with_dependencies(false, false)
            .with_lipschitz(0.4, 0.0, 0.0);
        let msol = solve_bsvie_msolution(&m, &l, 20, 1e-14).unwrap();
        let fam = solve_bsvie_family(&m, &l).unwrap();
        assert!(msol.y.max_abs_diff(&fam.y) < 1e-12);
        assert!(msol.msolution_residual.unwrap() < 1e-12);
    }

    #[test]
    fn picard_with_y_free_comparator_takes_one_iteration() {
        let l = BinaryLattice::new(1.0, 4).unwrap();
        let psi = TerminalField::from_fn(&l, 1, |_, _, out| out[0] = 1.0);
        let upper = BsvieSpec::new(psi.clone(), Arc::new(|a, out| out[0] = a.y[0].atan() + 0.2))
            .with_lipschitz(1.0, 0.0, 0.0);
        let bar = BsvieSpec::new(psi, Arc::new(|a, out| out[0] = a.t - a.s)).with_lipschitz(0.0, 0.0, 0.0);
        let run = picard_bsvie(&upper, &bar, &l, None, 10, 1e-13).unwrap();
        assert_eq!(run.iterations, 1);
    }
}
