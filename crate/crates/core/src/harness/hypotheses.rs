use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backward::LinearMBsvie;
use crate::cones::{is_diagonal, is_metzler, is_nonneg, DenseMatrix};
use crate::forward::{DiffusionKernel, FsvieSpec, KernelFn, MatrixFn};
use crate::lattice::{BinaryLattice, Branch, NodeId, TerminalField};

/// Outcome of one hypothesis check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Satisfied,
    Violated,
    NotApplicable,
}

impl Status {
    pub fn tag(self) -> &'static str {
        match self {
            Status::Satisfied => "ok",
            Status::Violated => "VIOLATED",
            Status::NotApplicable => "na",
        }
    }
}

/// Every condition the harness knows about, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    /// Drift, kernel or generator y-Jacobian has nonnegative off-diagonal entries.
    Metzler,
    /// Forward drift kernel entrywise nonnegative (diffusion-free case).
    NonnegKernel,
    /// Diffusion, z or zeta coefficient is diagonal.
    Diagonal,
    /// Kernel monotone in time in the direction the positive result needs.
    KernelTimeMonotone,
    /// Diffusion (forward) or zeta (backward) coefficient free of the other time.
    SeparatedCoefficient,
    FreeTermNonneg,
    /// Free term (or free-term difference) monotone in time and nonnegative.
    FreeTermMonotone,
    /// Generator difference nonnegative and nonincreasing in the outer time.
    DifferenceMonotone,
    /// Terminal values or free terms ordered between the two equations.
    DataOrdered,
    /// Lower generator below the comparator, comparator below the upper one.
    GeneratorSandwich,
    /// Comparator generator nondecreasing in y (declared by construction, sampled).
    NondecreasingSelection,
    StepBound,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 12] = [
        ConditionKind::Metzler,
        ConditionKind::NonnegKernel,
        ConditionKind::Diagonal,
        ConditionKind::KernelTimeMonotone,
        ConditionKind::SeparatedCoefficient,
        ConditionKind::FreeTermNonneg,
        ConditionKind::FreeTermMonotone,
        ConditionKind::DifferenceMonotone,
        ConditionKind::DataOrdered,
        ConditionKind::GeneratorSandwich,
        ConditionKind::NondecreasingSelection,
        ConditionKind::StepBound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConditionKind::Metzler => "metzler",
            ConditionKind::NonnegKernel => "nonneg_kernel",
            ConditionKind::Diagonal => "diagonal",
            ConditionKind::KernelTimeMonotone => "kernel_time_monotone",
            ConditionKind::SeparatedCoefficient => "separated_coefficient",
            ConditionKind::FreeTermNonneg => "free_term_nonneg",
            ConditionKind::FreeTermMonotone => "free_term_monotone",
            ConditionKind::DifferenceMonotone => "difference_monotone",
            ConditionKind::DataOrdered => "data_ordered",
            ConditionKind::GeneratorSandwich => "generator_sandwich",
            ConditionKind::NondecreasingSelection => "nondecreasing_selection",
            ConditionKind::StepBound => "step_bound",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub kind: ConditionKind,
    pub status: Status,
    pub witness: Option<String>,
}

/// One entry per known condition; unchecked ones stay not-applicable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub conditions: Vec<Condition>,
}

impl Default for HypothesisReport {
    fn default() -> Self {
        Self {
            conditions: ConditionKind::ALL
                .iter()
                .map(|&kind| Condition {
                    kind,
                    status: Status::NotApplicable,
                    witness: None,
                })
                .collect(),
        }
    }
}

impl HypothesisReport {
    pub fn new() -> Self {
        Self::default()
    }

    fn slot(&mut self, kind: ConditionKind) -> &mut Condition {
        self.conditions
            .iter_mut()
            .find(|c| c.kind == kind)
            .expect("every kind has a slot")
    }

    pub fn status(&self, kind: ConditionKind) -> Status {
        self.conditions
            .iter()
            .find(|c| c.kind == kind)
            .map_or(Status::NotApplicable, |c| c.status)
    }

    pub fn witness(&self, kind: ConditionKind) -> Option<&str> {
        self.conditions.iter().find(|c| c.kind == kind).and_then(|c| c.witness.as_deref())
    }

    /// Records a check; a violation is never overwritten by a later pass.
    pub fn record(&mut self, kind: ConditionKind, witness: Option<String>) {
        let slot = self.slot(kind);
        if slot.status == Status::Violated {
            return;
        }
        slot.status = if witness.is_some() { Status::Violated } else { Status::Satisfied };
        slot.witness = witness;
    }

    /// Scans labelled checks and records the first failing label.
    pub fn scan(&mut self, kind: ConditionKind, checks: impl IntoIterator<Item = (bool, String)>) {
        let witness = checks.into_iter().find(|(ok, _)| !ok).map(|(_, label)| label);
        self.record(kind, witness);
    }

    /// Like [`scan`](Self::scan) with labels built only on failure.
    pub fn scan_lazy<L: FnOnce() -> String>(&mut self, kind: ConditionKind, checks: impl IntoIterator<Item = (bool, L)>) {
        let witness = checks.into_iter().find(|(ok, _)| !ok).map(|(_, label)| label());
        self.record(kind, witness);
    }

    pub fn merge(&mut self, other: &HypothesisReport) {
        for c in &other.conditions {
            if c.status != Status::NotApplicable {
                self.record(c.kind, c.witness.clone());
            }
        }
    }

    /// Resets every kind outside `kinds` to not-applicable.
    pub fn restrict(mut self, kinds: &[ConditionKind]) -> Self {
        for c in &mut self.conditions {
            if !kinds.contains(&c.kind) {
                c.status = Status::NotApplicable;
                c.witness = None;
            }
        }
        self
    }

    pub fn violated(&self) -> Vec<ConditionKind> {
        self.conditions
            .iter()
            .filter(|c| c.status == Status::Violated)
            .map(|c| c.kind)
            .collect()
    }

    pub fn all_satisfied(&self) -> bool {
        self.violated().is_empty()
    }
}

impl fmt::Display for HypothesisReport {
    /// `name=tag` pairs joined by `;`, in the fixed condition order.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.conditions.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{}={}", c.kind.name(), c.status.tag())?;
        }
        Ok(())
    }
}

/// Linear backward equation in structural form, for hypothesis checks.
///
/// With `coupling = None` the generator is `A(t, s) y + B(s) z`; with
/// `coupling = Some(C)` it is `A(t, s) y + C(t, s) zeta` and the M-solution
/// conditions apply.
#[derive(Clone)]
pub struct LinearBackward {
    pub kernel: KernelFn,
    pub z_matrix: Option<MatrixFn>,
    /// `C(t, s)`, read at the node of level `t`.
    pub coupling: Option<KernelFn>,
    pub free_term: TerminalField,
}

/// Equation whose structural hypotheses can be checked on a lattice.
#[derive(Clone, Copy)]
pub enum Structure<'a> {
    Forward(&'a FsvieSpec),
    Backward(&'a LinearBackward),
}

/// Evaluates every applicable condition on all grid pairs, at the extreme
/// paths of each level plus `sample_count` random nodes drawn from `seed`.
pub fn check_hypotheses(structure: Structure<'_>, lattice: &BinaryLattice, sample_count: usize, seed: u64) -> HypothesisReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes: Vec<Vec<NodeId>> = (0..=lattice.depth())
        .map(|k| {
            let len = lattice.level_len(k);
            let mut picked = vec![NodeId::new(k, 0), NodeId::new(k, (len - 1) as u64)];
            picked.extend((0..sample_count).map(|_| NodeId::new(k, rng.random_range(0..len) as u64)));
            picked.sort_by_key(|n| n.path);
            picked.dedup();
            picked
        })
        .collect();
    match structure {
        Structure::Forward(spec) => forward_report(spec, lattice, &nodes),
        Structure::Backward(eq) => backward_report(eq, lattice, &nodes),
    }
}

fn metzler(a: &DenseMatrix) -> bool {
    is_metzler(a, 0.0).unwrap_or(false)
}

fn diagonal(a: &DenseMatrix) -> bool {
    is_diagonal(a, 0.0).unwrap_or(false)
}

fn dominates(a: &DenseMatrix, b: &DenseMatrix) -> bool {
    a.sub(b).map(|d| is_nonneg(&d, 0.0)).unwrap_or(false)
}

fn forward_report(spec: &FsvieSpec, lattice: &BinaryLattice, nodes: &[Vec<NodeId>]) -> HypothesisReport {
    let n = lattice.depth();
    let time = |k: usize| lattice.time(k);
    let mut report = HypothesisReport::new();
    let zero = DenseMatrix::zeros(spec.dim, spec.dim);
    let drift = |t: f64, s: f64, node: NodeId| spec.drift_kernel.as_ref().map_or_else(|| zero.clone(), |k| k(t, s, node));
    let mut metzler_checks = Vec::new();
    let mut nonneg_checks = Vec::new();
    let mut monotone_checks = Vec::new();
    for j in 0..n {
        for &node in &nodes[j] {
            for i in (j + 1)..=n {
                let a = drift(time(i), time(j), node);
                let label = || format!("A0(t={:.6}, s={:.6}) at {node}", time(i), time(j));
                metzler_checks.push((metzler(&a), label()));
                nonneg_checks.push((is_nonneg(&a, 0.0), label()));
                if i < n {
                    let later = drift(time(i + 1), time(j), node);
                    monotone_checks.push((
                        dominates(&later, &a),
                        format!("A0(t={:.6}, s) - A0(t={:.6}, s) at s={:.6}, {node}", time(i + 1), time(i), time(j)),
                    ));
                }
            }
        }
    }
    report.scan(ConditionKind::Metzler, metzler_checks);
    report.scan(ConditionKind::KernelTimeMonotone, monotone_checks);
    let mut diag_checks = Vec::new();
    let mut separated_checks = Vec::new();
    match &spec.diffusion {
        DiffusionKernel::Zero => {
            report.scan(ConditionKind::NonnegKernel, nonneg_checks);
        }
        DiffusionKernel::Separated(a1) => {
            for j in 0..n {
                for &node in &nodes[j] {
                    diag_checks.push((diagonal(&a1(time(j), node)), format!("A1(s={:.6}) at {node}", time(j))));
                }
            }
        }
        DiffusionKernel::Full(a1) => {
            for j in 0..n {
                for &node in &nodes[j] {
                    let first = a1(time(j + 1), time(j), node);
                    for i in (j + 1)..=n {
                        let a = a1(time(i), time(j), node);
                        diag_checks.push((diagonal(&a), format!("A1(t={:.6}, s={:.6}) at {node}", time(i), time(j))));
                        separated_checks.push((
                            a == first,
                            format!("A1(t={:.6}, s={:.6}) differs from A1(t={:.6}, s)", time(i), time(j), time(j + 1)),
                        ));
                    }
                }
            }
        }
    }
    report.scan(ConditionKind::Diagonal, diag_checks);
    report.scan(ConditionKind::SeparatedCoefficient, separated_checks);
    let phi = spec.free_term_process(lattice);
    let mut nonneg = Vec::new();
    let mut increasing = Vec::new();
    for k in 0..=n {
        for &node in &nodes[k] {
            let now = phi.value(node);
            nonneg.push((now.iter().all(|&v| v >= 0.0), format!("phi at {node}")));
            if k < n {
                // Along both children, the free term must not decrease.
                for child in [Branch::Down, Branch::Up].map(|b| lattice.child(node, b).expect("interior node")) {
                    let next = phi.value(child);
                    increasing.push((
                        next.iter().zip(now).all(|(b, a)| b >= a),
                        format!("phi decreases from t={:.6} to t={:.6} at {node}", time(k), time(k + 1)),
                    ));
                }
            }
        }
    }
    report.scan(ConditionKind::FreeTermNonneg, nonneg);
    report.scan(ConditionKind::FreeTermMonotone, increasing);
    report
}

fn backward_report(eq: &LinearBackward, lattice: &BinaryLattice, nodes: &[Vec<NodeId>]) -> HypothesisReport {
    let n = lattice.depth();
    let time = |k: usize| lattice.time(k);
    let mut report = HypothesisReport::new();
    let mut metzler_checks = Vec::new();
    let mut monotone_checks = Vec::new();
    for k in 0..n {
        for &node in &nodes[k] {
            for i in 0..=k {
                let a = (eq.kernel)(time(i), time(k), node);
                metzler_checks.push((metzler(&a), format!("A(t={:.6}, s={:.6}) at {node}", time(i), time(k))));
                match eq.coupling {
                    None if i < k => {
                        let later = (eq.kernel)(time(i + 1), time(k), node);
                        monotone_checks.push((
                            dominates(&a, &later),
                            format!("A(t={:.6}, s) - A(t={:.6}, s) at s={:.6}, {node}", time(i), time(i + 1), time(k)),
                        ));
                    }
                    Some(_) if k + 1 < n => {
                        // Second-argument monotonicity, read along one child.
                        let child = lattice.child(node, Branch::Down).expect("interior node");
                        let later = (eq.kernel)(time(i), time(k + 1), child);
                        monotone_checks.push((
                            dominates(&later, &a),
                            format!("A(s={:.6}, t={:.6}) - A(s, t={:.6}) at {node}", time(i), time(k + 1), time(k)),
                        ));
                    }
                    _ => {}
                }
            }
        }
    }
    report.scan(ConditionKind::Metzler, metzler_checks);
    report.scan(ConditionKind::KernelTimeMonotone, monotone_checks);
    let mut diag_checks = Vec::new();
    let mut separated_checks = Vec::new();
    match (&eq.coupling, &eq.z_matrix) {
        (Some(c), _) => {
            for i in 0..n {
                for &node in &nodes[i] {
                    let first = c(time(i), time(i + 1), node);
                    for k in (i + 1)..=n {
                        let m = c(time(i), time(k), node);
                        diag_checks.push((diagonal(&m), format!("C(t={:.6}, s={:.6}) at {node}", time(i), time(k))));
                        separated_checks.push((
                            m == first,
                            format!("C(t={:.6}, s={:.6}) differs from C(t, s={:.6})", time(i), time(k), time(i + 1)),
                        ));
                    }
                }
            }
            report.scan(ConditionKind::SeparatedCoefficient, separated_checks);
        }
        (None, Some(b)) => {
            for k in 0..n {
                for &node in &nodes[k] {
                    diag_checks.push((diagonal(&b(time(k), node)), format!("B(s={:.6}) at {node}", time(k))));
                }
            }
        }
        (None, None) => {}
    }
    report.scan(ConditionKind::Diagonal, diag_checks);
    let leaves = &nodes[n];
    let psi = &eq.free_term;
    let mut nonneg = Vec::new();
    let mut decreasing = Vec::new();
    for i in 0..=n {
        for &leaf in leaves {
            let now = psi.value(i, leaf);
            nonneg.push((now.iter().all(|&v| v >= 0.0), format!("psi(t={:.6}) at {leaf}", time(i))));
            if i < n {
                let next = psi.value(i + 1, leaf);
                decreasing.push((
                    now.iter().zip(next).all(|(a, b)| a >= b),
                    format!("psi increases from t={:.6} to t={:.6} at {leaf}", time(i), time(i + 1)),
                ));
            }
        }
    }
    report.scan(ConditionKind::FreeTermNonneg, nonneg);
    if eq.coupling.is_none() {
        report.scan(ConditionKind::FreeTermMonotone, decreasing);
    }
    report
}

/// Structural report of a linear M-solution equation.
pub fn hypotheses_for_msolution(equation: &LinearMBsvie, lattice: &BinaryLattice, sample_count: usize) -> HypothesisReport {
    let zeta = equation.zeta_matrix.clone();
    let structure = LinearBackward {
        kernel: equation.kernel.clone(),
        z_matrix: None,
        coupling: Some(std::sync::Arc::new(move |t, _, node| zeta(t, node))),
        free_term: equation.free_term.clone(),
    };
    check_hypotheses(Structure::Backward(&structure), lattice, sample_count, 0)
}

/// Structural report of a forward Volterra equation.
pub fn hypotheses_for_forward(spec: &FsvieSpec, lattice: &BinaryLattice, sample_count: usize) -> HypothesisReport {
    check_hypotheses(Structure::Forward(spec), lattice, sample_count, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn violations_stick_and_format_is_stable() {
        let mut r = HypothesisReport::new();
        r.scan(ConditionKind::Metzler, [(true, "a".to_string()), (false, "b".to_string())]);
        r.record(ConditionKind::Metzler, None);
        r.record(ConditionKind::Diagonal, None);
        assert_eq!(r.status(ConditionKind::Metzler), Status::Violated);
        assert_eq!(r.witness(ConditionKind::Metzler), Some("b"));
        assert_eq!(r.violated(), vec![ConditionKind::Metzler]);
        let text = r.to_string();
        assert!(text.starts_with("metzler=VIOLATED;nonneg_kernel=na;diagonal=ok;"));
        assert_eq!(text.matches(';').count(), ConditionKind::ALL.len() - 1);
    }
}
