//! Forward equations on the lattice: explicit Euler for SDEs, the
//! fundamental matrix, explicit Volterra sums for linear FSVIEs, Picard
//! iteration, partition freezing, and a Gaussian Monte Carlo cross-check.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cones::DenseMatrix;
use crate::error::{LabError, Result};
use crate::lattice::{AdaptedProcess, BinaryLattice, NodeId};

/// `(t, state, node, out)`: writes a drift or diffusion vector into `out`.
pub type StateFn = Arc<dyn Fn(f64, &[f64], NodeId, &mut [f64]) + Send + Sync>;
/// `(t, node)`: a matrix coefficient adapted to the node.
pub type MatrixFn = Arc<dyn Fn(f64, NodeId) -> DenseMatrix + Send + Sync>;
/// `(t, node, out)`: a vector coefficient adapted to the node.
pub type VectorFn = Arc<dyn Fn(f64, NodeId, &mut [f64]) + Send + Sync>;
/// `(t, s, node at level of s)`: a Volterra kernel on `s <= t`.
pub type KernelFn = Arc<dyn Fn(f64, f64, NodeId) -> DenseMatrix + Send + Sync>;
/// `(t, out)`: a deterministic free term.
pub type PathFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

/// Coefficients of `dX = (A0 X + b) dt + A1 X dW`.
#[derive(Clone)]
pub struct LinearCoefficients {
    pub drift_matrix: MatrixFn,
    pub diffusion_matrix: MatrixFn,
    pub forcing: VectorFn,
}

#[derive(Clone)]
pub struct FsdeSpec {
    pub dim: usize,
    pub start: usize,
    pub initial: Vec<f64>,
    pub drift: StateFn,
    pub diffusion: StateFn,
    pub lipschitz_drift: f64,
    pub lipschitz_diffusion: f64,
    pub linear: Option<LinearCoefficients>,
}

impl FsdeSpec {
    pub fn new(start: usize, initial: Vec<f64>, drift: StateFn, diffusion: StateFn) -> Result<Self> {
        if initial.is_empty() {
            return Err(LabError::Dimension("empty initial state".into()));
        }
        Ok(Self {
            dim: initial.len(),
            start,
            initial,
            drift,
            diffusion,
            lipschitz_drift: 0.0,
            lipschitz_diffusion: 0.0,
            linear: None,
        })
    }

    pub fn linear(start: usize, initial: Vec<f64>, coefficients: LinearCoefficients) -> Result<Self> {
        let dim = initial.len();
        let c = coefficients.clone();
        let drift: StateFn = Arc::new(move |t, x, node, out| {
            (c.forcing)(t, node, out);
            (c.drift_matrix)(t, node).mul_vec_acc(x, 1.0, out);
        });
        let c = coefficients.clone();
        let diffusion: StateFn = Arc::new(move |t, x, node, out| {
            (c.diffusion_matrix)(t, node).mul_vec_into(x, out);
        });
        let mut spec = Self::new(start, initial, drift, diffusion)?;
        spec.linear = Some(coefficients);
        spec.dim = dim;
        Ok(spec)
    }

    pub fn with_lipschitz(mut self, drift: f64, diffusion: f64) -> Self {
        self.lipschitz_drift = drift;
        self.lipschitz_diffusion = diffusion;
        self
    }
}

fn check_finite(values: &[f64], node: NodeId, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LabError::Divergence {
            node,
            detail: format!("{what} became non-finite"),
        })
    }
}

/// Explicit Euler: `X(child) = X + drift h + diffusion dW`.
pub fn solve_fsde(spec: &FsdeSpec, lattice: &BinaryLattice) -> Result<AdaptedProcess> {
    let n = lattice.depth();
    if spec.start >= n {
        return Err(LabError::Argument(format!(
            "start index {} must be below the depth {n}",
            spec.start
        )));
    }
    let dim = spec.dim;
    if spec.initial.len() != dim {
        return Err(LabError::Dimension(format!(
            "initial state of length {} for dimension {dim}",
            spec.initial.len()
        )));
    }
    check_finite(&spec.initial, NodeId::new(spec.start, 0), "initial state")?;
    let mut x = AdaptedProcess::zeros_from(lattice, dim, spec.start);
    for chunk in x.level_mut(spec.start).chunks_mut(dim) {
        chunk.copy_from_slice(&spec.initial);
    }
    let h = lattice.step();
    let mut drift = vec![0.0; dim];
    let mut diffusion = vec![0.0; dim];
    for k in spec.start..n {
        let t = lattice.time(k);
        let (before, next) = x.split_at_level(k + 1);
        let current = &before[k];
        for node in lattice.nodes(k) {
            let idx = node.path as usize;
            let state = &current[idx * dim..(idx + 1) * dim];
            (spec.drift)(t, state, node, &mut drift);
            (spec.diffusion)(t, state, node, &mut diffusion);
            for child in lattice.children(idx) {
                let dw = lattice.increment_into(NodeId::new(k + 1, child as u64));
                let out = &mut next[child * dim..(child + 1) * dim];
                for d in 0..dim {
                    out[d] = state[d] + drift[d] * h + diffusion[d] * dw;
                }
                check_finite(out, NodeId::new(k + 1, child as u64), "state")?;
            }
        }
    }
    Ok(x)
}

/// Fundamental matrix `Phi(t_k, t_s)` stored row-major (`dim = n * n`),
/// equal to the identity at level `start`.
pub fn fundamental_matrix(
    lattice: &BinaryLattice,
    drift_matrix: &MatrixFn,
    diffusion_matrix: &MatrixFn,
    start: usize,
) -> Result<AdaptedProcess> {
    let n = drift_matrix(lattice.time(start), NodeId::new(start, 0)).rows();
    let mut phi = AdaptedProcess::zeros_from(lattice, n * n, start);
    for col in 0..n {
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        let forcing: VectorFn = Arc::new(|_, _, out| out.fill(0.0));
        let spec = FsdeSpec::linear(
            start,
            e,
            LinearCoefficients {
                drift_matrix: drift_matrix.clone(),
                diffusion_matrix: diffusion_matrix.clone(),
                forcing,
            },
        )?;
        let column = solve_fsde(&spec, lattice)?;
        for k in start..=lattice.depth() {
            let src = column.level(k);
            let dst = phi.level_mut(k);
            for (node, v) in src.chunks(n).enumerate() {
                for (row, value) in v.iter().enumerate() {
                    dst[node * n * n + row * n + col] = *value;
                }
            }
        }
    }
    Ok(phi)
}

/// `X_k = Phi(k, s) x + sum_{j=s}^{k-1} Phi(k, j+1) b_j h`, built from
/// fundamental matrices on the same grid.
pub fn variation_of_constants(
    lattice: &BinaryLattice,
    coefficients: &LinearCoefficients,
    start: usize,
    initial: &[f64],
) -> Result<AdaptedProcess> {
    let depth = lattice.depth();
    let n = initial.len();
    let h = lattice.step();
    let phis: Vec<AdaptedProcess> = (start..=depth)
        .map(|s| {
            if s == depth {
                let mut id = AdaptedProcess::zeros_from(lattice, n * n, depth);
                for chunk in id.level_mut(depth).chunks_mut(n * n) {
                    chunk.copy_from_slice(DenseMatrix::identity(n).as_slice());
                }
                Ok(id)
            } else {
                fundamental_matrix(lattice, &coefficients.drift_matrix, &coefficients.diffusion_matrix, s)
            }
        })
        .collect::<Result<_>>()?;
    let mut x = AdaptedProcess::zeros_from(lattice, n, start);
    let mut b = vec![0.0; n];
    for k in start..=depth {
        for node in lattice.nodes(k) {
            let phi = DenseMatrix::new(n, n, phis[0].value(node).to_vec())?;
            let mut value = phi.mul_vec(initial);
            for j in start..k {
                let anc = node.ancestor(j);
                (coefficients.forcing)(lattice.time(j), anc, &mut b);
                let phi_j = DenseMatrix::new(n, n, phis[j + 1 - start].value(node).to_vec())?;
                phi_j.mul_vec_acc(&b, h, &mut value);
            }
            x.value_mut(node).copy_from_slice(&value);
        }
    }
    Ok(x)
}

/// Largest step `h` with `1 - a0 h - a1 sqrt(h) >= 0`, i.e. the largest step
/// keeping `I + A0 h +/- A1 sqrt(h)` entrywise nonnegative for Metzler `A0`
/// with `|entries| <= a0` and diagonal `A1` with `|entries| <= a1`.
pub fn positivity_step_bound(drift_bound: f64, diffusion_bound: f64) -> f64 {
    let (a0, a1) = (drift_bound.max(0.0), diffusion_bound.max(0.0));
    if a0 == 0.0 && a1 == 0.0 {
        return f64::INFINITY;
    }
    if a0 == 0.0 {
        return 1.0 / (a1 * a1);
    }
    let root = (-a1 + (a1 * a1 + 4.0 * a0).sqrt()) / (2.0 * a0);
    root * root
}

/// Free term of a forward Volterra equation.
#[derive(Clone)]
pub enum FreeTerm {
    Deterministic(PathFn),
    Adapted(AdaptedProcess),
}

impl FreeTerm {
    pub fn constant(value: Vec<f64>) -> Self {
        FreeTerm::Deterministic(Arc::new(move |_, out| out.copy_from_slice(&value)))
    }

    fn eval(&self, lattice: &BinaryLattice, time_index: usize, node: NodeId, out: &mut [f64]) {
        match self {
            FreeTerm::Deterministic(f) => f(lattice.time(time_index), out),
            FreeTerm::Adapted(p) => out.copy_from_slice(p.value(node.ancestor(time_index))),
        }
    }
}

/// Diffusion kernel of a forward Volterra equation.
#[derive(Clone)]
pub enum DiffusionKernel {
    Zero,
    /// `A1(s)` independent of the outer time.
    Separated(MatrixFn),
    /// `A1(t, s)`.
    Full(KernelFn),
}

/// `X(t) = phi(t) + int_0^t A0(t,s) X ds + int_0^t A1 X dW`.
#[derive(Clone)]
pub struct FsvieSpec {
    pub dim: usize,
    pub free_term: FreeTerm,
    pub drift_kernel: Option<KernelFn>,
    pub diffusion: DiffusionKernel,
    /// Continuity modulus of the drift kernel in its first argument.
    pub modulus: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl FsvieSpec {
    pub fn new(dim: usize, free_term: FreeTerm) -> Self {
        Self {
            dim,
            free_term,
            drift_kernel: None,
            diffusion: DiffusionKernel::Zero,
            modulus: None,
        }
    }

    pub fn with_drift_kernel(mut self, kernel: KernelFn) -> Self {
        self.drift_kernel = Some(kernel);
        self
    }

    pub fn with_diffusion(mut self, diffusion: DiffusionKernel) -> Self {
        self.diffusion = diffusion;
        self
    }

    pub fn free_term_process(&self, lattice: &BinaryLattice) -> AdaptedProcess {
        AdaptedProcess::from_fn(lattice, self.dim, |node, out| {
            self.free_term.eval(lattice, node.level, node, out)
        })
    }
}

/// Explicit Volterra sum along every ancestor path. `outer[k]` is the time
/// index at which the kernels' first argument and the free term are read for
/// level `k` (identity for the plain solver).
fn volterra_sweep(spec: &FsvieSpec, lattice: &BinaryLattice, outer: &[usize]) -> Result<AdaptedProcess> {
    let dim = spec.dim;
    let h = lattice.step();
    let mut x = AdaptedProcess::zeros(lattice, dim);
    for k in 0..=lattice.depth() {
        let t_outer = lattice.time(outer[k]);
        let (history, level) = x.split_at_level(k);
        level
            .par_chunks_mut(dim)
            .enumerate()
            .try_for_each(|(idx, out)| -> Result<()> {
                let node = NodeId::new(k, idx as u64);
                spec.free_term.eval(lattice, outer[k], node, out);
                for (j, past) in history.iter().enumerate() {
                    let anc = node.ancestor(j);
                    let xj = &past[anc.path as usize * dim..(anc.path as usize + 1) * dim];
                    let s = lattice.time(j);
                    if let Some(kernel) = &spec.drift_kernel {
                        kernel(t_outer, s, anc).mul_vec_acc(xj, h, out);
                    }
                    let dw = lattice.increment_into(node.ancestor(j + 1));
                    match &spec.diffusion {
                        DiffusionKernel::Zero => {}
                        DiffusionKernel::Separated(a1) => a1(s, anc).mul_vec_acc(xj, dw, out),
                        DiffusionKernel::Full(a1) => a1(t_outer, s, anc).mul_vec_acc(xj, dw, out),
                    }
                }
                check_finite(out, node, "Volterra sum")
            })?;
    }
    Ok(x)
}

pub fn solve_linear_fsvie(spec: &FsvieSpec, lattice: &BinaryLattice) -> Result<AdaptedProcess> {
    let identity: Vec<usize> = (0..=lattice.depth()).collect();
    volterra_sweep(spec, lattice, &identity)
}

/// Solves with kernel first argument and free term frozen at the partition
/// point `max{tau in partition : tau <= k}`.
pub fn partition_approximation(
    spec: &FsvieSpec,
    partition: &[usize],
    lattice: &BinaryLattice,
) -> Result<AdaptedProcess> {
    let n = lattice.depth();
    let valid = partition.first() == Some(&0)
        && partition.last() == Some(&n)
        && partition.windows(2).all(|w| w[0] < w[1]);
    if !valid {
        return Err(LabError::Argument(format!(
            "partition must increase strictly from 0 to {n}, got {partition:?}"
        )));
    }
    let outer: Vec<usize> = (0..=n)
        .map(|k| *partition.iter().rev().find(|&&p| p <= k).expect("partition contains 0"))
        .collect();
    volterra_sweep(spec, lattice, &outer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardFsvie {
    pub solution: AdaptedProcess,
    /// Grid L2 norm of each successive difference.
    pub increments: Vec<f64>,
    pub iterations: usize,
    /// Minimum of `X - phi` over all nodes and components of the limit.
    pub min_excess: f64,
    /// Minimum of `X - phi` over every iterate.
    pub min_excess_all_iterates: f64,
}

/// `X^m = phi + (A X^{m-1})` with `(A X)(t_k) = h sum_{j<k} A0(t_k, t_j) X(t_j)`.
pub fn picard_fsvie(spec: &FsvieSpec, lattice: &BinaryLattice, max_iter: usize, tol: f64) -> Result<PicardFsvie> {
    if !matches!(spec.diffusion, DiffusionKernel::Zero) {
        return Err(LabError::Argument("Picard iteration requires a zero diffusion kernel".into()));
    }
    let dim = spec.dim;
    let h = lattice.step();
    let phi = spec.free_term_process(lattice);
    let mut current = phi.clone();
    let mut increments = Vec::new();
    let mut min_all = f64::INFINITY;
    for iteration in 1..=max_iter {
        let mut next = phi.clone();
        if let Some(kernel) = &spec.drift_kernel {
            for k in 1..=lattice.depth() {
                let t = lattice.time(k);
                let level = next.level_mut(k);
                level.par_chunks_mut(dim).enumerate().for_each(|(idx, out)| {
                    let node = NodeId::new(k, idx as u64);
                    for j in 0..k {
                        let anc = node.ancestor(j);
                        kernel(t, lattice.time(j), anc).mul_vec_acc(current.value(anc), h, out);
                    }
                });
            }
        }
        let (excess, _) = next.min_difference(&phi);
        min_all = min_all.min(excess);
        let delta = grid_l2_distance(lattice, &next, &current);
        for (node, v) in next.iter() {
            check_finite(v, node, "Picard iterate")?;
        }
        increments.push(delta);
        current = next;
        if delta < tol {
            let min_excess = current.min_difference(&phi).0;
            return Ok(PicardFsvie {
                solution: current,
                increments,
                iterations: iteration,
                min_excess,
                min_excess_all_iterates: min_all,
            });
        }
    }
    let last_ratio = match increments.as_slice() {
        [.., a, b] if *a > 0.0 => b / a,
        _ => f64::NAN,
    };
    Err(LabError::NonConvergence {
        iterations: max_iter,
        last_delta: increments.last().copied().unwrap_or(f64::NAN),
        last_ratio,
    })
}

/// `sqrt(sum_k h E|a_k - b_k|^2)` over all levels.
pub fn grid_l2_distance(lattice: &BinaryLattice, a: &AdaptedProcess, b: &AdaptedProcess) -> f64 {
    let h = lattice.step();
    let mut total = 0.0;
    for k in a.first_level().max(b.first_level())..=lattice.depth() {
        let weight = lattice.node_probability(k).to_f64();
        let sq: f64 = a.level(k).iter().zip(b.level(k)).map(|(x, y)| (x - y) * (x - y)).sum();
        total += h * weight * sq;
    }
    total.sqrt()
}

/// Forward model simulated by [`euler_monte_carlo`].
#[derive(Clone, Copy)]
pub enum ForwardModel<'a> {
    Sde(&'a FsdeSpec),
    Volterra(&'a FsvieSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    /// Maximum work units (path-steps, or path-step-pairs for Volterra sums).
    pub budget: u128,
}

/// Default work budget of [`euler_monte_carlo`].
pub const DEFAULT_MONTE_CARLO_BUDGET: u128 = 1 << 31;
const PATHS_PER_CHUNK: usize = 4096;

impl MonteCarloConfig {
    pub fn new(horizon: f64, steps: usize, paths: usize, seed: u64) -> Self {
        Self {
            horizon,
            steps,
            paths,
            seed,
            budget: DEFAULT_MONTE_CARLO_BUDGET,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub times: Vec<f64>,
    /// Mean state per time.
    pub mean: Vec<Vec<f64>>,
    /// Fraction of paths with a negative component, per time.
    pub violation_frequency: Vec<f64>,
    /// Binomial standard error of each frequency.
    pub standard_error: Vec<f64>,
    pub paths: usize,
}

#[derive(Clone)]
struct ChunkTally {
    sums: Vec<f64>,
    negatives: Vec<u64>,
}

/// Gaussian-increment Euler simulation. Coefficients are evaluated with the
/// placeholder node `NodeId { level: step, path: 0 }`, so they should not
/// depend on the node.
pub fn euler_monte_carlo(model: ForwardModel<'_>, config: &MonteCarloConfig) -> Result<MonteCarloSummary> {
    let MonteCarloConfig {
        horizon,
        steps,
        paths,
        seed,
        budget,
    } = *config;
    if steps == 0 || paths == 0 || !(horizon > 0.0 && horizon.is_finite()) {
        return Err(LabError::Argument("steps, paths and horizon must be positive".into()));
    }
    let work = match model {
        ForwardModel::Sde(_) => paths as u128 * steps as u128,
        ForwardModel::Volterra(_) => paths as u128 * (steps as u128 * (steps as u128 + 1) / 2),
    };
    if work > budget {
        return Err(LabError::Budget { requested: work, budget });
    }
    let h = horizon / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
    let dim = match model {
        ForwardModel::Sde(spec) => {
            if spec.start != 0 {
                return Err(LabError::Argument("Monte Carlo requires a start index of 0".into()));
            }
            spec.dim
        }
        ForwardModel::Volterra(spec) => {
            if matches!(spec.free_term, FreeTerm::Adapted(_)) {
                return Err(LabError::Argument(
                    "Monte Carlo needs a deterministic free term".into(),
                ));
            }
            spec.dim
        }
    };
    let tables = match model {
        ForwardModel::Volterra(spec) => Some(KernelTables::build(spec, &times)),
        ForwardModel::Sde(_) => None,
    };
    let chunks = paths.div_ceil(PATHS_PER_CHUNK);
    let tallies: Vec<Result<ChunkTally>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64);
            let count = PATHS_PER_CHUNK.min(paths - chunk * PATHS_PER_CHUNK);
            let mut tally = ChunkTally {
                sums: vec![0.0; (steps + 1) * dim],
                negatives: vec![0; steps + 1],
            };
            let mut path = vec![0.0; (steps + 1) * dim];
            let mut dw = vec![0.0; steps];
            for _ in 0..count {
                for w in dw.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *w = z * h.sqrt();
                }
                match model {
                    ForwardModel::Sde(spec) => simulate_sde(spec, &times, &dw, &mut path)?,
                    ForwardModel::Volterra(spec) => {
                        simulate_volterra(spec, tables.as_ref().expect("tables"), &times, &dw, &mut path)?
                    }
                }
                for k in 0..=steps {
                    let state = &path[k * dim..(k + 1) * dim];
                    for (s, v) in tally.sums[k * dim..(k + 1) * dim].iter_mut().zip(state) {
                        *s += v;
                    }
                    if state.iter().any(|&v| v < 0.0) {
                        tally.negatives[k] += 1;
                    }
                }
            }
            Ok(tally)
        })
        .collect();
    let mut sums = vec![0.0; (steps + 1) * dim];
    let mut negatives = vec![0u64; steps + 1];
    for tally in tallies {
        let tally = tally?;
        for (s, v) in sums.iter_mut().zip(&tally.sums) {
            *s += v;
        }
        for (n, v) in negatives.iter_mut().zip(&tally.negatives) {
            *n += v;
        }
    }
    let p = paths as f64;
    let violation_frequency: Vec<f64> = negatives.iter().map(|&c| c as f64 / p).collect();
    let standard_error = violation_frequency.iter().map(|&f| (f * (1.0 - f) / p).sqrt()).collect();
    Ok(MonteCarloSummary {
        times,
        mean: sums.chunks(dim).map(|c| c.iter().map(|s| s / p).collect()).collect(),
        violation_frequency,
        standard_error,
        paths,
    })
}

fn simulate_sde(spec: &FsdeSpec, times: &[f64], dw: &[f64], path: &mut [f64]) -> Result<()> {
    let dim = spec.dim;
    let h = times[1] - times[0];
    path[..dim].copy_from_slice(&spec.initial);
    let mut drift = vec![0.0; dim];
    let mut diffusion = vec![0.0; dim];
    for (k, w) in dw.iter().enumerate() {
        let node = NodeId::new(k, 0);
        let (done, rest) = path.split_at_mut((k + 1) * dim);
        let state = &done[k * dim..];
        (spec.drift)(times[k], state, node, &mut drift);
        (spec.diffusion)(times[k], state, node, &mut diffusion);
        let next = &mut rest[..dim];
        for d in 0..dim {
            next[d] = state[d] + drift[d] * h + diffusion[d] * w;
        }
        check_finite(next, NodeId::new(k + 1, 0), "Monte Carlo state")?;
    }
    Ok(())
}

/// Kernels sampled once on the Monte Carlo grid.
struct KernelTables {
    drift: Option<Vec<DenseMatrix>>,
    diffusion: Option<Vec<DenseMatrix>>,
    steps: usize,
}

impl KernelTables {
    fn build(spec: &FsvieSpec, times: &[f64]) -> Self {
        let steps = times.len() - 1;
        let table = |f: &dyn Fn(f64, f64, NodeId) -> DenseMatrix| {
            let mut out = Vec::with_capacity((steps + 1) * steps);
            for &t in times {
                for (j, &s) in times[..steps].iter().enumerate() {
                    out.push(f(t, s, NodeId::new(j, 0)));
                }
            }
            out
        };
        let drift = spec.drift_kernel.as_ref().map(|k| table(&|t, s, n| k(t, s, n)));
        let diffusion = match &spec.diffusion {
            DiffusionKernel::Zero => None,
            DiffusionKernel::Separated(a1) => Some(table(&|_, s, n| a1(s, n))),
            DiffusionKernel::Full(a1) => Some(table(&|t, s, n| a1(t, s, n))),
        };
        Self {
            drift,
            diffusion,
            steps,
        }
    }

    fn at(table: &[DenseMatrix], steps: usize, k: usize, j: usize) -> &DenseMatrix {
        &table[k * steps + j]
    }
}

fn simulate_volterra(
    spec: &FsvieSpec,
    tables: &KernelTables,
    times: &[f64],
    dw: &[f64],
    path: &mut [f64],
) -> Result<()> {
    let dim = spec.dim;
    let h = times[1] - times[0];
    let free = match &spec.free_term {
        FreeTerm::Deterministic(f) => f,
        FreeTerm::Adapted(_) => unreachable!("rejected before simulation"),
    };
    for k in 0..times.len() {
        let (done, rest) = path.split_at_mut(k * dim);
        let out = &mut rest[..dim];
        free(times[k], out);
        for j in 0..k {
            let xj = &done[j * dim..(j + 1) * dim];
            if let Some(t) = &tables.drift {
                KernelTables::at(t, tables.steps, k, j).mul_vec_acc(xj, h, out);
            }
            if let Some(t) = &tables.diffusion {
                KernelTables::at(t, tables.steps, k, j).mul_vec_acc(xj, dw[j], out);
            }
        }
        check_finite(out, NodeId::new(k, 0), "Monte Carlo state")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_fn(v: f64) -> MatrixFn {
        Arc::new(move |_, _| DenseMatrix::scalar(v))
    }

    fn zero_vec() -> VectorFn {
        Arc::new(|_, _, out| out.fill(0.0))
    }

    #[test]
    fn zero_coefficients_keep_initial_state() {
        let l = BinaryLattice::new(1.0, 5).unwrap();
        let zero: StateFn = Arc::new(|_, _, _, out| out.fill(0.0));
        let spec = FsdeSpec::new(0, vec![0.7, -0.2], zero.clone(), zero).unwrap();
        let x = solve_fsde(&spec, &l).unwrap();
        assert!(x.iter().all(|(_, v)| v == [0.7, -0.2]));
    }

    #[test]
    fn geometric_martingale_keeps_mean() {
        let l = BinaryLattice::new(1.0, 10).unwrap();
        let coeffs = LinearCoefficients {
            drift_matrix: scalar_fn(0.0),
            diffusion_matrix: scalar_fn(1.0),
            forcing: zero_vec(),
        };
        let x = solve_fsde(&FsdeSpec::linear(0, vec![1.5], coeffs).unwrap(), &l).unwrap();
        let mean = crate::lattice::expectation(&l, x.level(10), 10, 1).unwrap();
        assert!((mean[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn start_at_horizon_is_rejected() {
        let l = BinaryLattice::new(1.0, 3).unwrap();
        let zero: StateFn = Arc::new(|_, _, _, out| out.fill(0.0));
        let spec = FsdeSpec::new(3, vec![1.0], zero.clone(), zero).unwrap();
        assert!(matches!(solve_fsde(&spec, &l), Err(LabError::Argument(_))));
    }

    #[test]
    fn divergence_names_node() {
        let l = BinaryLattice::new(1.0, 3).unwrap();
        let blow: StateFn = Arc::new(|_, x, _, out| out[0] = x[0] * 1e300);
        let zero: StateFn = Arc::new(|_, _, _, out| out.fill(0.0));
        let spec = FsdeSpec::new(0, vec![1e10], blow, zero).unwrap();
        assert!(matches!(solve_fsde(&spec, &l), Err(LabError::Divergence { .. })));
    }

    #[test]
    fn step_bound_cases() {
        assert_eq!(positivity_step_bound(0.0, 0.0), f64::INFINITY);
        assert!((positivity_step_bound(2.0, 0.0) - 0.5).abs() < 1e-15);
        assert!((positivity_step_bound(0.0, 2.0) - 0.25).abs() < 1e-15);
        let h = positivity_step_bound(1.0, 1.0);
        assert!((1.0 - h - h.sqrt()).abs() < 1e-14);
        assert!((h - 0.381_966_011_250_105_1).abs() < 1e-14);
    }

    #[test]
    fn fundamental_matrix_of_zero_is_identity() {
        let l = BinaryLattice::new(1.0, 4).unwrap();
        let zero: MatrixFn = Arc::new(|_, _| DenseMatrix::zeros(2, 2));
        let phi = fundamental_matrix(&l, &zero, &zero, 1).unwrap();
        assert!(phi.iter().all(|(_, v)| v == [1.0, 0.0, 0.0, 1.0]));
        assert!(!phi.is_populated(0));
    }

    #[test]
    fn scalar_exponential_fundamental_matrix() {
        let l = BinaryLattice::deterministic(1.0, 1000).unwrap();
        let phi = fundamental_matrix(&l, &scalar_fn(-0.8), &scalar_fn(0.0), 0).unwrap();
        let at_end = phi.value(NodeId::new(1000, 0))[0];
        assert!((at_end - (-0.8f64).exp()).abs() < 2.0 * l.step());
    }

    #[test]
    fn zero_kernels_return_free_term() {
        let l = BinaryLattice::new(1.0, 4).unwrap();
        let spec = FsvieSpec::new(1, FreeTerm::Deterministic(Arc::new(|t, out| out[0] = 1.0 + t)));
        let x = solve_linear_fsvie(&spec, &l).unwrap();
        for (node, v) in x.iter() {
            assert_eq!(v[0], 1.0 + l.time(node.level));
        }
    }

    #[test]
    fn picard_without_kernel_stops_immediately() {
        let l = BinaryLattice::new(1.0, 4).unwrap();
        let spec = FsvieSpec::new(1, FreeTerm::constant(vec![2.0]));
        let out = picard_fsvie(&spec, &l, 10, 1e-12).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.min_excess, 0.0);
    }

    #[test]
    fn picard_rejects_diffusion() {
        let l = BinaryLattice::new(1.0, 4).unwrap();
        let spec = FsvieSpec::new(1, FreeTerm::constant(vec![1.0]))
            .with_diffusion(DiffusionKernel::Separated(scalar_fn(1.0)));
        assert!(matches!(picard_fsvie(&spec, &l, 10, 1e-12), Err(LabError::Argument(_))));
    }

    #[test]
    fn picard_reports_non_convergence() {
        let l = BinaryLattice::new(1.0, 6).unwrap();
        let spec = FsvieSpec::new(1, FreeTerm::constant(vec![1.0]))
            .with_drift_kernel(Arc::new(|_, _, _| DenseMatrix::scalar(3.0)));
        assert!(matches!(
            picard_fsvie(&spec, &l, 2, 1e-14),
            Err(LabError::NonConvergence { iterations: 2, .. })
        ));
    }

    #[test]
    fn partition_validation() {
        let l = BinaryLattice::new(1.0, 4).unwrap();
        let spec = FsvieSpec::new(1, FreeTerm::constant(vec![1.0]));
        assert!(partition_approximation(&spec, &[0, 2], &l).is_err());
        assert!(partition_approximation(&spec, &[0, 3, 3, 4], &l).is_err());
        assert!(partition_approximation(&spec, &[0, 2, 4], &l).is_ok());
    }

    #[test]
    fn monte_carlo_zero_coefficients() {
        let zero: StateFn = Arc::new(|_, _, _, out| out.fill(0.0));
        let spec = FsdeSpec::new(0, vec![0.0], zero.clone(), zero).unwrap();
        let s = euler_monte_carlo(ForwardModel::Sde(&spec), &MonteCarloConfig::new(1.0, 16, 500, 3)).unwrap();
        assert!(s.violation_frequency.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn monte_carlo_budget() {
        let zero: StateFn = Arc::new(|_, _, _, out| out.fill(0.0));
        let spec = FsdeSpec::new(0, vec![0.0], zero.clone(), zero).unwrap();
        let mut cfg = MonteCarloConfig::new(1.0, 100, 100, 0);
        cfg.budget = 1000;
        assert!(matches!(
            euler_monte_carlo(ForwardModel::Sde(&spec), &cfg),
            Err(LabError::Budget { .. })
        ));
    }
}
