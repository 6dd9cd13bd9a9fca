//! Random coefficient families built to satisfy (or deliberately break)
//! the hypotheses of each positive result.
//!
//! Every builder draws from its own ChaCha stream `(seed, trial)`, so a
//! trial is reproducible on its own and independent of how many trials
//! precede it.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::hypotheses::{ConditionKind, HypothesisReport};
use crate::backward::{BsdeGenerator, BsdeSpec, BsvieGenerator, BsvieSpec, LinearBsde, LinearMBsvie, StepFnBsvie};
use crate::cones::{is_diagonal, is_metzler, is_nonneg, DenseMatrix};
use crate::error::Result;
use crate::forward::{DiffusionKernel, FreeTerm, FsdeSpec, FsvieSpec, KernelFn, LinearCoefficients, MatrixFn, VectorFn};
use crate::forward::positivity_step_bound;
use crate::lattice::{AdaptedProcess, BinaryLattice, NodeId, TerminalField};

/// Size limits shared by the random families.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FamilyBounds {
    pub max_dim: usize,
    pub max_depth: usize,
    /// Scale of the randomly drawn coefficients.
    pub coefficient_scale: f64,
}

pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn draw_dim(rng: &mut ChaCha8Rng, bounds: &FamilyBounds, min: usize) -> usize {
    rng.random_range(min..=bounds.max_dim.max(min))
}

fn draw_depth(rng: &mut ChaCha8Rng, bounds: &FamilyBounds) -> usize {
    let hi = bounds.max_depth.max(2);
    rng.random_range(hi.saturating_sub(3).max(2)..=hi)
}

/// Off-diagonal entries in `[0, off]`, diagonal in `[-diag, diag]`.
pub fn metzler_matrix(rng: &mut ChaCha8Rng, n: usize, off: f64, diag: f64) -> DenseMatrix {
    DenseMatrix::from_fn(n, n, |i, j| {
        if i == j {
            rng.random_range(-diag..=diag)
        } else {
            rng.random_range(0.0..=off)
        }
    })
}

/// Entries in `[0, scale]`, a quarter of them exactly zero.
pub fn nonneg_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        if rng.random_bool(0.25) {
            0.0
        } else {
            rng.random_range(0.0..=scale)
        }
    })
}

pub fn diagonal_matrix(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DenseMatrix {
    let diag: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    DenseMatrix::from_diagonal(&diag)
}

pub fn signed_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..=scale))
}

fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..=hi)).collect()
}

/// Nonnegative vector with some exact zeros, so the boundary is exercised.
fn nonneg_vec(rng: &mut ChaCha8Rng, len: usize, hi: f64) -> Vec<f64> {
    (0..len)
        .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..=hi) })
        .collect()
}

fn constant_matrix(m: DenseMatrix) -> MatrixFn {
    Arc::new(move |_, _| m.clone())
}

/// `t -> base + (t / horizon) slope`.
fn affine_matrix(base: DenseMatrix, slope: DenseMatrix, horizon: f64) -> MatrixFn {
    Arc::new(move |t, _| base.add(&slope.scale(t / horizon)).expect("same shape"))
}

/// Node subset used by structural checks: every node on small levels,
/// otherwise the two extreme paths plus evenly spaced ones.
pub fn probe_nodes(lattice: &BinaryLattice, level: usize, budget: usize) -> Vec<NodeId> {
    let len = lattice.level_len(level);
    if len <= budget.max(2) {
        return lattice.nodes(level).collect();
    }
    let stride = len / budget.max(2);
    let mut nodes: Vec<NodeId> = (0..len).step_by(stride.max(1)).map(|p| NodeId::new(level, p as u64)).collect();
    nodes.push(NodeId::new(level, (len - 1) as u64));
    nodes
}

fn leaf_brownian(lattice: &BinaryLattice) -> Vec<f64> {
    lattice.nodes(lattice.depth()).map(|leaf| lattice.brownian(leaf)).collect()
}

/// Smooth leaf field `a + b sin(c W_T + d)` per component.
fn random_leaf_field(rng: &mut ChaCha8Rng, lattice: &BinaryLattice, dim: usize) -> Vec<f64> {
    let params: Vec<[f64; 4]> = (0..dim)
        .map(|_| {
            [
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(0.5..=2.0),
                rng.random_range(0.0..=3.0),
            ]
        })
        .collect();
    leaf_brownian(lattice)
        .into_iter()
        .flat_map(|w| params.iter().map(move |p| p[0] + p[1] * (p[2] * w + p[3]).sin()).collect::<Vec<_>>())
        .collect()
}

/// Nonnegative leaf field `a (1 + cos(c W_T)) / 2`, occasionally zero.
fn random_nonneg_leaf_field(rng: &mut ChaCha8Rng, lattice: &BinaryLattice, dim: usize, hi: f64) -> Vec<f64> {
    let params: Vec<(f64, f64)> = (0..dim)
        .map(|_| {
            let a = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..=hi) };
            (a, rng.random_range(0.5..=2.0))
        })
        .collect();
    leaf_brownian(lattice)
        .into_iter()
        .flat_map(|w| params.iter().map(move |&(a, c)| a * 0.5 * (1.0 + (c * w).cos())).collect::<Vec<_>>())
        .collect()
}

// ---------------------------------------------------------------- cones

/// Random rectangular matrix; one in three is made entrywise nonnegative.
pub fn cone_matrix(seed: u64, trial: usize, max_size: usize) -> DenseMatrix {
    let mut rng = trial_rng(seed, trial);
    let rows = rng.random_range(1..=max_size);
    let cols = rng.random_range(1..=max_size);
    let m = signed_matrix(&mut rng, rows, cols, 1.0);
    if rng.random_bool(1.0 / 3.0) {
        DenseMatrix::from_fn(rows, cols, |i, j| m.get(i, j).abs())
    } else {
        m
    }
}

// -------------------------------------------------------- forward SDEs

pub struct ForwardTrial {
    pub spec: FsdeSpec,
    pub lattice: BinaryLattice,
    pub hypotheses: HypothesisReport,
}

/// Metzler `A0(t)`, diagonal `A1(t)`, `x >= 0`, `b >= 0`, step below the
/// positivity bound.
pub fn forward_positivity_trial(seed: u64, trial: usize, bounds: &FamilyBounds) -> Result<ForwardTrial> {
    let mut rng = trial_rng(seed, trial);
    let n = draw_dim(&mut rng, bounds, 1);
    let depth = rng.random_range(2..=bounds.max_depth.max(2));
    let scale = bounds.coefficient_scale;
    let (a0, a0_slope) = (metzler_matrix(&mut rng, n, scale, scale), metzler_matrix(&mut rng, n, scale, scale));
    let (a1, a1_slope) = (diagonal_matrix(&mut rng, n, scale), diagonal_matrix(&mut rng, n, scale));
    let drift_bound = a0.max_abs() + a0_slope.max_abs();
    let diffusion_bound = a1.max_abs() + a1_slope.max_abs();
    let step = 0.9 * positivity_step_bound(drift_bound, diffusion_bound).min(1.0) * rng.random_range(0.5..=1.0);
    let horizon = step * depth as f64;
    let lattice = BinaryLattice::new(horizon, depth)?;
    let initial = nonneg_vec(&mut rng, n, 1.0);
    let forcing_base = nonneg_vec(&mut rng, n, 0.5);
    let forcing: VectorFn = Arc::new(move |t, _, out| {
        for (o, b) in out.iter_mut().zip(&forcing_base) {
            *o = b * (1.0 + t);
        }
    });
    let drift_matrix = affine_matrix(a0, a0_slope, horizon);
    let diffusion_matrix = affine_matrix(a1, a1_slope, horizon);
    let mut hypotheses = HypothesisReport::new();
    let times: Vec<f64> = (0..depth).map(|k| lattice.time(k)).collect();
    hypotheses.scan_lazy(
        ConditionKind::Metzler,
        times.iter().map(|&t| {
            (is_metzler(&drift_matrix(t, NodeId::ROOT), 0.0).unwrap_or(false), move || format!("A0 at t={t:.6}"))
        }),
    );
    hypotheses.scan_lazy(
        ConditionKind::Diagonal,
        times.iter().map(|&t| {
            (is_diagonal(&diffusion_matrix(t, NodeId::ROOT), 0.0).unwrap_or(false), move || format!("A1 at t={t:.6}"))
        }),
    );
    hypotheses.record(
        ConditionKind::FreeTermNonneg,
        initial.iter().any(|&v| v < 0.0).then(|| "negative initial state".to_string()),
    );
    hypotheses.record(
        ConditionKind::StepBound,
        (step > positivity_step_bound(drift_bound, diffusion_bound)).then(|| format!("h = {step:.3e}")),
    );
    let coefficients = LinearCoefficients {
        drift_matrix,
        diffusion_matrix,
        forcing,
    };
    let spec = FsdeSpec::linear(0, initial, coefficients)?.with_lipschitz(drift_bound, diffusion_bound);
    Ok(ForwardTrial {
        spec,
        lattice,
        hypotheses,
    })
}

/// Which coefficient carries the injected off-diagonal violation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InjectedViolation {
    /// A negative off-diagonal drift entry.
    Drift,
    /// A nonzero off-diagonal diffusion entry.
    Diffusion,
}

/// A hypothesis-satisfying background with one injected off-diagonal
/// violation in row `i`, column `j`, started from `x = e_j`.
pub struct NecessityTrial {
    pub spec: FsdeSpec,
    pub lattice: BinaryLattice,
    pub violation: InjectedViolation,
    pub row: usize,
    pub col: usize,
}

pub fn forward_necessity_trial(seed: u64, trial: usize, bounds: &FamilyBounds) -> Result<NecessityTrial> {
    let mut rng = trial_rng(seed, trial);
    let n = draw_dim(&mut rng, bounds, 2);
    let row = rng.random_range(0..n);
    let col = (row + rng.random_range(1..n)) % n;
    let violation = if rng.random_bool(0.5) {
        InjectedViolation::Drift
    } else {
        InjectedViolation::Diffusion
    };
    let mut a0 = metzler_matrix(&mut rng, n, 0.1, 0.1);
    let mut a1 = diagonal_matrix(&mut rng, n, 0.1);
    match violation {
        InjectedViolation::Drift => a0.set(row, col, -rng.random_range(0.5..=1.0)),
        InjectedViolation::Diffusion => {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            a1.set(row, col, sign * rng.random_range(0.5..=1.0));
        }
    }
    let step = rng.random_range(0.01..=0.1);
    let lattice = BinaryLattice::new(4.0 * step, 4)?;
    let mut initial = vec![0.0; n];
    initial[col] = 1.0;
    let coefficients = LinearCoefficients {
        drift_matrix: constant_matrix(a0),
        diffusion_matrix: constant_matrix(a1),
        forcing: Arc::new(|_, _, out| out.fill(0.0)),
    };
    Ok(NecessityTrial {
        spec: FsdeSpec::linear(0, initial, coefficients)?,
        lattice,
        violation,
        row,
        col,
    })
}

// ------------------------------------------------------ forward Volterra

pub struct VolterraTrial {
    pub spec: FsvieSpec,
    pub lattice: BinaryLattice,
    pub hypotheses: HypothesisReport,
}

/// Even trials: entrywise nonnegative kernel and no diffusion. Odd trials:
/// Metzler kernel nondecreasing in `t`, separated diagonal diffusion,
/// nondecreasing nonnegative free term.
pub fn volterra_positivity_trial(seed: u64, trial: usize, bounds: &FamilyBounds) -> Result<VolterraTrial> {
    let mut rng = trial_rng(seed, trial);
    let n = draw_dim(&mut rng, bounds, 1);
    let depth = draw_depth(&mut rng, bounds);
    let scale = bounds.coefficient_scale;
    let mut hypotheses = HypothesisReport::new();
    if trial % 2 == 0 {
        let horizon = rng.random_range(0.5..=2.0);
        let lattice = BinaryLattice::new(horizon, depth)?;
        let base = nonneg_matrix(&mut rng, n, n, scale);
        let slope = nonneg_matrix(&mut rng, n, n, scale);
        let kernel: KernelFn = Arc::new(move |t, s, _| base.add(&slope.scale((t - s).cos().abs())).expect("same shape"));
        let phi = nonneg_vec(&mut rng, n, 1.0);
        let wobble = uniform_vec(&mut rng, n, 0.0, 1.0);
        let free: Vec<f64> = phi.clone();
        let phi_process = AdaptedProcess::from_fn(&lattice, n, |node, out| {
            let w = lattice.brownian(node);
            for d in 0..n {
                out[d] = free[d] * (1.0 + wobble[d] * w.sin()).max(0.0);
            }
        });
        let spec = FsvieSpec::new(n, FreeTerm::Adapted(phi_process)).with_drift_kernel(kernel);
        // Route without diffusion: only a nonnegative kernel and free term matter.
        let checked = super::hypotheses::hypotheses_for_forward(&spec, &lattice, 8)
            .restrict(&[ConditionKind::NonnegKernel, ConditionKind::FreeTermNonneg]);
        hypotheses.merge(&checked);
        return Ok(VolterraTrial {
            spec,
            lattice,
            hypotheses,
        });
    }
    let base = metzler_matrix(&mut rng, n, scale, scale);
    let slope = nonneg_matrix(&mut rng, n, n, scale);
    let diffusion = diagonal_matrix(&mut rng, n, scale);
    let drift_bound = base.max_abs() + 2.0 * slope.max_abs();
    let diffusion_bound = diffusion.max_abs();
    let step = 0.9 * positivity_step_bound(drift_bound, diffusion_bound).min(0.25) * rng.random_range(0.5..=1.0);
    let horizon = step * depth as f64;
    let lattice = BinaryLattice::new(horizon, depth)?;
    let kernel: KernelFn = Arc::new(move |t, s, _| base.add(&slope.scale((t - s) / horizon)).expect("same shape"));
    let phi0 = nonneg_vec(&mut rng, n, 1.0);
    let growth = nonneg_vec(&mut rng, n, 1.0);
    let free = FreeTerm::Deterministic(Arc::new(move |t, out| {
        for d in 0..out.len() {
            out[d] = phi0[d] + growth[d] * t;
        }
    }));
    let spec = FsvieSpec::new(n, free)
        .with_drift_kernel(kernel)
        .with_diffusion(DiffusionKernel::Separated(constant_matrix(diffusion)));
    hypotheses.merge(&super::hypotheses::hypotheses_for_forward(&spec, &lattice, 8));
    hypotheses.record(
        ConditionKind::StepBound,
        (step > positivity_step_bound(drift_bound, diffusion_bound)).then(|| format!("h = {step:.3e}")),
    );
    Ok(VolterraTrial {
        spec,
        lattice,
        hypotheses,
    })
}

// -------------------------------------------------------------- BSDEs

pub struct DualityTrial {
    pub spec: BsdeSpec,
    pub adjoint_start: Vec<f64>,
    pub start: usize,
    pub lattice: BinaryLattice,
}

/// Full `A(t)`; diagonal `B(t)` on even trials and `B = 0` on odd ones;
/// node-dependent forcing and a smooth random terminal value.
pub fn bsde_duality_trial(seed: u64, trial: usize, bounds: &FamilyBounds) -> Result<DualityTrial> {
    let mut rng = trial_rng(seed, trial);
    let n = bounds.max_dim.max(1);
    let depth = bounds.max_depth.max(1);
    let lattice = BinaryLattice::new(1.0, depth)?;
    let scale = bounds.coefficient_scale;
    let (a, a_slope) = (signed_matrix(&mut rng, n, n, scale), signed_matrix(&mut rng, n, n, scale));
    let b = if trial % 2 == 0 {
        diagonal_matrix(&mut rng, n, scale)
    } else {
        DenseMatrix::zeros(n, n)
    };
    let base = uniform_vec(&mut rng, n, -1.0, 1.0);
    let loading = uniform_vec(&mut rng, n, -1.0, 1.0);
    let lat = lattice.clone();
    let forcing: VectorFn = Arc::new(move |t, node, out| {
        let w = lat.brownian(node);
        for d in 0..out.len() {
            out[d] = base[d] * (1.0 + t) + loading[d] * w;
        }
    });
    let coefficients = LinearBsde {
        drift_matrix: affine_matrix(a, a_slope, 1.0),
        z_matrix: constant_matrix(b),
        forcing,
    };
    let terminal = random_leaf_field(&mut rng, &lattice, n);
    let spec = BsdeSpec::linear(n, terminal, coefficients, &lattice);
    let adjoint_start = uniform_vec(&mut rng, n, -1.0, 1.0);
    let start = rng.random_range(0..depth);
    Ok(DualityTrial {
        spec,
        adjoint_start,
        start,
        lattice,
    })
}

/// Shared random ingredients of the nonlinear comparison families:
/// `ybar = Gy y + Gz z + w tanh(y) + f`, bracketed by
/// `g0 = ybar - e0 - d0 y^2/(1+y^2)` and `g1 = ybar + e1 + d1 |z|`.
#[derive(Clone)]
struct Sandwich {
    gy: DenseMatrix,
    gy_slope: DenseMatrix,
    gz: Vec<f64>,
    squash: Vec<f64>,
    forcing: Vec<f64>,
    forcing_slope: Vec<f64>,
    lower_shift: Vec<f64>,
    lower_bend: Vec<f64>,
    upper_shift: Vec<f64>,
    upper_kink: Vec<f64>,
}

/// Largest slope of `y^2 / (1 + y^2)`.
const BEND_LIPSCHITZ: f64 = 0.65;

impl Sandwich {
    fn draw(rng: &mut ChaCha8Rng, n: usize, scale: f64, gy_nonneg: bool) -> Self {
        let gy = if gy_nonneg {
            nonneg_matrix(rng, n, n, scale)
        } else {
            metzler_matrix(rng, n, scale, scale)
        };
        let gy_slope = nonneg_matrix(rng, n, n, 0.5 * scale);
        let maybe_zero = |rng: &mut ChaCha8Rng, hi: f64| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..=hi) };
        Self {
            gy,
            gy_slope,
            gz: uniform_vec(rng, n, -scale, scale),
            squash: nonneg_vec(rng, n, scale),
            forcing: uniform_vec(rng, n, -1.0, 1.0),
            forcing_slope: uniform_vec(rng, n, -1.0, 1.0),
            lower_shift: (0..n).map(|_| maybe_zero(rng, 0.2)).collect(),
            lower_bend: (0..n).map(|_| maybe_zero(rng, 0.5)).collect(),
            upper_shift: (0..n).map(|_| maybe_zero(rng, 0.2)).collect(),
            upper_kink: (0..n).map(|_| maybe_zero(rng, 0.5)).collect(),
        }
    }

    /// `(time weight, forcing offset)` for the generator at `(t, s)`.
    fn comparator(&self, weight: f64, offset: f64, y: &[f64], z: &[f64], out: &mut [f64]) {
        let gy = self.gy.add(&self.gy_slope.scale(weight)).expect("same shape");
        gy.mul_vec_into(y, out);
        for d in 0..out.len() {
            out[d] += self.gz[d] * z[d] + self.squash[d] * y[d].tanh() + self.forcing[d] + self.forcing_slope[d] * offset;
        }
    }

    fn lower(&self, weight: f64, offset: f64, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.comparator(weight, offset, y, z, out);
        for d in 0..out.len() {
            out[d] -= self.lower_shift[d] + self.lower_bend[d] * y[d] * y[d] / (1.0 + y[d] * y[d]);
        }
    }

    fn upper(&self, weight: f64, offset: f64, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.comparator(weight, offset, y, z, out);
        for d in 0..out.len() {
            out[d] += self.upper_shift[d] + self.upper_kink[d] * z[d].abs();
        }
    }

    fn max_of(v: &[f64]) -> f64 {
        v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// `(L_y, L_z)` valid for all three generators.
    fn lipschitz(&self) -> (f64, f64) {
        let ly = self.gy.add(&self.gy_slope).expect("same shape").inf_norm()
            + Self::max_of(&self.squash)
            + BEND_LIPSCHITZ * Self::max_of(&self.lower_bend);
        let lz = Self::max_of(&self.gz) + Self::max_of(&self.upper_kink);
        (ly, lz)
    }

    /// Horizon keeping `h L_y <= 0.24` and `sqrt(h) L_z <= 0.9`, clear of the
    /// step bound after rounding.
    fn horizon_for(&self, depth: usize, wanted: f64) -> f64 {
        let (ly, lz) = self.lipschitz();
        let mut h = wanted / depth as f64;
        if ly > 0.0 {
            h = h.min(0.24 / ly);
        }
        if lz > 0.0 {
            h = h.min(0.81 / (lz * lz));
        }
        h * depth as f64
    }
}

pub struct BsdePair {
    pub lower: BsdeSpec,
    pub upper: BsdeSpec,
    pub lattice: BinaryLattice,
    pub hypotheses: HypothesisReport,
}

/// Two BSDEs bracketing a Metzler-in-y, diagonal-in-z comparator.
pub fn bsde_comparison_trial(seed: u64, trial: usize, bounds: &FamilyBounds) -> Result<BsdePair> {
    let mut rng = trial_rng(seed, trial);
    let n = draw_dim(&mut rng, bounds, 1);
    let depth = draw_depth(&mut rng, bounds);
    let sandwich = Arc::new(Sandwich::draw(&mut rng, n, bounds.coefficient_scale, false));
    let wanted = rng.random_range(0.5..=1.5);
    let horizon = sandwich.horizon_for(depth, wanted);
    let lattice = BinaryLattice::new(horizon, depth)?;
    let lower_terminal = random_leaf_field(&mut rng, &lattice, n);
    let gap = random_nonneg_leaf_field(&mut rng, &lattice, n, 0.3);
    let upper_terminal: Vec<f64> = lower_terminal.iter().zip(&gap).map(|(a, b)| a + b).collect();
    let (ly, lz) = sandwich.lipschitz();
    let sw = sandwich.clone();
    let lower: BsdeGenerator = Arc::new(move |t, y, z, _, out| sw.lower(t / horizon, t, y, z, out));
    let sw = sandwich.clone();
    let upper: BsdeGenerator = Arc::new(move |t, y, z, _, out| sw.upper(t / horizon, t, y, z, out));
    let mut hypotheses = HypothesisReport::new();
    let grid: Vec<(f64, f64)> = (0..depth).map(|k| (lattice.time(k) / horizon, lattice.time(k))).collect();
    check_sandwich(&mut hypotheses, &sandwich, &grid, n, &mut rng, false);
    hypotheses.record(
        ConditionKind::DataOrdered,
        gap.iter().any(|&g| g < 0.0).then(|| "terminal values out of order".to_string()),
    );
    record_step_bound(&mut hypotheses, &lattice, ly, lz);
    Ok(BsdePair {
        lower: BsdeSpec::new(n, lower_terminal, lower).with_lipschitz(ly, lz),
        upper: BsdeSpec::new(n, upper_terminal, upper).with_lipschitz(ly, lz),
        lattice,
        hypotheses,
    })
}

fn record_step_bound(report: &mut HypothesisReport, lattice: &BinaryLattice, ly: f64, lz: f64) {
    let h = lattice.step();
    report.record(
        ConditionKind::StepBound,
        (h * ly > 0.25 || lattice.sqrt_step() * lz > 1.0)
            .then(|| format!("h*L_y = {:.3e}, sqrt(h)*L_z = {:.3e}", h * ly, lattice.sqrt_step() * lz)),
    );
}

/// Samples `(y, z)` points at each grid pair and checks the bracket, the
/// comparator's Jacobian structure and (optionally) its monotonicity in y.
fn check_sandwich(
    report: &mut HypothesisReport,
    sandwich: &Sandwich,
    grid: &[(f64, f64)],
    n: usize,
    rng: &mut ChaCha8Rng,
    needs_monotone_y: bool,
) {
    const SAMPLES: usize = 4;
    const BUMP: f64 = 1e-3;
    let mut bracket = None;
    let mut metzler = None;
    let mut monotone = None;
    let mut diagonal = None;
    let (mut lo, mut mid, mut hi) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut bumped = vec![0.0; n];
    for &(weight, offset) in grid {
        for _ in 0..SAMPLES {
            let y = uniform_vec(rng, n, -3.0, 3.0);
            let z = uniform_vec(rng, n, -3.0, 3.0);
            sandwich.lower(weight, offset, &y, &z, &mut lo);
            sandwich.comparator(weight, offset, &y, &z, &mut mid);
            sandwich.upper(weight, offset, &y, &z, &mut hi);
            if bracket.is_none() && (0..n).any(|d| lo[d] > mid[d] || mid[d] > hi[d]) {
                bracket = Some(format!("y={y:?} z={z:?}"));
            }
            for j in 0..n {
                let mut yb = y.clone();
                yb[j] += BUMP;
                sandwich.comparator(weight, offset, &yb, &z, &mut bumped);
                for i in 0..n {
                    let rise = bumped[i] - mid[i];
                    if i != j && rise < 0.0 && metzler.is_none() {
                        metzler = Some(format!("d g_{i} / d y_{j} < 0 at y={y:?}"));
                    }
                    if rise < 0.0 && monotone.is_none() {
                        monotone = Some(format!("g_{i} decreases in y_{j} at y={y:?}"));
                    }
                }
                let mut zb = z.clone();
                zb[j] += BUMP;
                sandwich.comparator(weight, offset, &y, &zb, &mut bumped);
                if diagonal.is_none() && (0..n).any(|i| i != j && bumped[i] != mid[i]) {
                    diagonal = Some(format!("g depends on z_{j} off the diagonal"));
                }
            }
        }
    }
    report.record(ConditionKind::GeneratorSandwich, bracket);
    report.record(ConditionKind::Diagonal, diagonal);
    if needs_monotone_y {
        report.record(ConditionKind::NondecreasingSelection, monotone);
    } else {
        report.record(ConditionKind::Metzler, metzler);
    }
}

// -------------------------------------------------------------- BSVIEs

/// Two BSVIEs and a comparator between them.
pub struct BsvieTriple {
    pub lower: BsvieSpec,
    pub upper: BsvieSpec,
    pub comparator: BsvieSpec,
    pub lattice: BinaryLattice,
    pub hypotheses: HypothesisReport,
}

/// Generators `g(t, s, y, z)` bracketing a comparator nondecreasing in y
/// with diagonal z-dependence; leaf-measurable free terms
/// `psi0 <= psi_bar <= psi1`.
pub fn bsvie_comparison_trial(seed: u64, trial: usize, bounds: &FamilyBounds) -> Result<BsvieTriple> {
    let mut rng = trial_rng(seed, trial);
    let n = draw_dim(&mut rng, bounds, 1);
    let depth = draw_depth(&mut rng, bounds);
    let sandwich = Arc::new(Sandwich::draw(&mut rng, n, bounds.coefficient_scale, true));
    let wanted = rng.random_range(0.5..=1.5);
    let horizon = sandwich.horizon_for(depth, wanted);
    let lattice = BinaryLattice::new(horizon, depth)?;
    let lower_leaves: Vec<Vec<f64>> = (0..=depth).map(|_| random_leaf_field(&mut rng, &lattice, n)).collect();
    let gaps: Vec<Vec<f64>> = (0..=depth).map(|_| random_nonneg_leaf_field(&mut rng, &lattice, n, 0.3)).collect();
    let theta = rng.random_range(0.0..=1.0);
    let field = |share: f64| {
        TerminalField::from_fn(&lattice, n, |i, leaf, out| {
            let at = leaf.path as usize * n;
            for d in 0..n {
                out[d] = lower_leaves[i][at + d] + share * gaps[i][at + d];
            }
        })
    };
    let (ly, lz) = sandwich.lipschitz();
    let make = |which: u8, psi: TerminalField| {
        let sw = sandwich.clone();
        let generator: BsvieGenerator = Arc::new(move |a, out| {
            let (weight, offset) = (a.t / horizon, a.s - a.t);
            match which {
                0 => sw.lower(weight, offset, a.y, a.z, out),
                1 => sw.comparator(weight, offset, a.y, a.z, out),
                _ => sw.upper(weight, offset, a.y, a.z, out),
            }
        });
        BsvieSpec::new(psi, generator).with_lipschitz(ly, lz, 0.0)
    };
    let mut hypotheses = HypothesisReport::new();
    let grid: Vec<(f64, f64)> = (0..depth)
        .flat_map(|i| (i..depth).map(move |k| (i, k)))
        .map(|(i, k)| (lattice.time(i) / horizon, lattice.time(k) - lattice.time(i)))
        .collect();
    check_sandwich(&mut hypotheses, &sandwich, &grid, n, &mut rng, true);
    hypotheses.record(
        ConditionKind::DataOrdered,
        gaps.iter().flatten().any(|&g| g < 0.0).then(|| "free terms out of order".to_string()),
    );
    record_step_bound(&mut hypotheses, &lattice, ly, lz);
    Ok(BsvieTriple {
        lower: make(0, field(0.0)),
        comparator: make(1, field(theta)),
        upper: make(2, field(1.0)),
        lattice,
        hypotheses,
    })
}

/// Step-function linear equation satisfying the positivity hypotheses:
/// Metzler `A_M`, `A_{m-1} = A_m + nonneg`, diagonal `B`, and
/// `psi_{m-1} = psi_m + nonneg` with `psi_M >= 0.1`.
pub fn stepfn_trial(seed: u64, trial: usize, bounds: &FamilyBounds) -> Result<(StepFnBsvie, BinaryLattice)> {
    let mut rng = trial_rng(seed, trial);
    let n = draw_dim(&mut rng, bounds, 1);
    let depth = draw_depth(&mut rng, bounds);
    let intervals = rng.random_range(1..=4.min(depth));
    let mut cuts: Vec<usize> = (1..depth).collect();
    let mut partition = vec![0, depth];
    for _ in 1..intervals {
        let at = rng.random_range(0..cuts.len());
        partition.push(cuts.swap_remove(at));
    }
    partition.sort_unstable();
    let scale = bounds.coefficient_scale;
    let last = metzler_matrix(&mut rng, n, scale, scale);
    let mut drifts = vec![last];
    for _ in 1..intervals {
        let bump = nonneg_matrix(&mut rng, n, n, 0.5 * scale);
        let next = drifts.last().expect("nonempty").add(&bump).expect("same shape");
        drifts.push(next);
    }
    drifts.reverse();
    let b = diagonal_matrix(&mut rng, n, scale);
    let la = drifts.iter().map(DenseMatrix::inf_norm).fold(0.0, f64::max);
    let lb = b.max_abs();
    let mut h = rng.random_range(0.5..=1.5) / depth as f64;
    if la > 0.0 {
        h = h.min(0.24 / la);
    }
    if lb > 0.0 {
        h = h.min(0.81 / (lb * lb));
    }
    let lattice = BinaryLattice::new(h * depth as f64, depth)?;
    let floor: Vec<f64> = random_nonneg_leaf_field(&mut rng, &lattice, n, 1.0).iter().map(|v| v + 0.1).collect();
    let mut free_terms = vec![floor];
    for _ in 1..intervals {
        let bump = random_nonneg_leaf_field(&mut rng, &lattice, n, 0.5);
        let next: Vec<f64> = free_terms.last().expect("nonempty").iter().zip(&bump).map(|(a, b)| a + b).collect();
        free_terms.push(next);
    }
    free_terms.reverse();
    let data = StepFnBsvie {
        dim: n,
        partition,
        drift_matrices: drifts.into_iter().map(constant_matrix).collect(),
        z_matrix: constant_matrix(b),
        free_terms,
    };
    Ok((data, lattice))
}

/// Structured pair `g^i = h^i(t, s, y) + B(s) z` (or `+ C(t) zeta`), with
/// `h^0 = A(t, s) y + f` linear, `A = M + (s - t) P`, and
/// `h^1 = h^0 + w(t) u(y)` for `w >= 0` nonincreasing and `0 <= u <= 1`.
pub struct StructuredPair {
    pub lower: BsvieSpec,
    pub upper: BsvieSpec,
    pub lattice: BinaryLattice,
    pub hypotheses: HypothesisReport,
}

/// Which form of the structured pair to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coupling {
    /// `B(s) z` with the adapted family solver.
    Diagonal,
    /// `C(t) zeta` with M-solutions; free-term difference constant in time
    /// and concentrated on down paths, with a large `C`.
    Transposed,
}

pub fn structured_trial(seed: u64, trial: usize, bounds: &FamilyBounds, coupling: Coupling) -> Result<StructuredPair> {
    let mut rng = trial_rng(seed, trial);
    let n = draw_dim(&mut rng, bounds, 1);
    let depth = draw_depth(&mut rng, bounds);
    let scale = bounds.coefficient_scale;
    let m = metzler_matrix(&mut rng, n, scale, scale);
    let p = nonneg_matrix(&mut rng, n, n, 0.5 * scale);
    let forcing = uniform_vec(&mut rng, n, -1.0, 1.0);
    let weight0 = nonneg_vec(&mut rng, n, scale);
    let weight_decay = rng.random_range(0.0..=1.0);
    let coupling_scale = match coupling {
        Coupling::Diagonal => scale,
        Coupling::Transposed if trial % 4 == 0 => 3.0 * scale.max(1.0),
        Coupling::Transposed => scale,
    };
    let coupling_matrix = DenseMatrix::from_diagonal(
        &(0..n)
            .map(|_| match coupling {
                Coupling::Diagonal => rng.random_range(-coupling_scale..=coupling_scale),
                Coupling::Transposed => rng.random_range(0.5 * coupling_scale..=coupling_scale),
            })
            .collect::<Vec<_>>(),
    );
    let la = m.inf_norm() + p.inf_norm() * 2.0 + Sandwich::max_of(&weight0);
    let lc = coupling_matrix.max_abs();
    let mut h = rng.random_range(0.5..=1.0) / depth as f64;
    if la > 0.0 {
        h = h.min(0.24 / la);
    }
    if lc > 0.0 {
        h = h.min(0.81 / (lc * lc));
    }
    let horizon = h * depth as f64;
    let lattice = BinaryLattice::new(horizon, depth)?;
    let kernel = {
        let (m, p) = (m.clone(), p.clone());
        move |t: f64, s: f64| m.add(&p.scale((s - t) / horizon)).expect("same shape")
    };
    let kernel = Arc::new(kernel);
    let lower_leaves: Vec<Vec<f64>> = (0..=depth).map(|_| random_leaf_field(&mut rng, &lattice, n)).collect();
    let gap: Vec<f64> = match coupling {
        Coupling::Diagonal => random_nonneg_leaf_field(&mut rng, &lattice, n, 0.5),
        Coupling::Transposed => {
            let heights = nonneg_vec(&mut rng, n, 1.0);
            lattice
                .nodes(depth)
                .flat_map(|leaf| {
                    let down = lattice.brownian(leaf) < 0.0;
                    heights.iter().map(move |&a| if down { a.max(0.2) } else { 0.0 }).collect::<Vec<_>>()
                })
                .collect()
        }
    };
    let gap_decay = match coupling {
        Coupling::Diagonal => rng.random_range(0.0..=1.0),
        Coupling::Transposed => 0.0,
    };
    let lower_psi = TerminalField::from_fn(&lattice, n, |i, leaf, out| {
        out.copy_from_slice(&lower_leaves[i][leaf.path as usize * n..][..n]);
    });
    let upper_psi = TerminalField::from_fn(&lattice, n, |i, leaf, out| {
        let shrink = 1.0 - gap_decay * lattice.time(i) / horizon;
        for d in 0..n {
            let at = leaf.path as usize * n + d;
            out[d] = lower_leaves[i][at] + shrink * gap[at];
        }
    });
    let build = |upper: bool, psi: TerminalField| {
        let kernel = kernel.clone();
        let forcing = forcing.clone();
        let weight0 = weight0.clone();
        let cm = coupling_matrix.clone();
        let generator: BsvieGenerator = Arc::new(move |a, out| {
            kernel(a.t, a.s).mul_vec_into(a.y, out);
            for d in 0..out.len() {
                out[d] += forcing[d];
                if upper {
                    let w = weight0[d] * (1.0 - weight_decay * a.t / horizon);
                    out[d] += w * 0.5 * (1.0 + a.y[d].tanh());
                }
            }
            match coupling {
                Coupling::Diagonal => cm.mul_vec_acc(a.z, 1.0, out),
                Coupling::Transposed => cm.mul_vec_acc(a.zeta, 1.0, out),
            }
        });
        let spec = BsvieSpec::new(psi, generator).with_lipschitz(la, 0.0, 0.0);
        match coupling {
            Coupling::Diagonal => spec.with_lipschitz(la, lc, 0.0),
            Coupling::Transposed => spec.with_dependencies(false, true).with_lipschitz(la, 0.0, lc),
        }
    };
    let lower = build(false, lower_psi.clone());
    let upper = build(true, upper_psi.clone());

    let mut hypotheses = HypothesisReport::new();
    let pairs: Vec<(usize, usize)> = (0..depth).flat_map(|i| (i..depth).map(move |k| (i, k))).collect();
    hypotheses.scan_lazy(
        ConditionKind::Metzler,
        pairs.iter().map(|&(i, k)| {
            let (t, s) = (lattice.time(i), lattice.time(k));
            (is_metzler(&kernel(t, s), 0.0).unwrap_or(false), move || format!("A(t={t:.6}, s={s:.6})"))
        }),
    );
    // Consecutive outer times suffice for monotonicity in t; for M-solutions
    // the kernel must also be nondecreasing in its second argument.
    let mut monotone: Vec<(bool, String)> = Vec::new();
    for &(i, k) in &pairs {
        if i < k {
            let (t, tau, s) = (lattice.time(i), lattice.time(i + 1), lattice.time(k));
            let ok = kernel(t, s).sub(&kernel(tau, s)).map(|d| is_nonneg(&d, 0.0)).unwrap_or(false);
            monotone.push((ok, format!("A(t={t:.6}, s) - A(tau={tau:.6}, s) at s={s:.6}")));
        }
        if coupling == Coupling::Transposed && k + 1 < depth {
            let (s, t, tau) = (lattice.time(i), lattice.time(k), lattice.time(k + 1));
            let ok = kernel(s, tau).sub(&kernel(s, t)).map(|d| is_nonneg(&d, 0.0)).unwrap_or(false);
            monotone.push((ok, format!("A(s={s:.6}, tau={tau:.6}) - A(s, t={t:.6})")));
        }
    }
    hypotheses.scan(ConditionKind::KernelTimeMonotone, monotone);
    hypotheses.record(
        ConditionKind::Diagonal,
        (!is_diagonal(&coupling_matrix, 0.0).unwrap_or(false)).then(|| "coupling matrix".to_string()),
    );
    if coupling == Coupling::Transposed {
        hypotheses.record(ConditionKind::SeparatedCoefficient, None);
    }
    // h1 - h0 = w(t) u(y) with u in [0, 1]: nonnegative and nonincreasing in t
    // iff w is, which the grid scan checks.
    hypotheses.scan_lazy(
        ConditionKind::DifferenceMonotone,
        (0..=depth).map(|i| {
            let t = lattice.time(i);
            let next = lattice.time((i + 1).min(depth));
            let ok = weight0.iter().all(|&w0| {
                let now = w0 * (1.0 - weight_decay * t / horizon);
                let later = w0 * (1.0 - weight_decay * next / horizon);
                now >= later && later >= 0.0
            });
            (ok, move || format!("generator difference at t={t:.6}"))
        }),
    );
    hypotheses.scan_lazy(
        ConditionKind::FreeTermMonotone,
        (0..depth).flat_map(|i| {
            let (lo, up) = (&lower_psi, &upper_psi);
            let lat = &lattice;
            lat.nodes(depth).map(move |leaf| {
                let ok = (0..n).all(|d| {
                    let now = up.value(i, leaf)[d] - lo.value(i, leaf)[d];
                    let later = up.value(i + 1, leaf)[d] - lo.value(i + 1, leaf)[d];
                    now >= later - 1e-15 && later >= -1e-15
                });
                (ok, move || format!("free-term difference at t index {i}, {leaf}"))
            })
        }),
    );
    record_step_bound(&mut hypotheses, &lattice, la, lc);
    Ok(StructuredPair {
        lower,
        upper,
        lattice,
        hypotheses,
    })
}

/// Linear M-solution equation `A(t, s) y + C(t) zeta` with `A = M + (s - t) P`,
/// diagonal `C` and `psi >= 0` leaf-measurable; plus a nonnegative weight
/// process for the duality pairing.
pub struct MSolutionTrial {
    pub equation: LinearMBsvie,
    pub lattice: BinaryLattice,
    pub hypotheses: HypothesisReport,
}

pub fn msolution_positivity_trial(seed: u64, trial: usize, bounds: &FamilyBounds) -> Result<MSolutionTrial> {
    let mut rng = trial_rng(seed, trial);
    let n = draw_dim(&mut rng, bounds, 1);
    let depth = draw_depth(&mut rng, bounds);
    let scale = bounds.coefficient_scale;
    let m = metzler_matrix(&mut rng, n, scale, scale);
    let p = nonneg_matrix(&mut rng, n, n, 0.5 * scale);
    let c = diagonal_matrix(&mut rng, n, 2.0 * scale);
    let la = m.inf_norm() + 2.0 * p.inf_norm();
    let lc = c.max_abs();
    let mut h = rng.random_range(0.5..=1.0) / depth as f64;
    if la > 0.0 {
        h = h.min(0.24 / la);
    }
    if lc > 0.0 {
        h = h.min(0.81 / (lc * lc));
    }
    let horizon = h * depth as f64;
    let lattice = BinaryLattice::new(horizon, depth)?;
    let leaves: Vec<Vec<f64>> = (0..=depth).map(|_| random_nonneg_leaf_field(&mut rng, &lattice, n, 1.0)).collect();
    let free_term = TerminalField::from_fn(&lattice, n, |i, leaf, out| {
        out.copy_from_slice(&leaves[i][leaf.path as usize * n..][..n]);
    });
    let (mk, pk) = (m.clone(), p.clone());
    let kernel: KernelFn = Arc::new(move |t, s, _| mk.add(&pk.scale((s - t) / horizon)).expect("same shape"));
    let equation = LinearMBsvie {
        dim: n,
        free_term,
        kernel: kernel.clone(),
        zeta_matrix: constant_matrix(c),
    };
    let mut hypotheses = super::hypotheses::hypotheses_for_msolution(&equation, &lattice, 8);
    record_step_bound(&mut hypotheses, &lattice, la, lc);
    Ok(MSolutionTrial {
        equation,
        lattice,
        hypotheses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds() -> FamilyBounds {
        FamilyBounds {
            max_dim: 3,
            max_depth: 6,
            coefficient_scale: 1.0,
        }
    }

    #[test]
    fn trials_are_reproducible_per_stream() {
        let a = cone_matrix(5, 17, 4);
        let b = cone_matrix(5, 17, 4);
        assert_eq!(a, b);
        let c = cone_matrix(5, 18, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn constructed_families_satisfy_their_hypotheses() {
        for trial in 0..10 {
            let f = forward_positivity_trial(3, trial, &bounds()).unwrap();
            assert!(f.hypotheses.all_satisfied(), "{}", f.hypotheses);
            let b = bsde_comparison_trial(3, trial, &bounds()).unwrap();
            assert!(b.hypotheses.all_satisfied(), "{}", b.hypotheses);
            let v = bsvie_comparison_trial(3, trial, &bounds()).unwrap();
            assert!(v.hypotheses.all_satisfied(), "{}", v.hypotheses);
            for coupling in [Coupling::Diagonal, Coupling::Transposed] {
                let s = structured_trial(3, trial, &bounds(), coupling).unwrap();
                assert!(s.hypotheses.all_satisfied(), "{}", s.hypotheses);
            }
            let (data, lattice) = stepfn_trial(3, trial, &bounds()).unwrap();
            assert!(data.preconditions(&lattice).iter().all(|p| p.satisfied));
        }
    }

    #[test]
    fn metzler_sampler_respects_the_cone() {
        let mut rng = trial_rng(1, 0);
        for _ in 0..50 {
            let m = metzler_matrix(&mut rng, 3, 1.0, 1.0);
            assert!(is_metzler(&m, 0.0).unwrap());
        }
    }
}
