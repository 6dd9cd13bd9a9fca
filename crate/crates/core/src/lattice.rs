//! A binary scenario tree for one Brownian motion on `[0, T]`.
//!
//! Level `k` holds `2^k` equally likely nodes addressed by a path bitmask
//! (bit 1 = up move, most recent move in the lowest bit). Every process is
//! stored as level-indexed dense arrays, so adaptedness holds by shape.
//!
//! A degenerate variant with a single node per level and zero increments
//! runs the same solvers on a purely deterministic grid of large depth.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Default maximum depth of a branching lattice.
pub const DEFAULT_MAX_DEPTH: usize = 16;
/// Maximum depth of a degenerate (deterministic) lattice.
pub const MAX_DETERMINISTIC_DEPTH: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub level: usize,
    pub path: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Up,
    Down,
}

impl NodeId {
    pub const ROOT: NodeId = NodeId { level: 0, path: 0 };

    pub fn new(level: usize, path: u64) -> Self {
        Self { level, path }
    }

    /// Ancestor at `level` (the node itself when `level == self.level`).
    pub fn ancestor(self, level: usize) -> NodeId {
        assert!(level <= self.level, "ancestor level {level} below node level {}", self.level);
        let shift = (self.level - level) as u32;
        NodeId {
            level,
            path: self.path.checked_shr(shift).unwrap_or(0),
        }
    }

    pub fn parent(self) -> Option<NodeId> {
        (self.level > 0).then(|| self.ancestor(self.level - 1))
    }

    /// The move that led into this node.
    pub fn last_branch(self) -> Option<Branch> {
        (self.level > 0).then_some(if self.path & 1 == 1 { Branch::Up } else { Branch::Down })
    }

    /// Number of up moves on the path to this node.
    pub fn up_moves(self) -> u32 {
        self.path.count_ones()
    }

    /// Path as a string of `U`/`D` moves, oldest first.
    pub fn moves(self) -> String {
        (0..self.level)
            .rev()
            .map(|b| {
                if b < 64 && (self.path >> b) & 1 == 1 {
                    'U'
                } else {
                    'D'
                }
            })
            .collect()
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node(level {}, path {:#b})", self.level, self.path)
    }
}

/// Exact dyadic rational `numerator / 2^exponent`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dyadic {
    pub numerator: u64,
    pub exponent: u32,
}

impl Dyadic {
    pub const ZERO: Dyadic = Dyadic {
        numerator: 0,
        exponent: 0,
    };

    pub fn new(numerator: u64, exponent: u32) -> Self {
        let mut d = Dyadic { numerator, exponent };
        while d.exponent > 0 && d.numerator % 2 == 0 {
            d.numerator /= 2;
            d.exponent -= 1;
        }
        if d.numerator == 0 {
            d.exponent = 0;
        }
        d
    }

    pub fn to_f64(self) -> f64 {
        self.numerator as f64 / 2f64.powi(self.exponent as i32)
    }
}

impl PartialOrd for Dyadic {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dyadic {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let e = self.exponent.max(other.exponent);
        let a = (self.numerator as u128) << (e - self.exponent);
        let b = (other.numerator as u128) << (e - other.exponent);
        a.cmp(&b)
    }
}

impl fmt::Display for Dyadic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/2^{}", self.numerator, self.exponent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryLattice {
    horizon: f64,
    depth: usize,
    step: f64,
    sqrt_step: f64,
    degenerate: bool,
}

impl BinaryLattice {
    pub fn new(horizon: f64, depth: usize) -> Result<Self> {
        Self::with_max_depth(horizon, depth, DEFAULT_MAX_DEPTH)
    }

    pub fn with_max_depth(horizon: f64, depth: usize, max_depth: usize) -> Result<Self> {
        if max_depth > 63 {
            return Err(LabError::Argument(format!(
                "branching depth cap {max_depth} exceeds the 63-level path encoding"
            )));
        }
        Self::build(horizon, depth, max_depth, false)
    }

    /// A one-node-per-level grid with zero Brownian increments.
    pub fn deterministic(horizon: f64, depth: usize) -> Result<Self> {
        Self::build(horizon, depth, MAX_DETERMINISTIC_DEPTH, true)
    }

    fn build(horizon: f64, depth: usize, max_depth: usize, degenerate: bool) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(LabError::Argument(format!("horizon must be positive, got {horizon}")));
        }
        if depth == 0 || depth > max_depth {
            return Err(LabError::Argument(format!(
                "depth must lie in 1..={max_depth}, got {depth}"
            )));
        }
        let step = horizon / depth as f64;
        Ok(Self {
            horizon,
            depth,
            step,
            sqrt_step: step.sqrt(),
            degenerate,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn sqrt_step(&self) -> f64 {
        self.sqrt_step
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Number of children per node.
    pub fn fanout(&self) -> usize {
        if self.degenerate {
            1
        } else {
            2
        }
    }

    /// Grid time `t_k`; exact at both ends.
    pub fn time(&self, level: usize) -> f64 {
        if level == self.depth {
            self.horizon
        } else {
            self.horizon * level as f64 / self.depth as f64
        }
    }

    pub fn level_len(&self, level: usize) -> usize {
        if self.degenerate {
            1
        } else {
            1 << level
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.level_len(self.depth)
    }

    pub fn nodes(&self, level: usize) -> impl Iterator<Item = NodeId> {
        (0..self.level_len(level) as u64).map(move |path| NodeId { level, path })
    }

    pub fn child(&self, node: NodeId, branch: Branch) -> Result<NodeId> {
        self.check_interior(node)?;
        let path = if self.degenerate {
            0
        } else {
            (node.path << 1) | u64::from(branch == Branch::Up)
        };
        Ok(NodeId {
            level: node.level + 1,
            path,
        })
    }

    /// Index range of the children of the node at `index` inside the next
    /// level's array.
    pub fn children(&self, index: usize) -> std::ops::Range<usize> {
        let f = self.fanout();
        index * f..index * f + f
    }

    /// Brownian increment of one step out of `node`.
    pub fn increment(&self, node: NodeId, branch: Branch) -> Result<f64> {
        self.check_interior(node)?;
        Ok(self.signed_increment(branch))
    }

    fn signed_increment(&self, branch: Branch) -> f64 {
        match (self.degenerate, branch) {
            (true, _) => 0.0,
            (false, Branch::Up) => self.sqrt_step,
            (false, Branch::Down) => -self.sqrt_step,
        }
    }

    /// Increment of the step that ended at `node`.
    pub fn increment_into(&self, node: NodeId) -> f64 {
        node.last_branch().map_or(0.0, |b| self.signed_increment(b))
    }

    /// Discrete Brownian value `W(t_k)` at the node.
    pub fn brownian(&self, node: NodeId) -> f64 {
        if self.degenerate {
            0.0
        } else {
            self.sqrt_step * (2.0 * f64::from(node.up_moves()) - node.level as f64)
        }
    }

    /// Probability of a single node at `level`.
    pub fn node_probability(&self, level: usize) -> Dyadic {
        if self.degenerate {
            Dyadic::new(1, 0)
        } else {
            Dyadic::new(1, level as u32)
        }
    }

    fn check_interior(&self, node: NodeId) -> Result<()> {
        if node.level >= self.depth {
            return Err(LabError::OutOfHorizon {
                level: node.level,
                depth: self.depth,
            });
        }
        Ok(())
    }

    fn check_slice(&self, values: &[f64], level: usize, dim: usize) -> Result<()> {
        if level > self.depth {
            return Err(LabError::OutOfHorizon {
                level,
                depth: self.depth,
            });
        }
        let expected = self.level_len(level) * dim;
        if values.len() != expected {
            return Err(LabError::IncompleteProcess(format!(
                "level {level} holds {} values, expected {expected}",
                values.len()
            )));
        }
        Ok(())
    }
}

/// Conditional expectation at `node` (level `k`) of a level-`k+1` field.
pub fn conditional_expectation(
    lattice: &BinaryLattice,
    next: &[f64],
    dim: usize,
    node: NodeId,
) -> Result<Vec<f64>> {
    lattice.check_interior(node)?;
    lattice.check_slice(next, node.level + 1, dim)?;
    let mut out = vec![0.0; dim];
    average_children(lattice, next, dim, node.path as usize, &mut out);
    Ok(out)
}

pub(crate) fn average_children(
    lattice: &BinaryLattice,
    next: &[f64],
    dim: usize,
    index: usize,
    out: &mut [f64],
) {
    let kids = lattice.children(index);
    if kids.len() == 1 {
        out.copy_from_slice(&next[kids.start * dim..kids.end * dim]);
    } else {
        let down = &next[kids.start * dim..(kids.start + 1) * dim];
        let up = &next[(kids.start + 1) * dim..kids.end * dim];
        for ((o, u), d) in out.iter_mut().zip(up).zip(down) {
            *o = 0.5 * (u + d);
        }
    }
}

/// Martingale-representation integrand `(up - down) / (2 sqrt(h))` at the node
/// with array index `index`.
pub(crate) fn children_slope(
    lattice: &BinaryLattice,
    next: &[f64],
    dim: usize,
    index: usize,
    out: &mut [f64],
) {
    let kids = lattice.children(index);
    if kids.len() == 1 {
        out.fill(0.0);
    } else {
        let down = &next[kids.start * dim..(kids.start + 1) * dim];
        let up = &next[(kids.start + 1) * dim..kids.end * dim];
        let scale = 0.5 / lattice.sqrt_step();
        for ((o, u), d) in out.iter_mut().zip(up).zip(down) {
            *o = (u - d) * scale;
        }
    }
}

/// Maps a level-`k+1` field to its conditional expectation on level `k`.
pub fn condition_level(lattice: &BinaryLattice, next: &[f64], level: usize, dim: usize) -> Result<Vec<f64>> {
    lattice.check_slice(next, level + 1, dim)?;
    let mut out = vec![0.0; lattice.level_len(level) * dim];
    for (index, chunk) in out.chunks_mut(dim).enumerate() {
        average_children(lattice, next, dim, index, chunk);
    }
    Ok(out)
}

/// Conditional expectation of a level-`from` field on the coarser level `to`.
pub fn condition_to(
    lattice: &BinaryLattice,
    values: &[f64],
    from: usize,
    to: usize,
    dim: usize,
) -> Result<Vec<f64>> {
    if to > from {
        return Err(LabError::Argument(format!("cannot condition level {from} on finer level {to}")));
    }
    lattice.check_slice(values, from, dim)?;
    let mut current = values.to_vec();
    for level in (to..from).rev() {
        current = condition_level(lattice, &current, level, dim)?;
    }
    Ok(current)
}

/// Unconditional mean of a level field.
pub fn expectation(lattice: &BinaryLattice, values: &[f64], level: usize, dim: usize) -> Result<Vec<f64>> {
    condition_to(lattice, values, level, 0, dim)
}

/// Storage for an `R^dim`-valued adapted process, populated from
/// `first_level` through the lattice depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptedProcess {
    dim: usize,
    first_level: usize,
    levels: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn zeros(lattice: &BinaryLattice, dim: usize) -> Self {
        Self::zeros_from(lattice, dim, 0)
    }

    pub fn zeros_from(lattice: &BinaryLattice, dim: usize, first_level: usize) -> Self {
        assert!(dim > 0, "process dimension must be positive");
        let levels = (0..=lattice.depth())
            .map(|k| {
                if k >= first_level {
                    vec![0.0; lattice.level_len(k) * dim]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self {
            dim,
            first_level,
            levels,
        }
    }

    pub fn from_fn(
        lattice: &BinaryLattice,
        dim: usize,
        mut f: impl FnMut(NodeId, &mut [f64]),
    ) -> Self {
        let mut p = Self::zeros(lattice, dim);
        for k in 0..=lattice.depth() {
            for (index, chunk) in p.levels[k].chunks_mut(dim).enumerate() {
                f(NodeId::new(k, index as u64), chunk);
            }
        }
        p
    }

    /// Builds a process from explicit level arrays.
    pub fn from_levels(lattice: &BinaryLattice, dim: usize, first_level: usize, levels: Vec<Vec<f64>>) -> Result<Self> {
        if levels.len() != lattice.depth() + 1 {
            return Err(LabError::Dimension(format!(
                "{} level arrays for a depth-{} lattice",
                levels.len(),
                lattice.depth()
            )));
        }
        for (k, values) in levels.iter().enumerate().skip(first_level) {
            lattice.check_slice(values, k, dim)?;
        }
        Ok(Self {
            dim,
            first_level,
            levels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn first_level(&self) -> usize {
        self.first_level
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn is_populated(&self, level: usize) -> bool {
        level >= self.first_level && level < self.levels.len()
    }

    pub fn level(&self, level: usize) -> &[f64] {
        &self.levels[level]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut [f64] {
        &mut self.levels[level]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    /// Level `k` mutably together with level `k + 1` immutably.
    pub fn level_and_next_mut(&mut self, k: usize) -> (&mut [f64], &[f64]) {
        let (before, rest) = self.levels.split_at_mut(k + 1);
        (&mut before[k], &rest[0])
    }

    /// Earlier levels immutably together with level `k` mutably.
    pub fn split_at_level(&mut self, k: usize) -> (&[Vec<f64>], &mut [f64]) {
        let (before, rest) = self.levels.split_at_mut(k);
        (before, &mut rest[0])
    }

    /// Value at a node. Panics if the node's level is not populated.
    pub fn value(&self, node: NodeId) -> &[f64] {
        assert!(self.is_populated(node.level), "{node} lies outside the populated levels");
        let start = node.path as usize * self.dim;
        &self.levels[node.level][start..start + self.dim]
    }

    pub fn value_mut(&mut self, node: NodeId) -> &mut [f64] {
        assert!(self.is_populated(node.level), "{node} lies outside the populated levels");
        let start = node.path as usize * self.dim;
        &mut self.levels[node.level][start..start + self.dim]
    }

    pub fn get(&self, node: NodeId) -> Option<&[f64]> {
        self.is_populated(node.level).then(|| self.value(node))
    }

    /// Iterates over `(node, value)` pairs of populated levels.
    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &[f64])> + '_ {
        self.levels
            .iter()
            .enumerate()
            .skip(self.first_level)
            .flat_map(move |(k, values)| {
                values
                    .chunks(self.dim)
                    .enumerate()
                    .map(move |(p, v)| (NodeId::new(k, p as u64), v))
            })
    }

    pub fn min_value(&self) -> f64 {
        self.iter().flat_map(|(_, v)| v.iter().copied()).fold(f64::INFINITY, f64::min)
    }

    /// Largest absolute componentwise difference over commonly populated levels.
    pub fn max_abs_diff(&self, other: &AdaptedProcess) -> f64 {
        let first = self.first_level.max(other.first_level);
        self.levels
            .iter()
            .zip(&other.levels)
            .skip(first)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Most negative value of `self - other` with its node, over commonly
    /// populated levels.
    pub fn min_difference(&self, other: &AdaptedProcess) -> (f64, Option<NodeId>) {
        let first = self.first_level.max(other.first_level);
        let mut best = (f64::INFINITY, None);
        for k in first..self.levels.len() {
            for (i, (a, b)) in self.levels[k].iter().zip(&other.levels[k]).enumerate() {
                let d = a - b;
                if d < best.0 {
                    best = (d, Some(NodeId::new(k, (i / self.dim) as u64)));
                }
            }
        }
        best
    }
}

/// Stochastic integral `I(child) = I(parent) + integrand(parent) dW`.
pub fn ito_integral(lattice: &BinaryLattice, integrand: &AdaptedProcess) -> Result<AdaptedProcess> {
    if integrand.first_level() != 0 || integrand.depth() != lattice.depth() {
        return Err(LabError::IncompleteProcess(
            "integrand must be populated on levels 0..N-1".into(),
        ));
    }
    let dim = integrand.dim();
    let mut out = AdaptedProcess::zeros(lattice, dim);
    for k in 0..lattice.depth() {
        let (prev, rest) = out.levels.split_at_mut(k + 1);
        let parent_vals = &prev[k];
        let child_vals = &mut rest[0];
        for node in lattice.nodes(k + 1) {
            let parent = node.parent().expect("level >= 1").path as usize;
            let dw = lattice.increment_into(node);
            let c = node.path as usize;
            for d in 0..dim {
                child_vals[c * dim + d] =
                    parent_vals[parent * dim + d] + integrand.levels[k][parent * dim + d] * dw;
            }
        }
    }
    Ok(out)
}

/// `xi = mean + sum_j integrand_j dW_j` for a level-`k` field `xi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleRepresentation {
    pub dim: usize,
    pub level: usize,
    pub mean: Vec<f64>,
    /// Integrand arrays for levels `0..level`.
    pub integrand: Vec<Vec<f64>>,
}

pub fn martingale_representation(
    lattice: &BinaryLattice,
    xi: &[f64],
    level: usize,
    dim: usize,
) -> Result<MartingaleRepresentation> {
    lattice.check_slice(xi, level, dim)?;
    let mut integrand = vec![Vec::new(); level];
    let mut current = xi.to_vec();
    for k in (0..level).rev() {
        let mut z = vec![0.0; lattice.level_len(k) * dim];
        for (index, chunk) in z.chunks_mut(dim).enumerate() {
            children_slope(lattice, &current, dim, index, chunk);
        }
        integrand[k] = z;
        current = condition_level(lattice, &current, k, dim)?;
    }
    Ok(MartingaleRepresentation {
        dim,
        level,
        mean: current,
        integrand,
    })
}

impl MartingaleRepresentation {
    /// Rebuilds the represented field from mean and integrand.
    pub fn reconstruct(&self, lattice: &BinaryLattice) -> Vec<f64> {
        let dim = self.dim;
        let mut current = self.mean.clone();
        for k in 0..self.level {
            let mut next = vec![0.0; lattice.level_len(k + 1) * dim];
            for node in lattice.nodes(k + 1) {
                let parent = node.parent().expect("level >= 1").path as usize;
                let dw = lattice.increment_into(node);
                let c = node.path as usize;
                for d in 0..dim {
                    next[c * dim + d] = current[parent * dim + d] + self.integrand[k][parent * dim + d] * dw;
                }
            }
            current = next;
        }
        current
    }
}

/// Probability that a process has a negative component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignViolation {
    /// Exact probability per level (zero on unpopulated levels).
    pub per_level: Vec<Dyadic>,
    /// Maximum over levels.
    pub exact: Dyadic,
    pub probability: f64,
    pub witness: Option<NodeId>,
}

/// Largest per-level probability of `component < 0` (any component when
/// `component` is `None`), with the first negative node at that level.
pub fn sign_violation(
    lattice: &BinaryLattice,
    process: &AdaptedProcess,
    component: Option<usize>,
) -> Result<SignViolation> {
    let dim = process.dim();
    if let Some(c) = component {
        if c >= dim {
            return Err(LabError::Dimension(format!("component {c} of a {dim}-dimensional process")));
        }
    }
    let mut per_level = vec![Dyadic::ZERO; lattice.depth() + 1];
    let mut best: (Dyadic, Option<NodeId>) = (Dyadic::ZERO, None);
    for (k, slot) in per_level.iter_mut().enumerate() {
        if !process.is_populated(k) {
            continue;
        }
        let mut count = 0u64;
        let mut first = None;
        for (index, v) in process.level(k).chunks(dim).enumerate() {
            let negative = match component {
                Some(c) => v[c] < 0.0,
                None => v.iter().any(|&x| x < 0.0),
            };
            if negative {
                count += 1;
                first.get_or_insert(NodeId::new(k, index as u64));
            }
        }
        let prob = lattice.node_probability(k);
        *slot = Dyadic::new(count * prob.numerator, prob.exponent);
        if *slot > best.0 {
            best = (*slot, first);
        }
    }
    Ok(SignViolation {
        per_level,
        exact: best.0,
        probability: best.0.to_f64(),
        witness: best.1,
    })
}

/// Time-indexed, leaf-measurable field `psi(t_i)`; not required adapted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalField {
    dim: usize,
    times: Vec<Vec<f64>>,
}

impl TerminalField {
    pub fn zeros(lattice: &BinaryLattice, dim: usize) -> Self {
        assert!(dim > 0, "field dimension must be positive");
        Self {
            dim,
            times: vec![vec![0.0; lattice.leaf_count() * dim]; lattice.depth() + 1],
        }
    }

    /// `f(i, leaf, out)` fills `psi(t_i)` at a leaf.
    pub fn from_fn(lattice: &BinaryLattice, dim: usize, mut f: impl FnMut(usize, NodeId, &mut [f64])) -> Self {
        let mut field = Self::zeros(lattice, dim);
        let n = lattice.depth();
        for (i, values) in field.times.iter_mut().enumerate() {
            for (p, chunk) in values.chunks_mut(dim).enumerate() {
                f(i, NodeId::new(n, p as u64), chunk);
            }
        }
        field
    }

    /// The same leaf field at every time index.
    pub fn constant_in_time(lattice: &BinaryLattice, dim: usize, leaves: &[f64]) -> Result<Self> {
        lattice.check_slice(leaves, lattice.depth(), dim)?;
        Ok(Self {
            dim,
            times: vec![leaves.to_vec(); lattice.depth() + 1],
        })
    }

    /// `psi(t_i) = X(t_i)` evaluated along each leaf's ancestry.
    pub fn from_adapted(lattice: &BinaryLattice, process: &AdaptedProcess) -> Result<Self> {
        if process.first_level() != 0 {
            return Err(LabError::IncompleteProcess("process must start at level 0".into()));
        }
        let dim = process.dim();
        Ok(Self::from_fn(lattice, dim, |i, leaf, out| {
            out.copy_from_slice(process.value(leaf.ancestor(i)));
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time_count(&self) -> usize {
        self.times.len()
    }

    pub fn slice(&self, time_index: usize) -> &[f64] {
        &self.times[time_index]
    }

    pub fn slice_mut(&mut self, time_index: usize) -> &mut [f64] {
        &mut self.times[time_index]
    }

    pub fn value(&self, time_index: usize, leaf: NodeId) -> &[f64] {
        let start = leaf.path as usize * self.dim;
        &self.times[time_index][start..start + self.dim]
    }

    pub fn matches(&self, lattice: &BinaryLattice) -> bool {
        self.times.len() == lattice.depth() + 1
            && self.times.iter().all(|t| t.len() == lattice.leaf_count() * self.dim)
    }
}

/// `Z(t_i, s_j)` for every time index `i` and node level `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoParamProcess {
    dim: usize,
    slices: Vec<AdaptedProcess>,
}

impl TwoParamProcess {
    pub fn zeros(lattice: &BinaryLattice, dim: usize) -> Self {
        Self {
            dim,
            slices: vec![AdaptedProcess::zeros(lattice, dim); lattice.depth() + 1],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slice(&self, time_index: usize) -> &AdaptedProcess {
        &self.slices[time_index]
    }

    pub fn slice_mut(&mut self, time_index: usize) -> &mut AdaptedProcess {
        &mut self.slices[time_index]
    }

    pub fn value(&self, time_index: usize, node: NodeId) -> &[f64] {
        self.slices[time_index].value(node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(n: usize) -> BinaryLattice {
        BinaryLattice::new(1.0, n).unwrap()
    }

    #[test]
    fn increments() {
        let l = BinaryLattice::new(0.04, 4).unwrap();
        assert!((l.increment(NodeId::ROOT, Branch::Up).unwrap() - 0.1).abs() < 1e-15);
        assert!((l.increment(NodeId::ROOT, Branch::Down).unwrap() + 0.1).abs() < 1e-15);
        let leaf = NodeId::new(4, 0);
        assert!(matches!(l.increment(leaf, Branch::Up), Err(LabError::OutOfHorizon { .. })));
    }

    #[test]
    fn depth_cap_and_grid() {
        assert!(BinaryLattice::new(1.0, 17).is_err());
        assert!(BinaryLattice::new(0.0, 4).is_err());
        let l = BinaryLattice::new(3.0, 7).unwrap();
        assert_eq!(l.time(7), 3.0);
        assert!((l.step() * 7.0 - 3.0).abs() < 1e-15);
        let d = BinaryLattice::deterministic(1.0, 1 << 12).unwrap();
        assert_eq!(d.level_len(4096), 1);
        assert_eq!(d.increment_into(NodeId::new(5, 0)), 0.0);
    }

    #[test]
    fn node_navigation() {
        let l = lattice(3);
        let n = l.child(l.child(NodeId::ROOT, Branch::Up).unwrap(), Branch::Down).unwrap();
        assert_eq!(n, NodeId::new(2, 0b10));
        assert_eq!(n.moves(), "UD");
        assert_eq!(n.parent(), Some(NodeId::new(1, 1)));
        assert_eq!(n.ancestor(0), NodeId::ROOT);
        assert_eq!(l.brownian(n), 0.0);
    }

    #[test]
    fn conditional_expectation_examples() {
        let l = lattice(2);
        let e = conditional_expectation(&l, &[-1.0, 1.0], 1, NodeId::ROOT).unwrap();
        assert_eq!(e, vec![0.0]);
        let e = conditional_expectation(&l, &[2.5, 2.5], 1, NodeId::ROOT).unwrap();
        assert_eq!(e, vec![2.5]);
        assert!(matches!(
            conditional_expectation(&l, &[1.0], 1, NodeId::ROOT),
            Err(LabError::IncompleteProcess(_))
        ));
    }

    #[test]
    fn expectation_examples() {
        let l = lattice(3);
        assert_eq!(expectation(&l, &[4.0; 8], 3, 1).unwrap(), vec![4.0]);
        assert_eq!(expectation(&l, &[0.0, 1.0], 1, 1).unwrap(), vec![0.5]);
    }

    #[test]
    fn ito_of_one_is_brownian() {
        let l = lattice(5);
        let one = AdaptedProcess::from_fn(&l, 1, |_, v| v[0] = 1.0);
        let w = ito_integral(&l, &one).unwrap();
        for (node, v) in w.iter() {
            assert!((v[0] - l.brownian(node)).abs() < 1e-14);
        }
        let zero = AdaptedProcess::zeros(&l, 1);
        assert_eq!(ito_integral(&l, &zero).unwrap().min_value(), 0.0);
    }

    #[test]
    fn representation_of_brownian_has_unit_integrand() {
        let l = lattice(6);
        let xi: Vec<f64> = l.nodes(6).map(|n| l.brownian(n)).collect();
        let rep = martingale_representation(&l, &xi, 6, 1).unwrap();
        assert!(rep.mean[0].abs() < 1e-15);
        for level in &rep.integrand {
            assert!(level.iter().all(|z| (z - 1.0).abs() < 1e-13));
        }
        let constant = martingale_representation(&l, &[3.0; 64], 6, 1).unwrap();
        assert_eq!(constant.mean, vec![3.0]);
        assert!(constant.integrand.iter().flatten().all(|&z| z == 0.0));
    }

    #[test]
    fn sign_violation_examples() {
        let l = lattice(4);
        let pos = AdaptedProcess::from_fn(&l, 1, |_, v| v[0] = 1.0);
        let s = sign_violation(&l, &pos, None).unwrap();
        assert_eq!(s.probability, 0.0);
        assert!(s.witness.is_none());
        let w = AdaptedProcess::from_fn(&l, 1, |n, v| v[0] = l.brownian(n));
        let s = sign_violation(&l, &w, Some(0)).unwrap();
        assert_eq!(s.per_level[1], Dyadic::new(1, 1));
        assert_eq!(s.probability, 0.5);
        assert_eq!(s.witness, Some(NodeId::new(1, 0)));
    }

    #[test]
    fn dyadic_order() {
        assert!(Dyadic::new(3, 3) < Dyadic::new(1, 1));
        assert_eq!(Dyadic::new(4, 3), Dyadic::new(1, 1));
        assert_eq!(Dyadic::new(5, 4).to_string(), "5/2^4");
    }

    #[test]
    fn terminal_field_from_adapted() {
        let l = lattice(3);
        let w = AdaptedProcess::from_fn(&l, 1, |n, v| v[0] = l.brownian(n));
        let f = TerminalField::from_adapted(&l, &w).unwrap();
        let leaf = NodeId::new(3, 0b110);
        assert!((f.value(1, leaf)[0] - l.brownian(leaf.ancestor(1))).abs() < 1e-15);
        assert!(f.matches(&l));
    }
}
