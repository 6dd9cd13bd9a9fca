//! Scenario registry, experiment execution and report emission.

pub mod families;
pub mod hypotheses;
mod report;
mod scenarios;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lattice::DEFAULT_MAX_DEPTH;

pub use hypotheses::{check_hypotheses, ConditionKind, HypothesisReport, LinearBackward, Status, Structure};
pub use report::{emit_report, render_report, ReportFormat};
pub use scenarios::REGISTRY;

/// Environment variable naming the default report directory.
pub const OUTPUT_DIR_ENV: &str = "VOLTERRA_LAB_OUT";

/// What a scenario is expected to show.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    /// The conclusion holds on every node and trial.
    Holds,
    /// The conclusion fails, as the counterexample predicts.
    FailsAsPredicted,
}

/// Outcome of one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonVerdict {
    pub scenario: String,
    /// Neutral identifier of the claim under test.
    pub theorem: String,
    pub hypotheses: HypothesisReport,
    pub expected: Expectation,
    /// `worst_violation <= tolerance`.
    pub conclusion_held: bool,
    pub worst_violation: f64,
    pub tolerance: f64,
    pub witness: Option<String>,
    pub depth: usize,
    pub seed: u64,
    pub runtime_ms: Option<u64>,
    /// Scenario-specific numbers (oracle errors, counts, ratios).
    pub metrics: BTreeMap<String, f64>,
}

impl ComparisonVerdict {
    pub fn matches_expectation(&self) -> bool {
        match self.expected {
            Expectation::Holds => self.conclusion_held,
            Expectation::FailsAsPredicted => !self.conclusion_held,
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn summary(&self) -> &'static str {
        match (self.expected, self.conclusion_held) {
            (Expectation::Holds, true) => "conclusion holds",
            (Expectation::Holds, false) => "conclusion VIOLATED",
            (Expectation::FailsAsPredicted, false) => "comparison fails as predicted",
            (Expectation::FailsAsPredicted, true) => "expected failure NOT observed",
        }
    }
}

/// One experiment request; every field but `scenario` falls back to the
/// registry default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    /// Lattice depth; for deterministic gallery entries, log2 of the step count.
    pub depth: Option<usize>,
    /// Largest state dimension drawn by random families.
    pub dim: Option<usize>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    /// Scale of randomly drawn coefficients (a bound on their Lipschitz constants).
    pub coefficient_scale: Option<f64>,
    pub tolerance: Option<f64>,
    pub out: Option<PathBuf>,
    pub format: Option<ReportFormat>,
    /// Record wall-clock runtimes; reports are then no longer byte-stable.
    pub timings: bool,
}

impl ScenarioConfig {
    pub fn named(scenario: &str) -> Self {
        Self {
            scenario: scenario.to_string(),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Report path: explicit `out`, else the environment directory, else
    /// the working directory.
    pub fn output_path(&self, default_name: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            std::env::var_os(OUTPUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("."))
                .join(default_name)
        })
    }
}

/// Registry entry.
pub struct ScenarioInfo {
    pub name: &'static str,
    pub theorem: &'static str,
    pub description: &'static str,
    pub expected: Expectation,
    pub randomized: bool,
    pub default_depth: usize,
    pub default_dim: usize,
    pub default_trials: usize,
    pub default_seed: u64,
    pub default_tolerance: f64,
    run: fn(&Params) -> Result<Outcome>,
}

/// Parameters after defaults are applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Params {
    pub depth: usize,
    pub dim: usize,
    pub seed: u64,
    pub trials: usize,
    pub coefficient_scale: f64,
    pub tolerance: f64,
}

/// What a scenario runner returns; the verdict adds identity and timing.
#[derive(Clone, Debug, Default)]
pub(crate) struct Outcome {
    pub hypotheses: HypothesisReport,
    pub worst_violation: f64,
    pub witness: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

impl Outcome {
    fn metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }
}

pub fn lookup(name: &str) -> Result<&'static ScenarioInfo> {
    REGISTRY
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| LabError::UnknownScenario(name.to_string()))
}

impl ScenarioInfo {
    pub fn params(&self, config: &ScenarioConfig) -> Result<Params> {
        let depth = config.depth.unwrap_or(self.default_depth);
        if depth == 0 || depth > DEFAULT_MAX_DEPTH {
            return Err(LabError::Config(format!("depth must lie in 1..={DEFAULT_MAX_DEPTH}, got {depth}")));
        }
        let dim = config.dim.unwrap_or(self.default_dim);
        if dim == 0 {
            return Err(LabError::Config("dimension must be positive".into()));
        }
        let scale = config.coefficient_scale.unwrap_or(1.0);
        if !(scale.is_finite() && scale > 0.0) {
            return Err(LabError::Config(format!("coefficient scale must be positive, got {scale}")));
        }
        let tolerance = config.tolerance.unwrap_or(self.default_tolerance);
        if !(tolerance.is_finite() && tolerance >= 0.0) {
            return Err(LabError::Config(format!("tolerance must be nonnegative, got {tolerance}")));
        }
        Ok(Params {
            depth,
            dim,
            seed: config.seed.unwrap_or(self.default_seed),
            trials: config.trials.unwrap_or(self.default_trials).max(1),
            coefficient_scale: scale,
            tolerance,
        })
    }
}

/// Runs one scenario and assembles its verdict.
pub fn run_experiment(config: &ScenarioConfig) -> Result<ComparisonVerdict> {
    let info = lookup(&config.scenario)?;
    let params = info.params(config)?;
    let started = Instant::now();
    let outcome = (info.run)(&params).map_err(|e| LabError::Scenario {
        scenario: info.name.to_string(),
        source: Box::new(e),
    })?;
    let elapsed = started.elapsed().as_millis() as u64;
    Ok(ComparisonVerdict {
        scenario: info.name.to_string(),
        theorem: info.theorem.to_string(),
        hypotheses: outcome.hypotheses,
        expected: info.expected,
        conclusion_held: outcome.worst_violation <= params.tolerance,
        worst_violation: outcome.worst_violation,
        tolerance: params.tolerance,
        witness: outcome.witness,
        depth: params.depth,
        seed: params.seed,
        runtime_ms: config.timings.then_some(elapsed),
        metrics: outcome.metrics,
    })
}

/// Every registry scenario with its defaults, run concurrently and
/// returned in name order.
pub fn run_suite(timings: bool) -> Result<Vec<ComparisonVerdict>> {
    let mut names: Vec<&str> = REGISTRY.iter().map(|s| s.name).collect();
    names.sort_unstable();
    names
        .par_iter()
        .map(|name| {
            run_experiment(&ScenarioConfig {
                timings,
                ..ScenarioConfig::named(name)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_fields_and_deep_lattices() {
        assert!(ScenarioConfig::from_json(r#"{"scenario": "ex2.6", "bogus": 1}"#).is_err());
        let cfg = ScenarioConfig::from_json(r#"{"scenario": "ex3.3", "depth": 17}"#).unwrap();
        assert!(matches!(run_experiment(&cfg), Err(LabError::Config(_))));
        assert!(matches!(
            run_experiment(&ScenarioConfig::named("nope")),
            Err(LabError::UnknownScenario(_))
        ));
    }

    #[test]
    fn registry_names_are_unique() {
        let mut names: Vec<&str> = REGISTRY.iter().map(|s| s.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), REGISTRY.len());
    }
}
