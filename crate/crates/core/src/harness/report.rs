use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ComparisonVerdict;
use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

const COLUMNS: [&str; 9] = [
    "scenario",
    "theorem",
    "hypothesis_flags",
    "conclusion_held",
    "worst_violation",
    "witness",
    "depth",
    "seed",
    "runtime_ms",
];

/// 17 significant digits, so the value round-trips.
fn float_text(v: f64) -> Option<String> {
    v.is_finite().then(|| format!("{v:.16e}"))
}

fn row(v: &ComparisonVerdict) -> [String; 9] {
    [
        v.scenario.clone(),
        v.theorem.clone(),
        v.hypotheses.to_string(),
        v.conclusion_held.to_string(),
        float_text(v.worst_violation).unwrap_or_else(|| v.worst_violation.to_string()),
        v.witness.clone().unwrap_or_default(),
        v.depth.to_string(),
        v.seed.to_string(),
        v.runtime_ms.map(|ms| ms.to_string()).unwrap_or_default(),
    ]
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// Renders the report in memory; the output depends only on the verdicts.
pub fn render_report(verdicts: &[ComparisonVerdict], format: ReportFormat) -> Result<String> {
    if verdicts.is_empty() {
        return Err(LabError::Argument("a report needs at least one verdict".into()));
    }
    match format {
        ReportFormat::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer.write_record(COLUMNS)?;
            for v in verdicts {
                writer.write_record(row(v))?;
            }
            let bytes = writer.into_inner().map_err(|e| LabError::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Json => {
            // Written by hand so floats keep 17 significant digits and the
            // key order is fixed.
            let mut out = String::from("[\n");
            for (i, v) in verdicts.iter().enumerate() {
                let worst = float_text(v.worst_violation).unwrap_or_else(|| "null".into());
                let witness = v.witness.as_deref().map_or_else(|| "null".into(), json_string);
                let runtime = v.runtime_ms.map_or_else(|| "null".into(), |ms| ms.to_string());
                let _ = write!(
                    out,
                    "  {{\"scenario\": {}, \"theorem\": {}, \"hypothesis_flags\": {}, \"conclusion_held\": {}, \
                     \"worst_violation\": {worst}, \"witness\": {witness}, \"depth\": {}, \"seed\": {}, \"runtime_ms\": {runtime}}}",
                    json_string(&v.scenario),
                    json_string(&v.theorem),
                    json_string(&v.hypotheses.to_string()),
                    v.conclusion_held,
                    v.depth,
                    v.seed,
                );
                out.push_str(if i + 1 < verdicts.len() { ",\n" } else { "\n" });
            }
            out.push_str("]\n");
            Ok(out)
        }
    }
}

pub fn emit_report(verdicts: &[ComparisonVerdict], format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(verdicts, format)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::harness::{Expectation, HypothesisReport};

    fn verdict() -> ComparisonVerdict {
        ComparisonVerdict {
            scenario: "trivial".into(),
            theorem: "claim".into(),
            hypotheses: HypothesisReport::new(),
            expected: Expectation::Holds,
            conclusion_held: true,
            worst_violation: 0.1,
            tolerance: 0.0,
            witness: Some("a, \"b\"".into()),
            depth: 3,
            seed: 7,
            runtime_ms: None,
            metrics: BTreeMap::new(),
        }
    }

    #[test]
    fn csv_has_header_and_one_row() {
        let text = render_report(&[verdict()], ReportFormat::Csv).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("1.0000000000000001e-1"));
        assert!(text.contains("\"a, \"\"b\"\"\""));
    }

    #[test]
    fn json_parses_and_keeps_key_order() {
        let text = render_report(&[verdict(), verdict()], ReportFormat::Json).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.as_array().unwrap().len(), 2);
        assert_eq!(parsed[0]["witness"], "a, \"b\"");
        assert!(parsed[0]["runtime_ms"].is_null());
        let first_keys: Vec<usize> = COLUMNS.iter().map(|c| text.find(&format!("\"{c}\"")).unwrap()).collect();
        assert!(first_keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rendering_is_byte_stable_and_rejects_empty_input() {
        let a = render_report(&[verdict()], ReportFormat::Json).unwrap();
        let b = render_report(&[verdict()], ReportFormat::Json).unwrap();
        assert_eq!(a, b);
        assert!(render_report(&[], ReportFormat::Csv).is_err());
    }
}
