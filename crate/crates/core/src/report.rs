//! Analysis reports and atomic artifact writing.
//!
//! A report bundles what a decision analysis produced — survivor lists,
//! risk profiles, Pareto boundaries, tree solutions — together with the
//! nine-source uncertainty manifest and the standing caveats. The manifest
//! is a required field: a report cannot be constructed, and therefore
//! cannot be emitted, for an analysis that has not accounted for all nine
//! sources.
//!
//! Rendering is deterministic: same contents, same bytes. All artifact
//! writes go through [`write_atomic`] (temp file + rename) so readers never
//! observe a half-written document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chain::INDEPENDENCE_CAVEAT;
use crate::decision::{
    DecisionStatus, ParetoResult, RiskProfile, StagedOutcome, TreeSolution,
};
use crate::error::{Error, Result};
use crate::ledger::Manifest;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Write `content` to `path` atomically: the bytes land in a sibling temp
/// file which is then renamed over the target, so a crash mid-write leaves
/// either the old document or the new one, never a torn mix.
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::doc(&path.display().to_string(), "path has no file name"))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, content).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Caveats attached to every report: the modelling assumptions a reader
/// must keep in mind when acting on the numbers.
pub fn standard_caveats() -> Vec<String> {
    vec![
        INDEPENDENCE_CAVEAT.to_string(),
        "Discrepancy draws are zero-mean: systematic bias beyond the assessed \
         variance magnitude is not represented."
            .to_string(),
        "Exogenous inputs are sampled independently of each other and of model \
         parameters."
            .to_string(),
    ]
}

/// One candidate decision's standing after an analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionSummary {
    pub index: usize,
    pub decision: Vec<f64>,
    #[serde(flatten)]
    pub status: DecisionStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub expected_utility: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub standard_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lower_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub upper_bound: Option<f64>,
}

/// Survivors and rejections from staged rejection, plus the inverted
/// near-optimal set when requested.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurvivorSection {
    pub k_bound: f64,
    pub stages_run: usize,
    /// Nearness threshold for the near-optimal set, as a fraction of the
    /// observed utility range. A reporting choice, not an elicited value.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub near_optimal_indices: Option<Vec<usize>>,
    pub decisions: Vec<DecisionSummary>,
}

impl SurvivorSection {
    /// Summarize a staged-rejection outcome. When `epsilon` is given, the
    /// near-optimal set is computed over the evaluated expected utilities.
    pub fn from_outcome(outcome: &StagedOutcome, k_bound: f64, epsilon: Option<f64>) -> Self {
        let decisions = outcome
            .set
            .status
            .iter()
            .enumerate()
            .map(|(index, status)| {
                let (expected_utility, standard_error) = match outcome.evaluations.get(&index) {
                    Some(&(eu, se)) => (Some(eu), Some(se)),
                    None => (None, None),
                };
                let (lower_bound, upper_bound) = match outcome.bounds.get(&index) {
                    Some(&(lo, up)) => (Some(lo), Some(up)),
                    None => (None, None),
                };
                DecisionSummary {
                    index,
                    decision: outcome.set.decisions[index].clone(),
                    status: *status,
                    expected_utility,
                    standard_error,
                    lower_bound,
                    upper_bound,
                }
            })
            .collect();
        let near_optimal_indices = epsilon.map(|eps| {
            let estimates = outcome
                .evaluations
                .iter()
                .map(|(&i, &(eu, _))| (i, eu))
                .collect();
            crate::decision::near_optimal_set(&estimates, eps)
        });
        SurvivorSection {
            k_bound,
            stages_run: outcome.stages_run,
            epsilon,
            near_optimal_indices,
            decisions,
        }
    }

    pub fn survivor_indices(&self) -> Vec<usize> {
        self.decisions
            .iter()
            .filter(|d| matches!(d.status, DecisionStatus::Active))
            .map(|d| d.index)
            .collect()
    }
}

/// The full analysis report. Requires a complete uncertainty manifest by
/// construction; every other section is optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub title: String,
    pub seed: u64,
    pub caveats: Vec<String>,
    pub manifest: Manifest,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub survivors: Option<SurvivorSection>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub risk_profiles: Vec<RiskProfile>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pareto: Option<ParetoResult>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tree: Option<TreeSolution>,
}

impl Report {
    pub fn new(title: &str, seed: u64, manifest: Manifest) -> Self {
        Report {
            format_version: REPORT_FORMAT_VERSION,
            title: title.to_string(),
            seed,
            caveats: standard_caveats(),
            manifest,
            survivors: None,
            risk_profiles: Vec::new(),
            pareto: None,
            tree: None,
        }
    }

    /// Deterministic JSON rendering: same report, same bytes.
    pub fn render(&self) -> String {
        let mut text = serde_json::to_string_pretty(self)
            .expect("reports contain only serializable fields");
        text.push('\n');
        text
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.render())
    }

    pub fn load(path: &Path) -> Result<Report> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::doc(&path.display().to_string(), e.to_string()))
    }
}

fn render_csv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    text
}

/// Quantile-fan plot data: one row per (decision, attribute) with the mean
/// and the five standard quantiles, ready for external plotting.
pub fn quantile_fan_csv(profiles: &[RiskProfile]) -> String {
    let header: Vec<String> = [
        "decision_index",
        "attribute",
        "mean",
        "q05",
        "q25",
        "q50",
        "q75",
        "q95",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::new();
    for (i, profile) in profiles.iter().enumerate() {
        for s in &profile.summaries {
            let mut row = vec![format!("{i}"), s.name.clone(), format!("{}", s.mean)];
            row.extend(s.quantiles.iter().map(|&(_, v)| format!("{v}")));
            rows.push(row);
        }
    }
    render_csv(&header, &rows)
}

/// Pareto-scatter plot data: one row per boundary decision with its
/// attribute coordinates in original units.
pub fn pareto_scatter_csv(result: &ParetoResult) -> String {
    let mut header = vec!["candidate_index".to_string()];
    header.extend(result.attribute_names.iter().cloned());
    let rows: Vec<Vec<String>> = result
        .boundary_indices
        .iter()
        .zip(&result.coordinates)
        .map(|(&i, coords)| {
            let mut row = vec![format!("{i}")];
            row.extend(coords.iter().map(|v| format!("{v}")));
            row
        })
        .collect();
    render_csv(&header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{build_manifest, AnalysisConfig, SourceKind, Treatment};

    fn complete_manifest() -> Manifest {
        let mut config = AnalysisConfig::default();
        for m in ["calibration", "emulator", "discrepancy", "observations", "chain", "decision"] {
            config.modules_used.insert(m.into());
        }
        for kind in [SourceKind::Condition, SourceKind::Stochastic, SourceKind::Solution] {
            config.assessments.insert(
                kind,
                Treatment::Ignored {
                    rationale: "test fixture".into(),
                },
            );
        }
        build_manifest(&config).unwrap()
    }

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("artifact.json");
        write_atomic(&path, "first").unwrap();
        write_atomic(&path, "second").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "second");
        // No temp file left behind.
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().to_string())
            .collect();
        assert_eq!(leftovers, vec!["artifact.json"]);
    }

    #[test]
    fn empty_decision_report_still_carries_the_manifest() {
        let report = Report::new("toy", 7, complete_manifest());
        let text = report.render();
        assert!(text.contains("\"manifest\""));
        assert!(text.contains("parametric"));
        assert!(text.contains("multi-model"));
        let back: Report = serde_json::from_str(&text).unwrap();
        assert!(back.survivors.is_none());
        assert!(back.risk_profiles.is_empty());
        assert_eq!(back.manifest.sources().len(), 9);
    }

    #[test]
    fn rendering_is_byte_stable() {
        let a = Report::new("toy", 7, complete_manifest()).render();
        let b = Report::new("toy", 7, complete_manifest()).render();
        assert_eq!(a, b);
    }

    #[test]
    fn reports_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = Report::new("toy", 7, complete_manifest());
        report.save(&path).unwrap();
        let back = Report::load(&path).unwrap();
        assert_eq!(report.render(), back.render());
    }

    #[test]
    fn tampered_manifest_fails_to_load() {
        let report = Report::new("toy", 7, complete_manifest());
        let text = report.render();
        // Remove one manifest entry: the report no longer parses.
        let tampered = text.replace("\"kind\": \"solution\",", "\"kind\": \"structural\",");
        assert_ne!(text, tampered);
        assert!(serde_json::from_str::<Report>(&tampered).is_err());
    }

    #[test]
    fn quantile_fan_lists_every_decision_attribute_pair() {
        use crate::decision::{risk_profile, OutcomeModel};
        struct TwoOut;
        impl OutcomeModel for TwoOut {
            fn output_names(&self) -> Vec<String> {
                vec!["cost".into(), "benefit".into()]
            }
            fn sample(&self, d: &[f64], n: usize, _seed: u64) -> crate::Result<Vec<Vec<f64>>> {
                Ok(vec![vec![d[0], 2.0 * d[0]]; n])
            }
        }
        let profiles: Vec<RiskProfile> = [0.5, 1.5]
            .iter()
            .map(|&d| {
                risk_profile(&TwoOut, &[d], 10, 0, &std::collections::BTreeMap::new()).unwrap()
            })
            .collect();
        let csv = quantile_fan_csv(&profiles);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 4); // header + 2 decisions × 2 attributes
        assert!(lines[0].starts_with("decision_index,attribute,mean,q05"));
        assert!(lines[1].starts_with("0,cost,0.5,"));
        assert!(lines[4].starts_with("1,benefit,3,"));
    }
}
