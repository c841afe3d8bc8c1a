//! Machine-readable command outputs. Field names are stable; floats are
//! rounded to six significant digits.

use std::collections::BTreeMap;

use apgn_core::eval::{sig6, ProposalComparison};
use apgn_core::gradcheck::GradcheckReport;
use apgn_core::head::AssemblyStatus;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub manifest: String,
    pub videos: usize,
    pub nms_threshold: Option<f64>,
    /// `R@n,IoU=m` percentages.
    pub recall: BTreeMap<String, f64>,
    pub proposals: ProposalComparison,
    pub param_count: usize,
    pub empty_videos: usize,
    pub fallback_videos: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSegment {
    pub rank: usize,
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub anchor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictReport {
    pub frames: usize,
    pub tokens: Vec<u32>,
    pub status: AssemblyStatus,
    pub fallback: bool,
    pub proposal_count: usize,
    pub predictions: Vec<RankedSegment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub vps: f64,
    pub param_count: usize,
    pub repeats: usize,
    pub videos: usize,
    pub proposals: ProposalComparison,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermRow {
    pub term: String,
    pub max_rel_error: f64,
    pub probes: usize,
    pub kink_redraws: usize,
    pub negligible_redraws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub tolerance: f64,
    pub passed: bool,
    pub terms: Vec<TermRow>,
}

impl GradcheckSummary {
    pub fn new(report: &GradcheckReport) -> Self {
        GradcheckSummary {
            tolerance: report.tolerance,
            passed: report.passed(),
            terms: report
                .terms
                .iter()
                .map(|t| TermRow {
                    term: t.term.clone(),
                    max_rel_error: sig6(t.max_rel_error),
                    probes: t.probes.len(),
                    kink_redraws: t.kink_redraws,
                    negligible_redraws: t.negligible_redraws,
                })
                .collect(),
        }
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>14} {:>7} {:>6} {:>11}\n",
            "term", "max_rel_err", "probes", "kinks", "negligible"
        );
        for t in &self.terms {
            s += &format!(
                "{:<10} {:>14.5e} {:>7} {:>6} {:>11}\n",
                t.term, t.max_rel_error, t.probes, t.kink_redraws, t.negligible_redraws
            );
        }
        s += &format!(
            "tolerance {:.5e}: {}",
            self.tolerance,
            if self.passed { "pass" } else { "FAIL" }
        );
        s
    }
}

/// Rounds every non-integer number in a JSON tree to six significant digits.
pub fn round_json(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(sig6).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_json),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Compact or pretty JSON of `value` with [`round_json`] applied.
pub fn to_json<T: Serialize>(value: &T, pretty: bool) -> String {
    let mut v = serde_json::to_value(value).expect("reports serialize");
    round_json(&mut v);
    if pretty {
        serde_json::to_string_pretty(&v).expect("json value serializes")
    } else {
        v.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_keeps_integers() {
        let mut v = serde_json::json!({"a": 1.23456789, "b": [3, 0.1 + 0.2], "c": {"d": 7}});
        round_json(&mut v);
        assert_eq!(v, serde_json::json!({"a": 1.23457, "b": [3, 0.3], "c": {"d": 7}}));
    }
}
