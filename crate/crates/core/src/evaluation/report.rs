//! Per-approach code counts and final flag counts.

use serde::{Deserialize, Serialize};

use super::store::{AnnotationStore, EvalError, Flag};
use crate::codebook::{Approach, Codebook};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub approach: Approach,
    pub codes: usize,
    pub groundedness: usize,
    pub overly_broad: usize,
    pub groundedness_codes: Vec<String>,
    pub overly_broad_codes: Vec<String>,
    pub verb_nonconforming: usize,
    pub finalized: bool,
    /// Codes still waiting on reconciliation (or a note on missing raters).
    pub pending: Vec<String>,
}

impl ReportRow {
    /// "codes / groundedness / overly broad"
    pub fn triple(&self) -> String {
        format!("{} / {} / {}", self.codes, self.groundedness, self.overly_broad)
    }

    pub fn percent(&self, flag: Flag) -> String {
        let n = match flag {
            Flag::GroundednessIssue => self.groundedness,
            Flag::OverlyBroad => self.overly_broad,
        };
        percent(n, self.codes)
    }
}

/// `n / total` as a percentage with two decimals.
pub fn percent(n: usize, total: usize) -> String {
    if total == 0 {
        return "0.00%".to_string();
    }
    format!("{:.2}%", n as f64 * 100.0 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub draft: bool,
    pub rows: Vec<ReportRow>,
}

pub const DRAFT_MARK: &str = "DRAFT";

/// Counts only flags that are final: reconciled, or agreed once both raters
/// completed. Anything short of fully finalized is marked draft.
pub fn metrics_report(codebooks: &[&Codebook], store: &AnnotationStore) -> MetricsReport {
    let mut rows = Vec::new();
    for cb in codebooks {
        let mut row = ReportRow {
            approach: cb.approach,
            codes: cb.len(),
            groundedness: 0,
            overly_broad: 0,
            groundedness_codes: Vec::new(),
            overly_broad_codes: Vec::new(),
            verb_nonconforming: cb.codes.iter().filter(|c| c.flags.verb_nonconforming).count(),
            finalized: false,
            pending: Vec::new(),
        };
        let known = store.codes(cb.approach).is_ok();
        for code in &cb.codes {
            let flags = if known { store.final_flags(cb.approach, &code.normalized_label) } else { None };
            let Some(flags) = flags else { continue };
            if flags.contains(&Flag::GroundednessIssue) {
                row.groundedness += 1;
                row.groundedness_codes.push(code.display_label.clone());
            }
            if flags.contains(&Flag::OverlyBroad) {
                row.overly_broad += 1;
                row.overly_broad_codes.push(code.display_label.clone());
            }
        }
        match store.check_finalizable(cb.approach) {
            Ok(()) => row.finalized = true,
            Err(EvalError::NotFinalizable { unresolved, .. }) => row.pending = unresolved,
            Err(e) => row.pending = vec![e.to_string()],
        }
        rows.push(row);
    }
    let draft = rows.iter().any(|r| !r.finalized);
    MetricsReport { draft, rows }
}

/// Like [`metrics_report`] but refuses anything not finalized.
pub fn final_report(codebooks: &[&Codebook], store: &AnnotationStore) -> Result<MetricsReport, EvalError> {
    for cb in codebooks {
        store.check_finalizable(cb.approach)?;
    }
    Ok(metrics_report(codebooks, store))
}

impl MetricsReport {
    pub fn row(&self, approach: Approach) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.approach == approach)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        if self.draft {
            let pending: Vec<&str> = self.rows.iter().filter(|r| !r.finalized).map(|r| r.approach.as_str()).collect();
            out.push_str(&format!("{DRAFT_MARK}: not finalized ({})\n\n", pending.join(", ")));
        }
        let header: Vec<&str> = self.rows.iter().map(|r| r.approach.title()).collect();
        out.push_str(&format!("| | {} |\n", header.join(" | ")));
        out.push_str(&format!("|---|{}\n", "---|".repeat(self.rows.len())));
        let line = |name: &str, cells: Vec<String>| format!("| {name} | {} |\n", cells.join(" | "));
        out.push_str(&line("# of codes", self.rows.iter().map(|r| r.codes.to_string()).collect()));
        out.push_str(&line(
            "# of groundedness issues",
            self.rows.iter().map(|r| format!("{} ({})", r.groundedness, r.percent(Flag::GroundednessIssue))).collect(),
        ));
        out.push_str(&line(
            "# of overly broad",
            self.rows.iter().map(|r| format!("{} ({})", r.overly_broad, r.percent(Flag::OverlyBroad))).collect(),
        ));
        for r in &self.rows {
            out.push_str(&format!("\n## {}\n", r.approach.title()));
            out.push_str(&format!("groundedness issues: {}\n", list(&r.groundedness_codes)));
            out.push_str(&format!("overly broad: {}\n", list(&r.overly_broad_codes)));
            if r.approach == Approach::Verb {
                out.push_str(&format!("not verb phrases: {}\n", r.verb_nonconforming));
            }
            if !r.pending.is_empty() {
                out.push_str(&format!("pending: {}\n", r.pending.join("; ")));
            }
        }
        out
    }
}

fn list(items: &[String]) -> String {
    if items.is_empty() {
        "(none)".to_string()
    } else {
        items.join(", ")
    }
}
