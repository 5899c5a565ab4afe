//! Human evaluation: two-rater flagging, reconciliation, the per-approach
//! report and keyword concept groups.

pub mod concept;
pub mod persist;
pub mod report;
pub mod store;

use crate::codebook::Codebook;

pub use concept::{concept_group, ConceptGroup, ConceptSource};
pub use persist::{PersistError, PersistentStore};
pub use report::{final_report, metrics_report, percent, MetricsReport, ReportRow};
pub use store::{
    Annotation, AnnotationStore, Disagreement, EvalError, Flag, FlagSet, Reconciliation, StoreEvent,
};

pub fn count_codes(codebook: &Codebook) -> usize {
    codebook.len()
}
