//! Two-rater annotation store.
//!
//! Each rater flags codes independently and then marks the approach complete,
//! which freezes their annotations. Where the two flag sets differ, a
//! reconciliation records the final flags; where they agree, the agreed set
//! is final without one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Approach, Codebook, NormalizedLabel};

pub const MAX_RATERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    GroundednessIssue,
    OverlyBroad,
}

impl Flag {
    pub const ALL: [Flag; 2] = [Flag::GroundednessIssue, Flag::OverlyBroad];

    pub fn as_str(self) -> &'static str {
        match self {
            Flag::GroundednessIssue => "groundedness_issue",
            Flag::OverlyBroad => "overly_broad",
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type FlagSet = BTreeSet<Flag>;

pub fn describe_flags(flags: &FlagSet) -> String {
    if flags.is_empty() {
        "{}".to_string()
    } else {
        format!("{{{}}}", flags.iter().map(|f| f.as_str()).collect::<Vec<_>>().join(", "))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("unknown rater {0:?}")]
    UnknownRater(String),
    #[error("only {MAX_RATERS} raters are supported ({0:?} would be a third)")]
    TooManyRaters(String),
    #[error("rater name must not be empty")]
    EmptyRaterName,
    #[error("invalid token for rater {0:?}")]
    BadToken(String),
    #[error("no codebook loaded for approach {0}")]
    UnknownApproach(Approach),
    #[error("unknown code {label:?} in the {approach} codebook")]
    UnknownCode { approach: Approach, label: String },
    #[error("rater {rater:?} already completed {approach}; annotations are frozen")]
    Frozen { rater: String, approach: Approach },
    #[error("both raters must complete {approach} before reconciling (waiting on {waiting:?})")]
    NotCompleted { approach: Approach, waiting: Vec<String> },
    #[error("no disagreement on {label:?} in {approach}")]
    NoDisagreement { approach: Approach, label: String },
    #[error("{label:?} in {approach} is already reconciled")]
    AlreadyReconciled { approach: Approach, label: String },
    #[error("{approach} is not finalizable; unresolved: {}", unresolved.join(", "))]
    NotFinalizable { approach: Approach, unresolved: Vec<String> },
    #[error("label empty after normalization")]
    EmptyLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub rater: String,
    pub approach: Approach,
    pub label: NormalizedLabel,
    #[serde(default)]
    pub flags: FlagSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reconciliation {
    pub approach: Approach,
    pub label: NormalizedLabel,
    /// Each rater's flags at the time of reconciling.
    pub rater_flags: BTreeMap<String, FlagSet>,
    pub final_flags: FlagSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disagreement {
    pub approach: Approach,
    pub label: NormalizedLabel,
    pub rater_flags: BTreeMap<String, FlagSet>,
    pub rater_notes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<Reconciliation>,
}

/// Every state change, in the form written to the append-only log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StoreEvent {
    RegisterRater { name: String, token: String },
    Annotate(Annotation),
    Complete { rater: String, approach: Approach },
    Reconcile(Reconciliation),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationStore {
    /// name -> token, in registration order by name
    raters: BTreeMap<String, String>,
    /// Valid labels per approach; not part of the event history.
    codes: BTreeMap<Approach, BTreeSet<NormalizedLabel>>,
    annotations: BTreeMap<(Approach, String, NormalizedLabel), Annotation>,
    completed: BTreeSet<(String, Approach)>,
    reconciliations: BTreeMap<(Approach, NormalizedLabel), Reconciliation>,
}

impl AnnotationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_codebooks<'a>(mut self, codebooks: impl IntoIterator<Item = &'a Codebook>) -> Self {
        for cb in codebooks {
            self.set_codebook(cb);
        }
        self
    }

    pub fn set_codebook(&mut self, codebook: &Codebook) {
        self.codes.insert(codebook.approach, codebook.labels().cloned().collect());
    }

    pub fn approaches(&self) -> impl Iterator<Item = Approach> + '_ {
        self.codes.keys().copied()
    }

    pub fn codes(&self, approach: Approach) -> Result<&BTreeSet<NormalizedLabel>, EvalError> {
        self.codes.get(&approach).ok_or(EvalError::UnknownApproach(approach))
    }

    pub fn raters(&self) -> Vec<String> {
        self.raters.keys().cloned().collect()
    }

    pub fn token(&self, rater: &str) -> Option<&str> {
        self.raters.get(rater).map(String::as_str)
    }

    pub fn check_token(&self, rater: &str, token: &str) -> Result<(), EvalError> {
        match self.raters.get(rater) {
            None => Err(EvalError::UnknownRater(rater.to_string())),
            Some(t) if t == token => Ok(()),
            Some(_) => Err(EvalError::BadToken(rater.to_string())),
        }
    }

    fn require_rater(&self, rater: &str) -> Result<(), EvalError> {
        if self.raters.contains_key(rater) {
            Ok(())
        } else {
            Err(EvalError::UnknownRater(rater.to_string()))
        }
    }

    fn require_code(&self, approach: Approach, label: &NormalizedLabel) -> Result<(), EvalError> {
        if self.codes(approach)?.contains(label) {
            Ok(())
        } else {
            Err(EvalError::UnknownCode { approach, label: label.to_string() })
        }
    }

    pub fn is_completed(&self, rater: &str, approach: Approach) -> bool {
        self.completed.contains(&(rater.to_string(), approach))
    }

    /// Checks an event against the current state without applying it.
    pub fn validate(&self, event: &StoreEvent) -> Result<(), EvalError> {
        match event {
            StoreEvent::RegisterRater { name, .. } => {
                if name.trim().is_empty() {
                    return Err(EvalError::EmptyRaterName);
                }
                if !self.raters.contains_key(name) && self.raters.len() >= MAX_RATERS {
                    return Err(EvalError::TooManyRaters(name.clone()));
                }
                Ok(())
            }
            StoreEvent::Annotate(a) => {
                self.require_rater(&a.rater)?;
                self.require_code(a.approach, &a.label)?;
                if self.is_completed(&a.rater, a.approach) {
                    return Err(EvalError::Frozen { rater: a.rater.clone(), approach: a.approach });
                }
                Ok(())
            }
            StoreEvent::Complete { rater, approach } => {
                self.require_rater(rater)?;
                self.codes(*approach)?;
                Ok(())
            }
            StoreEvent::Reconcile(r) => {
                self.require_code(r.approach, &r.label)?;
                let waiting = self.waiting_on(r.approach);
                if !waiting.is_empty() {
                    return Err(EvalError::NotCompleted { approach: r.approach, waiting });
                }
                if self.reconciliations.contains_key(&(r.approach, r.label.clone())) {
                    return Err(EvalError::AlreadyReconciled { approach: r.approach, label: r.label.to_string() });
                }
                if self.agreed_flags(r.approach, &r.label).is_some() {
                    return Err(EvalError::NoDisagreement { approach: r.approach, label: r.label.to_string() });
                }
                Ok(())
            }
        }
    }

    /// Validates and applies. Re-registering a known rater or re-submitting
    /// an identical annotation changes nothing.
    pub fn apply(&mut self, event: StoreEvent) -> Result<(), EvalError> {
        self.validate(&event)?;
        self.apply_unchecked(event);
        Ok(())
    }

    /// Replays an already-validated event (log replay).
    pub(crate) fn apply_unchecked(&mut self, event: StoreEvent) {
        match event {
            StoreEvent::RegisterRater { name, token } => {
                self.raters.entry(name).or_insert(token);
            }
            StoreEvent::Annotate(a) => {
                self.annotations.insert((a.approach, a.rater.clone(), a.label.clone()), a);
            }
            StoreEvent::Complete { rater, approach } => {
                self.completed.insert((rater, approach));
            }
            StoreEvent::Reconcile(r) => {
                self.reconciliations.insert((r.approach, r.label.clone()), r);
            }
        }
    }

    pub fn annotation(&self, rater: &str, approach: Approach, label: &NormalizedLabel) -> Option<&Annotation> {
        self.annotations.get(&(approach, rater.to_string(), label.clone()))
    }

    pub fn annotations_by(&self, rater: &str) -> Vec<&Annotation> {
        self.annotations.values().filter(|a| a.rater == rater).collect()
    }

    /// Flags a rater gave a code; unannotated means no flags.
    pub fn flags_of(&self, rater: &str, approach: Approach, label: &NormalizedLabel) -> FlagSet {
        self.annotation(rater, approach, label).map(|a| a.flags.clone()).unwrap_or_default()
    }

    fn waiting_on(&self, approach: Approach) -> Vec<String> {
        let mut waiting: Vec<String> =
            self.raters.keys().filter(|r| !self.is_completed(r, approach)).cloned().collect();
        for i in self.raters.len()..MAX_RATERS {
            waiting.push(format!("<rater {}>", i + 1));
        }
        waiting
    }

    pub fn both_completed(&self, approach: Approach) -> bool {
        self.waiting_on(approach).is_empty()
    }

    /// Some(flags) when every registered rater (and there are two) gave the
    /// same flags.
    fn agreed_flags(&self, approach: Approach, label: &NormalizedLabel) -> Option<FlagSet> {
        if self.raters.len() < MAX_RATERS {
            return None;
        }
        let mut sets = self.raters.keys().map(|r| self.flags_of(r, approach, label));
        let first = sets.next()?;
        sets.all(|s| s == first).then_some(first)
    }

    /// Final flags: the reconciliation if present, else the agreed set once
    /// both raters completed. None while undecided.
    pub fn final_flags(&self, approach: Approach, label: &NormalizedLabel) -> Option<FlagSet> {
        if let Some(r) = self.reconciliations.get(&(approach, label.clone())) {
            return Some(r.final_flags.clone());
        }
        if !self.both_completed(approach) {
            return None;
        }
        self.agreed_flags(approach, label)
    }

    /// All codes where the raters' flag sets differ, resolved or not.
    pub fn disagreements(&self, approach: Approach) -> Result<Vec<Disagreement>, EvalError> {
        let codes = self.codes(approach)?;
        if self.raters.len() < MAX_RATERS {
            return Ok(Vec::new());
        }
        Ok(codes
            .iter()
            .filter(|label| self.agreed_flags(approach, label).is_none())
            .map(|label| Disagreement {
                approach,
                label: label.clone(),
                rater_flags: self.raters.keys().map(|r| (r.clone(), self.flags_of(r, approach, label))).collect(),
                rater_notes: self
                    .raters
                    .keys()
                    .filter_map(|r| {
                        self.annotation(r, approach, label).and_then(|a| a.note.clone()).map(|n| (r.clone(), n))
                    })
                    .collect(),
                resolution: self.reconciliations.get(&(approach, label.clone())).cloned(),
            })
            .collect())
    }

    pub fn unresolved(&self, approach: Approach) -> Result<Vec<NormalizedLabel>, EvalError> {
        Ok(self
            .disagreements(approach)?
            .into_iter()
            .filter(|d| d.resolution.is_none())
            .map(|d| d.label)
            .collect())
    }

    /// Finalizable iff both raters completed and nothing is unresolved.
    pub fn check_finalizable(&self, approach: Approach) -> Result<(), EvalError> {
        let mut pending: Vec<String> = self.unresolved(approach)?.iter().map(|l| l.to_string()).collect();
        if !self.both_completed(approach) {
            pending.insert(0, format!("raters not completed: {}", self.waiting_on(approach).join(", ")));
        }
        if pending.is_empty() {
            Ok(())
        } else {
            Err(EvalError::NotFinalizable { approach, unresolved: pending })
        }
    }

    pub fn is_finalizable(&self, approach: Approach) -> bool {
        self.check_finalizable(approach).is_ok()
    }

    pub fn reconciliations(&self) -> impl Iterator<Item = &Reconciliation> {
        self.reconciliations.values()
    }

    /// The shortest event list that rebuilds this state.
    pub fn to_events(&self) -> Vec<StoreEvent> {
        let mut out: Vec<StoreEvent> = self
            .raters
            .iter()
            .map(|(name, token)| StoreEvent::RegisterRater { name: name.clone(), token: token.clone() })
            .collect();
        out.extend(self.annotations.values().cloned().map(StoreEvent::Annotate));
        out.extend(
            self.completed.iter().map(|(rater, approach)| StoreEvent::Complete { rater: rater.clone(), approach: *approach }),
        );
        out.extend(self.reconciliations.values().cloned().map(StoreEvent::Reconcile));
        out
    }

    // convenience wrappers

    pub fn register_rater(&mut self, name: &str) -> Result<String, EvalError> {
        if let Some(token) = self.raters.get(name) {
            return Ok(token.clone());
        }
        let token = hex::encode(rand::random::<[u8; 16]>());
        self.apply(StoreEvent::RegisterRater { name: name.to_string(), token: token.clone() })?;
        Ok(token)
    }

    pub fn record_annotation(
        &mut self,
        rater: &str,
        approach: Approach,
        label: &str,
        flags: FlagSet,
        note: Option<String>,
    ) -> Result<(), EvalError> {
        let label = NormalizedLabel::new(label).map_err(|_| EvalError::EmptyLabel)?;
        self.apply(StoreEvent::Annotate(Annotation { rater: rater.to_string(), approach, label, flags, note }))
    }

    pub fn complete(&mut self, rater: &str, approach: Approach) -> Result<(), EvalError> {
        self.apply(StoreEvent::Complete { rater: rater.to_string(), approach })
    }

    pub fn reconcile(
        &mut self,
        approach: Approach,
        label: &str,
        final_flags: FlagSet,
        note: Option<String>,
    ) -> Result<(), EvalError> {
        let event = self.reconcile_event(approach, label, final_flags, note)?;
        self.apply(event)
    }

    pub fn reconcile_event(
        &self,
        approach: Approach,
        label: &str,
        final_flags: FlagSet,
        note: Option<String>,
    ) -> Result<StoreEvent, EvalError> {
        let label = NormalizedLabel::new(label).map_err(|_| EvalError::EmptyLabel)?;
        let rater_flags = self.raters.keys().map(|r| (r.clone(), self.flags_of(r, approach, &label))).collect();
        Ok(StoreEvent::Reconcile(Reconciliation { approach, label, rater_flags, final_flags, note }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{Code, CodeFlags, Provenance};

    fn codebook(approach: Approach, labels: &[&str]) -> Codebook {
        let mut codes: Vec<Code> = labels
            .iter()
            .map(|l| Code {
                normalized_label: NormalizedLabel::new(l).unwrap(),
                display_label: l.to_string(),
                definition: None,
                examples: vec![],
                provenance: Provenance { approach, chunks: vec![] },
                flags: CodeFlags::default(),
            })
            .collect();
        codes.sort_by(|a, b| a.normalized_label.cmp(&b.normalized_label));
        Codebook { approach, codes, run: None }
    }

    fn store() -> AnnotationStore {
        let cb = codebook(Approach::Topic, &["informal interaction", "feature prioritization", "gratitude"]);
        let mut s = AnnotationStore::new().with_codebooks([&cb]);
        s.register_rater("a").unwrap();
        s.register_rater("b").unwrap();
        s
    }

    fn flags(f: &[Flag]) -> FlagSet {
        f.iter().copied().collect()
    }

    #[test]
    fn third_rater_rejected() {
        let mut s = store();
        assert_eq!(s.register_rater("c").unwrap_err(), EvalError::TooManyRaters("c".into()));
        let t = s.token("a").unwrap().to_string();
        assert_eq!(s.register_rater("a").unwrap(), t);
    }

    #[test]
    fn annotate_upserts_and_validates() {
        let mut s = store();
        let g = flags(&[Flag::GroundednessIssue]);
        s.record_annotation("a", Approach::Topic, "informal interaction", g.clone(), None).unwrap();
        let before = s.clone();
        s.record_annotation("a", Approach::Topic, "Informal  interaction", g.clone(), None).unwrap();
        assert_eq!(s, before);
        assert!(matches!(
            s.record_annotation("a", Approach::Topic, "nonexistent", g.clone(), None),
            Err(EvalError::UnknownCode { .. })
        ));
        assert!(matches!(
            s.record_annotation("zed", Approach::Topic, "gratitude", g.clone(), None),
            Err(EvalError::UnknownRater(_))
        ));
        assert!(matches!(
            s.record_annotation("a", Approach::Chunk, "gratitude", g, None),
            Err(EvalError::UnknownApproach(Approach::Chunk))
        ));
    }

    #[test]
    fn completion_freezes() {
        let mut s = store();
        s.complete("a", Approach::Topic).unwrap();
        assert!(matches!(
            s.record_annotation("a", Approach::Topic, "gratitude", FlagSet::new(), None),
            Err(EvalError::Frozen { .. })
        ));
        s.record_annotation("b", Approach::Topic, "gratitude", FlagSet::new(), None).unwrap();
    }

    #[test]
    fn reconciliation_rules() {
        let mut s = store();
        let ob = flags(&[Flag::OverlyBroad]);
        let g = flags(&[Flag::GroundednessIssue]);
        s.record_annotation("a", Approach::Topic, "informal interaction", ob.clone(), None).unwrap();
        s.record_annotation("a", Approach::Topic, "gratitude", g.clone(), None).unwrap();
        s.record_annotation("b", Approach::Topic, "gratitude", g.clone(), None).unwrap();

        assert!(matches!(
            s.reconcile(Approach::Topic, "informal interaction", ob.clone(), None),
            Err(EvalError::NotCompleted { .. })
        ));
        s.complete("a", Approach::Topic).unwrap();
        s.complete("b", Approach::Topic).unwrap();

        let err = s.reconcile(Approach::Topic, "gratitude", g.clone(), None).unwrap_err();
        assert_eq!(err.to_string(), "no disagreement on \"gratitude\" in topic");
        assert_eq!(s.final_flags(Approach::Topic, &NormalizedLabel::new("gratitude").unwrap()), Some(g));

        let err = s.check_finalizable(Approach::Topic).unwrap_err();
        assert!(err.to_string().contains("informal interaction"), "{err}");

        s.reconcile(Approach::Topic, "informal interaction", ob.clone(), Some("agreed".into())).unwrap();
        assert!(matches!(
            s.reconcile(Approach::Topic, "informal interaction", FlagSet::new(), None),
            Err(EvalError::AlreadyReconciled { .. })
        ));
        assert_eq!(s.final_flags(Approach::Topic, &NormalizedLabel::new("informal interaction").unwrap()), Some(ob));
        assert!(s.is_finalizable(Approach::Topic));
        assert_eq!(s.disagreements(Approach::Topic).unwrap().len(), 1);
    }

    #[test]
    fn not_finalizable_without_both_raters() {
        let cb = codebook(Approach::Item, &["x"]);
        let mut s = AnnotationStore::new().with_codebooks([&cb]);
        s.register_rater("a").unwrap();
        s.complete("a", Approach::Item).unwrap();
        assert!(!s.is_finalizable(Approach::Item));
    }

    #[test]
    fn tokens_checked() {
        let s = store();
        let t = s.token("a").unwrap().to_string();
        assert!(s.check_token("a", &t).is_ok());
        assert_eq!(s.check_token("a", "nope").unwrap_err(), EvalError::BadToken("a".into()));
    }
}
