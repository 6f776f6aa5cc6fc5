//! Per-subject non-mated tail analysis.
//!
//! For each subject and each demographic pair category the 99th percentile
//! of that subject's raw non-mated scores is taken as a ceiling order
//! statistic (no interpolation), then divided by the score threshold that
//! yields the target false match rate over the whole non-mated pool.

use std::collections::HashSet;
use std::fmt;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ingest::{ScoreSet, Subject, SubjectTable};

#[derive(Debug, Error, PartialEq)]
pub enum TailsError {
    #[error("cannot take a percentile of an empty sequence")]
    EmptySequence,
    #[error("target FMR {0} must lie strictly between 0 and 1")]
    InvalidTarget(f64),
    #[error("target FMR {target} unachievable with {total} non-mated scores; fallback threshold {fallback}")]
    Unachievable {
        target: f64,
        total: usize,
        fallback: f64,
    },
    #[error("score references subject `{0}` absent from the subject table")]
    UnknownSubject(String),
}

/// 1-indexed rank of the ceiling order statistic at quantile `q`.
///
/// The small tolerance keeps products such as `0.99 * 500` from rounding up
/// past an exact integer.
pub fn quantile_rank(len: usize, q: f64) -> usize {
    let raw = q * len as f64;
    let rank = (raw - 1e-9 * raw.abs().max(1.0)).ceil() as usize;
    rank.clamp(1, len.max(1))
}

/// The `quantile_rank(len, q)`-th smallest value.
pub fn upper_order_statistic(values: &[f64], q: f64) -> Result<f64, TailsError> {
    if values.is_empty() {
        return Err(TailsError::EmptySequence);
    }
    let rank = quantile_rank(values.len(), q);
    let mut v = values.to_vec();
    let (_, nth, _) = v.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*nth)
}

/// The n-th smallest value with n = ⌈0.99·len⌉.
pub fn percentile99(values: &[f64]) -> Result<f64, TailsError> {
    if values.is_empty() {
        return Err(TailsError::EmptySequence);
    }
    // exact integer ceiling of 99 * len / 100
    let rank = (99 * values.len()).div_ceil(100);
    let mut v = values.to_vec();
    let (_, nth, _) = v.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*nth)
}

/// Gender/race agreement of a subject pair; first letter is gender.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum PairCategory {
    DD,
    DS,
    SD,
    SS,
}

impl PairCategory {
    pub const ALL: [PairCategory; 4] = [
        PairCategory::DD,
        PairCategory::DS,
        PairCategory::SD,
        PairCategory::SS,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PairCategory::DD => "DD",
            PairCategory::DS => "DS",
            PairCategory::SD => "SD",
            PairCategory::SS => "SS",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PairCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn pair_category(a: &Subject, b: &Subject) -> PairCategory {
    match (a.gender == b.gender, a.race == b.race) {
        (true, true) => PairCategory::SS,
        (true, false) => PairCategory::SD,
        (false, true) => PairCategory::DS,
        (false, false) => PairCategory::DD,
    }
}

/// Smallest observed score `t` with `#{s >= t} / len <= target_fmr`.
pub fn fmr_threshold(non_mated: &[f64], target_fmr: f64) -> Result<f64, TailsError> {
    if !(target_fmr > 0.0 && target_fmr < 1.0) {
        return Err(TailsError::InvalidTarget(target_fmr));
    }
    if non_mated.is_empty() {
        return Err(TailsError::EmptySequence);
    }
    let total = non_mated.len();
    let mut sorted = non_mated.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));

    let mut best = None;
    let mut i = 0;
    while i < total {
        let t = sorted[i];
        // include every tie of t
        let mut j = i;
        while j + 1 < total && sorted[j + 1] == t {
            j += 1;
        }
        let at_or_above = j + 1;
        if at_or_above as f64 / total as f64 <= target_fmr {
            best = Some(t);
        } else {
            break;
        }
        i = j + 1;
    }
    best.ok_or(TailsError::Unachievable {
        target: target_fmr,
        total,
        fallback: sorted[0].next_up(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailEntry {
    pub subject_id: String,
    pub category: PairCategory,
    pub n_scores: usize,
    pub s99: f64,
    pub s99_normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedEntry {
    pub subject_id: String,
    pub category: PairCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailSummary {
    pub target_fmr: f64,
    pub fmr_threshold: f64,
    /// Set when no observed score reaches the target rate and the threshold
    /// is the next float above the maximum score.
    pub threshold_fallback: bool,
    pub race_comparison_set: Vec<String>,
    pub entries: Vec<TailEntry>,
    pub skipped: Vec<SkippedEntry>,
}

impl TailSummary {
    pub fn normalized(&self, category: PairCategory) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.category == category)
            .map(|e| e.s99_normalized)
            .collect()
    }

    pub fn median_normalized(&self, category: PairCategory) -> Option<f64> {
        let v = self.normalized(category);
        (!v.is_empty()).then(|| crate::stats::median(&v))
    }

    /// `subject_id,category,n_scores,s99,s99_normalized`
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subject_id", "category", "n_scores", "s99", "s99_normalized"])?;
        for e in &self.entries {
            w.write_record([
                e.subject_id.as_str(),
                e.category.as_str(),
                &e.n_scores.to_string(),
                &format!("{}", e.s99),
                &format!("{}", e.s99_normalized),
            ])?;
        }
        w.flush()
    }
}

/// Builds the per-subject, per-category S99 table.
///
/// Only subjects whose race is in `race_comparison_set` take part, on both
/// sides of a pair. The FMR threshold uses every non-mated score.
pub fn tail_summary(
    scores: &ScoreSet,
    subjects: &SubjectTable,
    target_fmr: f64,
    race_comparison_set: &[String],
) -> Result<TailSummary, TailsError> {
    let pool: Vec<f64> = scores.non_mated().map(|r| r.score).collect();
    let (threshold, fallback) = match fmr_threshold(&pool, target_fmr) {
        Ok(t) => (t, false),
        Err(TailsError::Unachievable { fallback, .. }) => (fallback, true),
        Err(e) => return Err(e),
    };

    let races: HashSet<&str> = race_comparison_set.iter().map(String::as_str).collect();
    let n = subjects.len();
    let entries_ref = subjects.entries();
    let included: Vec<bool> = entries_ref
        .iter()
        .map(|s| races.contains(s.race.as_str()))
        .collect();

    let mut buckets: Vec<[Vec<f64>; 4]> = (0..n).map(|_| Default::default()).collect();
    for r in scores.non_mated() {
        let p = subjects
            .position(&r.probe_subject_id)
            .ok_or_else(|| TailsError::UnknownSubject(r.probe_subject_id.clone()))?;
        let g = subjects
            .position(&r.gallery_subject_id)
            .ok_or_else(|| TailsError::UnknownSubject(r.gallery_subject_id.clone()))?;
        if !(included[p] && included[g]) {
            continue;
        }
        let c = pair_category(&entries_ref[p], &entries_ref[g]).index();
        buckets[p][c].push(r.score);
        buckets[g][c].push(r.score);
    }

    let per_subject: Vec<(Vec<TailEntry>, Vec<SkippedEntry>)> = buckets
        .par_iter()
        .enumerate()
        .filter(|(i, _)| included[*i])
        .map(|(i, cats)| {
            let id = &entries_ref[i].subject_id;
            let mut entries = Vec::new();
            let mut skipped = Vec::new();
            for cat in PairCategory::ALL {
                let pool = &cats[cat.index()];
                match percentile99(pool) {
                    Ok(s99) => entries.push(TailEntry {
                        subject_id: id.clone(),
                        category: cat,
                        n_scores: pool.len(),
                        s99,
                        s99_normalized: s99 / threshold,
                    }),
                    Err(_) => skipped.push(SkippedEntry {
                        subject_id: id.clone(),
                        category: cat,
                    }),
                }
            }
            (entries, skipped)
        })
        .collect();

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (e, s) in per_subject {
        entries.extend(e);
        skipped.extend(s);
    }
    Ok(TailSummary {
        target_fmr,
        fmr_threshold: threshold,
        threshold_fallback: fallback,
        race_comparison_set: race_comparison_set.to_vec(),
        entries,
        skipped,
    })
}
