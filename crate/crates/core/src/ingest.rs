//! Score and subject-table ingestion.
//!
//! Both inputs are comma-separated text with a mandatory header row. Columns
//! are located by name, so extra columns (image ids, timestamps) are ignored.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("non-finite score at line {line}")]
    NonFiniteScore { line: u64 },
    #[error("input has no data rows")]
    EmptyInput,
    #[error("missing required column `{0}` in header")]
    MissingColumn(&'static str),
    #[error("duplicate subject id `{0}`")]
    DuplicateSubject(String),
    #[error("csv read error: {0}")]
    Csv(String),
}

/// One similarity score between a probe and a gallery sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub probe_subject_id: String,
    pub gallery_subject_id: String,
    pub score: f64,
}

impl ScoreRecord {
    /// Mated comparisons are exactly those whose two identifiers are equal.
    pub fn is_mated(&self) -> bool {
        self.probe_subject_id == self.gallery_subject_id
    }
}

/// All scores produced by one matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub algorithm_tag: String,
    pub records: Vec<ScoreRecord>,
}

impl ScoreSet {
    pub fn new(algorithm_tag: impl Into<String>, records: Vec<ScoreRecord>) -> Self {
        Self {
            algorithm_tag: algorithm_tag.into(),
            records,
        }
    }

    pub fn mated(&self) -> impl Iterator<Item = &ScoreRecord> {
        self.records.iter().filter(|r| r.is_mated())
    }

    pub fn non_mated(&self) -> impl Iterator<Item = &ScoreRecord> {
        self.records.iter().filter(|r| !r.is_mated())
    }

    /// Applies `f` to every score, keeping identifiers and order.
    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> ScoreSet {
        ScoreSet {
            algorithm_tag: self.algorithm_tag.clone(),
            records: self
                .records
                .iter()
                .map(|r| ScoreRecord {
                    score: f(r.score),
                    ..r.clone()
                })
                .collect(),
        }
    }

    /// Keeps only records whose two subjects are both in `keep`.
    pub fn retain_subjects(&self, keep: &HashSet<&str>) -> ScoreSet {
        ScoreSet {
            algorithm_tag: self.algorithm_tag.clone(),
            records: self
                .records
                .iter()
                .filter(|r| {
                    keep.contains(r.probe_subject_id.as_str())
                        && keep.contains(r.gallery_subject_id.as_str())
                })
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Subject {
    pub subject_id: String,
    pub gender: String,
    pub race: String,
    pub group: String,
}

/// Demographic group label: the cross of gender and race.
pub fn group_label(gender: &str, race: &str) -> String {
    format!("{gender}×{race}")
}

/// Subjects in file order with a derived gender×race group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SubjectTable {
    entries: Vec<Subject>,
    index: HashMap<String, usize>,
}

impl SubjectTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        subject_id: impl Into<String>,
        gender: impl Into<String>,
        race: impl Into<String>,
    ) -> Result<(), IngestError> {
        let subject_id = subject_id.into();
        if self.index.contains_key(&subject_id) {
            return Err(IngestError::DuplicateSubject(subject_id));
        }
        let gender = gender.into();
        let race = race.into();
        let group = group_label(&gender, &race);
        self.index.insert(subject_id.clone(), self.entries.len());
        self.entries.push(Subject {
            subject_id,
            gender,
            race,
            group,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Subject] {
        &self.entries
    }

    pub fn get(&self, subject_id: &str) -> Option<&Subject> {
        self.index.get(subject_id).map(|&i| &self.entries[i])
    }

    pub fn position(&self, subject_id: &str) -> Option<usize> {
        self.index.get(subject_id).copied()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|s| s.subject_id.clone()).collect()
    }

    /// Group index per subject (in table order) plus the distinct group
    /// labels, numbered by first appearance.
    pub fn group_indices(&self) -> (Vec<usize>, Vec<String>) {
        let mut labels: Vec<String> = Vec::new();
        let mut lookup: HashMap<&str, usize> = HashMap::new();
        let idx = self
            .entries
            .iter()
            .map(|s| {
                *lookup.entry(s.group.as_str()).or_insert_with(|| {
                    labels.push(s.group.clone());
                    labels.len() - 1
                })
            })
            .collect();
        (idx, labels)
    }

    /// The `k` most frequent race labels; ties broken by first appearance.
    pub fn most_frequent_races(&self, k: usize) -> Vec<String> {
        let mut counts: Vec<(String, usize)> = Vec::new();
        for s in &self.entries {
            match counts.iter_mut().find(|(r, _)| *r == s.race) {
                Some((_, c)) => *c += 1,
                None => counts.push((s.race.clone(), 1)),
            }
        }
        // stable sort keeps first-appearance order among ties
        counts.sort_by_key(|c| std::cmp::Reverse(c.1));
        counts.into_iter().take(k).map(|(r, _)| r).collect()
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn column(headers: &csv::StringRecord, name: &'static str) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or(IngestError::MissingColumn(name))
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn csv_err(e: csv::Error) -> IngestError {
    match e.position() {
        Some(p) => IngestError::MalformedRow {
            line: p.line(),
            reason: e.to_string(),
        },
        None => IngestError::Csv(e.to_string()),
    }
}

fn non_empty_field<'a>(
    record: &'a csv::StringRecord,
    col: usize,
    name: &str,
) -> Result<&'a str, IngestError> {
    let v = &record[col];
    if v.is_empty() {
        return Err(IngestError::MalformedRow {
            line: line_of(record),
            reason: format!("empty {name}"),
        });
    }
    Ok(v)
}

/// Parses a `probe_subject_id,gallery_subject_id,score` file.
pub fn parse_scores<R: Read>(input: R, algorithm_tag: &str) -> Result<ScoreSet, IngestError> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let probe_col = column(&headers, "probe_subject_id")?;
    let gallery_col = column(&headers, "gallery_subject_id")?;
    let score_col = column(&headers, "score")?;

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = line_of(&row);
        if row.len() != headers.len() {
            return Err(IngestError::MalformedRow {
                line,
                reason: format!("expected {} columns, found {}", headers.len(), row.len()),
            });
        }
        let probe = non_empty_field(&row, probe_col, "probe_subject_id")?;
        let gallery = non_empty_field(&row, gallery_col, "gallery_subject_id")?;
        let score: f64 = row[score_col]
            .parse()
            .map_err(|_| IngestError::MalformedRow {
                line,
                reason: format!("unparseable score `{}`", &row[score_col]),
            })?;
        if !score.is_finite() {
            return Err(IngestError::NonFiniteScore { line });
        }
        records.push(ScoreRecord {
            probe_subject_id: probe.to_string(),
            gallery_subject_id: gallery.to_string(),
            score,
        });
    }
    if records.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    Ok(ScoreSet::new(algorithm_tag, records))
}

/// Parses a `subject_id,gender,race` file.
pub fn parse_subjects<R: Read>(input: R) -> Result<SubjectTable, IngestError> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let id_col = column(&headers, "subject_id")?;
    let gender_col = column(&headers, "gender")?;
    let race_col = column(&headers, "race")?;

    let mut table = SubjectTable::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        if row.len() != headers.len() {
            return Err(IngestError::MalformedRow {
                line: line_of(&row),
                reason: format!("expected {} columns, found {}", headers.len(), row.len()),
            });
        }
        let id = non_empty_field(&row, id_col, "subject_id")?;
        let gender = non_empty_field(&row, gender_col, "gender")?;
        let race = non_empty_field(&row, race_col, "race")?;
        table.push(id, gender, race)?;
    }
    if table.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    Ok(table)
}

/// Writes scores in the format read by [`parse_scores`].
pub fn write_scores<W: Write>(scores: &ScoreSet, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["probe_subject_id", "gallery_subject_id", "score"])?;
    for r in &scores.records {
        // `{}` on f64 prints the shortest representation that round-trips
        w.write_record([
            r.probe_subject_id.as_str(),
            r.gallery_subject_id.as_str(),
            &format!("{}", r.score),
        ])?;
    }
    w.flush()
}

pub fn write_subjects<W: Write>(subjects: &SubjectTable, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subject_id", "gender", "race"])?;
    for s in subjects.entries() {
        w.write_record([&s.subject_id, &s.gender, &s.race])?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Ids present in scores but absent from the subject table.
    pub unknown_subjects: Vec<String>,
    /// Table subjects without a single mated record.
    pub no_mated_records: Vec<String>,
    /// Unordered pairs of table subjects with no non-mated record.
    pub missing_pairs: Vec<(String, String)>,
    pub mated_count: usize,
    pub non_mated_count: usize,
    pub auditable: bool,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.unknown_subjects.is_empty()
            && self.no_mated_records.is_empty()
            && self.missing_pairs.is_empty()
    }
}

/// Diagnoses coverage problems; never fails.
pub fn validate(scores: &ScoreSet, subjects: &SubjectTable) -> ValidationReport {
    let n = subjects.len();
    let mut unknown = BTreeSet::new();
    let mut has_mated = vec![false; n];
    // upper-triangle flags, row-major over i < j
    let mut has_pair = vec![false; n * n.saturating_sub(1) / 2];
    let tri = |i: usize, j: usize| i * n - i * (i + 1) / 2 + (j - i - 1);

    let mut mated_count = 0;
    let mut non_mated_count = 0;
    for r in &scores.records {
        let p = subjects.position(&r.probe_subject_id);
        let g = subjects.position(&r.gallery_subject_id);
        if p.is_none() {
            unknown.insert(r.probe_subject_id.clone());
        }
        if g.is_none() {
            unknown.insert(r.gallery_subject_id.clone());
        }
        if r.is_mated() {
            mated_count += 1;
        } else {
            non_mated_count += 1;
        }
        if let (Some(p), Some(g)) = (p, g) {
            if p == g {
                has_mated[p] = true;
            } else {
                let (i, j) = if p < g { (p, g) } else { (g, p) };
                has_pair[tri(i, j)] = true;
            }
        }
    }

    let ids = subjects.entries();
    let no_mated_records = (0..n)
        .filter(|&i| !has_mated[i])
        .map(|i| ids[i].subject_id.clone())
        .collect();
    let mut missing_pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if !has_pair[tri(i, j)] {
                missing_pairs.push((ids[i].subject_id.clone(), ids[j].subject_id.clone()));
            }
        }
    }

    let mut report = ValidationReport {
        unknown_subjects: unknown.into_iter().collect(),
        no_mated_records,
        missing_pairs,
        mated_count,
        non_mated_count,
        auditable: false,
    };
    report.auditable = report.is_clean() && mated_count > 0 && non_mated_count > 0 && n >= 2;
    report
}
