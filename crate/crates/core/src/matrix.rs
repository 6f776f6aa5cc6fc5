//! Averaged subject-pair score matrices.
//!
//! Cell `(i, j)` holds the mean of every score recorded between subjects `i`
//! and `j`, in either probe/gallery direction. Only the upper triangle is
//! accumulated and it is mirrored on output, so symmetry is exact.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::ingest::{ScoreSet, SubjectTable};

#[derive(Debug, Error, PartialEq)]
pub enum MatrixError {
    #[error("no scores for subject pair ({0}, {1})")]
    MissingPair(String, String),
    #[error("score references subject `{0}` absent from the subject table")]
    UnknownSubject(String),
    #[error("non-mated scores have zero spread")]
    DegenerateDistribution,
    #[error("matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("matrix shape mismatch: {0}")]
    Shape(String),
    #[error("matrix text error: {0}")]
    Parse(String),
}

/// Symmetric N×N matrix of average subject-pair scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    subjects: Vec<String>,
    values: DMatrix<f64>,
    counts: Option<Vec<u32>>,
}

/// What `build_score_matrix` does with pairs that have no records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    #[default]
    Fail,
    /// Off-diagonal gaps get the global non-mated mean, diagonal gaps the
    /// global mated mean.
    Impute,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Imputation {
    /// Unordered subject pairs filled in; each covers two mirrored cells.
    pub off_diagonal_cells: usize,
    pub off_diagonal_value: Option<f64>,
    pub diagonal_cells: usize,
    pub diagonal_value: Option<f64>,
}

impl Imputation {
    pub fn is_empty(&self) -> bool {
        self.off_diagonal_cells == 0 && self.diagonal_cells == 0
    }
}

impl ScoreMatrix {
    /// Wraps an existing matrix. Symmetry must already be exact.
    pub fn from_values(subjects: Vec<String>, values: DMatrix<f64>) -> Result<Self, MatrixError> {
        let n = subjects.len();
        if values.nrows() != n || values.ncols() != n {
            return Err(MatrixError::Shape(format!(
                "{} subjects but {}x{} values",
                n,
                values.nrows(),
                values.ncols()
            )));
        }
        for i in 0..n {
            for j in i + 1..n {
                if values[(i, j)] != values[(j, i)] {
                    return Err(MatrixError::NotSymmetric(i, j));
                }
            }
        }
        Ok(Self {
            subjects,
            values,
            counts: None,
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Contributing comparisons per cell, row-major; `None` for matrices
    /// that were not built from raw scores.
    pub fn counts(&self) -> Option<&[u32]> {
        self.counts.as_deref()
    }

    pub fn count(&self, i: usize, j: usize) -> Option<u32> {
        self.counts.as_ref().map(|c| c[i * self.len() + j])
    }

    /// Applies `f` to every cell.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScoreMatrix {
        ScoreMatrix {
            subjects: self.subjects.clone(),
            values: self.values.map(f),
            counts: self.counts.clone(),
        }
    }

    /// Writes `subject_id,<id1>,<id2>,...` followed by one row per subject.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["subject_id".to_string()];
        header.extend(self.subjects.iter().cloned());
        w.write_record(&header)?;
        for (i, id) in self.subjects.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend((0..self.len()).map(|j| format!("{}", self.values[(i, j)])));
            w.write_record(&row)?;
        }
        w.flush()
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, MatrixError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let headers = rdr
            .headers()
            .map_err(|e| MatrixError::Parse(e.to_string()))?
            .clone();
        let subjects: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let n = subjects.len();
        let mut values = DMatrix::zeros(n, n);
        let mut rows = 0;
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| MatrixError::Parse(e.to_string()))?;
            if i >= n {
                return Err(MatrixError::Shape("more rows than columns".into()));
            }
            if &row[0] != subjects[i].as_str() {
                return Err(MatrixError::Parse(format!(
                    "row {} is labelled `{}`, expected `{}`",
                    i + 1,
                    &row[0],
                    subjects[i]
                )));
            }
            for j in 0..n {
                values[(i, j)] = row[j + 1]
                    .parse()
                    .map_err(|_| MatrixError::Parse(format!("bad value `{}`", &row[j + 1])))?;
            }
            rows += 1;
        }
        if rows != n {
            return Err(MatrixError::Shape(format!("{rows} rows for {n} columns")));
        }
        Self::from_values(subjects, values)
    }
}

/// Builds the averaged score matrix in subject-table order.
pub fn build_score_matrix(
    scores: &ScoreSet,
    subjects: &SubjectTable,
) -> Result<ScoreMatrix, MatrixError> {
    build_score_matrix_with(scores, subjects, MissingPolicy::Fail).map(|(m, _)| m)
}

pub fn build_score_matrix_with(
    scores: &ScoreSet,
    subjects: &SubjectTable,
    policy: MissingPolicy,
) -> Result<(ScoreMatrix, Imputation), MatrixError> {
    let n = subjects.len();
    let mut sums = vec![0.0f64; n * n];
    let mut counts = vec![0u32; n * n];
    let (mut mated_sum, mut mated_n, mut nm_sum, mut nm_n) = (0.0, 0usize, 0.0, 0usize);

    // Accumulate into the upper triangle only; record order is the summation
    // order, so results do not depend on how callers partition work.
    for r in &scores.records {
        let p = subjects
            .position(&r.probe_subject_id)
            .ok_or_else(|| MatrixError::UnknownSubject(r.probe_subject_id.clone()))?;
        let g = subjects
            .position(&r.gallery_subject_id)
            .ok_or_else(|| MatrixError::UnknownSubject(r.gallery_subject_id.clone()))?;
        let (i, j) = if p <= g { (p, g) } else { (g, p) };
        sums[i * n + j] += r.score;
        counts[i * n + j] += 1;
        if i == j {
            mated_sum += r.score;
            mated_n += 1;
        } else {
            nm_sum += r.score;
            nm_n += 1;
        }
    }

    let ids = subjects.ids();
    let mut imputation = Imputation::default();
    let mut values = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let c = counts[i * n + j];
            let v = if c > 0 {
                sums[i * n + j] / c as f64
            } else {
                match policy {
                    MissingPolicy::Fail => {
                        return Err(MatrixError::MissingPair(ids[i].clone(), ids[j].clone()))
                    }
                    MissingPolicy::Impute if i == j && mated_n > 0 => {
                        let v = mated_sum / mated_n as f64;
                        imputation.diagonal_cells += 1;
                        imputation.diagonal_value = Some(v);
                        v
                    }
                    MissingPolicy::Impute if i != j && nm_n > 0 => {
                        let v = nm_sum / nm_n as f64;
                        imputation.off_diagonal_cells += 1;
                        imputation.off_diagonal_value = Some(v);
                        v
                    }
                    MissingPolicy::Impute => {
                        return Err(MatrixError::MissingPair(ids[i].clone(), ids[j].clone()))
                    }
                }
            };
            values[(i, j)] = v;
            values[(j, i)] = v;
            counts[j * n + i] = c;
        }
    }

    Ok((
        ScoreMatrix {
            subjects: ids,
            values,
            counts: Some(counts),
        },
        imputation,
    ))
}

/// Mean and population standard deviation of the off-diagonal cells.
pub fn nonmated_moments(matrix: &ScoreMatrix) -> (f64, f64) {
    let nm = distributions(matrix).non_mated;
    (crate::stats::mean(&nm), crate::stats::population_sd(&nm))
}

/// Z-scores every cell against the off-diagonal mean and population sd.
pub fn normalize_nonmated(matrix: &ScoreMatrix) -> Result<ScoreMatrix, MatrixError> {
    if matrix.len() < 2 {
        return Err(MatrixError::DegenerateDistribution);
    }
    let (mu, sd) = nonmated_moments(matrix);
    if sd == 0.0 || !sd.is_finite() {
        return Err(MatrixError::DegenerateDistribution);
    }
    Ok(matrix.map(|x| (x - mu) / sd))
}

/// Mated (diagonal) and non-mated (strict upper triangle) cell values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionView {
    pub mated: Vec<f64>,
    pub non_mated: Vec<f64>,
}

pub fn distributions(matrix: &ScoreMatrix) -> DistributionView {
    let n = matrix.len();
    let v = matrix.values();
    let mated = (0..n).map(|i| v[(i, i)]).collect();
    let mut non_mated = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            non_mated.push(v[(i, j)]);
        }
    }
    DistributionView { mated, non_mated }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ScoreRecord;
    use crate::stats::{mean, population_sd};
    use proptest::prelude::*;

    fn rec(p: &str, g: &str, s: f64) -> ScoreRecord {
        ScoreRecord {
            probe_subject_id: p.into(),
            gallery_subject_id: g.into(),
            score: s,
        }
    }

    fn table(ids: &[&str]) -> SubjectTable {
        let mut t = SubjectTable::new();
        for id in ids {
            t.push(*id, "F", "B").unwrap();
        }
        t
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("S{i}")).collect()
    }

    #[test]
    fn averages_both_directions() {
        let t = table(&["A", "B"]);
        let s = ScoreSet::new(
            "x",
            vec![
                rec("A", "B", 1.0),
                rec("B", "A", 3.0),
                rec("A", "A", 5.0),
                rec("A", "A", 7.0),
                rec("B", "B", 2.0),
            ],
        );
        let m = build_score_matrix(&s, &t).unwrap();
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.get(1, 0), 2.0);
        assert_eq!(m.get(0, 0), 6.0);
        assert_eq!(m.count(0, 0), Some(2));
        assert_eq!(m.count(1, 0), Some(2));
    }

    #[test]
    fn missing_pair_is_fatal_unless_imputed() {
        let t = table(&["A", "B", "C"]);
        let s = ScoreSet::new(
            "x",
            vec![
                rec("A", "A", 5.0),
                rec("B", "B", 5.0),
                rec("C", "C", 5.0),
                rec("A", "B", 1.0),
                rec("A", "C", 3.0),
            ],
        );
        assert_eq!(
            build_score_matrix(&s, &t),
            Err(MatrixError::MissingPair("B".into(), "C".into()))
        );
        let (m, imp) = build_score_matrix_with(&s, &t, MissingPolicy::Impute).unwrap();
        assert_eq!(m.get(1, 2), 2.0);
        assert_eq!(imp.off_diagonal_cells, 1);
        assert_eq!(m.count(1, 2), Some(0));
    }

    #[test]
    fn unknown_subject_rejected() {
        let t = table(&["A"]);
        let s = ScoreSet::new("x", vec![rec("A", "Z", 1.0)]);
        assert_eq!(
            build_score_matrix(&s, &t),
            Err(MatrixError::UnknownSubject("Z".into()))
        );
    }

    #[test]
    fn full_coverage_333_has_110889_cells() {
        let n = 333;
        let mut t = SubjectTable::new();
        for i in 0..n {
            t.push(format!("S{i}"), "F", "B").unwrap();
        }
        let mut records = Vec::new();
        for i in 0..n {
            for j in i..n {
                records.push(rec(&format!("S{i}"), &format!("S{j}"), (i + j) as f64));
            }
        }
        let m = build_score_matrix(&ScoreSet::new("x", records), &t).unwrap();
        assert_eq!(m.values().len(), 110_889);
        let d = distributions(&m);
        assert_eq!(d.mated.len(), 333);
        assert_eq!(d.non_mated.len(), 55_278);
    }

    #[test]
    fn normalize_three_by_three() {
        let v = DMatrix::from_row_slice(3, 3, &[9.0, 0.0, 2.0, 0.0, 9.0, 4.0, 2.0, 4.0, 9.0]);
        let m = ScoreMatrix::from_values(ids(3), v).unwrap();
        let z = normalize_nonmated(&m).unwrap();
        let nm = distributions(&z).non_mated;
        // oracle: mean 2, population sd sqrt(8/3)
        let sd = (8.0f64 / 3.0).sqrt();
        assert!((nm[0] - (0.0 - 2.0) / sd).abs() < 1e-15);
        assert!((nm[1] - 0.0).abs() < 1e-15);
        assert!((nm[2] - 2.0 / sd).abs() < 1e-15);
        assert!(mean(&nm).abs() < 1e-15);
        assert!((population_sd(&nm) - 1.0).abs() < 1e-15);
        assert!((z.get(0, 0) - 7.0 / sd).abs() < 1e-14);
    }

    #[test]
    fn normalize_degenerate() {
        let v = DMatrix::from_row_slice(2, 2, &[5.0, 1.0, 1.0, 6.0]);
        let m = ScoreMatrix::from_values(ids(2), v).unwrap();
        assert_eq!(normalize_nonmated(&m), Err(MatrixError::DegenerateDistribution));
    }

    #[test]
    fn distributions_two_by_two() {
        let v = DMatrix::from_row_slice(2, 2, &[5.0, 1.0, 1.0, 6.0]);
        let m = ScoreMatrix::from_values(ids(2), v).unwrap();
        let d = distributions(&m);
        assert_eq!(d.mated, vec![5.0, 6.0]);
        assert_eq!(d.non_mated, vec![1.0]);
        let eye = ScoreMatrix::from_values(ids(4), DMatrix::identity(4, 4)).unwrap();
        assert!(distributions(&eye).non_mated.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn from_values_rejects_asymmetry() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 1.0]);
        assert_eq!(
            ScoreMatrix::from_values(ids(2), v),
            Err(MatrixError::NotSymmetric(0, 1))
        );
    }

    #[test]
    fn csv_round_trip() {
        let v = DMatrix::from_row_slice(3, 3, &[9.0, 0.1, 2.5, 0.1, 8.0, -4.0, 2.5, -4.0, 7.25]);
        let m = ScoreMatrix::from_values(ids(3), v).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("subject_id,S0,S1,S2\nS0,9,0.1,2.5\n"));
        assert_eq!(ScoreMatrix::read_csv(buf.as_slice()).unwrap(), m);
    }

    fn random_symmetric(n: usize, cells: &[f64]) -> ScoreMatrix {
        let mut v = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                v[(i, j)] = cells[k];
                v[(j, i)] = cells[k];
                k += 1;
            }
        }
        ScoreMatrix::from_values(ids(n), v).unwrap()
    }

    proptest! {
        #[test]
        fn normalized_nonmated_is_standard(
            n in 3usize..12,
            cells in prop::collection::vec(-50.0f64..50.0, 80)
        ) {
            let m = random_symmetric(n, &cells);
            let z = normalize_nonmated(&m).unwrap();
            let nm = distributions(&z).non_mated;
            prop_assert!(mean(&nm).abs() < 1e-10);
            prop_assert!((population_sd(&nm) - 1.0).abs() < 1e-10);
            // idempotent
            let zz = normalize_nonmated(&z).unwrap();
            for (a, b) in z.values().iter().zip(zz.values().iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn build_ignores_order_and_direction(
            raw in prop::collection::vec((0usize..4, 0usize..4, -10.0f64..10.0), 0..30),
            seed in any::<u64>()
        ) {
            let names = ["A", "B", "C", "D"];
            let t = table(&names);
            let mut records = Vec::new();
            for i in 0..4 {
                for j in i..4 {
                    records.push(rec(names[i], names[j], (i * 4 + j) as f64));
                }
            }
            for (p, g, s) in &raw {
                records.push(rec(names[*p], names[*g], *s));
            }
            let base = build_score_matrix(&ScoreSet::new("x", records.clone()), &t).unwrap();

            let mut shuffled: Vec<ScoreRecord> = records
                .iter()
                .map(|r| rec(&r.gallery_subject_id, &r.probe_subject_id, r.score))
                .collect();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let other = build_score_matrix(&ScoreSet::new("x", shuffled), &t).unwrap();
            for (a, b) in base.values().iter().zip(other.values().iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
            for i in 0..4 {
                for j in 0..4 {
                    prop_assert_eq!(base.get(i, j).to_bits(), base.get(j, i).to_bits());
                }
            }
        }
    }
}
