//! Score-matrix reconstruction without selected components, and d-prime.

use std::collections::{BTreeSet, HashSet};

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::cluster::ClusteringResult;
use crate::decomp::Decomposition;
use crate::ingest::SubjectTable;
use crate::matrix::{distributions, DistributionView, MatrixError, ScoreMatrix};
use crate::stats::{mean, sample_variance, Summary};
use crate::tails::{pair_category, PairCategory};

pub const DPRIME_FORM: &str = "(mu_M - mu_NM) / sqrt((var_M + var_NM) / 2), sample variances";

const HISTOGRAM_BINS: usize = 40;

#[derive(Debug, Error, PartialEq)]
pub enum ReduceError {
    #[error("component index {index} out of range for {count} components")]
    InvalidComponent { index: usize, count: usize },
    #[error("mated or non-mated distribution is empty")]
    EmptyDistribution,
    #[error("pooled variance of mated and non-mated scores is zero")]
    DegenerateDistribution,
    #[error("decomposition and subject table list different subjects")]
    SubjectMismatch,
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub matrix: ScoreMatrix,
    /// Largest |X - Xᵀ| / 2 before symmetrization.
    pub max_asymmetry: f64,
}

/// Rebuilds the matrix from column means and every component not in
/// `excluded` (0-based), then symmetrizes as (X + Xᵀ) / 2.
pub fn reconstruct_excluding(
    d: &Decomposition,
    excluded: &BTreeSet<usize>,
) -> Result<Reconstruction, ReduceError> {
    let count = d.len();
    if let Some(&bad) = excluded.iter().find(|&&k| k >= count) {
        return Err(ReduceError::InvalidComponent { index: bad, count });
    }
    let mut kept_scores = d.scores_matrix().clone();
    for &k in excluded {
        kept_scores.column_mut(k).fill(0.0);
    }
    let mut x = kept_scores * d.components_matrix().transpose();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        col.add_scalar_mut(d.column_means()[j]);
    }

    let n = x.nrows();
    let mut max_asymmetry = 0.0f64;
    let mut sym = DMatrix::zeros(n, n);
    for i in 0..n {
        sym[(i, i)] = x[(i, i)];
        for j in i + 1..n {
            max_asymmetry = max_asymmetry.max((x[(i, j)] - x[(j, i)]).abs() / 2.0);
            let v = 0.5 * (x[(i, j)] + x[(j, i)]);
            sym[(i, j)] = v;
            sym[(j, i)] = v;
        }
    }
    Ok(Reconstruction {
        matrix: ScoreMatrix::from_values(d.subjects().to_vec(), sym)?,
        max_asymmetry,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DPrimeResult {
    pub mu_m: f64,
    pub var_m: f64,
    pub mu_nm: f64,
    pub var_nm: f64,
    pub d_prime: f64,
}

pub fn d_prime(view: &DistributionView) -> Result<DPrimeResult, ReduceError> {
    if view.mated.is_empty() || view.non_mated.is_empty() {
        return Err(ReduceError::EmptyDistribution);
    }
    let mu_m = mean(&view.mated);
    let mu_nm = mean(&view.non_mated);
    let var_m = sample_variance(&view.mated);
    let var_nm = sample_variance(&view.non_mated);
    let pooled = (var_m + var_nm) / 2.0;
    if pooled <= 0.0 {
        return Err(ReduceError::DegenerateDistribution);
    }
    Ok(DPrimeResult {
        mu_m,
        var_m,
        mu_nm,
        var_nm,
        d_prime: (mu_m - mu_nm) / pooled.sqrt(),
    })
}

/// Off-diagonal cells whose pair falls in `category`, limited to subjects
/// whose race is in `races`.
pub fn category_cells(
    matrix: &ScoreMatrix,
    subjects: &SubjectTable,
    category: PairCategory,
    races: &[String],
) -> Vec<f64> {
    let allowed: HashSet<&str> = races.iter().map(String::as_str).collect();
    let entries = subjects.entries();
    let n = matrix.len();
    let mut out = Vec::new();
    for i in 0..n {
        if !allowed.contains(entries[i].race.as_str()) {
            continue;
        }
        for j in i + 1..n {
            if allowed.contains(entries[j].race.as_str())
                && pair_category(&entries[i], &entries[j]) == category
            {
                out.push(matrix.get(i, j));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramRow {
    pub state: &'static str,
    pub distribution: &'static str,
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionReport {
    /// 1-based component indices removed.
    pub excluded_pcs: Vec<usize>,
    pub original: DPrimeResult,
    pub reduced: DPrimeResult,
    pub ss_original: Option<Summary>,
    pub dd_original: Option<Summary>,
    pub ss_reduced: Option<Summary>,
    pub dd_reduced: Option<Summary>,
    pub max_asymmetry: f64,
    pub d_prime_form: String,
    #[serde(skip)]
    pub histograms: Vec<HistogramRow>,
    #[serde(skip)]
    pub reduced_matrix: ScoreMatrix,
}

impl ReductionReport {
    pub fn ss_dd_gap_original(&self) -> Option<f64> {
        Some((self.ss_original?.mean - self.dd_original?.mean).abs())
    }

    pub fn ss_dd_gap_reduced(&self) -> Option<f64> {
        Some((self.ss_reduced?.mean - self.dd_reduced?.mean).abs())
    }

    /// `state,distribution,bin_low,bin_high,count`
    pub fn write_histograms_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["state", "distribution", "bin_low", "bin_high", "count"])?;
        for h in &self.histograms {
            w.write_record([
                h.state.to_string(),
                h.distribution.to_string(),
                format!("{}", h.bin_low),
                format!("{}", h.bin_high),
                h.count.to_string(),
            ])?;
        }
        w.flush()
    }
}

fn histograms(series: &[(&'static str, &'static str, &[f64])]) -> Vec<HistogramRow> {
    let (lo, hi) = series
        .iter()
        .flat_map(|(_, _, v)| v.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !lo.is_finite() {
        return Vec::new();
    }
    let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
    let mut rows = Vec::new();
    for &(state, distribution, values) in series {
        let mut counts = [0usize; HISTOGRAM_BINS];
        for &x in values {
            let b = (((x - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
            counts[b] += 1;
        }
        for (b, &count) in counts.iter().enumerate() {
            rows.push(HistogramRow {
                state,
                distribution,
                bin_low: lo + b as f64 * width,
                bin_high: lo + (b + 1) as f64 * width,
                count,
            });
        }
    }
    rows
}

/// Removes the significant components found by clustering.
pub fn reduction_report(
    original: &ScoreMatrix,
    d: &Decomposition,
    clustering: &ClusteringResult,
    subjects: &SubjectTable,
    races: &[String],
) -> Result<ReductionReport, ReduceError> {
    let excluded: BTreeSet<usize> = clustering.significant_indices().into_iter().collect();
    reduction_report_excluding(original, d, &excluded, subjects, races)
}

/// Removes an explicit set of 0-based components.
pub fn reduction_report_excluding(
    original: &ScoreMatrix,
    d: &Decomposition,
    excluded: &BTreeSet<usize>,
    subjects: &SubjectTable,
    races: &[String],
) -> Result<ReductionReport, ReduceError> {
    if original.subjects() != d.subjects()
        || subjects.len() != original.len()
        || subjects
            .entries()
            .iter()
            .zip(original.subjects())
            .any(|(s, id)| s.subject_id != *id)
    {
        return Err(ReduceError::SubjectMismatch);
    }
    let (reduced_matrix, max_asymmetry) = if excluded.is_empty() {
        (original.clone(), 0.0)
    } else {
        let r = reconstruct_excluding(d, excluded)?;
        (r.matrix, r.max_asymmetry)
    };

    let view_o = distributions(original);
    let view_r = distributions(&reduced_matrix);
    let ss_o = category_cells(original, subjects, PairCategory::SS, races);
    let dd_o = category_cells(original, subjects, PairCategory::DD, races);
    let ss_r = category_cells(&reduced_matrix, subjects, PairCategory::SS, races);
    let dd_r = category_cells(&reduced_matrix, subjects, PairCategory::DD, races);

    let hist = histograms(&[
        ("original", "M", &view_o.mated),
        ("original", "SS", &ss_o),
        ("original", "DD", &dd_o),
        ("reduced", "M", &view_r.mated),
        ("reduced", "SS", &ss_r),
        ("reduced", "DD", &dd_r),
    ]);

    Ok(ReductionReport {
        excluded_pcs: excluded.iter().map(|k| k + 1).collect(),
        original: d_prime(&view_o)?,
        reduced: d_prime(&view_r)?,
        ss_original: Summary::of(&ss_o),
        dd_original: Summary::of(&dd_o),
        ss_reduced: Summary::of(&ss_r),
        dd_reduced: Summary::of(&dd_r),
        max_asymmetry,
        d_prime_form: DPRIME_FORM.to_string(),
        histograms: hist,
        reduced_matrix,
    })
}
