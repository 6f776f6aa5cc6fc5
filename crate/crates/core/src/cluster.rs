//! Demographic clustering of principal components.
//!
//! The clustering index of a component is the between-group share of the
//! total sum of squares of subjects' values on it: 1 means every group is
//! internally constant, 0 means group means coincide with the grand mean.
//! Significance compares each index with the upper quantile of a null built
//! by reassigning subjects to groups of the same sizes at random.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::decomp::{variance_fractions, Decomposition};
use crate::ingest::SubjectTable;
use crate::rng;
use crate::tails::upper_order_statistic;

pub const DEFAULT_SHUFFLES: usize = 500;
pub const DEFAULT_ALPHA: f64 = 0.01;

/// How null replicates relate across components; written to reports.
pub const NULL_SCOPE: &str = "per-component null, one label permutation per replicate shared by all components";

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("decomposition and subject table list different subjects")]
    SubjectMismatch,
    #[error("total variance is zero")]
    DegenerateMatrix,
    #[error("alpha {0} must lie strictly between 0 and 1")]
    InvalidAlpha(f64),
    #[error("need at least one shuffle")]
    NoShuffles,
}

/// Within-group over total sum of squares. `None` when the total is zero.
pub fn within_ratio(x: &[f64], groups: &[usize]) -> Option<f64> {
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
    let mut sums = vec![0.0; n_groups];
    let mut counts = vec![0usize; n_groups];
    for (&xi, &g) in x.iter().zip(groups) {
        sums[g] += xi;
        counts[g] += 1;
    }
    let grand = x.iter().sum::<f64>() / x.len() as f64;
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();

    let mut within = 0.0;
    let mut total = 0.0;
    for (&xi, &g) in x.iter().zip(groups) {
        within += (xi - means[g]).powi(2);
        total += (xi - grand).powi(2);
    }
    (total > 0.0).then(|| within / total)
}

/// Between-group share of the total sum of squares; 0 when `x` is constant.
pub fn clustering_index(x: &[f64], groups: &[usize]) -> f64 {
    match within_ratio(x, groups) {
        Some(r) => (1.0 - r).clamp(0.0, 1.0),
        None => 0.0,
    }
}

fn labels_from_sizes(group_sizes: &[usize]) -> Vec<usize> {
    group_sizes
        .iter()
        .enumerate()
        .flat_map(|(g, &s)| std::iter::repeat_n(g, s))
        .collect()
}

/// Group sizes of `groups`, indexed by group id.
pub fn group_sizes(groups: &[usize]) -> Vec<usize> {
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
    let mut sizes = vec![0; n_groups];
    for &g in groups {
        sizes[g] += 1;
    }
    sizes
}

fn shuffled_labels(base: &[usize], rng_seed: u64, replicate: usize) -> Vec<usize> {
    let mut labels = base.to_vec();
    let mut r = rng::stream(rng_seed, rng::domain::SHUFFLE, replicate as u64, 0);
    labels.shuffle(&mut r);
    labels
}

/// Clustering indices of `x` under `shuffles` random group assignments with
/// the given sizes. Replicate `r` is seeded from `(rng_seed, r)` alone.
pub fn null_distribution(x: &[f64], group_sizes: &[usize], shuffles: usize, rng_seed: u64) -> Vec<f64> {
    let base = labels_from_sizes(group_sizes);
    assert_eq!(base.len(), x.len(), "group sizes must sum to the number of subjects");
    (0..shuffles)
        .into_par_iter()
        .map(|r| clustering_index(x, &shuffled_labels(&base, rng_seed, r)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentClustering {
    /// 1-based component index.
    pub pc_index: usize,
    pub variance: f64,
    pub variance_fraction: f64,
    pub c_k: f64,
    /// Within-group over total sum of squares, i.e. `1 - c_k` for
    /// non-degenerate components.
    pub within_ratio: Option<f64>,
    pub null_q99: f64,
    pub significant: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusteringResult {
    pub components: Vec<ComponentClustering>,
    /// Variance-weighted clustering over all components.
    pub c_tot: f64,
    /// The same weighted sum restricted to significant components.
    pub c_tot_significant: f64,
    /// Share of total variance carried by significant components.
    pub significant_variance_fraction: f64,
    pub n_significant: usize,
    pub shuffles: usize,
    pub alpha: f64,
    pub rng_seed: u64,
    pub group_labels: Vec<String>,
    pub null_scope: String,
}

impl ClusteringResult {
    /// 0-based indices of significant components.
    pub fn significant_indices(&self) -> Vec<usize> {
        self.components
            .iter()
            .filter(|c| c.significant)
            .map(|c| c.pc_index - 1)
            .collect()
    }

    /// `pc_index,variance_fraction,c_k,null_q99,significant`
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["pc_index", "variance_fraction", "c_k", "null_q99", "significant"])?;
        for c in &self.components {
            w.write_record([
                c.pc_index.to_string(),
                format!("{}", c.variance_fraction),
                format!("{}", c.c_k),
                format!("{}", c.null_q99),
                c.significant.to_string(),
            ])?;
        }
        w.flush()
    }
}

/// Variance-weighted sum of clustering indices over all components.
pub fn total_clustering(variances: &[f64], total_variance: f64, c: &[f64]) -> Result<f64, ClusterError> {
    if total_variance <= 0.0 {
        return Err(ClusterError::DegenerateMatrix);
    }
    let s: f64 = variances.iter().zip(c).map(|(v, c)| v * c).sum();
    Ok((s / total_variance).clamp(0.0, 1.0))
}

pub fn significant_components(
    d: &Decomposition,
    subjects: &SubjectTable,
    shuffles: usize,
    rng_seed: u64,
    alpha: f64,
) -> Result<ClusteringResult, ClusterError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ClusterError::InvalidAlpha(alpha));
    }
    if shuffles == 0 {
        return Err(ClusterError::NoShuffles);
    }
    if d.subjects().len() != subjects.len()
        || d
            .subjects()
            .iter()
            .zip(subjects.entries())
            .any(|(a, b)| *a != b.subject_id)
    {
        return Err(ClusterError::SubjectMismatch);
    }

    let (groups, group_labels) = subjects.group_indices();
    let k_count = d.len();
    let base = labels_from_sizes(&group_sizes(&groups));

    let c: Vec<f64> = (0..k_count)
        .map(|k| {
            if d.is_degenerate(k) {
                0.0
            } else {
                clustering_index(d.scores(k), &groups)
            }
        })
        .collect();

    // null[r][k]: replicate r shares one permutation across all components
    let null: Vec<Vec<f64>> = (0..shuffles)
        .into_par_iter()
        .map(|r| {
            let labels = shuffled_labels(&base, rng_seed, r);
            (0..k_count)
                .map(|k| clustering_index(d.scores(k), &labels))
                .collect()
        })
        .collect();

    let fractions = variance_fractions(d).unwrap_or_else(|_| vec![0.0; k_count]);
    let q = 1.0 - alpha;
    let mut components = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let column: Vec<f64> = null.iter().map(|row| row[k]).collect();
        let null_q = upper_order_statistic(&column, q).expect("shuffles > 0");
        let degenerate = d.is_degenerate(k);
        components.push(ComponentClustering {
            pc_index: k + 1,
            variance: d.variances()[k],
            variance_fraction: fractions[k],
            c_k: c[k],
            within_ratio: if degenerate { None } else { within_ratio(d.scores(k), &groups) },
            null_q99: null_q,
            significant: !degenerate && c[k] > null_q,
            degenerate,
        });
    }

    let (c_tot, c_tot_significant) = if d.total_variance() > 0.0 {
        let sig_c: Vec<f64> = components
            .iter()
            .map(|x| if x.significant { x.c_k } else { 0.0 })
            .collect();
        (
            total_clustering(d.variances(), d.total_variance(), &c)?,
            total_clustering(d.variances(), d.total_variance(), &sig_c)?,
        )
    } else {
        (0.0, 0.0)
    };
    let n_significant = components.iter().filter(|x| x.significant).count();
    let significant_variance_fraction = components
        .iter()
        .filter(|x| x.significant)
        .map(|x| x.variance_fraction)
        .sum();

    Ok(ClusteringResult {
        components,
        c_tot,
        c_tot_significant,
        significant_variance_fraction,
        n_significant,
        shuffles,
        alpha,
        rng_seed,
        group_labels,
        null_scope: NULL_SCOPE.to_string(),
    })
}
