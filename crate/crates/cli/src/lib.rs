//! Audit orchestration: ingest → matrix → tails → decomposition →
//! clustering → reduction, plus report and table emission.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use demaudit_core::cluster::{ClusteringResult, NULL_SCOPE};
use demaudit_core::decomp::{pca_decompose, variance_fractions, Decomposition};
use demaudit_core::ingest::{parse_scores, parse_subjects, validate, ScoreSet, SubjectTable, ValidationReport};
use demaudit_core::matrix::{build_score_matrix_with, normalize_nonmated, Imputation, MissingPolicy, ScoreMatrix};
use demaudit_core::reduce::{reduction_report, reduction_report_excluding, ReductionReport, DPRIME_FORM};
use demaudit_core::tails::{tail_summary, PairCategory, TailSummary};
use demaudit_core::{significant_components, Error as CoreError, ErrorKind};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("[{algorithm}] {stage}: {source}")]
    Stage {
        algorithm: String,
        stage: &'static str,
        #[source]
        source: CoreError,
    },
    #[error("[{algorithm}] input is not auditable: {detail}")]
    Validation { algorithm: String, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O failure at {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AuditError {
    /// 0 success, 1 validation, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            AuditError::Stage { source, .. } => match source.kind() {
                ErrorKind::Validation => 1,
                ErrorKind::Numerical => 2,
            },
            AuditError::Validation { .. } | AuditError::Config(_) => 1,
            AuditError::IoFailure { .. } => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AuditError + '_ {
    move |source| AuditError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreInput {
    pub algorithm_tag: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditConfig {
    pub scores: Vec<ScoreInput>,
    pub subjects_path: PathBuf,
    pub target_fmr: f64,
    pub shuffles: usize,
    /// Significance level; the null threshold is the ceiling order
    /// statistic at `1 - alpha`, the 99th percentile at the default.
    pub alpha: f64,
    pub rng_seed: u64,
    /// Races kept for category comparisons; `None` picks the two most
    /// frequent labels in the subject table.
    pub race_comparison_set: Option<Vec<String>>,
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub allow_missing: bool,
    pub drop_unknown: bool,
    /// 1-based components to remove instead of the significant ones.
    pub exclude_pcs: Option<Vec<usize>>,
    pub emit_matrix: bool,
}

impl AuditConfig {
    pub fn new(scores: Vec<ScoreInput>, subjects_path: PathBuf, output_dir: PathBuf) -> Self {
        Self {
            scores,
            subjects_path,
            target_fmr: 1e-4,
            shuffles: 500,
            alpha: 0.01,
            rng_seed: 0,
            race_comparison_set: None,
            output_dir,
            allow_missing: false,
            drop_unknown: false,
            exclude_pcs: None,
            emit_matrix: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Conventions {
    pub clustering_index: &'static str,
    pub clustering_null: &'static str,
    pub significance: &'static str,
    pub percentile: &'static str,
    pub d_prime: &'static str,
    pub pca: &'static str,
    pub nonmated_normalization: &'static str,
}

const CONVENTIONS: Conventions = Conventions {
    clustering_index: "1 - within-group SS / total SS (between-group share); 0 for constant values",
    clustering_null: NULL_SCOPE,
    significance: "c_k strictly greater than the ceiling order statistic at 1 - alpha of the null",
    percentile: "n-th smallest with n = ceil(q * len), no interpolation",
    d_prime: DPRIME_FORM,
    pca: "columns centered, not scaled; all N components kept; variances divide by N - 1",
    nonmated_normalization: "z-score against off-diagonal mean and population sd",
};

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    /// Wall-clock time of the run; the only field that differs between
    /// repeated runs on identical inputs.
    pub generated_at: String,
    pub config: AuditConfig,
    pub input_digests: Vec<InputDigest>,
    pub conventions: Conventions,
}

#[derive(Debug, Clone, Serialize)]
pub struct CategoryMedian {
    pub category: PairCategory,
    pub subjects: usize,
    pub median_s99_normalized: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailOverview {
    pub table: String,
    pub target_fmr: f64,
    pub fmr_threshold: f64,
    pub threshold_fallback: bool,
    pub race_comparison_set: Vec<String>,
    pub medians: Vec<CategoryMedian>,
    pub skipped_entries: usize,
}

impl TailOverview {
    fn of(t: &TailSummary, table: String) -> Self {
        let medians = PairCategory::ALL
            .iter()
            .filter_map(|&c| {
                Some(CategoryMedian {
                    category: c,
                    subjects: t.normalized(c).len(),
                    median_s99_normalized: t.median_normalized(c)?,
                })
            })
            .collect();
        Self {
            table,
            target_fmr: t.target_fmr,
            fmr_threshold: t.fmr_threshold,
            threshold_fallback: t.threshold_fallback,
            race_comparison_set: t.race_comparison_set.clone(),
            medians,
            skipped_entries: t.skipped.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DecompositionOverview {
    pub components: usize,
    pub total_variance: f64,
    pub first_two_variance_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlgorithmReport {
    pub algorithm_tag: String,
    pub subjects: usize,
    pub records: usize,
    pub dropped_unknown_records: usize,
    pub validation: ValidationSummary,
    pub imputation: Imputation,
    pub tails: TailOverview,
    pub decomposition: DecompositionOverview,
    pub c_tot: f64,
    pub n_significant: usize,
    pub excluded_pcs: Vec<usize>,
    pub d_prime_original: f64,
    pub d_prime_reduced: f64,
    pub clustering: ClusteringResult,
    pub reduction: ReductionReport,
    #[serde(skip)]
    pub artifacts: Artifacts,
}

/// Data behind the plot-ready tables; not part of `report.json`.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub tails: TailSummary,
    pub decomposition: Decomposition,
    pub matrix: ScoreMatrix,
    pub normalized_matrix: Option<ScoreMatrix>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationSummary {
    pub unknown_subjects: usize,
    pub no_mated_records: usize,
    pub missing_pairs: usize,
    pub mated_count: usize,
    pub non_mated_count: usize,
    pub auditable: bool,
}

impl From<&ValidationReport> for ValidationSummary {
    fn from(r: &ValidationReport) -> Self {
        Self {
            unknown_subjects: r.unknown_subjects.len(),
            no_mated_records: r.no_mated_records.len(),
            missing_pairs: r.missing_pairs.len(),
            mated_count: r.mated_count,
            non_mated_count: r.non_mated_count,
            auditable: r.auditable,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub schema_version: &'static str,
    pub metadata: Metadata,
    pub algorithms: Vec<AlgorithmReport>,
}

impl AuditReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_input(path: &Path) -> Result<(Vec<u8>, InputDigest), AuditError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let digest = InputDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    };
    Ok((bytes, digest))
}

fn stage<'a>(algorithm: &'a str, stage: &'static str) -> impl FnOnce(CoreError) -> AuditError + 'a {
    move |source| AuditError::Stage {
        algorithm: algorithm.to_string(),
        stage,
        source,
    }
}

fn check_config(config: &AuditConfig) -> Result<(), AuditError> {
    if config.scores.is_empty() {
        return Err(AuditError::Config("at least one scores file is required".into()));
    }
    if !(config.target_fmr > 0.0 && config.target_fmr < 1.0) {
        return Err(AuditError::Config(format!("target FMR {} not in (0, 1)", config.target_fmr)));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(AuditError::Config(format!("alpha {} not in (0, 1)", config.alpha)));
    }
    if config.shuffles == 0 {
        return Err(AuditError::Config("shuffles must be at least 1".into()));
    }
    let mut tags = BTreeSet::new();
    for s in &config.scores {
        if !tags.insert(file_tag(&s.algorithm_tag)) {
            return Err(AuditError::Config(format!("duplicate algorithm tag `{}`", s.algorithm_tag)));
        }
    }
    Ok(())
}

/// Runs the pipeline for one algorithm's scores.
pub fn audit_scores(
    scores: ScoreSet,
    subjects: &SubjectTable,
    races: &[String],
    config: &AuditConfig,
) -> Result<AlgorithmReport, AuditError> {
    let tag = scores.algorithm_tag.clone();
    let original_records = scores.records.len();

    let report = validate(&scores, subjects);
    let scores = if !report.unknown_subjects.is_empty() {
        if !config.drop_unknown {
            return Err(AuditError::Validation {
                algorithm: tag,
                detail: format!(
                    "{} subject id(s) missing from the subject table (first: {}); pass --drop-unknown to discard their records",
                    report.unknown_subjects.len(),
                    report.unknown_subjects[0]
                ),
            });
        }
        let keep = subjects.entries().iter().map(|s| s.subject_id.as_str()).collect();
        scores.retain_subjects(&keep)
    } else {
        scores
    };
    let dropped = original_records - scores.records.len();
    let report = validate(&scores, subjects);
    if report.mated_count == 0 || report.non_mated_count == 0 {
        return Err(AuditError::Validation {
            algorithm: tag,
            detail: "need at least one mated and one non-mated score".into(),
        });
    }
    if !report.auditable && !config.allow_missing {
        return Err(AuditError::Validation {
            algorithm: tag,
            detail: format!(
                "{} subject(s) without mated scores, {} pair(s) without non-mated scores; pass --allow-missing to impute",
                report.no_mated_records.len(),
                report.missing_pairs.len()
            ),
        });
    }

    let policy = if config.allow_missing { MissingPolicy::Impute } else { MissingPolicy::Fail };
    let (matrix, imputation) =
        build_score_matrix_with(&scores, subjects, policy).map_err(|e| stage(&tag, "matrix")(e.into()))?;

    let tails = tail_summary(&scores, subjects, config.target_fmr, races)
        .map_err(|e| stage(&tag, "tails")(e.into()))?;

    let decomposition = pca_decompose(&matrix).map_err(|e| stage(&tag, "decomposition")(e.into()))?;
    let fractions = variance_fractions(&decomposition).map_err(|e| stage(&tag, "decomposition")(e.into()))?;

    let clustering = significant_components(&decomposition, subjects, config.shuffles, config.rng_seed, config.alpha)
        .map_err(|e| stage(&tag, "clustering")(e.into()))?;

    let reduction = match &config.exclude_pcs {
        Some(pcs) => {
            let mut excluded = BTreeSet::new();
            for &pc in pcs {
                if pc == 0 || pc > decomposition.len() {
                    return Err(AuditError::Config(format!(
                        "component {pc} out of range 1..={}",
                        decomposition.len()
                    )));
                }
                excluded.insert(pc - 1);
            }
            reduction_report_excluding(&matrix, &decomposition, &excluded, subjects, races)
        }
        None => reduction_report(&matrix, &decomposition, &clustering, subjects, races),
    }
    .map_err(|e| stage(&tag, "reduction")(e.into()))?;

    let normalized_matrix = if config.emit_matrix {
        normalize_nonmated(&matrix).ok()
    } else {
        None
    };

    let file = file_tag(&tag);
    Ok(AlgorithmReport {
        subjects: subjects.len(),
        records: scores.records.len(),
        dropped_unknown_records: dropped,
        validation: (&report).into(),
        imputation,
        tails: TailOverview::of(&tails, format!("tails_{file}.csv")),
        decomposition: DecompositionOverview {
            components: decomposition.len(),
            total_variance: decomposition.total_variance(),
            first_two_variance_fraction: fractions.iter().take(2).sum(),
        },
        c_tot: clustering.c_tot,
        n_significant: clustering.n_significant,
        excluded_pcs: reduction.excluded_pcs.clone(),
        d_prime_original: reduction.original.d_prime,
        d_prime_reduced: reduction.reduced.d_prime,
        clustering,
        reduction,
        artifacts: Artifacts {
            tails,
            decomposition,
            matrix,
            normalized_matrix,
        },
        algorithm_tag: tag,
    })
}

/// Loads inputs, audits every algorithm, and writes all outputs.
pub fn run_audit(config: &AuditConfig) -> Result<(AuditReport, Manifest), AuditError> {
    let report = compute_audit(config)?;
    let manifest = emit_report(&report, &config.output_dir)?;
    Ok((report, manifest))
}

/// The audit without writing anything.
pub fn compute_audit(config: &AuditConfig) -> Result<AuditReport, AuditError> {
    check_config(config)?;
    let (subject_bytes, subject_digest) = read_input(&config.subjects_path)?;
    let subjects = parse_subjects(subject_bytes.as_slice()).map_err(|e| stage("subjects", "ingest")(e.into()))?;
    let races = config
        .race_comparison_set
        .clone()
        .unwrap_or_else(|| subjects.most_frequent_races(2));

    let mut digests = vec![subject_digest];
    let mut inputs = Vec::new();
    for s in &config.scores {
        let (bytes, digest) = read_input(&s.path)?;
        digests.push(digest);
        inputs.push((s.algorithm_tag.clone(), bytes));
    }

    let algorithms = inputs
        .into_par_iter()
        .map(|(tag, bytes)| {
            let scores = parse_scores(bytes.as_slice(), &tag).map_err(|e| stage(&tag, "ingest")(e.into()))?;
            audit_scores(scores, &subjects, &races, config)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut echoed = config.clone();
    echoed.race_comparison_set = Some(races);
    Ok(AuditReport {
        schema_version: SCHEMA_VERSION,
        metadata: Metadata {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            generated_at: chrono::Utc::now().to_rfc3339(),
            config: echoed,
            input_digests: digests,
            conventions: CONVENTIONS,
        },
        algorithms,
    })
}

/// File-name-safe form of an algorithm tag.
pub fn file_tag(tag: &str) -> String {
    tag.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

struct Emitter<'a> {
    dir: &'a Path,
    files: Vec<ManifestEntry>,
}

impl Emitter<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), AuditError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.files.push(ManifestEntry {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    fn table(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    ) -> Result<(), AuditError> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(io_err(&self.dir.join(name)))?;
        self.write(name, &buf)
    }
}

#[derive(Serialize)]
struct TailsHeader<'a> {
    algorithm_tag: &'a str,
    target_fmr: f64,
    fmr_threshold: f64,
    threshold_fallback: bool,
    race_comparison_set: &'a [String],
    table: String,
}

/// Writes `report.json`, the per-algorithm tables and `manifest.json`.
pub fn emit_report(report: &AuditReport, output_dir: &Path) -> Result<Manifest, AuditError> {
    fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let mut e = Emitter {
        dir: output_dir,
        files: Vec::new(),
    };
    e.write("report.json", report.to_json().as_bytes())?;

    for alg in &report.algorithms {
        let tag = file_tag(&alg.algorithm_tag);
        let a = &alg.artifacts;
        e.table(&format!("pc_clustering_{tag}.csv"), |b| alg.clustering.write_csv(b))?;
        e.table(&format!("tails_{tag}.csv"), |b| a.tails.write_csv(b))?;
        let header = TailsHeader {
            algorithm_tag: &alg.algorithm_tag,
            target_fmr: a.tails.target_fmr,
            fmr_threshold: a.tails.fmr_threshold,
            threshold_fallback: a.tails.threshold_fallback,
            race_comparison_set: &a.tails.race_comparison_set,
            table: format!("tails_{tag}.csv"),
        };
        e.write(
            &format!("tails_{tag}.json"),
            serde_json::to_string_pretty(&header).expect("header serializes").as_bytes(),
        )?;
        e.table(&format!("distributions_{tag}.csv"), |b| alg.reduction.write_histograms_csv(b))?;
        e.table(&format!("pc_values_{tag}.csv"), |b| a.decomposition.write_values_csv(b))?;
        e.table(&format!("pc_variance_{tag}.csv"), |b| a.decomposition.write_variance_csv(b))?;
        if report.metadata.config.emit_matrix {
            e.table(&format!("matrix_{tag}.csv"), |b| a.matrix.write_csv(b))?;
            if let Some(z) = &a.normalized_matrix {
                e.table(&format!("matrix_normalized_{tag}.csv"), |b| z.write_csv(b))?;
            }
            e.table(&format!("matrix_reduced_{tag}.csv"), |b| {
                alg.reduction.reduced_matrix.write_csv(b)
            })?;
        }
    }

    let manifest = Manifest { files: e.files };
    let path = output_dir.join("manifest.json");
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)
        .map_err(|err| AuditError::IoFailure { path, source: err.into() })?;
    Ok(manifest)
}

/// Tails-only quick mode: writes `tails_<alg>.csv` and `tails_<alg>.json`.
pub fn run_tails(config: &AuditConfig) -> Result<Vec<(String, TailSummary)>, AuditError> {
    check_config(config)?;
    let (subject_bytes, _) = read_input(&config.subjects_path)?;
    let subjects = parse_subjects(subject_bytes.as_slice()).map_err(|e| stage("subjects", "ingest")(e.into()))?;
    let races = config
        .race_comparison_set
        .clone()
        .unwrap_or_else(|| subjects.most_frequent_races(2));
    fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
    let mut e = Emitter {
        dir: &config.output_dir,
        files: Vec::new(),
    };
    let mut out = Vec::new();
    for s in &config.scores {
        let (bytes, _) = read_input(&s.path)?;
        let tag = &s.algorithm_tag;
        let mut scores = parse_scores(bytes.as_slice(), tag).map_err(|e| stage(tag, "ingest")(e.into()))?;
        if config.drop_unknown {
            let keep = subjects.entries().iter().map(|s| s.subject_id.as_str()).collect();
            scores = scores.retain_subjects(&keep);
        }
        let t = tail_summary(&scores, &subjects, config.target_fmr, &races)
            .map_err(|e| stage(tag, "tails")(e.into()))?;
        let file = file_tag(tag);
        e.table(&format!("tails_{file}.csv"), |b| t.write_csv(b))?;
        let header = TailsHeader {
            algorithm_tag: tag,
            target_fmr: t.target_fmr,
            fmr_threshold: t.fmr_threshold,
            threshold_fallback: t.threshold_fallback,
            race_comparison_set: &t.race_comparison_set,
            table: format!("tails_{file}.csv"),
        };
        e.write(
            &format!("tails_{file}.json"),
            serde_json::to_string_pretty(&header).expect("header serializes").as_bytes(),
        )?;
        out.push((tag.clone(), t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_tags_are_path_safe() {
        assert_eq!(file_tag("face 1/x"), "face_1_x");
        assert_eq!(file_tag("iris-2.v1"), "iris-2.v1");
    }

    #[test]
    fn exit_codes() {
        let e = AuditError::Stage {
            algorithm: "a".into(),
            stage: "decomposition",
            source: demaudit_core::decomp::DecompError::NumericalFailure.into(),
        };
        assert_eq!(e.exit_code(), 2);
        let e = AuditError::IoFailure {
            path: "x".into(),
            source: std::io::Error::other("boom"),
        };
        assert_eq!(e.exit_code(), 3);
        assert_eq!(AuditError::Config("x".into()).exit_code(), 1);
    }
}
