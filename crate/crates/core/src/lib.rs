//! Demographic clustering audit for black-box biometric matchers.
//!
//! Starting from raw similarity scores and a subject table with gender and
//! race labels, the crate builds the averaged subject-pair score matrix,
//! decomposes it into principal components, measures how strongly each
//! component separates demographic groups, and estimates what discarding the
//! clustered components costs in mated/non-mated separation (d-prime).
//!
//! ```text
//! ingest ──► matrix ──► decomp ──► cluster ──► reduce
//!    └─────► tails
//! ```
//!
//! [`synth`] produces inputs with known planted structure for end-to-end
//! checks.

pub mod cluster;
pub mod decomp;
pub mod ingest;
pub mod matrix;
pub mod reduce;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod tails;

mod error;

pub use cluster::{
    clustering_index, null_distribution, significant_components, total_clustering,
    ClusteringResult, ComponentClustering,
};
pub use decomp::{pca_decompose, variance_fractions, Decomposition};
pub use error::{Error, ErrorKind};
pub use ingest::{
    parse_scores, parse_subjects, validate, ScoreRecord, ScoreSet, Subject, SubjectTable,
    ValidationReport,
};
pub use matrix::{
    build_score_matrix, distributions, normalize_nonmated, DistributionView, ScoreMatrix,
};
pub use reduce::{d_prime, reconstruct_excluding, reduction_report, DPrimeResult, ReductionReport};
pub use synth::{generate, oracle, NullSettings, OracleResult, SynthConfig};
pub use tails::{
    fmr_threshold, pair_category, percentile99, tail_summary, PairCategory, TailSummary,
};
