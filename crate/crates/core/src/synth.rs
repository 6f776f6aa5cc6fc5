//! Synthetic matcher with planted identity, demographic and noise structure.
//!
//! Every comparison between subjects `i` and `j` scores
//!
//! ```text
//! base + mated_offset·[i = j] + demographic_affinity·[group(i) = group(j)]
//!      + identity_scale·(u_i · u_j) + noise
//! ```
//!
//! where `u_i` is a per-subject latent vector with independent N(0, 1/d)
//! entries and the noise is N(0, noise_sd²). Each unordered pair, including
//! a subject with itself, receives `images_per_subject` comparisons.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{significant_components, ClusterError, DEFAULT_ALPHA, DEFAULT_SHUFFLES};
use crate::decomp::{pca_decompose, DecompError};
use crate::ingest::{ScoreRecord, ScoreSet, SubjectTable};
use crate::matrix::ScoreMatrix;
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Decomp(#[from] DecompError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub gender: String,
    pub race: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub group_sizes: Vec<GroupSpec>,
    pub images_per_subject: usize,
    pub base: f64,
    pub mated_offset: f64,
    pub demographic_affinity: f64,
    pub identity_scale: f64,
    pub latent_dim: usize,
    pub noise_sd: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let group = |gender: &str, race: &str| GroupSpec {
            gender: gender.into(),
            race: race.into(),
            count: 80,
        };
        Self {
            group_sizes: vec![group("F", "B"), group("F", "W"), group("M", "B"), group("M", "W")],
            images_per_subject: 32,
            base: 0.0,
            mated_offset: 2.0,
            demographic_affinity: 0.2,
            identity_scale: 1.0,
            latent_dim: 8,
            noise_sd: 0.5,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    /// `n` subjects split as evenly as possible over gender {F, M} × race {B, W}.
    pub fn balanced(n: usize) -> Self {
        let mut cfg = Self::default();
        for (k, g) in cfg.group_sizes.iter_mut().enumerate() {
            g.count = n / 4 + usize::from(k < n % 4);
        }
        cfg
    }

    pub fn total_subjects(&self) -> usize {
        self.group_sizes.iter().map(|g| g.count).sum()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.total_subjects() < 2 {
            return bad("need at least 2 subjects");
        }
        if self.images_per_subject == 0 {
            return bad("images_per_subject must be at least 1");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        let reals = [
            self.base,
            self.mated_offset,
            self.demographic_affinity,
            self.identity_scale,
            self.noise_sd,
        ];
        if reals.iter().any(|x| !x.is_finite()) {
            return bad("parameters must be finite");
        }
        if self.mated_offset <= 0.0 {
            return bad("mated_offset must be positive");
        }
        if self.demographic_affinity < 0.0 || self.identity_scale < 0.0 || self.noise_sd < 0.0 {
            return bad("demographic_affinity, identity_scale and noise_sd must be non-negative");
        }
        let mut seen = std::collections::HashSet::new();
        for g in &self.group_sizes {
            if !seen.insert((&g.gender, &g.race)) {
                return bad("duplicate (gender, race) group");
            }
        }
        Ok(())
    }

    pub fn subjects(&self) -> SubjectTable {
        let width = self.total_subjects().to_string().len().max(3);
        let mut t = SubjectTable::new();
        let mut i = 0;
        for g in &self.group_sizes {
            for _ in 0..g.count {
                i += 1;
                t.push(format!("S{i:0width$}"), g.gender.clone(), g.race.clone())
                    .expect("generated ids are unique");
            }
        }
        t
    }

    fn group_of(&self) -> Vec<usize> {
        self.group_sizes
            .iter()
            .enumerate()
            .flat_map(|(k, g)| std::iter::repeat_n(k, g.count))
            .collect()
    }

    fn latents(&self) -> Vec<Vec<f64>> {
        let scale = (self.latent_dim as f64).sqrt().recip();
        (0..self.total_subjects())
            .map(|i| {
                let mut r = rng::stream(self.rng_seed, rng::domain::LATENT, i as u64, 0);
                (0..self.latent_dim)
                    .map(|_| r.sample::<f64, _>(StandardNormal) * scale)
                    .collect()
            })
            .collect()
    }

    fn expected_cell(&self, i: usize, j: usize, groups: &[usize], u: &[Vec<f64>]) -> f64 {
        let dot: f64 = u[i].iter().zip(&u[j]).map(|(a, b)| a * b).sum();
        let mated = if i == j { self.mated_offset } else { 0.0 };
        let same = if groups[i] == groups[j] { self.demographic_affinity } else { 0.0 };
        self.base + mated + same + self.identity_scale * dot
    }
}

/// Draws the score set and subject table for `config`.
pub fn generate(config: &SynthConfig) -> Result<(ScoreSet, SubjectTable), SynthError> {
    config.validate()?;
    let subjects = config.subjects();
    let ids = subjects.ids();
    let groups = config.group_of();
    let u = config.latents();
    let n = ids.len();
    let p = config.images_per_subject;

    let rows: Vec<Vec<ScoreRecord>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::with_capacity((n - i) * p);
            for j in i..n {
                let mean = config.expected_cell(i, j, &groups, &u);
                let mut r = rng::stream(config.rng_seed, rng::domain::COMPARISON, i as u64, j as u64);
                for k in 0..p {
                    let noise: f64 = r.sample(StandardNormal);
                    // alternate probe/gallery roles
                    let (a, b) = if k % 2 == 0 { (i, j) } else { (j, i) };
                    out.push(ScoreRecord {
                        probe_subject_id: ids[a].clone(),
                        gallery_subject_id: ids[b].clone(),
                        score: mean + config.noise_sd * noise,
                    });
                }
            }
            out
        })
        .collect();

    let records = rows.into_iter().flatten().collect();
    Ok((ScoreSet::new("synthetic", records), subjects))
}

/// Noise-free expected score matrix, using the same latent draws as
/// [`generate`].
pub fn expected_matrix(config: &SynthConfig) -> Result<ScoreMatrix, SynthError> {
    config.validate()?;
    let ids = config.subjects().ids();
    let groups = config.group_of();
    let u = config.latents();
    let n = ids.len();
    let mut v = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let x = config.expected_cell(i, j, &groups, &u);
            v[(i, j)] = x;
            v[(j, i)] = x;
        }
    }
    Ok(ScoreMatrix::from_values(ids, v).expect("mirrored by construction"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub expected_matrix: ScoreMatrix,
    pub oracle_c_tot: f64,
    /// 1-based indices of significant components.
    pub oracle_significant_pcs: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullSettings {
    pub shuffles: usize,
    pub rng_seed: u64,
    pub alpha: f64,
}

impl Default for NullSettings {
    fn default() -> Self {
        Self {
            shuffles: DEFAULT_SHUFFLES,
            rng_seed: 0,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// Runs decomposition and clustering on the noise-free expected matrix.
pub fn oracle(config: &SynthConfig, null: NullSettings) -> Result<OracleResult, SynthError> {
    let expected = expected_matrix(config)?;
    let subjects = config.subjects();
    let d = pca_decompose(&expected)?;
    let c = significant_components(&d, &subjects, null.shuffles, null.rng_seed, null.alpha)?;
    Ok(OracleResult {
        oracle_c_tot: c.c_tot,
        oracle_significant_pcs: c.significant_indices().into_iter().map(|k| k + 1).collect(),
        expected_matrix: expected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::validate;
    use crate::matrix::build_score_matrix;

    fn small(n_per: usize) -> SynthConfig {
        let mut c = SynthConfig::default();
        for g in &mut c.group_sizes {
            g.count = n_per;
        }
        c.images_per_subject = 4;
        c
    }

    #[test]
    fn default_is_about_paper_sized() {
        let c = SynthConfig::default();
        assert_eq!(c.total_subjects(), 320);
        assert!(c.validate().is_ok());
        assert_eq!(SynthConfig::balanced(333).total_subjects(), 333);
    }

    #[test]
    fn invalid_configs() {
        let mut c = small(2);
        c.images_per_subject = 0;
        assert!(matches!(generate(&c), Err(SynthError::InvalidConfig(_))));
        let mut c = small(2);
        c.noise_sd = f64::NAN;
        assert!(matches!(generate(&c), Err(SynthError::InvalidConfig(_))));
        let mut c = small(2);
        c.demographic_affinity = -1.0;
        assert!(c.validate().is_err());
        let mut c = small(0);
        c.group_sizes[0].count = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn deterministic_and_complete() {
        let c = small(5);
        let (a, ta) = generate(&c).unwrap();
        let (b, tb) = generate(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.records.len(), 20 * 21 / 2 * 4);
        let report = validate(&a, &ta);
        assert!(report.auditable, "{report:?}");
        let mut other = c.clone();
        other.rng_seed = 1;
        assert_ne!(generate(&other).unwrap().0, a);
    }

    #[test]
    fn group_sizes_match_config() {
        let mut c = small(3);
        c.group_sizes[2].count = 7;
        let t = c.subjects();
        for g in &c.group_sizes {
            let n = t
                .entries()
                .iter()
                .filter(|s| s.gender == g.gender && s.race == g.race)
                .count();
            assert_eq!(n, g.count);
        }
    }

    #[test]
    fn no_structure_gives_constant_nonmated() {
        let mut c = small(3);
        c.demographic_affinity = 0.0;
        c.identity_scale = 0.0;
        c.noise_sd = 0.0;
        let (s, _) = generate(&c).unwrap();
        assert!(s.non_mated().all(|r| r.score == c.base));
        // Only the mated diagonal varies. Its centered covariance is isotropic
        // on the N - 1 directions orthogonal to the ones vector, so C_tot is
        // the trace of the between-group projector over N - 1: (G - 1)/(N - 1).
        let o = oracle(&c, NullSettings { shuffles: 50, ..Default::default() }).unwrap();
        assert!((o.oracle_c_tot - 3.0 / 11.0).abs() < 1e-9, "{}", o.oracle_c_tot);
        c.mated_offset = f64::MIN_POSITIVE;
        let flat = expected_matrix(&c).unwrap();
        let d = pca_decompose(&flat.map(|_| c.base)).unwrap();
        let r = crate::cluster::significant_components(&d, &c.subjects(), 20, 0, 0.01).unwrap();
        assert_eq!(r.c_tot, 0.0);
    }

    /// Brute force on N = 6: two blocks of three with +a inside blocks. The
    /// centered matrix is rank one along the block indicator, so all
    /// off-mated variance sits on PC1 and its values split cleanly by group.
    #[test]
    fn two_block_structure() {
        let c = SynthConfig {
            group_sizes: vec![
                GroupSpec { gender: "F".into(), race: "B".into(), count: 3 },
                GroupSpec { gender: "M".into(), race: "B".into(), count: 3 },
            ],
            images_per_subject: 2,
            base: 1.0,
            mated_offset: 0.5,
            demographic_affinity: 0.7,
            identity_scale: 0.0,
            latent_dim: 1,
            noise_sd: 0.0,
            rng_seed: 3,
        };
        let (s, t) = generate(&c).unwrap();
        let m = build_score_matrix(&s, &t).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = 1.0 + if i == j { 0.5 } else { 0.0 } + if i / 3 == j / 3 { 0.7 } else { 0.0 };
                assert_eq!(m.get(i, j), want);
            }
        }
        assert_eq!(m.values(), expected_matrix(&c).unwrap().values());
        let d = pca_decompose(&m).unwrap();
        let groups: Vec<usize> = (0..6).map(|i| i / 3).collect();
        assert!((crate::cluster::clustering_index(d.scores(0), &groups) - 1.0).abs() < 1e-12);
        // the block indicator direction dominates: a² + mated term vs mated only
        assert!(d.variances()[0] > 5.0 * d.variances()[1]);
    }

    #[test]
    fn averages_converge_to_expected() {
        let mut c = small(3);
        c.noise_sd = 1.0;
        let expected = expected_matrix(&c).unwrap();
        let mut errs = Vec::new();
        for p in [4usize, 64, 1024] {
            c.images_per_subject = p;
            let (s, t) = generate(&c).unwrap();
            let m = build_score_matrix(&s, &t).unwrap();
            let e = (m.values() - expected.values()).amax();
            errs.push(e * (p as f64).sqrt());
            if p == 1024 {
                assert!(e < 0.2);
            }
        }
        // scaled error stays O(1): max |N(0,1)| over 78 cells is < 5 in practice
        assert!(errs.iter().all(|&e| e < 5.0), "{errs:?}");
    }
}
