use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use demaudit_cli::{run_audit, run_tails, AuditConfig, AuditError, ScoreInput};
use demaudit_core::ingest::{write_scores, write_subjects};
use demaudit_core::synth::{generate, oracle, GroupSpec, NullSettings, SynthConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "demaudit", version, about = "Demographic clustering audit for similarity scores")]
struct Cli {
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full audit: tails, decomposition, clustering and reduction.
    Audit(AuditArgs),
    /// Per-subject tail analysis only.
    Tails(InputArgs),
    /// Write a synthetic scores/subjects pair with known planted structure.
    Synth(SynthArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Scores file, optionally tagged as `tag=path`; repeat per algorithm.
    #[arg(long = "scores", required = true)]
    scores: Vec<String>,
    #[arg(long)]
    subjects: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    target_fmr: f64,
    /// Comma-separated race labels kept for category comparisons.
    #[arg(long, value_delimiter = ',')]
    race_comparison_set: Option<Vec<String>>,
    #[arg(long, default_value = "audit-out")]
    output_dir: PathBuf,
    /// Discard records whose subjects are missing from the subject table.
    #[arg(long)]
    drop_unknown: bool,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 500)]
    shuffles: usize,
    /// Significance level; 0.01 compares against the 99th percentile of the null.
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    /// Impute pairs without scores instead of failing.
    #[arg(long)]
    allow_missing: bool,
    /// Comma-separated 1-based components to remove instead of the significant ones.
    #[arg(long, value_delimiter = ',')]
    exclude_pcs: Option<Vec<usize>>,
    /// Also write the averaged, normalized and reduced score matrices.
    #[arg(long)]
    emit_matrix: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "synth-out")]
    output_dir: PathBuf,
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Subjects per gender×race group (F/M × B/W).
    #[arg(long)]
    subjects_per_group: Option<usize>,
    #[arg(long)]
    images_per_subject: Option<usize>,
    #[arg(long)]
    base: Option<f64>,
    #[arg(long)]
    mated_offset: Option<f64>,
    #[arg(long)]
    demographic_affinity: Option<f64>,
    #[arg(long)]
    identity_scale: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    rng_seed: Option<u64>,
    /// Shuffles used for the oracle's clustering run.
    #[arg(long, default_value_t = 500)]
    shuffles: usize,
    #[arg(long, default_value = "synthetic")]
    algorithm_tag: String,
}

fn parse_score_inputs(raw: &[String]) -> Vec<ScoreInput> {
    raw.iter()
        .map(|s| match s.split_once('=') {
            Some((tag, path)) => ScoreInput {
                algorithm_tag: tag.to_string(),
                path: PathBuf::from(path),
            },
            None => {
                let path = PathBuf::from(s);
                let tag = path
                    .file_stem()
                    .map(|t| t.to_string_lossy().into_owned())
                    .unwrap_or_else(|| s.clone());
                ScoreInput { algorithm_tag: tag, path }
            }
        })
        .collect()
}

fn input_config(input: InputArgs) -> AuditConfig {
    let mut cfg = AuditConfig::new(parse_score_inputs(&input.scores), input.subjects, input.output_dir);
    cfg.target_fmr = input.target_fmr;
    cfg.race_comparison_set = input.race_comparison_set;
    cfg.drop_unknown = input.drop_unknown;
    cfg
}

fn audit(args: AuditArgs) -> Result<(), AuditError> {
    let mut cfg = input_config(args.input);
    cfg.shuffles = args.shuffles;
    cfg.alpha = args.alpha;
    cfg.rng_seed = args.rng_seed;
    cfg.allow_missing = args.allow_missing;
    cfg.exclude_pcs = args.exclude_pcs;
    cfg.emit_matrix = args.emit_matrix;

    let (report, manifest) = run_audit(&cfg)?;
    for a in &report.algorithms {
        println!(
            "{}: C_tot {:.4}, {} significant PC(s), d' {:.3} -> {:.3} after removing {:?}",
            a.algorithm_tag, a.c_tot, a.n_significant, a.d_prime_original, a.d_prime_reduced, a.excluded_pcs
        );
    }
    println!("wrote {} files to {}", manifest.files.len() + 1, cfg.output_dir.display());
    Ok(())
}

fn tails(args: InputArgs) -> Result<(), AuditError> {
    let cfg = input_config(args);
    for (tag, t) in run_tails(&cfg)? {
        print!("{tag}: threshold {}", t.fmr_threshold);
        for c in demaudit_core::PairCategory::ALL {
            if let Some(m) = t.median_normalized(c) {
                print!(", {c} median {m:.4}");
            }
        }
        println!();
    }
    Ok(())
}

#[derive(Serialize)]
struct SynthSidecar<'a> {
    config: &'a SynthConfig,
    algorithm_tag: &'a str,
    oracle: OracleSummary,
}

#[derive(Serialize)]
struct OracleSummary {
    shuffles: usize,
    alpha: f64,
    rng_seed: u64,
    oracle_c_tot: f64,
    oracle_significant_pcs: Vec<usize>,
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SynthConfig::default(),
    };
    if let Some(n) = args.subjects_per_group {
        cfg.group_sizes.iter_mut().for_each(|g: &mut GroupSpec| g.count = n);
    }
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { cfg.$f = v; })* };
    }
    set!(images_per_subject, base, mated_offset, demographic_affinity, identity_scale, latent_dim, noise_sd, rng_seed);

    let (mut scores, subjects) = generate(&cfg)?;
    scores.algorithm_tag = args.algorithm_tag.clone();
    let null = NullSettings {
        shuffles: args.shuffles,
        rng_seed: cfg.rng_seed,
        alpha: 0.01,
    };
    let o = oracle(&cfg, null)?;

    fs::create_dir_all(&args.output_dir)?;
    let scores_path = args.output_dir.join("scores.csv");
    write_scores(&scores, std::io::BufWriter::new(fs::File::create(&scores_path)?))?;
    write_subjects(&subjects, fs::File::create(args.output_dir.join("subjects.csv"))?)?;
    let sidecar = SynthSidecar {
        config: &cfg,
        algorithm_tag: &args.algorithm_tag,
        oracle: OracleSummary {
            shuffles: null.shuffles,
            alpha: null.alpha,
            rng_seed: null.rng_seed,
            oracle_c_tot: o.oracle_c_tot,
            oracle_significant_pcs: o.oracle_significant_pcs,
        },
    };
    fs::write(args.output_dir.join("synth.json"), serde_json::to_string_pretty(&sidecar)?)?;
    println!(
        "wrote {} scores for {} subjects to {} (oracle C_tot {:.4})",
        scores.records.len(),
        subjects.len(),
        args.output_dir.display(),
        sidecar.oracle.oracle_c_tot
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }

    let result = match cli.command {
        Command::Audit(a) => audit(a),
        Command::Tails(a) => tails(a),
        Command::Synth(a) => {
            return match synth(a) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    let code = if e.downcast_ref::<std::io::Error>().is_some() { 3 } else { 1 };
                    ExitCode::from(code)
                }
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
