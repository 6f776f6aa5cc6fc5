use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn demaudit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demaudit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a small synthetic dataset and returns (scores, subjects).
fn synth_into(dir: &Path, affinity: &str, seed: &str) -> (PathBuf, PathBuf) {
    let out = demaudit(&[
        "synth",
        "--output-dir",
        s(dir),
        "--subjects-per-group",
        "10",
        "--images-per-subject",
        "4",
        "--demographic-affinity",
        affinity,
        "--rng-seed",
        seed,
        "--shuffles",
        "100",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (dir.join("scores.csv"), dir.join("subjects.csv"))
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_writes_inputs_and_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let (scores, subjects) = synth_into(tmp.path(), "0.3", "2");
    assert!(scores.exists() && subjects.exists());
    let side = json(&tmp.path().join("synth.json"));
    assert_eq!(side["config"]["demographic_affinity"], 0.3);
    assert_eq!(side["oracle"]["shuffles"], 100);
    assert!(side["oracle"]["oracle_c_tot"].as_f64().unwrap() > 0.0);
}

#[test]
fn audit_two_algorithms_with_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (a_scores, subjects) = synth_into(&tmp.path().join("a"), "0.3", "1");
    let (b_scores, _) = synth_into(&tmp.path().join("b"), "0.0", "1");
    let out_dir = tmp.path().join("out");
    let out = demaudit(&[
        "audit",
        "--scores",
        &format!("alpha={}", s(&a_scores)),
        "--scores",
        &format!("beta={}", s(&b_scores)),
        "--subjects",
        s(&subjects),
        "--shuffles",
        "100",
        "--output-dir",
        s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report = json(&out_dir.join("report.json"));
    assert_eq!(report["schema_version"], "1");
    let algs = report["algorithms"].as_array().unwrap();
    assert_eq!(algs.len(), 2);
    assert_eq!(algs[0]["algorithm_tag"], "alpha");
    assert_eq!(algs[1]["algorithm_tag"], "beta");
    assert!(algs[0]["c_tot"].as_f64().unwrap() > algs[1]["c_tot"].as_f64().unwrap());

    let manifest = json(&out_dir.join("manifest.json"));
    let files = manifest["files"].as_array().unwrap();
    for tag in ["alpha", "beta"] {
        let n = files
            .iter()
            .filter(|f| f["file"].as_str().unwrap().contains(tag))
            .count();
        assert!(n >= 4, "{tag}: {n} files");
    }
    for f in files {
        let bytes = fs::read(out_dir.join(f["file"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
        assert_eq!(f["bytes"].as_u64().unwrap() as usize, bytes.len());
    }

    let csv = fs::read_to_string(out_dir.join("pc_clustering_alpha.csv")).unwrap();
    assert!(csv.starts_with("pc_index,variance_fraction,c_k,null_q99,significant"));
    assert_eq!(csv.lines().count(), 41);
}

#[test]
fn untagged_scores_use_the_file_stem() {
    let tmp = tempfile::tempdir().unwrap();
    let (scores, subjects) = synth_into(tmp.path(), "0.2", "0");
    let out_dir = tmp.path().join("out");
    let out = demaudit(&[
        "audit",
        "--scores",
        s(&scores),
        "--subjects",
        s(&subjects),
        "--shuffles",
        "50",
        "--exclude-pcs",
        "1,2",
        "--output-dir",
        s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out_dir.join("report.json"));
    assert_eq!(report["algorithms"][0]["algorithm_tag"], "scores");
    assert_eq!(report["algorithms"][0]["excluded_pcs"], serde_json::json!([1, 2]));
}

#[test]
fn tails_subcommand_prints_category_medians() {
    let tmp = tempfile::tempdir().unwrap();
    let (scores, subjects) = synth_into(tmp.path(), "0.5", "0");
    let out = demaudit(&[
        "tails",
        "--scores",
        s(&scores),
        "--subjects",
        s(&subjects),
        "--target-fmr",
        "0.001",
        "--output-dir",
        s(&tmp.path().join("out")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("SS median"), "{text}");
}

#[test]
fn unknown_subjects_need_opt_in() {
    let tmp = tempfile::tempdir().unwrap();
    let (scores, subjects) = synth_into(tmp.path(), "0.2", "0");
    let mut text = fs::read_to_string(&scores).unwrap();
    text.push_str("ZZZ,S001,0.5\n");
    fs::write(&scores, text).unwrap();
    let base = [
        "audit",
        "--scores",
        s(&scores),
        "--subjects",
        s(&subjects),
        "--shuffles",
        "20",
        "--output-dir",
    ];

    let out_dir = tmp.path().join("out");
    let mut args = base.to_vec();
    args.push(s(&out_dir));
    let out = demaudit(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--drop-unknown"));

    args.push("--drop-unknown");
    let out = demaudit(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out_dir.join("report.json"));
    assert_eq!(report["algorithms"][0]["dropped_unknown_records"], 1);
}

#[test]
fn missing_pairs_fail_unless_imputed() {
    let tmp = tempfile::tempdir().unwrap();
    let (scores, subjects) = synth_into(tmp.path(), "0.2", "0");
    let text = fs::read_to_string(&scores).unwrap();
    let kept: Vec<&str> = text
        .lines()
        .filter(|l| !(l.starts_with("S001,S002,") || l.starts_with("S002,S001,")))
        .collect();
    fs::write(&scores, kept.join("\n")).unwrap();
    let out_dir = tmp.path().join("out");
    let mut args = vec![
        "audit",
        "--scores",
        s(&scores),
        "--subjects",
        s(&subjects),
        "--shuffles",
        "20",
        "--output-dir",
        s(&out_dir),
    ];
    assert_eq!(demaudit(&args).status.code(), Some(1));
    args.push("--allow-missing");
    let out = demaudit(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out_dir.join("report.json"));
    assert_eq!(report["algorithms"][0]["imputation"]["off_diagonal_cells"], 1);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (scores, subjects) = synth_into(tmp.path(), "0.2", "0");

    assert_eq!(demaudit(&["--help"]).status.code(), Some(0));
    assert_eq!(demaudit(&["audit", "--bogus"]).status.code(), Some(1));

    // unreadable input
    let missing = tmp.path().join("nope.csv");
    let out = demaudit(&["audit", "--scores", s(&missing), "--subjects", s(&subjects)]);
    assert_eq!(out.status.code(), Some(3));

    // output directory below a regular file cannot be created
    let blocked = scores.join("out");
    let out = demaudit(&[
        "audit",
        "--scores",
        s(&scores),
        "--subjects",
        s(&subjects),
        "--shuffles",
        "20",
        "--output-dir",
        s(&blocked),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // component out of range
    let out = demaudit(&[
        "audit",
        "--scores",
        s(&scores),
        "--subjects",
        s(&subjects),
        "--exclude-pcs",
        "999",
        "--output-dir",
        s(&tmp.path().join("o2")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // every score identical: nothing to decompose
    let flat: String = fs::read_to_string(&scores)
        .unwrap()
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                format!("{l}\n")
            } else {
                let (head, _) = l.rsplit_once(',').unwrap();
                format!("{head},1.0\n")
            }
        })
        .collect();
    let flat_path = tmp.path().join("flat.csv");
    fs::write(&flat_path, flat).unwrap();
    let out = demaudit(&[
        "audit",
        "--scores",
        s(&flat_path),
        "--subjects",
        s(&subjects),
        "--output-dir",
        s(&tmp.path().join("o3")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn rerun_gives_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (scores, subjects) = synth_into(tmp.path(), "0.2", "0");
    let run = |dir: &str| {
        let out_dir = tmp.path().join(dir);
        let out = demaudit(&[
            "audit",
            "--scores",
            s(&scores),
            "--subjects",
            s(&subjects),
            "--shuffles",
            "50",
            "--output-dir",
            s(&out_dir),
        ]);
        assert!(out.status.success());
        json(&out_dir.join("manifest.json"))
    };
    let a = run("x");
    let b = run("y");
    let strip = |m: &serde_json::Value| -> Vec<serde_json::Value> {
        m["files"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|f| f["file"] != "report.json")
            .cloned()
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
}
