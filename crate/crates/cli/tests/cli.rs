use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tkfmh::hmm::{build_pair_hmm, forward_hmm};
use tkfmh::substitution::Alphabet;
use tkfmh::EvolParams;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tkfmh"));
    c.env_remove("TKFMH_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tkfmh-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Parses a CSV with a header into rows of (column, value) lookups.
fn csv_rows(text: &str) -> Vec<std::collections::HashMap<String, String>> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
    lines.map(|l| header.iter().cloned().zip(l.split(',').map(str::to_string)).collect()).collect()
}

#[test]
fn simulate_is_deterministic_and_writes_one_record_per_leaf() {
    let dir = scratch("sim");
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out in [&a, &b] {
        let o = run(&["simulate", "--n", "1000", "--seed", "7", "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let fa = std::fs::read_to_string(a.join("rep_000.fasta")).unwrap();
    assert_eq!(fa, std::fs::read_to_string(b.join("rep_000.fasta")).unwrap());
    assert_eq!(
        std::fs::read(a.join("rep_000.structure")).unwrap(),
        std::fs::read(b.join("rep_000.structure")).unwrap()
    );
    let records = tkfmh::io::read_fasta(fa.as_bytes()).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| (900..1100).contains(&r.seq.len())));

    let tree = dir.join("eight.nwk");
    std::fs::write(
        &tree,
        "(((X1:0.5,X2:0.5):0.5,(X3:0.5,X4:0.5):0.5):0.5,((X5:0.5,X6:0.5):0.5,(X7:0.5,X8:0.5):0.5):0.5);",
    )
    .unwrap();
    let out = dir.join("tree");
    let o = run(&["simulate", "--tree", s(&tree), "--n", "200", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let fa = std::fs::read_to_string(out.join("rep_000.fasta")).unwrap();
    assert_eq!(fa.matches('>').count(), 8);
}

#[test]
fn manifest_reproduces_the_run() {
    let dir = scratch("manifest");
    let first = dir.join("first");
    let o = run(&["simulate", "--n", "300", "--seed", "11", "--lambda", "0.05", "--replicates", "2", "--out", s(&first)]);
    assert_eq!(o.status.code(), Some(0));
    let second = dir.join("second");
    let o = run(&["simulate", "--config", s(&first.join("manifest.txt")), "--out", s(&second)]);
    assert_eq!(o.status.code(), Some(0));
    for f in ["rep_000.fasta", "rep_001.fasta", "rep_001.structure"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = scratch("precedence");
    let conf = dir.join("run.conf");
    std::fs::write(&conf, "lambda=0.05\nalpha=0.3\nn=50\n").unwrap();
    let out = dir.join("out");
    let o = run(&["simulate", "--config", s(&conf), "--alpha", "0.4", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("lambda=0.05\n"));
    assert!(manifest.contains("alpha=0.4\n"));
    assert!(manifest.contains("n=50\n"));
}

#[test]
fn loglik_pair_matches_pair_hmm() {
    let dir = scratch("pair");
    let fasta = dir.join("pair.fa");
    std::fs::write(&fasta, ">X1\nACGTTA\n>X2\nAGTA\n").unwrap();
    let o = run(&[
        "loglik",
        "--star-times",
        "0.4,0.6",
        "--lambda",
        "0.1",
        "--alpha",
        "0.3",
        "--boundary",
        "survivor-start",
        "--fasta",
        s(&fasta),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&stdout(&o));
    let value: f64 = rows[0]["log_value"].parse().unwrap();
    let th = EvolParams::uniform(0.1, 0.3, 4).unwrap();
    let dna = Alphabet::default();
    let seqs = vec![dna.encode("ACGTTA").unwrap(), dna.encode("AGTA").unwrap()];
    let reference = forward_hmm(&build_pair_hmm(0.1, 1.0).unwrap(), th.subst(), &seqs).unwrap();
    assert!((value - reference).abs() <= 1e-10 * reference.abs(), "{value} vs {reference}");
}

#[test]
fn loglik_empty_sequences_give_the_null_series() {
    let dir = scratch("empty");
    let fasta = dir.join("empty.fa");
    std::fs::write(&fasta, ">X1\n>X2\n>X3\n").unwrap();
    let o = run(&["loglik", "--fasta", s(&fasta), "--mode", "both", "-n", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let rows = csv_rows(&stdout(&o));
    let null = (0.02f64 / 1.02).powi(3);
    let q: f64 = rows[0]["log_value"].parse().unwrap();
    let l: f64 = rows[1]["log_value"].parse().unwrap();
    assert!((q + (-null).ln_1p()).abs() < 1e-15);
    assert!((l - 2.0 * null.ln()).abs() < 1e-9);
    assert_eq!(rows[0]["n"], "-");
}

#[test]
fn loglik_brute_on_binary_tree_reports_tail_bound() {
    let dir = scratch("brute");
    let tree = dir.join("four.nwk");
    std::fs::write(&tree, "((X1:0.5,X2:0.5):0.5,(X3:0.5,X4:0.5):0.5);").unwrap();
    let fasta = dir.join("four.fa");
    std::fs::write(&fasta, ">X1\nA\n>X2\nC\n>X3\nA\n>X4\nG\n").unwrap();
    let o = run(&["loglik", "--tree", s(&tree), "--fasta", s(&fasta), "--mode", "brute", "--max-ins", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&stdout(&o));
    let value: f64 = rows[0]["log_value"].parse().unwrap();
    let tail: f64 = rows[0]["tail_bound"].parse().unwrap();
    assert!(value.is_finite() && value < 0.0);
    assert!(tail.is_finite() && tail >= 0.0);

    let o = run(&["loglik", "--tree", s(&tree), "--fasta", s(&fasta)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("brute"));
}

#[test]
fn validation_and_io_exit_codes() {
    let dir = scratch("codes");
    let fasta = dir.join("bad.fa");
    std::fs::write(&fasta, ">X1\nAXA\n>X2\nC\n>X3\nA\n").unwrap();
    assert_eq!(run(&["loglik", "--fasta", s(&fasta)]).status.code(), Some(2));
    assert_eq!(run(&["check", "--lambda", "0"]).status.code(), Some(2));
    assert_eq!(run(&["simulate", "--grid-points", "3"]).status.code(), Some(2));
    assert_eq!(run(&["scan", "--grid-points", "4"]).status.code(), Some(2));
    assert_eq!(run(&["loglik", "--fasta", s(&dir.join("missing.fa"))]).status.code(), Some(4));
    let blocker = dir.join("file");
    std::fs::write(&blocker, "").unwrap();
    assert_eq!(run(&["simulate", "--n", "5", "--out", s(&blocker.join("sub"))]).status.code(), Some(4));
}

#[test]
fn scan_writes_surfaces_cuts_and_plots() {
    let dir = scratch("scan");
    let out = dir.join("s");
    let o = run(&["scan", "--n", "30", "--replicates", "3", "--grid-points", "3", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "surface.csv",
        "surface_w.csv",
        "surface_l.csv",
        "cut_alpha.csv",
        "cut_lambda.csv",
        "heatmap_w.svg",
        "heatmap_l.svg",
        "cut_alpha.svg",
        "cut_lambda.svg",
        "manifest.txt",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let surface = csv_rows(&std::fs::read_to_string(out.join("surface.csv")).unwrap());
    assert_eq!(surface.len(), 9);
    let centre = surface.iter().find(|r| r["lambda"] == "0.02" && r["alpha"] == "0.1").unwrap();
    assert_eq!(centre["d_hat"], "0");

    let single = dir.join("one");
    let o = run(&["scan", "--n", "30", "--replicates", "2", "--grid-points", "1", "--out", s(&single)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("plots skipped"));
    assert!(single.join("surface.csv").exists());
    assert!(!single.join("heatmap_w.svg").exists());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = scratch("threads");
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.join(threads);
        let o = run(&[
            "scan", "--threads", threads, "--n", "25", "--replicates", "4", "--grid-points", "3", "--out", s(&out),
        ]);
        assert_eq!(o.status.code(), Some(0));
        outputs.push(std::fs::read(out.join("surface.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let o = bin().env("TKFMH_THREADS", "zero").args(["check"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oversized_scan_needs_force() {
    let o = run(&["scan", "--band", "full"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
}

#[test]
fn default_check_passes() {
    let o = run(&["check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let table = stdout(&o);
    assert!(table.contains("8-leaf tree lengths"));
    assert!(!table.contains("FAIL"));
}
