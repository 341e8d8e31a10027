use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedquant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedquant"))
        .args(args)
        .output()
        .expect("spawn fedquant")
}

fn small_run(out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec![
        "run",
        "--dataset",
        "synthetic",
        "--clients",
        "3",
        "--seed",
        "5",
        "--out",
        out,
        "--set",
        "train_limit=90",
        "--set",
        "test_limit=30",
    ];
    args.extend_from_slice(extra);
    fedquant(&args)
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn run_writes_hashed_csvs_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = small_run(a.path(), &["--rounds", "2", "--trials", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(small_run(b.path(), &["--rounds", "2", "--trials", "2"]).status.success());

    let files = read_dir_sorted(a.path());
    let csvs: Vec<_> = files.iter().filter(|(n, _)| n.ends_with(".csv")).collect();
    let names: Vec<&str> = csvs.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["summary.csv", "trial_0.csv", "trial_1.csv"]);
    let config = fs::read_to_string(a.path().join("config.txt")).unwrap();
    let mut hash = None;
    for (name, bytes) in &csvs {
        let text = String::from_utf8(bytes.clone()).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("# config_hash="), "{name}: {first}");
        let h = first.trim_start_matches("# config_hash=").to_string();
        assert_eq!(h.len(), 16);
        assert_eq!(*hash.get_or_insert(h.clone()), h);
        // header plus one line per round
        assert_eq!(text.lines().count(), 4, "{name}");
    }
    assert!(config.contains("bitwidths = 4-2-2-4"));

    // output_dir is not part of the hash, so both directories match byte for byte
    let other = read_dir_sorted(b.path());
    assert_eq!(files.len(), other.len());
    for ((n, x), (m, y)) in files.iter().zip(&other) {
        assert_eq!(n, m);
        if n != "config.txt" {
            assert_eq!(x, y, "{n} differs between reruns");
        }
    }
}

#[test]
fn full_precision_reports_uncompressed_bits() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run(dir.path(), &["--rounds", "2", "--full-precision"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("trial_0.csv")).unwrap();
    for line in text.lines().skip(2) {
        assert!(line.ends_with(",2619136"), "{line}");
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.conf");
    fs::write(
        &cfg,
        "# small\ndataset = synthetic\nbitwidths = 2-2-2-2\nrounds = 1\nclients = 2\n",
    )
    .unwrap();
    let out_dir = dir.path().join("o");
    let out = fedquant(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--bitwidths",
        "2-1-1-2",
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        "train_limit=40",
        "--set",
        "test_limit=20",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let config = fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(config.contains("bitwidths = 2-1-1-2"));
    assert!(config.contains("rounds = 1"));
}

#[test]
fn errors_are_one_line_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    for extra in [
        &["--bitwidths", "4-2-2"][..],
        &["--set", "colour=blue"][..],
        &["--clients", "0"][..],
    ] {
        let out = small_run(dir.path(), extra);
        assert!(!out.status.success(), "{extra:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error kind="), "{err}");
    }
    let out = fedquant(&["run", "--bitwidths", "4-2-2"]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("key=dataset") || err.contains("key=bitwidths"), "{err}");

    let unused = dir.path().join("unused");
    let out = fedquant(&[
        "run",
        "--dataset",
        "mnist",
        "--data-dir",
        "/nonexistent/fq",
        "--out",
        unused.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(!unused.exists());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error kind=io"), "{err}");
    assert!(err.contains("/nonexistent/fq"), "{err}");

    let out = fedquant(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bits_prints_table_with_footnotes() {
    let out = fedquant(&["bits"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for row in ["4-4-4-4", "4-2-2-4", "2-2-2-2", "2-1-1-2"] {
        assert!(text.lines().any(|l| l.starts_with(row)), "{row} missing");
    }
    assert!(text.contains("15.53"));
    assert!(text.contains("31.12"));
    assert!(text.contains("80848"));
}

#[test]
fn hist_reads_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert!(small_run(dir.path(), &["--rounds", "1"]).status.success());
    let ckpt = dir.path().join("model_trial_0.fqck");
    let csv_path = dir.path().join("hist.csv");
    let out = fedquant(&[
        "hist",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--layer",
        "2",
        "--bins",
        "20",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("# config_hash="));
    let rows = text.lines().skip(2).count();
    assert_eq!(rows, 20);
    let total: u64 = text
        .lines()
        .skip(2)
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 78_400);

    let out = fedquant(&["hist", "--checkpoint", ckpt.to_str().unwrap(), "--layer", "4"]);
    assert!(!out.status.success());
}
