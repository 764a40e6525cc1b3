use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sketchdl::experiment::{strip_seconds, CSV_HEADER};
use sketchdl::matfile;

fn sketchdl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sketchdl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "\
# tiny protocol
p = 24
K = 5
n = 600
T = 2
L = 4
m_over_p = 0.5
gamma_list = 1/3, 1/6
iterations = 3
trials = 2
master_seed = 11
method = cksvd, aksvd, kmeans
";

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn theory_prints_eta() {
    let dir = tempfile::tempdir().unwrap();
    let o = sketchdl(
        &["theory", "--p", "100", "--m", "30", "--kappa", "0", "--cluster-size", "100", "--p0", "0.5"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("eta=")).unwrap().to_string();
    let eta: f64 = line["eta=".len()..].parse().unwrap();
    assert!((eta - (101.0f64 / 1500.0).sqrt()).abs() < 1e-6);
}

#[test]
fn theory_bound_with_snr() {
    let dir = tempfile::tempdir().unwrap();
    let o = sketchdl(
        &["theory", "--p", "99", "--m", "10", "--kappa", "0", "--cluster-size", "100", "--eta", "1", "--snr", "1"],
        dir.path(),
    );
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("p0=1.000000e-1"), "{out}");
    assert!(out.contains("p1=2.100000e-1"), "{out}");
}

#[test]
fn theory_monte_carlo_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = sketchdl(
        &[
            "theory", "--p", "20", "--m", "6", "--dist", "sparse", "--s", "3", "--cluster-size", "1",
            "--monte-carlo", "hk", "--sizes", "5,50", "--trials", "10", "--out", "mc.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("mc.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("dist,"));
}

#[test]
fn bench_writes_schema_and_ignores_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = sketchdl(&["--threads", "1", "bench", "--config", &cfg, "--out", "a.csv"], dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    let b = sketchdl(&["--threads", "2", "bench", "--config", &cfg, "--out", "b.csv"], dir.path());
    assert!(b.status.success(), "{}", stderr(&b));
    let a = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert_eq!(a.lines().next(), Some(CSV_HEADER));
    // (2 cksvd + 1 aksvd + 2 kmeans) settings x 2 trials x 3 iterations.
    assert_eq!(a.lines().count(), 1 + 5 * 2 * 3);
    assert_eq!(strip_seconds(&a), strip_seconds(&b));
}

#[test]
fn one_iteration_one_trial_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("iterations = 3", "iterations = 1").replace("trials = 2", "trials = 1");
    let cfg = write_config(dir.path(), &text);
    let o = sketchdl(&["bench", "--config", &cfg], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 1 + 5);
}

#[test]
fn gen_sketch_train_kmeans_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = sketchdl(&["gen", "--config", &cfg, "--out", "data"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let x = matfile::load(dir.path().join("data/X.cdlm")).unwrap();
    assert_eq!((x.nrows(), x.ncols()), (24, 600));
    let c = matfile::load(dir.path().join("data/C_true.cdlm")).unwrap();
    assert!(c.column_iter().all(|col| col.iter().filter(|v| **v != 0.0).count() == 2));

    let o = sketchdl(
        &["sketch", "--data", "data/X.cdlm", "--m", "12", "--blocks", "4", "--gamma", "1/3", "--out", "sk"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let o = sketchdl(
        &[
            "train", "--config", &cfg, "--sketches", "sk", "--truth", "data/D_true.cdlm", "--out", "ck",
            "--checkpoint-every", "2",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let d = matfile::load(dir.path().join("ck/dictionary.cdlm")).unwrap();
    assert_eq!((d.nrows(), d.ncols()), (24, 5));
    assert!(d.column_iter().all(|a| (a.norm() - 1.0).abs() < 1e-10));
    assert!(dir.path().join("ck/checkpoint_0002.cdlm").exists());
    let hist = fs::read_to_string(dir.path().join("ck/history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 4);
    assert!(hist.lines().nth(1).unwrap().starts_with("cksvd,3.33"));

    let o = sketchdl(&["train", "--config", &cfg, "--method", "aksvd", "--out", "ak"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("recovered fraction"));

    let o = sketchdl(&["kmeans", "--config", &cfg, "--sketches", "sk", "--out", "km"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let assignments = fs::read_to_string(dir.path().join("km/assignments.csv")).unwrap();
    assert_eq!(assignments.lines().count(), 600);
    assert!(assignments.lines().all(|l| l.parse::<usize>().unwrap() < 5));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}colour = blue\n"));
    let o = sketchdl(&["bench", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("colour"));

    let o = sketchdl(&["bench", "--config", "missing.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    fs::write(dir.path().join("junk.cdlm"), b"not a matrix").unwrap();
    let o = sketchdl(&["sketch", "--data", "junk.cdlm", "--m", "3", "--blocks", "1", "--s", "3", "--out", "s"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = sketchdl(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dimension_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let wrong = nalgebra::DMatrix::from_element(7, 5, 1.0);
    matfile::save(dir.path().join("init.cdlm"), &wrong).unwrap();
    let o = sketchdl(&["train", "--config", &cfg, "--init", "init.cdlm", "--out", "t"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "cfg") {
            sketchdl::config::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 2);
}
