use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_splitgame");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(BIN).args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn artifact_dir(out: &Path) -> PathBuf {
    let mut dirs: Vec<_> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "one hash directory");
    dirs.pop().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

const ZERO: &str = r#"{
  "schema_version": 1,
  "hamiltonian": {"analytic": {"name": "zero"}},
  "n_i": 2, "n_j": 2, "horizon": 1.0, "seed": 5,
  "hj": {"dt": 0.0625, "res_p": 20, "res_q": 20}
}"#;

#[test]
fn zero_hamiltonian_writes_an_all_zero_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), ZERO);
    let out = tmp.path().join("out");
    let o = run(&["solve-hj", "--config", cfg.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = artifact_dir(&out);
    let csv = fs::read_to_string(dir.join("values.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,p_1,p_2,q_1,q_2,V");
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 17 * 21 * 21);
    for row in rows {
        let v: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(v, 0.0);
    }
    let report: Value = serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["solve-hj"]["results"]["max"], 0.0);
    assert!(dir.join("timing.json").exists());
}

#[test]
fn invalid_field_exits_two_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &ZERO.replace("\"dt\": 0.0625", "\"dt\": -0.1"));
    let o = run(&["solve-hj", "--config", cfg.to_str().unwrap()], &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hj.dt"));
}

#[test]
fn unknown_field_and_missing_block_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &ZERO.replace("\"seed\": 5", "\"seed\": 5, \"sede\": 1"));
    let o = run(&["solve-hj", "--config", cfg.to_str().unwrap()], &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));

    let cfg = write_config(tmp.path(), ZERO);
    let o = run(&["simulate", "--config", cfg.to_str().unwrap()], &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("simulate"));
}

#[test]
fn bad_arguments_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["solve-hj"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["no-such-command", "--config", "x.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reruns_reproduce_reports_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("bilinear.json");
    let cfg = cfg.to_str().unwrap();
    let mut seen = Vec::new();
    for threads in ["1", "2"] {
        let out = tmp.path().join(format!("out{threads}"));
        let o = run(&["simulate", "--config", cfg, "--threads", threads], &out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let dir = artifact_dir(&out);
        seen.push((
            dir.file_name().unwrap().to_owned(),
            fs::read(dir.join("report.json")).unwrap(),
            fs::read(dir.join("trajectories.csv")).unwrap(),
        ));
    }
    assert_eq!(seen[0], seen[1]);

    let out = tmp.path().join("reseeded");
    let o = run(&["simulate", "--config", cfg, "--seed", "99"], &out);
    assert!(o.status.success());
    assert_ne!(artifact_dir(&out).file_name().unwrap(), seen[0].0);
}

#[test]
fn subcommands_share_one_report_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("tensor.json");
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().join("out");
    for cmd in ["solve-hj", "simulate"] {
        let o = run(&[cmd, "--config", cfg], &out);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let dir = artifact_dir(&out);
    let report: Value = serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert!(report.get("solve-hj").is_some() && report.get("simulate").is_some());
    assert!(dir.join("values.csv").exists() && dir.join("trajectories.csv").exists());
}
