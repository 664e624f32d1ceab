//! Run reports and on-disk artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;

/// One named check: a measured quantity against a bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self { name: name.into(), measured, bound, pass: measured <= bound }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self { name: name.into(), measured, bound, pass: measured >= bound }
    }

    /// `|measured - target| <= tolerance`, reported as the deviation.
    pub fn near(name: impl Into<String>, measured: f64, target: f64, tolerance: f64) -> Self {
        let dev = (measured - target).abs();
        Self { name: name.into(), measured, bound: tolerance, pass: dev <= tolerance }
    }

    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Self { name: name.into(), measured: f64::from(u8::from(ok)), bound: 1.0, pass: ok }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub subcommand: String,
    pub checks: Vec<Check>,
    pub results: Value,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Everything a subcommand produces. Wall time is kept apart so the rest is
/// reproducible byte for byte.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifacts {
    pub report: RunReport,
    pub files: BTreeMap<String, Vec<u8>>,
    pub seconds: f64,
}

impl Artifacts {
    /// Report and files, without the wall time.
    pub fn fingerprint(&self) -> Result<(String, &BTreeMap<String, Vec<u8>>)> {
        Ok((serde_json::to_string(&self.report)?, &self.files))
    }
}

fn merge_into(path: &Path, key: &str, value: Value) -> Result<()> {
    let mut map: BTreeMap<String, Value> = match std::fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };
    map.insert(key.to_string(), value);
    std::fs::write(path, serde_json::to_string_pretty(&map)? + "\n")?;
    Ok(())
}

/// Writes the files into `out/<hash>/` and records the report under the
/// subcommand's key of `report.json` (wall time goes to `timing.json`).
pub fn write_artifacts(out: &Path, a: &Artifacts) -> Result<PathBuf> {
    let dir = out.join(&a.report.config_hash);
    std::fs::create_dir_all(&dir)?;
    for (name, bytes) in &a.files {
        std::fs::write(dir.join(name), bytes)?;
    }
    merge_into(&dir.join("report.json"), &a.report.subcommand, serde_json::to_value(&a.report)?)?;
    merge_into(&dir.join("timing.json"), &a.report.subcommand, serde_json::json!({ "wall_seconds": a.seconds }))?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_accumulate_by_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |sub: &str| Artifacts {
            report: RunReport {
                config_hash: "abc".into(),
                subcommand: sub.into(),
                checks: vec![Check::at_most("x", 1.0, 2.0)],
                results: Value::Null,
            },
            files: BTreeMap::from([("values.csv".to_string(), b"t,V\n".to_vec())]),
            seconds: 0.5,
        };
        write_artifacts(dir.path(), &mk("solve-hj")).unwrap();
        let d = write_artifacts(dir.path(), &mk("mc-game")).unwrap();
        let report: BTreeMap<String, RunReport> =
            serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
        assert_eq!(report.len(), 2);
        assert!(report["mc-game"].passed());
        assert_eq!(std::fs::read(d.join("values.csv")).unwrap(), b"t,V\n");
        assert!(std::fs::read_to_string(d.join("timing.json")).unwrap().contains("wall_seconds"));
    }

    #[test]
    fn check_constructors() {
        assert!(Check::near("v", -0.5004, -0.5, 1e-3).pass);
        assert!(!Check::at_least("c", -1e-7, -1e-8).pass);
        assert!(!Check::flag("f", false).pass);
    }
}
