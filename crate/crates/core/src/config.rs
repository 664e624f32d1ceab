//! Experiment configuration: a versioned JSON document describing the
//! Hamiltonian, the dimensions and one block per subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arena::StrategyFamily;
use crate::error::{Error, Result};
use crate::hamiltonian::{Analytic, HamiltonianField, PayoffTensor};
use crate::hj::{HjParams, SchemeOrder};
use crate::sde::ControlPreset;
use crate::simplex::SimplexPoint;
use crate::splitting::SplitSpec;

pub const SCHEMA_VERSION: u32 = 1;
/// Largest simplex dimension accepted in a config.
pub const MAX_CONFIG_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HamiltonianSpec {
    Analytic(Analytic),
    /// Path of a payoff tensor JSON file, relative to the config file.
    Tensor(PathBuf),
}

fn default_order() -> SchemeOrder {
    SchemeOrder::VexCav
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjBlock {
    pub dt: f64,
    pub res_p: usize,
    pub res_q: usize,
    #[serde(default = "default_order")]
    pub order: SchemeOrder,
    /// Write every `csv_stride`-th time layer to `values.csv`.
    #[serde(default = "one")]
    pub csv_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateBlock {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub dt: f64,
    pub n_paths: usize,
    /// Control intervals of both presets.
    pub intervals: usize,
    pub u: ControlPreset,
    pub v: ControlPreset,
    #[serde(default = "one")]
    pub record_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitBlock {
    pub spec: SplitSpec,
    #[serde(default)]
    pub t: f64,
    pub n_paths: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameBlock {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub dt: f64,
    pub n_paths: usize,
    pub fam_1: StrategyFamily,
    pub fam_2: StrategyFamily,
    /// Step of the dynamic programming diagnostic; needs an `hj` block.
    #[serde(default)]
    pub dpp_step: Option<f64>,
}

fn default_verify_paths() -> usize {
    10_000
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBlock {
    #[serde(default = "default_verify_paths")]
    pub n_paths: usize,
    /// Enforce the wall-time limits.
    #[serde(default = "yes")]
    pub timing: bool,
}

impl Default for VerifyBlock {
    fn default() -> Self {
        Self { n_paths: default_verify_paths(), timing: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub hamiltonian: HamiltonianSpec,
    pub n_i: usize,
    pub n_j: usize,
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hj: Option<HjBlock>,
    #[serde(default)]
    pub simulate: Option<SimulateBlock>,
    #[serde(default)]
    pub split: Option<SplitBlock>,
    #[serde(default)]
    pub game: Option<GameBlock>,
    #[serde(default)]
    pub verify: Option<VerifyBlock>,
}

fn field(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

fn positive(path: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(field(path, format!("must be positive, got {x}")))
    }
}

fn nonzero(path: &str, n: usize) -> Result<()> {
    if n > 0 {
        Ok(())
    } else {
        Err(field(path, "must be positive"))
    }
}

fn point(path: &str, coords: &[f64], dim: usize) -> Result<SimplexPoint> {
    if coords.len() != dim {
        return Err(field(path, format!("expected {dim} coordinates, got {}", coords.len())));
    }
    SimplexPoint::new(coords.to_vec()).map_err(|e| field(path, e.to_string()))
}

/// Number of steps of size `dt` in `span`, if it is a whole number.
pub fn whole_steps(span: f64, dt: f64) -> Option<usize> {
    let r = span / dt;
    let n = r.round();
    ((r - n).abs() <= 1e-6 * n.max(1.0) && n >= 1.0).then_some(n as usize)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| field(&format!("line {}, column {}", e.line(), e.column()), e.to_string()))
    }

    /// Reads and validates a config; relative tensor paths resolve against
    /// the config's directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| field(&path.display().to_string(), e.to_string()))?;
        let cfg = Self::parse(&text)?;
        let base = path.parent().map_or_else(PathBuf::new, Path::to_path_buf);
        cfg.validate(&base)?;
        Ok((cfg, base))
    }

    pub fn tensor_path(&self, base: &Path) -> Option<PathBuf> {
        match &self.hamiltonian {
            HamiltonianSpec::Tensor(p) => Some(base.join(p)),
            HamiltonianSpec::Analytic(_) => None,
        }
    }

    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(field("schema_version", format!("unsupported version {}", self.schema_version)));
        }
        for (name, n) in [("n_i", self.n_i), ("n_j", self.n_j)] {
            if !(1..=MAX_CONFIG_DIM).contains(&n) {
                return Err(field(name, format!("must lie in [1, {MAX_CONFIG_DIM}], got {n}")));
            }
        }
        positive("horizon", self.horizon)?;
        if let Some(path) = self.tensor_path(base) {
            if !path.is_file() {
                return Err(field("hamiltonian.tensor", format!("{} does not exist", path.display())));
            }
        }
        if let Some(b) = &self.hj {
            positive("hj.dt", b.dt)?;
            whole_steps(self.horizon, b.dt).ok_or_else(|| field("hj.dt", "must divide the horizon"))?;
            nonzero("hj.res_p", b.res_p)?;
            nonzero("hj.res_q", b.res_q)?;
            nonzero("hj.csv_stride", b.csv_stride)?;
            if b.dt > crate::hj::MAX_DT {
                return Err(field("hj.dt", "must not exceed 1/16"));
            }
            for (name, dim, res) in [("hj.res_p", self.n_i, b.res_p), ("hj.res_q", self.n_j, b.res_q)] {
                if dim > 1 && res < crate::hj::MIN_RESOLUTION {
                    return Err(field(name, format!("must be at least {}", crate::hj::MIN_RESOLUTION)));
                }
            }
        }
        if let Some(b) = &self.simulate {
            point("simulate.p", &b.p, self.n_i)?;
            point("simulate.q", &b.q, self.n_j)?;
            positive("simulate.dt", b.dt)?;
            whole_steps(self.horizon, b.dt).ok_or_else(|| field("simulate.dt", "must divide the horizon"))?;
            if b.n_paths < 2 {
                return Err(field("simulate.n_paths", "must be at least 2"));
            }
            nonzero("simulate.intervals", b.intervals)?;
            nonzero("simulate.record_stride", b.record_stride)?;
        }
        if let Some(b) = &self.split {
            b.spec.validate().map_err(|e| field("split.spec", e.to_string()))?;
            if b.spec.dim() != self.n_i {
                return Err(field("split.spec", format!("points must lie in Δ({})", self.n_i)));
            }
            if !(b.t >= 0.0 && b.t + b.spec.h <= self.horizon + 1e-12) {
                return Err(field("split.t", "split must end by the horizon"));
            }
            if b.n_paths < 2 {
                return Err(field("split.n_paths", "must be at least 2"));
            }
        }
        if let Some(b) = &self.game {
            point("game.p", &b.p, self.n_i)?;
            point("game.q", &b.q, self.n_j)?;
            positive("game.dt", b.dt)?;
            whole_steps(self.horizon, b.dt).ok_or_else(|| field("game.dt", "must divide the horizon"))?;
            if b.n_paths < 2 {
                return Err(field("game.n_paths", "must be at least 2"));
            }
            b.fam_1.validate(self.n_i).map_err(|e| field("game.fam_1", e.to_string()))?;
            b.fam_2.validate(self.n_j).map_err(|e| field("game.fam_2", e.to_string()))?;
            if let Some(step) = b.dpp_step {
                positive("game.dpp_step", step)?;
                if self.hj.is_none() {
                    return Err(field("game.dpp_step", "needs an hj block for the reference value"));
                }
            }
        }
        if let Some(b) = &self.verify {
            if b.n_paths < 100 {
                return Err(field("verify.n_paths", "must be at least 100"));
            }
        }
        Ok(())
    }

    pub fn field(&self, base: &Path) -> Result<HamiltonianField> {
        let h = match &self.hamiltonian {
            HamiltonianSpec::Analytic(a) => HamiltonianField::analytic(a.clone(), self.n_i, self.n_j)?,
            HamiltonianSpec::Tensor(_) => {
                let path = self.tensor_path(base).expect("tensor spec");
                HamiltonianField::tensor(PayoffTensor::load(&path)?)?
            }
        };
        if h.n_i() != self.n_i || h.n_j() != self.n_j {
            return Err(field("hamiltonian", "dimensions differ from n_i, n_j"));
        }
        Ok(h)
    }

    pub fn hj_params(&self) -> Option<HjParams> {
        self.hj.as_ref().map(|b| HjParams {
            horizon: self.horizon,
            time_steps: whole_steps(self.horizon, b.dt).unwrap_or(1),
            res_p: b.res_p,
            res_q: b.res_q,
            order: b.order,
        })
    }

    /// Whitespace- and key-order-insensitive form: the parsed config
    /// re-serialized with sorted keys, plus the digest of a referenced
    /// tensor file.
    pub fn canonical(&self, base: &Path) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(path) = self.tensor_path(base) {
            let digest = hex::encode(Sha256::digest(std::fs::read(path)?));
            value.as_object_mut().expect("config is an object").insert("tensor_sha256".into(), digest.into());
        }
        Ok(serde_json::to_string(&value)?)
    }

    /// First 16 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self, base: &Path) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical(base)?.as_bytes()))[..16].to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "hamiltonian": {"analytic": {"name": "tent"}},
        "n_i": 2, "n_j": 1, "horizon": 1.0,
        "hj": {"dt": 0.0078125, "res_p": 200, "res_q": 1}
    }"#;

    #[test]
    fn parses_and_validates() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.validate(Path::new(".")).unwrap();
        assert_eq!(c.hj_params().unwrap().time_steps, 128);
        assert_eq!(c.hamiltonian, HamiltonianSpec::Analytic(Analytic::Tent { center: None }));
    }

    #[test]
    fn negative_dt_names_the_field() {
        let c = ExperimentConfig::parse(&MINIMAL.replace("0.0078125", "-0.01")).unwrap();
        match c.validate(Path::new(".")) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "hj.dt"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_fields_and_bad_versions_are_rejected() {
        assert!(ExperimentConfig::parse(&MINIMAL.replace("\"n_i\"", "\"extra\": 1, \"n_i\"")).is_err());
        let c = ExperimentConfig::parse(&MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 9")).unwrap();
        assert!(c.validate(Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("{").is_err());
    }

    #[test]
    fn hash_ignores_layout_but_not_values() {
        let base = Path::new(".");
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let compact: String = MINIMAL.split_whitespace().collect();
        let b = ExperimentConfig::parse(&compact).unwrap();
        let reordered = r#"{"n_j": 1, "n_i": 2, "horizon": 1.0, "seed": 0,
            "hj": {"res_q": 1, "res_p": 200, "dt": 0.0078125, "order": "vex_cav"},
            "hamiltonian": {"analytic": {"name": "tent", "center": null}}, "schema_version": 1}"#;
        let c = ExperimentConfig::parse(reordered).unwrap();
        assert_eq!(a.hash(base).unwrap(), b.hash(base).unwrap());
        assert_eq!(a.hash(base).unwrap(), c.hash(base).unwrap());
        let d = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(base).unwrap(), d.hash(base).unwrap());
    }

    #[test]
    fn missing_tensor_file_is_reported() {
        let text = MINIMAL.replace(r#"{"analytic": {"name": "tent"}}"#, r#"{"tensor": "no_such_file.json"}"#);
        let c = ExperimentConfig::parse(&text).unwrap();
        assert!(matches!(c.validate(Path::new(".")), Err(Error::Config { path, .. }) if path == "hamiltonian.tensor"));
    }

    #[test]
    fn tensor_contents_enter_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let t = PayoffTensor { time_samples: vec![0.0], n_i: 2, n_j: 1, n_k: 1, n_l: 1, values: vec![0.2, 0.4] };
        std::fs::write(dir.path().join("t.json"), serde_json::to_string(&t).unwrap()).unwrap();
        let text = MINIMAL.replace(r#"{"analytic": {"name": "tent"}}"#, r#"{"tensor": "t.json"}"#);
        let c = ExperimentConfig::parse(&text).unwrap();
        c.validate(dir.path()).unwrap();
        let h1 = c.hash(dir.path()).unwrap();
        assert!(c.field(dir.path()).is_ok());
        let t2 = PayoffTensor { values: vec![0.2, 0.5], ..t };
        std::fs::write(dir.path().join("t.json"), serde_json::to_string(&t2).unwrap()).unwrap();
        assert_ne!(h1, c.hash(dir.path()).unwrap());
    }
}
