//! Subcommand pipelines: config in, in-memory artifacts out.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::arena::{dpp_diagnostic, value_bracket, ArenaParams};
use crate::config::{whole_steps, ExperimentConfig};
use crate::error::{Error, Result};
use crate::hj::{regularity_report, residuals, solve, solve_both, CONVEXITY_TOLERANCE};
use crate::report::{Artifacts, Check, RunReport};
use crate::sde::{independence_check, martingale_report, simulate, NoiseGrid};
use crate::simplex::SimplexPoint;
use crate::splitting::{evaluate_split, split_payoff_demo, write_histogram_csv};
use crate::verify;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    SolveHj,
    Simulate,
    SplitDemo,
    McGame,
    Verify,
}

impl Subcommand {
    pub const ALL: [Subcommand; 5] =
        [Subcommand::SolveHj, Subcommand::Simulate, Subcommand::SplitDemo, Subcommand::McGame, Subcommand::Verify];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::SolveHj => "solve-hj",
            Subcommand::Simulate => "simulate",
            Subcommand::SplitDemo => "split-demo",
            Subcommand::McGame => "mc-game",
            Subcommand::Verify => "verify",
        }
    }
}

fn missing(block: &str, cmd: Subcommand) -> Error {
    Error::Config { path: block.into(), message: format!("`{}` needs this block", cmd.name()) }
}

type Output = (Vec<Check>, Value, BTreeMap<String, Vec<u8>>);

/// Runs one subcommand on a validated config.
pub fn execute(cmd: Subcommand, cfg: &ExperimentConfig, base: &Path) -> Result<Artifacts> {
    let start = Instant::now();
    let config_hash = cfg.hash(base)?;
    let (checks, results, files) = match cmd {
        Subcommand::SolveHj => solve_hj(cfg, base)?,
        Subcommand::Simulate => run_simulate(cfg)?,
        Subcommand::SplitDemo => split_demo(cfg, base)?,
        Subcommand::McGame => mc_game(cfg, base)?,
        Subcommand::Verify => run_verify(cfg)?,
    };
    Ok(Artifacts {
        report: RunReport { config_hash, subcommand: cmd.name().into(), checks, results },
        files,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn solve_hj(cfg: &ExperimentConfig, base: &Path) -> Result<Output> {
    let block = cfg.hj.as_ref().ok_or_else(|| missing("hj", Subcommand::SolveHj))?;
    let params = cfg.hj_params().expect("hj block present");
    let h = cfg.field(base)?;
    let (v, _, gap) = solve_both(&h, &params)?;
    let res = residuals(&v, &h)?;
    let reg = regularity_report(&v);
    let (min, max) = v.extrema();
    let centre = v.value_at(0.0, SimplexPoint::uniform(cfg.n_i).coords(), SimplexPoint::uniform(cfg.n_j).coords())?;
    let mut csv = Vec::new();
    v.write_csv(&mut csv, block.csv_stride)?;
    let checks = vec![
        Check::at_most("time lipschitz", reg.time_increment, reg.time_bound),
        Check::at_least("convex in p", reg.min_p_second_difference, -CONVEXITY_TOLERANCE),
        Check::at_most("concave in q", reg.max_q_second_difference, CONVEXITY_TOLERANCE),
        Check::at_most("lipschitz in p", reg.lipschitz_p, reg.lipschitz_bound_p),
        Check::at_most("lipschitz in q", reg.lipschitz_q, reg.lipschitz_bound_q),
    ];
    let results = json!({
        "time_steps": params.time_steps,
        "dt": params.dt(),
        "nodes_p": v.grid.p.len(),
        "nodes_q": v.grid.q.len(),
        "order": params.order,
        "min": min,
        "max": max,
        "value_at_barycentre": centre,
        "order_gap": gap,
        "residual": {
            "max": res.max_residual,
            "argmax": res.argmax,
            "branches": res.counts,
        },
        "regularity": reg,
    });
    Ok((checks, results, BTreeMap::from([("values.csv".to_string(), csv)])))
}

fn run_simulate(cfg: &ExperimentConfig) -> Result<Output> {
    let b = cfg.simulate.as_ref().ok_or_else(|| missing("simulate", Subcommand::Simulate))?;
    let steps = whole_steps(cfg.horizon, b.dt).expect("validated step");
    let noise = NoiseGrid::new(0.0, cfg.horizon, steps, cfg.n_i, cfg.n_j, cfg.seed)?;
    let p = SimplexPoint::new(b.p.clone())?;
    let q = SimplexPoint::new(b.q.clone())?;
    let u = b.u.build(cfg.n_i, 0.0, cfg.horizon, b.intervals)?;
    let v = b.v.build(cfg.n_j, 0.0, cfg.horizon, b.intervals)?;
    let bundle = simulate(0.0, &p, &q, &u, &v, &noise, b.n_paths, b.record_stride)?;
    let mart = martingale_report(&bundle, &p, &q);
    let indep = independence_check(&bundle, &p)?;
    let mut csv = Vec::new();
    bundle.write_csv(&mut csv)?;
    let checks = vec![
        Check::flag("states in the simplex", mart.in_simplex),
        Check::at_most("martingale max z", mart.max_z, 3.0),
    ];
    let results = json!({ "steps": steps, "martingale": mart, "independence": indep });
    Ok((checks, results, BTreeMap::from([("trajectories.csv".to_string(), csv)])))
}

fn split_demo(cfg: &ExperimentConfig, base: &Path) -> Result<Output> {
    let b = cfg.split.as_ref().ok_or_else(|| missing("split", Subcommand::SplitDemo))?;
    let report = evaluate_split(&b.spec, b.t, b.n_paths, cfg.seed)?;
    let mut csv = Vec::new();
    write_histogram_csv(&report.histogram, &mut csv)?;
    let checks = vec![
        Check::at_most("epsilon", report.epsilon, 0.05),
        Check::at_most("hit frequency deviation", (report.hit_frequency - report.lambda1).abs(), 3.0 * report.hit_se),
        Check::at_most("segment violations", report.segment_violations as f64, 0.0),
    ];
    let payoff = if cfg.n_j == 1 {
        Some(split_payoff_demo(&cfg.field(base)?, &b.spec, b.t, cfg.horizon, b.n_paths, cfg.seed)?)
    } else {
        None
    };
    let results = json!({ "split": report, "payoff": payoff });
    Ok((checks, results, BTreeMap::from([("histogram.csv".to_string(), csv)])))
}

fn mc_game(cfg: &ExperimentConfig, base: &Path) -> Result<Output> {
    let b = cfg.game.as_ref().ok_or_else(|| missing("game", Subcommand::McGame))?;
    let h = cfg.field(base)?;
    let p = SimplexPoint::new(b.p.clone())?;
    let q = SimplexPoint::new(b.q.clone())?;
    let params = ArenaParams { dt: b.dt, n_paths: b.n_paths, seed: cfg.seed };
    let reference = cfg.hj_params().map(|hp| solve(&h, &hp)).transpose()?;
    let bracket = value_bracket(0.0, cfg.horizon, &p, &q, &h, &b.fam_1, &b.fam_2, &params, reference.as_ref())?;
    let se = bracket.lower.std_error.max(bracket.upper.std_error);
    let mut checks = vec![Check::at_most("bracket order", bracket.lower.mean - bracket.upper.mean, 6.0 * se)];
    let dpp = match (b.dpp_step, &reference) {
        (Some(step), Some(v)) => {
            let d = dpp_diagnostic(0.0, step, &p, &q, &h, &b.fam_2, &b.fam_1, v, &params)?;
            checks.push(Check::at_most("dpp gap", d.gap.abs(), d.tolerance));
            Some(d)
        }
        _ => None,
    };
    let results = json!({ "bracket": bracket, "dpp": dpp });
    Ok((checks, results, BTreeMap::new()))
}

fn run_verify(cfg: &ExperimentConfig) -> Result<Output> {
    let opts = cfg.verify.clone().unwrap_or_default();
    let outcome = verify::suite(&opts, cfg.seed)?;
    let checks = outcome.iter().map(verify::Criterion::summary).collect();
    let results = serde_json::to_value(outcome.iter().map(verify::Criterion::without_timing).collect::<Vec<_>>())?;
    Ok((checks, results, BTreeMap::new()))
}
