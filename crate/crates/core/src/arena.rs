//! Game evaluation over finite families of simple strategies with delay.
//!
//! Each strategy is turned into a [`FeedbackControl`] that reads only
//! histories strictly before the current grid point, so a pair of strategies
//! resolves to a unique pair of controls in one forward pass. Restricted
//! values are then brackets of `J` over the families, estimated with common
//! random numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::HamiltonianField;
use crate::hj::ValueGrid;
use crate::sde::{
    mean_and_se, path_payoffs, path_payoffs_with_terminal, simulate, uniform_grid, Estimate, FeedbackControl,
    NoiseGrid, Observation,
};
use crate::simplex::{ControlMatrix, SimplexPoint};
use crate::splitting::{make_split_control, SplitSpec};

/// Largest number of strategy pairs a bracket may evaluate.
pub const MAX_PAIRS: usize = 10_000;

/// Symbols per lag of a [`Strategy::Table`]: "no history" plus own noise
/// sign × opponent idle/active.
pub const LAG_SYMBOLS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Zero,
    /// Catalogue action `action` on every interval.
    Constant {
        action: usize,
    },
    /// `scale (e_to - e_from) e_1ᵀ` on every interval.
    Directional {
        scale: f64,
        from: usize,
        to: usize,
    },
    /// The split control on `[t, t + h]`, zero afterwards.
    SplitThenFreeze {
        split: SplitSpec,
    },
    /// Catalogue action `default` first, then the opponent's most recent
    /// control. Needs equal dimensions.
    Echo {
        default: usize,
    },
    /// Catalogue action `table[symbol]` where the symbol encodes the last
    /// `depth` intervals of own noise signs and opponent activity.
    Table {
        table: Vec<usize>,
    },
}

/// Random [`Strategy::Table`] members drawn from a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledTables {
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyFamily {
    /// Number of equal control intervals shared by catalogue strategies.
    pub intervals: usize,
    pub catalogue: Vec<ControlMatrix>,
    /// Lags read by table strategies.
    pub depth: usize,
    pub members: Vec<Strategy>,
    #[serde(default)]
    pub sampled: Option<SampledTables>,
}

impl StrategyFamily {
    /// `{zero, constant-κ directional, split-then-freeze}` on Δ(`dim`); the
    /// split is dropped when `split` is `None`.
    pub fn preset(dim: usize, intervals: usize, kappa: f64, split: Option<SplitSpec>) -> Self {
        let mut members = vec![Strategy::Zero];
        if dim > 1 {
            members.push(Strategy::Directional { scale: kappa, from: 1, to: 0 });
        }
        if let Some(split) = split {
            members.push(Strategy::SplitThenFreeze { split });
        }
        Self { intervals, catalogue: vec![ControlMatrix::zeros(dim)], depth: 0, members, sampled: None }
    }

    pub fn table_len(&self) -> usize {
        LAG_SYMBOLS.pow(self.depth as u32)
    }

    /// Explicit members followed by the sampled tables.
    pub fn strategies(&self) -> Vec<Strategy> {
        let mut out = self.members.clone();
        if let Some(s) = &self.sampled {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            let k = self.catalogue.len();
            for _ in 0..s.count {
                let table = (0..self.table_len()).map(|_| rng.random_range(0..k)).collect();
                out.push(Strategy::Table { table });
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.members.len() + self.sampled.as_ref().map_or(0, |s| s.count)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.intervals == 0 {
            return Err(Error::Precondition("a family needs at least one interval".into()));
        }
        if self.is_empty() {
            return Err(Error::Precondition("empty strategy family".into()));
        }
        if self.catalogue.iter().any(|m| m.dim() != dim) {
            return Err(Error::DimensionMismatch(format!("catalogue actions must be {dim}x{dim}")));
        }
        if self.depth > 6 {
            return Err(Error::Precondition(format!("table depth {} exceeds 6", self.depth)));
        }
        let k = self.catalogue.len();
        let in_range = |a: usize| {
            if a < k {
                Ok(())
            } else {
                Err(Error::Precondition(format!("action {a} outside a catalogue of {k}")))
            }
        };
        if self.sampled.as_ref().is_some_and(|s| s.count > 0) && k == 0 {
            return Err(Error::Precondition("sampled tables need a catalogue".into()));
        }
        for s in &self.members {
            match s {
                Strategy::Zero => {}
                Strategy::Constant { action } | Strategy::Echo { default: action } => in_range(*action)?,
                Strategy::Directional { scale, from, to } => {
                    if *from >= dim || *to >= dim || from == to || !scale.is_finite() {
                        return Err(Error::Precondition(format!("directional strategy {from} -> {to} on Δ({dim})")));
                    }
                }
                Strategy::SplitThenFreeze { split } => {
                    split.validate()?;
                    if split.dim() != dim {
                        return Err(Error::DimensionMismatch("split dimension".into()));
                    }
                }
                Strategy::Table { table } => {
                    if table.len() != self.table_len() {
                        return Err(Error::Precondition(format!(
                            "table of length {} for depth {}",
                            table.len(),
                            self.depth
                        )));
                    }
                    table.iter().try_for_each(|&a| in_range(a))?;
                }
            }
        }
        Ok(())
    }

    /// Builds every strategy as a control on `[t, horizon]` for a player
    /// starting at `p`.
    pub fn controls(&self, p: &SimplexPoint, t: f64, horizon: f64) -> Result<Vec<FeedbackControl>> {
        self.validate(p.dim())?;
        self.strategies().iter().map(|s| self.build(s, p, t, horizon)).collect()
    }

    fn build(&self, s: &Strategy, p: &SimplexPoint, t: f64, horizon: f64) -> Result<FeedbackControl> {
        let dim = p.dim();
        let grid = uniform_grid(t, horizon, self.intervals);
        match s {
            Strategy::Zero => FeedbackControl::constant(grid, ControlMatrix::zeros(dim)),
            Strategy::Constant { action } => FeedbackControl::constant(grid, self.catalogue[*action].clone()),
            Strategy::Directional { scale, from, to } => {
                let mut a = vec![0.0; dim];
                a[*to] = 1.0;
                a[*from] = -1.0;
                let mut b = vec![0.0; dim];
                b[0] = 1.0;
                FeedbackControl::constant(grid, ControlMatrix::rank_one(&a, &b, *scale)?)
            }
            Strategy::SplitThenFreeze { split } => {
                if split.p.coords().iter().zip(p.coords()).any(|(a, b)| (a - b).abs() > 1e-10) {
                    return Err(Error::InvalidSplit("split must start at the initial state".into()));
                }
                make_split_control(split, t, horizon)
            }
            Strategy::Echo { default } => {
                let first = self.catalogue[*default].clone();
                FeedbackControl::from_fn(grid, dim, move |obs| match obs.opponent_controls.last() {
                    Some((_, m)) if m.dim() == first.dim() => Ok(m.clone()),
                    Some(_) => Err(Error::DimensionMismatch("echo needs equal dimensions".into())),
                    None => Ok(first.clone()),
                })
            }
            Strategy::Table { table } => {
                let table = table.clone();
                let catalogue = self.catalogue.clone();
                let depth = self.depth;
                let own_grid = grid.clone();
                FeedbackControl::from_fn(grid, dim, move |obs| {
                    Ok(catalogue[table[table_symbol(obs, &own_grid, depth)]].clone())
                })
            }
        }
    }
}

/// Noise step of grid time `s` as seen from the current observation.
fn step_of(obs: &Observation<'_>, s: f64) -> usize {
    let back = ((obs.time - s) / obs.dt).round() as usize;
    obs.step - back.min(obs.step)
}

/// Base-[`LAG_SYMBOLS`] code of the last `depth` intervals, most recent lag
/// least significant.
fn table_symbol(obs: &Observation<'_>, grid: &[f64], depth: usize) -> usize {
    let j = obs.interval;
    let mut code = 0;
    for lag in (1..=depth).rev() {
        let sym = if lag > j {
            0
        } else {
            let i = j - lag;
            let (a, b) = (step_of(obs, grid[i]), step_of(obs, grid[i + 1]));
            let up = obs.increment_sum(a, b)[0] >= 0.0;
            let active = obs
                .opponent_controls
                .iter()
                .rev()
                .find(|(s, _)| *s <= grid[i] + 1e-12)
                .is_some_and(|(_, m)| !m.is_zero());
            1 + 2 * usize::from(up) + usize::from(active)
        };
        code = code * LAG_SYMBOLS + sym;
    }
    code
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArenaParams {
    /// Noise step; every control grid point must be a multiple of it.
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl ArenaParams {
    pub fn noise(&self, t: f64, horizon: f64, n_i: usize, n_j: usize) -> Result<NoiseGrid> {
        if !(self.dt > 0.0) || horizon <= t {
            return Err(Error::Precondition("positive step and horizon after t required".into()));
        }
        let ratio = (horizon - t) / self.dt;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-6 || n < 1.0 {
            return Err(Error::GridMismatch(format!("[{t}, {horizon}] is not a multiple of dt = {}", self.dt)));
        }
        NoiseGrid::new(t, horizon, n as usize, n_i, n_j, self.seed)
    }
}

/// Realized control sequences of one path.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedControls {
    pub u: Vec<ControlMatrix>,
    pub v: Vec<ControlMatrix>,
}

/// Per-path fixed point of two feedback controls.
pub fn resolve_controls(
    alpha: &FeedbackControl,
    beta: &FeedbackControl,
    p: &SimplexPoint,
    q: &SimplexPoint,
    noise: &NoiseGrid,
    n_paths: usize,
) -> Result<Vec<ResolvedControls>> {
    let bundle = simulate(noise.t0, p, q, alpha, beta, noise, n_paths, noise.n_steps)?;
    Ok(bundle.paths.into_iter().map(|r| ResolvedControls { u: r.u, v: r.v }).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueBracket {
    /// `max_b min_a J(a, b)`.
    pub lower: Estimate,
    /// `min_a max_b J(a, b)`.
    pub upper: Estimate,
    /// `(a, b)` pairs attaining the two estimates.
    pub lower_pair: (usize, usize),
    pub upper_pair: (usize, usize),
    /// Mean payoff of every pair, rows indexed by the minimizer's strategy.
    pub payoffs: Vec<Vec<f64>>,
    pub reference: Option<f64>,
}

fn check_budget(a: usize, b: usize) -> Result<()> {
    if a * b > MAX_PAIRS {
        return Err(Error::Budget(format!("{a} x {b} strategy pairs exceed {MAX_PAIRS}")));
    }
    Ok(())
}

/// `J` for every pair, evaluated on the same noise paths.
fn payoff_matrix(
    sample: impl Fn(&FeedbackControl, &FeedbackControl) -> Result<Vec<f64>>,
    us: &[FeedbackControl],
    vs: &[FeedbackControl],
) -> Result<Vec<Vec<Estimate>>> {
    us.iter()
        .map(|u| {
            vs.iter()
                .map(|v| {
                    let samples = sample(u, v)?;
                    let (mean, std_error) = mean_and_se(&samples);
                    Ok(Estimate { mean, std_error, n_paths: samples.len() })
                })
                .collect()
        })
        .collect()
}

fn upper_of(m: &[Vec<Estimate>]) -> (usize, usize) {
    let row_max = |a: usize| (0..m[a].len()).fold(0, |best, b| if m[a][b].mean > m[a][best].mean { b } else { best });
    let a = (0..m.len()).fold(0, |best, a| if m[a][row_max(a)].mean < m[best][row_max(best)].mean { a } else { best });
    (a, row_max(a))
}

fn lower_of(m: &[Vec<Estimate>]) -> (usize, usize) {
    let col_min = |b: usize| (0..m.len()).fold(0, |best, a| if m[a][b].mean < m[best][b].mean { a } else { best });
    let b =
        (0..m[0].len()).fold(0, |best, b| if m[col_min(b)][b].mean > m[col_min(best)][best].mean { b } else { best });
    (col_min(b), b)
}

/// Restricted upper and lower values of the game started at `(t, p, q)` and
/// run until `horizon`; player 1 (family `fam_1`) minimizes.
#[allow(clippy::too_many_arguments)]
pub fn value_bracket(
    t: f64,
    horizon: f64,
    p: &SimplexPoint,
    q: &SimplexPoint,
    h: &HamiltonianField,
    fam_1: &StrategyFamily,
    fam_2: &StrategyFamily,
    params: &ArenaParams,
    reference: Option<&ValueGrid>,
) -> Result<ValueBracket> {
    check_budget(fam_1.len(), fam_2.len())?;
    if params.n_paths < 2 {
        return Err(Error::Precondition("at least two paths are needed".into()));
    }
    let noise = params.noise(t, horizon, p.dim(), q.dim())?;
    let us = fam_1.controls(p, t, horizon)?;
    let vs = fam_2.controls(q, t, horizon)?;
    let m = payoff_matrix(|u, v| path_payoffs(t, p, q, u, v, h, &noise, params.n_paths), &us, &vs)?;
    let upper_pair = upper_of(&m);
    let lower_pair = lower_of(&m);
    Ok(ValueBracket {
        lower: m[lower_pair.0][lower_pair.1],
        upper: m[upper_pair.0][upper_pair.1],
        lower_pair,
        upper_pair,
        payoffs: m.iter().map(|r| r.iter().map(|e| e.mean).collect()).collect(),
        reference: reference.map(|v| v.value_at(t, p.coords(), q.coords())).transpose()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DppReport {
    /// `sup_b inf_a E[∫_t^{t+h} H ds + V_ref(t + h, X, Y)]`.
    pub estimate: f64,
    pub std_error: f64,
    /// `V_ref(t, p, q)`.
    pub reference: f64,
    /// `estimate - reference`.
    pub gap: f64,
    pub tolerance: f64,
    pub within: bool,
}

/// Tolerance of the dynamic programming gap on the canonical examples.
pub const DPP_TOLERANCE: f64 = 0.05;

/// One-step dynamic programming check against a solved value grid.
#[allow(clippy::too_many_arguments)]
pub fn dpp_diagnostic(
    t: f64,
    step: f64,
    p: &SimplexPoint,
    q: &SimplexPoint,
    h: &HamiltonianField,
    fam_2: &StrategyFamily,
    fam_1: &StrategyFamily,
    v_ref: &ValueGrid,
    params: &ArenaParams,
) -> Result<DppReport> {
    let end = t + step;
    let k = end / v_ref.dt();
    if (k - k.round()).abs() > 1e-9 || end > v_ref.params.horizon + 1e-12 {
        return Err(Error::Precondition(format!("t + h = {end} is not a time of the reference grid")));
    }
    check_budget(fam_1.len(), fam_2.len())?;
    if params.n_paths < 2 {
        return Err(Error::Precondition("at least two paths are needed".into()));
    }
    let noise = params.noise(t, end, p.dim(), q.dim())?;
    let us = fam_1.controls(p, t, end)?;
    let vs = fam_2.controls(q, t, end)?;
    let terminal = |x: &[f64], y: &[f64]| v_ref.value_at(end.min(v_ref.params.horizon), x, y);
    let m = payoff_matrix(
        |u, v| path_payoffs_with_terminal(t, p, q, u, v, h, &noise, params.n_paths, Some(&terminal)),
        &us,
        &vs,
    )?;
    let (a, b) = lower_of(&m);
    let reference = v_ref.value_at(t, p.coords(), q.coords())?;
    let gap = m[a][b].mean - reference;
    Ok(DppReport {
        estimate: m[a][b].mean,
        std_error: m[a][b].std_error,
        reference,
        gap,
        tolerance: DPP_TOLERANCE,
        within: gap.abs() <= DPP_TOLERANCE,
    })
}
