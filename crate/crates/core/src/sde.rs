//! Euler simulation of the controlled martingales `dX = P_X u dB¹`,
//! `dY = P_Y v dB²` on the simplices, with absorbing faces, and Monte Carlo
//! estimation of the running payoff.
//!
//! Controls are piecewise constant on their own time grid and are chosen by
//! feedback maps that only see histories strictly before the grid point, so a
//! pair of such maps always resolves to a unique pair of controls.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::HamiltonianField;
use crate::simplex::{ControlMatrix, SimplexPoint};

/// Coordinates at or below this level are absorbed into the face.
pub const ABSORPTION_BAND: f64 = 1e-10;

/// Relative tolerance when matching control grid points to noise steps.
const GRID_TOLERANCE: f64 = 1e-9;

/// Largest simplex dimension; supports are stored as `u64` bitmasks.
pub const MAX_DIM: usize = 64;

/// Uniform time grid with per-path Gaussian increments for both players.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseGrid {
    pub t0: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub n_i: usize,
    pub n_j: usize,
    pub seed: u64,
}

/// Increments of one path, step-major: `db1[k * n_i + i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathNoise {
    pub db1: Vec<f64>,
    pub db2: Vec<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl NoiseGrid {
    pub fn new(t0: f64, horizon: f64, n_steps: usize, n_i: usize, n_j: usize, seed: u64) -> Result<Self> {
        if !(t0.is_finite() && horizon.is_finite() && horizon > t0) {
            return Err(Error::Precondition(format!("time interval [{t0}, {horizon}]")));
        }
        if n_steps == 0 {
            return Err(Error::Precondition("noise grid needs at least one step".into()));
        }
        for n in [n_i, n_j] {
            if n == 0 || n > MAX_DIM {
                return Err(Error::DimensionMismatch(format!("simplex dimension {n}")));
            }
        }
        Ok(Self { t0, horizon, n_steps, n_i, n_j, seed })
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    /// The step index of `s` if it is a grid point.
    pub fn step_index(&self, s: f64) -> Option<usize> {
        let x = (s - self.t0) / self.dt();
        let k = x.round();
        if k < 0.0 || k > self.n_steps as f64 || (x - k).abs() > GRID_TOLERANCE * k.max(1.0) {
            return None;
        }
        Some(k as usize)
    }

    pub fn path_seed(&self, path: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(path))
    }

    /// Increments of path `path`; `B¹` and `B²` come from disjoint ChaCha
    /// streams of the same per-path key.
    pub fn path_noise(&self, path: u64) -> PathNoise {
        let key = self.path_seed(path);
        let sd = self.dt().sqrt();
        let draw = |stream: u64, len: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            rng.set_stream(stream);
            (0..len).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>()
        };
        PathNoise { db1: draw(1, self.n_steps * self.n_i), db2: draw(2, self.n_steps * self.n_j) }
    }
}

/// What a feedback map may look at when choosing the control for one
/// interval of its grid.
#[derive(Debug)]
pub struct Observation<'a> {
    /// Index of the interval being chosen.
    pub interval: usize,
    /// Left endpoint of that interval.
    pub time: f64,
    /// Noise step index of `time`.
    pub step: usize,
    pub dt: f64,
    /// Own state at `time` (a function of the own history before `time`).
    pub state: &'a [f64],
    /// Own noise increments of all steps before `step`, step-major.
    pub own_increments: &'a [f64],
    /// Own controls of the earlier intervals.
    pub own_controls: &'a [ControlMatrix],
    /// Opponent controls `(start, matrix)` whose interval starts strictly
    /// before `time`.
    pub opponent_controls: &'a [(f64, ControlMatrix)],
}

impl Observation<'_> {
    /// Dimension of the own simplex.
    pub fn dim(&self) -> usize {
        self.state.len()
    }

    /// Own increments summed over steps `[from, to)`.
    pub fn increment_sum(&self, from: usize, to: usize) -> Vec<f64> {
        let n = self.dim();
        let mut acc = vec![0.0; n];
        for k in from..to.min(self.step) {
            for (a, b) in acc.iter_mut().zip(&self.own_increments[k * n..(k + 1) * n]) {
                *a += b;
            }
        }
        acc
    }
}

pub trait Feedback: Send + Sync {
    fn control(&self, obs: &Observation<'_>) -> Result<ControlMatrix>;
}

struct FnFeedback<F>(F);

impl<F> Feedback for FnFeedback<F>
where
    F: Fn(&Observation<'_>) -> Result<ControlMatrix> + Send + Sync,
{
    fn control(&self, obs: &Observation<'_>) -> Result<ControlMatrix> {
        (self.0)(obs)
    }
}

/// A simple control: a partition `t_0 < … < t_m` and a feedback map choosing
/// the constant value on each `[t_j, t_{j+1})`.
#[derive(Clone)]
pub struct FeedbackControl {
    grid: Vec<f64>,
    dim: usize,
    map: Arc<dyn Feedback>,
}

impl std::fmt::Debug for FeedbackControl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeedbackControl").field("grid", &self.grid).field("dim", &self.dim).finish()
    }
}

/// `m + 1` equally spaced points from `t0` to `horizon`.
pub fn uniform_grid(t0: f64, horizon: f64, m: usize) -> Vec<f64> {
    (0..=m).map(|j| if j == m { horizon } else { t0 + (horizon - t0) * j as f64 / m as f64 }).collect()
}

impl FeedbackControl {
    pub fn new(grid: Vec<f64>, dim: usize, map: Arc<dyn Feedback>) -> Result<Self> {
        if grid.len() < 2 || grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::GridMismatch("control grid must be finite and strictly increasing".into()));
        }
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::DimensionMismatch(format!("control dimension {dim}")));
        }
        Ok(Self { grid, dim, map })
    }

    pub fn from_fn<F>(grid: Vec<f64>, dim: usize, f: F) -> Result<Self>
    where
        F: Fn(&Observation<'_>) -> Result<ControlMatrix> + Send + Sync + 'static,
    {
        Self::new(grid, dim, Arc::new(FnFeedback(f)))
    }

    pub fn constant(grid: Vec<f64>, u: ControlMatrix) -> Result<Self> {
        let dim = u.dim();
        Self::from_fn(grid, dim, move |_| Ok(u.clone()))
    }

    pub fn zero(dim: usize, t0: f64, horizon: f64) -> Result<Self> {
        Self::constant(vec![t0, horizon], ControlMatrix::zeros(dim))
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn intervals(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn feedback(&self, obs: &Observation<'_>) -> Result<ControlMatrix> {
        let u = self.map.control(obs)?;
        if u.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "feedback returned a {0}x{0} matrix, expected {1}x{1}",
                u.dim(),
                self.dim
            )));
        }
        if u.entries().iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite(format!("control on interval {}", obs.interval)));
        }
        Ok(u)
    }

    /// Noise step index of every grid point.
    fn schedule(&self, noise: &NoiseGrid) -> Result<Vec<usize>> {
        let steps: Option<Vec<usize>> = self.grid.iter().map(|&s| noise.step_index(s)).collect();
        let steps = steps.ok_or_else(|| {
            Error::GridMismatch(format!("control grid points are not multiples of dt = {}", noise.dt()))
        })?;
        if steps[0] != 0 || *steps.last().unwrap() != noise.n_steps {
            return Err(Error::GridMismatch(format!(
                "control grid spans [{}, {}], noise spans [{}, {}]",
                self.grid[0],
                self.grid[self.grid.len() - 1],
                noise.t0,
                noise.horizon
            )));
        }
        if steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::GridMismatch("two control grid points share a noise step".into()));
        }
        Ok(steps)
    }
}

/// Ready-made controls for experiments and stress tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlPreset {
    Zero,
    /// `scale · Id`.
    Constant {
        scale: f64,
    },
    /// Volatility `25 · scale` pushing mass from the largest to the smallest
    /// live coordinate, re-chosen on every interval.
    Adversarial {
        scale: f64,
    },
    /// Switches between `scale · Id` and a rank-one matrix according to the
    /// sign of the own noise accumulated so far.
    NoiseSwitching {
        scale: f64,
    },
}

impl ControlPreset {
    pub fn build(&self, dim: usize, t0: f64, horizon: f64, intervals: usize) -> Result<FeedbackControl> {
        let grid = uniform_grid(t0, horizon, intervals.max(1));
        match *self {
            ControlPreset::Zero => FeedbackControl::constant(grid, ControlMatrix::zeros(dim)),
            ControlPreset::Constant { scale } => {
                FeedbackControl::constant(grid, ControlMatrix::identity(dim).scaled(scale))
            }
            ControlPreset::Adversarial { scale } => FeedbackControl::from_fn(grid, dim, move |obs| {
                let live: Vec<usize> = (0..dim).filter(|&i| obs.state[i] > 0.0).collect();
                if live.len() < 2 {
                    return Ok(ControlMatrix::zeros(dim));
                }
                let by = |i: &usize, j: &usize| obs.state[*i].total_cmp(&obs.state[*j]);
                let hi = live.iter().copied().max_by(by).unwrap();
                let lo = live.iter().copied().min_by(by).unwrap();
                let mut a = vec![0.0; dim];
                a[lo] = -1.0;
                a[hi] = 1.0;
                let b = vec![1.0 / (dim as f64).sqrt(); dim];
                ControlMatrix::rank_one(&a, &b, 25.0 * scale)
            }),
            ControlPreset::NoiseSwitching { scale } => FeedbackControl::from_fn(grid, dim, move |obs| {
                if dim < 2 {
                    return Ok(ControlMatrix::zeros(dim));
                }
                if obs.increment_sum(0, obs.step)[0] >= 0.0 {
                    Ok(ControlMatrix::identity(dim).scaled(scale))
                } else {
                    let mut a = vec![0.0; dim];
                    a[0] = 1.0;
                    a[1] = -1.0;
                    let mut b = vec![0.0; dim];
                    b[0] = 1.0;
                    ControlMatrix::rank_one(&a, &b, 2.0 * scale)
                }
            }),
        }
    }
}

fn support_mask(x: &[f64]) -> u64 {
    x.iter().enumerate().filter(|(_, &c)| c > 0.0).fold(0, |m, (i, _)| m | (1 << i))
}

/// One Euler step in place. Returns the increment `P_{S(x, eta)} u dB`
/// before any shrink.
///
/// A step that would leave the simplex, or whose mirror image `-inc` would,
/// is scaled by `min(1, θ₊, θ₋)` where `θ±` are the first face crossings
/// along `±inc`. The factor is even in `dB`, so the step stays a martingale
/// increment, and a step whose own crossing binds lands exactly on the face.
fn advance(x: &mut [f64], u: &ControlMatrix, db: &[f64], eta: f64) {
    let mut buf = [0.0; MAX_DIM];
    advance_into(x, u, db, eta, &mut buf[..x.len()]);
}

/// [`advance`] writing the unshrunk increment into `inc`.
fn advance_into(x: &mut [f64], u: &ControlMatrix, db: &[f64], eta: f64, inc: &mut [f64]) {
    let n = x.len();
    inc.fill(0.0);
    if u.is_zero() {
        absorb(x, eta);
        return;
    }
    let (mut live, mut sum) = (0usize, 0.0);
    for (i, row) in u.entries().chunks_exact(n).enumerate() {
        if x[i] > eta {
            inc[i] = row.iter().zip(db).map(|(a, b)| a * b).sum();
            sum += inc[i];
            live += 1;
        }
    }
    let mean = sum / live as f64;
    for i in 0..n {
        if x[i] > eta {
            inc[i] -= mean;
        }
    }
    if inc.iter().all(|&d| d == 0.0) {
        absorb(x, eta);
        return;
    }
    let mut forward = (1.0, None);
    let mut backward = 1.0;
    for i in 0..n {
        if inc[i] < 0.0 && x[i] + inc[i] < 0.0 {
            let r = -x[i] / inc[i];
            if r < forward.0 {
                forward = (r, Some(i));
            }
        } else if inc[i] > 0.0 && x[i] - inc[i] < 0.0 {
            backward = f64::min(backward, x[i] / inc[i]);
        }
    }
    let theta = f64::min(forward.0, backward);
    for i in 0..n {
        x[i] += theta * inc[i];
    }
    if let (r, Some(i)) = forward {
        if r <= backward {
            x[i] = 0.0;
        }
    }
    for c in x.iter_mut() {
        if *c <= eta {
            *c = 0.0;
        }
    }
    let sum: f64 = x.iter().sum();
    x.iter_mut().for_each(|c| *c /= sum);
}

/// Zeroes coordinates `<= eta` and renormalizes if anything changed.
fn absorb(x: &mut [f64], eta: f64) {
    if x.iter().all(|&c| c == 0.0 || c > eta) {
        return;
    }
    for c in x.iter_mut() {
        if *c <= eta {
            *c = 0.0;
        }
    }
    let sum: f64 = x.iter().sum();
    x.iter_mut().for_each(|c| *c /= sum);
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

/// Euler step `x' = x + P_{S(x, eta)} u dB` with the symmetric face-crossing
/// shrink, absorption of coordinates `<= eta` and renormalization.
pub fn step_x(x: &SimplexPoint, u: &ControlMatrix, db: &[f64], eta: f64) -> Result<SimplexPoint> {
    if u.dim() != x.dim() || db.len() != x.dim() {
        return Err(Error::DimensionMismatch("state, control and increment dimensions differ".into()));
    }
    check_finite(db, "noise increment")?;
    check_finite(u.entries(), "control")?;
    if !(eta >= 0.0 && eta < 1.0 / x.dim() as f64) {
        return Err(Error::Precondition(format!("absorption band {eta}")));
    }
    let mut c = x.coords().to_vec();
    advance(&mut c, u, db, eta);
    Ok(SimplexPoint::from_normalized(c))
}

/// Like [`step_x`] but also returns the realized increment before shrinking.
pub fn step_with_increment(x: &mut [f64], u: &ControlMatrix, db: &[f64], eta: f64) -> Vec<f64> {
    let mut inc = vec![0.0; x.len()];
    advance_into(x, u, db, eta, &mut inc);
    inc
}

/// Realized controls and terminal noise of one path.
#[derive(Clone, Debug, PartialEq)]
struct PathControls {
    u: Vec<ControlMatrix>,
    v: Vec<ControlMatrix>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

/// Everything needed to run paths of one game.
struct Game<'a> {
    p: &'a SimplexPoint,
    q: &'a SimplexPoint,
    u: &'a FeedbackControl,
    v: &'a FeedbackControl,
    noise: &'a NoiseGrid,
    u_steps: Vec<usize>,
    v_steps: Vec<usize>,
}

impl<'a> Game<'a> {
    fn new(
        t: f64,
        p: &'a SimplexPoint,
        q: &'a SimplexPoint,
        u: &'a FeedbackControl,
        v: &'a FeedbackControl,
        noise: &'a NoiseGrid,
    ) -> Result<Self> {
        if (t - noise.t0).abs() > GRID_TOLERANCE * t.abs().max(1.0) {
            return Err(Error::GridMismatch(format!("start time {t} but noise starts at {}", noise.t0)));
        }
        if p.dim() != noise.n_i || u.dim() != noise.n_i || q.dim() != noise.n_j || v.dim() != noise.n_j {
            return Err(Error::DimensionMismatch(format!(
                "noise is Δ({}) × Δ({}), states Δ({}) × Δ({}), controls {} and {}",
                noise.n_i,
                noise.n_j,
                p.dim(),
                q.dim(),
                u.dim(),
                v.dim()
            )));
        }
        Ok(Self { p, q, u, v, noise, u_steps: u.schedule(noise)?, v_steps: v.schedule(noise)? })
    }

    /// Runs one path, calling `visit(k, x, y)` with the state at every noise
    /// time `s_k`, `k = 0..=N`.
    fn run(&self, path: u64, mut visit: impl FnMut(usize, &[f64], &[f64])) -> Result<PathControls> {
        let noise = self.noise.path_noise(path);
        let (ni, nj) = (self.noise.n_i, self.noise.n_j);
        let dt = self.noise.dt();
        let mut x = self.p.coords().to_vec();
        let mut y = self.q.coords().to_vec();
        absorb(&mut x, ABSORPTION_BAND);
        absorb(&mut y, ABSORPTION_BAND);
        let mut u_hist: Vec<ControlMatrix> = Vec::with_capacity(self.u.intervals());
        let mut v_hist: Vec<ControlMatrix> = Vec::with_capacity(self.v.intervals());
        let mut u_seen: Vec<(f64, ControlMatrix)> = Vec::with_capacity(self.u.intervals());
        let mut v_seen: Vec<(f64, ControlMatrix)> = Vec::with_capacity(self.v.intervals());
        let mut u_cur = ControlMatrix::zeros(ni);
        let mut v_cur = ControlMatrix::zeros(nj);
        for k in 0..self.noise.n_steps {
            visit(k, &x, &y);
            let s = self.noise.time(k);
            // both maps read histories strictly before s, then both commit
            let new_u = match self.u_steps.get(u_hist.len()) {
                Some(&ks) if ks == k && u_hist.len() < self.u.intervals() => Some(self.u.feedback(&Observation {
                    interval: u_hist.len(),
                    time: s,
                    step: k,
                    dt,
                    state: &x,
                    own_increments: &noise.db1[..k * ni],
                    own_controls: &u_hist,
                    opponent_controls: &v_seen,
                })?),
                _ => None,
            };
            let new_v = match self.v_steps.get(v_hist.len()) {
                Some(&ks) if ks == k && v_hist.len() < self.v.intervals() => Some(self.v.feedback(&Observation {
                    interval: v_hist.len(),
                    time: s,
                    step: k,
                    dt,
                    state: &y,
                    own_increments: &noise.db2[..k * nj],
                    own_controls: &v_hist,
                    opponent_controls: &u_seen,
                })?),
                _ => None,
            };
            if let Some(m) = new_u {
                u_seen.push((s, m.clone()));
                u_hist.push(m.clone());
                u_cur = m;
            }
            if let Some(m) = new_v {
                v_seen.push((s, m.clone()));
                v_hist.push(m.clone());
                v_cur = m;
            }
            advance(&mut x, &u_cur, &noise.db1[k * ni..(k + 1) * ni], ABSORPTION_BAND);
            advance(&mut y, &v_cur, &noise.db2[k * nj..(k + 1) * nj], ABSORPTION_BAND);
        }
        visit(self.noise.n_steps, &x, &y);
        let total = |db: &[f64], n: usize| {
            let mut b = vec![0.0; n];
            for chunk in db.chunks_exact(n) {
                b.iter_mut().zip(chunk).for_each(|(a, c)| *a += c);
            }
            b
        };
        Ok(PathControls { u: u_hist, v: v_hist, b1: total(&noise.db1, ni), b2: total(&noise.db2, nj) })
    }
}

/// One simulated path, recorded at the bundle's record times.
#[derive(Clone, Debug, PartialEq)]
pub struct PathRecord {
    /// Recorded `X` states, record-major (`x[r * n_i + i]`).
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Support bitmasks of the recorded states.
    pub x_support: Vec<u64>,
    pub y_support: Vec<u64>,
    /// Realized controls, one per interval of each control grid.
    pub u: Vec<ControlMatrix>,
    pub v: Vec<ControlMatrix>,
    /// Terminal values `B¹_T - B¹_t` and `B²_T - B²_t`.
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBundle {
    pub n_i: usize,
    pub n_j: usize,
    /// Noise step index of each record; always starts at 0 and ends at `N`.
    pub record_steps: Vec<usize>,
    pub times: Vec<f64>,
    pub paths: Vec<PathRecord>,
}

impl TrajectoryBundle {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn n_records(&self) -> usize {
        self.times.len()
    }

    pub fn x_at(&self, path: usize, record: usize) -> &[f64] {
        &self.paths[path].x[record * self.n_i..(record + 1) * self.n_i]
    }

    pub fn y_at(&self, path: usize, record: usize) -> &[f64] {
        &self.paths[path].y[record * self.n_j..(record + 1) * self.n_j]
    }

    pub fn terminal_x(&self, path: usize) -> &[f64] {
        self.x_at(path, self.n_records() - 1)
    }

    pub fn terminal_y(&self, path: usize) -> &[f64] {
        self.y_at(path, self.n_records() - 1)
    }

    /// CSV with columns `path_id,time,x_1..x_nI,y_1..y_nJ`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut header = vec!["path_id".to_string(), "time".to_string()];
        header.extend((1..=self.n_i).map(|i| format!("x_{i}")));
        header.extend((1..=self.n_j).map(|j| format!("y_{j}")));
        writeln!(w, "{}", header.join(","))?;
        for (id, _) in self.paths.iter().enumerate() {
            for (r, t) in self.times.iter().enumerate() {
                let mut row = vec![id.to_string(), t.to_string()];
                row.extend(self.x_at(id, r).iter().map(|c| c.to_string()));
                row.extend(self.y_at(id, r).iter().map(|c| c.to_string()));
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// Simulates `n_paths` coupled paths of `(X, Y)` from `(t, p, q)`, keeping
/// every `record_stride`-th state plus the terminal one.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    t: f64,
    p: &SimplexPoint,
    q: &SimplexPoint,
    u: &FeedbackControl,
    v: &FeedbackControl,
    noise: &NoiseGrid,
    n_paths: usize,
    record_stride: usize,
) -> Result<TrajectoryBundle> {
    let game = Game::new(t, p, q, u, v, noise)?;
    let stride = record_stride.max(1);
    let n = noise.n_steps;
    let record_steps: Vec<usize> = (0..=n).filter(|k| k % stride == 0 || *k == n).collect();
    let times = record_steps.iter().map(|&k| noise.time(k)).collect();
    let paths = (0..n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let cap = record_steps.len();
            let mut rec = PathRecord {
                x: Vec::with_capacity(cap * noise.n_i),
                y: Vec::with_capacity(cap * noise.n_j),
                x_support: Vec::with_capacity(cap),
                y_support: Vec::with_capacity(cap),
                u: Vec::new(),
                v: Vec::new(),
                b1: Vec::new(),
                b2: Vec::new(),
            };
            let controls = game.run(path, |k, x, y| {
                if k % stride == 0 || k == n {
                    rec.x.extend_from_slice(x);
                    rec.y.extend_from_slice(y);
                    rec.x_support.push(support_mask(x));
                    rec.y_support.push(support_mask(y));
                }
            })?;
            rec.u = controls.u;
            rec.v = controls.v;
            rec.b1 = controls.b1;
            rec.b2 = controls.b2;
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBundle { n_i: noise.n_i, n_j: noise.n_j, record_steps, times, paths })
}

/// Sample mean and standard error of the mean. Deviations are taken from the
/// first sample so identical samples give exactly zero spread.
pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let x0 = samples[0];
    let d_mean = samples.iter().map(|x| x - x0).sum::<f64>() / n as f64;
    if n < 2 {
        return (x0 + d_mean, 0.0);
    }
    let ss: f64 = samples.iter().map(|x| (x - x0 - d_mean).powi(2)).sum();
    (x0 + d_mean, (ss / (n - 1) as f64 / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

/// Per-path left-endpoint quadrature of `∫_t^T H(s, X_s, Y_s) ds`.
#[allow(clippy::too_many_arguments)]
pub fn path_payoffs(
    t: f64,
    p: &SimplexPoint,
    q: &SimplexPoint,
    u: &FeedbackControl,
    v: &FeedbackControl,
    h: &HamiltonianField,
    noise: &NoiseGrid,
    n_paths: usize,
) -> Result<Vec<f64>> {
    path_payoffs_with_terminal(t, p, q, u, v, h, noise, n_paths, None)
}

/// Terminal reward `g(X_T, Y_T)` added to the running payoff.
pub type Terminal<'a> = &'a (dyn Fn(&[f64], &[f64]) -> Result<f64> + Sync);

/// [`path_payoffs`] plus an optional terminal reward evaluated at the end of
/// the noise grid.
#[allow(clippy::too_many_arguments)]
pub fn path_payoffs_with_terminal(
    t: f64,
    p: &SimplexPoint,
    q: &SimplexPoint,
    u: &FeedbackControl,
    v: &FeedbackControl,
    h: &HamiltonianField,
    noise: &NoiseGrid,
    n_paths: usize,
    terminal: Option<Terminal<'_>>,
) -> Result<Vec<f64>> {
    if h.n_i() != noise.n_i || h.n_j() != noise.n_j {
        return Err(Error::DimensionMismatch("Hamiltonian and noise dimensions differ".into()));
    }
    let game = Game::new(t, p, q, u, v, noise)?;
    let dt = noise.dt();
    let n = noise.n_steps;
    (0..n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let mut acc = 0.0;
            let mut err = None;
            game.run(path, |k, x, y| {
                if err.is_some() {
                    return;
                }
                let r = if k < n {
                    h.value(noise.time(k), x, y).map(|val| val * dt)
                } else {
                    terminal.map_or(Ok(0.0), |g| g(x, y))
                };
                match r {
                    Ok(val) => acc += val,
                    Err(e) => err = Some(e),
                }
            })?;
            match err {
                Some(e) => Err(e),
                None => Ok(acc),
            }
        })
        .collect()
}

/// Monte Carlo estimate of `J(t, p, q, u, v)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_j(
    t: f64,
    p: &SimplexPoint,
    q: &SimplexPoint,
    u: &FeedbackControl,
    v: &FeedbackControl,
    h: &HamiltonianField,
    noise: &NoiseGrid,
    n_paths: usize,
) -> Result<Estimate> {
    if n_paths < 2 {
        return Err(Error::Precondition("at least two paths are needed for a standard error".into()));
    }
    let samples = path_payoffs(t, p, q, u, v, h, noise, n_paths)?;
    let (mean, std_error) = mean_and_se(&samples);
    Ok(Estimate { mean, std_error, n_paths })
}

/// `((2 + √n) n)^{2n - 1}`: Lipschitz constant of the initial-condition map
/// on Δ(n).
pub fn lipschitz_constant(n: usize) -> f64 {
    let n_f = n as f64;
    ((2.0 + n_f.sqrt()) * n_f).powi(2 * n as i32 - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// `max_s` of the empirical `E|X_s - X̄_s|`.
    pub estimate: f64,
    /// Standard error at the maximizing time.
    pub std_error: f64,
    pub argmax_time: f64,
    /// `C̄ |p - p̄|`.
    pub bound: f64,
}

impl LipschitzReport {
    pub fn holds(&self) -> bool {
        self.estimate <= self.bound + 3.0 * self.std_error
    }
}

/// Runs `X^{t,p,u}` and `X^{t,p̄,u}` on the same noise with the same realized
/// control process (the one chosen along the `p` path).
pub fn lipschitz_p_check(
    t: f64,
    p: &SimplexPoint,
    p_bar: &SimplexPoint,
    u: &FeedbackControl,
    noise: &NoiseGrid,
    n_paths: usize,
) -> Result<LipschitzReport> {
    if p_bar.dim() != p.dim() {
        return Err(Error::DimensionMismatch("initial points differ in dimension".into()));
    }
    let q = SimplexPoint::uniform(noise.n_j);
    let v = FeedbackControl::zero(noise.n_j, noise.t0, noise.horizon)?;
    let game = Game::new(t, p, &q, u, &v, noise)?;
    let n = noise.n_steps;
    let ni = noise.n_i;
    let per_path: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let mut xs = Vec::with_capacity((n + 1) * ni);
            let controls = game.run(path, |_, x, _| xs.extend_from_slice(x))?;
            let db = noise.path_noise(path).db1;
            let mut xb = p_bar.coords().to_vec();
            absorb(&mut xb, ABSORPTION_BAND);
            let mut dist = Vec::with_capacity(n + 1);
            let mut interval = 0;
            for k in 0..=n {
                dist.push(crate::simplex::distance(&xs[k * ni..(k + 1) * ni], &xb));
                if k == n {
                    break;
                }
                while interval + 1 < game.u_steps.len() - 1 && game.u_steps[interval + 1] <= k {
                    interval += 1;
                }
                advance(&mut xb, &controls.u[interval], &db[k * ni..(k + 1) * ni], ABSORPTION_BAND);
            }
            Ok(dist)
        })
        .collect::<Result<_>>()?;
    let mut best = LipschitzReport {
        estimate: 0.0,
        std_error: 0.0,
        argmax_time: noise.t0,
        bound: lipschitz_constant(ni) * crate::simplex::distance(p.coords(), p_bar.coords()),
    };
    let mut column = vec![0.0; per_path.len()];
    for k in 0..=n {
        column.iter_mut().zip(&per_path).for_each(|(c, d)| *c = d[k]);
        let (m, se) = mean_and_se(&column);
        if m > best.estimate {
            best.estimate = m;
            best.std_error = se;
            best.argmax_time = noise.time(k);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEntry {
    /// Coordinate of `X_T - p`.
    pub coordinate: usize,
    /// Name of the `B²`-measurable functional.
    pub functional: String,
    pub covariance: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    pub entries: Vec<CovarianceEntry>,
}

impl IndependenceReport {
    /// Whether every covariance lies within `k` standard errors of zero.
    pub fn within(&self, k: f64) -> bool {
        self.entries.iter().all(|e| e.covariance.abs() <= k * e.std_error)
    }
}

/// Empirical covariances between the coordinates of `X_T - p` and bounded
/// functionals of the `B²` path: the coordinates of `Y_T`, the sign of
/// `B²_T` (first coordinate) and its `tanh`.
pub fn independence_check(bundle: &TrajectoryBundle, p: &SimplexPoint) -> Result<IndependenceReport> {
    if p.dim() != bundle.n_i {
        return Err(Error::DimensionMismatch("initial point and bundle differ".into()));
    }
    if bundle.n_paths() < 2 {
        return Err(Error::Precondition("at least two paths are needed".into()));
    }
    let mut functionals: Vec<(String, Vec<f64>)> = (0..bundle.n_j)
        .map(|j| (format!("y_T[{j}]"), (0..bundle.n_paths()).map(|i| bundle.terminal_y(i)[j]).collect()))
        .collect();
    let b2: Vec<f64> = bundle.paths.iter().map(|r| r.b2[0]).collect();
    functionals.push(("sign(B2_T[0])".into(), b2.iter().map(|b| b.signum()).collect()));
    functionals.push(("tanh(B2_T[0])".into(), b2.iter().map(|b| b.tanh()).collect()));
    let mut entries = Vec::new();
    for i in 0..bundle.n_i {
        let a: Vec<f64> = (0..bundle.n_paths()).map(|k| bundle.terminal_x(k)[i] - p[i]).collect();
        let (a_mean, _) = mean_and_se(&a);
        for (name, b) in &functionals {
            let (b_mean, _) = mean_and_se(b);
            let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - a_mean) * (y - b_mean)).collect();
            let (covariance, std_error) = mean_and_se(&prod);
            entries.push(CovarianceEntry { coordinate: i, functional: name.clone(), covariance, std_error });
        }
    }
    Ok(IndependenceReport { entries })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    /// Every recorded state has nonnegative coordinates summing to 1 within
    /// `1e-12`.
    pub in_simplex: bool,
    pub min_coordinate: f64,
    pub max_sum_error: f64,
    /// Largest `|mean(X_s)_i - p_i| / SE` over record times and coordinates
    /// of both players.
    pub max_z: f64,
    pub worst_time: f64,
}

impl MartingaleReport {
    pub fn within(&self, k: f64) -> bool {
        self.in_simplex && self.max_z <= k
    }
}

/// Simplex membership and the mean of the recorded states of a bundle
/// started at `(p, q)`.
pub fn martingale_report(bundle: &TrajectoryBundle, p: &SimplexPoint, q: &SimplexPoint) -> MartingaleReport {
    let mut report = MartingaleReport {
        in_simplex: true,
        min_coordinate: f64::INFINITY,
        max_sum_error: 0.0,
        max_z: 0.0,
        worst_time: bundle.times.first().copied().unwrap_or(0.0),
    };
    for rec in &bundle.paths {
        for (states, n) in [(&rec.x, bundle.n_i), (&rec.y, bundle.n_j)] {
            for s in states.chunks_exact(n) {
                let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
                let err = (s.iter().sum::<f64>() - 1.0).abs();
                report.min_coordinate = report.min_coordinate.min(lo);
                report.max_sum_error = report.max_sum_error.max(err);
            }
        }
    }
    report.in_simplex = report.min_coordinate >= 0.0 && report.max_sum_error <= 1e-12;
    let mut column = vec![0.0; bundle.n_paths()];
    for r in 0..bundle.n_records() {
        for (start, n, x0) in [(0, bundle.n_i, p.coords()), (1, bundle.n_j, q.coords())] {
            for i in 0..n {
                for (path, c) in column.iter_mut().enumerate() {
                    *c = if start == 0 { bundle.x_at(path, r)[i] } else { bundle.y_at(path, r)[i] };
                }
                let (mean, se) = mean_and_se(&column);
                let dev = (mean - x0[i]).abs();
                let z = if dev <= 1e-15 {
                    0.0
                } else if se > 0.0 {
                    dev / se
                } else {
                    f64::INFINITY
                };
                if z > report.max_z {
                    report.max_z = z;
                    report.worst_time = bundle.times[r];
                }
            }
        }
    }
    report
}
