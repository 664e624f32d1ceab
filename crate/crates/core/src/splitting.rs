//! A simple feedback control whose state at `t + h` approximates a
//! two-point splitting martingale: from `p = λ₁ p¹ + (1 - λ₁) p²` the state
//! ends near `p¹` with probability about `λ₁` and near `p²` otherwise.
//!
//! Writing `X_s = p¹ + x_s (p² - p¹)`, the control is the rank-one matrix
//! `g_j (p² - p¹) e₁ᵀ`, so the scalar `x` is driven by the first coordinate
//! of `B¹`. The one-step standard deviation of `x` on interval `j` is
//! `min(κ √(Δ / (t + h - s_j)), (min(x, 1 - x) + δ) / 6)`, so leaving the
//! extended segment `[-δ, 1 + δ]` takes a six-sigma step, and the control is
//! switched off once `x` leaves `[0, 1]`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{envelope::vex_simplex, HamiltonianField, SimplexGrid};
use crate::sde::{estimate_j, mean_and_se, simulate, uniform_grid, FeedbackControl, NoiseGrid};
use crate::simplex::{distance, ControlMatrix, SimplexPoint};

/// Paths used by the absorption calibration run inside [`make_split_control`].
pub const CALIBRATION_PATHS: usize = 1000;
const CALIBRATION_SEED: u64 = 0x5EED_CA11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub p: SimplexPoint,
    pub p1: SimplexPoint,
    pub p2: SimplexPoint,
    pub lambda1: f64,
    /// Splitting horizon `h`.
    pub h: f64,
    /// Number of control intervals on `[t, t + h]`.
    pub steps: usize,
    pub delta: f64,
    pub kappa: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            p: SimplexPoint::new(vec![0.5, 0.5]).unwrap(),
            p1: SimplexPoint::new(vec![0.95, 0.05]).unwrap(),
            p2: SimplexPoint::new(vec![0.05, 0.95]).unwrap(),
            lambda1: 0.5,
            h: 0.05,
            steps: 256,
            delta: 0.02,
            kappa: 8.0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.p.dim();
        if self.p1.dim() != n || self.p2.dim() != n {
            return Err(Error::InvalidSplit("points of different dimensions".into()));
        }
        if n < 2 {
            return Err(Error::InvalidSplit("splitting needs at least two states".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda1) {
            return Err(Error::InvalidSplit(format!("weight λ₁ = {} outside [0, 1]", self.lambda1)));
        }
        if self.p1.coords().iter().chain(self.p2.coords()).any(|&c| c <= 0.0) {
            return Err(Error::InvalidSplit("endpoints must have full support".into()));
        }
        if self.p1 == self.p2 {
            return Err(Error::InvalidSplit("endpoints coincide".into()));
        }
        let gap = (0..n)
            .map(|i| (self.lambda1 * self.p1[i] + (1.0 - self.lambda1) * self.p2[i] - self.p[i]).abs())
            .fold(0.0, f64::max);
        if gap > 1e-10 {
            return Err(Error::InvalidSplit(format!("p differs from λ₁p¹ + (1 - λ₁)p² by {gap:e}")));
        }
        if !(self.h.is_finite() && self.h > 0.0) || self.steps == 0 {
            return Err(Error::InvalidSplit("horizon and step count must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 0.25) {
            return Err(Error::InvalidSplit(format!("margin δ = {} outside (0, 1/4)", self.delta)));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::InvalidSplit(format!("gain κ = {}", self.kappa)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.p.dim()
    }

    /// `p² - p¹`.
    pub fn direction(&self) -> Vec<f64> {
        self.p2.coords().iter().zip(self.p1.coords()).map(|(b, a)| b - a).collect()
    }

    /// The scalar `x` with `X = p¹ + x (p² - p¹)` (least squares off the line).
    pub fn scalar(&self, x: &[f64]) -> f64 {
        let d = self.direction();
        let num: f64 = x.iter().zip(self.p1.coords()).zip(&d).map(|((a, b), c)| (a - b) * c).sum();
        num / d.iter().map(|c| c * c).sum::<f64>()
    }

    /// `λ₁ ∈ {0, 1}`: nothing to split.
    pub fn is_degenerate(&self) -> bool {
        self.lambda1 == 0.0 || self.lambda1 == 1.0
    }

    /// Length of one control interval.
    pub fn dt(&self) -> f64 {
        self.h / self.steps as f64
    }

    /// Noise grid on `[t, horizon]` with step `h / steps`.
    pub fn noise_grid(&self, t: f64, horizon: f64, n_j: usize, seed: u64) -> Result<NoiseGrid> {
        let ratio = (horizon - t) / self.dt();
        let n = ratio.round();
        if n < self.steps as f64 || (ratio - n).abs() > 1e-6 {
            return Err(Error::GridMismatch(format!(
                "[{t}, {horizon}] is not a multiple of the split step {}",
                self.dt()
            )));
        }
        NoiseGrid::new(t, horizon, n as usize, self.dim(), n_j, seed)
    }

    /// One-step standard deviation of `x` on the interval starting at `s`.
    fn step_sd(&self, t: f64, s: f64, x: f64) -> f64 {
        let remaining = (t + self.h - s).max(self.dt());
        let gain = self.kappa * (self.dt() / remaining).sqrt();
        gain.min((x.min(1.0 - x) + self.delta) / 6.0)
    }
}

fn split_control_unchecked(spec: &SplitSpec, t: f64, horizon: f64) -> Result<FeedbackControl> {
    let mut grid = uniform_grid(t, t + spec.h, spec.steps);
    if horizon > t + spec.h + 1e-12 {
        grid.push(horizon);
    }
    let n = spec.dim();
    let spec = spec.clone();
    let d = spec.direction();
    let mut w = vec![0.0; n];
    w[0] = 1.0;
    FeedbackControl::from_fn(grid, n, move |obs| {
        if spec.is_degenerate() || obs.interval >= spec.steps {
            return Ok(ControlMatrix::zeros(n));
        }
        let x = spec.scalar(obs.state);
        if x <= 0.0 || x >= 1.0 {
            return Ok(ControlMatrix::zeros(n));
        }
        let sd = spec.step_sd(t, obs.time, x);
        ControlMatrix::rank_one(&d, &w, sd / spec.dt().sqrt())
    })
}

/// The split control on `[t, t + h]`, zero on `[t + h, horizon]`.
///
/// A calibration run of [`CALIBRATION_PATHS`] paths checks that at least
/// half of the paths end within `δ` of an endpoint.
pub fn make_split_control(spec: &SplitSpec, t: f64, horizon: f64) -> Result<FeedbackControl> {
    spec.validate()?;
    if horizon < t + spec.h - 1e-12 {
        return Err(Error::InvalidSplit(format!("horizon {horizon} ends before t + h = {}", t + spec.h)));
    }
    if !spec.is_degenerate() {
        let control = split_control_unchecked(spec, t, t + spec.h)?;
        let noise = NoiseGrid::new(t, t + spec.h, spec.steps, spec.dim(), 1, CALIBRATION_SEED)?;
        let zero = FeedbackControl::zero(1, t, t + spec.h)?;
        let one = SimplexPoint::uniform(1);
        let bundle = simulate(t, &spec.p, &one, &control, &zero, &noise, CALIBRATION_PATHS, spec.steps)?;
        let open = (0..bundle.n_paths())
            .filter(|&i| {
                let x = spec.scalar(bundle.terminal_x(i));
                x >= spec.delta && x <= 1.0 - spec.delta
            })
            .count();
        let fraction = open as f64 / bundle.n_paths() as f64;
        if fraction > 0.5 {
            return Err(Error::SplitCalibration(format!(
                "{:.1}% of calibration paths unabsorbed at t + h with κ = {}, n = {}; raise κ or n",
                100.0 * fraction,
                spec.kappa,
                spec.steps
            )));
        }
    }
    split_control_unchecked(spec, t, horizon)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<HistogramBin> {
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin { lo: lo + b as f64 * width, hi: lo + (b + 1) as f64 * width, count: 0 })
        .collect();
    for &v in values {
        let b = ((v - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            out[b as usize].count += 1;
        }
    }
    out
}

pub fn write_histogram_csv(bins: &[HistogramBin], mut w: impl Write) -> Result<()> {
    writeln!(w, "lo,hi,count")?;
    for b in bins {
        writeln!(w, "{},{},{}", b.lo, b.hi, b.count)?;
    }
    Ok(())
}

/// Monte Carlo summary of the split control at `t + h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub n_paths: usize,
    pub steps: usize,
    pub lambda1: f64,
    /// `ε(n)`: empirical `E|X_{t+h} - Z_near|`.
    pub epsilon: f64,
    pub epsilon_se: f64,
    /// Frequency with which `p¹` is the nearer endpoint.
    pub hit_frequency: f64,
    pub hit_se: f64,
    /// `max_i |mean(X_{t+h})_i - p_i| / SE_i`.
    pub martingale_z: f64,
    /// Paths ending more than `δ` away from both endpoints.
    pub unabsorbed_fraction: f64,
    /// Paths leaving the extended segment `[-δ, 1 + δ]` in the scalar.
    pub segment_violations: usize,
    /// Largest distance of a recorded state from the line through `p¹, p²`.
    pub max_off_line: f64,
    pub histogram: Vec<HistogramBin>,
}

impl SplitReport {
    pub fn hit_within(&self, k: f64) -> bool {
        (self.hit_frequency - self.lambda1).abs() <= k * self.hit_se
    }
}

/// Runs the split control alone on `[t, t + h]`.
pub fn evaluate_split(spec: &SplitSpec, t: f64, n_paths: usize, seed: u64) -> Result<SplitReport> {
    let control = make_split_control(spec, t, t + spec.h)?;
    evaluate_control(spec, &control, t, n_paths, seed)
}

fn evaluate_control(
    spec: &SplitSpec,
    control: &FeedbackControl,
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<SplitReport> {
    let noise = NoiseGrid::new(t, t + spec.h, spec.steps, spec.dim(), 1, seed)?;
    let zero = FeedbackControl::zero(1, t, t + spec.h)?;
    let bundle = simulate(t, &spec.p, &SimplexPoint::uniform(1), control, &zero, &noise, n_paths, 1)?;
    let d = spec.direction();
    let n = spec.dim();
    let mut errors = Vec::with_capacity(n_paths);
    let mut hits = Vec::with_capacity(n_paths);
    let mut positions = Vec::with_capacity(n_paths);
    let mut open = 0;
    let mut segment_violations = 0;
    let mut max_off_line: f64 = 0.0;
    for i in 0..bundle.n_paths() {
        let mut outside = false;
        for r in 0..bundle.n_records() {
            let x = bundle.x_at(i, r);
            let s = spec.scalar(x);
            outside |= s < -spec.delta - 1e-12 || s > 1.0 + spec.delta + 1e-12;
            let off = (0..n).map(|k| (x[k] - spec.p1[k] - s * d[k]).abs()).fold(0.0, f64::max);
            max_off_line = max_off_line.max(off);
        }
        segment_violations += usize::from(outside);
        let end = bundle.terminal_x(i);
        let s = spec.scalar(end);
        let (e1, e2) = (distance(end, spec.p1.coords()), distance(end, spec.p2.coords()));
        errors.push(e1.min(e2));
        hits.push(if e1 <= e2 { 1.0 } else { 0.0 });
        positions.push(s);
        open += usize::from(s >= spec.delta && s <= 1.0 - spec.delta);
    }
    let (epsilon, epsilon_se) = mean_and_se(&errors);
    let (hit_frequency, hit_se) = mean_and_se(&hits);
    let mut martingale_z: f64 = 0.0;
    for k in 0..n {
        let xs: Vec<f64> = (0..bundle.n_paths()).map(|i| bundle.terminal_x(i)[k]).collect();
        let (m, se) = mean_and_se(&xs);
        if se > 0.0 {
            martingale_z = martingale_z.max((m - spec.p[k]).abs() / se);
        } else if m != spec.p[k] {
            martingale_z = f64::INFINITY;
        }
    }
    let pad = 2.0 * spec.delta;
    Ok(SplitReport {
        n_paths,
        steps: spec.steps,
        lambda1: spec.lambda1,
        epsilon,
        epsilon_se,
        hit_frequency,
        hit_se,
        unabsorbed_fraction: open as f64 / n_paths as f64,
        martingale_z,
        segment_violations,
        max_off_line,
        histogram: histogram(&positions, -pad, 1.0 + pad, 50),
    })
}

/// `ε(n)` for each step count in `steps`. Step counts too small to pass
/// the absorption calibration are still evaluated.
pub fn epsilon_curve(
    spec: &SplitSpec,
    t: f64,
    steps: &[usize],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    steps
        .iter()
        .map(|&n| {
            let s = SplitSpec { steps: n, ..spec.clone() };
            s.validate()?;
            let control = split_control_unchecked(&s, t, t + s.h)?;
            Ok((n, evaluate_control(&s, &control, t, n_paths, seed)?.epsilon))
        })
        .collect()
}

/// `Vex(H(t, ·, q))` at `p` for a single-state second player, computed on a
/// barycentric grid and interpolated.
pub fn vex_of_h(h: &HamiltonianField, t: f64, p: &SimplexPoint) -> Result<f64> {
    let res = match p.dim() {
        1 | 2 => 400,
        3 => 60,
        4 => 20,
        _ => 8,
    };
    let grid = SimplexGrid::new(p.dim(), res)?;
    let q = [1.0];
    let values = (0..grid.len()).map(|i| h.value(t, &grid.point(i), &q)).collect::<Result<Vec<_>>>()?;
    let vex = vex_simplex(&grid, &values)?;
    Ok(grid.interpolation_weights(p.coords()).iter().map(|&(i, w)| w * vex[i]).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPayoffReport {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    /// `(T - t) Vex(H)(p)`.
    pub target: f64,
    /// `(T - t) H(p)`: the payoff of never moving.
    pub stay: f64,
}

/// `E ∫_t^T H(X_s) ds` under the split control followed by zero control,
/// for a game where the second player has a single state.
pub fn split_payoff_demo(
    h: &HamiltonianField,
    spec: &SplitSpec,
    t: f64,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<SplitPayoffReport> {
    if h.n_j() != 1 {
        return Err(Error::Precondition("the split payoff demo needs |J| = 1".into()));
    }
    if h.n_i() != spec.dim() {
        return Err(Error::DimensionMismatch("Hamiltonian and split dimensions differ".into()));
    }
    let noise = spec.noise_grid(t, horizon, 1, seed)?;
    let u = make_split_control(spec, t, horizon)?;
    let v = FeedbackControl::zero(1, t, horizon)?;
    let one = SimplexPoint::uniform(1);
    let e = estimate_j(t, &spec.p, &one, &u, &v, h, &noise, n_paths)?;
    Ok(SplitPayoffReport {
        estimate: e.mean,
        std_error: e.std_error,
        n_paths,
        target: (horizon - t) * vex_of_h(h, t, &spec.p)?,
        stay: (horizon - t) * h.value(t, spec.p.coords(), &[1.0])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::Analytic;

    fn pt(c: &[f64]) -> SimplexPoint {
        SimplexPoint::new(c.to_vec()).unwrap()
    }

    fn asymmetric() -> SplitSpec {
        SplitSpec {
            p: pt(&[0.34, 0.66]),
            p1: pt(&[0.9, 0.1]),
            p2: pt(&[0.1, 0.9]),
            lambda1: 0.3,
            ..SplitSpec::default()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SplitSpec::default().validate().is_ok());
        let bad = [
            SplitSpec { p: pt(&[0.6, 0.4]), ..SplitSpec::default() },
            SplitSpec { p1: pt(&[1.0, 0.0]), p2: pt(&[0.0, 1.0]), ..SplitSpec::default() },
            SplitSpec { p1: pt(&[0.5, 0.5]), p2: pt(&[0.5, 0.5]), ..SplitSpec::default() },
            SplitSpec { delta: 0.25, ..SplitSpec::default() },
            SplitSpec { kappa: 0.0, ..SplitSpec::default() },
            SplitSpec { steps: 0, ..SplitSpec::default() },
            SplitSpec { lambda1: 1.5, ..SplitSpec::default() },
        ];
        for s in bad {
            assert!(matches!(s.validate(), Err(Error::InvalidSplit(_))), "{s:?}");
        }
    }

    #[test]
    fn scalar_coordinate_of_the_midpoint() {
        let s = SplitSpec::default();
        assert!((s.scalar(s.p.coords()) - 0.5).abs() < 1e-15);
        assert!(s.scalar(s.p1.coords()).abs() < 1e-15);
        assert!((s.scalar(s.p2.coords()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_split_does_not_move() {
        let s = SplitSpec { p: pt(&[0.95, 0.05]), lambda1: 1.0, ..SplitSpec::default() };
        let r = evaluate_split(&s, 0.0, 200, 1).unwrap();
        assert_eq!(r.hit_frequency, 1.0);
        assert!((r.epsilon).abs() < 1e-15);
        assert_eq!(r.martingale_z, 0.0);
    }

    #[test]
    fn symmetric_split_hits_both_endpoints_evenly() {
        let r = evaluate_split(&SplitSpec::default(), 0.0, 10_000, 17).unwrap();
        assert!(r.hit_within(3.0), "{r:?}");
        assert!(r.epsilon <= 0.05, "{r:?}");
        assert!(r.martingale_z <= 3.0, "{r:?}");
        assert_eq!(r.segment_violations, 0);
        assert!(r.max_off_line <= 1e-12);
    }

    #[test]
    fn asymmetric_split_matches_its_weight() {
        let r = evaluate_split(&asymmetric(), 0.0, 10_000, 23).unwrap();
        assert!(r.hit_within(3.0), "{r:?}");
        assert!(r.epsilon <= 0.05, "{r:?}");
        assert!(r.martingale_z <= 3.0, "{r:?}");
        assert_eq!(r.segment_violations, 0);
    }

    #[test]
    fn split_starting_late_uses_the_remaining_time() {
        let r = evaluate_split(&SplitSpec::default(), 0.6, 4000, 5).unwrap();
        assert!(r.epsilon <= 0.05 && r.hit_within(3.0), "{r:?}");
    }

    #[test]
    fn epsilon_decreases_with_steps() {
        let curve = epsilon_curve(&SplitSpec::default(), 0.0, &[64, 128, 256, 512], 10_000, 3).unwrap();
        for w in curve.windows(2) {
            assert!(w[1].1 <= w[0].1, "{curve:?}");
        }
        assert!(curve[2].1 <= 0.05);
    }

    #[test]
    fn weak_gain_fails_calibration() {
        let s = SplitSpec { kappa: 0.05, ..SplitSpec::default() };
        assert!(matches!(make_split_control(&s, 0.0, 1.0), Err(Error::SplitCalibration(_))));
    }

    #[test]
    fn histogram_counts_everything_in_range() {
        let h = histogram(&[0.0, 0.1, 0.55, 0.99, 2.0], 0.0, 1.0, 10);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(h[5].count, 1);
        let mut out = Vec::new();
        write_histogram_csv(&h, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 11);
    }

    #[test]
    fn constant_payoff_is_exact() {
        let h = HamiltonianField::analytic(Analytic::Constant { c: 0.4 }, 2, 1).unwrap();
        let r = split_payoff_demo(&h, &SplitSpec::default(), 0.0, 1.0, 500, 2).unwrap();
        assert!((r.estimate - 0.4).abs() < 1e-12);
        assert_eq!(r.std_error, 0.0);
        assert!((r.target - 0.4).abs() < 1e-12);
    }

    #[test]
    fn splitting_cannot_beat_a_convex_payoff() {
        let h = HamiltonianField::analytic(Analytic::Convex { center: None }, 2, 1).unwrap();
        let s = SplitSpec::default();
        let r = split_payoff_demo(&h, &s, 0.0, 1.0, 2000, 4).unwrap();
        assert!((r.target - r.stay).abs() < 1e-9);
        assert!(r.estimate >= r.stay - h.constant() * s.h - 3.0 * r.std_error, "{r:?}");
    }

    #[test]
    fn splitting_reaches_the_envelope_of_the_tent() {
        let h = HamiltonianField::analytic(Analytic::Tent { center: None }, 2, 1).unwrap();
        let r = split_payoff_demo(&h, &SplitSpec::default(), 0.0, 1.0, 10_000, 6).unwrap();
        assert!(r.target.abs() < 1e-9);
        assert!((r.stay - 0.5).abs() < 1e-12);
        assert!(r.estimate <= 0.08, "{r:?}");
    }

    #[test]
    fn vex_of_the_tent_vanishes() {
        let h = HamiltonianField::analytic(Analytic::Tent { center: None }, 2, 1).unwrap();
        for c in [0.1, 0.37, 0.5, 0.8] {
            assert!(vex_of_h(&h, 0.0, &pt(&[c, 1.0 - c])).unwrap().abs() < 1e-12);
        }
    }
}
