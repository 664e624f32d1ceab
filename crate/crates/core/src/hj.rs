//! Backward value iteration for the Hamilton-Jacobi equation with convexity
//! constraints
//!
//! ```text
//! min{ max{ -∂V/∂t - H, -λ_min(p, D²_p V) }, -λ_max(q, D²_q V) } = 0,  V(T) = 0,
//! ```
//!
//! by the splitting-game recursion `V[k] = Vex_p(Cav_q(V[k+1] + Δt H(t_k)))`
//! (or with the envelopes swapped), plus residual and regularity diagnostics.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{cav_q, vex_p, GridFunction, HamiltonianField, ProductGrid, SimplexGrid};
use crate::sde::lipschitz_constant;
use crate::simplex::{rel_eigen_max, rel_eigen_min, SimplexPoint};

/// Largest admissible time step.
pub const MAX_DT: f64 = 1.0 / 16.0;
/// Smallest admissible grid resolution (11 nodes per line).
pub const MIN_RESOLUTION: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeOrder {
    /// `V[k] = Vex_p(Cav_q(·))`.
    VexCav,
    /// `V[k] = Cav_q(Vex_p(·))`.
    CavVex,
}

impl SchemeOrder {
    pub fn other(self) -> Self {
        match self {
            SchemeOrder::VexCav => SchemeOrder::CavVex,
            SchemeOrder::CavVex => SchemeOrder::VexCav,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HjParams {
    pub horizon: f64,
    pub time_steps: usize,
    /// Barycentric resolution `m_I` of the `p` grid.
    pub res_p: usize,
    pub res_q: usize,
    pub order: SchemeOrder,
}

impl HjParams {
    pub fn dt(&self) -> f64 {
        self.horizon / self.time_steps as f64
    }

    pub fn validate(&self, h: &HamiltonianField) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) || self.time_steps == 0 {
            return Err(Error::Precondition("horizon and time steps must be positive".into()));
        }
        if self.dt() > MAX_DT + 1e-15 {
            return Err(Error::Precondition(format!("time step {} exceeds 1/16", self.dt())));
        }
        for (dim, res) in [(h.n_i(), self.res_p), (h.n_j(), self.res_q)] {
            if dim > 1 && res < MIN_RESOLUTION {
                return Err(Error::Precondition(format!("resolution {res} below {MIN_RESOLUTION}")));
            }
        }
        Ok(())
    }
}

/// Values `V[k][node]` on `t_k = k Δt`, flat node index `ip * |q grid| + iq`.
#[derive(Clone, Debug)]
pub struct ValueGrid {
    pub params: HjParams,
    pub grid: ProductGrid,
    pub times: Vec<f64>,
    pub layers: Vec<Vec<f64>>,
    /// `sup |H|`.
    pub h_bound: f64,
    /// Bound-and-Lipschitz constant `C` of `H`.
    pub h_constant: f64,
}

fn node_values(h: &HamiltonianField, grid: &ProductGrid, t: f64) -> Result<Vec<f64>> {
    let nq = grid.q.len();
    (0..grid.len()).into_par_iter().map(|idx| h.value(t, &grid.p.point(idx / nq), &grid.q.point(idx % nq))).collect()
}

/// Runs the backward recursion.
pub fn solve(h: &HamiltonianField, params: &HjParams) -> Result<ValueGrid> {
    params.validate(h)?;
    let grid = ProductGrid::new(SimplexGrid::new(h.n_i(), params.res_p)?, SimplexGrid::new(h.n_j(), params.res_q)?);
    let n = params.time_steps;
    let dt = params.dt();
    let times: Vec<f64> = (0..=n).map(|k| if k == n { params.horizon } else { k as f64 * dt }).collect();
    let fixed = if h.is_time_independent() { Some(node_values(h, &grid, 0.0)?) } else { None };
    let mut layers = vec![Vec::new(); n + 1];
    layers[n] = vec![0.0; grid.len()];
    for k in (0..n).rev() {
        let hk = match &fixed {
            Some(v) => std::borrow::Cow::Borrowed(v),
            None => std::borrow::Cow::Owned(node_values(h, &grid, times[k])?),
        };
        let w: Vec<f64> = layers[k + 1].iter().zip(hk.iter()).map(|(v, x)| v + dt * x).collect();
        let f = GridFunction::new(grid.clone(), w)?;
        let out = match params.order {
            SchemeOrder::VexCav => vex_p(&cav_q(&f)?)?,
            SchemeOrder::CavVex => cav_q(&vex_p(&f)?)?,
        };
        layers[k] = out.values;
    }
    Ok(ValueGrid { params: params.clone(), grid, times, layers, h_bound: h.bound(), h_constant: h.constant() })
}

/// Largest pointwise difference between two solutions on the same grid.
pub fn max_gap(a: &ValueGrid, b: &ValueGrid) -> Result<f64> {
    if a.layers.len() != b.layers.len() || a.grid.len() != b.grid.len() {
        return Err(Error::GridMismatch("value grids differ in shape".into()));
    }
    Ok(a.layers
        .iter()
        .zip(&b.layers)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max))
}

/// Solves in both envelope orders and returns `(primary, other, gap)`.
pub fn solve_both(h: &HamiltonianField, params: &HjParams) -> Result<(ValueGrid, ValueGrid, f64)> {
    let a = solve(h, params)?;
    let b = solve(h, &HjParams { order: params.order.other(), ..params.clone() })?;
    let gap = max_gap(&a, &b)?;
    Ok((a, b, gap))
}

impl ValueGrid {
    pub fn dt(&self) -> f64 {
        self.params.dt()
    }

    pub fn n_steps(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn node(&self, ip: usize, iq: usize) -> usize {
        self.grid.index(ip, iq)
    }

    pub fn get(&self, k: usize, ip: usize, iq: usize) -> f64 {
        self.layers[k][self.node(ip, iq)]
    }

    /// Barycentric-linear in space, linear in time.
    pub fn value_at(&self, t: f64, p: &[f64], q: &[f64]) -> Result<f64> {
        if p.len() != self.grid.p.dim() || q.len() != self.grid.q.dim() {
            return Err(Error::DimensionMismatch("query point dimensions".into()));
        }
        if !(0.0..=self.params.horizon).contains(&t) {
            return Err(Error::Precondition(format!("time {t} outside [0, {}]", self.params.horizon)));
        }
        let x = t / self.dt();
        let k = (x.floor() as usize).min(self.n_steps() - 1);
        let w = x - k as f64;
        let a = self.grid.interpolate(&self.layers[k], p, q);
        let b = self.grid.interpolate(&self.layers[k + 1], p, q);
        Ok((1.0 - w) * a + w * b)
    }

    pub fn extrema(&self) -> (f64, f64) {
        self.layers.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// CSV with columns `t,p_1..,q_1..,V`, every `time_stride`-th layer plus
    /// the first and last.
    pub fn write_csv(&self, mut w: impl Write, time_stride: usize) -> Result<()> {
        let (ni, nj) = (self.grid.p.dim(), self.grid.q.dim());
        let mut header = vec!["t".to_string()];
        header.extend((1..=ni).map(|i| format!("p_{i}")));
        header.extend((1..=nj).map(|j| format!("q_{j}")));
        header.push("V".into());
        writeln!(w, "{}", header.join(","))?;
        let stride = time_stride.max(1);
        let n = self.n_steps();
        for k in (0..=n).filter(|k| k % stride == 0 || *k == n) {
            for ip in 0..self.grid.p.len() {
                let p = self.grid.p.point(ip);
                for iq in 0..self.grid.q.len() {
                    let mut row = vec![self.times[k].to_string()];
                    row.extend(p.iter().map(|c| c.to_string()));
                    row.extend(self.grid.q.point(iq).iter().map(|c| c.to_string()));
                    row.push(self.get(k, ip, iq).to_string());
                    writeln!(w, "{}", row.join(","))?;
                }
            }
        }
        Ok(())
    }
}

/// Which term of the equation carries the residual at a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    TimeH,
    LambdaMin,
    LambdaMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeResidual {
    /// `-∂V/∂t - H` (forward difference in time).
    pub time_term: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `min{max{time_term, -λ_min}, -λ_max}`.
    pub value: f64,
    pub branch: Branch,
}

/// Tangent quadratic form of second differences along the edge directions
/// `e_a - e_b`, assembled with zero diagonal so that
/// `(e_a - e_b)ᵀ A (e_a - e_b)` equals the scaled second difference.
fn second_difference_matrix(grid: &SimplexGrid, idx: usize, value: impl Fn(usize) -> f64) -> Option<DMatrix<f64>> {
    let n = grid.dim();
    let h2 = grid.step() * grid.step();
    let mut a = DMatrix::zeros(n, n);
    let centre = value(idx);
    for i in 0..n {
        for j in i + 1..n {
            let (plus, minus) = grid.neighbours(idx, i, j)?;
            let d = (value(plus) + value(minus) - 2.0 * centre) / h2;
            a[(i, j)] = -0.5 * d;
            a[(j, i)] = -0.5 * d;
        }
    }
    Some(a)
}

fn classify(time_term: f64, lambda_min: f64, lambda_max: f64) -> (f64, Branch) {
    let inner = time_term.max(-lambda_min);
    let value = inner.min(-lambda_max);
    let branch = if -lambda_max < inner {
        Branch::LambdaMax
    } else if time_term >= -lambda_min {
        Branch::TimeH
    } else {
        Branch::LambdaMin
    };
    (value, branch)
}

/// Residual of the equation at node `(k, ip, iq)` with `k < N` and both
/// coordinates interior; `None` at boundary nodes.
pub fn node_residual(
    v: &ValueGrid,
    h: &HamiltonianField,
    k: usize,
    ip: usize,
    iq: usize,
) -> Result<Option<NodeResidual>> {
    if k >= v.n_steps() || !v.grid.p.is_interior(ip) || !v.grid.q.is_interior(iq) {
        return Ok(None);
    }
    let nq = v.grid.q.len();
    let layer = &v.layers[k];
    let p = v.grid.p.point(ip);
    let q = v.grid.q.point(iq);
    let time_term = (layer[ip * nq + iq] - v.layers[k + 1][ip * nq + iq]) / v.dt() - h.value(v.times[k], &p, &q)?;
    let Some(dp) = second_difference_matrix(&v.grid.p, ip, |i| layer[i * nq + iq]) else {
        return Ok(None);
    };
    let Some(dq) = second_difference_matrix(&v.grid.q, iq, |j| layer[ip * nq + j]) else {
        return Ok(None);
    };
    let lambda_min = rel_eigen_min(&SimplexPoint::new(p)?, &dp)?.value;
    let lambda_max = rel_eigen_max(&SimplexPoint::new(q)?, &dq)?.value;
    let (value, branch) = classify(time_term, lambda_min, lambda_max);
    Ok(Some(NodeResidual { time_term, lambda_min, lambda_max, value, branch }))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub time_h: usize,
    pub lambda_min: usize,
    pub lambda_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Largest `|residual|` over interior nodes of all layers `k < N`.
    pub max_residual: f64,
    /// `(k, ip, iq)` of the largest residual.
    pub argmax: Option<(usize, usize, usize)>,
    pub counts: BranchCounts,
    /// Binding branch at every node of layer 0 (`None` off the interior).
    pub layer0: Vec<Option<Branch>>,
}

pub fn residuals(v: &ValueGrid, h: &HamiltonianField) -> Result<ResidualReport> {
    let nodes = v.grid.len();
    let nq = v.grid.q.len();
    let per_layer: Vec<Vec<Option<NodeResidual>>> = (0..v.n_steps())
        .into_par_iter()
        .map(|k| (0..nodes).map(|idx| node_residual(v, h, k, idx / nq, idx % nq)).collect())
        .collect::<Result<_>>()?;
    let mut report =
        ResidualReport { max_residual: 0.0, argmax: None, counts: BranchCounts::default(), layer0: Vec::new() };
    for (k, layer) in per_layer.iter().enumerate() {
        for (idx, r) in layer.iter().enumerate() {
            let Some(r) = r else { continue };
            match r.branch {
                Branch::TimeH => report.counts.time_h += 1,
                Branch::LambdaMin => report.counts.lambda_min += 1,
                Branch::LambdaMax => report.counts.lambda_max += 1,
            }
            if report.argmax.is_none() || r.value.abs() > report.max_residual {
                report.max_residual = r.value.abs();
                report.argmax = Some((k, idx / nq, idx % nq));
            }
        }
    }
    report.layer0 =
        per_layer.first().map_or_else(Vec::new, |l| l.iter().map(|r| r.as_ref().map(|r| r.branch)).collect());
    Ok(report)
}

const FLAT_TOLERANCE: f64 = 1e-9;

/// `-∂_t φ - H - inf_u ½ Tr(σσᵀ D²φ)` for the test function `φ` equal to the
/// (locally constant) value of `V[k]` around an interior `p` node, in a game
/// where the second player has a single state. The infimum runs over
/// volatilities along the grid's edge directions.
pub fn naive_hji_residual(v: &ValueGrid, h: &HamiltonianField, k: usize, ip: usize) -> Result<f64> {
    if v.grid.q.dim() != 1 {
        return Err(Error::Precondition("the naive residual needs |J| = 1".into()));
    }
    if k > v.n_steps() || !v.grid.p.is_interior(ip) {
        return Err(Error::Precondition("node must be an interior node".into()));
    }
    let layer = &v.layers[k];
    let g = &v.grid.p;
    let centre = layer[ip];
    let n = g.dim();
    let mut curvature = f64::INFINITY;
    for a in 0..n {
        for b in a + 1..n {
            let (plus, minus) =
                g.neighbours(ip, a, b).ok_or_else(|| Error::Precondition("node lacks grid neighbours".into()))?;
            if (layer[plus] - centre).abs() > FLAT_TOLERANCE || (layer[minus] - centre).abs() > FLAT_TOLERANCE {
                return Err(Error::Precondition(format!("V[{k}] is not flat around node {ip}")));
            }
            curvature = curvature.min((layer[plus] + layer[minus] - 2.0 * centre) / (g.step() * g.step()));
        }
    }
    // φ ≡ V(t_k, p) is constant, so ∂_t φ = 0 and the half-trace term is the
    // (vanishing) flat curvature; a negative one would make the infimum -∞.
    let half_trace = if curvature < 0.0 { f64::NEG_INFINITY } else { 0.0 };
    Ok(-h.value(v.times[k.min(v.n_steps())], &g.point(ip), &[1.0])? - half_trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    /// `max_k |V[k+1] - V[k]|∞`.
    pub time_increment: f64,
    /// `8 C Δt + slack`.
    pub time_bound: f64,
    pub time_ok: bool,
    /// Smallest second difference along `p` lines (unscaled).
    pub min_p_second_difference: f64,
    pub convex_ok: bool,
    /// Largest second difference along `q` lines (unscaled).
    pub max_q_second_difference: f64,
    pub concave_ok: bool,
    /// Largest difference quotient along `p` and `q` grid edges.
    pub lipschitz_p: f64,
    pub lipschitz_q: f64,
    pub lipschitz_bound_p: f64,
    pub lipschitz_bound_q: f64,
    pub lipschitz_ok: bool,
}

impl RegularityReport {
    pub fn all_ok(&self) -> bool {
        self.time_ok && self.convex_ok && self.concave_ok && self.lipschitz_ok
    }
}

pub const TIME_SLACK: f64 = 1e-3;
pub const CONVEXITY_TOLERANCE: f64 = 1e-8;
const LIPSCHITZ_SLACK: f64 = 1e-6;

/// Extreme second differences and difference quotients along the lines of
/// `grid` for every slice produced by `slice`.
fn line_stats(grid: &SimplexGrid, slices: usize, slice: impl Fn(usize, usize) -> f64 + Sync) -> (f64, f64, f64) {
    let edge = grid.step() * std::f64::consts::SQRT_2;
    (0..slices)
        .into_par_iter()
        .map(|s| {
            let (mut lo, mut hi, mut lip) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
            for fam in grid.line_families() {
                for line in &fam.lines {
                    for w in line.windows(3) {
                        let d = slice(s, w[0]) + slice(s, w[2]) - 2.0 * slice(s, w[1]);
                        lo = lo.min(d);
                        hi = hi.max(d);
                    }
                    for w in line.windows(2) {
                        lip = lip.max((slice(s, w[1]) - slice(s, w[0])).abs() / edge);
                    }
                }
            }
            (lo, hi, lip)
        })
        .reduce(|| (f64::INFINITY, f64::NEG_INFINITY, 0.0), |a, b| (a.0.min(b.0), a.1.max(b.1), a.2.max(b.2)))
}

pub fn regularity_report(v: &ValueGrid) -> RegularityReport {
    let c = v.h_constant;
    let horizon = v.params.horizon;
    let time_increment =
        v.layers.windows(2).flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max);
    let time_bound = 8.0 * c * v.dt() + TIME_SLACK;
    let nq = v.grid.q.len();
    let np = v.grid.p.len();
    let layers = v.layers.len();
    let (p_lo, _, lip_p) = line_stats(&v.grid.p, layers * nq, |s, ip| v.layers[s / nq][ip * nq + s % nq]);
    let (_, q_hi, lip_q) = line_stats(&v.grid.q, layers * np, |s, iq| v.layers[s / np][(s % np) * nq + iq]);
    let min_p = if p_lo.is_finite() { p_lo } else { 0.0 };
    let max_q = if q_hi.is_finite() { q_hi } else { 0.0 };
    let bound_p = c * lipschitz_constant(v.grid.p.dim()) * horizon + LIPSCHITZ_SLACK;
    let bound_q = c * lipschitz_constant(v.grid.q.dim()) * horizon + LIPSCHITZ_SLACK;
    RegularityReport {
        time_increment,
        time_bound,
        time_ok: time_increment <= time_bound,
        min_p_second_difference: min_p,
        convex_ok: min_p >= -CONVEXITY_TOLERANCE,
        max_q_second_difference: max_q,
        concave_ok: max_q <= CONVEXITY_TOLERANCE,
        lipschitz_p: lip_p,
        lipschitz_q: lip_q,
        lipschitz_bound_p: bound_p,
        lipschitz_bound_q: bound_q,
        lipschitz_ok: lip_p <= bound_p && lip_q <= bound_q,
    }
}

/// `(T - t_k) Vex_p(H)` on the solver's grid, the closed form for a time
/// independent `H` when the second player has a single state.
pub fn one_sided_closed_form(v: &ValueGrid, h: &HamiltonianField) -> Result<Vec<Vec<f64>>> {
    if v.grid.q.dim() != 1 {
        return Err(Error::Precondition("closed form needs |J| = 1".into()));
    }
    let hv = node_values(h, &v.grid, 0.0)?;
    let vex = vex_p(&GridFunction::new(v.grid.clone(), hv)?)?.values;
    Ok(v.times.iter().map(|t| vex.iter().map(|x| (v.params.horizon - t) * x).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::Analytic;
    use proptest::prelude::*;

    fn params(res_p: usize, res_q: usize, steps: usize) -> HjParams {
        HjParams { horizon: 1.0, time_steps: steps, res_p, res_q, order: SchemeOrder::VexCav }
    }

    fn field(a: Analytic, ni: usize, nj: usize) -> HamiltonianField {
        HamiltonianField::analytic(a, ni, nj).unwrap()
    }

    #[test]
    fn preconditions() {
        let h = field(Analytic::Zero, 2, 2);
        assert!(solve(&h, &params(20, 20, 8)).is_err());
        assert!(solve(&h, &params(9, 20, 16)).is_err());
        assert!(solve(&h, &params(10, 10, 16)).is_ok());
    }

    #[test]
    fn zero_hamiltonian_gives_zero() {
        let h = field(Analytic::Zero, 2, 2);
        let v = solve(&h, &params(20, 20, 16)).unwrap();
        assert!(v.layers.iter().flatten().all(|&x| x == 0.0));
        let r = residuals(&v, &h).unwrap();
        assert_eq!(r.max_residual, 0.0);
        assert_eq!(r.counts.lambda_min + r.counts.lambda_max, 0);
        assert!(r.counts.time_h > 0);
        let reg = regularity_report(&v);
        assert!(reg.all_ok());
        assert_eq!(reg.time_increment, 0.0);
    }

    #[test]
    fn tent_value_vanishes() {
        let h = field(Analytic::Tent { center: None }, 2, 1);
        let v = solve(&h, &params(200, 1, 128)).unwrap();
        let mid = v.grid.p.nearest(&[0.5, 0.5]);
        assert!(v.get(0, mid, 0).abs() <= 1e-2);
        let reg = regularity_report(&v);
        assert!(reg.convex_ok && reg.time_ok, "{reg:?}");
        let r = node_residual(&v, &h, 0, mid, 0).unwrap().unwrap();
        assert_eq!(r.branch, Branch::LambdaMin);
        assert!(r.value.abs() <= 5.0 * (v.dt() + v.grid.p.step()));
        let naive = naive_hji_residual(&v, &h, 0, mid).unwrap();
        assert!((naive + 0.5).abs() <= 1e-3);
    }

    #[test]
    fn convex_hamiltonian_is_its_own_envelope() {
        let h = field(Analytic::Convex { center: None }, 2, 1);
        let v = solve(&h, &params(100, 1, 64)).unwrap();
        let closed: Vec<Vec<f64>> = v
            .times
            .iter()
            .map(|t| {
                (0..v.grid.p.len()).map(|i| (1.0 - t) * h.value(0.0, &v.grid.p.point(i), &[1.0]).unwrap()).collect()
            })
            .collect();
        let gap =
            v.layers.iter().flatten().zip(closed.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 2e-2, "{gap}");
        let r = residuals(&v, &h).unwrap();
        assert_eq!(r.counts.lambda_min + r.counts.lambda_max, 0);
        assert!(r.max_residual <= 5.0 * (v.dt() + v.grid.p.step()), "{}", r.max_residual);
    }

    #[test]
    fn one_sided_solutions_match_the_closed_form() {
        for a in [Analytic::Concave, Analytic::DoubleWell, Analytic::Tent { center: None }] {
            let h = field(a, 2, 1);
            let v = solve(&h, &params(100, 1, 32)).unwrap();
            let closed = one_sided_closed_form(&v, &h).unwrap();
            let gap =
                v.layers.iter().flatten().zip(closed.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(gap <= 1e-9, "{gap}");
        }
        let h = field(Analytic::Concave, 3, 1);
        let v = solve(&h, &params(20, 1, 16)).unwrap();
        let closed = one_sided_closed_form(&v, &h).unwrap();
        let gap =
            v.layers.iter().flatten().zip(closed.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-8, "{gap}");
    }

    #[test]
    fn naive_residual_of_constant_payoff() {
        let h = field(Analytic::Constant { c: 0.3 }, 2, 1);
        let v = solve(&h, &params(20, 1, 16)).unwrap();
        assert!((naive_hji_residual(&v, &h, 0, 10).unwrap() + 0.3).abs() < 1e-15);
        let z = field(Analytic::Zero, 2, 1);
        let v0 = solve(&z, &params(20, 1, 16)).unwrap();
        assert_eq!(naive_hji_residual(&v0, &z, 0, 10).unwrap(), 0.0);
        let c = field(Analytic::Convex { center: None }, 2, 1);
        let vc = solve(&c, &params(20, 1, 16)).unwrap();
        assert!(naive_hji_residual(&vc, &c, 0, 10).is_err());
        assert!(naive_hji_residual(&v, &h, 0, 0).is_err());
    }

    #[test]
    fn bilinear_value_is_convex_concave_envelope() {
        let h = field(Analytic::Bilinear, 2, 2);
        let v = solve(&h, &params(20, 20, 16)).unwrap();
        let reg = regularity_report(&v);
        assert!(reg.all_ok(), "{reg:?}");
        // one step of the recursion on a bilinear function leaves it bilinear
        for k in 0..=16 {
            for ip in 0..v.grid.p.len() {
                for iq in 0..v.grid.q.len() {
                    let oracle = (1.0 - v.times[k]) * v.grid.p.point(ip)[0] * v.grid.q.point(iq)[0];
                    assert!((v.get(k, ip, iq) - oracle).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn value_interpolates_nodes_and_time() {
        let h = field(Analytic::Bilinear, 2, 2);
        let v = solve(&h, &params(10, 10, 16)).unwrap();
        let p = [0.3, 0.7];
        let q = [0.6, 0.4];
        assert!((v.value_at(0.0, &p, &q).unwrap() - 0.18).abs() < 1e-12);
        assert!((v.value_at(0.5, &p, &q).unwrap() - 0.09).abs() < 1e-12);
        let mid = v.value_at(1.0 / 32.0, &[0.35, 0.65], &q).unwrap();
        assert!((mid - (1.0 - 1.0 / 32.0) * 0.35 * 0.6).abs() < 1e-12);
        assert!(v.value_at(1.5, &p, &q).is_err());
    }

    #[test]
    fn csv_export_has_one_row_per_node_and_layer() {
        let h = field(Analytic::Bilinear, 2, 2);
        let v = solve(&h, &params(10, 10, 16)).unwrap();
        let mut out = Vec::new();
        v.write_csv(&mut out, 8).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,p_1,p_2,q_1,q_2,V");
        assert_eq!(text.lines().count(), 1 + 3 * 121);
    }

    #[test]
    fn order_gap_shrinks_with_the_time_step() {
        let bilinear = field(Analytic::Bilinear, 2, 2);
        let (_, _, g) = solve_both(&bilinear, &params(50, 50, 16)).unwrap();
        assert!(g <= 1e-12);
        let h = field(Analytic::CosineProduct, 2, 2);
        let gaps: Vec<f64> = [16, 32, 64].iter().map(|&n| solve_both(&h, &params(50, 50, n)).unwrap().2).collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2] && gaps[2] > 0.0, "{gaps:?}");
    }

    #[test]
    fn tent_value_does_not_grow_under_refinement() {
        let h = field(Analytic::Tent { center: None }, 2, 1);
        let vals: Vec<f64> = [50, 100, 200]
            .iter()
            .map(|&m| solve(&h, &params(m, 1, 64)).unwrap().value_at(0.0, &[0.5, 0.5], &[1.0]).unwrap().abs())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-15), "{vals:?}");
    }

    fn grid_payoff() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 11 * 11)
    }

    fn tabulated(values: Vec<f64>) -> HamiltonianField {
        let grid = ProductGrid::new(SimplexGrid::new(2, 10).unwrap(), SimplexGrid::new(2, 10).unwrap());
        HamiltonianField::custom(2, 2, 1.0, 1.0, move |_, p, q| grid.interpolate(&values, p, q))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scheme_is_monotone_and_bounded(a in grid_payoff(), b in grid_payoff(), order in prop_oneof![Just(SchemeOrder::VexCav), Just(SchemeOrder::CavVex)]) {
            let upper: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect();
            let p = HjParams { order, ..params(10, 10, 16) };
            let lo = solve(&tabulated(a), &p).unwrap();
            let hi = solve(&tabulated(upper), &p).unwrap();
            for (k, (l, u)) in lo.layers.iter().zip(&hi.layers).enumerate() {
                let cap = 1.0 - lo.times[k];
                for (x, y) in l.iter().zip(u) {
                    prop_assert!(x <= &(y + 1e-12));
                    prop_assert!(x.abs() <= cap + 1e-9 && y.abs() <= cap + 1e-9);
                }
            }
        }
    }
}
