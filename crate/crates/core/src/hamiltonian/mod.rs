//! The running payoff `H(t, p, q)` and the envelope operators acting on it.
//!
//! `H` is either a closed-form preset or the mixed value of the action game
//! whose payoff is `Σ_{i,j} p_i q_j f_{ij}(t, k, l)` for a sampled payoff
//! tensor `f`.

pub mod envelope;
pub mod grid;
pub mod matrix_game;

use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::SimplexPoint;

pub use envelope::{cav_q, vex_p};
pub use grid::{GridFunction, ProductGrid, SimplexGrid};
pub use matrix_game::{matrix_game_value, GameSolution};

/// Payoffs `f_{ij}(t, k, l) ∈ [0, 1]` sampled on a time grid, flattened
/// row-major over `(time, i, j, k, l)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayoffTensor {
    pub time_samples: Vec<f64>,
    pub n_i: usize,
    pub n_j: usize,
    pub n_k: usize,
    pub n_l: usize,
    pub values: Vec<f64>,
}

impl PayoffTensor {
    pub fn validate(&self) -> Result<()> {
        if self.time_samples.is_empty() || [self.n_i, self.n_j, self.n_k, self.n_l].contains(&0) {
            return Err(Error::DimensionMismatch("payoff tensor has an empty axis".into()));
        }
        if self.time_samples.windows(2).any(|w| !(w[0] < w[1])) || self.time_samples[0] < 0.0 {
            return Err(Error::Precondition("time samples must be increasing and nonnegative".into()));
        }
        let expected = self.time_samples.len() * self.n_i * self.n_j * self.n_k * self.n_l;
        if self.values.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "payoff tensor holds {} values, expected {expected}",
                self.values.len()
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Precondition(format!("payoff {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensor: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        tensor.validate()?;
        Ok(tensor)
    }

    fn at(&self, s: usize, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.values[(((s * self.n_i + i) * self.n_j + j) * self.n_k + k) * self.n_l + l]
    }

    /// Action matrix at time `t` with rows indexed by `l` (the minimizing
    /// side of `sup_k inf_l`) and columns by `k`.
    pub fn action_matrix(&self, t: f64, p: &[f64], q: &[f64]) -> DMatrix<f64> {
        let ts = &self.time_samples;
        let (s0, s1, w) = if t <= ts[0] {
            (0, 0, 0.0)
        } else if t >= ts[ts.len() - 1] {
            (ts.len() - 1, ts.len() - 1, 0.0)
        } else {
            let hi = ts.partition_point(|&x| x <= t);
            let lo = hi - 1;
            (lo, hi, (t - ts[lo]) / (ts[hi] - ts[lo]))
        };
        DMatrix::from_fn(self.n_l, self.n_k, |l, k| {
            let mut acc = 0.0;
            for (i, pi) in p.iter().enumerate() {
                for (j, qj) in q.iter().enumerate() {
                    let f = (1.0 - w) * self.at(s0, i, j, k, l) + w * self.at(s1, i, j, k, l);
                    acc += pi * qj * f;
                }
            }
            acc
        })
    }
}

/// Closed-form Hamiltonians for golden tests. All are time independent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Analytic {
    Zero,
    Constant {
        c: f64,
    },
    /// `1/2 - max_i |p_i - center_i|`; vanishes at the vertices of Δ(2).
    Tent {
        center: Option<Vec<f64>>,
    },
    /// `|p - center|²` (convex in `p`).
    Convex {
        center: Option<Vec<f64>>,
    },
    /// `1 - Σ p_i²` (concave in `p`, zero at the vertices).
    Concave,
    /// `16 (p_1 - a)² (p_1 - b)²` with `a = 1/4`, `b = 3/4`: convex outside
    /// `[a, b]`, flat envelope inside.
    DoubleWell,
    /// `p_1 q_1`.
    Bilinear,
    /// `(p_1 - q_1)²`: convex in both arguments.
    SquaredGap,
    /// `cos(2π p_1) cos(2π q_1)`: neither convex nor concave in either
    /// argument, so the envelope order matters.
    CosineProduct,
}

impl Analytic {
    fn eval(&self, p: &[f64], q: &[f64]) -> f64 {
        match self {
            Analytic::Zero => 0.0,
            Analytic::Constant { c } => *c,
            Analytic::Tent { center } => {
                let n = p.len() as f64;
                let dev = p
                    .iter()
                    .enumerate()
                    .map(|(i, x)| (x - center.as_ref().map_or(1.0 / n, |c| c[i])).abs())
                    .fold(0.0, f64::max);
                0.5 - dev
            }
            Analytic::Convex { center } => {
                p.iter().enumerate().map(|(i, x)| (x - center.as_ref().map_or(0.3, |c| c[i])).powi(2)).sum()
            }
            Analytic::Concave => 1.0 - p.iter().map(|x| x * x).sum::<f64>(),
            Analytic::DoubleWell => 16.0 * (p[0] - 0.25).powi(2) * (p[0] - 0.75).powi(2),
            Analytic::Bilinear => p[0] * q[0],
            Analytic::SquaredGap => (p[0] - q[0]).powi(2),
            Analytic::CosineProduct => (TAU * p[0]).cos() * (TAU * q[0]).cos(),
        }
    }

    /// `(sup |H|, Lipschitz constant)` on Δ × Δ with Euclidean distances.
    fn constants(&self) -> (f64, f64) {
        match self {
            Analytic::Zero => (0.0, 0.0),
            Analytic::Constant { c } => (c.abs(), 0.0),
            Analytic::Tent { .. } => (0.5, 1.0),
            Analytic::Convex { .. } => (4.0, 2.0 * 2f64.sqrt() + 2.0),
            Analytic::Concave => (1.0, 2.0),
            Analytic::DoubleWell => (0.5625, 6.0 / 2f64.sqrt()),
            Analytic::Bilinear => (1.0, 1.0),
            Analytic::SquaredGap => (1.0, 2.0),
            Analytic::CosineProduct => (1.0, TAU),
        }
    }

    pub fn is_time_independent(&self) -> bool {
        true
    }
}

type CustomFn = dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
pub enum HamiltonianKind {
    Analytic(Analytic),
    Tensor(Arc<PayoffTensor>),
    Custom(Arc<CustomFn>),
}

impl fmt::Debug for HamiltonianKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HamiltonianKind::Analytic(a) => write!(f, "Analytic({a:?})"),
            HamiltonianKind::Tensor(t) => write!(f, "Tensor({}x{}x{}x{})", t.n_i, t.n_j, t.n_k, t.n_l),
            HamiltonianKind::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// A bounded Lipschitz running payoff on `[0, T] × Δ(I) × Δ(J)`.
#[derive(Clone, Debug)]
pub struct HamiltonianField {
    kind: HamiltonianKind,
    n_i: usize,
    n_j: usize,
    bound: f64,
    lipschitz: f64,
}

impl HamiltonianField {
    pub fn analytic(a: Analytic, n_i: usize, n_j: usize) -> Result<Self> {
        let needs_pair = matches!(a, Analytic::Bilinear | Analytic::SquaredGap | Analytic::CosineProduct);
        if n_i < 1 || n_j < 1 || (needs_pair && n_j < 2) || (a == Analytic::DoubleWell && n_i < 2) {
            return Err(Error::DimensionMismatch(format!("{a:?} on Δ({n_i}) × Δ({n_j})")));
        }
        if let Analytic::Tent { center: Some(c) } | Analytic::Convex { center: Some(c) } = &a {
            if c.len() != n_i {
                return Err(Error::DimensionMismatch("center dimension".into()));
            }
        }
        let (bound, lipschitz) = a.constants();
        Ok(Self { kind: HamiltonianKind::Analytic(a), n_i, n_j, bound, lipschitz })
    }

    /// Wraps a payoff tensor; the Lipschitz constant is measured on a grid of
    /// `(t, p, q)` samples.
    pub fn tensor(t: PayoffTensor) -> Result<Self> {
        t.validate()?;
        let (n_i, n_j) = (t.n_i, t.n_j);
        let bound = t.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut field = Self { kind: HamiltonianKind::Tensor(Arc::new(t)), n_i, n_j, bound, lipschitz: 0.0 };
        field.lipschitz = field.measure_lipschitz(8)?;
        Ok(field)
    }

    pub fn custom(
        n_i: usize,
        n_j: usize,
        bound: f64,
        lipschitz: f64,
        f: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { kind: HamiltonianKind::Custom(Arc::new(f)), n_i, n_j, bound, lipschitz }
    }

    pub fn kind(&self) -> &HamiltonianKind {
        &self.kind
    }

    pub fn n_i(&self) -> usize {
        self.n_i
    }

    pub fn n_j(&self) -> usize {
        self.n_j
    }

    /// `sup |H|`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// A single constant that is both a bound and a Lipschitz constant.
    pub fn constant(&self) -> f64 {
        self.bound.max(self.lipschitz)
    }

    pub fn is_time_independent(&self) -> bool {
        match &self.kind {
            HamiltonianKind::Analytic(a) => a.is_time_independent(),
            HamiltonianKind::Tensor(t) => t.time_samples.len() == 1,
            HamiltonianKind::Custom(_) => false,
        }
    }

    /// Evaluates on raw coordinates; callers guarantee dimensions.
    pub fn value(&self, t: f64, p: &[f64], q: &[f64]) -> Result<f64> {
        debug_assert_eq!(p.len(), self.n_i);
        debug_assert_eq!(q.len(), self.n_j);
        Ok(match &self.kind {
            HamiltonianKind::Analytic(a) => a.eval(p, q),
            HamiltonianKind::Tensor(tensor) => matrix_game_value(&tensor.action_matrix(t, p, q))?.value.clamp(0.0, 1.0),
            HamiltonianKind::Custom(f) => f(t, p, q),
        })
    }

    fn measure_lipschitz(&self, m: usize) -> Result<f64> {
        let gp = SimplexGrid::new(self.n_i, m)?;
        let gq = SimplexGrid::new(self.n_j, m)?;
        let times: Vec<f64> = match &self.kind {
            HamiltonianKind::Tensor(t) => t.time_samples.clone(),
            _ => vec![0.0],
        };
        let mut table = Vec::with_capacity(times.len());
        for &t in &times {
            let mut layer = Vec::with_capacity(gp.len() * gq.len());
            for ip in 0..gp.len() {
                for iq in 0..gq.len() {
                    layer.push(self.value(t, &gp.point(ip), &gq.point(iq))?);
                }
            }
            table.push(layer);
        }
        let nq = gq.len();
        let mut lip: f64 = 0.0;
        let step = std::f64::consts::SQRT_2 / m as f64;
        for layer in &table {
            for (g, is_p) in [(&gp, true), (&gq, false)] {
                for fam in g.line_families() {
                    for line in &fam.lines {
                        for w in line.windows(2) {
                            let others = if is_p { nq } else { gp.len() };
                            for o in 0..others {
                                let (a, b) =
                                    if is_p { (w[0] * nq + o, w[1] * nq + o) } else { (o * nq + w[0], o * nq + w[1]) };
                                lip = lip.max((layer[a] - layer[b]).abs() / step);
                            }
                        }
                    }
                }
            }
        }
        for (w, pair) in times.windows(2).zip(table.windows(2)) {
            let dt = w[1] - w[0];
            for (a, b) in pair[0].iter().zip(&pair[1]) {
                lip = lip.max((a - b).abs() / dt);
            }
        }
        Ok(lip)
    }
}

/// `H(t, p, q)` with dimension checks.
pub fn eval_h(h: &HamiltonianField, t: f64, p: &SimplexPoint, q: &SimplexPoint) -> Result<f64> {
    if p.dim() != h.n_i || q.dim() != h.n_j {
        return Err(Error::DimensionMismatch(format!(
            "H on Δ({}) × Δ({}) evaluated at points of dimension {} and {}",
            h.n_i,
            h.n_j,
            p.dim(),
            q.dim()
        )));
    }
    h.value(t, p.coords(), q.coords())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(v: &[f64]) -> SimplexPoint {
        SimplexPoint::new(v.to_vec()).unwrap()
    }

    /// One action for the maximizer, two for the minimizer; payoff 1 exactly
    /// when the minimizer's action matches the type: H(p) = min(p1, p2).
    pub(crate) fn tent_tensor() -> PayoffTensor {
        // order (time, i, j, k, l)
        PayoffTensor { time_samples: vec![0.0], n_i: 2, n_j: 1, n_k: 1, n_l: 2, values: vec![1.0, 0.0, 0.0, 1.0] }
    }

    #[test]
    fn tensor_reproduces_tent() {
        let h = HamiltonianField::tensor(tent_tensor()).unwrap();
        let tent = HamiltonianField::analytic(Analytic::Tent { center: None }, 2, 1).unwrap();
        let q = pt(&[1.0]);
        for k in 0..=10 {
            let x = k as f64 / 10.0;
            let p = pt(&[x, 1.0 - x]);
            let closed = 0.5 - (x - 0.5).abs();
            assert!((eval_h(&h, 0.0, &p, &q).unwrap() - closed).abs() < 1e-9);
            assert!((eval_h(&tent, 0.0, &p, &q).unwrap() - closed).abs() < 1e-12);
        }
        assert!(h.lipschitz() <= 1.0 / 2f64.sqrt() + 1e-9);
    }

    #[test]
    fn type_independent_tensor_gives_action_game_value() {
        let base = [0.9, 0.1, 0.2, 0.7];
        let tensor = PayoffTensor {
            time_samples: vec![0.0, 1.0],
            n_i: 2,
            n_j: 2,
            n_k: 2,
            n_l: 2,
            values: (0..8).flat_map(|_| base).collect(),
        };
        let h = HamiltonianField::tensor(tensor).unwrap();
        // rows are the minimizer's actions l, columns k
        let m = DMatrix::from_fn(2, 2, |l, k| base[k * 2 + l]);
        let v = matrix_game_value(&m).unwrap().value;
        for (p, q) in [([0.1, 0.9], [0.5, 0.5]), ([1.0, 0.0], [0.3, 0.7])] {
            assert!((eval_h(&h, 0.4, &pt(&p), &pt(&q)).unwrap() - v).abs() < 1e-12);
        }
    }

    #[test]
    fn single_action_tensor_is_bilinear_and_interpolates_in_time() {
        let tensor = PayoffTensor {
            time_samples: vec![0.0, 1.0],
            n_i: 2,
            n_j: 2,
            n_k: 1,
            n_l: 1,
            values: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
        };
        let h = HamiltonianField::tensor(tensor.clone()).unwrap();
        let (p, q) = (pt(&[0.25, 0.75]), pt(&[0.6, 0.4]));
        let bilinear = |s: usize| {
            let f = |i: usize, j: usize| tensor.values[s * 4 + i * 2 + j];
            0.25 * 0.6 * f(0, 0) + 0.25 * 0.4 * f(0, 1) + 0.75 * 0.6 * f(1, 0) + 0.75 * 0.4 * f(1, 1)
        };
        assert!((eval_h(&h, 0.0, &p, &q).unwrap() - bilinear(0)).abs() < 1e-12);
        let mid = 0.5 * (bilinear(0) + bilinear(1));
        assert!((eval_h(&h, 0.5, &p, &q).unwrap() - mid).abs() < 1e-12);
    }

    #[test]
    fn dimension_and_range_errors() {
        let h = HamiltonianField::tensor(tent_tensor()).unwrap();
        assert!(eval_h(&h, 0.0, &pt(&[0.2, 0.3, 0.5]), &pt(&[1.0])).is_err());
        let mut bad = tent_tensor();
        bad.values[0] = 1.5;
        assert!(HamiltonianField::tensor(bad).is_err());
        let mut short = tent_tensor();
        short.values.pop();
        assert!(short.validate().is_err());
    }

    fn random_tensor() -> impl Strategy<Value = PayoffTensor> {
        (1usize..=3, 1usize..=3, 1usize..=3, 1usize..=3).prop_flat_map(|(ni, nj, nk, nl)| {
            prop::collection::vec(0.0f64..=1.0, ni * nj * nk * nl).prop_map(move |values| PayoffTensor {
                time_samples: vec![0.0],
                n_i: ni,
                n_j: nj,
                n_k: nk,
                n_l: nl,
                values,
            })
        })
    }

    fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_map(|w| {
            let s: f64 = w.iter().sum::<f64>() + 1e-9;
            let mut v: Vec<f64> = w.iter().map(|x| (x + 1e-9 / w.len() as f64) / s).collect();
            let t: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= t);
            v
        })
    }

    proptest! {
        #[test]
        fn tensor_hamiltonian_is_l1_lipschitz_in_p(
            (tensor, p, pp, q) in random_tensor().prop_flat_map(|t| {
                let (ni, nj) = (t.n_i, t.n_j);
                (Just(t), weights(ni), weights(ni), weights(nj))
            })
        ) {
            let h = HamiltonianField::tensor(tensor).unwrap();
            let a = h.value(0.0, &p, &q).unwrap();
            let b = h.value(0.0, &pp, &q).unwrap();
            let l1: f64 = p.iter().zip(&pp).map(|(x, y)| (x - y).abs()).sum();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - b).abs() <= l1 + 1e-9);
        }
    }
}
