//! Geometry of the probability simplex Δ(n): supports, tangent spaces,
//! orthogonal projections and eigenvalues relative to the tangent space.
//!
//! Indices are zero-based throughout.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance applied by [`SimplexPoint::new`] before clamping and renormalizing.
pub const INPUT_TOLERANCE: f64 = 1e-9;

/// A probability vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    /// Builds a point from raw coordinates. Coordinates in `[-1e-9, 0)` are
    /// clamped to zero and a sum within `1e-9` of one is renormalized;
    /// anything worse is rejected.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidPoint("empty coordinate vector".into()));
        }
        if let Some(c) = coords.iter().find(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("coordinate {c}")));
        }
        if let Some(c) = coords.iter().find(|&&c| c < -INPUT_TOLERANCE) {
            return Err(Error::InvalidPoint(format!("negative coordinate {c}")));
        }
        let mut coords: Vec<f64> = coords.into_iter().map(|c| c.max(0.0)).collect();
        let sum: f64 = coords.iter().sum();
        if (sum - 1.0).abs() > INPUT_TOLERANCE {
            return Err(Error::InvalidPoint(format!("coordinates sum to {sum}")));
        }
        coords.iter_mut().for_each(|c| *c /= sum);
        Ok(Self(coords))
    }

    /// The vertex `e_i` of Δ(n).
    pub fn vertex(n: usize, i: usize) -> Self {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        Self(v)
    }

    /// The barycenter of Δ(n).
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Wraps coordinates that are already known to be a valid probability
    /// vector (nonnegative, unit sum up to rounding).
    pub(crate) fn from_normalized(coords: Vec<f64>) -> Self {
        debug_assert!(coords.iter().all(|&c| c >= 0.0));
        debug_assert!((coords.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        Self(coords)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for SimplexPoint {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SimplexPoint> for Vec<f64> {
    fn from(p: SimplexPoint) -> Self {
        p.0
    }
}

impl TryFrom<Vec<Vec<f64>>> for ControlMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("control matrix rows must form a square".into()));
        }
        Self::new(n, rows.concat())
    }
}

impl From<ControlMatrix> for Vec<Vec<f64>> {
    fn from(m: ControlMatrix) -> Self {
        m.entries.chunks_exact(m.n).map(<[f64]>::to_vec).collect()
    }
}

impl std::ops::Index<usize> for SimplexPoint {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Sorted indices carrying mass, together with the ambient dimension.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SupportSet {
    dim: usize,
    indices: Vec<usize>,
}

impl SupportSet {
    pub fn new(dim: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::Precondition("support set must be nonempty".into()));
        }
        if indices.iter().any(|&i| i >= dim) {
            return Err(Error::Precondition(format!("support index out of range for dimension {dim}")));
        }
        Ok(Self { dim, indices })
    }

    pub fn full(dim: usize) -> Self {
        Self { dim, indices: (0..dim).collect() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn is_subset(&self, other: &SupportSet) -> bool {
        self.indices.iter().all(|&i| other.contains(i))
    }
}

/// Square control matrix (an element of `R^{n×n}`). Serialized as a list of
/// rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ControlMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl ControlMatrix {
    /// Row-major entries.
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::DimensionMismatch(format!("{} entries for a {n}x{n} control", entries.len())));
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("control matrix entry".into()));
        }
        Ok(Self { n, entries })
    }

    pub fn zeros(n: usize) -> Self {
        Self { n, entries: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.entries[i * n + i] = 1.0;
        }
        m
    }

    /// The rank-one matrix `scale · a bᵀ`.
    pub fn rank_one(a: &[f64], b: &[f64], scale: f64) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch("rank-one factors differ in length".into()));
        }
        let n = a.len();
        let entries = (0..n * n).map(|k| scale * a[k / n] * b[k % n]).collect();
        Self::new(n, entries)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { n: self.n, entries: self.entries.iter().map(|e| e * s).collect() }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|&e| e == 0.0)
    }

    /// Matrix-vector product `u · v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.n);
        self.entries.chunks_exact(self.n).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    /// Columnwise tangent projection `P_s u`.
    pub fn project(&self, s: &SupportSet) -> Self {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            for i in 0..n {
                col[i] = self.get(i, j);
            }
            let projected = project_onto(s, &col);
            for i in 0..n {
                out[i * n + j] = projected[i];
            }
        }
        Self { n, entries: out }
    }
}

/// Indices with `p_i > eta`.
pub fn support(p: &SimplexPoint, eta: f64) -> Result<SupportSet> {
    let indices: Vec<usize> = p.coords().iter().enumerate().filter(|(_, &c)| c > eta).map(|(i, _)| i).collect();
    if indices.is_empty() {
        return Err(Error::DegeneratePoint { eta });
    }
    Ok(SupportSet { dim: p.dim(), indices })
}

/// Orthogonal projection onto the tangent space of the face spanned by `s`:
/// zero off the support, mean-subtracted on it.
pub fn project_onto(s: &SupportSet, y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(y.len(), s.dim());
    let mean = s.indices.iter().map(|&i| y[i]).sum::<f64>() / s.len() as f64;
    let mut out = vec![0.0; y.len()];
    for &i in &s.indices {
        out[i] = y[i] - mean;
    }
    out
}

/// `P_p y` with the exact support of `p`.
pub fn project_tangent(p: &SimplexPoint, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != p.dim() {
        return Err(Error::DimensionMismatch(format!(
            "vector of length {} for a point in dimension {}",
            y.len(),
            p.dim()
        )));
    }
    Ok(project_onto(&support(p, 0.0)?, y))
}

/// Orthonormal basis of `{y : Σ y_i = 0, y_i = 0 off s}` (Helmert vectors on
/// the support), `|s| - 1` vectors.
pub fn tangent_basis(s: &SupportSet) -> Vec<Vec<f64>> {
    let idx = s.indices();
    (1..idx.len())
        .map(|k| {
            let norm = ((k * (k + 1)) as f64).sqrt();
            let mut v = vec![0.0; s.dim()];
            for &i in &idx[..k] {
                v[i] = 1.0 / norm;
            }
            v[idx[k]] = -(k as f64) / norm;
            v
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelEigenResult {
    pub value: f64,
    pub witness: Option<Vec<f64>>,
}

const SYMMETRY_TOLERANCE: f64 = 1e-10;

type TangentEigen = (Vec<Vec<f64>>, SymmetricEigen<f64, nalgebra::Dyn>);

fn reduced_eigen(p: &SimplexPoint, a: &DMatrix<f64>) -> Result<Option<TangentEigen>> {
    let n = p.dim();
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} matrix at a point of dimension {n}",
            a.nrows(),
            a.ncols()
        )));
    }
    let asym = (a - a.transpose()).amax();
    if asym > SYMMETRY_TOLERANCE {
        return Err(Error::NotSymmetric(asym));
    }
    let basis = tangent_basis(&support(p, 0.0)?);
    if basis.is_empty() {
        return Ok(None);
    }
    let b = DMatrix::from_fn(n, basis.len(), |i, k| basis[k][i]);
    let reduced = b.transpose() * a * &b;
    let sym = (&reduced + reduced.transpose()) * 0.5;
    Ok(Some((basis, sym.symmetric_eigen())))
}

fn extreme(p: &SimplexPoint, a: &DMatrix<f64>, want_max: bool) -> Result<RelEigenResult> {
    let Some((basis, eig)) = reduced_eigen(p, a)? else {
        let value = if want_max { f64::NEG_INFINITY } else { f64::INFINITY };
        return Ok(RelEigenResult { value, witness: None });
    };
    let (k, &value) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .reduce(|best, cur| {
            let better = if want_max { cur.1 > best.1 } else { cur.1 < best.1 };
            if better {
                cur
            } else {
                best
            }
        })
        .expect("nonempty spectrum");
    let coeffs: DVector<f64> = eig.eigenvectors.column(k).into_owned();
    let mut witness = vec![0.0; p.dim()];
    for (c, v) in coeffs.iter().zip(&basis) {
        for (w, x) in witness.iter_mut().zip(v) {
            *w += c * x;
        }
    }
    Ok(RelEigenResult { value, witness: Some(witness) })
}

/// Smallest eigenvalue of `A` restricted to the tangent space at `p`
/// (`+∞` when the tangent space is trivial).
pub fn rel_eigen_min(p: &SimplexPoint, a: &DMatrix<f64>) -> Result<RelEigenResult> {
    extreme(p, a, false)
}

/// Largest eigenvalue of `B` restricted to the tangent space at `q`
/// (`-∞` when the tangent space is trivial).
pub fn rel_eigen_max(q: &SimplexPoint, b: &DMatrix<f64>) -> Result<RelEigenResult> {
    extreme(q, b, true)
}

/// Euclidean distance between two points of the same simplex.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(v: &[f64]) -> SimplexPoint {
        SimplexPoint::new(v.to_vec()).unwrap()
    }

    #[test]
    fn constructor_clamps_small_errors_and_rejects_large_ones() {
        let p = pt(&[0.5 + 5e-10, 0.5, -4e-10]);
        assert_eq!(p[2], 0.0);
        assert!((p.coords().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(SimplexPoint::new(vec![0.6, 0.5]).is_err());
        assert!(SimplexPoint::new(vec![1.1, -0.1]).is_err());
        assert!(SimplexPoint::new(vec![f64::NAN, 1.0]).is_err());
        assert!(serde_json::from_str::<SimplexPoint>("[0.3, 0.3]").is_err());
    }

    #[test]
    fn support_examples() {
        assert_eq!(support(&pt(&[1.0, 0.0]), 0.0).unwrap().indices(), &[0]);
        assert_eq!(support(&pt(&[0.5, 0.5]), 0.0).unwrap().indices(), &[0, 1]);
        assert_eq!(support(&pt(&[0.2, 0.0, 0.8]), 0.0).unwrap().indices(), &[0, 2]);
        assert!(matches!(support(&pt(&[0.5, 0.5]), 0.6), Err(Error::DegeneratePoint { .. })));
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_tangent(&pt(&[0.5, 0.5]), &[1.0, 0.0]).unwrap(), vec![0.5, -0.5]);
        assert_eq!(project_tangent(&pt(&[1.0, 0.0]), &[3.0, -7.0]).unwrap(), vec![0.0, 0.0]);
        let y = [0.3, -0.1, -0.2];
        let out = project_tangent(&pt(&[0.2, 0.3, 0.5]), &y).unwrap();
        for (a, b) in out.iter().zip(&y) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tangent_basis_examples() {
        assert!(tangent_basis(&SupportSet::new(3, vec![1]).unwrap()).is_empty());
        let b = tangent_basis(&SupportSet::full(2));
        let r = 1.0 / 2f64.sqrt();
        assert_eq!(b.len(), 1);
        assert!((b[0][0] - r).abs() < 1e-15 && (b[0][1] + r).abs() < 1e-15);
        let b = tangent_basis(&SupportSet::full(3));
        assert_eq!(b.len(), 2);
        for v in &b {
            assert!(v.iter().sum::<f64>().abs() < 1e-15);
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!(b[0].iter().zip(&b[1]).map(|(x, y)| x * y).sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn relative_eigenvalue_examples() {
        let id = DMatrix::<f64>::identity(2, 2);
        let vertex = rel_eigen_min(&pt(&[1.0, 0.0]), &id).unwrap();
        assert_eq!(vertex.value, f64::INFINITY);
        assert!(vertex.witness.is_none());
        assert_eq!(rel_eigen_max(&pt(&[0.0, 1.0]), &id).unwrap().value, f64::NEG_INFINITY);
        assert!((rel_eigen_min(&pt(&[0.2, 0.3, 0.5]), &DMatrix::identity(3, 3)).unwrap().value - 1.0).abs() < 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let r = rel_eigen_min(&pt(&[0.5, 0.5]), &d).unwrap();
        assert!(r.value.abs() < 1e-15);
        let w = r.witness.unwrap();
        assert!((w[0] + w[1]).abs() < 1e-15);
        let skew = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(rel_eigen_min(&pt(&[0.5, 0.5]), &skew), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn rank_one_control_projects_to_itself_when_tangent() {
        let u = ControlMatrix::rank_one(&[1.0, -1.0], &[1.0, 0.0], 2.0).unwrap();
        assert_eq!(u.project(&SupportSet::full(2)), u);
        assert_eq!(u.apply(&[0.5, 3.0]), vec![1.0, -1.0]);
    }

    fn point_strategy(n: usize) -> impl Strategy<Value = SimplexPoint> {
        (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(any::<bool>(), n)).prop_map(move |(w, keep)| {
            let mut w: Vec<f64> = w.iter().zip(&keep).map(|(x, k)| if *k { x + 0.01 } else { 0.0 }).collect();
            if w.iter().all(|&x| x == 0.0) {
                w[0] = 1.0;
            }
            let s: f64 = w.iter().sum();
            SimplexPoint::new(w.into_iter().map(|x| x / s).collect()).unwrap()
        })
    }

    fn point_and_vector() -> impl Strategy<Value = (SimplexPoint, Vec<f64>)> {
        (1usize..=5).prop_flat_map(|n| (point_strategy(n), prop::collection::vec(-10.0f64..10.0, n)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn projection_is_idempotent_with_correct_range((p, y) in point_and_vector()) {
            let py = project_tangent(&p, &y).unwrap();
            let ppy = project_tangent(&p, &py).unwrap();
            for (a, b) in py.iter().zip(&ppy) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert!(py.iter().sum::<f64>().abs() <= 1e-12);
            let s = support(&p, 0.0).unwrap();
            for i in 0..p.dim() {
                if !s.contains(i) {
                    prop_assert_eq!(py[i], 0.0);
                }
            }
            for z in tangent_basis(&s) {
                let dot: f64 = y.iter().zip(&py).zip(&z).map(|((a, b), c)| (a - b) * c).sum();
                prop_assert!(dot.abs() <= 1e-12);
            }
        }

        #[test]
        fn rayleigh_quotients_lie_between_relative_extremes(
            (p, raw, z) in (2usize..=5).prop_flat_map(|n| (
                point_strategy(n),
                prop::collection::vec(-3.0f64..3.0, n * n),
                prop::collection::vec(-1.0f64..1.0, n),
            ))
        ) {
            let n = p.dim();
            let m = DMatrix::from_row_slice(n, n, &raw);
            let a = (&m + m.transpose()) * 0.5;
            let z = project_tangent(&p, &z).unwrap();
            let norm2: f64 = z.iter().map(|x| x * x).sum();
            prop_assume!(norm2 > 1e-8);
            let zv = DVector::from_vec(z);
            let q = (zv.transpose() * &a * &zv)[(0, 0)] / norm2;
            let lo = rel_eigen_min(&p, &a).unwrap().value;
            let hi = rel_eigen_max(&p, &a).unwrap().value;
            prop_assert!(lo <= q + 1e-10 && q <= hi + 1e-10);
        }

        #[test]
        fn larger_supports_contain_smaller_tangent_spaces(
            (n, small, extra) in (2usize..=6).prop_flat_map(|n| (
                Just(n),
                prop::collection::btree_set(0..n, 1..=n),
                prop::collection::btree_set(0..n, 0..=n),
            ))
        ) {
            let s = SupportSet::new(n, small.iter().copied().collect()).unwrap();
            let big = SupportSet::new(n, small.union(&extra).copied().collect()).unwrap();
            for v in tangent_basis(&s) {
                let pv = project_onto(&big, &v);
                for (a, b) in pv.iter().zip(&v) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}
