//! Mixed value of a finite zero-sum matrix game by linear programming.
//!
//! Convention: the row player minimizes, the column player maximizes, so the
//! value is `min_x max_j (xᵀM)_j = max_y min_i (My)_i`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GameSolution {
    pub value: f64,
    /// Optimal mixed strategy of the (minimizing) row player.
    pub row_strategy: Vec<f64>,
    /// Optimal mixed strategy of the (maximizing) column player.
    pub col_strategy: Vec<f64>,
}

const PIVOT_EPS: f64 = 1e-12;

pub fn matrix_game_value(m: &DMatrix<f64>) -> Result<GameSolution> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::DimensionMismatch("empty payoff matrix".into()));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("payoff matrix entry".into()));
    }
    let lo = m.min();
    // With A = Mᵀ - lo + 1 (entries >= 1), the LP max Σx' s.t. A x' <= 1,
    // x' >= 0 gives min_x max_j (xᵀM)_j = 1 / Σx' + lo - 1. Its primal is
    // the row strategy, its dual the column strategy.
    let (rows, cols) = (cols, rows);
    let width = cols + rows + 1;
    let mut tab = vec![0.0; (rows + 1) * width];
    for i in 0..rows {
        for j in 0..cols {
            tab[i * width + j] = m[(j, i)] - lo + 1.0;
        }
        tab[i * width + cols + i] = 1.0;
        tab[i * width + width - 1] = 1.0;
    }
    let obj = rows * width;
    for j in 0..cols {
        tab[obj + j] = -1.0;
    }
    let mut basis: Vec<usize> = (cols..cols + rows).collect();

    let max_iter = 50 * (rows + cols) + 100;
    let mut iter = 0;
    // Bland's rule: lowest-index improving column.
    while let Some(enter) = (0..cols + rows).find(|&j| tab[obj + j] < -PIVOT_EPS) {
        iter += 1;
        if iter > max_iter {
            return Err(Error::NonConvergence(format!("simplex exceeded {max_iter} pivots")));
        }
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..rows {
            let a = tab[i * width + enter];
            if a > PIVOT_EPS {
                let ratio = tab[i * width + width - 1] / a;
                let better = match leave {
                    None => true,
                    Some((l, r)) => ratio < r - PIVOT_EPS || (ratio <= r + PIVOT_EPS && basis[i] < basis[l]),
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        let Some((pr, _)) = leave else {
            return Err(Error::NonConvergence("unbounded pivot column".into()));
        };
        let pv = tab[pr * width + enter];
        for k in 0..width {
            tab[pr * width + k] /= pv;
        }
        for i in 0..=rows {
            if i == pr {
                continue;
            }
            let f = tab[i * width + enter];
            if f != 0.0 {
                for k in 0..width {
                    tab[i * width + k] -= f * tab[pr * width + k];
                }
            }
        }
        basis[pr] = enter;
    }

    let total = tab[obj + width - 1];
    if !(total > 0.0) {
        return Err(Error::NonConvergence("degenerate objective".into()));
    }
    let scale = 1.0 / total;
    let mut row_strategy = vec![0.0; cols];
    for (i, &b) in basis.iter().enumerate() {
        if b < cols {
            row_strategy[b] = tab[i * width + width - 1] * scale;
        }
    }
    let col_strategy: Vec<f64> = (0..rows).map(|i| tab[obj + cols + i].max(0.0) * scale).collect();
    Ok(GameSolution {
        value: scale + lo - 1.0,
        row_strategy: normalize(row_strategy),
        col_strategy: normalize(col_strategy),
    })
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// `max_j (xᵀM)_j`: what the row strategy concedes at worst.
pub fn row_guarantee(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    (0..m.ncols()).map(|j| (0..m.nrows()).map(|i| x[i] * m[(i, j)]).sum::<f64>()).fold(f64::NEG_INFINITY, f64::max)
}

/// `min_i (My)_i`: what the column strategy secures at worst.
pub fn col_guarantee(m: &DMatrix<f64>, y: &[f64]) -> f64 {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)] * y[j]).sum::<f64>()).fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Scans the row player's mixed strategies on a fine grid (2 rows only).
    fn brute_force_2row(m: &DMatrix<f64>) -> f64 {
        (0..=100_000)
            .map(|k| {
                let x = k as f64 / 100_000.0;
                row_guarantee(m, &[x, 1.0 - x])
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn matching_pennies() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let s = matrix_game_value(&m).unwrap();
        assert!(s.value.abs() < 1e-12);
        for x in s.row_strategy.iter().chain(&s.col_strategy) {
            assert!((x - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_game() {
        let m = DMatrix::from_element(3, 4, 0.37);
        assert!((matrix_game_value(&m).unwrap().value - 0.37).abs() < 1e-12);
    }

    #[test]
    fn identity_game_matches_brute_force() {
        let m = DMatrix::<f64>::identity(2, 2);
        let oracle = brute_force_2row(&m);
        assert!((oracle - 0.5).abs() < 1e-9);
        assert!((matrix_game_value(&m).unwrap().value - oracle).abs() < 1e-9);
    }

    #[test]
    fn degenerate_games() {
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let s = matrix_game_value(&m).unwrap();
        assert!((row_guarantee(&m, &s.row_strategy) - s.value).abs() < 1e-9);
        assert!((col_guarantee(&m, &s.col_strategy) - s.value).abs() < 1e-9);
        let row = DMatrix::from_row_slice(1, 3, &[0.2, 0.9, 0.4]);
        assert!((matrix_game_value(&row).unwrap().value - 0.9).abs() < 1e-12);
        let col = DMatrix::from_row_slice(3, 1, &[0.2, 0.9, 0.4]);
        assert!((matrix_game_value(&col).unwrap().value - 0.2).abs() < 1e-12);
        assert!(matrix_game_value(&DMatrix::from_row_slice(1, 1, &[f64::NAN])).is_err());
    }

    fn matrices() -> impl Strategy<Value = DMatrix<f64>> {
        (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
            prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |v| DMatrix::from_row_slice(r, c, &v))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn strategies_certify_the_value(m in matrices()) {
            let s = matrix_game_value(&m).unwrap();
            prop_assert!((row_guarantee(&m, &s.row_strategy) - s.value).abs() <= 1e-9);
            prop_assert!((col_guarantee(&m, &s.col_strategy) - s.value).abs() <= 1e-9);
        }

        #[test]
        fn negated_transpose_swaps_roles(m in matrices()) {
            let s = matrix_game_value(&m).unwrap();
            let neg = -m.transpose();
            let t = matrix_game_value(&neg).unwrap();
            prop_assert!((t.value + s.value).abs() <= 1e-9);
            // swapped strategies stay optimal in the dual game
            prop_assert!((row_guarantee(&neg, &s.col_strategy) - t.value).abs() <= 1e-9);
            prop_assert!((col_guarantee(&neg, &s.row_strategy) - t.value).abs() <= 1e-9);
        }

        #[test]
        fn two_row_games_match_brute_force(v in prop::collection::vec(0.0f64..1.0, 4)) {
            let m = DMatrix::from_row_slice(2, 2, &v);
            prop_assert!((matrix_game_value(&m).unwrap().value - brute_force_2row(&m)).abs() <= 1e-4);
        }
    }
}
