//! Convex and concave envelopes of grid functions, slice by slice.
//!
//! On a one-dimensional slice the envelope is the exact lower (upper) convex
//! hull of the sampled graph. On higher-dimensional simplices the largest
//! minorant that is convex along every grid line is reached by sweeping exact
//! line hulls over each edge direction until the largest update falls below
//! [`SWEEP_TOLERANCE`].

use rayon::prelude::*;

use super::grid::{GridFunction, SimplexGrid};
use crate::error::{Error, Result};

pub const SWEEP_TOLERANCE: f64 = 1e-10;
pub const SWEEP_CAP: usize = 100_000;

/// Lower convex hull of equally spaced samples, evaluated at every sample
/// and never above the input.
pub fn lower_hull_1d(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n <= 2 {
        return values.to_vec();
    }
    let mut hull: Vec<usize> = Vec::with_capacity(n);
    for k in 0..n {
        while hull.len() >= 2 {
            let i = hull[hull.len() - 2];
            let j = hull[hull.len() - 1];
            // keep j only if it lies strictly below the chord i-k
            let cross = (j - i) as f64 * (values[k] - values[i]) - (k - i) as f64 * (values[j] - values[i]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(k);
    }
    let mut out = values.to_vec();
    for w in hull.windows(2) {
        let (i, j) = (w[0], w[1]);
        let slope = (values[j] - values[i]) / (j - i) as f64;
        for (k, o) in out.iter_mut().enumerate().take(j).skip(i + 1) {
            *o = o.min(values[i] + slope * (k - i) as f64);
        }
    }
    out
}

/// Largest grid-convex minorant of a function on the nodes of `grid`.
pub fn vex_simplex(grid: &SimplexGrid, values: &[f64]) -> Result<Vec<f64>> {
    let mut out = values.to_vec();
    match grid.dim() {
        1 => {}
        2 => {
            let line = &grid.line_families()[0].lines[0];
            let slice: Vec<f64> = line.iter().map(|&i| out[i]).collect();
            for (&i, v) in line.iter().zip(lower_hull_1d(&slice)) {
                out[i] = v;
            }
        }
        _ => {
            let mut buf = Vec::new();
            for _ in 0..SWEEP_CAP {
                let mut change: f64 = 0.0;
                for fam in grid.line_families() {
                    for line in &fam.lines {
                        buf.clear();
                        buf.extend(line.iter().map(|&i| out[i]));
                        for (&i, v) in line.iter().zip(lower_hull_1d(&buf)) {
                            change = change.max(out[i] - v);
                            out[i] = v;
                        }
                    }
                }
                if change < SWEEP_TOLERANCE {
                    return Ok(out);
                }
            }
            return Err(Error::NonConvergence(format!("envelope sweep exceeded {SWEEP_CAP} iterations")));
        }
    }
    Ok(out)
}

/// Smallest grid-concave majorant.
pub fn cav_simplex(grid: &SimplexGrid, values: &[f64]) -> Result<Vec<f64>> {
    let neg: Vec<f64> = values.iter().map(|v| -v).collect();
    Ok(vex_simplex(grid, &neg)?.into_iter().map(|v| -v).collect())
}

/// Convexifies in `p` for every fixed `q` node.
pub fn vex_p(g: &GridFunction) -> Result<GridFunction> {
    let grid = &g.grid;
    let (np, nq) = (grid.p.len(), grid.q.len());
    if grid.p.dim() == 1 {
        return Ok(g.clone());
    }
    let slices: Vec<Vec<f64>> = (0..nq)
        .into_par_iter()
        .map(|iq| {
            let slice: Vec<f64> = (0..np).map(|ip| g.values[ip * nq + iq]).collect();
            vex_simplex(&grid.p, &slice)
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; g.values.len()];
    for (iq, slice) in slices.into_iter().enumerate() {
        for (ip, v) in slice.into_iter().enumerate() {
            values[ip * nq + iq] = v;
        }
    }
    GridFunction::new(grid.clone(), values)
}

/// Concavifies in `q` for every fixed `p` node.
pub fn cav_q(g: &GridFunction) -> Result<GridFunction> {
    let grid = &g.grid;
    let nq = grid.q.len();
    if grid.q.dim() == 1 {
        return Ok(g.clone());
    }
    let slices: Vec<Vec<f64>> = g.values.par_chunks(nq).map(|row| cav_simplex(&grid.q, row)).collect::<Result<_>>()?;
    GridFunction::new(grid.clone(), slices.concat())
}
