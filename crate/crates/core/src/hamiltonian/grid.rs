//! Uniform barycentric grids on simplices and functions sampled on products
//! of two such grids.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Nodes `c / m` of Δ(n) for integer compositions `c` of the resolution `m`.
#[derive(Debug, Clone)]
pub struct SimplexGrid {
    dim: usize,
    resolution: usize,
    nodes: Vec<Vec<u32>>,
    lookup: Vec<usize>,
    lines: Vec<GridLines>,
}

/// All grid lines parallel to `e_a - e_b`, each ordered by increasing `c_a`.
#[derive(Debug, Clone)]
pub struct GridLines {
    pub a: usize,
    pub b: usize,
    pub lines: Vec<Vec<usize>>,
}

impl SimplexGrid {
    pub fn new(dim: usize, resolution: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Precondition("simplex dimension must be positive".into()));
        }
        if resolution == 0 && dim > 1 {
            return Err(Error::Precondition("grid resolution must be positive".into()));
        }
        let m = if dim == 1 { resolution.max(1) } else { resolution };
        let mut nodes = Vec::new();
        let mut current = vec![0u32; dim];
        enumerate(&mut current, 0, m as u32, &mut nodes);
        let stride = m + 1;
        let mut lookup = vec![usize::MAX; stride.pow((dim - 1) as u32)];
        for (idx, c) in nodes.iter().enumerate() {
            lookup[key(c, stride)] = idx;
        }
        let mut grid = Self { dim, resolution: m, nodes, lookup, lines: Vec::new() };
        grid.lines = grid.build_lines();
        Ok(grid)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Mesh width `1/m` along a coordinate.
    pub fn step(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn composition(&self, idx: usize) -> &[u32] {
        &self.nodes[idx]
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let m = self.resolution as f64;
        self.nodes[idx].iter().map(|&c| c as f64 / m).collect()
    }

    /// Index of the node with the given composition, if any.
    pub fn index_of(&self, c: &[u32]) -> Option<usize> {
        if c.len() != self.dim || c.iter().map(|&x| x as usize).sum::<usize>() != self.resolution {
            return None;
        }
        match self.lookup[key(c, self.resolution + 1)] {
            usize::MAX => None,
            i => Some(i),
        }
    }

    /// Nearest node by rounding `m·p` with largest-remainder correction.
    pub fn nearest(&self, p: &[f64]) -> usize {
        let m = self.resolution;
        let scaled: Vec<f64> = p.iter().map(|x| x * m as f64).collect();
        let mut c: Vec<u32> = scaled.iter().map(|x| x.floor().max(0.0) as u32).collect();
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&i, &j| {
            let ri = scaled[i] - scaled[i].floor();
            let rj = scaled[j] - scaled[j].floor();
            rj.total_cmp(&ri).then(i.cmp(&j))
        });
        let mut deficit = m as i64 - c.iter().map(|&x| x as i64).sum::<i64>();
        let mut k = 0;
        while deficit > 0 {
            c[order[k % order.len()]] += 1;
            deficit -= 1;
            k += 1;
        }
        while deficit < 0 {
            let i = (0..c.len()).max_by_key(|&i| c[i]).unwrap();
            c[i] -= 1;
            deficit += 1;
        }
        self.index_of(&c).expect("rounded composition lies on the grid")
    }

    /// True when every coordinate of the node is positive.
    pub fn is_interior(&self, idx: usize) -> bool {
        self.nodes[idx].iter().all(|&c| c > 0)
    }

    /// The neighbours `c ± (e_a - e_b)` of a node, when both exist.
    pub fn neighbours(&self, idx: usize, a: usize, b: usize) -> Option<(usize, usize)> {
        let c = &self.nodes[idx];
        if c[a] == 0 || c[b] == 0 {
            return None;
        }
        let mut plus = c.clone();
        plus[a] += 1;
        plus[b] -= 1;
        let mut minus = c.clone();
        minus[a] -= 1;
        minus[b] += 1;
        Some((self.index_of(&plus)?, self.index_of(&minus)?))
    }

    pub fn line_families(&self) -> &[GridLines] {
        &self.lines
    }

    /// Barycentric-linear interpolation weights for an arbitrary point of the
    /// simplex (Freudenthal triangulation in cumulative coordinates).
    pub fn interpolation_weights(&self, p: &[f64]) -> Vec<(usize, f64)> {
        if self.dim == 1 {
            return vec![(0, 1.0)];
        }
        let m = self.resolution;
        let d = self.dim - 1;
        let mut z = Vec::with_capacity(d);
        let mut acc = 0.0;
        for &x in &p[..d] {
            acc += x.max(0.0) * m as f64;
            let prev = z.last().copied().unwrap_or(0.0);
            z.push(acc.clamp(prev, m as f64));
        }
        let base: Vec<usize> = z.iter().map(|&v| (v.floor() as usize).min(m - 1)).collect();
        let frac: Vec<f64> = z.iter().zip(&base).map(|(v, &b)| v - b as f64).collect();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| frac[j].total_cmp(&frac[i]).then(j.cmp(&i)));

        let mut weights = Vec::with_capacity(d + 1);
        let mut vertex = base.clone();
        let push = |vertex: &[usize], w: f64, out: &mut Vec<(usize, f64)>| {
            if w > 0.0 {
                let mut c = Vec::with_capacity(d + 1);
                let mut prev = 0;
                for &v in vertex {
                    c.push((v - prev) as u32);
                    prev = v;
                }
                c.push((m - prev) as u32);
                out.push((self.index_of(&c).expect("interpolation vertex on grid"), w));
            }
        };
        push(&vertex, 1.0 - frac[order[0]], &mut weights);
        for k in 0..d {
            vertex[order[k]] += 1;
            let next = if k + 1 < d { frac[order[k + 1]] } else { 0.0 };
            push(&vertex, frac[order[k]] - next, &mut weights);
        }
        weights
    }

    fn build_lines(&self) -> Vec<GridLines> {
        let n = self.dim;
        let mut families = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let mut lines = Vec::new();
                for (idx, c) in self.nodes.iter().enumerate() {
                    // a line starts at its node with c_a = 0
                    if c[a] != 0 {
                        continue;
                    }
                    let mut line = vec![idx];
                    let mut cur = c.clone();
                    while cur[b] > 0 {
                        cur[a] += 1;
                        cur[b] -= 1;
                        line.push(self.index_of(&cur).expect("line node on grid"));
                    }
                    if line.len() >= 3 {
                        lines.push(line);
                    }
                }
                families.push(GridLines { a, b, lines });
            }
        }
        families
    }
}

fn enumerate(current: &mut Vec<u32>, pos: usize, remaining: u32, out: &mut Vec<Vec<u32>>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for c in 0..=remaining {
        current[pos] = c;
        enumerate(current, pos + 1, remaining - c, out);
    }
}

fn key(c: &[u32], stride: usize) -> usize {
    c[..c.len() - 1].iter().fold(0, |acc, &x| acc * stride + x as usize)
}

/// Product grid `grid_p × grid_q`; flat index `ip * |grid_q| + iq`.
#[derive(Debug, Clone)]
pub struct ProductGrid {
    pub p: Arc<SimplexGrid>,
    pub q: Arc<SimplexGrid>,
}

impl ProductGrid {
    pub fn new(p: SimplexGrid, q: SimplexGrid) -> Self {
        Self { p: Arc::new(p), q: Arc::new(q) }
    }

    pub fn len(&self) -> usize {
        self.p.len() * self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, ip: usize, iq: usize) -> usize {
        ip * self.q.len() + iq
    }

    pub fn split(&self, idx: usize) -> (usize, usize) {
        (idx / self.q.len(), idx % self.q.len())
    }

    /// Interpolates node values at `(p, q)`.
    pub fn interpolate(&self, values: &[f64], p: &[f64], q: &[f64]) -> f64 {
        let wp = self.p.interpolation_weights(p);
        let wq = self.q.interpolation_weights(q);
        let mut acc = 0.0;
        for &(ip, a) in &wp {
            for &(iq, b) in &wq {
                acc += a * b * values[self.index(ip, iq)];
            }
        }
        acc
    }
}

/// Values on the nodes of a product grid.
#[derive(Debug, Clone)]
pub struct GridFunction {
    pub grid: ProductGrid,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: ProductGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!("{} values on a grid of {} nodes", values.len(), grid.len())));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: ProductGrid, f: impl Fn(&[f64], &[f64]) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for ip in 0..grid.p.len() {
            let p = grid.p.point(ip);
            for iq in 0..grid.q.len() {
                values.push(f(&p, &grid.q.point(iq)));
            }
        }
        Self { grid, values }
    }

    pub fn get(&self, ip: usize, iq: usize) -> f64 {
        self.values[self.grid.index(ip, iq)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_counts() {
        assert_eq!(SimplexGrid::new(1, 10).unwrap().len(), 1);
        assert_eq!(SimplexGrid::new(2, 200).unwrap().len(), 201);
        assert_eq!(SimplexGrid::new(3, 100).unwrap().len(), 101 * 102 / 2);
        assert_eq!(SimplexGrid::new(4, 6).unwrap().len(), 84);
    }

    #[test]
    fn two_dimensional_grid_is_ordered_along_first_coordinate() {
        let g = SimplexGrid::new(2, 4).unwrap();
        let p1: Vec<f64> = (0..g.len()).map(|i| g.point(i)[0]).collect();
        assert_eq!(p1, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.line_families().len(), 1);
        assert_eq!(g.line_families()[0].lines, vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn lines_cover_every_direction() {
        let g = SimplexGrid::new(3, 5).unwrap();
        assert_eq!(g.line_families().len(), 3);
        for fam in g.line_families() {
            for line in &fam.lines {
                for w in line.windows(2) {
                    let (c0, c1) = (g.composition(w[0]), g.composition(w[1]));
                    assert_eq!(c1[fam.a], c0[fam.a] + 1);
                    assert_eq!(c1[fam.b] + 1, c0[fam.b]);
                }
            }
        }
    }

    #[test]
    fn interpolation_reproduces_affine_functions() {
        for (dim, m) in [(2, 7), (3, 6), (4, 5)] {
            let g = SimplexGrid::new(dim, m).unwrap();
            let coef: Vec<f64> = (0..dim).map(|i| 0.3 * i as f64 - 0.7).collect();
            let f = |p: &[f64]| p.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>();
            let values: Vec<f64> = (0..g.len()).map(|i| f(&g.point(i))).collect();
            let samples = [
                vec![0.13, 0.5, 0.2, 0.17],
                vec![0.0, 0.3, 0.6, 0.1],
                vec![0.25, 0.25, 0.25, 0.25],
                vec![1.0, 0.0, 0.0, 0.0],
            ];
            for s in samples {
                let mut p = s[..dim].to_vec();
                let sum: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= sum);
                let w = g.interpolation_weights(&p);
                assert!((w.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
                let v: f64 = w.iter().map(|&(i, a)| a * values[i]).sum();
                assert!((v - f(&p)).abs() < 1e-12, "dim {dim}: {v} vs {}", f(&p));
            }
        }
    }

    #[test]
    fn interpolation_is_exact_at_nodes() {
        let g = SimplexGrid::new(3, 4).unwrap();
        for i in 0..g.len() {
            let w = g.interpolation_weights(&g.point(i));
            assert_eq!(w.len(), 1);
            assert_eq!(w[0].0, i);
        }
    }

    #[test]
    fn nearest_node_round_trips() {
        let g = SimplexGrid::new(3, 10).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.nearest(&g.point(i)), i);
        }
    }
}
