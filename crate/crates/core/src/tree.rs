//! Time grid, recombining Brownian tree, node-valued processes, and the
//! state lattice used by every solver.
//!
//! The state lattice places layer `k` at `x0 + scale * (2j - k) * sqrt(dt)`,
//! `j = 0..=k`, i.e. the Brownian tree mapped through an affine change of
//! variable. Fields (Y, Z, p, ...) live on lattice nodes; the one-step
//! conditional expectation at a node averages the next layer's field at the
//! two points `x + b dt ± σ sqrt(dt)`, read off by local cubic interpolation.

use serde::Serialize;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        if steps == 0 {
            return invalid("need at least one time step");
        }
        Ok(TimeGrid { horizon, steps, dt: horizon / steps as f64 })
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.dt.sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BrownianTree {
    pub grid: TimeGrid,
    sqrt_dt: f64,
}

pub fn build_tree(horizon: f64, steps: usize) -> Result<BrownianTree> {
    let grid = TimeGrid::new(horizon, steps)?;
    Ok(BrownianTree { grid, sqrt_dt: grid.sqrt_dt() })
}

impl BrownianTree {
    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn width(&self, k: usize) -> usize {
        k + 1
    }

    /// Brownian value at node (k, j).
    pub fn node(&self, k: usize, j: usize) -> f64 {
        (2.0 * j as f64 - k as f64) * self.sqrt_dt
    }

    /// Binomial probabilities of the step-k nodes.
    pub fn weights(&self, k: usize) -> Vec<f64> {
        let mut w = vec![1.0];
        for _ in 0..k {
            let mut next = vec![0.0; w.len() + 1];
            for (j, &p) in w.iter().enumerate() {
                next[j] += 0.5 * p;
                next[j + 1] += 0.5 * p;
            }
            w = next;
        }
        w
    }
}

/// A real value on every node of the tree: `k + 1` values at step `k`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TreeProcess {
    values: Vec<Vec<f64>>,
}

impl TreeProcess {
    pub fn zeros(steps: usize) -> Self {
        TreeProcess { values: (0..=steps).map(|k| vec![0.0; k + 1]).collect() }
    }

    pub fn constant(steps: usize, c: f64) -> Self {
        TreeProcess { values: (0..=steps).map(|k| vec![c; k + 1]).collect() }
    }

    pub fn from_fn(steps: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        TreeProcess { values: (0..=steps).map(|k| (0..=k).map(|j| f(k, j)).collect()).collect() }
    }

    pub fn from_layers(values: Vec<Vec<f64>>) -> Result<Self> {
        for (k, layer) in values.iter().enumerate() {
            if layer.len() != k + 1 {
                return invalid(format!("layer {k} has {} values, expected {}", layer.len(), k + 1));
            }
        }
        if values.is_empty() {
            return invalid("empty process");
        }
        Ok(TreeProcess { values })
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn layer(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn layer_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k]
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.values[k][j]
    }

    pub fn set(&mut self, k: usize, j: usize, v: f64) {
        self.values[k][j] = v;
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest |self − other| over nodes of steps `0..=upto`.
    pub fn max_diff(&self, other: &TreeProcess, upto: usize) -> f64 {
        let mut m = 0.0_f64;
        for k in 0..=upto.min(self.steps()) {
            for (a, b) in self.values[k].iter().zip(&other.values[k]) {
                m = m.max((a - b).abs());
            }
        }
        m
    }

    pub fn conditional_expectation(&self, k: usize) -> Result<Vec<f64>> {
        if k >= self.steps() {
            return invalid(format!("no step {} after step {k}", k + 1));
        }
        let next = &self.values[k + 1];
        Ok((0..=k).map(|j| 0.5 * (next[j + 1] + next[j])).collect())
    }

    pub fn martingale_coefficient(&self, k: usize, sqrt_dt: f64) -> Result<Vec<f64>> {
        if k >= self.steps() {
            return invalid(format!("no step {} after step {k}", k + 1));
        }
        let next = &self.values[k + 1];
        Ok((0..=k).map(|j| (next[j + 1] - next[j]) / (2.0 * sqrt_dt)).collect())
    }

    /// Expectation of the step-k layer under the binomial node weights.
    pub fn mean(&self, tree: &BrownianTree, k: usize) -> f64 {
        tree.weights(k).iter().zip(&self.values[k]).map(|(w, v)| w * v).sum()
    }
}

/// Interpolation weights on a lattice layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub start: usize,
    pub len: usize,
    pub w: [f64; 4],
}

impl Stencil {
    #[inline]
    pub fn apply(&self, layer: &[f64]) -> f64 {
        let s = &layer[self.start..self.start + self.len];
        let mut acc = 0.0;
        for i in 0..self.len {
            acc += self.w[i] * s[i];
        }
        acc
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    pub tree: BrownianTree,
    pub x0: f64,
    pub scale: f64,
}

impl Lattice {
    pub fn new(tree: BrownianTree, x0: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return invalid(format!("lattice scale must be positive, got {scale}"));
        }
        if !x0.is_finite() {
            return invalid("x0 must be finite");
        }
        Ok(Lattice { tree, x0, scale })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.tree.grid
    }

    pub fn steps(&self) -> usize {
        self.tree.steps()
    }

    pub fn dt(&self) -> f64 {
        self.tree.grid.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.tree.sqrt_dt()
    }

    pub fn t(&self, k: usize) -> f64 {
        self.tree.grid.t(k)
    }

    pub fn x(&self, k: usize, j: usize) -> f64 {
        self.x0 + self.scale * self.tree.node(k, j)
    }

    pub fn coords(&self) -> TreeProcess {
        TreeProcess::from_fn(self.steps(), |k, j| self.x(k, j))
    }

    /// Cubic Lagrange stencil for reading layer `k` at state `x`
    /// (lower degree when the layer has fewer than four nodes; the edge
    /// stencil is used for extrapolation).
    #[inline]
    pub fn stencil(&self, k: usize, x: f64) -> Stencil {
        let n = k + 1;
        let s = ((x - self.x0) / (self.scale * self.tree.sqrt_dt()) + k as f64) * 0.5;
        let len = n.min(4);
        if len == 1 {
            return Stencil { start: 0, len: 1, w: [1.0, 0.0, 0.0, 0.0] };
        }
        let ideal = (s - 0.5 * (len as f64 - 1.0)).round();
        let start = if ideal <= 0.0 { 0 } else { (ideal as usize).min(n - len) };
        Self::weights(s, start, len)
    }

    /// Stencil on layer `k + 1` for a child of node `(k, j)`. The window
    /// centred on the parent is kept while the child lies inside it, so the
    /// interpolant does not jump when the child moves slightly between
    /// Picard sweeps.
    #[inline]
    pub fn child_stencil(&self, k: usize, j: usize, x: f64) -> Stencil {
        let n = k + 2;
        let len = n.min(4);
        let start = j.saturating_sub(1).min(n - len);
        let s = ((x - self.x0) / (self.scale * self.tree.sqrt_dt()) + (k + 1) as f64) * 0.5;
        if s >= start as f64 && s <= (start + len - 1) as f64 {
            Self::weights(s, start, len)
        } else {
            self.stencil(k + 1, x)
        }
    }

    #[inline]
    fn weights(s: f64, start: usize, len: usize) -> Stencil {
        let u = s - start as f64;
        let mut w = [0.0; 4];
        match len {
            4 => {
                let (a, b, c, d) = (u, u - 1.0, u - 2.0, u - 3.0);
                w[0] = -b * c * d / 6.0;
                w[1] = a * c * d / 2.0;
                w[2] = -a * b * d / 2.0;
                w[3] = a * b * c / 6.0;
            }
            3 => {
                let (a, b, c) = (u, u - 1.0, u - 2.0);
                w[0] = b * c / 2.0;
                w[1] = -a * c;
                w[2] = a * b / 2.0;
            }
            _ => {
                w[0] = 1.0 - u;
                w[1] = u;
            }
        }
        Stencil { start, len, w }
    }

    #[inline]
    pub fn interp(&self, layer: &[f64], k: usize, x: f64) -> f64 {
        self.stencil(k, x).apply(layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_examples() {
        let t = build_tree(1.0, 1).unwrap();
        assert_eq!(t.node(0, 0), 0.0);
        assert_eq!((t.node(1, 0), t.node(1, 1)), (-1.0, 1.0));
        let t = build_tree(1.0, 4).unwrap();
        // (2j − k)·√dt with k = 2, √dt = 0.5
        let l: Vec<f64> = (0..=2).map(|j| t.node(2, j)).collect();
        assert_eq!(l, vec![-1.0, 0.0, 1.0]);
        let t = build_tree(2.0, 8).unwrap();
        assert_eq!(t.width(8), 9);
        for j in 0..=8 {
            assert!((t.node(8, j) - (2.0 * j as f64 - 8.0) * 0.5).abs() < 1e-15);
        }
        assert!(build_tree(0.0, 3).is_err());
        assert!(build_tree(1.0, 0).is_err());
    }

    #[test]
    fn grid_invariants() {
        let g = TimeGrid::new(1.3, 7).unwrap();
        assert!((g.dt * 7.0 - 1.3).abs() <= f64::EPSILON * 2.0);
        assert_eq!(g.t(7), 1.3);
    }

    #[test]
    fn conditional_expectation_examples() {
        let p = TreeProcess::from_layers(vec![vec![0.0], vec![4.0, 2.0]]).unwrap();
        assert_eq!(p.conditional_expectation(0).unwrap(), vec![3.0]);
        let c = TreeProcess::constant(5, 2.5);
        for k in 0..5 {
            assert!(c.conditional_expectation(k).unwrap().iter().all(|&v| v == 2.5));
        }
        let s = TreeProcess::from_layers(vec![vec![0.0], vec![-0.7, 0.7]]).unwrap();
        assert_eq!(s.conditional_expectation(0).unwrap(), vec![0.0]);
        assert!(s.conditional_expectation(1).is_err());
    }

    #[test]
    fn martingale_coefficient_examples() {
        let tree = build_tree(1.0, 16).unwrap();
        let sq = tree.sqrt_dt();
        let flat = TreeProcess::from_layers(vec![vec![0.0], vec![3.0, 3.0]]).unwrap();
        assert_eq!(flat.martingale_coefficient(0, 1.0).unwrap(), vec![0.0]);
        let b = TreeProcess::from_fn(16, |k, j| tree.node(k, j));
        for k in 0..16 {
            for v in b.martingale_coefficient(k, sq).unwrap() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
        // Y = B², Itô: Z = 2B
        let b2 = TreeProcess::from_fn(16, |k, j| tree.node(k, j).powi(2));
        for k in 0..16 {
            let z = b2.martingale_coefficient(k, sq).unwrap();
            for j in 0..=k {
                assert!((z[j] - 2.0 * tree.node(k, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn brownian_moments_are_exact() {
        let tree = build_tree(2.0, 40).unwrap();
        let b = TreeProcess::from_fn(40, |k, j| tree.node(k, j));
        let b2 = TreeProcess::from_fn(40, |k, j| tree.node(k, j).powi(2));
        assert!(b.mean(&tree, 40).abs() < 1e-13);
        assert!((b2.mean(&tree, 40) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn stencil_hits_nodes_and_reproduces_cubics() {
        let tree = build_tree(1.0, 20).unwrap();
        let lat = Lattice::new(tree, 0.3, 0.8).unwrap();
        let k = 11;
        let layer: Vec<f64> = (0..=k).map(|j| lat.x(k, j)).collect();
        let cubic = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x - 0.3 * x * x * x;
        let vals: Vec<f64> = layer.iter().map(|&x| cubic(x)).collect();
        for j in 0..=k {
            assert!((lat.interp(&vals, k, layer[j]) - vals[j]).abs() < 1e-13);
        }
        for &x in &[-3.0, -0.1, 0.3, 0.77, 2.5] {
            assert!((lat.interp(&vals, k, x) - cubic(x)).abs() < 1e-10);
        }
        // small layers drop the degree but stay exact on lines
        let line = |x: f64| 2.0 * x - 1.0;
        for k in 0..3 {
            let v: Vec<f64> = (0..=k).map(|j| line(lat.x(k, j))).collect();
            if k > 0 {
                assert!((lat.interp(&v, k, 0.123) - line(0.123)).abs() < 1e-12);
            } else {
                assert_eq!(lat.interp(&v, k, 5.0), v[0]);
            }
        }
    }
}
