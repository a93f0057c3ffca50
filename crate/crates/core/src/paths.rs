//! Sign sequences of the random walk driving the lattice, and off-lattice
//! state paths along them.
//!
//! Small trees are enumerated exhaustively, so path expectations are exact;
//! larger ones are sampled with one ChaCha stream per path, which makes
//! every statistic independent of how paths are scheduled across threads.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::fbsde::FbsdeSolution;
use crate::par;
use crate::tree::TreeProcess;

/// Trees with at most this many steps are enumerated path by path.
pub const EXHAUSTIVE_MAX_STEPS: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PathSet {
    Exhaustive { steps: usize },
    MonteCarlo { steps: usize, paths: usize, seed: u64 },
}

impl PathSet {
    /// Exhaustive when the tree is small enough, otherwise `paths` samples.
    pub fn new(steps: usize, paths: usize, seed: u64) -> Result<Self> {
        if steps == 0 {
            return invalid("a path needs at least one step");
        }
        if steps <= EXHAUSTIVE_MAX_STEPS {
            return Ok(PathSet::Exhaustive { steps });
        }
        if paths == 0 {
            return invalid("Monte Carlo needs at least one path");
        }
        Ok(PathSet::MonteCarlo { steps, paths, seed })
    }

    pub fn steps(&self) -> usize {
        match *self {
            PathSet::Exhaustive { steps } | PathSet::MonteCarlo { steps, .. } => steps,
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            PathSet::Exhaustive { steps } => 1 << steps,
            PathSet::MonteCarlo { paths, .. } => paths,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, PathSet::Exhaustive { .. })
    }

    /// Signs ξ_k ∈ {−1, +1} of path `i`.
    pub fn signs(&self, i: usize) -> Vec<f64> {
        match *self {
            PathSet::Exhaustive { steps } => (0..steps).map(|k| if (i >> k) & 1 == 1 { 1.0 } else { -1.0 }).collect(),
            PathSet::MonteCarlo { steps, seed, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let mut out = Vec::with_capacity(steps);
                while out.len() < steps {
                    let bits = rng.next_u64();
                    for b in 0..64.min(steps - out.len()) {
                        out.push(if (bits >> b) & 1 == 1 { 1.0 } else { -1.0 });
                    }
                }
                out
            }
        }
    }

    /// Evaluates `f` on every path and averages the resulting vectors.
    /// Summation runs in path order, so the result is deterministic.
    pub fn mean<const M: usize>(&self, f: impl Fn(&[f64]) -> [f64; M] + Sync + Send) -> [f64; M] {
        let values = par::map(self.len(), |i| f(&self.signs(i)));
        let mut acc = [0.0; M];
        for v in &values {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        let w = 1.0 / self.len() as f64;
        acc.map(|a| a * w)
    }

    /// Largest value of `f` over the paths.
    pub fn max(&self, f: impl Fn(&[f64]) -> f64 + Sync + Send) -> f64 {
        par::map(self.len(), |i| f(&self.signs(i))).into_iter().fold(0.0, f64::max)
    }
}

/// State path of a solved system along given signs: X_{k+1} = X_k +
/// b dt + σ ξ_k √dt with b, σ interpolated from the node values.
pub fn state_path(sol: &FbsdeSolution, signs: &[f64]) -> Vec<f64> {
    let lat = &sol.lattice;
    let (dt, sq) = (lat.dt(), lat.sqrt_dt());
    let mut x = sol.x.get(0, 0);
    let mut out = Vec::with_capacity(signs.len() + 1);
    out.push(x);
    for (k, xi) in signs.iter().enumerate() {
        let st = lat.stencil(k, x);
        x += st.apply(sol.drift.layer(k)) * dt + st.apply(sol.diffusion.layer(k)) * xi * sq;
        out.push(x);
    }
    out
}

/// Value of a node field at an off-lattice point of step `k`.
#[inline]
pub fn field_at(sol: &FbsdeSolution, field: &TreeProcess, k: usize, x: f64) -> f64 {
    sol.lattice.interp(field.layer(k), k, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_signs_cover_all_sequences() {
        let ps = PathSet::new(3, 0, 0).unwrap();
        assert_eq!(ps.len(), 8);
        let mut seen: Vec<Vec<f64>> = (0..8).map(|i| ps.signs(i)).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        seen.dedup();
        assert_eq!(seen.len(), 8);
        let m = ps.mean(|s| [s.iter().sum::<f64>(), s.iter().sum::<f64>().powi(2)]);
        assert_eq!(m, [0.0, 3.0]);
    }

    #[test]
    fn monte_carlo_is_reproducible_and_balanced() {
        let ps = PathSet::new(100, 4000, 7).unwrap();
        assert!(!ps.is_exact());
        assert_eq!(ps.signs(17), ps.signs(17));
        assert_ne!(ps.signs(17), ps.signs(18));
        let [m, v] = ps.mean(|s| {
            let w: f64 = s.iter().sum::<f64>() / 10.0;
            [w, w * w]
        });
        assert!(m.abs() < 0.05 && (v - 1.0).abs() < 0.08, "{m} {v}");
    }
}
