//! Binary non-recombining tree for the Brownian driver, adapted processes
//! stored level by level, exact conditional expectations, and a Gaussian
//! path sampler for Monte Carlo cross-checks.
//!
//! Node `p` at level `k` has children `2p` (increment `−√Δt`) and `2p+1`
//! (increment `+√Δt`). The bits of a leaf index, most significant first,
//! spell out its path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_DEPTH: usize = 14;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScenarioTree {
    depth: usize,
    t_final: f64,
    dt: f64,
    sqrt_dt: f64,
    seed: u64,
}

pub fn build_tree(depth: usize, t_final: f64, seed: u64) -> Result<ScenarioTree> {
    ScenarioTree::new(depth, t_final, seed)
}

impl ScenarioTree {
    pub fn new(depth: usize, t_final: f64, seed: u64) -> Result<Self> {
        if !(1..=MAX_DEPTH).contains(&depth) {
            return Err(Error::TreeDepth(depth));
        }
        if !(t_final > 0.0) {
            return Err(Error::InvalidParameter(format!("T = {t_final}")));
        }
        let dt = t_final / depth as f64;
        Ok(Self {
            depth,
            t_final,
            dt,
            sqrt_dt: dt.sqrt(),
            seed,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_final * k as f64 / self.depth as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.depth).map(|k| self.time(k)).collect()
    }

    pub fn level_size(k: usize) -> usize {
        1 << k
    }

    pub fn probability(k: usize) -> f64 {
        0.5f64.powi(k as i32)
    }

    /// Increment on the edge into node `q` (at any level ≥ 1).
    pub fn increment(&self, q: usize) -> f64 {
        if q & 1 == 1 {
            self.sqrt_dt
        } else {
            -self.sqrt_dt
        }
    }

    /// Global id of node `(k, p)` in breadth-first order.
    pub fn node_id(k: usize, p: usize) -> usize {
        (1 << k) - 1 + p
    }

    /// Brownian motion at tree nodes, levels `0..=M`.
    pub fn brownian(&self) -> AdaptedProcess {
        let mut w = AdaptedProcess::zeros(1, 0, self.depth);
        for k in 1..=self.depth {
            let (prev, cur) = w.split_levels(k - 1);
            for (q, c) in cur.iter_mut().enumerate() {
                *c = prev[q >> 1] + self.increment(q);
            }
        }
        w
    }

    /// `ΔW_k` stored at level-`k+1` nodes, for `k = 0..M−1` (levels `1..=M`).
    pub fn increments(&self) -> AdaptedProcess {
        let mut d = AdaptedProcess::zeros(1, 1, self.depth);
        for k in 1..=self.depth {
            for (q, c) in d.level_mut(k).iter_mut().enumerate() {
                *c = self.increment(q);
            }
        }
        d
    }

    /// Every leaf path as a bit vector (1 = up), in leaf-index order.
    pub fn enumerate_paths(&self) -> Vec<Vec<bool>> {
        let m = self.depth;
        (0..1usize << m)
            .map(|p| (0..m).map(|j| (p >> (m - 1 - j)) & 1 == 1).collect())
            .collect()
    }
}

/// Grid- or scalar-valued process on tree levels `first..=last`; each node
/// stores `width` values. Values at a node are indexed by its path alone.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    width: usize,
    first: usize,
    levels: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn zeros(width: usize, first: usize, last: usize) -> Self {
        Self {
            width,
            first,
            levels: (first..=last).map(|k| vec![0.0; width << k]).collect(),
        }
    }

    /// Builds level `k` node `p` from `f(k, p, out)`.
    pub fn from_fn(
        width: usize,
        first: usize,
        last: usize,
        mut f: impl FnMut(usize, usize, &mut [f64]),
    ) -> Self {
        let mut x = Self::zeros(width, first, last);
        for k in first..=last {
            for (p, chunk) in x.level_mut(k).chunks_mut(width).enumerate() {
                f(k, p, chunk);
            }
        }
        x
    }

    /// Same values at every node of a level.
    pub fn deterministic(
        width: usize,
        first: usize,
        last: usize,
        f: impl Fn(usize) -> Vec<f64>,
    ) -> Self {
        Self::from_fn(width, first, last, |k, _, out| out.copy_from_slice(&f(k)))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn first_level(&self) -> usize {
        self.first
    }

    pub fn last_level(&self) -> usize {
        self.first + self.levels.len() - 1
    }

    pub fn has_levels(&self, first: usize, last: usize) -> bool {
        self.first == first && self.last_level() == last
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k - self.first]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.levels[k - self.first]
    }

    pub fn node(&self, k: usize, p: usize) -> &[f64] {
        &self.level(k)[p * self.width..(p + 1) * self.width]
    }

    pub fn node_mut(&mut self, k: usize, p: usize) -> &mut [f64] {
        let w = self.width;
        &mut self.level_mut(k)[p * w..(p + 1) * w]
    }

    /// Level `k` immutably and level `k+1` mutably.
    pub fn split_levels(&mut self, k: usize) -> (&[f64], &mut [f64]) {
        let (a, b) = self.levels.split_at_mut(k + 1 - self.first);
        (&a[k - self.first], &mut b[0])
    }

    /// Level `k` mutably and level `k+1` immutably.
    pub fn split_levels_back(&mut self, k: usize) -> (&mut [f64], &[f64]) {
        let (a, b) = self.levels.split_at_mut(k + 1 - self.first);
        (&mut a[k - self.first], &b[0])
    }

    pub fn levels_iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.levels
            .iter()
            .enumerate()
            .map(move |(j, v)| (self.first + j, v.as_slice()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            first: self.first,
            levels: self
                .levels
                .iter()
                .map(|l| l.iter().map(|&v| f(v)).collect())
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width
            && self.first == other.first
            && self.levels.len() == other.levels.len()
    }

    pub fn max_abs(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| l.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn check_level(&self, k: usize) -> Result<()> {
        if k < self.first || k > self.last_level() {
            return Err(Error::Shape(format!(
                "level {k} outside {}..={}",
                self.first,
                self.last_level()
            )));
        }
        Ok(())
    }

    /// `E[X_k]`, one value per component.
    pub fn expectation(&self, k: usize) -> Result<Vec<f64>> {
        self.check_level(k)?;
        let prob = ScenarioTree::probability(k);
        let mut out = vec![0.0; self.width];
        for node in self.level(k).chunks(self.width) {
            for (o, v) in out.iter_mut().zip(node) {
                *o += prob * v;
            }
        }
        Ok(out)
    }

    /// `E[X_{k+1} | F_k]` at every level-`k` node, laid out like level `k`.
    pub fn conditional_expectation(&self, k: usize) -> Result<Vec<f64>> {
        self.check_level(k + 1)?;
        let w = self.width;
        let next = self.level(k + 1);
        let mut out = vec![0.0; w << k];
        for (p, o) in out.chunks_mut(w).enumerate() {
            let (a, b) = (
                &next[2 * p * w..(2 * p + 1) * w],
                &next[(2 * p + 1) * w..(2 * p + 2) * w],
            );
            for i in 0..w {
                o[i] = 0.5 * (a[i] + b[i]);
            }
        }
        Ok(out)
    }

    /// `E[X_{k+1} | F_k]` at a single node `p` of level `k`.
    pub fn conditional_expectation_at(&self, k: usize, p: usize) -> Result<Vec<f64>> {
        self.check_level(k + 1)?;
        if p >= ScenarioTree::level_size(k) {
            return Err(Error::Shape(format!("node {p} outside level {k}")));
        }
        let (a, b) = (self.node(k + 1, 2 * p), self.node(k + 1, 2 * p + 1));
        Ok(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect())
    }
}

/// Max over tree edges of `|Δ(ab) − (aΔb + bΔa + ΔaΔb)|`, for scalar processes on levels `0..=M`.
pub fn ito_product_residual(a: &AdaptedProcess, b: &AdaptedProcess) -> Result<f64> {
    if !a.same_shape(b) || a.width() != 1 || a.first_level() != 0 {
        return Err(Error::Shape(
            "scalar processes on levels 0..=M required".into(),
        ));
    }
    let mut worst = 0.0f64;
    for k in 0..a.last_level() {
        let (a0, a1, b0, b1) = (a.level(k), a.level(k + 1), b.level(k), b.level(k + 1));
        for q in 0..a1.len() {
            let (pa, pb) = (a0[q >> 1], b0[q >> 1]);
            let (da, db) = (a1[q] - pa, b1[q] - pb);
            let lhs = a1[q] * b1[q] - pa * pb;
            let rhs = pa * db + pb * da + da * db;
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(worst)
}

/// Max over levels of `|E[X_{k+1} | F_k] − X_k|` for a scalar process.
pub fn martingale_residual(x: &AdaptedProcess) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in x.first_level()..x.last_level() {
        let ce = x.conditional_expectation(k)?;
        for (c, v) in ce.iter().zip(x.level(k)) {
            worst = worst.max((c - v).abs());
        }
    }
    Ok(worst)
}

/// `Σ_{j<k} g_j ΔW_j` on levels `0..=M`, for scalar `g` on levels `0..M−1`.
pub fn stochastic_integral(tree: &ScenarioTree, g: &AdaptedProcess) -> Result<AdaptedProcess> {
    let m = tree.depth();
    if !g.has_levels(0, m - 1) || g.width() != 1 {
        return Err(Error::Shape(
            "integrand must be scalar on levels 0..M-1".into(),
        ));
    }
    let mut out = AdaptedProcess::zeros(1, 0, m);
    for k in 0..m {
        let gk = g.level(k).to_vec();
        let (prev, cur) = out.split_levels(k);
        for (q, c) in cur.iter_mut().enumerate() {
            *c = prev[q >> 1] + gk[q >> 1] * tree.increment(q);
        }
    }
    Ok(out)
}

/// `|E[(Σ g ΔW)²] − E[Σ g² Δt]|` relative to the right side.
pub fn isometry_residual(tree: &ScenarioTree, g: &AdaptedProcess) -> Result<f64> {
    let m = tree.depth();
    let integral = stochastic_integral(tree, g)?;
    let lhs = integral.map(|v| v * v).expectation(m)?[0];
    let mut rhs = 0.0;
    for k in 0..m {
        rhs += tree.dt() * g.map(|v| v * v).expectation(k)?[0];
    }
    Ok(if rhs == 0.0 {
        lhs.abs()
    } else {
        (lhs - rhs).abs() / rhs
    })
}

/// `n_paths` i.i.d. Gaussian increment paths `N(0, Δt)` of length `M`.
pub fn sample_paths(
    depth: usize,
    t_final: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter("n_paths must be >= 1".into()));
    }
    let dt = t_final / depth as f64;
    let normal = Normal::new(0.0, dt.sqrt()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_paths)
        .map(|_| (0..depth).map(|_| normal.sample(&mut rng)).collect())
        .collect())
}
