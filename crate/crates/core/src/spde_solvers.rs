//! Forward controlled heat equation and its backward adjoint on the tree.
//!
//! Forward step on every edge `(k, p) → (k+1, q)`:
//! `(I − Δt D_h²) y_{k+1} = y_k + Δt(f(y_k) + χu_k + F_k) + (g(y_k) + v_k) ΔW_k`.
//!
//! The backward step is the exact transpose of the linear forward step:
//! with `ξ = z_{k+1} − Δt p_{k+1}` and `S = (I − Δt D_h²)^{-1}`,
//! `z_k = S E_k[ξ]` and `Z_k = S E_k[ξ ΔW_k] / Δt`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Region};
use crate::scenario_tree::{sample_paths, AdaptedProcess, ScenarioTree};

/// Factorized `I − Δt D_h²` with homogeneous Dirichlet data.
#[derive(Debug, Clone)]
pub struct HeatStep {
    n: usize,
    diag: f64,
    off: f64,
    /// Modified super-diagonal `c'_i` and pivots `b − a c'_{i−1}`.
    cprime: Vec<f64>,
    pivot: Vec<f64>,
}

impl HeatStep {
    pub fn new(n: usize, h: f64, dt: f64) -> Self {
        let r = dt / (h * h);
        let diag = 1.0 + 2.0 * r;
        let off = -r;
        let mut cprime = vec![0.0; n];
        let mut pivot = vec![0.0; n];
        pivot[0] = diag;
        cprime[0] = off / diag;
        for i in 1..n {
            pivot[i] = diag - off * cprime[i - 1];
            cprime[i] = off / pivot[i];
        }
        // Strict diagonal dominance keeps every pivot above 1.
        assert!(
            pivot.iter().all(|&p| p >= 1.0),
            "heat step matrix lost definiteness"
        );
        Self {
            n,
            diag,
            off,
            cprime,
            pivot,
        }
    }

    pub fn for_mesh(mesh: &Mesh, tree: &ScenarioTree) -> Self {
        Self::new(mesh.n(), mesh.h(), tree.dt())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Overwrites `rhs` with `S rhs`.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = self.n;
        rhs[0] /= self.pivot[0];
        for i in 1..n {
            rhs[i] = (rhs[i] - self.off * rhs[i - 1]) / self.pivot[i];
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.cprime[i] * rhs[i + 1];
        }
    }

    /// `(I − Δt D_h²) x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                let mut v = self.diag * x[i];
                if i > 0 {
                    v += self.off * x[i - 1];
                }
                if i + 1 < n {
                    v += self.off * x[i + 1];
                }
                v
            })
            .collect()
    }
}

/// Pointwise map `(x, y) ↦ value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PointwiseMap {
    Zero,
    /// `γ y`
    Linear {
        gamma: f64,
    },
    /// `a sin(y)`
    Sine {
        amplitude: f64,
    },
}

impl PointwiseMap {
    pub fn eval(&self, _x: f64, y: f64) -> f64 {
        match *self {
            PointwiseMap::Zero => 0.0,
            PointwiseMap::Linear { gamma } => gamma * y,
            PointwiseMap::Sine { amplitude } => amplitude * y.sin(),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            PointwiseMap::Zero => 0.0,
            PointwiseMap::Linear { gamma } => gamma.abs(),
            PointwiseMap::Sine { amplitude } => amplitude.abs(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.lipschitz() == 0.0
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, PointwiseMap::Sine { .. })
    }
}

/// Drift `f`, diffusion `g`, a common Lipschitz bound, and vanishing-at-zero flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonlinearitySpec {
    pub drift: PointwiseMap,
    pub diffusion: PointwiseMap,
    pub lipschitz: f64,
    pub drift_vanishes: bool,
    pub diffusion_vanishes: bool,
}

impl NonlinearitySpec {
    pub fn new(drift: PointwiseMap, diffusion: PointwiseMap) -> Self {
        Self {
            drift,
            diffusion,
            lipschitz: drift.lipschitz().max(diffusion.lipschitz()),
            drift_vanishes: true,
            diffusion_vanishes: true,
        }
    }

    pub fn zero() -> Self {
        Self::new(PointwiseMap::Zero, PointwiseMap::Zero)
    }

    pub fn is_linear(&self) -> bool {
        self.drift.is_linear() && self.diffusion.is_linear()
    }

    pub fn is_zero(&self) -> bool {
        self.drift.is_zero() && self.diffusion.is_zero()
    }

    /// Randomized probe of the Lipschitz bound and the zero flags.
    pub fn validate(&self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, map, vanishes) in [
            ("drift", self.drift, self.drift_vanishes),
            ("diffusion", self.diffusion, self.diffusion_vanishes),
        ] {
            for _ in 0..2000 {
                let x: f64 = rng.random();
                let a: f64 = rng.random_range(-10.0..10.0);
                let b: f64 = rng.random_range(-10.0..10.0);
                if a == b {
                    continue;
                }
                let ratio = (map.eval(x, a) - map.eval(x, b)).abs() / (a - b).abs();
                if ratio > self.lipschitz * (1.0 + 1e-9) {
                    return Err(Error::Nonlinearity(format!(
                        "{name} Lipschitz ratio {ratio} exceeds L = {}",
                        self.lipschitz
                    )));
                }
                if vanishes && map.eval(x, 0.0) != 0.0 {
                    return Err(Error::Nonlinearity(format!("{name}(x, 0) != 0 at x = {x}")));
                }
            }
        }
        Ok(())
    }
}

/// Inputs of the forward equation. Processes `source`, `u`, `v` live on
/// levels `0..M−1` with one value per primal node; `u` is masked by `χ_{G0}`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardSystemSpec<'a> {
    pub mesh: &'a Mesh,
    pub tree: &'a ScenarioTree,
    pub y0: &'a [f64],
    pub source: Option<&'a AdaptedProcess>,
    pub u: Option<&'a AdaptedProcess>,
    pub v: Option<&'a AdaptedProcess>,
    pub nonlinearity: Option<&'a NonlinearitySpec>,
}

impl<'a> ForwardSystemSpec<'a> {
    pub fn new(mesh: &'a Mesh, tree: &'a ScenarioTree, y0: &'a [f64]) -> Self {
        Self {
            mesh,
            tree,
            y0,
            source: None,
            u: None,
            v: None,
            nonlinearity: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.mesh.n(), self.tree.depth());
        if self.y0.len() != n {
            return Err(Error::Shape(format!(
                "y0 has {} values, mesh has {n}",
                self.y0.len()
            )));
        }
        for (name, p) in [("source", self.source), ("u", self.u), ("v", self.v)] {
            if let Some(p) = p {
                if p.width() != n || !p.has_levels(0, m - 1) {
                    return Err(Error::Shape(format!(
                        "{name} must have width {n} on levels 0..{}",
                        m - 1
                    )));
                }
            }
        }
        Ok(())
    }

    fn is_linear(&self) -> bool {
        self.nonlinearity.is_none_or(|nl| nl.is_linear())
    }
}

fn node_or_zero<'b>(
    p: Option<&'b AdaptedProcess>,
    k: usize,
    node: usize,
    zeros: &'b [f64],
) -> &'b [f64] {
    p.map_or(zeros, |p| p.node(k, node))
}

/// Drift-implicit Euler–Maruyama across the whole tree; levels `0..=M`.
pub fn solve_forward(spec: &ForwardSystemSpec, step: &HeatStep) -> Result<AdaptedProcess> {
    spec.validate()?;
    let (n, m) = (spec.mesh.n(), spec.tree.depth());
    let dt = spec.tree.dt();
    let sq = spec.tree.sqrt_dt();
    let chi = spec.mesh.indicator(Region::G0);
    let x = spec.mesh.primal_nodes();
    let zeros = vec![0.0; n];
    let mut y = AdaptedProcess::zeros(n, 0, m);
    y.level_mut(0).copy_from_slice(spec.y0);
    for k in 0..m {
        let (prev, cur) = y.split_levels(k);
        cur.par_chunks_mut(2 * n).enumerate().for_each(|(p, pair)| {
            let yk = &prev[p * n..(p + 1) * n];
            let f = node_or_zero(spec.source, k, p, &zeros);
            let u = node_or_zero(spec.u, k, p, &zeros);
            let v = node_or_zero(spec.v, k, p, &zeros);
            let (lo, hi) = pair.split_at_mut(n);
            for i in 0..n {
                let (drift, diffusion) = match spec.nonlinearity {
                    Some(nl) => (nl.drift.eval(x[i], yk[i]), nl.diffusion.eval(x[i], yk[i])),
                    None => (0.0, 0.0),
                };
                let base = yk[i] + dt * (drift + chi[i] * u[i] + f[i]);
                let noise = (diffusion + v[i]) * sq;
                lo[i] = base - noise;
                hi[i] = base + noise;
            }
            step.solve_in_place(lo);
            step.solve_in_place(hi);
        });
    }
    Ok(y)
}

/// Terminal datum `q` (width N on level M alone) and source `p` (levels `1..=M`).
#[derive(Debug, Clone, Copy)]
pub struct BackwardSystemSpec<'a> {
    pub mesh: &'a Mesh,
    pub tree: &'a ScenarioTree,
    pub terminal: &'a AdaptedProcess,
    pub source: Option<&'a AdaptedProcess>,
}

impl BackwardSystemSpec<'_> {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.mesh.n(), self.tree.depth());
        if self.terminal.width() != n || !self.terminal.has_levels(m, m) {
            return Err(Error::Shape(format!(
                "terminal datum must have width {n} on level {m}"
            )));
        }
        if let Some(p) = self.source {
            if p.width() != n || !p.has_levels(1, m) {
                return Err(Error::Shape(format!(
                    "backward source must have width {n} on levels 1..={m}"
                )));
            }
        }
        Ok(())
    }
}

/// `z` on levels `0..=M`, `Z` on levels `0..M−1`.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub z: AdaptedProcess,
    pub zz: AdaptedProcess,
}

pub fn solve_backward(spec: &BackwardSystemSpec, step: &HeatStep) -> Result<BackwardSolution> {
    spec.validate()?;
    let (n, m) = (spec.mesh.n(), spec.tree.depth());
    let dt = spec.tree.dt();
    let inv = 1.0 / (2.0 * spec.tree.sqrt_dt());
    let mut z = AdaptedProcess::zeros(n, 0, m);
    let mut zz = AdaptedProcess::zeros(n, 0, m - 1);
    z.level_mut(m).copy_from_slice(spec.terminal.level(m));
    for k in (0..m).rev() {
        let zk_hedge = zz.level_mut(k);
        let (zk, next) = z.split_levels_back(k);
        let src = spec.source.map(|p| p.level(k + 1));
        zk.par_chunks_mut(n)
            .zip(zk_hedge.par_chunks_mut(n))
            .enumerate()
            .for_each(|(p, (out, hedge))| {
                let (a, b) = (
                    &next[2 * p * n..(2 * p + 1) * n],
                    &next[(2 * p + 1) * n..(2 * p + 2) * n],
                );
                for i in 0..n {
                    let (mut xa, mut xb) = (a[i], b[i]);
                    if let Some(src) = src {
                        xa -= dt * src[2 * p * n + i];
                        xb -= dt * src[(2 * p + 1) * n + i];
                    }
                    out[i] = 0.5 * (xa + xb);
                    hedge[i] = (xb - xa) * inv;
                }
                step.solve_in_place(out);
                step.solve_in_place(hedge);
            });
    }
    Ok(BackwardSolution { z, zz })
}

/// Max over edges of `|S ξ_{k+1} − z_k − Z_k ΔW_k|` relative to `max|z|`:
/// the scheme's martingale representation, exact on a binary tree.
pub fn representation_residual(
    spec: &BackwardSystemSpec,
    sol: &BackwardSolution,
    step: &HeatStep,
) -> f64 {
    let (n, m) = (spec.mesh.n(), spec.tree.depth());
    let dt = spec.tree.dt();
    let mut worst = 0.0f64;
    for k in 0..m {
        for q in 0..1usize << (k + 1) {
            let mut xi = sol.z.node(k + 1, q).to_vec();
            if let Some(src) = spec.source {
                for (x, s) in xi.iter_mut().zip(src.node(k + 1, q)) {
                    *x -= dt * s;
                }
            }
            step.solve_in_place(&mut xi);
            let (zk, hk) = (sol.z.node(k, q >> 1), sol.zz.node(k, q >> 1));
            let dw = spec.tree.increment(q);
            for i in 0..n {
                worst = worst.max((xi[i] - zk[i] - hk[i] * dw).abs());
            }
        }
    }
    let scale = sol.z.max_abs();
    if scale == 0.0 {
        worst
    } else {
        worst / scale
    }
}

/// `E⟨a_k, b_k⟩_h` at level `k`; `(signed, absolute)` sums.
fn level_pairing(a: &[f64], b: &[f64], k: usize, n: usize, h: f64) -> (f64, f64) {
    let prob = ScenarioTree::probability(k);
    let mut s = 0.0;
    let mut abs = 0.0;
    for (na, nb) in a.chunks(n).zip(b.chunks(n)) {
        let d: f64 = na.iter().zip(nb).map(|(x, y)| x * y).sum();
        s += prob * h * d;
        abs += prob * h * d.abs();
    }
    (s, abs)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DualityReport {
    /// `E⟨y_M, q⟩ − ⟨y_0, z_0⟩`
    pub lhs: f64,
    /// `Σ Δt E[⟨y_{k+1}, p_{k+1}⟩ + ⟨F_k + χu_k, z_k⟩ + ⟨v_k, Z_k⟩]`
    pub rhs: f64,
    pub scale: f64,
    pub residual: f64,
}

/// Relative defect of the discrete duality identity for a linear forward spec.
pub fn duality_residual(
    fwd: &ForwardSystemSpec,
    y: &AdaptedProcess,
    bwd: &BackwardSystemSpec,
    sol: &BackwardSolution,
) -> Result<DualityReport> {
    fwd.validate()?;
    bwd.validate()?;
    if !fwd.is_linear() || fwd.nonlinearity.is_some_and(|nl| !nl.is_zero()) {
        return Err(Error::Shape(
            "duality needs the linear scheme without f, g".into(),
        ));
    }
    if fwd.mesh.n() != bwd.mesh.n() || fwd.tree.depth() != bwd.tree.depth() {
        return Err(Error::Shape(
            "forward and backward discretizations differ".into(),
        ));
    }
    let (n, m, h, dt) = (fwd.mesh.n(), fwd.tree.depth(), fwd.mesh.h(), fwd.tree.dt());
    let chi = fwd.mesh.indicator(Region::G0);
    let (a, aa) = level_pairing(y.level(m), bwd.terminal.level(m), m, n, h);
    let (b, bb) = level_pairing(y.level(0), sol.z.level(0), 0, n, h);
    let lhs = a - b;
    let mut scale = aa + bb;
    let mut rhs = 0.0;
    for k in 0..m {
        if let Some(p) = bwd.source {
            let (s, sa) = level_pairing(y.level(k + 1), p.level(k + 1), k + 1, n, h);
            rhs += dt * s;
            scale += dt * sa;
        }
        let mut drive = vec![0.0; n << k];
        if let Some(f) = fwd.source {
            for (d, v) in drive.iter_mut().zip(f.level(k)) {
                *d += v;
            }
        }
        if let Some(u) = fwd.u {
            for (j, (d, v)) in drive.iter_mut().zip(u.level(k)).enumerate() {
                *d += chi[j % n] * v;
            }
        }
        let (s, sa) = level_pairing(&drive, sol.z.level(k), k, n, h);
        rhs += dt * s;
        scale += dt * sa;
        if let Some(v) = fwd.v {
            let (s, sa) = level_pairing(v.level(k), sol.zz.level(k), k, n, h);
            rhs += dt * s;
            scale += dt * sa;
        }
    }
    let defect = (lhs - rhs).abs();
    Ok(DualityReport {
        lhs,
        rhs,
        scale,
        residual: if scale == 0.0 { defect } else { defect / scale },
    })
}

/// `E‖y_k‖²_h` for each level.
pub fn second_moments(y: &AdaptedProcess, h: f64) -> Vec<f64> {
    y.levels_iter()
        .map(|(k, lvl)| {
            let prob = ScenarioTree::probability(k);
            lvl.chunks(y.width())
                .map(|node| prob * h * node.iter().map(|v| v * v).sum::<f64>())
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MonteCarloReport {
    pub tree_value: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub within_band: bool,
}

/// Compares the tree value of `E‖y_M‖²_h` with a Gaussian-driver simulation.
/// Inputs must be deterministic (identical across the nodes of a level).
pub fn monte_carlo_check(
    spec: &ForwardSystemSpec,
    step: &HeatStep,
    n_paths: usize,
    seed: u64,
) -> Result<MonteCarloReport> {
    spec.validate()?;
    if n_paths < 100 {
        return Err(Error::InvalidParameter(format!(
            "n_paths = {n_paths} < 100"
        )));
    }
    if !spec.is_linear() {
        return Err(Error::InvalidParameter(
            "Monte Carlo comparison needs linear f, g".into(),
        ));
    }
    for p in [spec.source, spec.u, spec.v].into_iter().flatten() {
        for (k, lvl) in p.levels_iter() {
            let first = p.node(k, 0);
            if lvl.chunks(p.width()).any(|c| c != first) {
                return Err(Error::InvalidParameter(
                    "Monte Carlo inputs must be deterministic".into(),
                ));
            }
        }
    }
    let (n, m, h, dt) = (
        spec.mesh.n(),
        spec.tree.depth(),
        spec.mesh.h(),
        spec.tree.dt(),
    );
    let tree_value = *second_moments(&solve_forward(spec, step)?, h)
        .last()
        .unwrap_or(&0.0);
    let chi = spec.mesh.indicator(Region::G0);
    let x = spec.mesh.primal_nodes();
    let zeros = vec![0.0; n];
    let paths = sample_paths(m, spec.tree.t_final(), n_paths, seed)?;
    let samples: Vec<f64> = paths
        .par_iter()
        .map(|incs| {
            let mut y = spec.y0.to_vec();
            for (k, &dw) in incs.iter().enumerate() {
                let f = node_or_zero(spec.source, k, 0, &zeros);
                let u = node_or_zero(spec.u, k, 0, &zeros);
                let v = node_or_zero(spec.v, k, 0, &zeros);
                for i in 0..n {
                    let (drift, diffusion) = match spec.nonlinearity {
                        Some(nl) => (nl.drift.eval(x[i], y[i]), nl.diffusion.eval(x[i], y[i])),
                        None => (0.0, 0.0),
                    };
                    y[i] += dt * (drift + chi[i] * u[i] + f[i]) + (diffusion + v[i]) * dw;
                }
                step.solve_in_place(&mut y);
            }
            h * y.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    let np = n_paths as f64;
    let estimate = samples.iter().sum::<f64>() / np;
    let var = samples.iter().map(|s| (s - estimate).powi(2)).sum::<f64>() / (np - 1.0);
    let std_error = (var / np).sqrt();
    let gap = (estimate - tree_value).abs();
    let within_band = gap <= 3.0 * std_error + 1e-12 * tree_value.abs().max(1e-300);
    Ok(MonteCarloReport {
        tree_value,
        estimate,
        std_error,
        n_paths,
        within_band,
    })
}

/// CSV dump: node id, level, time, path bits, nodewise `‖y‖²_h`.
pub fn write_trajectory_csv(
    out: impl Write,
    tree: &ScenarioTree,
    y: &AdaptedProcess,
    h: f64,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node_id", "level", "time", "path_bits", "norm_sq"])?;
    for (k, lvl) in y.levels_iter() {
        for (p, node) in lvl.chunks(y.width()).enumerate() {
            let bits: String = (0..k)
                .map(|j| {
                    if (p >> (k - 1 - j)) & 1 == 1 {
                        '1'
                    } else {
                        '0'
                    }
                })
                .collect();
            let norm = h * node.iter().map(|v| v * v).sum::<f64>();
            w.write_record([
                ScenarioTree::node_id(k, p).to_string(),
                k.to_string(),
                tree.time(k).to_string(),
                bits,
                norm.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, Regions};
    use crate::scenario_tree::build_tree;
    use rand_distr::StandardNormal;

    fn setup(n: usize, m: usize) -> (Mesh, ScenarioTree, HeatStep) {
        let mesh = build_mesh(n, Regions::default()).unwrap();
        let tree = build_tree(m, 0.9, 1).unwrap();
        let step = HeatStep::for_mesh(&mesh, &tree);
        (mesh, tree, step)
    }

    fn random_process(rng: &mut ChaCha8Rng, n: usize, first: usize, last: usize) -> AdaptedProcess {
        AdaptedProcess::from_fn(n, first, last, |_, _, out| {
            for o in out {
                *o = rng.sample(StandardNormal);
            }
        })
    }

    #[test]
    fn thomas_inverts_operator() {
        let step = HeatStep::new(12, 1.0 / 13.0, 0.1);
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut b = step.apply(&x);
        step.solve_in_place(&mut b);
        for (a, c) in b.iter().zip(&x) {
            assert!((a - c).abs() < 1e-13);
        }
    }

    #[test]
    fn step_operator_is_symmetric() {
        let step = HeatStep::new(9, 0.1, 0.05);
        let y: Vec<f64> = (0..9).map(|i| (i as f64).cos()).collect();
        let z: Vec<f64> = (0..9).map(|i| (1.3 * i as f64).sin()).collect();
        let (mut sy, mut sz) = (y.clone(), z.clone());
        step.solve_in_place(&mut sy);
        step.solve_in_place(&mut sz);
        let a: f64 = sy.iter().zip(&z).map(|(p, q)| p * q).sum();
        let b: f64 = y.iter().zip(&sz).map(|(p, q)| p * q).sum();
        assert!((a - b).abs() <= 1e-13);
    }

    #[test]
    fn zero_data_gives_zero_state() {
        let (mesh, tree, step) = setup(8, 4);
        let y0 = vec![0.0; 8];
        let y = solve_forward(&ForwardSystemSpec::new(&mesh, &tree, &y0), &step).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn sine_mode_decays_geometrically() {
        let (mesh, tree, step) = setup(15, 6);
        let pi = std::f64::consts::PI;
        let h = mesh.h();
        let y0: Vec<f64> = mesh.primal_nodes().iter().map(|x| (pi * x).sin()).collect();
        let y = solve_forward(&ForwardSystemSpec::new(&mesh, &tree, &y0), &step).unwrap();
        let lam = 4.0 / (h * h) * (pi * h / 2.0).sin().powi(2);
        for k in 0..=6 {
            let factor = (1.0 + tree.dt() * lam).powi(-(k as i32));
            for node in y.level(k).chunks(15) {
                for (a, b) in node.iter().zip(&y0) {
                    assert!((a - factor * b).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn unit_noise_has_zero_mean() {
        let (mesh, tree, step) = setup(8, 5);
        let y0 = vec![0.0; 8];
        let v = AdaptedProcess::deterministic(8, 0, 4, |_| vec![1.0; 8]);
        let mut spec = ForwardSystemSpec::new(&mesh, &tree, &y0);
        spec.v = Some(&v);
        let y = solve_forward(&spec, &step).unwrap();
        for k in 0..=5 {
            assert!(y.expectation(k).unwrap().iter().all(|e| e.abs() < 1e-15));
        }
    }

    #[test]
    fn forward_is_linear() {
        let (mesh, tree, step) = setup(8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ya: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let yb: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let (fa, fb) = (
            random_process(&mut rng, 8, 0, 4),
            random_process(&mut rng, 8, 0, 4),
        );
        let (va, vb) = (
            random_process(&mut rng, 8, 0, 4),
            random_process(&mut rng, 8, 0, 4),
        );
        let run = |y0: &[f64], f: &AdaptedProcess, v: &AdaptedProcess| {
            let mut spec = ForwardSystemSpec::new(&mesh, &tree, y0);
            spec.source = Some(f);
            spec.u = Some(f);
            spec.v = Some(v);
            solve_forward(&spec, &step).unwrap()
        };
        let sum_y: Vec<f64> = ya.iter().zip(&yb).map(|(a, b)| a + 2.0 * b).collect();
        let comb = |a: &AdaptedProcess, b: &AdaptedProcess| {
            AdaptedProcess::from_fn(8, 0, 4, |k, p, out| {
                for i in 0..8 {
                    out[i] = a.node(k, p)[i] + 2.0 * b.node(k, p)[i];
                }
            })
        };
        let whole = run(&sum_y, &comb(&fa, &fb), &comb(&va, &vb));
        let (pa, pb) = (run(&ya, &fa, &va), run(&yb, &fb, &vb));
        for k in 0..=5 {
            for ((w, a), b) in whole.level(k).iter().zip(pa.level(k)).zip(pb.level(k)) {
                assert!((w - a - 2.0 * b).abs() <= 1e-12 * (1.0 + w.abs()));
            }
        }
    }

    #[test]
    fn backward_trivial_cases() {
        let (mesh, tree, step) = setup(8, 4);
        let q = AdaptedProcess::zeros(8, 4, 4);
        let spec = BackwardSystemSpec {
            mesh: &mesh,
            tree: &tree,
            terminal: &q,
            source: None,
        };
        let sol = solve_backward(&spec, &step).unwrap();
        assert_eq!(sol.z.max_abs() + sol.zz.max_abs(), 0.0);

        let det =
            AdaptedProcess::deterministic(8, 4, 4, |_| (0..8).map(|i| (i as f64).sin()).collect());
        let spec = BackwardSystemSpec {
            terminal: &det,
            ..spec
        };
        let sol = solve_backward(&spec, &step).unwrap();
        assert!(sol.zz.max_abs() < 1e-15);
        let mut expect = det.node(4, 0).to_vec();
        for _ in 0..4 {
            step.solve_in_place(&mut expect);
        }
        for (a, b) in sol.z.node(0, 0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_representation_is_exact() {
        let (mesh, tree, step) = setup(8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_process(&mut rng, 8, 6, 6);
        let p = random_process(&mut rng, 8, 1, 6);
        let spec = BackwardSystemSpec {
            mesh: &mesh,
            tree: &tree,
            terminal: &q,
            source: Some(&p),
        };
        let sol = solve_backward(&spec, &step).unwrap();
        assert!(representation_residual(&spec, &sol, &step) <= 1e-12);
    }

    #[test]
    fn duality_holds_for_random_data() {
        let (mesh, tree, step) = setup(8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let y0: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
            let (f, u, v) = (
                random_process(&mut rng, 8, 0, 5),
                random_process(&mut rng, 8, 0, 5),
                random_process(&mut rng, 8, 0, 5),
            );
            let mut fwd = ForwardSystemSpec::new(&mesh, &tree, &y0);
            fwd.source = Some(&f);
            fwd.u = Some(&u);
            fwd.v = Some(&v);
            let y = solve_forward(&fwd, &step).unwrap();
            let q = random_process(&mut rng, 8, 6, 6);
            let p = random_process(&mut rng, 8, 1, 6);
            let bwd = BackwardSystemSpec {
                mesh: &mesh,
                tree: &tree,
                terminal: &q,
                source: Some(&p),
            };
            let sol = solve_backward(&bwd, &step).unwrap();
            let rep = duality_residual(&fwd, &y, &bwd, &sol).unwrap();
            assert!(rep.residual <= 1e-11, "{rep:?}");
        }
    }

    #[test]
    fn linear_diffusion_second_moment_recursion() {
        let (mesh, tree, step) = setup(7, 7);
        let gamma = 0.8;
        let nl = NonlinearitySpec::new(PointwiseMap::Zero, PointwiseMap::Linear { gamma });
        nl.validate(0).unwrap();
        let y0: Vec<f64> = (0..7).map(|i| 1.0 + 0.3 * i as f64).collect();
        let mut spec = ForwardSystemSpec::new(&mesh, &tree, &y0);
        spec.nonlinearity = Some(&nl);
        let y = solve_forward(&spec, &step).unwrap();
        let moments = second_moments(&y, mesh.h());
        // C_{k+1} = (1 + γ²Δt) S C_k S with S applied column by column.
        let n = 7;
        let mut c: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| y0[i] * y0[j]).collect())
            .collect();
        for k in 0..=7 {
            let tr: f64 = (0..n).map(|i| c[i][i]).sum::<f64>() * mesh.h();
            assert!((tr - moments[k]).abs() <= 1e-10 * tr);
            for col in 0..n {
                let mut v: Vec<f64> = (0..n).map(|i| c[i][col]).collect();
                step.solve_in_place(&mut v);
                for i in 0..n {
                    c[i][col] = v[i];
                }
            }
            for row in c.iter_mut() {
                step.solve_in_place(row);
                for v in row.iter_mut() {
                    *v *= 1.0 + gamma * gamma * tree.dt();
                }
            }
        }
    }

    #[test]
    fn monte_carlo_matches_tree() {
        let (mesh, tree, step) = setup(8, 5);
        let pi = std::f64::consts::PI;
        let y0: Vec<f64> = mesh.primal_nodes().iter().map(|x| (pi * x).sin()).collect();
        let spec = ForwardSystemSpec::new(&mesh, &tree, &y0);
        let rep = monte_carlo_check(&spec, &step, 200, 1).unwrap();
        assert!((rep.estimate - rep.tree_value).abs() <= 1e-12 * rep.tree_value);

        let zeros = vec![0.0; 8];
        let v = AdaptedProcess::deterministic(8, 0, 4, |_| vec![1.0; 8]);
        let mut spec = ForwardSystemSpec::new(&mesh, &tree, &zeros);
        spec.v = Some(&v);
        let rep = monte_carlo_check(&spec, &step, 20_000, 2).unwrap();
        assert!(rep.within_band, "{rep:?}");
        // Closed form: Σ_j ‖S^j 1‖² Δt for j = 1..=M.
        let mut expect = 0.0;
        for j in 1..=5 {
            let mut w = vec![1.0; 8];
            for _ in 0..j {
                step.solve_in_place(&mut w);
            }
            expect += tree.dt() * mesh.h() * w.iter().map(|a| a * a).sum::<f64>();
        }
        assert!((rep.tree_value - expect).abs() <= 1e-12 * expect);
        let other = monte_carlo_check(&spec, &step, 20_000, 3).unwrap();
        assert!((other.estimate - rep.estimate).abs() <= 4.0 * (rep.std_error + other.std_error));
        assert!(monte_carlo_check(&spec, &step, 50, 3).is_err());
    }

    #[test]
    fn nonlinearity_probe() {
        let ok = NonlinearitySpec::new(PointwiseMap::Sine { amplitude: 0.5 }, PointwiseMap::Zero);
        assert!(ok.validate(1).is_ok());
        let mut bad = ok;
        bad.lipschitz = 0.1;
        assert!(bad.validate(1).is_err());
    }

    #[test]
    fn trajectory_dump_has_one_row_per_node() {
        let (mesh, tree, step) = setup(4, 3);
        let y0 = vec![1.0; 4];
        let y = solve_forward(&ForwardSystemSpec::new(&mesh, &tree, &y0), &step).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &tree, &y, mesh.h()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 15);
        assert!(text.starts_with("node_id,level,time,path_bits,norm_sq"));
    }
}
