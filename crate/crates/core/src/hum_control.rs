//! Penalized HUM on the scenario tree.
//!
//! The discrete functional, with the left-endpoint rule in time, is
//!
//! `J(u,v) = ½ Σ_{k<M} Δt E[⟨w_k y_k, y_k⟩ + ⟨w^u_k u_k, u_k⟩_{G0} + ⟨w^v_k v_k, v_k⟩] + (1/ε) E‖y_M‖²`
//!
//! with `w = e^{−2sφ}`, `w^u = s^{−3}w`, `w^v = s^{−2}w`. Its gradient comes
//! from the backward solver with `q = (2/ε) y_M`, `p_k = −w_k y_k` for
//! `1 ≤ k < M` and `p_M = 0`, and equals `(w^u u + χz, w^v v + Z)`. At the
//! minimizer `u = −χ s³e^{2sφ} z` and `v = −s²e^{2sφ} Z`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::carleman_weights::{admissibility_value, linear_fit, WeightSet};
use crate::error::{Error, Result};
use crate::mesh::{Mesh, Region};
use crate::scenario_tree::{AdaptedProcess, ScenarioTree};
use crate::spde_solvers::{
    second_moments, solve_backward, solve_forward, BackwardSolution, BackwardSystemSpec,
    ForwardSystemSpec, HeatStep, NonlinearitySpec, PointwiseMap,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CgOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-11,
            max_iter: 5000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HumProblem<'a> {
    pub mesh: &'a Mesh,
    pub tree: &'a ScenarioTree,
    pub weights: &'a WeightSet,
    pub y0: Vec<f64>,
    /// Source on levels `0..M−1`.
    pub source: Option<AdaptedProcess>,
    pub epsilon: f64,
    pub cg: CgOptions,
    /// Admissibility threshold `ε₀`.
    pub eps0: f64,
}

impl HumProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.mesh.n(), self.tree.depth());
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon = {}",
                self.epsilon
            )));
        }
        if self.y0.len() != n || self.weights.n() != n {
            return Err(Error::Shape("y0 and weights must match the mesh".into()));
        }
        if self.weights.times.len() != m + 1
            || self
                .weights
                .times
                .iter()
                .zip(self.tree.times())
                .any(|(a, b)| *a != b)
        {
            return Err(Error::Shape(
                "weights must be tabulated on the tree times".into(),
            ));
        }
        if let Some(f) = &self.source {
            if f.width() != n || !f.has_levels(0, m - 1) {
                return Err(Error::Shape("source must live on levels 0..M-1".into()));
            }
        }
        let p = &self.weights.params;
        let value = admissibility_value(p.lambda, self.mesh.h(), p.delta, p.t_final, p.m);
        if value > self.eps0 {
            return Err(Error::Inadmissible {
                value,
                eps0: self.eps0,
            });
        }
        Ok(())
    }
}

/// Per-level weights of the functional, on the primal nodes.
#[derive(Debug, Clone)]
struct Coeffs {
    /// `e^{−2s_kφ}`, `k = 0..=M`.
    state: Vec<Vec<f64>>,
    /// `χ s_k^{−3} e^{−2s_kφ}`, `k = 0..M−1`.
    u: Vec<Vec<f64>>,
    /// `s_k^{−2} e^{−2s_kφ}`.
    v: Vec<Vec<f64>>,
    chi: Vec<f64>,
}

impl Coeffs {
    fn new(mesh: &Mesh, weights: &WeightSet, m: usize) -> Self {
        let chi = mesh.indicator(Region::G0);
        let state: Vec<Vec<f64>> = (0..=m).map(|k| weights.decay_primal(k)).collect();
        let u = (0..m)
            .map(|k| {
                let s3 = weights.s[k].powi(3);
                state[k].iter().zip(&chi).map(|(w, c)| c * w / s3).collect()
            })
            .collect();
        let v = (0..m)
            .map(|k| {
                let s2 = weights.s[k].powi(2);
                state[k].iter().map(|w| w / s2).collect()
            })
            .collect();
        Self { state, u, v, chi }
    }
}

/// Control pair on levels `0..M−1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Controls {
    pub u: AdaptedProcess,
    pub v: AdaptedProcess,
}

impl Controls {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            u: AdaptedProcess::zeros(n, 0, m - 1),
            v: AdaptedProcess::zeros(n, 0, m - 1),
        }
    }

    fn zip_apply(&mut self, other: &Controls, f: impl Fn(&mut f64, f64) + Copy) {
        for k in 0..=self.u.last_level() {
            for (a, b) in self.u.level_mut(k).iter_mut().zip(other.u.level(k)) {
                f(a, *b);
            }
            for (a, b) in self.v.level_mut(k).iter_mut().zip(other.v.level(k)) {
                f(a, *b);
            }
        }
    }

    fn axpy(&mut self, alpha: f64, x: &Controls) {
        self.zip_apply(x, |a, b| *a += alpha * b);
    }

    /// Flattened `(u, v)` in level-major order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, l) in self.u.levels_iter() {
            out.extend_from_slice(l);
        }
        for (_, l) in self.v.levels_iter() {
            out.extend_from_slice(l);
        }
        out
    }
}

/// `Σ_k Δt E_k h Σ_i a b` on control pairs.
fn control_dot(a: &Controls, b: &Controls, dt: f64, h: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..=a.u.last_level() {
        let w = dt * h * ScenarioTree::probability(k);
        let su: f64 =
            a.u.level(k)
                .iter()
                .zip(b.u.level(k))
                .map(|(x, y)| x * y)
                .sum();
        let sv: f64 =
            a.v.level(k)
                .iter()
                .zip(b.v.level(k))
                .map(|(x, y)| x * y)
                .sum();
        total += w * (su + sv);
    }
    total
}

/// `Σ_k Δt E⟨c_k x_k, x_k⟩_h` over levels `from..=to` with per-level coefficients.
fn weighted_energy(
    x: &AdaptedProcess,
    coef: &[Vec<f64>],
    from: usize,
    to: usize,
    dt: f64,
    h: f64,
) -> f64 {
    let n = x.width();
    let mut total = 0.0;
    for k in from..=to {
        let prob = ScenarioTree::probability(k);
        let mut s = 0.0;
        for node in x.level(k).chunks(n) {
            s += node
                .iter()
                .zip(&coef[k])
                .map(|(v, c)| c * v * v)
                .sum::<f64>();
        }
        total += dt * h * prob * s;
    }
    total
}

struct Evaluation {
    grad: Controls,
    y: AdaptedProcess,
    adjoint: BackwardSolution,
}

struct Operator<'a> {
    problem: &'a HumProblem<'a>,
    coeffs: Coeffs,
    step: HeatStep,
    zero_y0: Vec<f64>,
}

impl<'a> Operator<'a> {
    fn new(problem: &'a HumProblem<'a>) -> Self {
        let (n, m) = (problem.mesh.n(), problem.tree.depth());
        Self {
            problem,
            coeffs: Coeffs::new(problem.mesh, problem.weights, m),
            step: HeatStep::for_mesh(problem.mesh, problem.tree),
            zero_y0: vec![0.0; n],
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.problem.mesh.n(), self.problem.tree.depth())
    }

    /// Gradient at `c`; `with_data = false` drops `y0` and `F` (Hessian action).
    fn evaluate(&self, c: &Controls, with_data: bool) -> Result<Evaluation> {
        let pr = self.problem;
        let (n, m) = self.dims();
        let mut fwd = ForwardSystemSpec::new(
            pr.mesh,
            pr.tree,
            if with_data { &pr.y0 } else { &self.zero_y0 },
        );
        if with_data {
            fwd.source = pr.source.as_ref();
        }
        fwd.u = Some(&c.u);
        fwd.v = Some(&c.v);
        let y = solve_forward(&fwd, &self.step)?;
        let scale = 2.0 / pr.epsilon;
        let mut q = AdaptedProcess::zeros(n, m, m);
        for (a, b) in q.level_mut(m).iter_mut().zip(y.level(m)) {
            *a = scale * b;
        }
        let mut p = AdaptedProcess::zeros(n, 1, m);
        for k in 1..m {
            let w = &self.coeffs.state[k];
            for (dst, src) in p.level_mut(k).chunks_mut(n).zip(y.level(k).chunks(n)) {
                for i in 0..n {
                    dst[i] = -w[i] * src[i];
                }
            }
        }
        let bwd = BackwardSystemSpec {
            mesh: pr.mesh,
            tree: pr.tree,
            terminal: &q,
            source: Some(&p),
        };
        let adjoint = solve_backward(&bwd, &self.step)?;
        let mut grad = Controls::zeros(n, m);
        for k in 0..m {
            let (wu, wv, chi) = (&self.coeffs.u[k], &self.coeffs.v[k], &self.coeffs.chi);
            let zk = adjoint.z.level(k);
            let hk = adjoint.zz.level(k);
            for (j, g) in grad.u.level_mut(k).iter_mut().enumerate() {
                let i = j % n;
                *g = wu[i] * c.u.level(k)[j] + chi[i] * zk[j];
            }
            for (j, g) in grad.v.level_mut(k).iter_mut().enumerate() {
                let i = j % n;
                *g = wv[i] * c.v.level(k)[j] + hk[j];
            }
        }
        Ok(Evaluation { grad, y, adjoint })
    }

    /// Inverse of the control-cost diagonal; zero off `G0` for `u`.
    fn precondition(&self, r: &Controls) -> Controls {
        let (n, m) = self.dims();
        let mut out = Controls::zeros(n, m);
        for k in 0..m {
            for (j, o) in out.u.level_mut(k).iter_mut().enumerate() {
                let w = self.coeffs.u[k][j % n];
                *o = if w > 0.0 { r.u.level(k)[j] / w } else { 0.0 };
            }
            for (j, o) in out.v.level_mut(k).iter_mut().enumerate() {
                *o = r.v.level(k)[j] / self.coeffs.v[k][j % n];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CostTriple {
    pub state: f64,
    pub u: f64,
    pub v: f64,
}

impl CostTriple {
    pub fn total(&self) -> f64 {
        self.state + self.u + self.v
    }
}

#[derive(Debug, Clone)]
pub struct HumResult {
    pub controls: Controls,
    pub y: AdaptedProcess,
    pub z: AdaptedProcess,
    pub zz: AdaptedProcess,
    pub epsilon: f64,
    pub j_value: f64,
    pub terminal_second_moment: f64,
    pub costs: CostTriple,
    pub kkt_residual: f64,
    pub duality_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Scalar part of a [`HumResult`], for reports.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HumSummary {
    pub epsilon: f64,
    pub j_value: f64,
    pub terminal_second_moment: f64,
    pub costs: CostTriple,
    pub kkt_residual: f64,
    pub duality_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl HumResult {
    pub fn summary(&self) -> HumSummary {
        HumSummary {
            epsilon: self.epsilon,
            j_value: self.j_value,
            terminal_second_moment: self.terminal_second_moment,
            costs: self.costs,
            kkt_residual: self.kkt_residual,
            duality_residual: self.duality_residual,
            iterations: self.iterations,
            converged: self.converged,
        }
    }
}

pub fn solve_hum_linear(problem: &HumProblem) -> Result<HumResult> {
    solve_hum_linear_from(problem, None)
}

/// Preconditioned CG on the control pair, optionally warm-started.
pub fn solve_hum_linear_from(problem: &HumProblem, start: Option<&Controls>) -> Result<HumResult> {
    problem.validate()?;
    let op = Operator::new(problem);
    let (n, m) = op.dims();
    let (dt, h) = (problem.tree.dt(), problem.mesh.h());
    let zero = Controls::zeros(n, m);
    let b = op.evaluate(&zero, true)?.grad;
    let reference = control_dot(&b, &op.precondition(&b), dt, h).sqrt();
    let mut x = start.cloned().unwrap_or_else(|| zero.clone());
    let mut iterations = 0;
    let mut converged = reference == 0.0;
    if !converged {
        let mut r = if start.is_some() {
            op.evaluate(&x, true)?.grad
        } else {
            b
        };
        r.zip_apply(&zero, |a, _| *a = -*a);
        let mut zr = op.precondition(&r);
        let mut d = zr.clone();
        let mut rz = control_dot(&r, &zr, dt, h);
        while iterations < problem.cg.max_iter {
            if rz.max(0.0).sqrt() <= problem.cg.rel_tol * reference {
                converged = true;
                break;
            }
            let hd = op.evaluate(&d, false)?.grad;
            let curv = control_dot(&d, &hd, dt, h);
            if !(curv > 0.0) {
                break;
            }
            let alpha = rz / curv;
            x.axpy(alpha, &d);
            r.axpy(-alpha, &hd);
            zr = op.precondition(&r);
            let rz_new = control_dot(&r, &zr, dt, h);
            let beta = rz_new / rz;
            rz = rz_new;
            d.zip_apply(&zr, |a, b| *a = b + beta * *a);
            iterations += 1;
        }
        if !converged && rz.max(0.0).sqrt() <= problem.cg.rel_tol * reference {
            converged = true;
        }
    }
    finish(problem, &op, x, iterations, converged)
}

fn finish(
    problem: &HumProblem,
    op: &Operator,
    x: Controls,
    iterations: usize,
    converged: bool,
) -> Result<HumResult> {
    let (n, m) = op.dims();
    let (dt, h) = (problem.tree.dt(), problem.mesh.h());
    let ev = op.evaluate(&x, true)?;
    let c = &op.coeffs;
    let costs = CostTriple {
        state: weighted_energy(&ev.y, &c.state, 0, m - 1, dt, h),
        u: weighted_energy(&x.u, &c.u, 0, m - 1, dt, h),
        v: weighted_energy(&x.v, &c.v, 0, m - 1, dt, h),
    };
    let terminal = *second_moments(&ev.y, h).last().unwrap_or(&0.0);
    let j_value = 0.5 * costs.total() + terminal / problem.epsilon;

    // Characterization defect u + χ s³e^{2sφ} z, v + s²e^{2sφ} Z.
    let mut defect = Controls::zeros(n, m);
    let w = problem.weights;
    for k in 0..m {
        let s = w.s[k];
        let amp: Vec<f64> = c.state[k].iter().map(|d| 1.0 / d).collect();
        for (j, o) in defect.u.level_mut(k).iter_mut().enumerate() {
            let i = j % n;
            *o = x.u.level(k)[j] + c.chi[i] * s.powi(3) * amp[i] * ev.adjoint.z.level(k)[j];
        }
        for (j, o) in defect.v.level_mut(k).iter_mut().enumerate() {
            let i = j % n;
            *o = x.v.level(k)[j] + s * s * amp[i] * ev.adjoint.zz.level(k)[j];
        }
    }
    let norm_split = |a: &Controls| {
        let mut u_only = a.clone();
        u_only.v = AdaptedProcess::zeros(n, 0, m - 1);
        let mut v_only = a.clone();
        v_only.u = AdaptedProcess::zeros(n, 0, m - 1);
        (
            control_dot(&u_only, &u_only, dt, h).sqrt(),
            control_dot(&v_only, &v_only, dt, h).sqrt(),
        )
    };
    let (du, dv) = norm_split(&defect);
    let (nu, nv) = norm_split(&x);
    let kkt_residual = if nu + nv == 0.0 {
        du + dv
    } else {
        (du + dv) / (nu + nv)
    };

    // Σ_{1≤k<M} weighted |y|² + control costs + (2/ε)E|y_M|² = ⟨y0, z0⟩ + Σ Δt E⟨F, z⟩.
    let lhs = weighted_energy(&ev.y, &c.state, 1, m - 1, dt, h)
        + costs.u
        + costs.v
        + 2.0 * terminal / problem.epsilon;
    let mut rhs = h * problem
        .y0
        .iter()
        .zip(ev.adjoint.z.level(0))
        .map(|(a, b)| a * b)
        .sum::<f64>();
    if let Some(f) = &problem.source {
        for k in 0..m {
            let prob = ScenarioTree::probability(k);
            let s: f64 = f
                .level(k)
                .iter()
                .zip(ev.adjoint.z.level(k))
                .map(|(a, b)| a * b)
                .sum();
            rhs += dt * h * prob * s;
        }
    }
    let scale = lhs.abs().max(rhs.abs());
    let duality_residual = if scale == 0.0 {
        0.0
    } else {
        (lhs - rhs).abs() / scale
    };

    Ok(HumResult {
        controls: x,
        y: ev.y,
        z: ev.adjoint.z,
        zz: ev.adjoint.zz,
        epsilon: problem.epsilon,
        j_value,
        terminal_second_moment: terminal,
        costs,
        kkt_residual,
        duality_residual,
        iterations,
        converged,
    })
}

/// `J` at arbitrary controls (for oracles and monotonicity checks).
pub fn evaluate_functional(problem: &HumProblem, controls: &Controls) -> Result<f64> {
    problem.validate()?;
    let op = Operator::new(problem);
    let (_, m) = op.dims();
    let (dt, h) = (problem.tree.dt(), problem.mesh.h());
    let step = &op.step;
    let mut fwd = ForwardSystemSpec::new(problem.mesh, problem.tree, &problem.y0);
    fwd.source = problem.source.as_ref();
    fwd.u = Some(&controls.u);
    fwd.v = Some(&controls.v);
    let y = solve_forward(&fwd, step)?;
    let c = &op.coeffs;
    let cost = weighted_energy(&y, &c.state, 0, m - 1, dt, h)
        + weighted_energy(&controls.u, &c.u, 0, m - 1, dt, h)
        + weighted_energy(&controls.v, &c.v, 0, m - 1, dt, h);
    Ok(0.5 * cost + second_moments(&y, h)[m] / problem.epsilon)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpsilonSchedule {
    pub value: f64,
    /// `λθ(T)μe^{6μ(m+1)}`.
    pub exponent: f64,
    pub underflow: bool,
}

pub fn epsilon_schedule(
    lambda: f64,
    mu: f64,
    h: f64,
    m: u32,
    theta_final: f64,
    c_cal: f64,
) -> Result<EpsilonSchedule> {
    if !(lambda > 0.0 && mu > 0.0 && h > 0.0 && theta_final > 0.0 && c_cal > 0.0) {
        return Err(Error::InvalidParameter(
            "epsilon schedule needs positive inputs".into(),
        ));
    }
    let exponent = lambda * theta_final * mu * (6.0 * mu * (m as f64 + 1.0)).exp();
    let value = c_cal / (h * h) * (-exponent).exp();
    if !value.is_normal() {
        return Ok(EpsilonSchedule {
            value: f64::MIN_POSITIVE,
            exponent,
            underflow: true,
        });
    }
    Ok(EpsilonSchedule {
        value,
        exponent,
        underflow: false,
    })
}

/// Schedule for a weight set; requires the terminal weight bound on the mesh.
pub fn epsilon_for(weights: &WeightSet, h: f64, c_cal: f64) -> Result<EpsilonSchedule> {
    if !weights.terminal_bound_holds() {
        return Err(Error::InvalidParameter(
            "terminal weight bound 2*varphi <= mu*e^{6mu(m+1)} fails; increase mu".into(),
        ));
    }
    let p = &weights.params;
    epsilon_schedule(p.lambda, p.mu, h, p.m, weights.time.theta_final(), c_cal)
}

/// `‖F‖² = E Σ_k Δt ⟨s^{−3}e^{−2sφ}F_k, F_k⟩_h`.
#[derive(Debug, Clone)]
pub struct WeightedSourceNorm {
    coef: Vec<Vec<f64>>,
    dt: f64,
    h: f64,
    m: usize,
}

impl WeightedSourceNorm {
    pub fn new(mesh: &Mesh, tree: &ScenarioTree, weights: &WeightSet) -> Self {
        let m = tree.depth();
        let coef = (0..m)
            .map(|k| {
                let s3 = weights.s[k].powi(3);
                weights.decay_primal(k).iter().map(|w| w / s3).collect()
            })
            .collect();
        Self {
            coef,
            dt: tree.dt(),
            h: mesh.h(),
            m,
        }
    }

    pub fn norm_sq(&self, f: &AdaptedProcess) -> f64 {
        weighted_energy(f, &self.coef, 0, self.m - 1, self.dt, self.h)
    }

    pub fn norm(&self, f: &AdaptedProcess) -> f64 {
        self.norm_sq(f).sqrt()
    }

    pub fn distance(&self, a: &AdaptedProcess, b: &AdaptedProcess) -> f64 {
        let mut d = a.clone();
        for k in 0..self.m {
            for (x, y) in d.level_mut(k).iter_mut().zip(b.level(k)) {
                *x -= y;
            }
        }
        self.norm(&d)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TerminalBound {
    pub ratio: f64,
    pub terminal: f64,
    pub epsilon: f64,
    pub weighted_y0: f64,
    pub source_norm_sq: f64,
    /// Weighted cost triple over the same data norm.
    pub cost_ratio: f64,
}

/// `E‖y_M‖² / [ε (E⟨s(0)^{−2}e^{−2s(0)φ}y0, y0⟩ + ‖F‖²)]`; `0/0` is reported as 0.
pub fn terminal_bound_check(result: &HumResult, problem: &HumProblem) -> TerminalBound {
    let w = problem.weights;
    let h = problem.mesh.h();
    let s0 = w.s[0];
    let weighted_y0 = h * problem
        .y0
        .iter()
        .zip(w.decay_primal(0))
        .map(|(y, d)| d * y * y / (s0 * s0))
        .sum::<f64>();
    let source_norm_sq = problem.source.as_ref().map_or(0.0, |f| {
        WeightedSourceNorm::new(problem.mesh, problem.tree, w).norm_sq(f)
    });
    let data = weighted_y0 + source_norm_sq;
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    TerminalBound {
        ratio: div(result.terminal_second_moment, result.epsilon * data),
        terminal: result.terminal_second_moment,
        epsilon: result.epsilon,
        weighted_y0,
        source_norm_sq,
        cost_ratio: div(result.costs.total(), data),
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PicardOptions {
    /// Stop when the 𝔖-distance falls below `tol` times the first distance.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SemilinearResult {
    pub result: HumResult,
    /// Source of the last linear solve.
    pub source: AdaptedProcess,
    /// `‖F^{j+1} − F^j‖_𝔖`.
    pub distances: Vec<f64>,
    /// Largest ratio of successive distances.
    pub max_ratio: f64,
    /// `exp(slope)` of the log-distance fit and its R².
    pub fit_factor: f64,
    pub fit_r2: f64,
    pub iterations: usize,
    /// Nonlinear state driven by `(u, v)` with `g ≡ 0`.
    pub y_full: AdaptedProcess,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SemilinearSummary {
    pub hum: HumSummary,
    pub max_ratio: f64,
    pub fit_factor: f64,
    pub fit_r2: f64,
    pub iterations: usize,
}

impl SemilinearResult {
    pub fn summary(&self) -> SemilinearSummary {
        SemilinearSummary {
            hum: self.result.summary(),
            max_ratio: self.max_ratio,
            fit_factor: self.fit_factor,
            fit_r2: self.fit_r2,
            iterations: self.iterations,
        }
    }
}

/// `f(x, y_k)` on levels `0..M−1`.
fn drift_of(map: &PointwiseMap, mesh: &Mesh, y: &AdaptedProcess, m: usize) -> AdaptedProcess {
    let n = mesh.n();
    let x = mesh.primal_nodes();
    AdaptedProcess::from_fn(n, 0, m - 1, |k, p, out| {
        for (i, o) in out.iter_mut().enumerate() {
            *o = map.eval(x[i], y.node(k, p)[i]);
        }
    })
}

/// Log-linear fit of positive distances against iteration index.
pub fn geometric_fit(distances: &[f64]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = distances
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0)
        .map(|(j, d)| (j as f64, d.ln()))
        .collect();
    if pts.len() < 2 {
        return (0.0, 1.0);
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let fit = linear_fit(&x, &y);
    (fit.slope.exp(), fit.r2)
}

/// Picard iteration `F ↦ f(ŷ(F))` around the linear HUM solve.
pub fn solve_hum_semilinear(
    base: &HumProblem,
    nonlinearity: &NonlinearitySpec,
    picard: PicardOptions,
) -> Result<SemilinearResult> {
    nonlinearity.validate(0x5eed)?;
    let (mesh, tree) = (base.mesh, base.tree);
    let (n, m) = (mesh.n(), tree.depth());
    let norm = WeightedSourceNorm::new(mesh, tree, base.weights);
    let mut problem = base.clone();
    let mut source = AdaptedProcess::zeros(n, 0, m - 1);
    let mut distances: Vec<f64> = Vec::new();
    let mut warm: Option<Controls> = None;
    let mut iterations = 0;
    let result = loop {
        problem.source = Some(source.clone());
        let res = solve_hum_linear_from(&problem, warm.as_ref())?;
        iterations += 1;
        let next = drift_of(&nonlinearity.drift, mesh, &res.y, m);
        let d = norm.distance(&next, &source);
        distances.push(d);
        if d <= picard.tol * distances[0] || d == 0.0 {
            break res;
        }
        if distances.len() >= 3 {
            let k = distances.len();
            let ratio = distances[k - 1] / distances[k - 2];
            if ratio >= 1.0 {
                return Err(Error::NoContraction {
                    factor: ratio,
                    iterations,
                });
            }
        }
        if iterations >= picard.max_iter {
            return Err(Error::PicardMaxIter(picard.max_iter));
        }
        warm = Some(res.controls.clone());
        source = next;
    };
    let max_ratio = distances
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .fold(0.0f64, f64::max);
    let (fit_factor, fit_r2) = geometric_fit(&distances);
    let step = HeatStep::for_mesh(mesh, tree);
    let drift_only = NonlinearitySpec::new(nonlinearity.drift, PointwiseMap::Zero);
    let mut fwd = ForwardSystemSpec::new(mesh, tree, &base.y0);
    fwd.u = Some(&result.controls.u);
    fwd.v = Some(&result.controls.v);
    fwd.nonlinearity = Some(&drift_only);
    let y_full = solve_forward(&fwd, &step)?;
    Ok(SemilinearResult {
        result,
        source,
        distances,
        max_ratio,
        fit_factor,
        fit_r2,
        iterations,
        y_full,
    })
}

/// `v*_k = v_k − g(x, y_k)`.
pub fn lift_diffusion_control(
    mesh: &Mesh,
    y: &AdaptedProcess,
    v: &AdaptedProcess,
    g: &PointwiseMap,
) -> Result<AdaptedProcess> {
    let n = mesh.n();
    if y.width() != n
        || v.width() != n
        || y.first_level() != 0
        || y.last_level() < v.last_level()
        || v.first_level() != 0
    {
        return Err(Error::Shape("state and control must share the tree".into()));
    }
    let x = mesh.primal_nodes();
    Ok(AdaptedProcess::from_fn(
        n,
        0,
        v.last_level(),
        |k, p, out| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = v.node(k, p)[i] - g.eval(x[i], y.node(k, p)[i]);
            }
        },
    ))
}

/// Relative nodewise gap between the state under `(u, v)` with `g ≡ 0` and
/// the state under `(u, v − g(y))` with `g` switched on.
pub fn lift_defect(
    mesh: &Mesh,
    tree: &ScenarioTree,
    y0: &[f64],
    controls: &Controls,
    nonlinearity: &NonlinearitySpec,
) -> Result<f64> {
    let step = HeatStep::for_mesh(mesh, tree);
    let drift_only = NonlinearitySpec::new(nonlinearity.drift, PointwiseMap::Zero);
    let mut fwd = ForwardSystemSpec::new(mesh, tree, y0);
    fwd.u = Some(&controls.u);
    fwd.v = Some(&controls.v);
    fwd.nonlinearity = Some(&drift_only);
    let y = solve_forward(&fwd, &step)?;
    let v_star = lift_diffusion_control(mesh, &y, &controls.v, &nonlinearity.diffusion)?;
    let mut full = fwd;
    full.v = Some(&v_star);
    full.nonlinearity = Some(nonlinearity);
    let y_lift = solve_forward(&full, &step)?;
    let mut worst = 0.0f64;
    for k in 0..=tree.depth() {
        for (a, b) in y.level(k).iter().zip(y_lift.level(k)) {
            worst = worst.max((a - b).abs());
        }
    }
    let scale = y.max_abs();
    Ok(if scale == 0.0 { worst } else { worst / scale })
}

#[derive(Debug, Clone, Serialize)]
pub struct CarlemanStats {
    pub samples: usize,
    pub ratios: Vec<f64>,
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub median: f64,
    pub all_finite: bool,
}

/// Standard normal truncated to ±4.
fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() <= 4.0 {
            return v;
        }
    }
}

/// One sample of LHS/RHS of the weighted Carleman inequality. `w` is
/// integrated by `w_{k+1} = w_k + Δt(f_k − D_h² w_k) + g_k ΔW_k`.
fn carleman_sample(
    mesh: &Mesh,
    tree: &ScenarioTree,
    weights: &WeightSet,
    seed: u64,
    index: u64,
) -> Option<f64> {
    let (n, m, h, dt) = (mesh.n(), tree.depth(), mesh.h(), tree.dt());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let f = AdaptedProcess::from_fn(n, 0, m - 1, |_, _, out| {
        out.iter_mut().for_each(|o| *o = truncated_normal(&mut rng))
    });
    let g = AdaptedProcess::from_fn(n, 0, m - 1, |_, _, out| {
        out.iter_mut().for_each(|o| *o = truncated_normal(&mut rng))
    });
    let w0: Vec<f64> = (0..n).map(|_| truncated_normal(&mut rng)).collect();
    let sq = tree.sqrt_dt();
    let ih2 = 1.0 / (h * h);
    let mut w = AdaptedProcess::zeros(n, 0, m);
    w.level_mut(0).copy_from_slice(&w0);
    for k in 0..m {
        let (prev, cur) = w.split_levels(k);
        for (q, child) in cur.chunks_mut(n).enumerate() {
            let p = q >> 1;
            let wk = &prev[p * n..(p + 1) * n];
            let (fk, gk) = (f.node(k, p), g.node(k, p));
            let dw = if q & 1 == 1 { sq } else { -sq };
            for i in 0..n {
                let left = if i > 0 { wk[i - 1] } else { 0.0 };
                let right = if i + 1 < n { wk[i + 1] } else { 0.0 };
                let lap = (left - 2.0 * wk[i] + right) * ih2;
                child[i] = wk[i] + dt * (fk[i] - lap) + gk[i] * dw;
            }
        }
    }
    let chi = mesh.indicator(Region::G0);
    let p = &weights.params;
    let e = |k: usize, phi: f64| (2.0 * weights.s[k] * phi).exp();
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for k in 0..m {
        let s = weights.s[k];
        let prob = ScenarioTree::probability(k);
        for (node, (fk, gk)) in w
            .level(k)
            .chunks(n)
            .zip(f.level(k).chunks(n).zip(g.level(k).chunks(n)))
        {
            let mut a = 0.0;
            let mut b = 0.0;
            for i in 0..n {
                let ew = e(k, weights.phi_primal(i + 1));
                let wi = node[i];
                a += s.powi(3) * ew * wi * wi;
                b += s.powi(3) * ew * chi[i] * wi * wi
                    + ew * fk[i] * fk[i]
                    + s * s * ew * gk[i] * gk[i];
            }
            for j in 0..=n {
                let left = if j > 0 { node[j - 1] } else { 0.0 };
                let right = if j < n { node[j] } else { 0.0 };
                let d = (right - left) / h;
                a += s * e(k, weights.phi_dual[j]) * d * d;
            }
            lhs += dt * h * prob * a;
            rhs += dt * h * prob * b;
        }
    }
    let init = p.lambda.powi(2) * p.mu.powi(3) * (2.0 * p.mu * (6.0 * p.m as f64 + 1.0)).exp();
    lhs += h
        * init
        * (0..n)
            .map(|i| e(0, weights.phi_primal(i + 1)) * w0[i] * w0[i])
            .sum::<f64>();
    let probm = ScenarioTree::probability(m);
    let terminal: f64 = w
        .level(m)
        .chunks(n)
        .map(|node| {
            (0..n)
                .map(|i| e(m, weights.phi_primal(i + 1)) * node[i] * node[i])
                .sum::<f64>()
        })
        .sum();
    rhs += ih2 * h * probm * terminal;
    if lhs == 0.0 && rhs == 0.0 {
        None
    } else {
        Some(lhs / rhs)
    }
}

/// Distribution of LHS/RHS over random `(f, g, w0)` samples.
pub fn carleman_ratio(
    mesh: &Mesh,
    tree: &ScenarioTree,
    weights: &WeightSet,
    samples: usize,
    seed: u64,
    eps0: f64,
) -> Result<CarlemanStats> {
    if samples == 0 {
        return Err(Error::InvalidParameter("samples must be >= 1".into()));
    }
    let p = &weights.params;
    let value = admissibility_value(p.lambda, mesh.h(), p.delta, p.t_final, p.m);
    if value > eps0 {
        return Err(Error::Inadmissible { value, eps0 });
    }
    if weights.times.len() != tree.depth() + 1 {
        return Err(Error::Shape(
            "weights must be tabulated on the tree times".into(),
        ));
    }
    let ratios: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .filter_map(|i| carleman_sample(mesh, tree, weights, seed, i))
        .collect();
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let count = ratios.len();
    let all_finite = ratios.iter().all(|r| r.is_finite());
    Ok(CarlemanStats {
        samples: count,
        max: sorted.last().copied().unwrap_or(0.0),
        min: sorted.first().copied().unwrap_or(0.0),
        mean: if count == 0 {
            0.0
        } else {
            ratios.iter().sum::<f64>() / count as f64
        },
        median: if count == 0 { 0.0 } else { sorted[count / 2] },
        all_finite,
        ratios,
    })
}
