//! Carleman weight functions: the spatial profile ψ, the time factor θ,
//! and the tabulated exponential weights on a mesh × time grid.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Regions};

/// Extended interval on which ψ stays positive.
pub const EXTENDED_DOMAIN: (f64, f64) = (-0.1, 1.1);

/// Lower bound on the exponent σ of the initial layer of θ. Values below 2
/// make θ'' blow up at `T/4`; the floor keeps θ in C².
pub const SIGMA_FLOOR: f64 = 3.0;

/// Largest |exponent| allowed in a tabulated weight.
const EXPONENT_LIMIT: f64 = 700.0;

/// `ψ(x) = 1 − c(x − x0)²`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PsiFunction {
    pub x0: f64,
    pub c: f64,
    /// min of |ψ'| over `[0,1] \ G2`.
    pub c0: f64,
}

impl PsiFunction {
    pub fn value(&self, x: f64) -> f64 {
        1.0 - self.c * (x - self.x0) * (x - self.x0)
    }

    pub fn d1(&self, x: f64) -> f64 {
        -2.0 * self.c * (x - self.x0)
    }

    pub fn d2(&self) -> f64 {
        -2.0 * self.c
    }
}

/// Vertex at the centre of G2, curvature fixed by `ψ = 0.1` at the far end
/// of the extended domain.
pub fn build_psi(regions: &Regions) -> PsiFunction {
    let x0 = regions.g2.center();
    let (a, b) = EXTENDED_DOMAIN;
    let reach = (x0 - a).max(b - x0);
    let c = 0.9 / (reach * reach);
    PsiFunction {
        x0,
        c,
        c0: c * regions.g2.width(),
    }
}

/// `θ(t)`: initial layer, plateau, quintic bridge, terminal blow-up.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TimeWeight {
    pub t_final: f64,
    pub m: u32,
    pub delta: f64,
    pub sigma: f64,
    /// Coefficient of `τ³, τ⁴, τ⁵` on the bridge, `τ = (t − T/2)/(T/4)`.
    bridge: [f64; 3],
}

/// σ from the Carleman parameters, before the floor.
pub fn sigma_formula(lambda: f64, mu: f64, m: u32) -> f64 {
    lambda * mu * mu * (mu * (6.0 * m as f64 - 4.0)).exp()
}

pub fn build_time_weight(
    t_final: f64,
    m: u32,
    delta: f64,
    lambda: f64,
    mu: f64,
) -> Result<TimeWeight> {
    if !(t_final > 0.0 && t_final < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "T = {t_final} must lie in (0,1)"
        )));
    }
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "delta = {delta} must lie in (0,1/2)"
        )));
    }
    if m < 1 {
        return Err(Error::InvalidParameter("m must be >= 1".into()));
    }
    if !(lambda > 0.0 && mu > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda = {lambda}, mu = {mu} must be positive"
        )));
    }
    let sigma = sigma_formula(lambda, mu, m).max(SIGMA_FLOOR);
    let len = t_final / 4.0;
    let (g, g1, g2) = blowup(t_final, m, delta, 0.75 * t_final);
    let d0 = g - 1.0;
    let d1 = g1 * len;
    let d2 = g2 * len * len;
    let bridge = [
        10.0 * d0 - 4.0 * d1 + 0.5 * d2,
        -15.0 * d0 + 7.0 * d1 - d2,
        6.0 * d0 - 3.0 * d1 + 0.5 * d2,
    ];
    let w = TimeWeight {
        t_final,
        m,
        delta,
        sigma,
        bridge,
    };
    let min_slope = (0..=1000)
        .map(|i| w.bridge_eval(i as f64 / 1000.0).1)
        .fold(f64::INFINITY, f64::min);
    if min_slope < -1e-12 * (1.0 + g1) {
        return Err(Error::NonMonotoneBridge(min_slope));
    }
    Ok(w)
}

/// `(T − t + δT)^{−m}` and its first two time derivatives.
fn blowup(t_final: f64, m: u32, delta: f64, t: f64) -> (f64, f64, f64) {
    let b = t_final - t + delta * t_final;
    let mf = m as f64;
    let v = b.powi(-(m as i32));
    (v, mf * v / b, mf * (mf + 1.0) * v / (b * b))
}

impl TimeWeight {
    /// Bridge value and derivatives at `τ ∈ [0,1]`, in t-units.
    fn bridge_eval(&self, tau: f64) -> (f64, f64, f64) {
        let [c3, c4, c5] = self.bridge;
        let len = self.t_final / 4.0;
        let t2 = tau * tau;
        let v = 1.0 + t2 * tau * (c3 + tau * (c4 + tau * c5));
        let d = t2 * (3.0 * c3 + tau * (4.0 * c4 + tau * 5.0 * c5)) / len;
        let dd = tau * (6.0 * c3 + tau * (12.0 * c4 + tau * 20.0 * c5)) / (len * len);
        (v, d, dd)
    }

    /// Piece `k ∈ 0..4` evaluated at `t` (also outside its own interval, for junction checks).
    fn piece(&self, k: usize, t: f64) -> (f64, f64, f64) {
        let tt = self.t_final;
        match k {
            0 => {
                let base = 1.0 - 4.0 * t / tt;
                if base <= 0.0 {
                    return (1.0, 0.0, 0.0);
                }
                let s = self.sigma;
                let lb = base.ln();
                let k1 = 4.0 / tt;
                (
                    1.0 + (s * lb).exp(),
                    -s * k1 * ((s - 1.0) * lb).exp(),
                    s * (s - 1.0) * k1 * k1 * ((s - 2.0) * lb).exp(),
                )
            }
            1 => (1.0, 0.0, 0.0),
            2 => self.bridge_eval((t - 0.5 * tt) / (0.25 * tt)),
            _ => blowup(tt, self.m, self.delta, t),
        }
    }

    fn piece_index(&self, t: f64) -> usize {
        let q = t / self.t_final;
        if q < 0.25 {
            0
        } else if q < 0.5 {
            1
        } else if q < 0.75 {
            2
        } else {
            3
        }
    }

    /// `(θ, θ_t, θ_tt)` at `t ∈ [0, T]`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        self.piece(self.piece_index(t), t)
    }

    pub fn theta(&self, t: f64) -> f64 {
        self.eval(t).0
    }

    pub fn theta_final(&self) -> f64 {
        (self.delta * self.t_final).powi(-(self.m as i32))
    }

    /// Largest relative jump of θ, θ_t, θ_tt across the three junctions.
    pub fn junction_jump(&self) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..3 {
            let t = (k + 1) as f64 * 0.25 * self.t_final;
            let (a, b) = (self.piece(k, t), self.piece(k + 1, t));
            for (l, r) in [(a.0, b.0), (a.1, b.1), (a.2, b.2)] {
                worst = worst.max((l - r).abs() / (1.0 + l.abs().max(r.abs())));
            }
        }
        worst
    }
}

pub fn admissible(lambda: f64, h: f64, delta: f64, t_final: f64, m: u32, eps0: f64) -> bool {
    admissibility_value(lambda, h, delta, t_final, m) <= eps0
}

pub fn admissibility_value(lambda: f64, h: f64, delta: f64, t_final: f64, m: u32) -> f64 {
    lambda * h * (delta * t_final).powi(-(m as i32))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightParams {
    pub lambda: f64,
    pub mu: f64,
    pub m: u32,
    pub delta: f64,
    pub t_final: f64,
}

/// `φ`, `ϕ` and their space derivatives for a fixed ψ.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpaceWeight {
    pub psi: PsiFunction,
    pub mu: f64,
    pub m: u32,
}

impl SpaceWeight {
    /// `μ e^{6μ(m+1)}`, the constant shift in φ.
    pub fn shift(&self) -> f64 {
        self.mu * (6.0 * self.mu * (self.m as f64 + 1.0)).exp()
    }

    pub fn varphi(&self, x: f64) -> f64 {
        (self.mu * (self.psi.value(x) + 6.0 * self.m as f64)).exp()
    }

    pub fn phi(&self, x: f64) -> f64 {
        self.varphi(x) - self.shift()
    }

    pub fn phi_x(&self, x: f64) -> f64 {
        self.mu * self.psi.d1(x) * self.varphi(x)
    }

    pub fn phi_xx(&self, x: f64) -> f64 {
        let p1 = self.psi.d1(x);
        self.mu * (self.psi.d2() + self.mu * p1 * p1) * self.varphi(x)
    }
}

/// Weights tabulated at the given times over the closure and dual nodes.
#[derive(Debug, Clone, Serialize)]
pub struct WeightSet {
    pub params: WeightParams,
    pub space: SpaceWeight,
    pub time: TimeWeight,
    pub times: Vec<f64>,
    pub theta: Vec<f64>,
    pub s: Vec<f64>,
    /// φ at closure nodes `0..=N+1`.
    pub phi_closure: Vec<f64>,
    pub varphi_closure: Vec<f64>,
    /// φ at dual nodes.
    pub phi_dual: Vec<f64>,
    pub closure_x: Vec<f64>,
}

impl WeightSet {
    pub fn new(mesh: &Mesh, params: WeightParams, times: &[f64]) -> Result<Self> {
        let psi = build_psi(mesh.regions());
        let time = build_time_weight(
            params.t_final,
            params.m,
            params.delta,
            params.lambda,
            params.mu,
        )?;
        let space = SpaceWeight {
            psi,
            mu: params.mu,
            m: params.m,
        };
        let closure_x = mesh.closure_nodes();
        let phi_closure: Vec<f64> = closure_x.iter().map(|&x| space.phi(x)).collect();
        let varphi_closure = closure_x.iter().map(|&x| space.varphi(x)).collect();
        let phi_dual: Vec<f64> = mesh.dual_nodes().iter().map(|&x| space.phi(x)).collect();
        // ψ ≤ 1 gives the sup of φ at the vertex.
        let phi_max = space.phi(psi.x0);
        if !(phi_max < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "phi must be negative; sup phi = {phi_max:e} (mu too small)"
            )));
        }
        let theta: Vec<f64> = times.iter().map(|&t| time.theta(t)).collect();
        let s: Vec<f64> = theta.iter().map(|&th| params.lambda * th).collect();
        let phi_min = phi_closure
            .iter()
            .chain(&phi_dual)
            .fold(0.0f64, |a, &b| a.min(b));
        let worst = 2.0 * s.iter().fold(0.0f64, |a, &b| a.max(b)) * phi_min.abs();
        if worst > EXPONENT_LIMIT {
            return Err(Error::WeightOverflow(worst));
        }
        Ok(Self {
            params,
            space,
            time,
            times: times.to_vec(),
            theta,
            s,
            phi_closure,
            varphi_closure,
            phi_dual,
            closure_x,
        })
    }

    pub fn n(&self) -> usize {
        self.phi_closure.len() - 2
    }

    /// `φ` at primal node `i ∈ 1..=N`.
    pub fn phi_primal(&self, i: usize) -> f64 {
        self.phi_closure[i]
    }

    /// `r = e^{sφ}` at time index `k`, closure node `i`.
    pub fn r(&self, k: usize, i: usize) -> f64 {
        (self.s[k] * self.phi_closure[i]).exp()
    }

    pub fn rho(&self, k: usize, i: usize) -> f64 {
        (-self.s[k] * self.phi_closure[i]).exp()
    }

    /// `e^{−2 s_k φ}` on the primal nodes.
    pub fn decay_primal(&self, k: usize) -> Vec<f64> {
        let s = self.s[k];
        self.phi_closure[1..=self.n()]
            .iter()
            .map(|&p| (-2.0 * s * p).exp())
            .collect()
    }

    /// `2ϕ ≤ μe^{6μ(m+1)}` on the mesh, the pointwise form of
    /// `e^{2s(T)φ} ≤ e^{−s(T)μe^{6μ(m+1)}}`.
    pub fn terminal_bound_holds(&self) -> bool {
        let k = self.space.shift();
        let st = self.params.lambda * self.time.theta_final();
        self.phi_closure
            .iter()
            .all(|&p| 2.0 * st * p <= -st * k * (1.0 + 1e-14))
    }

    /// Max |rρ − 1| over the table.
    pub fn inverse_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..self.s.len() {
            for i in 0..self.phi_closure.len() {
                worst = worst.max((self.r(k, i) * self.rho(k, i) - 1.0).abs());
            }
        }
        worst
    }
}

/// Discrete/continuous weight expressions compared by `expansion_order`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExpansionExpr {
    /// `r D_h ρ` vs `r ∂ρ = −sφ'`.
    RDiffRho,
    /// `r D_h² ρ` vs `s²φ'² − sφ''`.
    RDiff2Rho,
    /// `A_h D_h (r D_h ρ)` vs `∂(r∂ρ) = −sφ''`.
    AvgDiffRDiffRho,
    /// `r² D_h²ρ · A_h D_h ρ` vs `(s²φ'² − sφ'')(−sφ')`.
    ProductTerm,
}

impl ExpansionExpr {
    pub const ALL: [ExpansionExpr; 4] = [
        ExpansionExpr::RDiffRho,
        ExpansionExpr::RDiff2Rho,
        ExpansionExpr::AvgDiffRDiffRho,
        ExpansionExpr::ProductTerm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExpansionExpr::RDiffRho => "r_diff_rho",
            ExpansionExpr::RDiff2Rho => "r_diff2_rho",
            ExpansionExpr::AvgDiffRDiffRho => "avg_diff_r_diff_rho",
            ExpansionExpr::ProductTerm => "r2_diff2_rho_avg_diff_rho",
        }
    }

    /// Power of s in the leading term.
    fn order(self) -> i32 {
        match self {
            ExpansionExpr::RDiffRho | ExpansionExpr::AvgDiffRDiffRho => 1,
            ExpansionExpr::RDiff2Rho => 2,
            ExpansionExpr::ProductTerm => 3,
        }
    }
}

/// `r(x) D_h ρ(x)` with half-step stencil, from exponent differences.
fn r_diff_rho(w: &SpaceWeight, s: f64, x: f64, h: f64) -> f64 {
    let p = w.phi(x);
    ((-s * (w.phi(x + 0.5 * h) - p)).exp_m1() - (-s * (w.phi(x - 0.5 * h) - p)).exp_m1()) / h
}

fn r_diff2_rho(w: &SpaceWeight, s: f64, x: f64, h: f64) -> f64 {
    let p = w.phi(x);
    ((-s * (w.phi(x + h) - p)).exp_m1() + (-s * (w.phi(x - h) - p)).exp_m1()) / (h * h)
}

/// `r(x) A_h D_h ρ(x) = r(x)(ρ(x+h) − ρ(x−h))/(2h)`.
fn r_avg_diff_rho(w: &SpaceWeight, s: f64, x: f64, h: f64) -> f64 {
    let p = w.phi(x);
    ((-s * (w.phi(x + h) - p)).exp_m1() - (-s * (w.phi(x - h) - p)).exp_m1()) / (2.0 * h)
}

fn discrete(expr: ExpansionExpr, w: &SpaceWeight, s: f64, x: f64, h: f64) -> f64 {
    match expr {
        ExpansionExpr::RDiffRho => r_diff_rho(w, s, x, h),
        ExpansionExpr::RDiff2Rho => r_diff2_rho(w, s, x, h),
        ExpansionExpr::AvgDiffRDiffRho => {
            (r_diff_rho(w, s, x + h, h) - r_diff_rho(w, s, x - h, h)) / (2.0 * h)
        }
        ExpansionExpr::ProductTerm => r_diff2_rho(w, s, x, h) * r_avg_diff_rho(w, s, x, h),
    }
}

fn continuous(expr: ExpansionExpr, w: &SpaceWeight, s: f64, x: f64) -> f64 {
    let (p1, p2) = (w.phi_x(x), w.phi_xx(x));
    match expr {
        ExpansionExpr::RDiffRho => -s * p1,
        ExpansionExpr::RDiff2Rho => s * s * p1 * p1 - s * p2,
        ExpansionExpr::AvgDiffRDiffRho => -s * p2,
        ExpansionExpr::ProductTerm => (s * s * p1 * p1 - s * p2) * (-s * p1),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionReport {
    pub expr: &'static str,
    pub hs: Vec<f64>,
    /// `s^{−n} max|discrete − continuous|` per h.
    pub errors: Vec<f64>,
    /// Least-squares slope of log error vs log h; `None` when some error is 0.
    pub slope: Option<f64>,
}

/// Fitted order of the discrete-vs-continuous remainder at `t = T`.
///
/// `lambda = 0` is accepted and gives identically zero errors. Errors are
/// sampled at the primal nodes of the coarsest mesh so each h sees the
/// same points.
pub fn expansion_order(
    hs: &[f64],
    params: &WeightParams,
    regions: &Regions,
    expr: ExpansionExpr,
    eps0: f64,
) -> Result<ExpansionReport> {
    if hs.len() < 2 || hs.windows(2).any(|p| !(p[1] < p[0])) {
        return Err(Error::InvalidParameter(
            "need a decreasing sequence of h".into(),
        ));
    }
    let s = if params.lambda == 0.0 {
        0.0
    } else {
        let time = build_time_weight(
            params.t_final,
            params.m,
            params.delta,
            params.lambda,
            params.mu,
        )?;
        for &h in hs {
            let value =
                admissibility_value(params.lambda, h, params.delta, params.t_final, params.m);
            if value > eps0 {
                return Err(Error::Inadmissible { value, eps0 });
            }
        }
        params.lambda * time.theta_final()
    };
    let w = SpaceWeight {
        psi: build_psi(regions),
        mu: params.mu,
        m: params.m,
    };
    let coarse = (1.0 / hs[0]).round() as usize;
    let xs: Vec<f64> = (1..coarse).map(|i| i as f64 / coarse as f64).collect();
    let scale = if s == 0.0 { 1.0 } else { s.powi(-expr.order()) };
    let errors: Vec<f64> = hs
        .iter()
        .map(|&h| {
            xs.iter()
                .map(|&x| (discrete(expr, &w, s, x, h) - continuous(expr, &w, s, x)).abs())
                .fold(0.0f64, f64::max)
                * scale
        })
        .collect();
    let slope = if errors.iter().all(|&e| e > 0.0) {
        let lx: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
        let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        Some(linear_fit(&lx, &ly).slope)
    } else {
        None
    };
    Ok(ExpansionReport {
        expr: expr.name(),
        hs: hs.to_vec(),
        errors,
        slope,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    LinearFit {
        slope,
        intercept: my - slope * mx,
        r2,
    }
}
