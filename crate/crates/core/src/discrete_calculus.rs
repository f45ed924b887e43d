//! Difference and average operators between a mesh and its dual, discrete
//! integrals, and residual evaluators for the exact summation identities.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::{BoundaryNode, Mesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum NodeSet {
    /// Interior nodes `x_1..x_N`.
    Primal,
    /// Half-shifted nodes `x_{1/2}..x_{N+1/2}`.
    Dual,
    /// `x_0..x_{N+1}`.
    Closure,
    /// `{0, 1}`.
    Boundary,
}

impl NodeSet {
    pub fn size(self, n: usize) -> usize {
        match self {
            NodeSet::Primal => n,
            NodeSet::Dual => n + 1,
            NodeSet::Closure => n + 2,
            NodeSet::Boundary => 2,
        }
    }
}

/// Values on one tagged node set of a mesh with `n` interior nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    n: usize,
    tag: NodeSet,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(n: usize, tag: NodeSet, values: Vec<f64>) -> Result<Self> {
        let expected = tag.size(n);
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                tag,
                len: values.len(),
                expected,
            });
        }
        Ok(Self { n, tag, values })
    }

    pub fn zeros(n: usize, tag: NodeSet) -> Self {
        Self {
            n,
            tag,
            values: vec![0.0; tag.size(n)],
        }
    }

    pub fn constant(n: usize, tag: NodeSet, c: f64) -> Self {
        Self {
            n,
            tag,
            values: vec![c; tag.size(n)],
        }
    }

    /// Samples `f` at the node coordinates of `tag`.
    pub fn from_fn(mesh: &Mesh, tag: NodeSet, f: impl Fn(f64) -> f64) -> Self {
        let n = mesh.n();
        let values = match tag {
            NodeSet::Primal => (1..=n).map(|i| f(mesh.closure_coordinate(i))).collect(),
            NodeSet::Closure => (0..=n + 1).map(|i| f(mesh.closure_coordinate(i))).collect(),
            NodeSet::Dual => (0..=n).map(|j| f(mesh.dual_coordinate(j))).collect(),
            NodeSet::Boundary => vec![f(0.0), f(1.0)],
        };
        Self { n, tag, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.n + 1) as f64
    }

    pub fn tag(&self) -> NodeSet {
        self.tag
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn expect(&self, tag: NodeSet) -> Result<()> {
        if self.tag != tag {
            return Err(Error::NodeSetMismatch {
                expected: tag,
                found: self.tag,
            });
        }
        Ok(())
    }

    fn same_set(&self, other: &GridFunction) -> Result<()> {
        if self.n != other.n {
            return Err(Error::Shape(format!(
                "meshes differ: N={} vs N={}",
                self.n, other.n
            )));
        }
        other.expect(self.tag)
    }

    fn zip(&self, other: &GridFunction, op: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_set(other)?;
        Ok(Self {
            n: self.n,
            tag: self.tag,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| op(a, b))
                .collect(),
        })
    }

    pub fn mul(&self, other: &GridFunction) -> Result<Self> {
        self.zip(other, |a, b| a * b)
    }

    pub fn add(&self, other: &GridFunction) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            n: self.n,
            tag: self.tag,
            values: self.values.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|a| c * a)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    /// Closure values from interior values and the two boundary values.
    pub fn extend_with(&self, left: f64, right: f64) -> Result<Self> {
        self.expect(NodeSet::Primal)?;
        let mut values = Vec::with_capacity(self.n + 2);
        values.push(left);
        values.extend_from_slice(&self.values);
        values.push(right);
        Ok(Self {
            n: self.n,
            tag: NodeSet::Closure,
            values,
        })
    }

    /// Zero (homogeneous Dirichlet) extension to the closure.
    pub fn extend_dirichlet(&self) -> Result<Self> {
        self.extend_with(0.0, 0.0)
    }

    pub fn interior(&self) -> Result<Self> {
        self.expect(NodeSet::Closure)?;
        Ok(Self {
            n: self.n,
            tag: NodeSet::Primal,
            values: self.values[1..=self.n].to_vec(),
        })
    }

    pub fn boundary_values(&self) -> Result<Self> {
        self.expect(NodeSet::Closure)?;
        Ok(Self {
            n: self.n,
            tag: NodeSet::Boundary,
            values: vec![self.values[0], self.values[self.n + 1]],
        })
    }
}

/// Shift-pair map: closure → dual or dual → primal.
fn stencil(u: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<GridFunction> {
    let target = match u.tag {
        NodeSet::Closure => NodeSet::Dual,
        NodeSet::Dual => NodeSet::Primal,
        found => {
            return Err(Error::NodeSetMismatch {
                expected: NodeSet::Closure,
                found,
            })
        }
    };
    Ok(GridFunction {
        n: u.n,
        tag: target,
        values: u.values.windows(2).map(|w| f(w[0], w[1])).collect(),
    })
}

/// `D_h u = (τ₊u − τ₋u)/h`.
pub fn diff(u: &GridFunction) -> Result<GridFunction> {
    let h = u.h();
    stencil(u, |a, b| (b - a) / h)
}

/// `A_h u = (τ₊u + τ₋u)/2`.
pub fn avg(u: &GridFunction) -> Result<GridFunction> {
    stencil(u, |a, b| 0.5 * (a + b))
}

/// `D_h² u` on the primal nodes.
pub fn laplace(u: &GridFunction) -> Result<GridFunction> {
    u.expect(NodeSet::Closure)?;
    diff(&diff(u)?)
}

/// `h Σ u` on volume sets, `Σ u` on the boundary.
pub fn integrate(u: &GridFunction, tag: NodeSet) -> Result<f64> {
    u.expect(tag)?;
    let sum: f64 = u.values.iter().sum();
    Ok(match tag {
        NodeSet::Boundary => sum,
        _ => u.h() * sum,
    })
}

pub fn inner(u: &GridFunction, v: &GridFunction) -> Result<f64> {
    integrate(&u.mul(v)?, u.tag)
}

/// Trace of a dual function at a boundary node of the full mesh.
pub fn trace(u: &GridFunction, x: BoundaryNode) -> Result<f64> {
    u.expect(NodeSet::Dual)?;
    // ν = -1 at the left end picks τ₊, ν = +1 at the right end picks τ₋.
    Ok(match x {
        BoundaryNode::Left => u.values[0],
        BoundaryNode::Right => u.values[u.n],
    })
}

fn normal(x: BoundaryNode) -> f64 {
    match x {
        BoundaryNode::Left => -1.0,
        BoundaryNode::Right => 1.0,
    }
}

/// Identity names, in report order.
pub const IDENTITIES: [&str; 9] = [
    "diff_product",
    "avg_product",
    "avg_diff_reconstruction",
    "avg_of_square",
    "avg_square_inequality",
    "diff_of_square",
    "diff_summation_by_parts",
    "avg_summation_by_parts",
    "boundary_trace",
];

/// Pointwise relative residual: max |lhs − rhs| over max Σ|terms|.
fn pointwise(diffs: &[f64], scale: &[f64]) -> f64 {
    let num = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let den = scale.iter().fold(0.0f64, |m, s| m.max(*s));
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn scalar(diff: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        diff.abs()
    } else {
        diff.abs() / scale
    }
}

/// Relative residuals of the exact calculus identities.
///
/// `u`, `v` live on the closure, `w` on the dual mesh.
pub fn identity_residuals(
    u: &GridFunction,
    v: &GridFunction,
    w: &GridFunction,
) -> Result<BTreeMap<&'static str, f64>> {
    u.expect(NodeSet::Closure)?;
    u.same_set(v)?;
    w.expect(NodeSet::Dual)?;
    if w.n != u.n {
        return Err(Error::Shape("w lives on a different mesh".into()));
    }
    let n = u.n;
    let h = u.h();
    let q = h * h / 4.0;
    let (du, au) = (diff(u)?, avg(u)?);
    let (dv, av) = (diff(v)?, avg(v)?);
    let uv = u.mul(v)?;
    let uu = u.mul(u)?;
    let mut out = BTreeMap::new();

    let d_uv = diff(&uv)?;
    let mut d = Vec::with_capacity(n + 1);
    let mut s = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let (a, b) = (du.values[j] * av.values[j], au.values[j] * dv.values[j]);
        d.push(d_uv.values[j] - a - b);
        s.push(d_uv.values[j].abs() + a.abs() + b.abs());
    }
    out.insert(IDENTITIES[0], pointwise(&d, &s));

    let a_uv = avg(&uv)?;
    d.clear();
    s.clear();
    for j in 0..=n {
        let (a, b) = (au.values[j] * av.values[j], q * du.values[j] * dv.values[j]);
        d.push(a_uv.values[j] - a - b);
        s.push(a_uv.values[j].abs() + a.abs() + b.abs());
    }
    out.insert(IDENTITIES[1], pointwise(&d, &s));

    let aau = avg(&au)?;
    let ddu = diff(&du)?;
    d.clear();
    s.clear();
    for i in 0..n {
        let (a, b) = (aau.values[i], q * ddu.values[i]);
        d.push(u.values[i + 1] - a + b);
        s.push(u.values[i + 1].abs() + a.abs() + b.abs());
    }
    out.insert(IDENTITIES[2], pointwise(&d, &s));

    let a_uu = avg(&uu)?;
    d.clear();
    s.clear();
    let mut excess = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let (a, b) = (au.values[j] * au.values[j], q * du.values[j] * du.values[j]);
        d.push(a_uu.values[j] - a - b);
        s.push(a_uu.values[j].abs() + a + b);
        excess.push((a - a_uu.values[j]).max(0.0));
    }
    out.insert(IDENTITIES[3], pointwise(&d, &s));
    out.insert(IDENTITIES[4], pointwise(&excess, &s));

    let d_uu = diff(&uu)?;
    d.clear();
    s.clear();
    for j in 0..=n {
        let a = 2.0 * du.values[j] * au.values[j];
        d.push(d_uu.values[j] - a);
        s.push(d_uu.values[j].abs() + a.abs());
    }
    out.insert(IDENTITIES[5], pointwise(&d, &s));

    let ui = u.interior()?;
    let dw = diff(w)?;
    let awp = avg(w)?;
    let boundary: Vec<(f64, f64, f64)> = [BoundaryNode::Left, BoundaryNode::Right]
        .into_iter()
        .map(|x| {
            let ux = u.values[if x == BoundaryNode::Left { 0 } else { n + 1 }];
            (ux, trace(w, x).unwrap_or(0.0), normal(x))
        })
        .collect();

    let lhs = inner(&ui, &dw)?;
    let vol = inner(&du, w)?;
    let bnd: f64 = boundary.iter().map(|(ux, t, nu)| ux * t * nu).sum();
    let scale = h * ui
        .values
        .iter()
        .zip(&dw.values)
        .map(|(a, b)| (a * b).abs())
        .sum::<f64>()
        + h * du
            .values
            .iter()
            .zip(&w.values)
            .map(|(a, b)| (a * b).abs())
            .sum::<f64>()
        + boundary
            .iter()
            .map(|(ux, t, _)| (ux * t).abs())
            .sum::<f64>();
    out.insert(IDENTITIES[6], scalar(lhs + vol - bnd, scale));

    let lhs = inner(&ui, &awp)?;
    let vol = inner(&au, w)?;
    let bnd: f64 = boundary.iter().map(|(ux, t, _)| ux * t).sum::<f64>() * h / 2.0;
    let scale = h * ui
        .values
        .iter()
        .zip(&awp.values)
        .map(|(a, b)| (a * b).abs())
        .sum::<f64>()
        + h * au
            .values
            .iter()
            .zip(&w.values)
            .map(|(a, b)| (a * b).abs())
            .sum::<f64>()
        + bnd.abs();
    out.insert(IDENTITIES[7], scalar(lhs - vol + bnd, scale));

    let au2 = au.mul(&au)?;
    let du2 = du.mul(&du)?;
    let mut worst = 0.0f64;
    for x in [BoundaryNode::Left, BoundaryNode::Right] {
        let nu = normal(x);
        let ux = u.values[if x == BoundaryNode::Left { 0 } else { n + 1 }];
        let a = trace(&au2, x)? * nu;
        let b = q * trace(&du2, x)? * nu;
        let c = ux * ux * nu;
        let e = h * ux * trace(&du, x)?;
        worst = worst.max(scalar(
            (a - b) - (c - e),
            a.abs() + b.abs() + c.abs() + e.abs(),
        ));
    }
    out.insert(IDENTITIES[8], worst);
    Ok(out)
}
