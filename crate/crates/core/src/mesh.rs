//! Uniform mesh on (0,1), its dual meshes, and the control regions.
//!
//! Nodes are addressed in doubled integer coordinates: primal node `i`
//! sits at `2i`, dual node `j` (at `(j+1/2)h`) sits at `2j+1`. The shifts
//! are then exact integer moves by one.

use std::collections::BTreeSet;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Open interval `(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    fn exact(&self) -> Result<(Ratio<i64>, Ratio<i64>)> {
        Ok((decimal_ratio(self.lo)?, decimal_ratio(self.hi)?))
    }
}

/// Shortest decimal (up to 12 digits) that rounds to `x`.
fn decimal_ratio(x: f64) -> Result<Ratio<i64>> {
    if !x.is_finite() {
        return Err(Error::InvalidParameter(format!("interval endpoint {x}")));
    }
    let mut den: i64 = 1;
    for _ in 0..=12 {
        let num = (x * den as f64).round();
        if num / den as f64 == x {
            return Ok(Ratio::new(num as i64, den));
        }
        den *= 10;
    }
    Err(Error::InvalidParameter(format!(
        "interval endpoint {x} is not a short decimal"
    )))
}

/// The three nested regions `G0 ⊃ G1 ⊃ G2`; `G0` carries the distributed control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regions {
    pub g0: Interval,
    pub g1: Interval,
    pub g2: Interval,
}

impl Default for Regions {
    fn default() -> Self {
        Self {
            g0: Interval::new(0.3, 0.9),
            g1: Interval::new(0.35, 0.85),
            g2: Interval::new(0.45, 0.75),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    G0,
    G1,
    G2,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::G0 => "G0",
            Region::G1 => "G1",
            Region::G2 => "G2",
        }
    }

    fn slot(self) -> usize {
        match self {
            Region::G0 => 0,
            Region::G1 => 1,
            Region::G2 => 2,
        }
    }
}

/// One of the two endpoints of `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum BoundaryNode {
    Left,
    Right,
}

/// A finite set of nodes in doubled coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SubMesh {
    points: BTreeSet<i64>,
}

impl SubMesh {
    pub fn from_points(points: impl IntoIterator<Item = i64>) -> Self {
        Self {
            points: points.into_iter().collect(),
        }
    }

    /// Primal nodes `i..=j` in mesh indices.
    pub fn primal_range(first: usize, last: usize) -> Self {
        Self::from_points((first..=last).map(|i| 2 * i as i64))
    }

    pub fn points(&self) -> impl Iterator<Item = i64> + '_ {
        self.points.iter().copied()
    }

    pub fn contains(&self, p: i64) -> bool {
        self.points.contains(&p)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `τ₊(W) ∪ τ₋(W)`.
    pub fn star(&self) -> Self {
        Self::from_points(self.points.iter().flat_map(|&p| [p - 1, p + 1]))
    }

    /// `τ₊(W) ∩ τ₋(W)`.
    pub fn prime(&self) -> Self {
        Self::from_points(
            self.points
                .iter()
                .map(|&p| p + 1)
                .filter(|q| self.points.contains(&(q + 1))),
        )
    }

    pub fn closure(&self) -> Self {
        self.star().star()
    }

    pub fn ring(&self) -> Self {
        self.prime().prime()
    }

    pub fn boundary(&self) -> Self {
        let closure = self.closure();
        Self::from_points(closure.points().filter(|p| !self.contains(*p)))
    }

    /// Outward normal at a boundary point of this set.
    pub fn outward_normal(&self, x: i64) -> Result<i8> {
        if !self.boundary().contains(x) {
            return Err(Error::InvalidParameter(format!(
                "doubled coordinate {x} is not on the boundary"
            )));
        }
        let dual = self.star();
        let minus = dual.contains(x - 1);
        let plus = dual.contains(x + 1);
        Ok(match (minus, plus) {
            (true, false) => 1,
            (false, true) => -1,
            _ => 0,
        })
    }

    /// Trace at a boundary point of a function given on `W*`.
    pub fn trace(&self, u: impl Fn(i64) -> f64, x: i64) -> Result<f64> {
        Ok(match self.outward_normal(x)? {
            1 => u(x - 1),
            -1 => u(x + 1),
            _ => 0.0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    n: usize,
    h: f64,
    regions: Regions,
    primal_masks: [Vec<bool>; 3],
    dual_masks: [Vec<bool>; 3],
}

pub fn build_mesh(n: usize, regions: Regions) -> Result<Mesh> {
    Mesh::new(n, regions)
}

impl Mesh {
    pub fn new(n: usize, regions: Regions) -> Result<Self> {
        if n < 2 {
            return Err(Error::TooFewNodes(n));
        }
        check_nesting(&regions)?;
        let den = n as i64 + 1;
        let mut primal_masks: [Vec<bool>; 3] = Default::default();
        let mut dual_masks: [Vec<bool>; 3] = Default::default();
        for region in [Region::G0, Region::G1, Region::G2] {
            let (lo, hi) = pick(&regions, region).exact()?;
            let inside = |x: Ratio<i64>| lo < x && x < hi;
            let primal: Vec<bool> = (1..=n as i64).map(|i| inside(Ratio::new(i, den))).collect();
            if !primal.iter().any(|&b| b) {
                return Err(Error::RegionEmpty {
                    region: region.name(),
                    n,
                });
            }
            primal_masks[region.slot()] = primal;
            dual_masks[region.slot()] = (0..=n as i64)
                .map(|j| inside(Ratio::new(2 * j + 1, 2 * den)))
                .collect();
        }
        let mesh = Self {
            n,
            h: 1.0 / den as f64,
            regions,
            primal_masks,
            dual_masks,
        };
        let g2_closure = mesh.region_submesh(Region::G2).closure();
        let g1 = mesh.region_submesh(Region::G1);
        if g2_closure.points().any(|p| !g1.contains(p)) {
            return Err(Error::RegionNesting(format!(
                "closure of the G2 nodes is not inside the G1 nodes at N={n}"
            )));
        }
        Ok(mesh)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn regions(&self) -> &Regions {
        &self.regions
    }

    /// `x_i = i/(N+1)` for closure index `i`.
    pub fn closure_coordinate(&self, i: usize) -> f64 {
        i as f64 / (self.n + 1) as f64
    }

    /// `x_{j+1/2}` for dual index `j`.
    pub fn dual_coordinate(&self, j: usize) -> f64 {
        (2 * j + 1) as f64 / (2 * (self.n + 1)) as f64
    }

    pub fn primal_nodes(&self) -> Vec<f64> {
        (1..=self.n).map(|i| self.closure_coordinate(i)).collect()
    }

    pub fn closure_nodes(&self) -> Vec<f64> {
        (0..=self.n + 1)
            .map(|i| self.closure_coordinate(i))
            .collect()
    }

    pub fn dual_nodes(&self) -> Vec<f64> {
        (0..=self.n).map(|j| self.dual_coordinate(j)).collect()
    }

    pub fn primal_set(&self) -> SubMesh {
        SubMesh::primal_range(1, self.n)
    }

    /// Mask over primal nodes `1..=N` (stored at offsets `0..N`).
    pub fn primal_mask(&self, region: Region) -> &[bool] {
        &self.primal_masks[region.slot()]
    }

    /// Mask over dual nodes `0..=N`.
    pub fn dual_mask(&self, region: Region) -> &[bool] {
        &self.dual_masks[region.slot()]
    }

    /// Primal mask as 0/1 weights.
    pub fn indicator(&self, region: Region) -> Vec<f64> {
        self.primal_mask(region)
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn region_submesh(&self, region: Region) -> SubMesh {
        SubMesh::from_points(
            self.primal_mask(region)
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| 2 * (i as i64 + 1)),
        )
    }

    pub fn boundary_node(&self, closure_index: usize) -> Result<BoundaryNode> {
        if closure_index == 0 {
            Ok(BoundaryNode::Left)
        } else if closure_index == self.n + 1 {
            Ok(BoundaryNode::Right)
        } else {
            Err(Error::NotBoundary(closure_index))
        }
    }

    pub fn closure_index(&self, x: BoundaryNode) -> usize {
        match x {
            BoundaryNode::Left => 0,
            BoundaryNode::Right => self.n + 1,
        }
    }
}

/// Outward normal of the full mesh at a closure index.
pub fn outward_normal(mesh: &Mesh, closure_index: usize) -> Result<i8> {
    mesh.boundary_node(closure_index)?;
    mesh.primal_set().outward_normal(2 * closure_index as i64)
}

fn pick(regions: &Regions, region: Region) -> &Interval {
    match region {
        Region::G0 => &regions.g0,
        Region::G1 => &regions.g1,
        Region::G2 => &regions.g2,
    }
}

fn check_nesting(r: &Regions) -> Result<()> {
    for (name, iv) in [("G0", r.g0), ("G1", r.g1), ("G2", r.g2)] {
        if !(iv.lo < iv.hi) {
            return Err(Error::RegionNesting(format!(
                "{name} = ({}, {}) is empty",
                iv.lo, iv.hi
            )));
        }
    }
    let inner_strict =
        |inner: &Interval, outer: &Interval| outer.lo < inner.lo && inner.hi < outer.hi;
    if !inner_strict(&r.g2, &r.g1) {
        return Err(Error::RegionNesting("closure of G2 must lie in G1".into()));
    }
    if !inner_strict(&r.g1, &r.g0) {
        return Err(Error::RegionNesting("closure of G1 must lie in G0".into()));
    }
    if r.g0.lo < 0.0 || r.g0.hi > 1.0 {
        return Err(Error::RegionNesting("G0 must lie in (0,1)".into()));
    }
    Ok(())
}
