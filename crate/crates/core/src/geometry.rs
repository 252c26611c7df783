//! Geometric mesh: corner sectors with geometrically graded layers in
//! log-polar coordinates and an interior quadrilateral mesh, with the
//! coordinate maps, metrics, edge adjacency and distance weights.
//!
//! Vertex `k` owns the sector of radius `ρ` about `A_k`. In sector
//! coordinates `ν = ln r` and `φ ∈ [ψ_l, ψ_u]`; the global polar angle is
//! `θ0_k + s (φ − ψ_l)` where `θ0_k` is the direction of `A_{k+1} − A_k` and
//! `s = ω_k / (ψ_u − ψ_l)`. The side `φ = ψ_l` lies on edge `k + 1` and the
//! side `φ = ψ_u` on edge `k`.
//!
//! Master-square sides are numbered counter-clockwise: side `s` runs from
//! corner `s` to corner `s + 1` and is parametrized by `t ∈ [−1, 1]` as
//! `(t, −1)`, `(1, t)`, `(−t, 1)`, `(−1, −t)`.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::Serialize;

use crate::probdef::{BcKind, EllipticProblem};
use crate::Error;

pub type Point = [f64; 2];

/// Map from `(ν, φ)` to the plane for one vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectorFrame {
    pub apex: Point,
    pub theta0: f64,
    pub omega: f64,
    pub psi_l: f64,
    pub psi_u: f64,
}

impl SectorFrame {
    /// Angular scale `s = ω / (ψ_u − ψ_l)`; also the Jacobian of `(ν,φ) → (τ,θ)`.
    pub fn scale(&self) -> f64 {
        self.omega / (self.psi_u - self.psi_l)
    }

    pub fn theta(&self, phi: f64) -> f64 {
        self.theta0 + self.scale() * (phi - self.psi_l)
    }

    pub fn map(&self, nu: f64, phi: f64) -> Point {
        let r = nu.exp();
        let th = self.theta(phi);
        [self.apex[0] + r * th.cos(), self.apex[1] + r * th.sin()]
    }

    pub fn jacobian(&self) -> f64 {
        self.scale()
    }

    /// Closed-form inverse; `φ` is returned in `[ψ_l, ψ_l + 2π / s)`.
    pub fn inverse(&self, x: Point) -> (f64, f64) {
        let dx = x[0] - self.apex[0];
        let dy = x[1] - self.apex[1];
        let nu = dx.hypot(dy).ln();
        let mut d = dy.atan2(dx) - self.theta0;
        d = d.rem_euclid(2.0 * PI);
        if d > self.omega + 0.5 * (2.0 * PI - self.omega) {
            d -= 2.0 * PI;
        }
        (nu, self.psi_l + d / self.scale())
    }
}

/// Index of an element in the global element list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize, PartialOrd, Ord)]
pub enum ElemRef {
    Sector(usize),
    Interior(usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct SectorElement {
    pub k: usize,
    /// Angular index `0..I_k`.
    pub i: usize,
    /// Layer index `1..=M`.
    pub j: usize,
    /// `(ν_j, ν_{j+1})`; the lower end is `−∞` for layer 1.
    pub nu: (f64, f64),
    pub phi: (f64, f64),
    /// Polynomial degree; 0 for layer 1.
    pub degree: usize,
}

impl SectorElement {
    pub fn half_nu(&self) -> f64 {
        0.5 * (self.nu.1 - self.nu.0)
    }

    pub fn half_phi(&self) -> f64 {
        0.5 * (self.phi.1 - self.phi.0)
    }

    /// `(ν, φ)` of a master point.
    pub fn to_nu_phi(&self, xi: f64, eta: f64) -> (f64, f64) {
        (
            0.5 * (self.nu.0 + self.nu.1) + self.half_nu() * xi,
            0.5 * (self.phi.0 + self.phi.1) + self.half_phi() * eta,
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InteriorElement {
    pub l: usize,
    /// Corners in counter-clockwise order, images of `(−1,−1), (1,−1), (1,1), (−1,1)`.
    pub corners: [Point; 4],
    pub degree: usize,
}

/// Inverse-Jacobian entries of a bilinear map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric {
    pub xi_x: f64,
    pub xi_y: f64,
    pub eta_x: f64,
    pub eta_y: f64,
    pub det: f64,
}

/// Second derivatives `[ξ_xx, ξ_xy, ξ_yy]` and `[η_xx, η_xy, η_yy]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric2 {
    pub xi: [f64; 3],
    pub eta: [f64; 3],
}

impl InteriorElement {
    pub fn map(&self, xi: f64, eta: f64) -> Point {
        let n = shape(xi, eta);
        let mut x = [0.0; 2];
        for a in 0..4 {
            x[0] += n[a] * self.corners[a][0];
            x[1] += n[a] * self.corners[a][1];
        }
        x
    }

    /// Forward Jacobian `[[x_ξ, x_η], [y_ξ, y_η]]`.
    pub fn jacobian(&self, xi: f64, eta: f64) -> [[f64; 2]; 2] {
        let c = &self.corners;
        let dxi = [-(1.0 - eta), 1.0 - eta, 1.0 + eta, -(1.0 + eta)];
        let deta = [-(1.0 - xi), -(1.0 + xi), 1.0 + xi, 1.0 - xi];
        let mut j = [[0.0; 2]; 2];
        for a in 0..4 {
            for r in 0..2 {
                j[r][0] += 0.25 * dxi[a] * c[a][r];
                j[r][1] += 0.25 * deta[a] * c[a][r];
            }
        }
        j
    }

    /// Mixed derivative `(x_ξη, y_ξη)`; the pure second derivatives vanish.
    fn mixed(&self) -> [f64; 2] {
        let c = &self.corners;
        let w = [0.25, -0.25, 0.25, -0.25];
        [
            (0..4).map(|a| w[a] * c[a][0]).sum(),
            (0..4).map(|a| w[a] * c[a][1]).sum(),
        ]
    }

    pub fn metric(&self, xi: f64, eta: f64) -> Metric {
        let j = self.jacobian(xi, eta);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        Metric {
            xi_x: j[1][1] / det,
            xi_y: -j[0][1] / det,
            eta_x: -j[1][0] / det,
            eta_y: j[0][0] / det,
            det,
        }
    }

    /// Second derivatives of the inverse map from `∂G/∂x_s = −G (∂J/∂x_s) G`.
    pub fn metric2(&self, xi: f64, eta: f64) -> Metric2 {
        let m = self.metric(xi, eta);
        let g = [[m.xi_x, m.xi_y], [m.eta_x, m.eta_y]];
        let x = self.mixed();
        let dj_dxi = [[0.0, x[0]], [0.0, x[1]]];
        let dj_deta = [[x[0], 0.0], [x[1], 0.0]];
        let mut dg = [[[0.0; 2]; 2]; 2];
        for s in 0..2 {
            let mut dj = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    dj[r][c] = dj_dxi[r][c] * g[0][s] + dj_deta[r][c] * g[1][s];
                }
            }
            for a in 0..2 {
                for b in 0..2 {
                    let mut v = 0.0;
                    for p in 0..2 {
                        for q in 0..2 {
                            v += g[a][p] * dj[p][q] * g[q][b];
                        }
                    }
                    dg[s][a][b] = -v;
                }
            }
        }
        // ξ_rs = ∂_s (G[0][r])
        Metric2 {
            xi: [dg[0][0][0], 0.5 * (dg[1][0][0] + dg[0][0][1]), dg[1][0][1]],
            eta: [dg[0][1][0], 0.5 * (dg[1][1][0] + dg[0][1][1]), dg[1][1][1]],
        }
    }

    /// Newton inversion of the bilinear map.
    pub fn inverse(&self, x: Point) -> Result<(f64, f64), Error> {
        let (mut xi, mut eta) = (0.0, 0.0);
        for _ in 0..60 {
            let p = self.map(xi, eta);
            let r = [p[0] - x[0], p[1] - x[1]];
            let m = self.metric(xi, eta);
            let dxi = m.xi_x * r[0] + m.xi_y * r[1];
            let deta = m.eta_x * r[0] + m.eta_y * r[1];
            xi -= dxi;
            eta -= deta;
            if dxi.abs().max(deta.abs()) < 1e-15 {
                return Ok((xi, eta));
            }
        }
        let p = self.map(xi, eta);
        if (p[0] - x[0]).hypot(p[1] - x[1]) < 1e-12 {
            return Ok((xi, eta));
        }
        Err(Error::Mesh(format!(
            "bilinear inversion failed for point ({}, {}) in quad {}",
            x[0], x[1], self.l
        )))
    }
}

fn shape(xi: f64, eta: f64) -> [f64; 4] {
    [
        0.25 * (1.0 - xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 + eta),
        0.25 * (1.0 - xi) * (1.0 + eta),
    ]
}

/// Master coordinates of the point with parameter `t` on side `s`.
pub fn side_point(s: usize, t: f64) -> (f64, f64) {
    match s {
        0 => (t, -1.0),
        1 => (1.0, t),
        2 => (-t, 1.0),
        3 => (-1.0, -t),
        _ => panic!("side index {s} out of range"),
    }
}

/// Derivative of [`side_point`] with respect to `t`.
pub fn side_tangent(s: usize) -> (f64, f64) {
    match s {
        0 => (1.0, 0.0),
        1 => (0.0, 1.0),
        2 => (-1.0, 0.0),
        3 => (0.0, -1.0),
        _ => panic!("side index {s} out of range"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    SectorInternal,
    SectorArcInterface,
    InteriorInternal,
    BoundaryDirichlet,
    BoundaryNeumann,
    Layer1Interface,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Frame {
    /// `(ν, φ)` of vertex `k`.
    Sector(usize),
    /// Master `(ξ, η)` pullback.
    Interior,
}

/// One element side belonging to an edge. The edge parameter `t` maps to
/// the side's own parameter as `t` or `−t` (when `reversed`); arc-interface
/// interior sides are sampled by inversion instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EdgeSide {
    pub elem: ElemRef,
    pub local: usize,
    pub reversed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeshEdge {
    pub id: usize,
    pub kind: EdgeKind,
    pub sides: Vec<EdgeSide>,
    pub frame: Frame,
    /// `d(A_k, γ)` for sector-region edges.
    pub dist: Option<f64>,
    pub weight: f64,
    pub finite_measure: bool,
    /// Polygon edge for boundary edges.
    pub boundary_edge: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VertexData {
    pub k: usize,
    pub apex: Point,
    pub omega: f64,
    pub theta0: f64,
    pub mu: f64,
    pub lambda: f64,
    /// `σ_1 .. σ_{M+1}` with `σ_1 = 0` and `σ_{M+1} = ρ`.
    pub sigma: Vec<f64>,
    /// `ψ_0 .. ψ_{I_k}`.
    pub psi: Vec<f64>,
    #[serde(skip)]
    pub frame: SectorFrame,
}

impl VertexData {
    pub fn n_ang(&self) -> usize {
        self.psi.len() - 1
    }

    /// `σ_j` for the 1-based layer index `j ∈ 1..=M+1`.
    pub fn sigma_j(&self, j: usize) -> f64 {
        self.sigma[j - 1]
    }

    /// `σ_j^{−2λ}` for `j ≥ 2`.
    pub fn layer_weight(&self, j: usize) -> f64 {
        self.sigma_j(j).powf(-2.0 * self.lambda)
    }
}

#[derive(Debug, Clone)]
pub struct GeometricMesh {
    pub rho: f64,
    pub m: usize,
    pub w: usize,
    pub vertices: Vec<VertexData>,
    pub sectors: Vec<SectorElement>,
    pub interiors: Vec<InteriorElement>,
    pub edges: Vec<MeshEdge>,
    /// `sector_index[k][i][j-1]` is the index into `sectors`.
    pub sector_index: Vec<Vec<Vec<usize>>>,
    /// Edge id for each `(element, local side)`.
    pub side_edges: HashMap<(ElemRef, usize), usize>,
}

/// `max(1, ceil(ω / max_angle))`, robust to rounding in the quotient.
pub fn angular_count(omega: f64, max_angle: f64) -> usize {
    ((omega / max_angle - 1e-9).ceil() as usize).max(1)
}

/// `σ_1 = 0`, `σ_j = ρ μ^{M+1−j}` for `j = 2..=M+1`.
pub fn layer_radii(rho: f64, mu: f64, m: usize) -> Vec<f64> {
    let mut s = vec![0.0];
    for j in 2..=m + 1 {
        s.push(rho * mu.powi((m + 1 - j) as i32));
    }
    s
}

/// Degree of layer `j`.
pub fn layer_degree(w: usize, m: usize, j: usize, variable: bool) -> usize {
    if j == 1 {
        return 0;
    }
    if !variable {
        return w;
    }
    let alpha = w as f64 / m as f64;
    ((alpha * j as f64 - 1e-12).ceil() as usize).clamp(2, w.max(2))
}

impl GeometricMesh {
    pub fn sector(&self, k: usize, i: usize, j: usize) -> &SectorElement {
        &self.sectors[self.sector_index[k][i][j - 1]]
    }

    pub fn sector_map(&self, k: usize, nu: f64, phi: f64) -> Result<Point, Error> {
        let f = &self.vertices[k].frame;
        let eps = 1e-12 * (1.0 + f.psi_u.abs());
        if phi < f.psi_l - eps || phi > f.psi_u + eps {
            return Err(Error::Mesh(format!(
                "φ = {phi} outside [{}, {}] at vertex {k}",
                f.psi_l, f.psi_u
            )));
        }
        Ok(f.map(nu, phi))
    }

    pub fn sector_jacobian(&self, k: usize) -> f64 {
        self.vertices[k].frame.jacobian()
    }

    pub fn interior_map(&self, l: usize, xi: f64, eta: f64) -> Point {
        self.interiors[l].map(xi, eta)
    }

    pub fn interior_metric(&self, l: usize, xi: f64, eta: f64) -> Result<Metric, Error> {
        let m = self.interiors[l].metric(xi, eta);
        if m.det <= 0.0 {
            return Err(Error::Mesh(format!("degenerate quad {l}")));
        }
        Ok(m)
    }

    pub fn elem_degree(&self, e: ElemRef) -> usize {
        match e {
            ElemRef::Sector(s) => self.sectors[s].degree,
            ElemRef::Interior(l) => self.interiors[l].degree,
        }
    }

    /// Physical point of a master point of any element.
    pub fn elem_point(&self, e: ElemRef, xi: f64, eta: f64) -> Point {
        match e {
            ElemRef::Sector(s) => {
                let el = &self.sectors[s];
                let (nu, phi) = el.to_nu_phi(xi, eta);
                self.vertices[el.k].frame.map(nu, phi)
            }
            ElemRef::Interior(l) => self.interiors[l].map(xi, eta),
        }
    }

    /// Master coordinates on side `side_idx` of `edge` for edge parameter `t`.
    pub fn edge_sample(&self, edge: &MeshEdge, side_idx: usize, t: f64) -> Result<(f64, f64), Error> {
        let side = &edge.sides[side_idx];
        if edge.kind == EdgeKind::SectorArcInterface && matches!(side.elem, ElemRef::Interior(_)) {
            let sec = &edge.sides[0];
            let (xi, eta) = side_point(sec.local, t);
            let x = self.elem_point(sec.elem, xi, eta);
            let ElemRef::Interior(l) = side.elem else { unreachable!() };
            return self.interiors[l].inverse(x).map_err(|e| {
                Error::Mesh(format!("arc edge {} at t = {t}: {e}", edge.id))
            });
        }
        let tl = if side.reversed { -t } else { t };
        Ok(side_point(side.local, tl))
    }

    /// Physical point of edge parameter `t`, taken from the first side.
    pub fn edge_point(&self, edge: &MeshEdge, t: f64) -> Point {
        let side = &edge.sides[0];
        let tl = if side.reversed { -t } else { t };
        let (xi, eta) = side_point(side.local, tl);
        self.elem_point(side.elem, xi, eta)
    }

    /// `d^{−2λ}` for sector-region edges; errors on interior edges.
    pub fn distance_weight(&self, edge: &MeshEdge) -> Result<f64, Error> {
        match (edge.frame, edge.dist) {
            (Frame::Sector(_), Some(_)) => Ok(edge.weight),
            _ => Err(Error::Mesh(format!("edge {} is not in a sector region", edge.id))),
        }
    }

    /// Physical area of a sector element.
    pub fn sector_area(&self, s: usize) -> f64 {
        let el = &self.sectors[s];
        let sc = self.vertices[el.k].frame.scale();
        let r0 = if el.j == 1 { 0.0 } else { (2.0 * el.nu.0).exp() };
        0.5 * ((2.0 * el.nu.1).exp() - r0) * (el.phi.1 - el.phi.0) * sc
    }

    /// Area of an interior quad by GLL quadrature of the Jacobian.
    pub fn interior_area(&self, l: usize) -> f64 {
        let q = crate::basis::gll_rule(4);
        let mut a = 0.0;
        for (p, &xi) in q.nodes.iter().enumerate() {
            for (r, &eta) in q.nodes.iter().enumerate() {
                a += q.weights[p] * q.weights[r] * self.interiors[l].metric(xi, eta).det;
            }
        }
        a
    }

    /// Sum of element areas less the circular segments between each arc
    /// and its chord, which are covered twice.
    pub fn covered_area(&self) -> f64 {
        let mut a: f64 = (0..self.sectors.len()).map(|s| self.sector_area(s)).sum();
        a += (0..self.interiors.len()).map(|l| self.interior_area(l)).sum::<f64>();
        for e in &self.edges {
            if e.kind == EdgeKind::SectorArcInterface {
                let ElemRef::Sector(s) = e.sides[0].elem else { continue };
                let el = &self.sectors[s];
                let dth = (el.phi.1 - el.phi.0) * self.vertices[el.k].frame.scale();
                a -= 0.5 * self.rho * self.rho * (dth - dth.sin());
            }
        }
        a
    }

    pub fn element_refs(&self) -> impl Iterator<Item = ElemRef> + '_ {
        (0..self.sectors.len())
            .map(ElemRef::Sector)
            .chain((0..self.interiors.len()).map(ElemRef::Interior))
    }
}

const UNIT_SQUARE: [Point; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
const L_SHAPE: [Point; 6] = [
    [-1.0, -1.0],
    [0.0, -1.0],
    [0.0, 0.0],
    [1.0, 0.0],
    [1.0, 1.0],
    [-1.0, 1.0],
];

fn matches_cyclic(v: &[Point], tmpl: &[Point]) -> bool {
    let p = v.len();
    if p != tmpl.len() {
        return false;
    }
    (0..p).any(|s| (0..p).all(|i| {
        let a = v[(i + s) % p];
        let b = tmpl[i];
        (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12
    }))
}

/// Radial pieces per fan quad between the sector arc and the cell boundary.
pub const FAN_SPLITS: usize = 2;

/// Builtin interior template on a grid of square cells of side `c`: cells
/// touching a polygon vertex become fans of quads between the sector arc
/// and the cell boundary, each cut into `FAN_SPLITS` radial pieces. The
/// other cells stay whole.
fn grid_template(
    prob: &EllipticProblem,
    verts: &[VertexData],
    rho: f64,
) -> Result<Vec<[Point; 4]>, Error> {
    let c = 0.5;
    if rho >= c {
        return Err(Error::Mesh(format!(
            "rho = {rho} must be below the template cell size {c}"
        )));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for v in &prob.vertices {
        x0 = x0.min(v[0]);
        y0 = y0.min(v[1]);
        x1 = x1.max(v[0]);
        y1 = y1.max(v[1]);
    }
    let nx = ((x1 - x0) / c).round() as usize;
    let ny = ((y1 - y0) / c).round() as usize;
    let mut quads = Vec::new();
    let mut fan_cells = vec![vec![false; ny]; nx];
    for vd in verts {
        let a = vd.apex;
        let mut n_cells = 0;
        for ix in 0..nx {
            for iy in 0..ny {
                let cx = x0 + (ix as f64 + 0.5) * c;
                let cy = y0 + (iy as f64 + 0.5) * c;
                if (cx - a[0]).abs() < 0.75 * c
                    && (cy - a[1]).abs() < 0.75 * c
                    && crate::probdef::point_in_polygon(&prob.vertices, cx, cy)
                {
                    if fan_cells[ix][iy] {
                        return Err(Error::Mesh("template cell touches two vertices".into()));
                    }
                    fan_cells[ix][iy] = true;
                    n_cells += 1;
                }
            }
        }
        let n = vd.n_ang();
        if n % (2 * n_cells) != 0 {
            return Err(Error::Mesh(format!(
                "template needs the angular count at vertex {} to be a multiple of {}, got {n}",
                vd.k,
                2 * n_cells
            )));
        }
        let ray = |i: usize| {
            let th = vd.frame.theta(vd.psi[i]);
            let d = [th.cos(), th.sin()];
            let inf = d[0].abs().max(d[1].abs());
            let p = [a[0] + rho * d[0], a[1] + rho * d[1]];
            let q = [a[0] + c * d[0] / inf, a[1] + c * d[1] / inf];
            (snap(p), snap(q))
        };
        let lerp = |a: Point, b: Point, t: f64| snap([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        for i in 0..n {
            let (p0, q0) = ray(i);
            let (p1, q1) = ray(i + 1);
            for r in 0..FAN_SPLITS {
                let (t0, t1) = (r as f64 / FAN_SPLITS as f64, (r + 1) as f64 / FAN_SPLITS as f64);
                quads.push([lerp(p0, q0, t0), lerp(p0, q0, t1), lerp(p1, q1, t1), lerp(p1, q1, t0)]);
            }
        }
    }
    for ix in 0..nx {
        for iy in 0..ny {
            let cx = x0 + (ix as f64 + 0.5) * c;
            let cy = y0 + (iy as f64 + 0.5) * c;
            if fan_cells[ix][iy] || !crate::probdef::point_in_polygon(&prob.vertices, cx, cy) {
                continue;
            }
            let (xa, ya) = (x0 + ix as f64 * c, y0 + iy as f64 * c);
            quads.push([[xa, ya], [xa + c, ya], [xa + c, ya + c], [xa, ya + c]]);
        }
    }
    Ok(quads)
}

fn snap(p: Point) -> Point {
    let f = |v: f64| if (v - v.round()).abs() < 1e-14 { v.round() } else { v };
    let g = |v: f64| {
        let h = 2.0 * v;
        if (h - h.round()).abs() < 1e-14 { h.round() / 2.0 } else { f(v) }
    };
    [g(p[0]), g(p[1])]
}

fn key(p: Point) -> (i64, i64) {
    ((p[0] * 1e9).round() as i64, (p[1] * 1e9).round() as i64)
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Polygon edge containing the segment `a b`, if any.
fn polygon_edge_of(prob: &EllipticProblem, a: Point, b: Point) -> Option<usize> {
    let p = prob.p();
    (0..p).find(|&e| {
        let (s, t) = prob.edge_endpoints(e);
        let len = dist(s, t);
        let on = |x: Point| {
            let cr = (t[0] - s[0]) * (x[1] - s[1]) - (t[1] - s[1]) * (x[0] - s[0]);
            let along = ((x[0] - s[0]) * (t[0] - s[0]) + (x[1] - s[1]) * (t[1] - s[1])) / len;
            cr.abs() / len < 1e-10 && along > -1e-10 && along < len + 1e-10
        };
        on(a) && on(b)
    })
}

/// Builds the geometric mesh for a validated problem.
pub fn build_geometric_mesh(prob: &EllipticProblem) -> Result<GeometricMesh, Error> {
    let p = prob.p();
    let m = prob.mesh.m;
    let w = prob.solver.w;
    let rho = prob.mesh.rho;
    if m < 2 || w < 2 {
        return Err(Error::Mesh(format!("need M ≥ 2 and W ≥ 2, got M = {m}, W = {w}")));
    }

    let mut min_d = f64::INFINITY;
    for a in 0..p {
        for b in (a + 1)..p {
            min_d = min_d.min(dist(prob.vertices[a], prob.vertices[b]));
        }
    }
    if 2.0 * rho >= min_d {
        return Err(Error::Mesh(format!(
            "rho = {rho} too large: 2 rho must stay below the minimum vertex distance {min_d}"
        )));
    }

    let mut verts = Vec::with_capacity(p);
    for k in 0..p {
        let a = prob.vertices[k];
        let next = prob.vertices[(k + 1) % p];
        let omega = prob.interior_angle(k);
        let theta0 = (next[1] - a[1]).atan2(next[0] - a[0]);
        let n_ang = angular_count(omega, prob.mesh.max_angle);
        let frame = SectorFrame {
            apex: a,
            theta0,
            omega,
            psi_l: 0.0,
            psi_u: omega,
        };
        let psi = (0..=n_ang).map(|i| omega * i as f64 / n_ang as f64).collect();
        verts.push(VertexData {
            k,
            apex: a,
            omega,
            theta0,
            mu: prob.mesh.mu[k],
            lambda: prob.lambda(k),
            sigma: layer_radii(rho, prob.mesh.mu[k], m),
            psi,
            frame,
        });
    }

    let mut sectors = Vec::new();
    let mut sector_index = Vec::with_capacity(p);
    for vd in &verts {
        let mut per_i = Vec::new();
        for i in 0..vd.n_ang() {
            let mut per_j = Vec::new();
            for j in 1..=m {
                let lo = if j == 1 { f64::NEG_INFINITY } else { vd.sigma_j(j).ln() };
                let hi = vd.sigma_j(j + 1).ln();
                per_j.push(sectors.len());
                sectors.push(SectorElement {
                    k: vd.k,
                    i,
                    j,
                    nu: (lo, hi),
                    phi: (vd.psi[i], vd.psi[i + 1]),
                    degree: layer_degree(w, m, j, prob.mesh.variable_degree),
                });
            }
            per_i.push(per_j);
        }
        sector_index.push(per_i);
    }

    let templated = matches_cyclic(&prob.vertices, &UNIT_SQUARE) || matches_cyclic(&prob.vertices, &L_SHAPE);
    let quads = match &prob.interior_quads {
        Some(q) => q.clone(),
        None if templated => grid_template(prob, &verts, rho)?,
        None => {
            return Err(Error::Mesh(
                "no interior template for this polygon; supply `interior_quads`".into(),
            ))
        }
    };
    let mut interiors = Vec::with_capacity(quads.len());
    for (l, corners) in quads.iter().enumerate() {
        let el = InteriorElement {
            l,
            corners: *corners,
            degree: w,
        };
        for a in 0..5 {
            for b in 0..5 {
                let xi = -1.0 + 0.5 * a as f64;
                let eta = -1.0 + 0.5 * b as f64;
                if el.metric(xi, eta).det <= 0.0 {
                    return Err(Error::Mesh(format!(
                        "interior quad {l} is not orientation-preserving at ({xi}, {eta})"
                    )));
                }
            }
        }
        interiors.push(el);
    }

    let mut edges: Vec<MeshEdge> = Vec::new();
    let mut side_edges = HashMap::new();
    let push = |edges: &mut Vec<MeshEdge>, side_edges: &mut HashMap<(ElemRef, usize), usize>, mut e: MeshEdge| {
        e.id = edges.len();
        for s in &e.sides {
            side_edges.insert((s.elem, s.local), e.id);
        }
        edges.push(e);
    };
    let bc_kind = |e: usize| match prob.edges[e].bc {
        BcKind::Dirichlet => EdgeKind::BoundaryDirichlet,
        BcKind::Neumann => EdgeKind::BoundaryNeumann,
    };

    // Sector edges.
    for vd in &verts {
        let k = vd.k;
        let sw = |d: f64| d.powf(-2.0 * vd.lambda);
        let n = vd.n_ang();
        for j in 1..=m {
            let finite = j >= 2;
            let d = vd.sigma_j(j);
            let weight = if finite { sw(d) } else { 0.0 };
            for i in 0..=n {
                let (kind, sides, bnd) = if i == 0 {
                    let e = (k + 1) % p;
                    (bc_kind(e), vec![side(ElemRef::Sector(sector_index[k][0][j - 1]), 0, false)], Some(e))
                } else if i == n {
                    (bc_kind(k), vec![side(ElemRef::Sector(sector_index[k][n - 1][j - 1]), 2, false)], Some(k))
                } else {
                    (
                        EdgeKind::SectorInternal,
                        vec![
                            side(ElemRef::Sector(sector_index[k][i][j - 1]), 0, false),
                            side(ElemRef::Sector(sector_index[k][i - 1][j - 1]), 2, true),
                        ],
                        None,
                    )
                };
                push(&mut edges, &mut side_edges, MeshEdge {
                    id: 0,
                    kind,
                    sides,
                    frame: Frame::Sector(k),
                    dist: Some(d),
                    weight,
                    finite_measure: finite,
                    boundary_edge: bnd,
                });
            }
        }
        for i in 0..n {
            for j in 1..m {
                let d = vd.sigma_j(j + 1);
                let kind = if j == 1 { EdgeKind::Layer1Interface } else { EdgeKind::SectorInternal };
                push(&mut edges, &mut side_edges, MeshEdge {
                    id: 0,
                    kind,
                    sides: vec![
                        side(ElemRef::Sector(sector_index[k][i][j]), 3, false),
                        side(ElemRef::Sector(sector_index[k][i][j - 1]), 1, true),
                    ],
                    frame: Frame::Sector(k),
                    dist: Some(d),
                    weight: sw(d),
                    finite_measure: true,
                    boundary_edge: None,
                });
            }
        }
    }

    // Interior sides: pair by endpoints, then classify the rest.
    let mut by_key: HashMap<((i64, i64), (i64, i64)), Vec<(usize, usize, bool)>> = HashMap::new();
    let mut order = Vec::new();
    for el in &interiors {
        for s in 0..4 {
            let a = el.corners[s];
            let b = el.corners[(s + 1) % 4];
            let (ka, kb) = (key(a), key(b));
            let (lo, hi, fwd) = if ka <= kb { (ka, kb, true) } else { (kb, ka, false) };
            let entry = by_key.entry((lo, hi)).or_default();
            if entry.is_empty() {
                order.push((lo, hi));
            }
            entry.push((el.l, s, fwd));
        }
    }
    for kk in order {
        let list = &by_key[&kk];
        match list.len() {
            2 => {
                let (l0, s0, f0) = list[0];
                let (l1, s1, f1) = list[1];
                if f0 == f1 {
                    return Err(Error::Mesh(format!(
                        "quads {l0} and {l1} share a side with equal orientation"
                    )));
                }
                push(&mut edges, &mut side_edges, MeshEdge {
                    id: 0,
                    kind: EdgeKind::InteriorInternal,
                    sides: vec![side(ElemRef::Interior(l0), s0, false), side(ElemRef::Interior(l1), s1, true)],
                    frame: Frame::Interior,
                    dist: None,
                    weight: 1.0,
                    finite_measure: true,
                    boundary_edge: None,
                });
            }
            1 => {
                let (l, s, _) = list[0];
                let a = interiors[l].corners[s];
                let b = interiors[l].corners[(s + 1) % 4];
                if let Some(e) = polygon_edge_of(prob, a, b) {
                    push(&mut edges, &mut side_edges, MeshEdge {
                        id: 0,
                        kind: bc_kind(e),
                        sides: vec![side(ElemRef::Interior(l), s, false)],
                        frame: Frame::Interior,
                        dist: None,
                        weight: 1.0,
                        finite_measure: true,
                        boundary_edge: Some(e),
                    });
                    continue;
                }
                let sec = find_arc_sector(&verts, &sector_index, m, rho, a, b).ok_or_else(|| {
                    Error::Mesh(format!(
                        "side {s} of quad {l} from ({}, {}) to ({}, {}) matches no element, boundary or sector arc",
                        a[0], a[1], b[0], b[1]
                    ))
                })?;
                let k = sectors[sec].k;
                push(&mut edges, &mut side_edges, MeshEdge {
                    id: 0,
                    kind: EdgeKind::SectorArcInterface,
                    sides: vec![side(ElemRef::Sector(sec), 1, false), side(ElemRef::Interior(l), s, true)],
                    frame: Frame::Sector(k),
                    dist: Some(rho),
                    weight: rho.powf(-2.0 * verts[k].lambda),
                    finite_measure: true,
                    boundary_edge: None,
                });
            }
            n => {
                return Err(Error::Mesh(format!("{n} quads share one side")));
            }
        }
    }

    let mesh = GeometricMesh {
        rho,
        m,
        w,
        vertices: verts,
        sectors,
        interiors,
        edges,
        sector_index,
        side_edges,
    };
    for e in mesh.element_refs() {
        let n_sides = match e {
            ElemRef::Sector(s) if mesh.sectors[s].j == 1 => &[0usize, 1, 2][..],
            _ => &[0, 1, 2, 3][..],
        };
        for &s in n_sides {
            if !mesh.side_edges.contains_key(&(e, s)) {
                return Err(Error::Mesh(format!("side {s} of {e:?} is unmatched")));
            }
        }
    }
    let arcs = mesh.edges.iter().filter(|e| e.kind == EdgeKind::SectorArcInterface).count();
    let expected: usize = mesh.vertices.iter().map(|v| v.n_ang()).sum();
    if arcs != expected {
        return Err(Error::Mesh(format!(
            "interior quads meet {arcs} sector arcs, expected {expected}"
        )));
    }
    Ok(mesh)
}

fn side(elem: ElemRef, local: usize, reversed: bool) -> EdgeSide {
    EdgeSide { elem, local, reversed }
}

/// Outer sector element whose arc has the chord `a b` (traversed clockwise
/// about the apex, as seen from the quad).
fn find_arc_sector(
    verts: &[VertexData],
    index: &[Vec<Vec<usize>>],
    m: usize,
    rho: f64,
    a: Point,
    b: Point,
) -> Option<usize> {
    for vd in verts {
        if (dist(a, vd.apex) - rho).abs() > 1e-9 * rho.max(1.0) || (dist(b, vd.apex) - rho).abs() > 1e-9 * rho.max(1.0) {
            continue;
        }
        let (_, pa) = vd.frame.inverse(a);
        let (_, pb) = vd.frame.inverse(b);
        for i in 0..vd.n_ang() {
            let (lo, hi) = (vd.psi[i], vd.psi[i + 1]);
            if (pb - lo).abs() < 1e-9 && (pa - hi).abs() < 1e-9 {
                return Some(index[vd.k][i][m - 1]);
            }
        }
    }
    None
}

/// Polylines for plotting: 16 samples per side of every element.
#[derive(Debug, Serialize)]
pub struct MeshDump {
    pub elements: Vec<DumpElement>,
    pub vertices: Vec<Point>,
    pub rho: f64,
    pub m: usize,
}

#[derive(Debug, Serialize)]
pub struct DumpElement {
    pub element: ElemRef,
    pub polyline: Vec<Point>,
}

pub fn dump_mesh(mesh: &GeometricMesh) -> MeshDump {
    let n = 16;
    let mut elements = Vec::new();
    for e in mesh.element_refs() {
        let inner_cut = match e {
            ElemRef::Sector(s) => mesh.sectors[s].j == 1,
            ElemRef::Interior(_) => false,
        };
        let mut poly = Vec::new();
        for s in 0..4 {
            for q in 0..n {
                let t = -1.0 + 2.0 * q as f64 / n as f64;
                let (xi, eta) = side_point(s, t);
                if inner_cut {
                    // The innermost wedge: apex plus its arc at r = σ_2.
                    let ElemRef::Sector(sid) = e else { unreachable!() };
                    let el = &mesh.sectors[sid];
                    let vd = &mesh.vertices[el.k];
                    if xi < 1.0 {
                        poly.push(vd.apex);
                    } else {
                        let phi = 0.5 * (el.phi.0 + el.phi.1) + el.half_phi() * eta;
                        poly.push(vd.frame.map(el.nu.1, phi));
                    }
                    continue;
                }
                poly.push(mesh.elem_point(e, xi, eta));
            }
        }
        poly.dedup();
        elements.push(DumpElement { element: e, polyline: poly });
    }
    MeshDump {
        elements,
        vertices: mesh.vertices.iter().map(|v| v.apex).collect(),
        rho: mesh.rho,
        m: mesh.m,
    }
}
