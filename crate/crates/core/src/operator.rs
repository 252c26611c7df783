//! Element operators in six-coefficient non-divergence form with
//! polynomial (GLL-interpolated) coefficients, and boundary derivative
//! operators built from the same interpolated coefficients.
//!
//! On a sector element the operator acts on `w(ν, φ)` as
//! `Â w_νν + 2B̂ w_νφ + Ĉ w_φφ + D̂ w_ν + Ê w_φ + F̂ w`; on an interior element
//! the same form is written directly in master coordinates `(ξ, η)`.

use nalgebra::DMatrix;

use crate::basis::{gll_rule, NodalTensor};
use crate::geometry::{ElemRef, GeometricMesh, InteriorElement, SectorElement, SectorFrame};
use crate::probdef::EllipticProblem;
use crate::Error;

/// Transformed coefficients of `r² ℒ` in `y = (τ, θ)` at one point:
/// `ã = [ã11, ã12, ã22]`, `b̃ = [b̃1, b̃2]`, `c̃`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarCoeffs {
    pub a: [f64; 3],
    pub b: [f64; 2],
    pub c: f64,
}

/// `Ã = OᵀAO`, `b̃ = r Oᵀb`, `c̃ = r²c` with `O` the rotation by `theta`.
pub fn rotate_coeffs(raw: [f64; 6], r: f64, theta: f64) -> PolarCoeffs {
    let [a11, a12, a22, b1, b2, c] = raw;
    let (cs, sn) = (theta.cos(), theta.sin());
    // Columns of O are e_r = (cs, sn) and e_θ = (−sn, cs).
    let er = [cs, sn];
    let et = [-sn, cs];
    let quad = |u: [f64; 2], v: [f64; 2]| {
        u[0] * (a11 * v[0] + a12 * v[1]) + u[1] * (a12 * v[0] + a22 * v[1])
    };
    PolarCoeffs {
        a: [quad(er, er), quad(er, et), quad(et, et)],
        b: [r * (er[0] * b1 + er[1] * b2), r * (et[0] * b1 + et[1] * b2)],
        c: r * r * c,
    }
}

/// Pointwise transformed coefficients for vertex `k` at `(ν, φ)`.
pub fn transform_to_sector(
    prob: &EllipticProblem,
    mesh: &GeometricMesh,
    k: usize,
    nu: f64,
    phi: f64,
) -> Result<PolarCoeffs, Error> {
    let frame = &mesh.vertices[k].frame;
    let x = frame.map(nu, phi);
    let raw = prob
        .coeffs
        .at(x[0], x[1])
        .map_err(|msg| Error::Domain { index: 0, msg: format!("coefficients at ({}, {}): {msg}", x[0], x[1]) })?;
    Ok(rotate_coeffs(raw, nu.exp(), frame.theta(phi)))
}

fn coeff_err(e: ElemRef, x: [f64; 2], msg: String) -> Error {
    Error::Domain {
        index: 0,
        msg: format!("coefficients on {e:?} at ({}, {}): {msg}", x[0], x[1]),
    }
}

/// Six coefficient tensors, in the order `Â, B̂, Ĉ, D̂, Ê, F̂`.
pub type SixCoeffs = [NodalTensor; 6];

#[derive(Debug, Clone)]
pub struct SectorOperator {
    pub elem: usize,
    pub k: usize,
    pub degree: usize,
    pub half_nu: f64,
    pub half_phi: f64,
    /// Angular scale `s`.
    pub scale: f64,
    pub sqrt_j: f64,
    /// Coefficients with respect to `(ν, φ)`.
    pub coef: SixCoeffs,
    /// Interpolated `ã11, ã12, ã22`.
    pub a_hat: [NodalTensor; 3],
}

#[derive(Debug, Clone)]
pub struct InteriorOperator {
    pub elem: usize,
    pub degree: usize,
    /// Coefficients with respect to `(ξ, η)`.
    pub coef: SixCoeffs,
    /// Interpolated metric `ξ_x, ξ_y, η_x, η_y`.
    pub metric_hat: [NodalTensor; 4],
    /// Interpolated `a11, a12, a22`.
    pub a_hat: [NodalTensor; 3],
}

/// Builds the operator of sector element `s` (layer `j ≥ 2`).
pub fn sector_operator(prob: &EllipticProblem, mesh: &GeometricMesh, s: usize) -> Result<SectorOperator, Error> {
    let el: &SectorElement = &mesh.sectors[s];
    assert!(el.j >= 2, "layer-1 elements carry no operator");
    let frame: &SectorFrame = &mesh.vertices[el.k].frame;
    let d = el.degree;
    let n = d + 1;
    let rule = gll_rule(n);
    let sc = frame.scale();
    let sqrt_j = frame.jacobian().sqrt();
    let mut at = [DMatrix::zeros(n, n), DMatrix::zeros(n, n), DMatrix::zeros(n, n)];
    let mut bt = [DMatrix::zeros(n, n), DMatrix::zeros(n, n)];
    let mut ct = DMatrix::zeros(n, n);
    for p in 0..n {
        for q in 0..n {
            let (nu, phi) = el.to_nu_phi(rule.nodes[p], rule.nodes[q]);
            let x = frame.map(nu, phi);
            let raw = prob
                .coeffs
                .at(x[0], x[1])
                .map_err(|m| coeff_err(ElemRef::Sector(s), x, m))?;
            let pc = rotate_coeffs(raw, nu.exp(), frame.theta(phi));
            for r in 0..3 {
                at[r][(p, q)] = pc.a[r];
            }
            bt[0][(p, q)] = pc.b[0];
            bt[1][(p, q)] = pc.b[1];
            ct[(p, q)] = pc.c;
        }
    }
    let dnu = 1.0 / el.half_nu();
    let dphi = 1.0 / el.half_phi();
    let d_nu = |m: &DMatrix<f64>| &rule.diff * m * dnu;
    let d_phi = |m: &DMatrix<f64>| m * rule.diff.transpose() * dphi;
    let a_coef = -&at[0] * sqrt_j;
    let b_coef = -&at[1] * (sqrt_j / sc);
    let c_coef = -&at[2] * (sqrt_j / (sc * sc));
    let d_coef = (-d_nu(&at[0]) - d_phi(&at[1]) / sc + &bt[0]) * sqrt_j;
    let e_coef = (-d_nu(&at[1]) / sc - d_phi(&at[2]) / (sc * sc) + &bt[1] / sc) * sqrt_j;
    let f_coef = &ct * sqrt_j;
    let t = |m: DMatrix<f64>| NodalTensor { degree: d, values: m };
    let [a0, a1, a2] = at;
    Ok(SectorOperator {
        elem: s,
        k: el.k,
        degree: d,
        half_nu: el.half_nu(),
        half_phi: el.half_phi(),
        scale: sc,
        sqrt_j,
        coef: [t(a_coef), t(b_coef), t(c_coef), t(d_coef), t(e_coef), t(f_coef)],
        a_hat: [t(a0), t(a1), t(a2)],
    })
}

/// Builds the operator of interior element `l`.
pub fn interior_operator(prob: &EllipticProblem, mesh: &GeometricMesh, l: usize) -> Result<InteriorOperator, Error> {
    let el: &InteriorElement = &mesh.interiors[l];
    let d = el.degree;
    let n = d + 1;
    let rule = gll_rule(n);
    let z = || DMatrix::zeros(n, n);
    let mut a = [z(), z(), z()];
    let mut b = [z(), z()];
    let mut c = z();
    let mut met = [z(), z(), z(), z()];
    let mut met2 = [z(), z(), z(), z(), z(), z()];
    let mut sqj = z();
    for p in 0..n {
        for q in 0..n {
            let (xi, eta) = (rule.nodes[p], rule.nodes[q]);
            let x = el.map(xi, eta);
            let raw = prob
                .coeffs
                .at(x[0], x[1])
                .map_err(|m| coeff_err(ElemRef::Interior(l), x, m))?;
            a[0][(p, q)] = raw[0];
            a[1][(p, q)] = raw[1];
            a[2][(p, q)] = raw[2];
            b[0][(p, q)] = raw[3];
            b[1][(p, q)] = raw[4];
            c[(p, q)] = raw[5];
            let m = el.metric(xi, eta);
            if m.det <= 0.0 {
                return Err(Error::Mesh(format!("degenerate quad {l}")));
            }
            met[0][(p, q)] = m.xi_x;
            met[1][(p, q)] = m.xi_y;
            met[2][(p, q)] = m.eta_x;
            met[3][(p, q)] = m.eta_y;
            let m2 = el.metric2(xi, eta);
            for r in 0..3 {
                met2[r][(p, q)] = m2.xi[r];
                met2[3 + r][(p, q)] = m2.eta[r];
            }
            sqj[(p, q)] = m.det.sqrt();
        }
    }
    // ∂_x a and ∂_y a of the interpolated coefficients by the chain rule.
    let dx = |f: &DMatrix<f64>| {
        let fx = &rule.diff * f;
        let fe = f * rule.diff.transpose();
        (
            fx.component_mul(&met[0]) + fe.component_mul(&met[2]),
            fx.component_mul(&met[1]) + fe.component_mul(&met[3]),
        )
    };
    let (a11x, _) = dx(&a[0]);
    let (a12x, a12y) = dx(&a[1]);
    let (_, a22y) = dx(&a[2]);
    // β_s = b_s − Σ_r ∂_r a_rs
    let beta1 = &b[0] - &a11x - &a12y;
    let beta2 = &b[1] - &a12x - &a22y;
    let mut coef = [z(), z(), z(), z(), z(), z()];
    for p in 0..n {
        for q in 0..n {
            let (a11, a12, a22) = (a[0][(p, q)], a[1][(p, q)], a[2][(p, q)]);
            let (xx, xy, ex, ey) = (met[0][(p, q)], met[1][(p, q)], met[2][(p, q)], met[3][(p, q)]);
            let form = |u: [f64; 2], v: [f64; 2]| {
                u[0] * (a11 * v[0] + a12 * v[1]) + u[1] * (a12 * v[0] + a22 * v[1])
            };
            let gxi = [xx, xy];
            let geta = [ex, ey];
            let s = sqj[(p, q)];
            let (b1, b2) = (beta1[(p, q)], beta2[(p, q)]);
            let hess = |h: [f64; 3]| a11 * h[0] + 2.0 * a12 * h[1] + a22 * h[2];
            let xi2 = [met2[0][(p, q)], met2[1][(p, q)], met2[2][(p, q)]];
            let eta2 = [met2[3][(p, q)], met2[4][(p, q)], met2[5][(p, q)]];
            coef[0][(p, q)] = -s * form(gxi, gxi);
            coef[1][(p, q)] = -s * form(gxi, geta);
            coef[2][(p, q)] = -s * form(geta, geta);
            coef[3][(p, q)] = s * (-hess(xi2) + b1 * xx + b2 * xy);
            coef[4][(p, q)] = s * (-hess(eta2) + b1 * ex + b2 * ey);
            coef[5][(p, q)] = s * c[(p, q)];
        }
    }
    let t = |m: DMatrix<f64>| NodalTensor { degree: d, values: m };
    let [c0, c1, c2, c3, c4, c5] = coef;
    let [m0, m1, m2, m3] = met;
    let [a0, a1, a2] = a;
    Ok(InteriorOperator {
        elem: l,
        degree: d,
        coef: [t(c0), t(c1), t(c2), t(c3), t(c4), t(c5)],
        metric_hat: [t(m0), t(m1), t(m2), t(m3)],
        a_hat: [t(a0), t(a1), t(a2)],
    })
}

/// Either element operator.
#[derive(Debug, Clone)]
pub enum ElementOperator {
    Sector(SectorOperator),
    Interior(InteriorOperator),
}

/// Residual of a PDE operator on a quadrature grid.
pub trait PdeOperator {
    fn degree(&self) -> usize;
    /// Six coefficients with respect to master `(ξ, η)`.
    fn master_coeffs_on(&self, pts: &[f64]) -> [DMatrix<f64>; 6];
}

impl PdeOperator for SectorOperator {
    fn degree(&self) -> usize {
        self.degree
    }

    fn master_coeffs_on(&self, pts: &[f64]) -> [DMatrix<f64>; 6] {
        // ∂_ν = ∂_ξ / h_ν, ∂_φ = ∂_η / h_φ.
        let (hn, hp) = (self.half_nu, self.half_phi);
        let f = [1.0 / (hn * hn), 1.0 / (hn * hp), 1.0 / (hp * hp), 1.0 / hn, 1.0 / hp, 1.0];
        let mut out: [DMatrix<f64>; 6] = Default::default();
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.coef[c].on_grid(pts, pts, 0, 0) * f[c];
        }
        out
    }
}

impl PdeOperator for InteriorOperator {
    fn degree(&self) -> usize {
        self.degree
    }

    fn master_coeffs_on(&self, pts: &[f64]) -> [DMatrix<f64>; 6] {
        let mut out: [DMatrix<f64>; 6] = Default::default();
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.coef[c].on_grid(pts, pts, 0, 0);
        }
        out
    }
}

/// Quadrature points per direction for PDE residuals of degree `d`.
pub fn residual_points(d: usize) -> usize {
    2 * d + 3
}

/// Residual field of `u` on the `(2d+3)`-point GLL grid, by
/// sum-factorized differentiation.
pub fn apply_operator(op: &dyn PdeOperator, u: &NodalTensor) -> DMatrix<f64> {
    let nq = residual_points(op.degree());
    let q = gll_rule(nq);
    let co = op.master_coeffs_on(&q.nodes);
    let g = |a, b| u.on_grid(&q.nodes, &q.nodes, a, b);
    let terms = [g(2, 0), g(1, 1), g(0, 2), g(1, 0), g(0, 1), g(0, 0)];
    let mult = [1.0, 2.0, 1.0, 1.0, 1.0, 1.0];
    let mut out = DMatrix::zeros(nq, nq);
    for c in 0..6 {
        out += co[c].component_mul(&terms[c]) * mult[c];
    }
    out
}

/// Dense matrix of [`apply_operator`] from nodal values (flattened
/// `k = i (d+1) + j`) to residual values at grid point `p nq + r`.
pub fn operator_matrix(op: &dyn PdeOperator) -> DMatrix<f64> {
    let d = op.degree();
    let n = d + 1;
    let nq = residual_points(d);
    let q = gll_rule(nq);
    let rule = gll_rule(n);
    let co = op.master_coeffs_on(&q.nodes);
    let l: Vec<DMatrix<f64>> = (0..3).map(|a| rule.interp_matrix(&q.nodes, a)).collect();
    let orders = [(2, 0, 1.0), (1, 1, 2.0), (0, 2, 1.0), (1, 0, 1.0), (0, 1, 1.0), (0, 0, 1.0)];
    let mut b = DMatrix::zeros(nq * nq, n * n);
    for p in 0..nq {
        for r in 0..nq {
            let row = p * nq + r;
            for (c, &(oa, ob, m)) in orders.iter().enumerate() {
                let w = co[c][(p, r)] * m;
                if w == 0.0 {
                    continue;
                }
                for i in 0..n {
                    let li = l[oa][(p, i)] * w;
                    if li == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        b[(row, i * n + j)] += li * l[ob][(r, j)];
                    }
                }
            }
        }
    }
    b
}

/// Linear functional of `(v, v_ξ, v_η)` at one master point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TraceRow {
    pub xi: f64,
    pub eta: f64,
    pub c0: f64,
    pub cxi: f64,
    pub ceta: f64,
}

impl TraceRow {
    pub fn eval(&self, u: &NodalTensor) -> f64 {
        let g = crate::basis::eval_nodal_grad(u, &[(self.xi, self.eta)])[0];
        self.c0 * g.0 + self.cxi * g.1 + self.ceta * g.2
    }
}

impl SectorOperator {
    /// `∂_ν` at a master point.
    pub fn d_nu_row(&self, xi: f64, eta: f64) -> TraceRow {
        TraceRow { xi, eta, c0: 0.0, cxi: 1.0 / self.half_nu, ceta: 0.0 }
    }

    pub fn d_phi_row(&self, xi: f64, eta: f64) -> TraceRow {
        TraceRow { xi, eta, c0: 0.0, cxi: 0.0, ceta: 1.0 / self.half_phi }
    }

    /// Conormal derivative `n·Ã∇_y u` on a `φ = const` side with the
    /// interpolated `Ã`; `n = (0, −1)` on side 0 and `(0, 1)` on side 2.
    pub fn conormal_row(&self, local_side: usize, xi: f64, eta: f64) -> TraceRow {
        let sign = match local_side {
            0 => -1.0,
            2 => 1.0,
            _ => panic!("conormal is defined on φ = const sides only"),
        };
        let a12 = crate::basis::eval_nodal(&self.a_hat[1], &[(xi, eta)])[0];
        let a22 = crate::basis::eval_nodal(&self.a_hat[2], &[(xi, eta)])[0];
        // u_τ = u_ν, u_θ = u_φ / s
        TraceRow {
            xi,
            eta,
            c0: 0.0,
            cxi: sign * a12 / self.half_nu,
            ceta: sign * a22 / (self.scale * self.half_phi),
        }
    }
}

impl InteriorOperator {
    /// Interpolated metric `[ξ_x, ξ_y, η_x, η_y]` at a master point.
    pub fn metric_at(&self, xi: f64, eta: f64) -> [f64; 4] {
        let mut m = [0.0; 4];
        for (r, slot) in m.iter_mut().enumerate() {
            *slot = crate::basis::eval_nodal(&self.metric_hat[r], &[(xi, eta)])[0];
        }
        m
    }

    /// `(∂u/∂x_r)^a` for `r = 0, 1`.
    pub fn dx_row(&self, r: usize, xi: f64, eta: f64) -> TraceRow {
        let m = self.metric_at(xi, eta);
        TraceRow { xi, eta, c0: 0.0, cxi: m[r], ceta: m[2 + r] }
    }

    /// Directional derivative `vec·∇u` with interpolated metrics.
    pub fn directional_row(&self, vec: [f64; 2], xi: f64, eta: f64) -> TraceRow {
        let m = self.metric_at(xi, eta);
        TraceRow {
            xi,
            eta,
            c0: 0.0,
            cxi: vec[0] * m[0] + vec[1] * m[1],
            ceta: vec[0] * m[2] + vec[1] * m[3],
        }
    }

    /// `(∂u/∂T)^a` along the unit tangent.
    pub fn tangential_row(&self, t: [f64; 2], xi: f64, eta: f64) -> TraceRow {
        self.directional_row(t, xi, eta)
    }

    /// `(∂u/∂N)^a_A = N·Â∇u` with interpolated `A` and metrics.
    pub fn conormal_row(&self, n: [f64; 2], xi: f64, eta: f64) -> TraceRow {
        let a: Vec<f64> = self.a_hat.iter().map(|t| crate::basis::eval_nodal(t, &[(xi, eta)])[0]).collect();
        let an = [a[0] * n[0] + a[1] * n[1], a[1] * n[0] + a[2] * n[1]];
        self.directional_row(an, xi, eta)
    }
}

/// Values of [`SectorOperator::conormal_row`] on the side points `ts`.
pub fn conormal_sector(op: &SectorOperator, local_side: usize, ts: &[f64], u: &NodalTensor) -> Vec<f64> {
    ts.iter()
        .map(|&t| {
            let (xi, eta) = crate::geometry::side_point(local_side, t);
            op.conormal_row(local_side, xi, eta).eval(u)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryDerivative {
    Tangential,
    Conormal,
}

/// Tangential or conormal derivative traces on a straight side of an
/// interior element, with the side's unit tangent and outward normal.
pub fn boundary_interior(
    op: &InteriorOperator,
    mesh: &GeometricMesh,
    local_side: usize,
    ts: &[f64],
    u: &NodalTensor,
    which: BoundaryDerivative,
) -> Vec<f64> {
    let (t, n) = side_frame(&mesh.interiors[op.elem], local_side);
    ts.iter()
        .map(|&s| {
            let (xi, eta) = crate::geometry::side_point(local_side, s);
            let row = match which {
                BoundaryDerivative::Tangential => op.tangential_row(t, xi, eta),
                BoundaryDerivative::Conormal => op.conormal_row(n, xi, eta),
            };
            row.eval(u)
        })
        .collect()
}

/// Unit tangent (in the side's counter-clockwise direction) and outward
/// unit normal `(T_y, −T_x)` of a straight quad side.
pub fn side_frame(el: &InteriorElement, local_side: usize) -> ([f64; 2], [f64; 2]) {
    let a = el.corners[local_side];
    let b = el.corners[(local_side + 1) % 4];
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = dx.hypot(dy);
    let t = [dx / len, dy / len];
    (t, [t[1], -t[0]])
}

/// Builds the operator of every element that carries degrees of freedom.
pub fn element_operators(prob: &EllipticProblem, mesh: &GeometricMesh) -> Result<Vec<(ElemRef, ElementOperator)>, Error> {
    use rayon::prelude::*;
    let refs: Vec<ElemRef> = mesh
        .element_refs()
        .filter(|e| !matches!(e, ElemRef::Sector(s) if mesh.sectors[*s].j == 1))
        .collect();
    refs.par_iter()
        .map(|&e| {
            Ok((
                e,
                match e {
                    ElemRef::Sector(s) => ElementOperator::Sector(sector_operator(prob, mesh, s)?),
                    ElemRef::Interior(l) => ElementOperator::Interior(interior_operator(prob, mesh, l)?),
                },
            ))
        })
        .collect()
}

/// Largest deviation between the interpolated and exact `Â` of sector
/// element `s`, sampled on a uniform `n x n` grid.
pub fn sector_coefficient_gap(prob: &EllipticProblem, mesh: &GeometricMesh, s: usize, n: usize) -> Result<f64, Error> {
    let op = sector_operator(prob, mesh, s)?;
    let el = &mesh.sectors[s];
    let mut gap: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            let xi = -1.0 + 2.0 * a as f64 / (n - 1) as f64;
            let eta = -1.0 + 2.0 * b as f64 / (n - 1) as f64;
            let (nu, phi) = el.to_nu_phi(xi, eta);
            let pc = transform_to_sector(prob, mesh, el.k, nu, phi)?;
            let exact = -op.sqrt_j * pc.a[0];
            let hat = crate::basis::eval_nodal(&op.coef[0], &[(xi, eta)])[0];
            gap = gap.max((exact - hat).abs());
        }
    }
    Ok(gap)
}
