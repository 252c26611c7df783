//! Errors of a discrete solution against an exact solution: the weighted
//! broken `H²` norm in the element frames and the physical broken `L²`
//! norm.

use serde::Serialize;

use crate::assembly::DofLayout;
use crate::basis::{gll_rule, NodalTensor};
use crate::geometry::{ElemRef, GeometricMesh, InteriorElement, SectorFrame};
use crate::probdef::{Field, Jet};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorReport {
    pub err_broken: f64,
    pub err_l2_broken: f64,
    /// `Σ |b_k − a_k|²`.
    pub vertex_sq: f64,
    /// Weighted sector part of `err_broken²`.
    pub sector_sq: f64,
    /// Interior part of `err_broken²`.
    pub interior_sq: f64,
}

/// Value and the five derivatives `[∂₁, ∂₂, ∂₁₁, ∂₁₂, ∂₂₂]` in some frame.
pub type Derivs = [f64; 6];

fn jet_at(u: &Field, x: [f64; 2]) -> Result<Jet, Error> {
    u.jet(x[0], x[1]).map_err(|msg| Error::Domain {
        index: 0,
        msg: format!("exact solution at ({}, {}): {msg}", x[0], x[1]),
    })
}

/// Exact-solution derivatives in the `(ν, φ)` frame of a sector.
pub fn sector_pullback(u: &Field, frame: &SectorFrame, nu: f64, phi: f64) -> Result<Derivs, Error> {
    let x = frame.map(nu, phi);
    let j = jet_at(u, x)?;
    let r = nu.exp();
    let th = frame.theta(phi);
    let s = frame.scale();
    let xn = [r * th.cos(), r * th.sin()];
    let xp = [-s * r * th.sin(), s * r * th.cos()];
    let g = [j.gx, j.gy];
    let h = [[j.hxx, j.hxy], [j.hxy, j.hyy]];
    let quad = |a: [f64; 2], b: [f64; 2]| {
        let mut v = 0.0;
        for p in 0..2 {
            for q in 0..2 {
                v += a[p] * h[p][q] * b[q];
            }
        }
        v
    };
    let dg = |a: [f64; 2]| g[0] * a[0] + g[1] * a[1];
    // x_νν = x_ν, x_νφ = x_φ, x_φφ = −s² x_ν.
    Ok([
        j.v,
        dg(xn),
        dg(xp),
        quad(xn, xn) + dg(xn),
        quad(xn, xp) + dg(xp),
        quad(xp, xp) - s * s * dg(xn),
    ])
}

/// Exact-solution derivatives in the master frame of an interior quad.
pub fn interior_pullback(u: &Field, el: &InteriorElement, xi: f64, eta: f64) -> Result<Derivs, Error> {
    let x = el.map(xi, eta);
    let j = jet_at(u, x)?;
    let jac = el.jacobian(xi, eta);
    let xa = [jac[0][0], jac[1][0]];
    let xb = [jac[0][1], jac[1][1]];
    // Bilinear map: x_ξξ = x_ηη = 0 and x_ξη is constant.
    let top = el.jacobian(xi, 1.0);
    let bot = el.jacobian(xi, -1.0);
    let xab = [0.5 * (top[0][0] - bot[0][0]), 0.5 * (top[1][0] - bot[1][0])];
    let g = [j.gx, j.gy];
    let h = [[j.hxx, j.hxy], [j.hxy, j.hyy]];
    let quad = |a: [f64; 2], b: [f64; 2]| {
        let mut v = 0.0;
        for p in 0..2 {
            for q in 0..2 {
                v += a[p] * h[p][q] * b[q];
            }
        }
        v
    };
    let dg = |a: [f64; 2]| g[0] * a[0] + g[1] * a[1];
    Ok([j.v, dg(xa), dg(xb), quad(xa, xa), quad(xa, xb) + dg(xab), quad(xb, xb)])
}

/// Derivatives of a nodal tensor at master points, converted to a frame
/// with coordinate half-lengths `(hx, hy)`.
pub fn tensor_derivs(t: &NodalTensor, pts: &[f64], hx: f64, hy: f64) -> [nalgebra::DMatrix<f64>; 6] {
    [
        t.on_grid(pts, pts, 0, 0),
        t.on_grid(pts, pts, 1, 0) / hx,
        t.on_grid(pts, pts, 0, 1) / hy,
        t.on_grid(pts, pts, 2, 0) / (hx * hx),
        t.on_grid(pts, pts, 1, 1) / (hx * hy),
        t.on_grid(pts, pts, 0, 2) / (hy * hy),
    ]
}

/// Quadrature points per direction for the error norms.
pub fn error_points(degree: usize) -> usize {
    2 * degree + 5
}

/// `err_broken` and `err_l2_broken` of the DOF vector `z`.
pub fn compute_error(mesh: &GeometricMesh, layout: &DofLayout, z: &[f64], exact: &Field) -> Result<ErrorReport, Error> {
    use rayon::prelude::*;
    let mut vertex_sq = 0.0;
    let mut b_minus_a = vec![0.0; layout.p];
    for (k, v) in mesh.vertices.iter().enumerate() {
        let a = exact.value(v.apex[0], v.apex[1]).map_err(|msg| Error::Domain { index: k, msg })?;
        let d = z[layout.vertex_slot(k)] - a;
        b_minus_a[k] = d;
        vertex_sq += d * d;
    }
    // (weighted H² part, physical L² part, is_sector)
    let parts: Vec<(f64, f64, bool)> = layout
        .blocks
        .par_iter()
        .map(|b| {
            let t = layout.tensor(z, b.elem).expect("block");
            let nq = error_points(b.degree);
            let q = gll_rule(nq);
            match b.elem {
                ElemRef::Sector(s) => {
                    let el = &mesh.sectors[s];
                    let vd = &mesh.vertices[el.k];
                    let (hn, hp) = (el.half_nu(), el.half_phi());
                    let zd = tensor_derivs(&t, &q.nodes, hn, hp);
                    let shift = b_minus_a[el.k];
                    let (mut h2, mut l2) = (0.0, 0.0);
                    for p in 0..nq {
                        for r in 0..nq {
                            let (nu, phi) = el.to_nu_phi(q.nodes[p], q.nodes[r]);
                            let u = sector_pullback(exact, &vd.frame, nu, phi)?;
                            let w = q.weights[p] * q.weights[r] * hn * hp;
                            let mut acc = 0.0;
                            for c in 0..6 {
                                let mut e = zd[c][(p, r)] - u[c];
                                if c == 0 {
                                    l2 += w * vd.frame.jacobian() * (2.0 * nu).exp() * e * e;
                                    e -= shift;
                                }
                                acc += e * e;
                            }
                            h2 += w * acc;
                        }
                    }
                    Ok((vd.layer_weight(el.j) * h2, l2, true))
                }
                ElemRef::Interior(l) => {
                    let el = &mesh.interiors[l];
                    let zd = tensor_derivs(&t, &q.nodes, 1.0, 1.0);
                    let (mut h2, mut l2) = (0.0, 0.0);
                    for p in 0..nq {
                        for r in 0..nq {
                            let (xi, eta) = (q.nodes[p], q.nodes[r]);
                            let u = interior_pullback(exact, el, xi, eta)?;
                            let w = q.weights[p] * q.weights[r];
                            let mut acc = 0.0;
                            for c in 0..6 {
                                let e = zd[c][(p, r)] - u[c];
                                acc += e * e;
                            }
                            h2 += w * acc;
                            let e0 = zd[0][(p, r)] - u[0];
                            l2 += w * el.metric(xi, eta).det * e0 * e0;
                        }
                    }
                    Ok((h2, l2, false))
                }
            }
        })
        .collect::<Result<_, Error>>()?;
    let mut sector_sq = 0.0;
    let mut interior_sq = 0.0;
    let mut l2 = 0.0;
    for (h2, e2, sec) in parts {
        if sec {
            sector_sq += h2;
        } else {
            interior_sq += h2;
        }
        l2 += e2;
    }
    l2 += layer1_l2_sq(mesh, layout, z, exact)?;
    Ok(ErrorReport {
        err_broken: (vertex_sq + sector_sq + interior_sq).sqrt(),
        err_l2_broken: l2.sqrt(),
        vertex_sq,
        sector_sq,
        interior_sq,
    })
}

/// `Σ ∫_{r < σ_2} |h_k − u|² dx` over the innermost wedges, integrated in
/// `(r, φ)`.
fn layer1_l2_sq(mesh: &GeometricMesh, layout: &DofLayout, z: &[f64], exact: &Field) -> Result<f64, Error> {
    let mut tot = 0.0;
    for el in mesh.sectors.iter().filter(|e| e.j == 1) {
        let vd = &mesh.vertices[el.k];
        let hk = z[layout.vertex_slot(el.k)];
        let r1 = vd.sigma_j(2);
        let nq = error_points(mesh.w.max(2));
        let q = gll_rule(nq);
        let hp = el.half_phi();
        let s = vd.frame.scale();
        for p in 0..nq {
            let r = 0.5 * r1 * (1.0 + q.nodes[p]);
            for m in 0..nq {
                let phi = 0.5 * (el.phi.0 + el.phi.1) + hp * q.nodes[m];
                let th = vd.frame.theta(phi);
                let x = [vd.apex[0] + r * th.cos(), vd.apex[1] + r * th.sin()];
                let u = exact.value(x[0], x[1]).map_err(|msg| Error::Domain { index: el.k, msg })?;
                let w = q.weights[p] * q.weights[m] * 0.5 * r1 * hp * s * r;
                tot += w * (hk - u) * (hk - u);
            }
        }
    }
    Ok(tot)
}
