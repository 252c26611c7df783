//! Vertex-conforming post-processing: each element receives a corrector in
//! the twelve-dimensional Adini space `P₃ ⊕ {ξ³η, ξη³}` so that values and
//! first derivatives agree at every shared element corner.
//!
//! Corners shared by several elements are matched to the average of the
//! physical values and gradients; corners on the innermost arc `r = σ_2`
//! are matched to the constant `h_k` with zero gradient.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::assembly::DofLayout;
use crate::basis::{eval_nodal_grad, NodalTensor};
use crate::geometry::{ElemRef, GeometricMesh};
use crate::Error;

const CORNERS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];

/// Adini monomial exponents.
const ADINI: [(i32, i32); 12] = [
    (0, 0),
    (1, 0),
    (0, 1),
    (2, 0),
    (1, 1),
    (0, 2),
    (3, 0),
    (2, 1),
    (1, 2),
    (0, 3),
    (3, 1),
    (1, 3),
];

#[derive(Debug, Clone)]
pub struct CorrectedSolution {
    pub tensors: Vec<(ElemRef, NodalTensor)>,
    pub h: Vec<f64>,
    /// Corrector per element, on the corrected degree.
    pub correctors: Vec<NodalTensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct CornerSample {
    pub elem: ElemRef,
    pub corner: usize,
    pub point: [f64; 2],
    pub value: f64,
    /// Physical gradient.
    pub grad: [f64; 2],
}

/// Columns `∂x/∂ξ, ∂x/∂η` of the master-to-physical Jacobian.
fn master_jacobian(mesh: &GeometricMesh, e: ElemRef, xi: f64, eta: f64) -> [[f64; 2]; 2] {
    match e {
        ElemRef::Sector(s) => {
            let el = &mesh.sectors[s];
            let f = &mesh.vertices[el.k].frame;
            let (nu, phi) = el.to_nu_phi(xi, eta);
            let r = nu.exp();
            let th = f.theta(phi);
            let sc = f.scale();
            [
                [el.half_nu() * r * th.cos(), el.half_nu() * r * th.sin()],
                [-el.half_phi() * sc * r * th.sin(), el.half_phi() * sc * r * th.cos()],
            ]
        }
        ElemRef::Interior(l) => {
            let j = mesh.interiors[l].jacobian(xi, eta);
            [[j[0][0], j[1][0]], [j[0][1], j[1][1]]]
        }
    }
}

/// Physical gradient from master derivatives, and back.
fn to_physical(c: [[f64; 2]; 2], d: [f64; 2]) -> [f64; 2] {
    // c[a] · g = d[a]
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    [
        (d[0] * c[1][1] - d[1] * c[0][1]) / det,
        (c[0][0] * d[1] - c[1][0] * d[0]) / det,
    ]
}

fn to_master(c: [[f64; 2]; 2], g: [f64; 2]) -> [f64; 2] {
    [c[0][0] * g[0] + c[0][1] * g[1], c[1][0] * g[0] + c[1][1] * g[1]]
}

/// Values and physical gradients at the four corners of every element.
pub fn corner_samples(mesh: &GeometricMesh, tensors: &[(ElemRef, NodalTensor)]) -> Vec<CornerSample> {
    let mut out = Vec::with_capacity(4 * tensors.len());
    for (e, t) in tensors {
        let g = eval_nodal_grad(t, &CORNERS);
        for (c, &(xi, eta)) in CORNERS.iter().enumerate() {
            let jac = master_jacobian(mesh, *e, xi, eta);
            out.push(CornerSample {
                elem: *e,
                corner: c,
                point: mesh.elem_point(*e, xi, eta),
                value: g[c].0,
                grad: to_physical(jac, [g[c].1, g[c].2]),
            });
        }
    }
    out
}

fn key(p: [f64; 2]) -> (i64, i64) {
    ((p[0] * 1e9).round() as i64, (p[1] * 1e9).round() as i64)
}

fn adini_solve(rhs: &[f64; 12]) -> Result<DVector<f64>, Error> {
    let mut a = DMatrix::zeros(12, 12);
    for (c, &(x, y)) in CORNERS.iter().enumerate() {
        for (m, &(p, q)) in ADINI.iter().enumerate() {
            a[(3 * c, m)] = x.powi(p) * y.powi(q);
            a[(3 * c + 1, m)] = if p > 0 { p as f64 * x.powi(p - 1) * y.powi(q) } else { 0.0 };
            a[(3 * c + 2, m)] = if q > 0 { q as f64 * x.powi(p) * y.powi(q - 1) } else { 0.0 };
        }
    }
    a.lu()
        .solve(&DVector::from_column_slice(rhs))
        .ok_or_else(|| Error::Numerical("Adini interpolation is singular".into()))
}

/// Corrected element polynomials of degree `max(W_j, 3)`.
pub fn vertex_conforming_correction(mesh: &GeometricMesh, layout: &DofLayout, z: &[f64]) -> Result<CorrectedSolution, Error> {
    let h: Vec<f64> = (0..layout.p).map(|k| z[layout.vertex_slot(k)]).collect();
    let tensors: Vec<(ElemRef, NodalTensor)> = layout
        .blocks
        .iter()
        .map(|b| (b.elem, layout.tensor(z, b.elem).expect("block")))
        .collect();
    let samples = corner_samples(mesh, &tensors);

    let is_inner = |s: &CornerSample| match s.elem {
        ElemRef::Sector(i) => mesh.sectors[i].j == 2 && CORNERS[s.corner].0 < 0.0,
        ElemRef::Interior(_) => false,
    };
    let mut groups: HashMap<(i64, i64), (f64, [f64; 2], usize)> = HashMap::new();
    let mut fixed: HashMap<(i64, i64), f64> = HashMap::new();
    for s in &samples {
        if is_inner(s) {
            let ElemRef::Sector(i) = s.elem else { unreachable!() };
            fixed.insert(key(s.point), h[mesh.sectors[i].k]);
            continue;
        }
        let g = groups.entry(key(s.point)).or_insert((0.0, [0.0; 2], 0));
        g.0 += s.value;
        g.1[0] += s.grad[0];
        g.1[1] += s.grad[1];
        g.2 += 1;
    }

    let mut out = Vec::with_capacity(tensors.len());
    let mut correctors = Vec::with_capacity(tensors.len());
    for (bi, (e, t)) in tensors.into_iter().enumerate() {
        let mut rhs = [0.0; 12];
        for c in 0..4 {
            let s = &samples[4 * bi + c];
            let kk = key(s.point);
            let (tv, tg) = match fixed.get(&kk) {
                Some(&hk) => (hk, [0.0, 0.0]),
                None => {
                    let g = groups[&kk];
                    let n = g.2 as f64;
                    (g.0 / n, [g.1[0] / n, g.1[1] / n])
                }
            };
            let (xi, eta) = CORNERS[c];
            let jac = master_jacobian(mesh, e, xi, eta);
            let cur = to_master(jac, s.grad);
            let tgt = to_master(jac, tg);
            rhs[3 * c] = tv - s.value;
            rhs[3 * c + 1] = tgt[0] - cur[0];
            rhs[3 * c + 2] = tgt[1] - cur[1];
        }
        let coef = adini_solve(&rhs)?;
        let d = t.degree.max(3);
        let corr = NodalTensor::from_fn(d, |x, y| {
            ADINI.iter().zip(coef.iter()).map(|(&(p, q), c)| c * x.powi(p) * y.powi(q)).sum()
        });
        let mut fixed_t = t.elevate(d);
        fixed_t.values += &corr.values;
        out.push((e, fixed_t));
        correctors.push(corr);
    }
    Ok(CorrectedSolution { tensors: out, h, correctors })
}

/// Largest disagreement of corner values and physical gradients among
/// elements sharing a corner; inner-arc corners are compared with `h_k`.
pub fn corner_mismatch(mesh: &GeometricMesh, tensors: &[(ElemRef, NodalTensor)], h: &[f64]) -> f64 {
    let samples = corner_samples(mesh, tensors);
    let mut groups: HashMap<(i64, i64), Vec<&CornerSample>> = HashMap::new();
    let mut worst: f64 = 0.0;
    for s in &samples {
        if let ElemRef::Sector(i) = s.elem {
            let el = &mesh.sectors[i];
            if el.j == 2 && CORNERS[s.corner].0 < 0.0 {
                worst = worst.max((s.value - h[el.k]).abs()).max(s.grad[0].abs()).max(s.grad[1].abs());
                continue;
            }
        }
        groups.entry(key(s.point)).or_default().push(s);
    }
    for g in groups.values() {
        for a in g {
            for b in g {
                worst = worst
                    .max((a.value - b.value).abs())
                    .max((a.grad[0] - b.grad[0]).abs())
                    .max((a.grad[1] - b.grad[1]).abs());
            }
        }
    }
    worst
}
