//! Edge norms as Gram matrices on nodal trace polynomials, and jump traces
//! across shared edges.
//!
//! A trace of degree `d` is stored by its values at the `d + 1` GLL nodes
//! of the edge parameter `t ∈ [−1, 1]`. The `H^{1/2}` norm is the interval
//! Sobolev–Slobodeckij form `‖v‖²_0 + ∬ (v(x) − v(y))² / (x − y)² dx dy`.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::DMatrix;

use crate::basis::{gll_rule, NodalTensor};
use crate::geometry::{EdgeKind, ElemRef, GeometricMesh, MeshEdge};
use crate::operator::{ElementOperator, TraceRow};
use crate::Error;

/// Reference Grams of one trace degree on `(−1, 1)`.
#[derive(Debug, Clone)]
pub struct EdgeGram {
    pub degree: usize,
    pub l2: DMatrix<f64>,
    pub half: DMatrix<f64>,
}

impl EdgeGram {
    /// `L²` Gram on an edge of parametric length `len`.
    pub fn l2_scaled(&self, len: f64) -> DMatrix<f64> {
        &self.l2 * (0.5 * len)
    }

    /// Full `H^{1/2}` Gram on an edge of parametric length `len`; the
    /// seminorm part is invariant under affine reparametrization.
    pub fn h_half_scaled(&self, len: f64) -> DMatrix<f64> {
        &self.l2 * (0.5 * len) + &self.half
    }
}

fn gram_cache() -> &'static RwLock<HashMap<usize, Arc<EdgeGram>>> {
    static CACHE: OnceLock<RwLock<HashMap<usize, Arc<EdgeGram>>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

/// Cached reference Grams for traces of degree `d`.
pub fn edge_gram(d: usize) -> Arc<EdgeGram> {
    if let Some(g) = gram_cache().read().unwrap().get(&d) {
        return g.clone();
    }
    let g = Arc::new(EdgeGram {
        degree: d,
        l2: edge_l2_gram(d, 2.0),
        half: h_half_gram(d),
    });
    gram_cache().write().unwrap().entry(d).or_insert(g).clone()
}

/// `qᵀGq = ∫ v²` over an edge of length `len`, GLL rule of `d + 2` points.
pub fn edge_l2_gram(d: usize, len: f64) -> DMatrix<f64> {
    let rule = gll_rule(d + 1);
    let q = gll_rule(d + 2);
    let l = rule.interp_matrix(&q.nodes, 0);
    let w = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&q.weights));
    l.transpose() * w * l * (0.5 * len)
}

/// Slobodeckij seminorm Gram on `(−1, 1)`. The difference quotient of a
/// polynomial is a polynomial, so a tensor GLL rule of `d + 2` points per
/// axis is exact; on the diagonal the quotient is the derivative.
pub fn h_half_gram(d: usize) -> DMatrix<f64> {
    let n = d + 1;
    let rule = gll_rule(n);
    let q = gll_rule(d + 2);
    let l = rule.interp_matrix(&q.nodes, 0);
    let dl = rule.interp_matrix(&q.nodes, 1);
    let nq = q.n;
    let mut g = DMatrix::zeros(n, n);
    let mut k = vec![0.0; n];
    for p in 0..nq {
        for r in 0..nq {
            let (x, y) = (q.nodes[p], q.nodes[r]);
            for j in 0..n {
                k[j] = if p == r { dl[(p, j)] } else { (l[(p, j)] - l[(r, j)]) / (x - y) };
            }
            let w = q.weights[p] * q.weights[r];
            for a in 0..n {
                let ka = w * k[a];
                for b in 0..n {
                    g[(a, b)] += ka * k[b];
                }
            }
        }
    }
    0.5 * (&g + g.transpose())
}

/// Trace quantities whose jumps are penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Value,
    DNu,
    DPhi,
    DX1,
    DX2,
}

/// Quantities of the jump triple on an edge of the given kind.
pub fn jump_quantities(kind: EdgeKind) -> [Quantity; 3] {
    match kind {
        EdgeKind::InteriorInternal => [Quantity::Value, Quantity::DX1, Quantity::DX2],
        _ => [Quantity::Value, Quantity::DNu, Quantity::DPhi],
    }
}

/// Number of trace nodes used on an edge whose sides have degrees `d0, d1`.
pub fn trace_nodes(d0: usize, d1: usize) -> usize {
    2 * d0.max(d1) + 1
}

/// Parametric length of the edge in its norm frame.
pub fn edge_length(mesh: &GeometricMesh, edge: &MeshEdge) -> f64 {
    let side = &edge.sides[0];
    match side.elem {
        ElemRef::Sector(s) => {
            let el = &mesh.sectors[s];
            if side.local % 2 == 0 {
                el.nu.1 - el.nu.0
            } else {
                el.phi.1 - el.phi.0
            }
        }
        ElemRef::Interior(_) => 2.0,
    }
}

/// Trace functionals of `quantity` on side `side_idx` of `edge` at the edge
/// parameters `ts`. `op` must be the operator of that side's element.
pub fn side_trace_rows(
    mesh: &GeometricMesh,
    op: &ElementOperator,
    edge: &MeshEdge,
    side_idx: usize,
    quantity: Quantity,
    ts: &[f64],
) -> Result<Vec<TraceRow>, Error> {
    let mut rows = Vec::with_capacity(ts.len());
    for &t in ts {
        let (xi, eta) = mesh.edge_sample(edge, side_idx, t)?;
        let row = match (op, quantity) {
            (_, Quantity::Value) => TraceRow { xi, eta, c0: 1.0, cxi: 0.0, ceta: 0.0 },
            (ElementOperator::Sector(s), Quantity::DNu) => s.d_nu_row(xi, eta),
            (ElementOperator::Sector(s), Quantity::DPhi) => s.d_phi_row(xi, eta),
            (ElementOperator::Interior(o), Quantity::DX1) => o.dx_row(0, xi, eta),
            (ElementOperator::Interior(o), Quantity::DX2) => o.dx_row(1, xi, eta),
            (ElementOperator::Interior(o), Quantity::DNu | Quantity::DPhi) => {
                // Polar derivatives of the interior side on an arc, from
                // ∂x/∂ν = r e_r and ∂x/∂φ = s r e_θ.
                let crate::geometry::Frame::Sector(k) = edge.frame else {
                    return Err(Error::Mesh(format!("edge {} has no polar frame", edge.id)));
                };
                let frame = &mesh.vertices[k].frame;
                let x = mesh.interiors[o.elem].map(xi, eta);
                let (nu, phi) = frame.inverse(x);
                let r = nu.exp();
                let th = frame.theta(phi);
                let v = if quantity == Quantity::DNu {
                    [r * th.cos(), r * th.sin()]
                } else {
                    let s = frame.scale();
                    [-s * r * th.sin(), s * r * th.cos()]
                };
                o.directional_row(v, xi, eta)
            }
            (ElementOperator::Sector(_), Quantity::DX1 | Quantity::DX2) => {
                return Err(Error::Mesh("Cartesian derivatives are not used on sector sides".into()))
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Dense map from element nodal values to the trace values of `rows`.
pub fn trace_matrix(rows: &[TraceRow], degree: usize) -> DMatrix<f64> {
    let n = degree + 1;
    let rule = gll_rule(n);
    let mut b = DMatrix::zeros(rows.len(), n * n);
    for (r, row) in rows.iter().enumerate() {
        let lx = rule.basis_at(row.xi);
        let ly = rule.basis_at(row.eta);
        let dlx: Vec<f64> = (rule.interp_matrix(&[row.xi], 1)).row(0).iter().copied().collect();
        let dly: Vec<f64> = (rule.interp_matrix(&[row.eta], 1)).row(0).iter().copied().collect();
        for i in 0..n {
            for j in 0..n {
                b[(r, i * n + j)] = row.c0 * lx[i] * ly[j] + row.cxi * dlx[i] * ly[j] + row.ceta * lx[i] * dly[j];
            }
        }
    }
    b
}

/// Jump `left − right` of `quantity` across a two-sided edge, sampled at
/// the edge's trace nodes.
pub fn jump_vector(
    mesh: &GeometricMesh,
    edge: &MeshEdge,
    ops: (&ElementOperator, &ElementOperator),
    u: (&NodalTensor, &NodalTensor),
    quantity: Quantity,
) -> Result<Vec<f64>, Error> {
    if edge.sides.len() != 2 || !edge.finite_measure {
        return Err(Error::Mesh(format!("edge {} carries no jump", edge.id)));
    }
    let nt = trace_nodes(u.0.degree, u.1.degree);
    let ts = gll_rule(nt).nodes.clone();
    let r0 = side_trace_rows(mesh, ops.0, edge, 0, quantity, &ts)?;
    let r1 = side_trace_rows(mesh, ops.1, edge, 1, quantity, &ts)?;
    Ok(r0.iter().zip(&r1).map(|(a, b)| a.eval(u.0) - b.eval(u.1)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn trace_node_count() {
        assert_eq!(trace_nodes(2, 5), 11);
        assert_eq!(trace_nodes(0, 0), 1);
    }

    #[test]
    fn jump_triples_by_edge_kind() {
        assert_eq!(jump_quantities(EdgeKind::InteriorInternal), [Quantity::Value, Quantity::DX1, Quantity::DX2]);
        assert_eq!(jump_quantities(EdgeKind::SectorInternal), [Quantity::Value, Quantity::DNu, Quantity::DPhi]);
    }

    #[test]
    fn scaled_grams_integrate_constants() {
        let g = edge_gram(4);
        let one = DVector::from_element(5, 1.0);
        let l2 = g.l2_scaled(3.0);
        assert!(((one.transpose() * &l2 * &one)[(0, 0)] - 3.0).abs() < 1e-12);
        // The seminorm part vanishes on constants.
        let h = g.h_half_scaled(3.0);
        assert!(((one.transpose() * &h * &one)[(0, 0)] - 3.0).abs() < 1e-11);
    }
}
