//! The discrete least-squares functional as a list of weighted residual
//! terms `w ‖B U − d‖²_G`, the normal-equation operator `A = Σ w BᵀGB`, the
//! right-hand side `h = Σ w BᵀGd` and the `(U_I, U_B)` split.
//!
//! Element blocks come first in the order sectors `(k, i, j ≥ 2)` then
//! interior quads; the `p` vertex constants `h_k` occupy the last slots.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::{self, gll_rule, NodalTensor};
use crate::fracnorm::{edge_gram, edge_length, jump_quantities, side_trace_rows, trace_nodes, Quantity};
use crate::geometry::{side_point, EdgeKind, ElemRef, GeometricMesh, MeshEdge};
use crate::operator::{apply_operator, element_operators, operator_matrix, residual_points, side_frame, ElementOperator, TraceRow};
use crate::probdef::{BcKind, EllipticProblem};
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub elem: ElemRef,
    pub offset: usize,
    pub degree: usize,
}

impl Block {
    pub fn size(&self) -> usize {
        (self.degree + 1) * (self.degree + 1)
    }
}

#[derive(Debug, Clone)]
pub struct DofLayout {
    pub blocks: Vec<Block>,
    pub block_of: HashMap<ElemRef, usize>,
    /// Number of element unknowns, `|U_I|`.
    pub n_interior: usize,
    pub p: usize,
}

impl DofLayout {
    pub fn new(mesh: &GeometricMesh) -> Self {
        let mut blocks = Vec::new();
        let mut block_of = HashMap::new();
        let mut off = 0;
        for e in mesh.element_refs() {
            let d = mesh.elem_degree(e);
            if matches!(e, ElemRef::Sector(s) if mesh.sectors[s].j == 1) {
                continue;
            }
            block_of.insert(e, blocks.len());
            blocks.push(Block { elem: e, offset: off, degree: d });
            off += (d + 1) * (d + 1);
        }
        DofLayout {
            blocks,
            block_of,
            n_interior: off,
            p: mesh.vertices.len(),
        }
    }

    pub fn total(&self) -> usize {
        self.n_interior + self.p
    }

    pub fn vertex_slot(&self, k: usize) -> usize {
        self.n_interior + k
    }

    pub fn block(&self, e: ElemRef) -> Option<&Block> {
        self.block_of.get(&e).map(|&b| &self.blocks[b])
    }

    /// Nodal tensor of element `e` from a full DOF vector.
    pub fn tensor(&self, u: &[f64], e: ElemRef) -> Option<NodalTensor> {
        let b = self.block(e)?;
        Some(NodalTensor::from_flat(b.degree, &u[b.offset..b.offset + b.size()]))
    }

    pub fn split(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (u[..self.n_interior].to_vec(), u[self.n_interior..].to_vec())
    }

    pub fn merge(&self, ui: &[f64], ub: &[f64]) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.total());
        u.extend_from_slice(ui);
        u.extend_from_slice(ub);
        u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TermKind {
    PdeSector,
    PdeInterior,
    Jump,
    DirichletSector,
    DirichletVertex,
    NeumannSector,
    DirichletInterior,
    NeumannInterior,
}

/// Symmetric positive (semi)definite Gram of a residual.
#[derive(Debug, Clone)]
pub enum Gram {
    Diag(Vec<f64>),
    /// Dense diagonal blocks covering consecutive residual rows.
    BlockDiag(Vec<DMatrix<f64>>),
}

impl Gram {
    pub fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            Gram::Diag(w) => DVector::from_iterator(r.len(), r.iter().zip(w).map(|(a, b)| a * b)),
            Gram::BlockDiag(bs) => {
                let mut out = DVector::zeros(r.len());
                let mut off = 0;
                for b in bs {
                    let n = b.nrows();
                    let seg = b * r.rows(off, n);
                    out.rows_mut(off, n).copy_from(&seg);
                    off += n;
                }
                out
            }
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            Gram::Diag(w) => DMatrix::from_diagonal(&DVector::from_column_slice(w)),
            Gram::BlockDiag(bs) => {
                let n: usize = bs.iter().map(|b| b.nrows()).sum();
                let mut g = DMatrix::zeros(n, n);
                let mut off = 0;
                for b in bs {
                    let k = b.nrows();
                    g.view_mut((off, off), (k, k)).copy_from(b);
                    off += k;
                }
                g
            }
        }
    }
}

/// Where one contribution to a trace residual row comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Source {
    Elem(ElemRef, TraceRow),
    Vertex(usize),
}

/// Recipe for recomputing a residual directly from nodal tensors.
#[derive(Debug, Clone)]
pub enum Recipe {
    Pde(ElemRef),
    Trace(Vec<Vec<(Source, f64)>>),
}

#[derive(Debug, Clone)]
pub struct ResidualTerm {
    pub kind: TermKind,
    pub weight: f64,
    pub edge: Option<usize>,
    pub elem: Option<ElemRef>,
    /// Global indices of the local columns of `b`.
    pub dofs: Vec<usize>,
    pub b: DMatrix<f64>,
    pub gram: Gram,
    pub data: DVector<f64>,
    pub recipe: Recipe,
    /// `w BᵀGB`.
    pub k: DMatrix<f64>,
    /// `w BᵀGd`.
    pub h: DVector<f64>,
    /// `w dᵀGd`.
    pub c: f64,
}

impl ResidualTerm {
    fn finish(
        kind: TermKind,
        weight: f64,
        edge: Option<usize>,
        elem: Option<ElemRef>,
        dofs: Vec<usize>,
        b: DMatrix<f64>,
        gram: Gram,
        data: DVector<f64>,
        recipe: Recipe,
    ) -> Self {
        let g = gram.dense();
        let gb = &g * &b;
        let k = b.transpose() * &gb * weight;
        let k = 0.5 * (&k + k.transpose());
        let gd = gram.apply(&data);
        let h = b.transpose() * &gd * weight;
        let c = weight * data.dot(&gd);
        ResidualTerm { kind, weight, edge, elem, dofs, b, gram, data, recipe, k, h, c }
    }

    /// `w (Bv − d)ᵀ G (Bv − d)` through the stored matrices.
    pub fn value(&self, u: &[f64]) -> f64 {
        let x = DVector::from_iterator(self.dofs.len(), self.dofs.iter().map(|&i| u[i]));
        let r = &self.b * x - &self.data;
        self.weight * r.dot(&self.gram.apply(&r))
    }
}

/// Projected data of the functional.
#[derive(Debug, Clone, Default)]
pub struct ProjectedData {
    /// Forcing per element, degree `2W_j`, on the element's master square.
    pub f_hat: HashMap<ElemRef, NodalTensor>,
    /// Boundary data per boundary edge, degree `2W_j`, in the side's own
    /// master coordinate (`ν` on sector sides, `t` on interior sides).
    pub g_hat: HashMap<usize, Vec<f64>>,
    /// Dirichlet vertex values; `None` away from Dirichlet edges.
    pub a: Vec<Option<f64>>,
}

fn domain(e: ElemRef, x: [f64; 2], msg: String) -> Error {
    Error::Domain {
        index: 0,
        msg: format!("data on {e:?} at ({}, {}): {msg}", x[0], x[1]),
    }
}

/// Dirichlet vertex values: the average of the adjacent Dirichlet edges'
/// data at the vertex.
pub fn vertex_data(prob: &EllipticProblem) -> Result<Vec<Option<f64>>, Error> {
    let p = prob.p();
    (0..p)
        .map(|k| {
            let x = prob.vertices[k];
            let mut vals = Vec::new();
            for e in [k, (k + 1) % p] {
                if prob.edges[e].bc == BcKind::Dirichlet {
                    vals.push(prob.edge_data(e, x[0], x[1]).map_err(|msg| Error::Domain {
                        index: k,
                        msg: format!("boundary data at vertex {k}: {msg}"),
                    })?);
                }
            }
            Ok(if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            })
        })
        .collect()
}

/// H² projections of forcing and boundary data at degree `2W_j`.
pub fn project_data(prob: &EllipticProblem, mesh: &GeometricMesh) -> Result<ProjectedData, Error> {
    let layout = DofLayout::new(mesh);
    let f_hat: Vec<(ElemRef, NodalTensor)> = layout
        .blocks
        .par_iter()
        .map(|b| {
            let dd = 2 * b.degree;
            let t = match b.elem {
                ElemRef::Sector(s) => {
                    let el = &mesh.sectors[s];
                    let frame = &mesh.vertices[el.k].frame;
                    let sj = frame.jacobian().sqrt();
                    let nq = dd + 3;
                    let q = gll_rule(nq);
                    let mut smp = DMatrix::zeros(nq, nq);
                    for p in 0..nq {
                        for r in 0..nq {
                            let (nu, phi) = el.to_nu_phi(q.nodes[p], q.nodes[r]);
                            let x = frame.map(nu, phi);
                            let f = prob.f.value(x[0], x[1]).map_err(|m| domain(b.elem, x, m))?;
                            smp[(p, r)] = sj * (2.0 * nu).exp() * f;
                        }
                    }
                    basis::h2_project_2d_samples(&smp, dd, el.half_nu(), el.half_phi())?
                }
                ElemRef::Interior(l) => {
                    let el = &mesh.interiors[l];
                    let nq = dd + 3;
                    let q = gll_rule(nq);
                    let mut smp = DMatrix::zeros(nq, nq);
                    for p in 0..nq {
                        for r in 0..nq {
                            let (xi, eta) = (q.nodes[p], q.nodes[r]);
                            let x = el.map(xi, eta);
                            let f = prob.f.value(x[0], x[1]).map_err(|m| domain(b.elem, x, m))?;
                            smp[(p, r)] = el.metric(xi, eta).det.sqrt() * f;
                        }
                    }
                    basis::h2_project_2d_samples(&smp, dd, 1.0, 1.0)?
                }
            };
            Ok((b.elem, t))
        })
        .collect::<Result<_, Error>>()?;

    let mut g_hat = HashMap::new();
    for edge in &mesh.edges {
        let Some(pe) = edge.boundary_edge else { continue };
        if !edge.finite_measure {
            continue;
        }
        let side = edge.sides[0];
        let bc = prob.edges[pe].bc;
        let vals = match side.elem {
            ElemRef::Sector(s) => {
                let el = &mesh.sectors[s];
                let frame = &mesh.vertices[el.k].frame;
                let eta = if side.local == 0 { -1.0 } else { 1.0 };
                let d = 2 * el.degree;
                basis::h2_project_1d_checked(
                    |xi| {
                        let (nu, phi) = el.to_nu_phi(xi, eta);
                        let x = frame.map(nu, phi);
                        let g = prob.edge_data(pe, x[0], x[1]).map_err(|m| domain(side.elem, x, m))?;
                        Ok(if bc == BcKind::Neumann { nu.exp() * g } else { g })
                    },
                    d,
                    el.half_nu(),
                )?
            }
            ElemRef::Interior(l) => {
                let el = &mesh.interiors[l];
                let d = 2 * el.degree;
                basis::h2_project_1d_checked(
                    |t| {
                        let (xi, eta) = side_point(side.local, t);
                        let x = el.map(xi, eta);
                        prob.edge_data(pe, x[0], x[1]).map_err(|m| domain(side.elem, x, m))
                    },
                    d,
                    1.0,
                )?
            }
        };
        g_hat.insert(edge.id, vals);
    }
    Ok(ProjectedData {
        f_hat: f_hat.into_iter().collect(),
        g_hat,
        a: vertex_data(prob)?,
    })
}

#[derive(Debug, Clone)]
pub struct NormalSystem {
    pub layout: DofLayout,
    pub terms: Vec<ResidualTerm>,
    pub constant: f64,
    pub rhs: Vec<f64>,
}

struct Segment {
    gram: DMatrix<f64>,
    rows: Vec<Vec<(Source, f64)>>,
    data: Vec<f64>,
}

fn segment_from_rows(
    gram: DMatrix<f64>,
    parts: Vec<(Vec<TraceRow>, ElemRef, f64)>,
    vertex: Option<(usize, f64)>,
    data: Vec<f64>,
) -> Segment {
    let n = data.len();
    let mut rows = vec![Vec::new(); n];
    for (rs, e, sign) in parts {
        for (i, r) in rs.into_iter().enumerate() {
            rows[i].push((Source::Elem(e, r), sign));
        }
    }
    if let Some((k, c)) = vertex {
        for row in rows.iter_mut() {
            row.push((Source::Vertex(k), c));
        }
    }
    Segment { gram, rows, data }
}

/// Local column map of a trace term and its dense `B`.
fn trace_term(
    layout: &DofLayout,
    mesh: &GeometricMesh,
    kind: TermKind,
    weight: f64,
    edge: Option<usize>,
    segs: Vec<Segment>,
) -> ResidualTerm {
    let mut dofs = Vec::new();
    let mut local: HashMap<ElemRef, usize> = HashMap::new();
    let mut vlocal: HashMap<usize, usize> = HashMap::new();
    for s in &segs {
        for row in &s.rows {
            for (src, _) in row {
                match *src {
                    Source::Elem(e, _) => {
                        if !local.contains_key(&e) {
                            let b = layout.block(e).expect("element has a block");
                            local.insert(e, dofs.len());
                            dofs.extend(b.offset..b.offset + b.size());
                        }
                    }
                    Source::Vertex(k) => {
                        if !vlocal.contains_key(&k) {
                            vlocal.insert(k, dofs.len());
                            dofs.push(layout.vertex_slot(k));
                        }
                    }
                }
            }
        }
    }
    let nrows: usize = segs.iter().map(|s| s.rows.len()).sum();
    let mut b = DMatrix::zeros(nrows, dofs.len());
    let mut data = DVector::zeros(nrows);
    let mut grams = Vec::new();
    let mut recipe = Vec::with_capacity(nrows);
    let mut row_i = 0;
    for s in segs {
        for (ri, row) in s.rows.iter().enumerate() {
            for (src, coef) in row {
                match *src {
                    Source::Elem(e, tr) => {
                        let d = mesh.elem_degree(e);
                        let m = crate::fracnorm::trace_matrix(&[tr], d);
                        let off = local[&e];
                        for c in 0..m.ncols() {
                            b[(row_i, off + c)] += coef * m[(0, c)];
                        }
                    }
                    Source::Vertex(k) => b[(row_i, vlocal[&k])] += coef,
                }
            }
            data[row_i] = s.data[ri];
            row_i += 1;
        }
        recipe.extend(s.rows);
        grams.push(s.gram);
    }
    ResidualTerm::finish(
        kind,
        weight,
        edge,
        None,
        dofs,
        b,
        Gram::BlockDiag(grams),
        data,
        Recipe::Trace(recipe),
    )
}

/// Builds every term of the functional.
pub fn build_functional(prob: &EllipticProblem, mesh: &GeometricMesh) -> Result<NormalSystem, Error> {
    let layout = DofLayout::new(mesh);
    let ops: HashMap<ElemRef, ElementOperator> = element_operators(prob, mesh)?.into_iter().collect();
    let data = project_data(prob, mesh)?;

    enum Job<'a> {
        Pde(&'a crate::assembly::Block),
        Edge(&'a MeshEdge),
        Vertex(usize, usize),
    }
    let mut jobs: Vec<Job> = layout.blocks.iter().map(Job::Pde).collect();
    for e in &mesh.edges {
        if e.finite_measure {
            jobs.push(Job::Edge(e));
        }
    }
    let p = prob.p();
    for m in 0..p {
        if prob.edges[m].bc == BcKind::Dirichlet {
            jobs.push(Job::Vertex((m + p - 1) % p, m));
            jobs.push(Job::Vertex(m, m));
        }
    }

    let terms: Vec<Option<ResidualTerm>> = jobs
        .par_iter()
        .map(|job| match job {
            Job::Pde(b) => pde_term(mesh, &ops, &data, b).map(Some),
            Job::Edge(e) => edge_term(mesh, &layout, &ops, &data, e),
            Job::Vertex(k, m) => {
                let a = data.a[*k].ok_or_else(|| Error::Numerical(format!("vertex {k} lacks Dirichlet data")))?;
                Ok(Some(ResidualTerm::finish(
                    TermKind::DirichletVertex,
                    1.0,
                    Some(*m),
                    None,
                    vec![layout.vertex_slot(*k)],
                    DMatrix::from_element(1, 1, 1.0),
                    Gram::Diag(vec![1.0]),
                    DVector::from_element(1, a),
                    Recipe::Trace(vec![vec![(Source::Vertex(*k), 1.0)]]),
                )))
            }
        })
        .collect::<Result<_, Error>>()?;
    let terms: Vec<ResidualTerm> = terms.into_iter().flatten().collect();
    let constant = terms.iter().map(|t| t.c).sum();
    let mut rhs = vec![0.0; layout.total()];
    for t in &terms {
        for (li, &g) in t.dofs.iter().enumerate() {
            rhs[g] += t.h[li];
        }
    }
    Ok(NormalSystem { layout, terms, constant, rhs })
}

fn pde_term(
    mesh: &GeometricMesh,
    ops: &HashMap<ElemRef, ElementOperator>,
    data: &ProjectedData,
    b: &Block,
) -> Result<ResidualTerm, Error> {
    let nq = residual_points(b.degree);
    let q = gll_rule(nq);
    let (bm, weight, kind, measure) = match &ops[&b.elem] {
        ElementOperator::Sector(op) => {
            let el = &mesh.sectors[op.elem];
            let vd = &mesh.vertices[el.k];
            (operator_matrix(op), vd.layer_weight(el.j), TermKind::PdeSector, op.half_nu * op.half_phi)
        }
        ElementOperator::Interior(op) => (operator_matrix(op), 1.0, TermKind::PdeInterior, 1.0),
    };
    let fq = data.f_hat[&b.elem].on_grid(&q.nodes, &q.nodes, 0, 0);
    let mut d = DVector::zeros(nq * nq);
    let mut w = vec![0.0; nq * nq];
    for p in 0..nq {
        for r in 0..nq {
            d[p * nq + r] = fq[(p, r)];
            w[p * nq + r] = q.weights[p] * q.weights[r] * measure;
        }
    }
    Ok(ResidualTerm::finish(
        kind,
        weight,
        None,
        Some(b.elem),
        (b.offset..b.offset + b.size()).collect(),
        bm,
        Gram::Diag(w),
        d,
        Recipe::Pde(b.elem),
    ))
}

fn edge_term(
    mesh: &GeometricMesh,
    layout: &DofLayout,
    ops: &HashMap<ElemRef, ElementOperator>,
    data: &ProjectedData,
    edge: &MeshEdge,
) -> Result<Option<ResidualTerm>, Error> {
    let len = edge_length(mesh, edge);
    let first = edge.sides[0].elem;
    let d0 = mesh.elem_degree(first);
    match edge.kind {
        EdgeKind::SectorInternal | EdgeKind::InteriorInternal | EdgeKind::SectorArcInterface => {
            let e1 = edge.sides[1].elem;
            let nt = trace_nodes(d0, mesh.elem_degree(e1));
            let ts = gll_rule(nt).nodes.clone();
            let g = edge_gram(nt - 1);
            let mut segs = Vec::new();
            for (qi, qn) in jump_quantities(edge.kind).into_iter().enumerate() {
                let r0 = side_trace_rows(mesh, &ops[&first], edge, 0, qn, &ts)?;
                let r1 = side_trace_rows(mesh, &ops[&e1], edge, 1, qn, &ts)?;
                let gram = if qi == 0 { g.l2_scaled(len) } else { g.h_half_scaled(len) };
                segs.push(segment_from_rows(gram, vec![(r0, first, 1.0), (r1, e1, -1.0)], None, vec![0.0; nt]));
            }
            Ok(Some(trace_term(layout, mesh, TermKind::Jump, edge.weight, Some(edge.id), segs)))
        }
        EdgeKind::Layer1Interface => {
            let ElemRef::Sector(s1) = edge.sides[1].elem else { unreachable!() };
            let k = mesh.sectors[s1].k;
            let nt = trace_nodes(d0, 0);
            let ts = gll_rule(nt).nodes.clone();
            let g = edge_gram(nt - 1);
            let mut segs = Vec::new();
            for (qi, qn) in [Quantity::Value, Quantity::DNu, Quantity::DPhi].into_iter().enumerate() {
                let r0 = side_trace_rows(mesh, &ops[&first], edge, 0, qn, &ts)?;
                let gram = if qi == 0 { g.l2_scaled(len) } else { g.h_half_scaled(len) };
                let vtx = if qi == 0 { Some((k, -1.0)) } else { None };
                segs.push(segment_from_rows(gram, vec![(r0, first, 1.0)], vtx, vec![0.0; nt]));
            }
            Ok(Some(trace_term(layout, mesh, TermKind::Jump, edge.weight, Some(edge.id), segs)))
        }
        EdgeKind::BoundaryDirichlet | EdgeKind::BoundaryNeumann => {
            let gv = &data.g_hat[&edge.id];
            let nt = trace_nodes(d0, d0);
            let ts = gll_rule(nt).nodes.clone();
            let g = edge_gram(nt - 1);
            let side = edge.sides[0];
            let op = &ops[&first];
            let dirichlet = edge.kind == EdgeKind::BoundaryDirichlet;
            match (op, side.elem) {
                (ElementOperator::Sector(sop), ElemRef::Sector(s)) => {
                    let el = &mesh.sectors[s];
                    let k = el.k;
                    let xis: Vec<f64> = ts.iter().map(|&t| side_point(side.local, t).0).collect();
                    let lv = basis::eval_1d(gv, &xis, 0);
                    let weight = mesh.vertices[k].layer_weight(el.j);
                    if dirichlet {
                        let a = data.a[k].expect("Dirichlet edge has vertex data");
                        let r0 = side_trace_rows(mesh, op, edge, 0, Quantity::Value, &ts)?;
                        let r1 = side_trace_rows(mesh, op, edge, 0, Quantity::DNu, &ts)?;
                        let ld: Vec<f64> = basis::eval_1d(gv, &xis, 1).iter().map(|v| v / el.half_nu()).collect();
                        let segs = vec![
                            segment_from_rows(g.l2_scaled(len), vec![(r0, first, 1.0)], Some((k, -1.0)), lv.iter().map(|v| v - a).collect()),
                            segment_from_rows(g.h_half_scaled(len), vec![(r1, first, 1.0)], None, ld),
                        ];
                        Ok(Some(trace_term(layout, mesh, TermKind::DirichletSector, weight, Some(edge.id), segs)))
                    } else {
                        let rows = ts
                            .iter()
                            .map(|&t| {
                                let (xi, eta) = side_point(side.local, t);
                                sop.conormal_row(side.local, xi, eta)
                            })
                            .collect();
                        let segs = vec![segment_from_rows(g.h_half_scaled(len), vec![(rows, first, 1.0)], None, lv)];
                        Ok(Some(trace_term(layout, mesh, TermKind::NeumannSector, weight, Some(edge.id), segs)))
                    }
                }
                (ElementOperator::Interior(iop), ElemRef::Interior(l)) => {
                    let el = &mesh.interiors[l];
                    let (tan, nor) = side_frame(el, side.local);
                    let a = el.corners[side.local];
                    let bpt = el.corners[(side.local + 1) % 4];
                    let plen = (bpt[0] - a[0]).hypot(bpt[1] - a[1]);
                    let ov = basis::eval_1d(gv, &ts, 0);
                    if dirichlet {
                        let r0 = side_trace_rows(mesh, op, edge, 0, Quantity::Value, &ts)?;
                        let rt = ts
                            .iter()
                            .map(|&t| {
                                let (xi, eta) = side_point(side.local, t);
                                iop.tangential_row(tan, xi, eta)
                            })
                            .collect();
                        let od: Vec<f64> = basis::eval_1d(gv, &ts, 1).iter().map(|v| v * 2.0 / plen).collect();
                        let segs = vec![
                            segment_from_rows(g.l2_scaled(2.0), vec![(r0, first, 1.0)], None, ov),
                            segment_from_rows(g.h_half_scaled(2.0), vec![(rt, first, 1.0)], None, od),
                        ];
                        Ok(Some(trace_term(layout, mesh, TermKind::DirichletInterior, 1.0, Some(edge.id), segs)))
                    } else {
                        let rows = ts
                            .iter()
                            .map(|&t| {
                                let (xi, eta) = side_point(side.local, t);
                                iop.conormal_row(nor, xi, eta)
                            })
                            .collect();
                        let segs = vec![segment_from_rows(g.h_half_scaled(2.0), vec![(rows, first, 1.0)], None, ov)];
                        Ok(Some(trace_term(layout, mesh, TermKind::NeumannInterior, 1.0, Some(edge.id), segs)))
                    }
                }
                _ => Err(Error::Mesh(format!("edge {} mixes frames", edge.id))),
            }
        }
    }
}

impl NormalSystem {
    pub fn n(&self) -> usize {
        self.layout.total()
    }

    /// `A u = Σ w BᵀGB u`; local products run in parallel and are added in
    /// term order.
    pub fn apply_a(&self, u: &[f64]) -> Result<Vec<f64>, Error> {
        if u.len() != self.n() {
            return Err(Error::Dimension { expected: self.n(), got: u.len() });
        }
        let parts: Vec<DVector<f64>> = self
            .terms
            .par_iter()
            .map(|t| {
                let x = DVector::from_iterator(t.dofs.len(), t.dofs.iter().map(|&i| u[i]));
                &t.k * x
            })
            .collect();
        let mut out = vec![0.0; self.n()];
        for (t, y) in self.terms.iter().zip(&parts) {
            for (li, &g) in t.dofs.iter().enumerate() {
                out[g] += y[li];
            }
        }
        Ok(out)
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// `UᵀAU − 2hᵀU + Σ w dᵀGd`.
    pub fn evaluate_functional(&self, u: &[f64]) -> Result<f64, Error> {
        let au = self.apply_a(u)?;
        let uau: f64 = au.iter().zip(u).map(|(a, b)| a * b).sum();
        let hu: f64 = self.rhs.iter().zip(u).map(|(a, b)| a * b).sum();
        Ok(uau - 2.0 * hu + self.constant)
    }

    /// The functional recomputed term by term from nodal tensors, without
    /// the stored matrices.
    pub fn evaluate_functional_direct(&self, ops: &HashMap<ElemRef, ElementOperator>, u: &[f64]) -> Result<f64, Error> {
        if u.len() != self.n() {
            return Err(Error::Dimension { expected: self.n(), got: u.len() });
        }
        let vals: Vec<f64> = self
            .terms
            .par_iter()
            .map(|t| {
                let r: DVector<f64> = match &t.recipe {
                    Recipe::Pde(e) => {
                        let ut = self.layout.tensor(u, *e).expect("element block");
                        let res = match &ops[e] {
                            ElementOperator::Sector(o) => apply_operator(o, &ut),
                            ElementOperator::Interior(o) => apply_operator(o, &ut),
                        };
                        let nq = res.nrows();
                        DVector::from_iterator(nq * nq, (0..nq).flat_map(|p| (0..nq).map(move |q| (p, q))).map(|(p, q)| res[(p, q)]))
                    }
                    Recipe::Trace(rows) => {
                        let mut cache: HashMap<ElemRef, NodalTensor> = HashMap::new();
                        DVector::from_iterator(
                            rows.len(),
                            rows.iter().map(|row| {
                                row.iter()
                                    .map(|(src, c)| match src {
                                        Source::Elem(e, tr) => {
                                            let ut = cache.entry(*e).or_insert_with(|| self.layout.tensor(u, *e).expect("element block"));
                                            c * tr.eval(ut)
                                        }
                                        Source::Vertex(k) => c * u[self.layout.vertex_slot(*k)],
                                    })
                                    .sum::<f64>()
                            }),
                        )
                    }
                };
                let res = r - &t.data;
                t.weight * res.dot(&t.gram.apply(&res))
            })
            .collect();
        Ok(vals.iter().sum())
    }

    /// Dense `A` (small configurations only).
    pub fn dense_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut a = DMatrix::zeros(n, n);
        for t in &self.terms {
            for (li, &gi) in t.dofs.iter().enumerate() {
                for (lj, &gj) in t.dofs.iter().enumerate() {
                    a[(gi, gj)] += t.k[(li, lj)];
                }
            }
        }
        a
    }

    /// Term counts by kind.
    pub fn term_counts(&self) -> HashMap<TermKind, usize> {
        let mut m = HashMap::new();
        for t in &self.terms {
            *m.entry(t.kind).or_insert(0) += 1;
        }
        m
    }

    /// Checks that every finite-measure edge appears in exactly one edge
    /// term. Returns the offending edge ids.
    pub fn audit_edges(&self, mesh: &GeometricMesh) -> Vec<usize> {
        let mut count = vec![0usize; mesh.edges.len()];
        for t in &self.terms {
            if let (Some(e), false) = (t.edge, t.kind == TermKind::DirichletVertex) {
                count[e] += 1;
            }
        }
        mesh.edges
            .iter()
            .filter(|e| (e.finite_measure && count[e.id] != 1) || (!e.finite_measure && count[e.id] != 0))
            .map(|e| e.id)
            .collect()
    }
}

/// DOF vector interpolating `u` on every element grid, with `h_k = u(A_k)`.
pub fn interpolate(mesh: &GeometricMesh, layout: &DofLayout, u: impl Fn(f64, f64) -> Result<f64, String> + Sync) -> Result<Vec<f64>, Error> {
    let mut out = vec![0.0; layout.total()];
    for b in &layout.blocks {
        let rule = gll_rule(b.degree + 1);
        let n = b.degree + 1;
        for i in 0..n {
            for j in 0..n {
                let x = mesh.elem_point(b.elem, rule.nodes[i], rule.nodes[j]);
                out[b.offset + i * n + j] = u(x[0], x[1]).map_err(|m| domain(b.elem, x, m))?;
            }
        }
    }
    for (k, v) in mesh.vertices.iter().enumerate() {
        out[layout.vertex_slot(k)] = u(v.apex[0], v.apex[1]).map_err(|msg| Error::Domain { index: k, msg })?;
    }
    Ok(out)
}

/// Operators keyed by element, for [`NormalSystem::evaluate_functional_direct`].
pub fn operator_map(prob: &EllipticProblem, mesh: &GeometricMesh) -> Result<HashMap<ElemRef, ElementOperator>, Error> {
    Ok(element_operators(prob, mesh)?.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probdef::parse_problem;

    fn square(gs: [&str; 4], bcs: [&str; 4]) -> EllipticProblem {
        let edges: Vec<String> = gs
            .iter()
            .zip(bcs)
            .map(|(g, bc)| format!(r#"{{"bc":"{bc}","g":"{g}"}}"#))
            .collect();
        let text = format!(
            r#"{{"vertices": [[0,0],[1,0],[1,1],[0,1]], "edges": [{}], "f": "0", "mesh": {{"M": 2, "rho": 0.25}}}}"#,
            edges.join(",")
        );
        parse_problem(&text, "sq").unwrap()
    }

    #[test]
    fn vertex_values_average_dirichlet_neighbours() {
        let p = square(["0", "x+y", "2", "0"], ["dirichlet", "dirichlet", "neumann", "neumann"]);
        // Vertex k closes edge k and opens edge k + 1.
        assert_eq!(vertex_data(&p).unwrap(), vec![Some(0.0), Some(1.0), None, Some(0.0)]);
        let p = square(["1", "x+y", "2", "3"], ["dirichlet"; 4]);
        assert_eq!(vertex_data(&p).unwrap(), vec![Some(0.5), Some(1.5), Some(2.5), Some(2.0)]);
    }

    #[test]
    fn undefined_vertex_data_is_a_domain_error() {
        let p = square(["sqrt(x-2)", "0", "0", "0"], ["dirichlet"; 4]);
        let e = vertex_data(&p).unwrap_err();
        assert!(matches!(e, Error::Domain { .. }), "{e}");
        assert!(e.to_string().contains("boundary data at vertex"), "{e}");
    }

    #[test]
    fn domain_errors_name_element_and_point() {
        let e = domain(ElemRef::Interior(3), [0.5, -1.0], "nan".into());
        let s = e.to_string();
        assert!(s.contains("Interior(3)") && s.contains("(0.5, -1)"), "{s}");
    }
}
