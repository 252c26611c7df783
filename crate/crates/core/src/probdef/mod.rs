//! Problem definitions: polygon, boundary conditions, operator coefficients,
//! forcing, optional exact solution and discretization parameters.

pub mod expr;

use std::f64::consts::PI;
use std::path::Path;
use std::sync::OnceLock;

use serde_json::Value;
use sha2::{Digest, Sha256};

pub use expr::{parse_expression, Expr, Var};

use crate::harness::builtins::Analytic;
use crate::Error;

/// Value, gradient and Hessian of a scalar field at a point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub gx: f64,
    pub gy: f64,
    pub hxx: f64,
    pub hxy: f64,
    pub hyy: f64,
}

/// Expression together with lazily built symbolic derivatives.
#[derive(Debug, Clone)]
pub struct ExprField {
    pub src: String,
    pub expr: Expr,
    derivs: OnceLock<[Expr; 5]>,
}

impl ExprField {
    pub fn parse(src: &str) -> Result<Self, Error> {
        Ok(ExprField {
            src: src.to_string(),
            expr: parse_expression(src)?,
            derivs: OnceLock::new(),
        })
    }

    fn derivs(&self) -> &[Expr; 5] {
        self.derivs.get_or_init(|| {
            let dx = self.expr.diff(Var::X);
            let dy = self.expr.diff(Var::Y);
            let dxx = dx.diff(Var::X);
            let dxy = dx.diff(Var::Y);
            let dyy = dy.diff(Var::Y);
            [dx, dy, dxx, dxy, dyy]
        })
    }
}

/// A scalar field given by an expression or a named analytic function.
#[derive(Debug, Clone)]
pub enum Field {
    Expr(ExprField),
    Analytic(Analytic),
}

impl Field {
    pub fn parse(src: &str) -> Result<Self, Error> {
        Ok(Field::Expr(ExprField::parse(src)?))
    }

    pub fn constant(v: f64) -> Self {
        Field::Expr(ExprField {
            src: format!("{v}"),
            expr: Expr::Const(v),
            derivs: OnceLock::new(),
        })
    }

    /// `Some(c)` when the field is a constant expression.
    pub fn const_value(&self) -> Option<f64> {
        match self {
            Field::Expr(e) if e.expr.is_constant() => e.expr.eval_at(0.0, 0.0).ok(),
            _ => None,
        }
    }

    pub fn value(&self, x: f64, y: f64) -> Result<f64, String> {
        match self {
            Field::Expr(e) => e.expr.eval_at(x, y),
            Field::Analytic(a) => Ok(a.value(x, y)),
        }
    }

    pub fn values(&self, pts: &[(f64, f64)]) -> Result<Vec<f64>, Error> {
        pts.iter()
            .enumerate()
            .map(|(index, &(x, y))| self.value(x, y).map_err(|msg| Error::Domain { index, msg }))
            .collect()
    }

    pub fn jet(&self, x: f64, y: f64) -> Result<Jet, String> {
        match self {
            Field::Expr(e) => {
                let d = e.derivs();
                Ok(Jet {
                    v: e.expr.eval_at(x, y)?,
                    gx: d[0].eval_at(x, y)?,
                    gy: d[1].eval_at(x, y)?,
                    hxx: d[2].eval_at(x, y)?,
                    hxy: d[3].eval_at(x, y)?,
                    hyy: d[4].eval_at(x, y)?,
                })
            }
            Field::Analytic(a) => a.jet(x, y),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Field::Expr(e) => e.src.clone(),
            Field::Analytic(a) => format!("builtin:{}", a.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcKind {
    Dirichlet,
    Neumann,
}

/// Boundary data on one polygon edge. For Neumann edges the data is the
/// conormal derivative `N·A∇u`; an analytic field supplies `u` itself in
/// both cases and the conormal derivative is formed from its gradient.
#[derive(Debug, Clone)]
pub struct EdgeSpec {
    pub bc: BcKind,
    pub g: Field,
}

#[derive(Debug, Clone)]
pub struct Coeffs {
    pub a11: Field,
    pub a12: Field,
    pub a22: Field,
    pub b1: Field,
    pub b2: Field,
    pub c: Field,
}

impl Coeffs {
    pub fn laplacian() -> Self {
        Coeffs {
            a11: Field::constant(1.0),
            a12: Field::constant(0.0),
            a22: Field::constant(1.0),
            b1: Field::constant(0.0),
            b2: Field::constant(0.0),
            c: Field::constant(0.0),
        }
    }

    /// `[a11, a12, a22, b1, b2, c]` at a point.
    pub fn at(&self, x: f64, y: f64) -> Result<[f64; 6], String> {
        Ok([
            self.a11.value(x, y)?,
            self.a12.value(x, y)?,
            self.a22.value(x, y)?,
            self.b1.value(x, y)?,
            self.b2.value(x, y)?,
            self.c.value(x, y)?,
        ])
    }

    pub fn fields(&self) -> [&Field; 6] {
        [&self.a11, &self.a12, &self.a22, &self.b1, &self.b2, &self.c]
    }
}

#[derive(Debug, Clone)]
pub struct MeshParams {
    pub m: usize,
    pub rho: f64,
    /// One ratio per vertex.
    pub mu: Vec<f64>,
    pub max_angle: f64,
    /// Use `W_j = max(2, min(W, ceil(W j / M)))` instead of `W_j = W`.
    pub variable_degree: bool,
}

#[derive(Debug, Clone)]
pub struct SolverParams {
    pub w: usize,
    pub tol: f64,
    pub maxit: usize,
}

pub const DEFAULT_MU: f64 = 0.15;
pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAXIT: usize = 5000;

#[derive(Debug, Clone)]
pub struct EllipticProblem {
    pub name: String,
    pub vertices: Vec<[f64; 2]>,
    /// `edges[e]` joins `vertices[e - 1]` and `vertices[e]` (indices mod p).
    pub edges: Vec<EdgeSpec>,
    pub coeffs: Coeffs,
    pub f: Field,
    pub exact: Option<Field>,
    pub mesh: MeshParams,
    pub solver: SolverParams,
    /// Weight exponents, one per vertex.
    pub beta: Vec<f64>,
    pub interior_quads: Option<Vec<[[f64; 2]; 4]>>,
    /// SHA-256 of the canonical JSON text of the source document.
    pub hash: String,
}

impl EllipticProblem {
    pub fn p(&self) -> usize {
        self.vertices.len()
    }

    /// Endpoints `(start, end)` of edge `e` in counter-clockwise order.
    pub fn edge_endpoints(&self, e: usize) -> ([f64; 2], [f64; 2]) {
        let p = self.p();
        (self.vertices[(e + p - 1) % p], self.vertices[e])
    }

    /// Unit tangent and outward unit normal of edge `e`.
    pub fn edge_frame(&self, e: usize) -> ([f64; 2], [f64; 2]) {
        let (a, b) = self.edge_endpoints(e);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = dx.hypot(dy);
        let t = [dx / len, dy / len];
        (t, [t[1], -t[0]])
    }

    /// Interior angle at vertex `k`.
    pub fn interior_angle(&self, k: usize) -> f64 {
        interior_angle(&self.vertices, k)
    }

    pub fn lambda(&self, k: usize) -> f64 {
        1.0 - self.beta[k]
    }

    /// Boundary datum of edge `e` at a point of that edge.
    pub fn edge_data(&self, e: usize, x: f64, y: f64) -> Result<f64, String> {
        let spec = &self.edges[e];
        match (&spec.g, spec.bc) {
            (Field::Analytic(a), BcKind::Neumann) => {
                let j = a.jet(x, y)?;
                let [a11, a12, a22, ..] = self.coeffs.at(x, y)?;
                let (_, n) = self.edge_frame(e);
                Ok(n[0] * (a11 * j.gx + a12 * j.gy) + n[1] * (a12 * j.gx + a22 * j.gy))
            }
            (g, _) => g.value(x, y),
        }
    }

    /// Parameters overridden from the command line or a sweep.
    pub fn with_degrees(&self, w: Option<usize>, m: Option<usize>) -> Self {
        let mut p = self.clone();
        if let Some(w) = w {
            p.solver.w = w;
        }
        if let Some(m) = m {
            p.mesh.m = m;
        }
        p
    }
}

/// Default `β_k` from the interior angle.
pub fn default_beta(omega: f64) -> f64 {
    1.0 - (PI / omega - 0.05).clamp(0.05, 0.95)
}

pub fn interior_angle(v: &[[f64; 2]], k: usize) -> f64 {
    let p = v.len();
    let prev = v[(k + p - 1) % p];
    let next = v[(k + 1) % p];
    let a = v[k];
    let din = (prev[1] - a[1]).atan2(prev[0] - a[0]);
    let dout = (next[1] - a[1]).atan2(next[0] - a[0]);
    // Counter-clockwise sweep from the outgoing edge to the incoming edge.
    let mut w = din - dout;
    while w <= 0.0 {
        w += 2.0 * PI;
    }
    while w > 2.0 * PI {
        w -= 2.0 * PI;
    }
    w
}

pub fn signed_area(v: &[[f64; 2]]) -> f64 {
    let p = v.len();
    0.5 * (0..p)
        .map(|i| {
            let a = v[i];
            let b = v[(i + 1) % p];
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    c[0] >= a[0].min(b[0]) && c[0] <= a[0].max(b[0]) && c[1] >= a[1].min(b[1]) && c[1] <= a[1].max(b[1])
}

fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// Checks that the closed polyline is simple and counter-clockwise.
pub fn check_polygon(v: &[[f64; 2]]) -> Result<(), Error> {
    let p = v.len();
    if p < 3 {
        return Err(Error::NonSimplePolygon(format!("{p} vertices")));
    }
    for i in 0..p {
        let (a, b) = (v[i], v[(i + 1) % p]);
        if a == b {
            return Err(Error::NonSimplePolygon(format!("repeated vertex {i}")));
        }
        if orient(v[(i + p - 1) % p], a, b) == 0.0 {
            let prev = v[(i + p - 1) % p];
            let dot = (a[0] - prev[0]) * (b[0] - a[0]) + (a[1] - prev[1]) * (b[1] - a[1]);
            if dot < 0.0 {
                return Err(Error::NonSimplePolygon(format!("edge folds back at vertex {i}")));
            }
        }
    }
    for i in 0..p {
        for j in (i + 1)..p {
            if j == i + 1 || (i == 0 && j == p - 1) {
                continue;
            }
            if segments_intersect(v[i], v[(i + 1) % p], v[j], v[(j + 1) % p]) {
                return Err(Error::NonSimplePolygon(format!(
                    "segments starting at vertices {i} and {j} intersect"
                )));
            }
        }
    }
    if signed_area(v) <= 0.0 {
        return Err(Error::NonSimplePolygon("vertices are not counter-clockwise".into()));
    }
    Ok(())
}

/// True when the point lies in the closed polygon.
pub fn point_in_polygon(v: &[[f64; 2]], x: f64, y: f64) -> bool {
    let p = v.len();
    let tol = 1e-12;
    let mut inside = false;
    for i in 0..p {
        let a = v[i];
        let b = v[(i + 1) % p];
        if orient(a, b, [x, y]).abs() <= tol * (1.0 + (b[0] - a[0]).hypot(b[1] - a[1]))
            && on_segment(a, b, [x, y])
        {
            return true;
        }
        if (a[1] > y) != (b[1] > y) {
            let xc = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if x < xc {
                inside = !inside;
            }
        }
    }
    inside
}

/// Smallest eigenvalue of the symmetric coefficient matrix over a
/// deterministic `n x n` grid of the bounding box restricted to the closed
/// polygon. Errors when it is not positive.
pub fn validate_ellipticity(p: &EllipticProblem, n_samples: usize) -> Result<f64, Error> {
    let n = n_samples.max(1);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for v in &p.vertices {
        x0 = x0.min(v[0]);
        x1 = x1.max(v[0]);
        y0 = y0.min(v[1]);
        y1 = y1.max(v[1]);
    }
    let mut pts = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let x = x0 + (x1 - x0) * (i as f64 + 0.5) / n as f64;
            let y = y0 + (y1 - y0) * (j as f64 + 0.5) / n as f64;
            if point_in_polygon(&p.vertices, x, y) {
                pts.push((x, y));
            }
        }
    }
    if pts.is_empty() {
        pts.extend(p.vertices.iter().map(|v| (v[0], v[1])));
    }
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for (idx, &(x, y)) in pts.iter().enumerate() {
        let ev = |f: &Field| f.value(x, y).map_err(|msg| Error::Domain { index: idx, msg });
        let (a11, a12, a22) = (ev(&p.coeffs.a11)?, ev(&p.coeffs.a12)?, ev(&p.coeffs.a22)?);
        let m = 0.5 * (a11 + a22);
        let r = (0.25 * (a11 - a22).powi(2) + a12 * a12).sqrt();
        let lmin = m - r;
        if lmin < best.0 {
            best = (lmin, x, y);
        }
    }
    if best.0 <= 0.0 {
        return Err(Error::NotElliptic {
            min_eig: best.0,
            x: best.1,
            y: best.2,
        });
    }
    Ok(best.0)
}

fn schema(field: &str, reason: impl Into<String>) -> Error {
    Error::Schema {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn get_f64(v: &Value, field: &str) -> Result<f64, Error> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| schema(field, "expected a finite number"))
}

fn get_usize(v: &Value, field: &str) -> Result<usize, Error> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| schema(field, "expected a non-negative integer"))
}

fn get_point(v: &Value, field: &str) -> Result<[f64; 2], Error> {
    match v.as_array() {
        Some(a) if a.len() == 2 => Ok([get_f64(&a[0], field)?, get_f64(&a[1], field)?]),
        _ => Err(schema(field, "expected [x, y]")),
    }
}

fn parse_field(v: &Value, field: &str) -> Result<Field, Error> {
    match v {
        Value::String(s) => Field::parse(s).map_err(|e| schema(field, e.to_string())),
        Value::Number(_) => Ok(Field::constant(get_f64(v, field)?)),
        Value::Object(o) => {
            if let Some(s) = o.get("expr") {
                let s = s.as_str().ok_or_else(|| schema(field, "`expr` must be a string"))?;
                return Field::parse(s).map_err(|e| schema(field, e.to_string()));
            }
            if let Some(b) = o.get("builtin") {
                let name = b.as_str().ok_or_else(|| schema(field, "`builtin` must be a string"))?;
                return Analytic::from_name(name)
                    .map(Field::Analytic)
                    .ok_or_else(|| schema(field, format!("unknown builtin `{name}`")));
            }
            Err(schema(field, "expected {\"expr\": ...} or {\"builtin\": ...}"))
        }
        _ => Err(schema(field, "expected an expression string")),
    }
}

/// Reads and validates a problem file. `builtin:NAME` selects a shipped
/// problem instead of a path.
pub fn load_problem(path: impl AsRef<Path>) -> Result<EllipticProblem, Error> {
    let path = path.as_ref();
    let s = path.to_string_lossy();
    if let Some(name) = s.strip_prefix("builtin:") {
        return crate::harness::builtins::builtin_problem(name);
    }
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: s.to_string(),
        source,
    })?;
    let default_name = path
        .file_stem()
        .map(|x| x.to_string_lossy().to_string())
        .unwrap_or_default();
    parse_problem(&text, &default_name)
}

/// Parses and validates a problem document.
pub fn parse_problem(text: &str, default_name: &str) -> Result<EllipticProblem, Error> {
    let doc: Value = serde_json::from_str(text)?;
    problem_from_value(&doc, default_name)
}

pub fn problem_from_value(doc: &Value, default_name: &str) -> Result<EllipticProblem, Error> {
    let obj = doc.as_object().ok_or_else(|| schema("<root>", "expected a JSON object"))?;
    let name = match obj.get("name") {
        Some(v) => v.as_str().ok_or_else(|| schema("name", "expected a string"))?.to_string(),
        None => default_name.to_string(),
    };

    let vertices: Vec<[f64; 2]> = obj
        .get("vertices")
        .ok_or_else(|| schema("vertices", "missing"))?
        .as_array()
        .ok_or_else(|| schema("vertices", "expected an array"))?
        .iter()
        .enumerate()
        .map(|(i, v)| get_point(v, &format!("vertices[{i}]")))
        .collect::<Result<_, _>>()?;
    let p = vertices.len();
    if p < 3 {
        return Err(schema("vertices", "at least 3 vertices required"));
    }

    let edges_v = obj
        .get("edges")
        .ok_or_else(|| schema("edges", "missing"))?
        .as_array()
        .ok_or_else(|| schema("edges", "expected an array"))?;
    if edges_v.len() != p {
        return Err(Error::EdgeCountMismatch {
            edges: edges_v.len(),
            vertices: p,
        });
    }
    check_polygon(&vertices)?;

    let mut edges = Vec::with_capacity(p);
    for (i, e) in edges_v.iter().enumerate() {
        let field = format!("edges[{i}]");
        let o = e.as_object().ok_or_else(|| schema(&field, "expected an object"))?;
        let bc = match o.get("bc").and_then(Value::as_str) {
            Some("dirichlet") => BcKind::Dirichlet,
            Some("neumann") => BcKind::Neumann,
            _ => return Err(schema(&format!("{field}.bc"), "expected \"dirichlet\" or \"neumann\"")),
        };
        let g = match o.get("g") {
            Some(v) => parse_field(v, &format!("{field}.g"))?,
            None => return Err(schema(&format!("{field}.g"), "missing")),
        };
        edges.push(EdgeSpec { bc, g });
    }

    let mut coeffs = Coeffs::laplacian();
    if let Some(c) = obj.get("coeffs") {
        let co = c.as_object().ok_or_else(|| schema("coeffs", "expected an object"))?;
        for (key, val) in co {
            let fld = parse_field(val, &format!("coeffs.{key}"))?;
            match key.as_str() {
                "a11" => coeffs.a11 = fld,
                "a12" => coeffs.a12 = fld,
                "a22" => coeffs.a22 = fld,
                "b1" => coeffs.b1 = fld,
                "b2" => coeffs.b2 = fld,
                "c" => coeffs.c = fld,
                other => return Err(schema(&format!("coeffs.{other}"), "unknown coefficient")),
            }
        }
    }

    let f = match obj.get("f") {
        Some(v) => parse_field(v, "f")?,
        None => Field::constant(0.0),
    };
    let exact = match obj.get("exact") {
        Some(v) => Some(parse_field(v, "exact")?),
        None => None,
    };

    let mesh_o = obj.get("mesh").and_then(Value::as_object);
    let solver_o = obj.get("solver").and_then(Value::as_object);
    if obj.get("mesh").is_some() && mesh_o.is_none() {
        return Err(schema("mesh", "expected an object"));
    }
    if obj.get("solver").is_some() && solver_o.is_none() {
        return Err(schema("solver", "expected an object"));
    }
    let mesh_get = |k: &str| mesh_o.and_then(|m| m.get(k));
    let solver_get = |k: &str| solver_o.and_then(|m| m.get(k));

    let m_in = mesh_get("M").map(|v| get_usize(v, "mesh.M")).transpose()?;
    let w_in = solver_get("W").map(|v| get_usize(v, "solver.W")).transpose()?;
    let (m, w) = match (m_in, w_in) {
        (Some(m), Some(w)) => (m, w),
        (Some(m), None) => (m, m),
        (None, Some(w)) => (w, w),
        (None, None) => return Err(schema("mesh.M", "at least one of mesh.M and solver.W is required")),
    };
    if m < 2 {
        return Err(schema("mesh.M", "layer count must be at least 2"));
    }
    if w < 2 {
        return Err(schema("solver.W", "degree must be at least 2"));
    }
    let rho = match mesh_get("rho") {
        Some(v) => get_f64(v, "mesh.rho")?,
        None => return Err(schema("mesh.rho", "missing")),
    };
    if rho <= 0.0 {
        return Err(schema("mesh.rho", "must be positive"));
    }
    let mu = match mesh_get("mu") {
        None => vec![DEFAULT_MU; p],
        Some(Value::Array(a)) => {
            if a.len() != p {
                return Err(schema("mesh.mu", format!("expected {p} entries, got {}", a.len())));
            }
            a.iter()
                .enumerate()
                .map(|(i, v)| get_f64(v, &format!("mesh.mu[{i}]")))
                .collect::<Result<_, _>>()?
        }
        Some(v) => vec![get_f64(v, "mesh.mu")?; p],
    };
    if mu.iter().any(|&x| x <= 0.0 || x >= 1.0) {
        return Err(schema("mesh.mu", "ratios must lie in (0, 1)"));
    }
    let max_angle = match mesh_get("max_angle") {
        Some(v) => get_f64(v, "mesh.max_angle")?,
        None => PI / 4.0,
    };
    if max_angle <= 0.0 {
        return Err(schema("mesh.max_angle", "must be positive"));
    }
    let variable_degree = match mesh_get("variable_degree") {
        Some(v) => v.as_bool().ok_or_else(|| schema("mesh.variable_degree", "expected a boolean"))?,
        None => false,
    };
    let tol = match solver_get("tol") {
        Some(v) => get_f64(v, "solver.tol")?,
        None => DEFAULT_TOL,
    };
    if tol <= 0.0 {
        return Err(schema("solver.tol", "must be positive"));
    }
    let maxit = match solver_get("maxit") {
        Some(v) => get_usize(v, "solver.maxit")?,
        None => DEFAULT_MAXIT,
    };

    let beta = match obj.get("beta") {
        None => (0..p).map(|k| default_beta(interior_angle(&vertices, k))).collect(),
        Some(Value::Array(a)) => {
            if a.len() != p {
                return Err(schema("beta", format!("expected {p} entries, got {}", a.len())));
            }
            a.iter()
                .enumerate()
                .map(|(i, v)| get_f64(v, &format!("beta[{i}]")))
                .collect::<Result<Vec<_>, _>>()?
        }
        Some(_) => return Err(schema("beta", "expected an array")),
    };
    if beta.iter().any(|&b| b <= 0.0 || b >= 1.0) {
        return Err(schema("beta", "entries must lie in (0, 1)"));
    }

    let quads_v = obj.get("interior_quads").or_else(|| mesh_get("interior_quads"));
    let interior_quads = match quads_v {
        None => None,
        Some(Value::Array(a)) => {
            let mut out = Vec::with_capacity(a.len());
            for (i, q) in a.iter().enumerate() {
                let field = format!("interior_quads[{i}]");
                let qa = q.as_array().filter(|x| x.len() == 4).ok_or_else(|| schema(&field, "expected 4 corners"))?;
                let mut c = [[0.0; 2]; 4];
                for (k, pt) in qa.iter().enumerate() {
                    c[k] = get_point(pt, &field)?;
                }
                out.push(c);
            }
            Some(out)
        }
        Some(_) => return Err(schema("interior_quads", "expected an array")),
    };

    let canonical = serde_json::to_string(doc)?;
    let hash = Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect::<String>();

    Ok(EllipticProblem {
        name,
        vertices,
        edges,
        coeffs,
        f,
        exact,
        mesh: MeshParams {
            m,
            rho,
            mu,
            max_angle,
            variable_degree,
        },
        solver: SolverParams { w, tol, maxit },
        beta,
        interior_quads,
        hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQUARE: &str = r#"{
        "vertices": [[0,0],[1,0],[1,1],[0,1]],
        "edges": [{"bc":"dirichlet","g":"0"},{"bc":"dirichlet","g":"0"},
                  {"bc":"dirichlet","g":"0"},{"bc":"dirichlet","g":"0"}],
        "coeffs": {"a11":"1","a12":"0","a22":"1","b1":"0","b2":"0","c":"0"},
        "f": "1",
        "mesh": {"M": 3, "rho": 0.25},
        "solver": {"W": 4}
    }"#;

    #[test]
    fn angles_of_lshape() {
        let v = [[-1.0, -1.0], [0.0, -1.0], [0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [-1.0, 1.0]];
        assert!((interior_angle(&v, 2) - 1.5 * PI).abs() < 1e-14);
        for k in [0, 1, 3, 4, 5] {
            assert!((interior_angle(&v, k) - 0.5 * PI).abs() < 1e-14);
        }
        assert!(check_polygon(&v).is_ok());
    }

    #[test]
    fn rejects_bowtie_and_clockwise() {
        let bow = [[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(check_polygon(&bow), Err(Error::NonSimplePolygon(_))));
        let cw = [[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]];
        assert!(matches!(check_polygon(&cw), Err(Error::NonSimplePolygon(_))));
    }

    #[test]
    fn defaults_filled() {
        let p = parse_problem(SQUARE, "sq").unwrap();
        assert_eq!(p.solver.w, 4);
        assert_eq!(p.mesh.m, 3);
        assert_eq!(p.mesh.mu, vec![DEFAULT_MU; 4]);
        for b in &p.beta {
            assert!((b - 0.05).abs() < 1e-15);
        }
        assert_eq!(p.hash.len(), 64);
    }

    #[test]
    fn w_defaults_to_m() {
        let src = SQUARE.replace(r#""solver": {"W": 4}"#, r#""solver": {}"#);
        let p = parse_problem(&src, "sq").unwrap();
        assert_eq!(p.solver.w, 3);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let src = SQUARE.replace(r#""rho": 0.25"#, r#""rho": -1"#);
        match parse_problem(&src, "sq") {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "mesh.rho"),
            other => panic!("{other:?}"),
        }
        let src = SQUARE.replace(r#""f": "1""#, r#""f": "1 +""#);
        match parse_problem(&src, "sq") {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "f"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ellipticity_examples() {
        let mut p = parse_problem(SQUARE, "sq").unwrap();
        assert!((validate_ellipticity(&p, 8).unwrap() - 1.0).abs() < 1e-15);
        p.coeffs.a11 = Field::constant(2.0);
        p.coeffs.a22 = Field::constant(2.0);
        p.coeffs.a12 = Field::constant(1.0);
        assert!((validate_ellipticity(&p, 8).unwrap() - 1.0).abs() < 1e-15);
        p.coeffs.a11 = Field::constant(1.0);
        p.coeffs.a22 = Field::constant(1.0);
        p.coeffs.a12 = Field::constant(2.0);
        assert!(matches!(validate_ellipticity(&p, 8), Err(Error::NotElliptic { .. })));
    }
}
