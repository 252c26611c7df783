//! Gauss–Lobatto–Legendre rules, Lagrange interpolation on GLL nodes,
//! tensor-product nodal polynomials and discrete H² projections.
//!
//! Nodal tensors store values on the `(d+1) x (d+1)` GLL grid of the master
//! square with the row index running over ξ and the column index over η.
//! Flattened vectors use `k = i * (d + 1) + j`.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::Error;

/// A Gauss–Lobatto–Legendre rule with its interpolation data.
#[derive(Debug, Clone)]
pub struct GllRule {
    pub n: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// Barycentric weights of the nodes.
    pub bary: Vec<f64>,
    /// Differentiation matrix: `(D f)_i = p'(x_i)`.
    pub diff: DMatrix<f64>,
}

fn rule_cache() -> &'static RwLock<HashMap<usize, Arc<GllRule>>> {
    static CACHE: OnceLock<RwLock<HashMap<usize, Arc<GllRule>>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

/// Cached rule with `n >= 2` points.
pub fn gll_rule(n: usize) -> Arc<GllRule> {
    assert!(n >= 2, "a GLL rule needs at least two points");
    if let Some(rule) = rule_cache().read().unwrap().get(&n) {
        return rule.clone();
    }
    let rule = Arc::new(GllRule::build(n));
    rule_cache()
        .write()
        .unwrap()
        .entry(n)
        .or_insert(rule)
        .clone()
}

/// Legendre polynomial `P_k(x)` by the three-term recurrence.
pub fn legendre(k: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if k == 0 {
        return p0;
    }
    for m in 2..=k {
        let mf = m as f64;
        let p2 = ((2.0 * mf - 1.0) * x * p1 - (mf - 1.0) * p0) / mf;
        p0 = p1;
        p1 = p2;
    }
    p1
}

impl GllRule {
    fn build(n: usize) -> Self {
        let nn = n - 1;
        let nf = nn as f64;
        let mut x: Vec<f64> = (0..n)
            .map(|i| -(std::f64::consts::PI * i as f64 / nf).cos())
            .collect();
        for _ in 0..100 {
            let mut delta: f64 = 0.0;
            for i in 0..n {
                let xi = x[i];
                let (mut p0, mut p1) = (1.0, xi);
                for m in 2..=nn {
                    let mf = m as f64;
                    let p2 = ((2.0 * mf - 1.0) * xi * p1 - (mf - 1.0) * p0) / mf;
                    p0 = p1;
                    p1 = p2;
                }
                // p1 = P_N, p0 = P_{N-1} (for N = 1 the update vanishes at ±1).
                let prev = if nn == 1 { 1.0 } else { p0 };
                let step = (xi * p1 - prev) / ((nf + 1.0) * p1);
                x[i] = xi - step;
                delta = delta.max(step.abs());
            }
            if delta < 1e-16 {
                break;
            }
        }
        x[0] = -1.0;
        x[nn] = 1.0;
        for i in 0..n / 2 {
            let s = 0.5 * (x[nn - i] - x[i]);
            x[i] = -s;
            x[nn - i] = s;
        }
        if n % 2 == 1 {
            x[nn / 2] = 0.0;
        }
        let weights: Vec<f64> = x
            .iter()
            .map(|&xi| {
                let p = legendre(nn, xi);
                2.0 / (nf * (nf + 1.0) * p * p)
            })
            .collect();
        let bary = barycentric_weights(&x);
        let diff = diff_matrix_from(&x, &bary);
        GllRule {
            n,
            nodes: x,
            weights,
            bary,
            diff,
        }
    }

    pub fn degree(&self) -> usize {
        self.n - 1
    }

    /// Lagrange basis values `ℓ_j(x)` for all nodes.
    pub fn basis_at(&self, x: f64) -> Vec<f64> {
        lagrange_basis(&self.nodes, &self.bary, x)
    }

    /// Interpolation matrix from this rule's nodes to `pts`, with `order`
    /// derivatives applied (0, 1 or 2).
    pub fn interp_matrix(&self, pts: &[f64], order: usize) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(pts.len(), self.n);
        for (r, &x) in pts.iter().enumerate() {
            for (c, v) in self.basis_at(x).into_iter().enumerate() {
                l[(r, c)] = v;
            }
        }
        let mut out = l;
        for _ in 0..order {
            out = &out * &self.diff;
        }
        out
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Barycentric weights `1 / prod_{k != j} (x_j - x_k)`, rescaled.
pub fn barycentric_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut w = vec![1.0; n];
    for j in 0..n {
        for k in 0..n {
            if k != j {
                w[j] *= 2.0 * (x[j] - x[k]);
            }
        }
        w[j] = 1.0 / w[j];
    }
    let scale = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    w.iter().map(|v| v / scale).collect()
}

/// Lagrange basis at `x` via the second barycentric formula.
pub fn lagrange_basis(nodes: &[f64], bary: &[f64], x: f64) -> Vec<f64> {
    let n = nodes.len();
    let mut out = vec![0.0; n];
    for j in 0..n {
        if x == nodes[j] {
            out[j] = 1.0;
            return out;
        }
    }
    let mut denom = 0.0;
    for j in 0..n {
        let t = bary[j] / (x - nodes[j]);
        out[j] = t;
        denom += t;
    }
    for v in &mut out {
        *v /= denom;
    }
    out
}

fn diff_matrix_from(x: &[f64], bary: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            if i != j {
                let v = (bary[j] / bary[i]) / (x[i] - x[j]);
                d[(i, j)] = v;
                row += v;
            }
        }
        d[(i, i)] = -row;
    }
    d
}

/// Differentiation matrix of a rule.
pub fn diff_matrix(rule: &GllRule) -> DMatrix<f64> {
    rule.diff.clone()
}

/// Values of a tensor-product polynomial on the GLL grid of the master square.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalTensor {
    pub degree: usize,
    pub values: DMatrix<f64>,
}

impl NodalTensor {
    pub fn zeros(degree: usize) -> Self {
        NodalTensor {
            degree,
            values: DMatrix::zeros(degree + 1, degree + 1),
        }
    }

    /// Samples `f(ξ, η)` on the GLL grid.
    pub fn from_fn(degree: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let rule = gll_rule(degree + 1);
        let n = degree + 1;
        let values = DMatrix::from_fn(n, n, |i, j| f(rule.nodes[i], rule.nodes[j]));
        NodalTensor { degree, values }
    }

    pub fn from_flat(degree: usize, flat: &[f64]) -> Self {
        let n = degree + 1;
        assert_eq!(flat.len(), n * n);
        NodalTensor {
            degree,
            values: DMatrix::from_fn(n, n, |i, j| flat[i * n + j]),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let n = self.degree + 1;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.values[(i, j)]);
            }
        }
        out
    }

    pub fn rule(&self) -> Arc<GllRule> {
        gll_rule(self.degree + 1)
    }

    /// Values on the tensor grid `pts_xi x pts_eta` with derivative orders
    /// `(a, b)` in ξ and η. Row index runs over `pts_xi`.
    pub fn on_grid(&self, pts_xi: &[f64], pts_eta: &[f64], a: usize, b: usize) -> DMatrix<f64> {
        let rule = self.rule();
        let lx = rule.interp_matrix(pts_xi, a);
        let ly = rule.interp_matrix(pts_eta, b);
        &lx * &self.values * ly.transpose()
    }

    /// Re-samples the polynomial on the GLL grid of a higher degree.
    pub fn elevate(&self, degree: usize) -> NodalTensor {
        assert!(degree >= self.degree);
        if degree == self.degree {
            return self.clone();
        }
        let target = gll_rule(degree + 1);
        NodalTensor {
            degree,
            values: self.on_grid(&target.nodes, &target.nodes, 0, 0),
        }
    }
}

/// Point values of a nodal tensor by barycentric evaluation.
pub fn eval_nodal(t: &NodalTensor, pts: &[(f64, f64)]) -> Vec<f64> {
    let rule = t.rule();
    let n = t.degree + 1;
    pts.iter()
        .map(|&(xi, eta)| {
            let lx = rule.basis_at(xi);
            let ly = rule.basis_at(eta);
            let mut s = 0.0;
            for i in 0..n {
                let mut row = 0.0;
                for j in 0..n {
                    row += t.values[(i, j)] * ly[j];
                }
                s += lx[i] * row;
            }
            s
        })
        .collect()
}

/// Point values and gradients `(v, v_ξ, v_η)` of a nodal tensor.
pub fn eval_nodal_grad(t: &NodalTensor, pts: &[(f64, f64)]) -> Vec<(f64, f64, f64)> {
    let rule = t.rule();
    let dxi = NodalTensor {
        degree: t.degree,
        values: &rule.diff * &t.values,
    };
    let deta = NodalTensor {
        degree: t.degree,
        values: &t.values * rule.diff.transpose(),
    };
    let v = eval_nodal(t, pts);
    let vx = eval_nodal(&dxi, pts);
    let vy = eval_nodal(&deta, pts);
    (0..pts.len()).map(|k| (v[k], vx[k], vy[k])).collect()
}

/// One-dimensional H² Gram pieces on `degree + 1` GLL nodes, integrated
/// with a `nq`-point GLL rule: `[M0, M1, M2]` with `M_a = E_aᵀ W E_a`.
pub fn h2_gram_parts_1d(degree: usize, nq: usize) -> [DMatrix<f64>; 3] {
    let rule = gll_rule(degree + 1);
    let q = gll_rule(nq);
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(&q.weights));
    let mut out: [DMatrix<f64>; 3] = Default::default();
    for (a, slot) in out.iter_mut().enumerate() {
        let e = rule.interp_matrix(&q.nodes, a);
        *slot = e.transpose() * &w * &e;
    }
    out
}

/// Discrete H² Gram on the rectangle with half-lengths `(hx, hy)`, in the
/// nodal basis of `degree`, using a `nq`-point rule per direction. The
/// common measure factor `hx * hy` is included.
pub fn h2_gram_2d(degree: usize, nq: usize, hx: f64, hy: f64) -> DMatrix<f64> {
    let parts = h2_gram_parts_1d(degree, nq);
    let n = degree + 1;
    let mut g = DMatrix::zeros(n * n, n * n);
    for a in 0..=2usize {
        for b in 0..=(2 - a) {
            let s = hx * hy * hx.powi(-2 * a as i32) * hy.powi(-2 * b as i32);
            g += parts[a].kronecker(&parts[b]) * s;
        }
    }
    g
}

type GramKey = (usize, usize, u64, u64);

fn chol_cache() -> &'static RwLock<HashMap<GramKey, Arc<Cholesky<f64, Dyn>>>> {
    static CACHE: OnceLock<RwLock<HashMap<GramKey, Arc<Cholesky<f64, Dyn>>>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

fn projection_factor(dim: usize, degree: usize, hx: f64, hy: f64) -> Result<Arc<Cholesky<f64, Dyn>>, Error> {
    let key = (dim, degree, hx.to_bits(), hy.to_bits());
    if let Some(c) = chol_cache().read().unwrap().get(&key) {
        return Ok(c.clone());
    }
    let nq = degree + 3;
    let g = if dim == 1 {
        let parts = h2_gram_parts_1d(degree, nq);
        let mut g = DMatrix::zeros(degree + 1, degree + 1);
        for (a, p) in parts.iter().enumerate() {
            g += p * (hx * hx.powi(-2 * a as i32));
        }
        g
    } else {
        h2_gram_2d(degree, nq, hx, hy)
    };
    let chol = Cholesky::new(g).ok_or_else(|| {
        Error::Numerical(format!("H2 Gram of degree {degree} is not positive definite"))
    })?;
    let chol = Arc::new(chol);
    chol_cache().write().unwrap().insert(key, chol.clone());
    Ok(chol)
}

/// H² projection on an interval of half-length `h` onto polynomials of
/// `degree`. `f` is sampled in the master parameter `t ∈ [-1, 1]`; the
/// result holds nodal values on `degree + 1` GLL nodes.
pub fn h2_project_1d(f: impl Fn(f64) -> f64, degree: usize, h: f64) -> Result<Vec<f64>, Error> {
    h2_project_1d_checked(|t| Ok(f(t)), degree, h)
}

/// As [`h2_project_1d`] for a fallible sampler.
pub fn h2_project_1d_checked(
    f: impl Fn(f64) -> Result<f64, Error>,
    degree: usize,
    h: f64,
) -> Result<Vec<f64>, Error> {
    let nq = degree + 3;
    let q = gll_rule(nq);
    let rule = gll_rule(degree + 1);
    let samples = DVector::from_vec(q.nodes.iter().map(|&t| f(t)).collect::<Result<Vec<_>, _>>()?);
    let mut rhs = DVector::zeros(degree + 1);
    let mut fa = samples;
    for a in 0..=2usize {
        let e = rule.interp_matrix(&q.nodes, a);
        let wf = DVector::from_iterator(nq, (0..nq).map(|k| q.weights[k] * fa[k]));
        rhs += e.transpose() * wf * (h * h.powi(-2 * a as i32));
        fa = &q.diff * fa;
    }
    let chol = projection_factor(1, degree, h, 1.0)?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// H² projection on a rectangle with half-lengths `(hx, hy)`; `f` is sampled
/// in master coordinates.
pub fn h2_project_2d(
    f: impl Fn(f64, f64) -> f64,
    degree: usize,
    hx: f64,
    hy: f64,
) -> Result<NodalTensor, Error> {
    let nq = degree + 3;
    let q = gll_rule(nq);
    let samples = DMatrix::from_fn(nq, nq, |p, r| f(q.nodes[p], q.nodes[r]));
    h2_project_2d_samples(&samples, degree, hx, hy)
}

/// As [`h2_project_2d`], from samples on the `(degree + 3)`-point GLL grid.
pub fn h2_project_2d_samples(
    samples: &DMatrix<f64>,
    degree: usize,
    hx: f64,
    hy: f64,
) -> Result<NodalTensor, Error> {
    let nq = degree + 3;
    assert_eq!(samples.nrows(), nq);
    let q = gll_rule(nq);
    let rule = gll_rule(degree + 1);
    let n = degree + 1;
    let e: Vec<DMatrix<f64>> = (0..3).map(|a| rule.interp_matrix(&q.nodes, a)).collect();
    let dq: Vec<DMatrix<f64>> = vec![
        DMatrix::identity(nq, nq),
        q.diff.clone(),
        &q.diff * &q.diff,
    ];
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(&q.weights));
    let mut rhs = DMatrix::zeros(n, n);
    for a in 0..=2usize {
        for b in 0..=(2 - a) {
            let s = hx * hy * hx.powi(-2 * a as i32) * hy.powi(-2 * b as i32);
            let fab = &dq[a] * samples * dq[b].transpose();
            rhs += e[a].transpose() * &w * fab * &w * &e[b] * s;
        }
    }
    let flat = DVector::from_iterator(n * n, (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| rhs[(i, j)]));
    let chol = projection_factor(2, degree, hx, hy)?;
    let sol = chol.solve(&flat);
    Ok(NodalTensor::from_flat(degree, sol.as_slice()))
}

/// Evaluates a 1-D nodal polynomial (values on GLL nodes) at `pts`.
pub fn eval_1d(values: &[f64], pts: &[f64], order: usize) -> Vec<f64> {
    let rule = gll_rule(values.len());
    let l = rule.interp_matrix(pts, order);
    let v = DVector::from_column_slice(values);
    (l * v).iter().copied().collect()
}
