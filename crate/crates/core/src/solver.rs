//! Block-diagonal preconditioner, PCGM, the explicit `p × p` Schur
//! complement of the vertex unknowns and the three-phase solve.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::assembly::NormalSystem;
use crate::basis::h2_gram_2d;
use crate::geometry::{ElemRef, GeometricMesh};
use crate::Error;

/// Applies `POLYSPEC_THREADS` to the global rayon pool. Later calls, or a
/// pool that already exists, leave the pool unchanged.
pub fn configure_threads() {
    if let Some(n) = std::env::var("POLYSPEC_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

#[derive(Debug, Clone)]
pub struct PrecBlock {
    pub offset: usize,
    pub size: usize,
    pub weight: f64,
    pub gram: Arc<DMatrix<f64>>,
    pub chol: Arc<Cholesky<f64, Dyn>>,
}

/// Weighted element `H²` Grams, one factorized block per element.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    pub blocks: Vec<PrecBlock>,
    pub n_interior: usize,
    pub p: usize,
    /// Number of distinct factorizations.
    pub distinct: usize,
}

type BlockKey = (usize, u64, u64, u64);

pub fn build_preconditioner(sys: &NormalSystem, mesh: &GeometricMesh) -> Result<Preconditioner, Error> {
    let mut cache: HashMap<BlockKey, (Arc<DMatrix<f64>>, Arc<Cholesky<f64, Dyn>>)> = HashMap::new();
    let mut blocks = Vec::with_capacity(sys.layout.blocks.len());
    for b in &sys.layout.blocks {
        let (hx, hy, weight) = match b.elem {
            ElemRef::Sector(s) => {
                let el = &mesh.sectors[s];
                (el.half_nu(), el.half_phi(), mesh.vertices[el.k].layer_weight(el.j))
            }
            ElemRef::Interior(_) => (1.0, 1.0, 1.0),
        };
        let key = (b.degree, hx.to_bits(), hy.to_bits(), weight.to_bits());
        let entry = match cache.get(&key) {
            Some(e) => e.clone(),
            None => {
                let g = h2_gram_2d(b.degree, b.degree + 3, hx, hy) * weight;
                let chol = Cholesky::new(g.clone()).ok_or_else(|| Error::Solver {
                    phase: "preconditioner".into(),
                    msg: format!("element Gram of {:?} is not positive definite", b.elem),
                })?;
                let e = (Arc::new(g), Arc::new(chol));
                cache.insert(key, e.clone());
                e
            }
        };
        blocks.push(PrecBlock { offset: b.offset, size: b.size(), weight, gram: entry.0, chol: entry.1 });
    }
    Ok(Preconditioner {
        blocks,
        n_interior: sys.layout.n_interior,
        p: sys.layout.p,
        distinct: cache.len(),
    })
}

impl Preconditioner {
    pub fn n(&self) -> usize {
        self.n_interior + self.p
    }

    fn map_blocks(&self, x: &[f64], f: impl Fn(&PrecBlock, DVector<f64>) -> DVector<f64> + Sync) -> Vec<f64> {
        let parts: Vec<DVector<f64>> = self
            .blocks
            .par_iter()
            .map(|b| f(b, DVector::from_column_slice(&x[b.offset..b.offset + b.size])))
            .collect();
        let mut out = x.to_vec();
        for (b, y) in self.blocks.iter().zip(parts) {
            out[b.offset..b.offset + b.size].copy_from_slice(y.as_slice());
        }
        out
    }

    /// `P x`; the vertex slots pass through.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.map_blocks(x, |b, v| &*b.gram * v)
    }

    /// `P⁻¹ x`; the vertex slots pass through.
    pub fn solve(&self, x: &[f64]) -> Vec<f64> {
        self.map_blocks(x, |b, v| b.chol.solve(&v))
    }

    /// `L⁻¹ x` with `P = L Lᵀ` on the element blocks.
    pub fn solve_lower(&self, x: &[f64]) -> Vec<f64> {
        self.map_blocks(x, |b, v| b.chol.l_dirty().solve_lower_triangular(&v).expect("nonsingular factor"))
    }

    /// `L⁻ᵀ x`.
    pub fn solve_upper(&self, x: &[f64]) -> Vec<f64> {
        self.map_blocks(x, |b, v| {
            b.chol.l_dirty().tr_solve_lower_triangular(&v).expect("nonsingular factor")
        })
    }

    /// Quadratic form `xᵀ P x` over the element blocks.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let px = self.apply(x);
        px[..self.n_interior].iter().zip(&x[..self.n_interior]).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PcgStats {
    pub iters: usize,
    pub relres: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Preconditioned conjugate gradients with stopping rule
/// `‖b − Ax‖ / ‖b‖ ≤ tol` on the recursive residual.
pub fn pcgm(
    apply_op: impl Fn(&[f64]) -> Result<Vec<f64>, Error>,
    apply_prec_inv: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    maxit: usize,
) -> Result<(Vec<f64>, PcgStats), Error> {
    let n = b.len();
    if let Some(g) = x0.filter(|g| g.len() != n) {
        return Err(Error::Dimension { expected: n, got: g.len() });
    }
    let apply_op = |v: &[f64]| -> Result<Vec<f64>, Error> {
        let out = apply_op(v)?;
        if out.len() != n {
            return Err(Error::Dimension { expected: n, got: out.len() });
        }
        Ok(out)
    };
    let bn = norm(b);
    if bn == 0.0 {
        return Ok((vec![0.0; n], PcgStats { iters: 0, relres: 0.0, converged: true }));
    }
    let mut x = match x0 {
        Some(g) => g.to_vec(),
        None => vec![0.0; n],
    };
    let mut r: Vec<f64> = if x0.is_some() {
        let ax = apply_op(&x)?;
        b.iter().zip(&ax).map(|(a, c)| a - c).collect()
    } else {
        b.to_vec()
    };
    let mut rel = norm(&r) / bn;
    let (mut best_x, mut best_rel) = (x.clone(), rel);
    if rel <= tol {
        return Ok((x, PcgStats { iters: 0, relres: rel, converged: true }));
    }
    let mut z = apply_prec_inv(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=maxit {
        let ap = apply_op(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Solver {
                phase: "pcgm".into(),
                msg: format!("breakdown at iteration {it}: pᵀAp = {pap:e}"),
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = norm(&r) / bn;
        if rel < best_rel {
            best_rel = rel;
            best_x.copy_from_slice(&x);
        }
        if rel <= tol {
            return Ok((x, PcgStats { iters: it, relres: rel, converged: true }));
        }
        z = apply_prec_inv(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok((best_x, PcgStats { iters: maxit, relres: best_rel, converged: false }))
}

/// `A_II v` for an element-only vector.
pub fn apply_aii(sys: &NormalSystem, v: &[f64]) -> Result<Vec<f64>, Error> {
    let ni = sys.layout.n_interior;
    if v.len() != ni {
        return Err(Error::Dimension { expected: ni, got: v.len() });
    }
    let mut full = v.to_vec();
    full.resize(sys.n(), 0.0);
    let mut y = sys.apply_a(&full)?;
    y.truncate(ni);
    Ok(y)
}

/// `A_II⁻¹ v_I` by PCGM restricted to the element unknowns.
pub fn solve_inner(
    sys: &NormalSystem,
    prec: &Preconditioner,
    v: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    maxit: usize,
) -> Result<(Vec<f64>, PcgStats), Error> {
    let ni = sys.layout.n_interior;
    if v.len() != ni {
        return Err(Error::Dimension { expected: ni, got: v.len() });
    }
    pcgm(
        |x| apply_aii(sys, x),
        |r| {
            let mut full = r.to_vec();
            full.resize(prec.n(), 0.0);
            let mut z = prec.solve(&full);
            z.truncate(ni);
            z
        },
        v,
        x0,
        tol,
        maxit,
    )
}

#[derive(Debug, Clone)]
pub struct SchurMatrix {
    /// Symmetrized `(𝕊ᵃ + 𝕊ᵃᵀ) / 2`.
    pub s: DMatrix<f64>,
    /// Largest `|𝕊ᵃ − 𝕊ᵃᵀ|` entry relative to the largest `|𝕊ᵃ|` entry,
    /// before symmetrization.
    pub asymmetry: f64,
    pub column_stats: Vec<PcgStats>,
    /// `A_II⁻¹ A_IB e_k` for each vertex `k`.
    pub columns: Vec<Vec<f64>>,
}

impl SchurMatrix {
    /// `‖(𝕊ᵃ)⁻¹‖₂`.
    pub fn inverse_norm(&self) -> f64 {
        let e = SymmetricEigen::new(self.s.clone());
        1.0 / e.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Columns `𝕊ᵃ e_k = A_BB e_k − A_IBᵀ A_II⁻¹ A_IB e_k`, one inner solve each.
pub fn build_schur(sys: &NormalSystem, prec: &Preconditioner, tol: f64, maxit: usize) -> Result<SchurMatrix, Error> {
    let p = sys.layout.p;
    let ni = sys.layout.n_interior;
    if p < 3 {
        return Err(Error::Solver { phase: "schur".into(), msg: format!("needs at least 3 vertices, got {p}") });
    }
    let cols: Vec<(Vec<f64>, Vec<f64>, PcgStats)> = (0..p)
        .into_par_iter()
        .map(|k| {
            let mut e = vec![0.0; sys.n()];
            e[sys.layout.vertex_slot(k)] = 1.0;
            let ae = sys.apply_a(&e)?;
            let (x, st) = solve_inner(sys, prec, &ae[..ni], None, tol, maxit).map_err(|err| Error::Solver {
                phase: "schur".into(),
                msg: format!("column {k}: {err}"),
            })?;
            let mut full = x.clone();
            full.resize(sys.n(), 0.0);
            let ax = sys.apply_a(&full)?;
            let col: Vec<f64> = (0..p).map(|b| ae[ni + b] - ax[ni + b]).collect();
            Ok((col, x, st))
        })
        .collect::<Result<_, Error>>()?;
    let mut s = DMatrix::zeros(p, p);
    for (k, (c, _, _)) in cols.iter().enumerate() {
        for b in 0..p {
            s[(b, k)] = c[b];
        }
    }
    let scale = s.amax();
    let asymmetry = if scale > 0.0 { (&s - s.transpose()).amax() / scale } else { 0.0 };
    let s = 0.5 * (&s + s.transpose());
    let mut columns = Vec::with_capacity(p);
    let mut column_stats = Vec::with_capacity(p);
    for (_, x, st) in cols {
        columns.push(x);
        column_stats.push(st);
    }
    Ok(SchurMatrix { s, asymmetry, column_stats, columns })
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveDiagnostics {
    pub htilde: PcgStats,
    pub schur_columns: Vec<PcgStats>,
    pub schur_asymmetry: f64,
    pub back: PcgStats,
    /// `‖AZ − h‖ / ‖h‖`.
    pub residual: f64,
    pub refinements: usize,
    pub kappa: Option<f64>,
    pub schur_inverse_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SpectralSolution {
    pub z: Vec<f64>,
    pub schur: SchurMatrix,
    pub diagnostics: SolveDiagnostics,
}

impl SpectralSolution {
    pub fn z_interior(&self) -> &[f64] {
        &self.z[..self.z.len() - self.schur.s.nrows()]
    }

    pub fn z_vertex(&self) -> &[f64] {
        &self.z[self.z.len() - self.schur.s.nrows()..]
    }
}

fn phase_err(phase: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Solver { msg, .. } => Error::Solver { phase: phase.into(), msg },
        other => Error::Solver { phase: phase.into(), msg: other.to_string() },
    }
}

/// Phases 1 to 3 for right-hand side `h` with a fixed Schur matrix.
fn three_phase(
    sys: &NormalSystem,
    prec: &Preconditioner,
    schur: &SchurMatrix,
    h: &[f64],
    guess: Option<&[f64]>,
    tol: f64,
    maxit: usize,
) -> Result<(Vec<f64>, PcgStats, PcgStats), Error> {
    let ni = sys.layout.n_interior;
    let p = sys.layout.p;
    let y0: Option<Vec<f64>> = guess.map(|g| {
        let mut y = g[..ni].to_vec();
        for k in 0..p {
            let zb = g[ni + k];
            for (yi, ci) in y.iter_mut().zip(&schur.columns[k]) {
                *yi += zb * ci;
            }
        }
        y
    });
    let (y, htilde) = solve_inner(sys, prec, &h[..ni], y0.as_deref(), tol, maxit).map_err(phase_err("htilde"))?;
    let mut yfull = y;
    yfull.resize(sys.n(), 0.0);
    let ay = sys.apply_a(&yfull).map_err(phase_err("htilde"))?;
    let ht = DVector::from_iterator(p, (0..p).map(|b| h[ni + b] - ay[ni + b]));

    let zb = Cholesky::new(schur.s.clone())
        .map(|c| c.solve(&ht))
        .or_else(|| schur.s.clone().lu().solve(&ht))
        .ok_or_else(|| Error::Solver { phase: "schur".into(), msg: "Schur matrix is singular".into() })?;

    let mut zbfull = vec![0.0; sys.n()];
    for k in 0..p {
        zbfull[ni + k] = zb[k];
    }
    let azb = sys.apply_a(&zbfull).map_err(phase_err("back"))?;
    let rhs_i: Vec<f64> = (0..ni).map(|i| h[i] - azb[i]).collect();
    let (zi, back) = solve_inner(sys, prec, &rhs_i, guess.map(|g| &g[..ni]), tol, maxit).map_err(phase_err("back"))?;
    Ok((sys.layout.merge(&zi, zb.as_slice()), htilde, back))
}

/// Defect-correction passes allowed after the first three-phase solve.
pub const MAX_REFINEMENTS: usize = 3;

fn add_stats(a: PcgStats, b: PcgStats) -> PcgStats {
    PcgStats { iters: a.iters + b.iters, relres: b.relres, converged: a.converged && b.converged }
}

/// Three-phase solve: `h̃_B = h_B − A_IBᵀ A_II⁻¹ h_I`, dense `𝕊ᵃ Z_B = h̃_B`,
/// then `A_II Z_I = h_I − A_IB Z_B`. While `‖AZ − h‖ / ‖h‖` exceeds `tol`
/// the phases are repeated on the defect. A previous solution as `guess`
/// seeds both inner solves.
pub fn solve(
    sys: &NormalSystem,
    prec: &Preconditioner,
    tol: f64,
    maxit: usize,
    guess: Option<&[f64]>,
) -> Result<SpectralSolution, Error> {
    let t0 = Instant::now();
    let h = sys.rhs();
    let schur = build_schur(sys, prec, tol * 1e-2, maxit)?;
    let (mut z, mut htilde, mut back) = three_phase(sys, prec, &schur, h, guess, tol, maxit)?;
    let hn = norm(h);
    let defect = |z: &[f64]| -> Result<(Vec<f64>, f64), Error> {
        let az = sys.apply_a(z)?;
        let r: Vec<f64> = h.iter().zip(&az).map(|(a, b)| a - b).collect();
        let rel = if hn > 0.0 { norm(&r) / hn } else { norm(&r) };
        Ok((r, rel))
    };
    let (mut r, mut residual) = defect(&z)?;
    let mut refinements = 0;
    while residual > tol && refinements < MAX_REFINEMENTS {
        let (dz, s1, s3) = three_phase(sys, prec, &schur, &r, None, tol, maxit)?;
        let trial: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();
        let (r_new, res_new) = defect(&trial)?;
        refinements += 1;
        htilde = add_stats(htilde, s1);
        back = add_stats(back, s3);
        if res_new >= residual {
            break;
        }
        z = trial;
        r = r_new;
        residual = res_new;
    }
    let diagnostics = SolveDiagnostics {
        htilde,
        schur_columns: schur.column_stats.clone(),
        schur_asymmetry: schur.asymmetry,
        back,
        residual,
        refinements,
        kappa: None,
        schur_inverse_norm: schur.inverse_norm(),
        seconds: t0.elapsed().as_secs_f64(),
    };
    Ok(SpectralSolution { z, schur, diagnostics })
}

/// Number of Lanczos steps used by [`estimate_condition`].
pub const LANCZOS_STEPS: usize = 60;

/// `λ_max / λ_min` of `P⁻¹ A_II` from Lanczos on `L⁻¹ A_II L⁻ᵀ` with full
/// reorthogonalization. A breakdown continues from a fresh random vector
/// orthogonal to the basis, drawn from the next seed.
pub fn estimate_condition(sys: &NormalSystem, prec: &Preconditioner) -> Result<f64, Error> {
    let ni = sys.layout.n_interior;
    let steps = LANCZOS_STEPS.min(ni);
    let op = |v: &[f64]| -> Result<Vec<f64>, Error> {
        let mut full = v.to_vec();
        full.resize(prec.n(), 0.0);
        let mut u = prec.solve_upper(&full);
        u.truncate(ni);
        let au = apply_aii(sys, &u)?;
        let mut full = au;
        full.resize(prec.n(), 0.0);
        let mut w = prec.solve_lower(&full);
        w.truncate(ni);
        Ok(w)
    };
    let mut seed = 0u64;
    let random_unit = |basis: &[Vec<f64>], seed: u64| -> Option<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed);
        let mut v: Vec<f64> = (0..ni).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            for q in basis {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = norm(&v);
        (n > 1e-10).then(|| v.iter().map(|a| a / n).collect())
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut beta: Vec<f64> = Vec::with_capacity(steps);
    let mut q = random_unit(&basis, seed).ok_or_else(|| Error::Numerical("empty Lanczos space".into()))?;
    while basis.len() < steps {
        basis.push(q.clone());
        let mut w = op(&q)?;
        let a = dot(&w, &q);
        alpha.push(a);
        for _ in 0..2 {
            for v in &basis {
                let c = dot(&w, v);
                w.iter_mut().zip(v).for_each(|(x, y)| *x -= c * y);
            }
        }
        if basis.len() == steps {
            break;
        }
        let b = norm(&w);
        if b <= 1e-12 * a.abs().max(1.0) {
            seed += 1;
            match random_unit(&basis, seed) {
                Some(v) => {
                    beta.push(0.0);
                    q = v;
                }
                None => break,
            }
        } else {
            beta.push(b);
            q = w.iter().map(|x| x / b).collect();
        }
    }
    let m = alpha.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let ev = SymmetricEigen::new(t).eigenvalues;
    let lmax = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lmin = ev.iter().copied().fold(f64::INFINITY, f64::min);
    if !(lmin > 0.0) {
        return Err(Error::Numerical(format!("preconditioned operator is not positive definite (λ_min = {lmin:e})")));
    }
    Ok(lmax / lmin)
}
