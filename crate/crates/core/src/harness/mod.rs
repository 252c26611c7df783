//! Builtin problems, error measurement, post-processing, convergence sweeps
//! and output files.

pub mod builtins;
pub mod correction;
pub mod error;
pub mod output;

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assembly::{build_functional, operator_map, NormalSystem};
use crate::geometry::{build_geometric_mesh, ElemRef, GeometricMesh};
use crate::operator::ElementOperator;
use crate::probdef::EllipticProblem;
use crate::solver::{build_preconditioner, estimate_condition, solve, Preconditioner, SpectralSolution};
use crate::Error;

pub use error::{compute_error, ErrorReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseIters {
    pub htilde: usize,
    pub schur: usize,
    pub back: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRecord {
    pub w: usize,
    pub m: usize,
    pub dof_count: usize,
    pub err_broken: f64,
    pub err_l2_broken: f64,
    pub functional_value: f64,
    pub pcgm_iters: PhaseIters,
    pub kappa: Option<f64>,
    pub wall_seconds: f64,
}

/// Everything produced by one build-and-solve.
pub struct Run {
    pub problem: EllipticProblem,
    pub mesh: GeometricMesh,
    pub system: NormalSystem,
    pub ops: HashMap<ElemRef, ElementOperator>,
    pub prec: Preconditioner,
    pub solution: SpectralSolution,
    pub functional: f64,
    pub error: Option<ErrorReport>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub kappa: bool,
}

pub fn run(problem: &EllipticProblem, opts: RunOptions) -> Result<Run, Error> {
    let t0 = Instant::now();
    let mesh = build_geometric_mesh(problem)?;
    let system = build_functional(problem, &mesh)?;
    let ops = operator_map(problem, &mesh)?;
    let prec = build_preconditioner(&system, &mesh)?;
    let mut solution = solve(&system, &prec, problem.solver.tol, problem.solver.maxit, None)?;
    if opts.kappa {
        solution.diagnostics.kappa = Some(estimate_condition(&system, &prec)?);
    }
    let functional = system.evaluate_functional(&solution.z)?;
    let error = match &problem.exact {
        Some(u) => Some(compute_error(&mesh, &system.layout, &solution.z, u)?),
        None => None,
    };
    Ok(Run {
        problem: problem.clone(),
        mesh,
        system,
        ops,
        prec,
        solution,
        functional,
        error,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

impl Run {
    pub fn record(&self) -> ConvergenceRecord {
        let d = &self.solution.diagnostics;
        let e = self.error.unwrap_or(ErrorReport {
            err_broken: f64::NAN,
            err_l2_broken: f64::NAN,
            vertex_sq: f64::NAN,
            sector_sq: f64::NAN,
            interior_sq: f64::NAN,
        });
        ConvergenceRecord {
            w: self.mesh.w,
            m: self.mesh.m,
            dof_count: self.system.n(),
            err_broken: e.err_broken,
            err_l2_broken: e.err_l2_broken,
            functional_value: self.functional,
            pcgm_iters: PhaseIters {
                htilde: d.htilde.iters,
                schur: d.schur_columns.iter().map(|s| s.iters).sum(),
                back: d.back.iters,
            },
            kappa: d.kappa,
            wall_seconds: self.seconds,
        }
    }
}

/// Outcome of [`stationarity_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationarityReport {
    pub base: f64,
    pub eps: f64,
    /// Largest `functional(Z) − functional(Z + εδ)` over the trials.
    pub worst_drop: f64,
    pub trials: usize,
    pub passed: bool,
}

/// Largest admissible decrease of the functional under a perturbation.
pub const STATIONARITY_SLACK: f64 = 1e-8;

/// Evaluates the functional term by term at `Z + εδ` for `trials` random
/// unit directions `δ`, with `ε = 1e-4 ‖Z‖`. The check passes when no trial
/// lowers the functional by more than [`STATIONARITY_SLACK`].
pub fn stationarity_check(run: &Run, trials: usize, seed: u64) -> Result<StationarityReport, Error> {
    let z = &run.solution.z;
    let base = run.system.evaluate_functional_direct(&run.ops, z)?;
    let eps = 1e-4 * z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_drop = f64::NEG_INFINITY;
    for _ in 0..trials {
        let mut d: Vec<f64> = (0..z.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= n);
        let zp: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + eps * b).collect();
        let f = run.system.evaluate_functional_direct(&run.ops, &zp)?;
        worst_drop = worst_drop.max(base - f);
    }
    Ok(StationarityReport { base, eps, worst_drop, trials, passed: worst_drop <= STATIONARITY_SLACK })
}

/// Least-squares line `ln(err) ≈ a + slope · W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_log_error(ws: &[f64], errs: &[f64]) -> Option<LogFit> {
    let pts: Vec<(f64, f64)> = ws
        .iter()
        .zip(errs)
        .filter(|(_, e)| e.is_finite() && **e > 0.0)
        .map(|(w, e)| (*w, e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LogFit { slope, intercept: my - slope * mx, r2 })
}

/// Outcome of one sweep entry; a failed run keeps its message.
#[derive(Debug, Clone, Serialize)]
pub enum SweepEntry {
    Ok(ConvergenceRecord),
    Failed { w: usize, msg: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct Sweep {
    pub entries: Vec<SweepEntry>,
    pub fit: Option<LogFit>,
}

impl Sweep {
    pub fn records(&self) -> Vec<ConvergenceRecord> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                SweepEntry::Ok(r) => Some(r.clone()),
                SweepEntry::Failed { .. } => None,
            })
            .collect()
    }
}

/// Solves with `M = W` for each entry of `ws` and fits `ln(err_broken)`.
pub fn run_convergence(problem: &EllipticProblem, ws: &[usize], kappa: bool) -> Sweep {
    let mut entries = Vec::with_capacity(ws.len());
    for &w in ws {
        let p = problem.with_degrees(Some(w), Some(w));
        match run(&p, RunOptions { kappa }) {
            Ok(r) => entries.push(SweepEntry::Ok(r.record())),
            Err(e) => entries.push(SweepEntry::Failed { w, msg: e.to_string() }),
        }
    }
    let recs: Vec<&ConvergenceRecord> = entries
        .iter()
        .filter_map(|e| match e {
            SweepEntry::Ok(r) => Some(r),
            _ => None,
        })
        .collect();
    let fit = fit_log_error(
        &recs.iter().map(|r| r.w as f64).collect::<Vec<_>>(),
        &recs.iter().map(|r| r.err_broken).collect::<Vec<_>>(),
    );
    Sweep { entries, fit }
}
