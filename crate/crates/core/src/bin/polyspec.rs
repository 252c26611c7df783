use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use polyspec::geometry::build_geometric_mesh;
use polyspec::harness::output::{self, SolutionFile};
use polyspec::harness::{run, run_convergence, RunOptions, SweepEntry};
use polyspec::probdef::{load_problem, validate_ellipticity};
use polyspec::solver::configure_threads;

#[derive(Parser)]
#[command(name = "polyspec", version, about = "Least-squares spectral element solver for elliptic problems on polygons")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one problem.
    Solve {
        /// Problem file, or `builtin:NAME`.
        #[arg(long)]
        problem: String,
        #[arg(long = "W")]
        w: Option<usize>,
        #[arg(long = "M")]
        m: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        maxit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Also estimate the preconditioned condition number.
        #[arg(long)]
        kappa: bool,
    },
    /// Sweep W with M = W and write convergence.csv.
    Convergence {
        #[arg(long)]
        problem: String,
        #[arg(long = "W-list", value_delimiter = ',', default_value = "2,3,4,5,6")]
        w_list: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kappa: bool,
    },
    /// Build the mesh and write mesh.json.
    Mesh {
        #[arg(long)]
        problem: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a problem file.
    Check {
        #[arg(long)]
        problem: String,
    },
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    match exec(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn exec(cmd: Cmd) -> polyspec::Result<ExitCode> {
    match cmd {
        Cmd::Solve { problem, w, m, tol, maxit, out, format, kappa } => {
            let mut prob = load_problem(&problem)?;
            if w.is_some() || m.is_some() {
                prob = prob.with_degrees(w.or(m), m.or(w));
            }
            if let Some(t) = tol {
                prob.solver.tol = t;
            }
            if let Some(k) = maxit {
                prob.solver.maxit = k;
            }
            let r = run(&prob, RunOptions { kappa })?;
            let rec = r.record();
            let sol = SolutionFile::new(&prob.name, &prob.hash, &r.mesh, &r.system.layout, &r.solution.z);
            output::write_solution(&out, &sol)?;
            output::write_text(&out, "diagnostics.json", &serde_json::to_string_pretty(&r.solution.diagnostics)?)?;
            match format {
                Format::Csv => {
                    output::write_convergence(&out, std::slice::from_ref(&rec))?;
                }
                Format::Json => {
                    output::write_text(&out, "record.json", &serde_json::to_string_pretty(&rec)?)?;
                }
            }
            println!(
                "{}: W={} M={} dofs={} functional={:e} err_broken={:e} residual={:e}",
                prob.name, rec.w, rec.m, rec.dof_count, rec.functional_value, rec.err_broken, r.solution.diagnostics.residual
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Convergence { problem, w_list, out, kappa } => {
            let prob = load_problem(&problem)?;
            let sweep = run_convergence(&prob, &w_list, kappa);
            output::write_convergence(&out, &sweep.records())?;
            output::write_text(&out, "sweep.json", &serde_json::to_string_pretty(&sweep)?)?;
            for e in &sweep.entries {
                match e {
                    SweepEntry::Ok(r) => println!("W={} err_broken={:e} seconds={:.2}", r.w, r.err_broken, r.wall_seconds),
                    SweepEntry::Failed { w, msg } => println!("W={w} failed: {msg}"),
                }
            }
            if let Some(f) = sweep.fit {
                println!("ln(err) slope={:.4} R2={:.4}", f.slope, f.r2);
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Mesh { problem, out } => {
            let prob = load_problem(&problem)?;
            let mesh = build_geometric_mesh(&prob)?;
            let path = output::write_mesh(&out, &mesh)?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Check { problem } => {
            let checked = load_problem(&problem).and_then(|p| {
                validate_ellipticity(&p, 20)?;
                build_geometric_mesh(&p)?;
                Ok(p)
            });
            match checked {
                Ok(p) => {
                    println!("ok: {} ({} vertices)", p.name, p.p());
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    println!("invalid: {e}");
                    Ok(ExitCode::FAILURE)
                }
            }
        }
    }
}
