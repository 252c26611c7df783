//! File outputs: `convergence.csv`, `solution.json` and `mesh.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assembly::DofLayout;
use crate::geometry::{dump_mesh, ElemRef, GeometricMesh};
use crate::harness::ConvergenceRecord;
use crate::Error;

pub const CSV_HEADER: &str = "W,M,dofs,err_broken,err_l2,functional,iters_htilde,iters_back,kappa,seconds";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

/// Shortest decimal that parses back to the same double.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

pub fn csv_row(r: &ConvergenceRecord) -> String {
    let kappa = r.kappa.map(fmt_f64).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.w,
        r.m,
        r.dof_count,
        fmt_f64(r.err_broken),
        fmt_f64(r.err_l2_broken),
        fmt_f64(r.functional_value),
        r.pcgm_iters.htilde,
        r.pcgm_iters.back,
        kappa,
        fmt_f64(r.wall_seconds)
    )
}

pub fn convergence_csv(records: &[ConvergenceRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&csv_row(r));
        s.push('\n');
    }
    s
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, Error> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}

pub fn write_convergence(dir: &Path, records: &[ConvergenceRecord]) -> Result<PathBuf, Error> {
    write_text(dir, "convergence.csv", &convergence_csv(records))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlockMeta {
    pub elem: ElemRef,
    pub offset: usize,
    pub degree: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolutionFile {
    pub problem: String,
    pub problem_hash: String,
    pub w: usize,
    pub m: usize,
    pub n_interior: usize,
    pub p: usize,
    pub blocks: Vec<BlockMeta>,
    /// Element values in block order, then the vertex constants `h_k`.
    pub dofs: Vec<f64>,
}

impl SolutionFile {
    pub fn new(problem: &str, hash: &str, mesh: &GeometricMesh, layout: &DofLayout, z: &[f64]) -> Self {
        SolutionFile {
            problem: problem.to_string(),
            problem_hash: hash.to_string(),
            w: mesh.w,
            m: mesh.m,
            n_interior: layout.n_interior,
            p: layout.p,
            blocks: layout
                .blocks
                .iter()
                .map(|b| BlockMeta { elem: b.elem, offset: b.offset, degree: b.degree })
                .collect(),
            dofs: z.to_vec(),
        }
    }
}

pub fn write_solution(dir: &Path, sol: &SolutionFile) -> Result<PathBuf, Error> {
    write_text(dir, "solution.json", &serde_json::to_string_pretty(sol)?)
}

pub fn read_solution(path: &Path) -> Result<SolutionFile, Error> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_mesh(dir: &Path, mesh: &GeometricMesh) -> Result<PathBuf, Error> {
    write_text(dir, "mesh.json", &serde_json::to_string_pretty(&dump_mesh(mesh))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_values_use_fixed_spellings() {
        assert_eq!(fmt_f64(f64::NAN), "nan");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn finite_values_round_trip() {
        for v in [0.1, -3.0, 1e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn io_errors_carry_the_path() {
        let file = tempfile::NamedTempFile::new().unwrap();
        let dir = file.path().join("sub");
        let e = write_text(&dir, "a.txt", "x").unwrap_err();
        assert!(matches!(e, Error::Io { ref path, .. } if path.starts_with(&*file.path().to_string_lossy())), "{e}");
    }
}
