use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use polyspec::assembly::{build_functional, NormalSystem};
use polyspec::geometry::build_geometric_mesh;
use polyspec::harness::builtins::builtin_problem;
use polyspec::solver::{build_preconditioner, build_schur, estimate_condition, pcgm, solve, solve_inner, Preconditioner};
use polyspec::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(name: &str, w: usize, m: usize) -> (NormalSystem, Preconditioner) {
    let prob = builtin_problem(name).unwrap().with_degrees(Some(m), Some(w));
    let mesh = build_geometric_mesh(&prob).unwrap();
    let sys = build_functional(&prob, &mesh).unwrap();
    let prec = build_preconditioner(&sys, &mesh).unwrap();
    (sys, prec)
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dense_op(m: &DMatrix<f64>) -> impl Fn(&[f64]) -> Result<Vec<f64>, Error> + '_ {
    move |x| Ok((m * DVector::from_column_slice(x)).as_slice().to_vec())
}

fn amax(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[test]
fn pcgm_solves_small_spd_system() {
    let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
    let (x, st) = pcgm(dense_op(&a), |r| r.to_vec(), &[1.0, 2.0], None, 1e-14, 10).unwrap();
    assert!(st.converged && st.iters <= 2);
    assert!((x[0] - 1.0 / 11.0).abs() < 1e-14 && (x[1] - 7.0 / 11.0).abs() < 1e-14);
    // Jacobi preconditioning, and a warm start at the solution.
    let (y, _) = pcgm(dense_op(&a), |r| vec![r[0] / 4.0, r[1] / 3.0], &[1.0, 2.0], None, 1e-14, 10).unwrap();
    assert!((y[0] - x[0]).abs() < 1e-14);
    let (_, st) = pcgm(dense_op(&a), |r| r.to_vec(), &[1.0, 2.0], Some(&x), 1e-12, 10).unwrap();
    assert_eq!(st.iters, 0);
}

#[test]
fn pcgm_edge_cases() {
    let a = DMatrix::<f64>::identity(3, 3);
    let (x, st) = pcgm(dense_op(&a), |r| r.to_vec(), &[0.0; 3], None, 1e-12, 5).unwrap();
    assert_eq!((x, st.iters, st.converged), (vec![0.0; 3], 0, true));

    let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    assert!(pcgm(dense_op(&indef), |r| r.to_vec(), &[0.0, 1.0], None, 1e-12, 5).is_err());

    let d = DMatrix::from_diagonal(&DVector::from_iterator(20, (1..=20).map(|i| (i * i) as f64)));
    let (_, st) = pcgm(dense_op(&d), |r| r.to_vec(), &[1.0; 20], None, 1e-14, 3).unwrap();
    assert!(!st.converged && st.iters == 3 && st.relres > 1e-14);
}

#[test]
fn preconditioner_factors_round_trip() {
    let (sys, prec) = tiny("lshape_singular", 3, 3);
    assert_eq!(prec.n(), sys.n());
    assert!(prec.distinct < prec.blocks.len());
    let x = random_vec(sys.n(), 1);
    let back = prec.solve(&prec.apply(&x));
    assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-8 * (1.0 + a.abs())));
    let split = prec.solve_upper(&prec.solve_lower(&x));
    let whole = prec.solve(&x);
    assert!(split.iter().zip(&whole).all(|(a, b)| (a - b).abs() <= 1e-9 * amax(&whole)));
    assert!(prec.energy(&x) > 0.0);
    let n = sys.layout.n_interior;
    assert_eq!(&prec.apply(&x)[n..], &x[n..]);
}

fn dense_blocks(sys: &NormalSystem) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let a = sys.dense_matrix();
    let ni = sys.layout.n_interior;
    let p = sys.layout.p;
    (a.view((0, 0), (ni, ni)).into(), a.view((0, ni), (ni, p)).into(), a.view((ni, ni), (p, p)).into())
}

#[test]
fn inner_solve_matches_dense() {
    let (sys, prec) = tiny("square_smooth", 2, 2);
    let (aii, _, _) = dense_blocks(&sys);
    let v = random_vec(sys.layout.n_interior, 7);
    let (x, st) = solve_inner(&sys, &prec, &v, None, 1e-13, 2000).unwrap();
    assert!(st.converged);
    let want = aii.lu().solve(&DVector::from_vec(v)).unwrap();
    let err = x.iter().zip(want.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err < 1e-8 * want.amax(), "{err}");
    assert!(matches!(solve_inner(&sys, &prec, &[1.0], None, 1e-10, 10), Err(Error::Dimension { .. })));
}

#[test]
fn schur_matches_dense_complement() {
    let (sys, prec) = tiny("square_smooth", 2, 2);
    let (aii, aib, abb) = dense_blocks(&sys);
    let dense = &abb - aib.transpose() * aii.lu().solve(&aib).unwrap();
    let s = build_schur(&sys, &prec, 1e-13, 2000).unwrap();
    let rel = (&s.s - &dense).amax() / dense.amax();
    assert!(rel < 1e-6, "{rel}");
    assert!(s.asymmetry < 1e-6);
    assert!(SymmetricEigen::new(s.s.clone()).eigenvalues.min() > 0.0);
    let inv = dense.clone().try_inverse().unwrap();
    let want = SymmetricEigen::new(inv).eigenvalues.max();
    assert!((s.inverse_norm() - want).abs() < 1e-6 * want);
}

#[test]
fn full_solve_matches_dense_and_reports_residual() {
    for name in ["square_smooth", "lshape_singular"] {
        let (sys, prec) = tiny(name, 2, 2);
        let a = sys.dense_matrix();
        let want = Cholesky::new(a).unwrap().solve(&DVector::from_column_slice(sys.rhs()));
        let sol = solve(&sys, &prec, 1e-12, 4000, None).unwrap();
        let err = sol.z.iter().zip(want.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-6, "{name}: {err}");
        assert!(sol.diagnostics.residual <= 1e-12, "{}", sol.diagnostics.residual);
        assert_eq!(sol.z_vertex().len(), sys.layout.p);
        assert_eq!(sol.z_interior().len(), sys.layout.n_interior);

        // Seeding with the answer keeps it.
        let again = solve(&sys, &prec, 1e-12, 4000, Some(&sol.z)).unwrap();
        assert!(again.diagnostics.htilde.iters <= sol.diagnostics.htilde.iters);
        assert!(again.z.iter().zip(&sol.z).all(|(a, b)| (a - b).abs() < 1e-8));
    }
}

#[test]
fn zero_data_solves_to_zero() {
    let text = r#"{"vertices": [[0,0],[1,0],[1,1],[0,1]],
        "edges": [{"bc":"dirichlet","g":"0"},{"bc":"neumann","g":"0"},{"bc":"dirichlet","g":"0"},{"bc":"dirichlet","g":"0"}],
        "f": "0", "mesh": {"M": 2, "rho": 0.25, "max_angle": 0.7853981633974483}, "solver": {"W": 2}}"#;
    let prob = polyspec::probdef::parse_problem(text, "zero").unwrap();
    let mesh = build_geometric_mesh(&prob).unwrap();
    let sys = build_functional(&prob, &mesh).unwrap();
    let prec = build_preconditioner(&sys, &mesh).unwrap();
    let sol = solve(&sys, &prec, 1e-10, 100, None).unwrap();
    assert!(sol.z.iter().all(|v| *v == 0.0));
}

#[test]
fn lanczos_condition_matches_dense_pencil() {
    let (sys, prec) = tiny("square_smooth", 2, 2);
    let (aii, _, _) = dense_blocks(&sys);
    let ni = sys.layout.n_interior;
    let mut p = DMatrix::zeros(ni, ni);
    for b in &prec.blocks {
        p.view_mut((b.offset, b.offset), (b.size, b.size)).copy_from(&*b.gram);
    }
    let l = Cholesky::new(p).unwrap().l();
    let li = l.clone().try_inverse().unwrap();
    let pencil = &li * aii * li.transpose();
    let ev = SymmetricEigen::new(pencil).eigenvalues;
    let want = ev.max() / ev.min();
    let got = estimate_condition(&sys, &prec).unwrap();
    // Ritz values interlace, so the estimate is a lower bound. With
    // κ ≈ 4.6e3 and 216 unknowns, 60 steps resolve λ_max but not λ_min.
    assert!(got >= 1.0 && got <= want * (1.0 + 1e-9), "{got} vs {want}");
    assert!(got > 0.3 * want, "{got} vs {want}");
}
