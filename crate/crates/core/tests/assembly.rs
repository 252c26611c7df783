use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use polyspec::assembly::{build_functional, interpolate, operator_map, project_data, vertex_data, DofLayout, TermKind};
use polyspec::geometry::{build_geometric_mesh, ElemRef, GeometricMesh};
use polyspec::harness::builtins::{builtin_problem, builtin_problems};
use polyspec::probdef::{parse_problem, BcKind, EllipticProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn square(bcs: [&str; 4], g: &str, f: &str, m: usize, w: usize, mu: f64, beta: f64) -> EllipticProblem {
    let edges: Vec<String> = bcs.iter().map(|b| format!(r#"{{"bc":"{b}","g":"{g}"}}"#)).collect();
    let text = format!(
        r#"{{"vertices": [[0,0],[1,0],[1,1],[0,1]], "edges": [{}], "f": "{f}",
            "beta": [{beta},{beta},{beta},{beta}],
            "mesh": {{"M": {m}, "rho": 0.25, "mu": {mu}, "max_angle": 0.7853981633974483}}, "solver": {{"W": {w}}}}}"#,
        edges.join(",")
    );
    parse_problem(&text, "sq").unwrap()
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn layout_offsets_match_independent_walk() {
    let prob = builtin_problem("lshape_singular").unwrap().with_degrees(Some(3), Some(3));
    let mesh = build_geometric_mesh(&prob).unwrap();
    let layout = DofLayout::new(&mesh);
    let mut off = 0;
    let mut count = 0;
    for (s, el) in mesh.sectors.iter().enumerate() {
        let b = layout.block(ElemRef::Sector(s));
        if el.j == 1 {
            assert!(b.is_none());
            continue;
        }
        let b = b.unwrap();
        assert_eq!((b.offset, b.degree), (off, el.degree));
        off += (el.degree + 1).pow(2);
        count += 1;
    }
    for l in 0..mesh.interiors.len() {
        let b = layout.block(ElemRef::Interior(l)).unwrap();
        assert_eq!(b.offset, off);
        off += (mesh.interiors[l].degree + 1).pow(2);
        count += 1;
    }
    assert_eq!(count, layout.blocks.len());
    assert_eq!(layout.n_interior, off);
    assert_eq!(layout.total(), off + 6);
    assert_eq!(layout.vertex_slot(0), off);
}

#[test]
fn split_merge_round_trip() {
    let prob = builtin_problem("lshape_singular").unwrap().with_degrees(Some(2), Some(2));
    let mesh = build_geometric_mesh(&prob).unwrap();
    let layout = DofLayout::new(&mesh);
    let u = random_vec(layout.total(), 3);
    let (ui, ub) = layout.split(&u);
    assert_eq!(ub.len(), 6);
    assert_eq!(ui.len(), layout.n_interior);
    let back = layout.merge(&ui, &ub);
    assert!(back.iter().zip(&u).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn project_data_examples() {
    let prob = square(["dirichlet"; 4], "5", "0", 2, 3, 0.15, 0.95);
    let mesh = build_geometric_mesh(&prob).unwrap();
    let d = project_data(&prob, &mesh).unwrap();
    assert!(d.f_hat.values().all(|t| t.values.amax() == 0.0));
    assert!(d.a.iter().all(|a| *a == Some(5.0)));
    assert!(d.g_hat.values().all(|v| v.iter().all(|x| (x - 5.0).abs() < 1e-10)));

    // Mixed corner: the average of the adjacent Dirichlet data, none at
    // a Neumann-Neumann corner.
    let p2 = square(["neumann", "neumann", "dirichlet", "dirichlet"], "x+2", "0", 2, 2, 0.15, 0.95);
    let a = vertex_data(&p2).unwrap();
    assert_eq!(a[0], None);
    assert_eq!(a[1], Some(3.0));
    assert_eq!(a[2], Some(3.0));
    assert_eq!(a[3], Some(2.0));
}

#[test]
fn interior_forcing_pulls_back_exactly_on_affine_cells() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/problems/lshape_singular.json"))
        .unwrap()
        .replace(r#""f": "0""#, r#""f": "x""#);
    let prob = parse_problem(&text, "f").unwrap().with_degrees(Some(3), Some(3));
    let mesh = build_geometric_mesh(&prob).unwrap();
    let d = project_data(&prob, &mesh).unwrap();
    let mut n = 0;
    for (l, el) in mesh.interiors.iter().enumerate() {
        let c = &el.corners;
        if (0..2).any(|r| (c[0][r] - c[1][r] + c[2][r] - c[3][r]).abs() > 1e-14) {
            continue;
        }
        n += 1;
        let t = &d.f_hat[&ElemRef::Interior(l)];
        let sq = el.metric(0.0, 0.0).det.sqrt();
        let pts = [(0.3, -0.8), (-1.0, 1.0), (0.0, 0.45)];
        let vals = polyspec::basis::eval_nodal(t, &pts);
        for (v, &(xi, eta)) in vals.iter().zip(&pts) {
            assert!((v - sq * el.map(xi, eta)[0]).abs() < 1e-11);
        }
    }
    assert!(n > 0);
}

/// Term counts by walking the mesh geometry: corners, vertex positions and
/// polygon edges only.
fn topology_counts(prob: &EllipticProblem, mesh: &GeometricMesh) -> HashMap<TermKind, usize> {
    let p = prob.p();
    let mut c: HashMap<TermKind, usize> = HashMap::new();
    let m = mesh.m;
    let mut add = |k: TermKind, n: usize| *c.entry(k).or_insert(0) += n;
    let on_edge = |x: [f64; 2]| -> Vec<usize> {
        (0..p)
            .filter(|&e| {
                let (a, b) = prob.edge_endpoints(e);
                let cross = (b[0] - a[0]) * (x[1] - a[1]) - (b[1] - a[1]) * (x[0] - a[0]);
                let t = ((x[0] - a[0]) * (b[0] - a[0]) + (x[1] - a[1]) * (b[1] - a[1])) / ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2));
                cross.abs() < 1e-12 && (-1e-12..=1.0 + 1e-12).contains(&t)
            })
            .collect()
    };
    let mut interior_pairs = 0usize;
    let mut boundary = vec![0usize; p];
    let mut arc = 0usize;
    for el in &mesh.interiors {
        for s in 0..4 {
            let (a, b) = (el.corners[s], el.corners[(s + 1) % 4]);
            let ea = on_edge(a);
            let shared: Vec<usize> = on_edge(b).into_iter().filter(|e| ea.contains(e)).collect();
            let on_arc = prob.vertices.iter().any(|v| {
                ((a[0] - v[0]).hypot(a[1] - v[1]) - mesh.rho).abs() < 1e-12 && ((b[0] - v[0]).hypot(b[1] - v[1]) - mesh.rho).abs() < 1e-12
            });
            if let Some(&e) = shared.first() {
                boundary[e] += 1;
            } else if on_arc {
                arc += 1;
            } else {
                interior_pairs += 1;
            }
        }
    }
    let mut n_ang = 0;
    for v in &mesh.vertices {
        let i = v.n_ang();
        n_ang += i;
        add(TermKind::PdeSector, i * (m - 1));
        // Radial internal edges, layer interfaces inside 2..M, and the
        // layer-1 arc.
        add(TermKind::Jump, (i - 1) * (m - 1) + i * (m - 2) + i);
    }
    assert_eq!(arc, n_ang);
    add(TermKind::Jump, arc + interior_pairs / 2);
    add(TermKind::PdeInterior, mesh.interiors.len());
    for k in 0..p {
        for e in [k, (k + 1) % p] {
            let kind = match prob.edges[e].bc {
                BcKind::Dirichlet => TermKind::DirichletSector,
                BcKind::Neumann => TermKind::NeumannSector,
            };
            add(kind, m - 1);
        }
    }
    for (e, &n) in boundary.iter().enumerate() {
        let kind = match prob.edges[e].bc {
            BcKind::Dirichlet => TermKind::DirichletInterior,
            BcKind::Neumann => TermKind::NeumannInterior,
        };
        add(kind, n);
        if prob.edges[e].bc == BcKind::Dirichlet {
            add(TermKind::DirichletVertex, 2);
        }
    }
    c
}

#[test]
fn term_counts_match_topology_walk() {
    let lshape = builtin_problem("lshape_singular").unwrap().with_degrees(Some(3), Some(3));
    let mixed = builtin_problem("square_mixed_varcoef").unwrap().with_degrees(Some(2), Some(3));
    let neumann = square(["neumann"; 4], "0", "1", 3, 2, 0.15, 0.95);
    for prob in [lshape, mixed, neumann] {
        let mesh = build_geometric_mesh(&prob).unwrap();
        let sys = build_functional(&prob, &mesh).unwrap();
        let got = sys.term_counts();
        let mut want = topology_counts(&prob, &mesh);
        want.retain(|_, v| *v > 0);
        assert_eq!(got, want, "{}", prob.name);
        assert!(sys.audit_edges(&mesh).is_empty());
    }
}

#[test]
fn all_neumann_square_has_no_vertex_terms() {
    let prob = square(["neumann"; 4], "0", "1", 2, 2, 0.15, 0.95);
    let mesh = build_geometric_mesh(&prob).unwrap();
    let sys = build_functional(&prob, &mesh).unwrap();
    assert_eq!(sys.term_counts().get(&TermKind::DirichletVertex), None);
}

#[test]
fn sector_pde_weights() {
    let prob = square(["dirichlet"; 4], "0", "0", 3, 2, 0.5, 0.5);
    let mesh = build_geometric_mesh(&prob).unwrap();
    let sys = build_functional(&prob, &mesh).unwrap();
    let mut seen = 0;
    for t in sys.terms.iter().filter(|t| t.kind == TermKind::PdeSector) {
        let Some(ElemRef::Sector(s)) = t.elem else { panic!() };
        let el = &mesh.sectors[s];
        // σ_j = 0.25 · 0.5^{4−j}, weight σ_j^{−1}.
        let sigma = 0.25 * 0.5f64.powi(4 - el.j as i32);
        assert!((t.weight - 1.0 / sigma).abs() < 1e-12 * t.weight);
        if el.j == 2 {
            assert!((t.weight - 16.0).abs() < 1e-12);
        }
        seen += 1;
    }
    assert!(seen > 0);
    for v in &mesh.vertices {
        for j in 2..mesh.m {
            let r = v.layer_weight(j) / v.layer_weight(j + 1);
            assert!(r > 1.0 && (r - v.mu.powf(-2.0 * v.lambda)).abs() < 1e-12);
        }
    }
}

#[test]
fn apply_a_matches_dense_assembly() {
    let prob = builtin_problem("square_mixed_varcoef").unwrap().with_degrees(Some(2), Some(2));
    let mesh = build_geometric_mesh(&prob).unwrap();
    let sys = build_functional(&prob, &mesh).unwrap();
    let n = sys.n();
    let mut dense: DMatrix<f64> = DMatrix::zeros(n, n);
    for t in &sys.terms {
        let k = t.b.transpose() * t.gram.dense() * &t.b * t.weight;
        for (a, &i) in t.dofs.iter().enumerate() {
            for (b, &j) in t.dofs.iter().enumerate() {
                dense[(i, j)] += k[(a, b)];
            }
        }
    }
    let scale = dense.amax();
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        let col = sys.apply_a(&e).unwrap();
        for r in 0..n {
            assert!((col[r] - dense[(r, c)]).abs() < 1e-9 * scale);
        }
    }
    assert!(sys.apply_a(&vec![0.0; n]).unwrap().iter().all(|v| *v == 0.0));
    assert!(sys.apply_a(&vec![0.0; n + 1]).is_err());
}

#[test]
fn normal_operator_is_symmetric_and_definite() {
    let prob = builtin_problem("lshape_singular").unwrap().with_degrees(Some(3), Some(3));
    let mesh = build_geometric_mesh(&prob).unwrap();
    let sys = build_functional(&prob, &mesh).unwrap();
    let n = sys.n();
    for s in 0..20 {
        let v = random_vec(n, 100 + s);
        let w = random_vec(n, 200 + s);
        let av = sys.apply_a(&v).unwrap();
        let aw = sys.apply_a(&w).unwrap();
        let nv = dot(&v, &v).sqrt();
        let nw = dot(&w, &w).sqrt();
        let na = dot(&av, &av).sqrt() / nv;
        assert!((dot(&av, &w) - dot(&v, &aw)).abs() <= 1e-10 * na * nv * nw);
        assert!(dot(&v, &av) > 0.0);
    }
    let a = sys.dense_matrix();
    let eig = nalgebra::SymmetricEigen::new(a.clone());
    assert!(eig.eigenvalues.min() > 0.0);
}

#[test]
fn functional_paths_agree_and_are_nonnegative() {
    let prob = builtin_problem("square_mixed_varcoef").unwrap().with_degrees(Some(3), Some(3));
    let mesh = build_geometric_mesh(&prob).unwrap();
    let sys = build_functional(&prob, &mesh).unwrap();
    let ops = operator_map(&prob, &mesh).unwrap();
    for s in 0..50 {
        let u = random_vec(sys.n(), s);
        let f = sys.evaluate_functional(&u).unwrap();
        assert!(f >= 0.0);
        if s < 5 {
            let d = sys.evaluate_functional_direct(&ops, &u).unwrap();
            assert!((f - d).abs() < 1e-9 * d, "{f} vs {d}");
            let termwise: f64 = sys.terms.iter().map(|t| t.value(&u)).sum();
            assert!((termwise - d).abs() < 1e-9 * d);
        }
    }
}

#[test]
fn zero_data_gives_zero_rhs_and_functional() {
    let prob = square(["dirichlet", "neumann", "dirichlet", "neumann"], "0", "0", 2, 2, 0.15, 0.95);
    let mesh = build_geometric_mesh(&prob).unwrap();
    let sys = build_functional(&prob, &mesh).unwrap();
    assert!(sys.rhs().iter().all(|v| *v == 0.0));
    assert_eq!(sys.constant, 0.0);
    assert_eq!(sys.evaluate_functional(&vec![0.0; sys.n()]).unwrap(), 0.0);
}

#[test]
fn residual_terms_are_nonnegative() {
    let prob = builtin_problem("square_smooth").unwrap().with_degrees(Some(2), Some(2));
    let mesh = build_geometric_mesh(&prob).unwrap();
    let sys = build_functional(&prob, &mesh).unwrap();
    for s in 0..5 {
        let u = random_vec(sys.n(), 900 + s);
        for t in &sys.terms {
            assert!(t.value(&u) >= 0.0);
            let g = t.gram.dense();
            let e = nalgebra::SymmetricEigen::new(g.clone()).eigenvalues.min();
            assert!(e >= -1e-12 * g.amax());
        }
    }
}

#[test]
fn interpolated_constant_has_no_jump_or_vertex_residual() {
    let prob = square(["dirichlet"; 4], "2", "0", 3, 3, 0.15, 0.95);
    let mesh = build_geometric_mesh(&prob).unwrap();
    let sys = build_functional(&prob, &mesh).unwrap();
    let u = interpolate(&mesh, &sys.layout, |_, _| Ok(2.0)).unwrap();
    for t in &sys.terms {
        assert!(t.value(&u) < 1e-22, "{:?}", t.kind);
    }
    // The quadratic form cancels against the data constant.
    let total = sys.evaluate_functional(&u).unwrap();
    // Entries of A are far larger than uᵀAu here, so the bound is relative.
    let quad = dot(&u, &sys.apply_a(&u).unwrap());
    assert!(total.abs() < 1e-10 * quad, "{total} {quad}");
}

#[test]
fn audit_covers_all_builtins() {
    for (name, prob) in builtin_problems() {
        let prob = prob.with_degrees(Some(2), Some(2));
        let mesh = build_geometric_mesh(&prob).unwrap();
        let sys = build_functional(&prob, &mesh).unwrap();
        assert!(sys.audit_edges(&mesh).is_empty(), "{name}");
        let r = DVector::from_vec(sys.rhs().to_vec());
        assert!(r.iter().all(|v| v.is_finite()));
    }
}
