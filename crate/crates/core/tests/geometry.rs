use std::f64::consts::PI;

use polyspec::geometry::{
    angular_count, build_geometric_mesh, layer_radii, side_point, EdgeKind, ElemRef, GeometricMesh, InteriorElement,
    SectorFrame,
};
use polyspec::harness::builtins::builtin_problems;
use polyspec::probdef::{parse_problem, signed_area, BcKind, EllipticProblem};
use proptest::prelude::*;

fn square(m: usize, rho: f64, mu: f64, beta: f64) -> EllipticProblem {
    let text = format!(
        r#"{{"vertices": [[0,0],[1,0],[1,1],[0,1]],
            "edges": [{{"bc":"dirichlet","g":"x"}},{{"bc":"neumann","g":"0"}},{{"bc":"dirichlet","g":"x"}},{{"bc":"dirichlet","g":"x"}}],
            "f": "0", "beta": [{beta},{beta},{beta},{beta}],
            "mesh": {{"M": {m}, "rho": {rho}, "mu": {mu}}}, "solver": {{"W": 2}}}}"#
    );
    parse_problem(&text, "sq").unwrap()
}

fn all_meshes() -> Vec<(String, GeometricMesh, EllipticProblem)> {
    let mut v: Vec<_> = builtin_problems()
        .into_iter()
        .map(|(n, p)| (n.to_string(), build_geometric_mesh(&p).unwrap(), p))
        .collect();
    let p = square(3, 0.25, 0.5, 0.5);
    v.push(("square_m3".into(), build_geometric_mesh(&p).unwrap(), p));
    v
}

#[test]
fn layer_radii_example() {
    let s = layer_radii(1.0, 0.5, 3);
    assert_eq!(s, vec![0.0, 0.25, 0.5, 1.0]);
}

#[test]
fn layer_radii_are_geometric() {
    for (_, mesh, _) in all_meshes() {
        for v in &mesh.vertices {
            assert_eq!(v.sigma[0], 0.0);
            assert!((v.sigma_j(mesh.m + 1) - mesh.rho).abs() < 1e-15);
            for j in 2..=mesh.m {
                let q = v.sigma_j(j) / v.sigma_j(j + 1);
                assert!((q - v.mu).abs() < 1e-14 * v.mu);
            }
        }
    }
}

#[test]
fn angular_counts() {
    assert_eq!(angular_count(1.5 * PI, 0.5 * PI), 3);
    assert_eq!(angular_count(0.5 * PI, 0.5 * PI), 1);
    assert_eq!(angular_count(0.1, 1.0), 1);
    for (_, mesh, p) in all_meshes() {
        for v in &mesh.vertices {
            assert_eq!(v.n_ang(), angular_count(v.omega, p.mesh.max_angle));
            let widths: Vec<f64> = v.psi.windows(2).map(|w| w[1] - w[0]).collect();
            let (lo, hi) = widths.iter().fold((f64::MAX, 0.0f64), |(a, b), &w| (a.min(w), b.max(w)));
            assert!(hi - lo < 1e-13);
        }
    }
}

#[test]
fn mesh_area_matches_shoelace() {
    for (name, mesh, p) in all_meshes() {
        let exact = signed_area(&p.vertices).abs();
        let a = mesh.covered_area();
        assert!((a - exact).abs() < 1e-10 * exact, "{name}: {a} vs {exact}");
    }
}

#[test]
fn sector_frame_examples() {
    let f = SectorFrame { apex: [0.0, 0.0], theta0: 0.0, omega: 0.5 * PI, psi_l: 0.0, psi_u: 0.5 * PI };
    let x = f.map(0.0, PI / 4.0);
    assert!((x[0] - 0.5f64.sqrt()).abs() < 1e-15 && (x[1] - 0.5f64.sqrt()).abs() < 1e-15);
    let x = f.map(0.5f64.ln(), 0.0);
    assert!((x[0] - 0.5).abs() < 1e-15 && x[1].abs() < 1e-15);
    assert_eq!(f.jacobian(), 1.0);

    let g = SectorFrame { apex: [1.0, 2.0], theta0: 0.3, omega: 1.5 * PI, psi_l: -1.0, psi_u: 1.0 };
    assert!((g.jacobian() - 0.75 * PI).abs() < 1e-15);
}

#[test]
fn mesh_sector_map_follows_first_edge() {
    let p = square(3, 0.25, 0.5, 0.5);
    let mesh = build_geometric_mesh(&p).unwrap();
    for (k, v) in mesh.vertices.iter().enumerate() {
        let f = &v.frame;
        let x = mesh.sector_map(k, 0.125f64.ln(), f.psi_l).unwrap();
        let next = p.vertices[(k + 1) % 4];
        let d = [next[0] - v.apex[0], next[1] - v.apex[1]];
        let dn = d[0].hypot(d[1]);
        let want = [v.apex[0] + 0.125 * d[0] / dn, v.apex[1] + 0.125 * d[1] / dn];
        assert!((x[0] - want[0]).abs() < 1e-14 && (x[1] - want[1]).abs() < 1e-14, "k={k}");
        assert!((mesh.sector_jacobian(k) - v.omega / (f.psi_u - f.psi_l)).abs() < 1e-14);
        assert!(mesh.sector_map(k, -2.0, f.psi_u + 0.1).is_err());
    }
}

#[test]
fn sector_jacobian_is_constant_on_samples() {
    for (_, mesh, _) in all_meshes() {
        for (k, v) in mesh.vertices.iter().enumerate() {
            let f = &v.frame;
            let mut js = Vec::new();
            for i in 0..100 {
                let phi = f.psi_l + (f.psi_u - f.psi_l) * i as f64 / 99.0;
                // Finite-difference Jacobian of (ν, φ) ↦ (τ, θ).
                let h = 1e-6;
                let dth = (f.theta(phi + h) - f.theta(phi - h)) / (2.0 * h);
                js.push(dth);
            }
            let (lo, hi) = js.iter().fold((f64::MAX, 0.0f64), |(a, b), &j| (a.min(j), b.max(j)));
            assert!(hi - lo < 1e-9 && lo > 0.0);
            assert!((lo - mesh.sector_jacobian(k)).abs() < 1e-8);
        }
    }
}

#[test]
fn interior_metric_examples() {
    let q = InteriorElement { l: 0, corners: [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], degree: 2 };
    assert_eq!(q.map(0.0, 0.0), [0.5, 0.5]);
    let m = q.metric(0.3, -0.2);
    assert!((m.xi_x - 2.0).abs() < 1e-15 && (m.eta_y - 2.0).abs() < 1e-15);
    assert!(m.xi_y.abs() < 1e-15 && m.eta_x.abs() < 1e-15);
    assert!((m.det - 0.25).abs() < 1e-15);
}

fn skewed() -> InteriorElement {
    InteriorElement { l: 7, corners: [[0.1, -0.2], [1.3, 0.1], [1.1, 0.9], [-0.2, 1.4]], degree: 3 }
}

#[test]
fn skewed_metric_matches_finite_differences() {
    let q = skewed();
    let h = 1e-6;
    for &(xi, eta) in &[(0.0, 0.0), (0.7, -0.4), (-0.9, 0.8)] {
        let x = q.map(xi, eta);
        let m = q.metric(xi, eta);
        // Invert by differencing the inverse map in physical space.
        let d = |dx: [f64; 2]| {
            let p = q.inverse([x[0] + dx[0], x[1] + dx[1]]).unwrap();
            let n = q.inverse([x[0] - dx[0], x[1] - dx[1]]).unwrap();
            ((p.0 - n.0) / (2.0 * h), (p.1 - n.1) / (2.0 * h))
        };
        let (xi_x, eta_x) = d([h, 0.0]);
        let (xi_y, eta_y) = d([0.0, h]);
        assert!((m.xi_x - xi_x).abs() < 1e-8 && (m.xi_y - xi_y).abs() < 1e-8);
        assert!((m.eta_x - eta_x).abs() < 1e-8 && (m.eta_y - eta_y).abs() < 1e-8);

        let m2 = q.metric2(xi, eta);
        let g = |dx: [f64; 2]| {
            let (a, b) = q.inverse([x[0] + dx[0], x[1] + dx[1]]).unwrap();
            let mp = q.metric(a, b);
            let (a, b) = q.inverse([x[0] - dx[0], x[1] - dx[1]]).unwrap();
            let mn = q.metric(a, b);
            [(mp.xi_x - mn.xi_x) / (2.0 * h), (mp.xi_y - mn.xi_y) / (2.0 * h), (mp.eta_x - mn.eta_x) / (2.0 * h), (mp.eta_y - mn.eta_y) / (2.0 * h)]
        };
        let gx = g([h, 0.0]);
        let gy = g([0.0, h]);
        assert!((m2.xi[0] - gx[0]).abs() < 1e-6 && (m2.xi[1] - gx[1]).abs() < 1e-6 && (m2.xi[2] - gy[1]).abs() < 1e-6);
        assert!((m2.eta[0] - gx[2]).abs() < 1e-6 && (m2.eta[1] - gx[3]).abs() < 1e-6 && (m2.eta[2] - gy[3]).abs() < 1e-6);
    }
}

#[test]
fn interior_maps_preserve_orientation() {
    for (name, mesh, _) in all_meshes() {
        for l in 0..mesh.interiors.len() {
            for a in 0..5 {
                for b in 0..5 {
                    let (xi, eta) = (-1.0 + 0.5 * a as f64, -1.0 + 0.5 * b as f64);
                    assert!(mesh.interior_metric(l, xi, eta).is_ok(), "{name} quad {l}");
                }
            }
        }
    }
    let flipped = InteriorElement { l: 0, corners: [[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]], degree: 2 };
    assert!(flipped.metric(0.0, 0.0).det < 0.0);
}

#[test]
fn shared_edges_agree_on_both_sides() {
    for (name, mesh, _) in all_meshes() {
        // Layer-1 elements are constants with no finite (ν, φ) map.
        let shared = mesh.edges.iter().filter(|e| e.sides.len() == 2 && e.finite_measure && e.kind != EdgeKind::Layer1Interface);
        for e in shared {
            let tol = if e.kind == EdgeKind::SectorArcInterface { 1e-10 } else { 1e-12 };
            for i in 0..20 {
                let t = -1.0 + 2.0 * i as f64 / 19.0;
                let p: Vec<_> = (0..2)
                    .map(|s| {
                        let (xi, eta) = mesh.edge_sample(e, s, t).unwrap();
                        mesh.elem_point(e.sides[s].elem, xi, eta)
                    })
                    .collect();
                let d = (p[0][0] - p[1][0]).hypot(p[0][1] - p[1][1]);
                assert!(d < tol, "{name} edge {} {:?} t={t}: {d}", e.id, e.kind);
            }
        }
    }
}

#[test]
fn every_side_is_matched_once() {
    for (name, mesh, p) in all_meshes() {
        let mut seen = std::collections::HashMap::new();
        for e in &mesh.edges {
            assert!(!e.sides.is_empty() && e.sides.len() <= 2);
            for s in &e.sides {
                *seen.entry((s.elem, s.local)).or_insert(0) += 1;
                assert_eq!(mesh.side_edges[&(s.elem, s.local)], e.id);
            }
            match e.kind {
                EdgeKind::BoundaryDirichlet | EdgeKind::BoundaryNeumann => {
                    assert_eq!(e.sides.len(), 1);
                    let want = match p.edges[e.boundary_edge.unwrap()].bc {
                        BcKind::Dirichlet => EdgeKind::BoundaryDirichlet,
                        BcKind::Neumann => EdgeKind::BoundaryNeumann,
                    };
                    assert_eq!(e.kind, want, "{name} edge {}", e.id);
                }
                EdgeKind::InteriorInternal | EdgeKind::SectorInternal | EdgeKind::SectorArcInterface => {
                    assert_eq!(e.sides.len(), 2, "{name} edge {}", e.id)
                }
                EdgeKind::Layer1Interface => {}
            }
        }
        for el in mesh.element_refs() {
            for s in 0..4 {
                // The apex side of a layer-1 wedge is a point.
                if matches!(el, ElemRef::Sector(i) if mesh.sectors[i].j == 1 && s == 3) {
                    assert!(!seen.contains_key(&(el, s)));
                    continue;
                }
                assert_eq!(seen.get(&(el, s)), Some(&1), "{name} {el:?} side {s}");
            }
        }
    }
}

#[test]
fn infinite_edges_are_exactly_layer_one_radial_sides() {
    for (name, mesh, _) in all_meshes() {
        for e in &mesh.edges {
            let radial_l1 = e.sides.iter().all(|s| match s.elem {
                ElemRef::Sector(i) => mesh.sectors[i].j == 1 && s.local % 2 == 0,
                ElemRef::Interior(_) => false,
            });
            assert_eq!(!e.finite_measure, radial_l1, "{name} edge {}", e.id);
        }
    }
}

#[test]
fn distance_weights_match_sampled_minimum() {
    for (name, mesh, p) in all_meshes() {
        for e in mesh.edges.iter().filter(|e| e.finite_measure) {
            let Some(d) = e.dist else {
                assert!(mesh.distance_weight(e).is_err());
                continue;
            };
            let polyspec::geometry::Frame::Sector(k) = e.frame else { panic!("{name} edge {} has a distance", e.id) };
            let apex = mesh.vertices[k].apex;
            let side = e.sides[0];
            let dmin = (0..401)
                .map(|i| {
                    let (xi, eta) = side_point(side.local, -1.0 + i as f64 / 200.0);
                    let x = mesh.elem_point(side.elem, xi, eta);
                    (x[0] - apex[0]).hypot(x[1] - apex[1])
                })
                .fold(f64::MAX, f64::min);
            assert!((d - dmin).abs() < 1e-12 * dmin.max(1e-3), "{name} edge {}: {d} vs {dmin}", e.id);
            let w = mesh.distance_weight(e).unwrap();
            assert!((w - d.powf(-2.0 * p.lambda(k))).abs() < 1e-12 * w, "{name} edge {}", e.id);
        }
    }
}

#[test]
fn layer_interface_weight_example() {
    let p = square(3, 0.25, 0.5, 0.5);
    let mesh = build_geometric_mesh(&p).unwrap();
    let s = mesh.sector(0, 0, 2);
    let e = &mesh.edges[mesh.side_edges[&(ElemRef::Sector(mesh.sector_index[0][0][1]), 1)]];
    assert_eq!(s.j, 2);
    assert_eq!(e.kind, EdgeKind::SectorInternal);
    assert!((e.dist.unwrap() - 0.125).abs() < 1e-15);
    assert!((mesh.distance_weight(e).unwrap() - 8.0).abs() < 1e-12);
    let arc = mesh.edges.iter().find(|e| e.kind == EdgeKind::SectorArcInterface).unwrap();
    assert!((arc.dist.unwrap() - 0.25).abs() < 1e-15);
    assert!((arc.weight - 4.0).abs() < 1e-12);
}

#[test]
fn rejects_large_rho_missing_template_and_low_degree() {
    assert!(build_geometric_mesh(&square(3, 0.6, 0.15, 0.95)).is_err());
    let penta = r#"{"vertices": [[0,0],[2,0],[2.5,1],[1,2],[-0.5,1]],
        "edges": [{"bc":"dirichlet","g":"0"},{"bc":"dirichlet","g":"0"},{"bc":"dirichlet","g":"0"},{"bc":"dirichlet","g":"0"},{"bc":"dirichlet","g":"0"}],
        "f": "1", "mesh": {"M": 2, "rho": 0.2}}"#;
    let p = parse_problem(penta, "penta").unwrap();
    assert!(build_geometric_mesh(&p).is_err());
    let sq = square(3, 0.25, 0.15, 0.95);
    assert!(build_geometric_mesh(&sq.with_degrees(Some(1), None)).is_err());
    assert!(build_geometric_mesh(&sq.with_degrees(None, Some(1))).is_err());
}

proptest! {
    #[test]
    fn sector_frame_inverse_round_trip(
        ax in -2.0f64..2.0, ay in -2.0f64..2.0, th0 in 0.0f64..6.28, omega in 0.3f64..6.0,
        nu in -8.0f64..0.0, frac in 0.0f64..1.0,
    ) {
        let f = SectorFrame { apex: [ax, ay], theta0: th0, omega, psi_l: 0.0, psi_u: 1.0 };
        let x = f.map(nu, frac);
        let (n2, p2) = f.inverse(x);
        prop_assert!((n2 - nu).abs() < 1e-12);
        prop_assert!((p2 - frac).abs() < 1e-12);
    }

    #[test]
    fn bilinear_inverse_round_trip(xi in -1.0f64..1.0, eta in -1.0f64..1.0) {
        let q = skewed();
        let (a, b) = q.inverse(q.map(xi, eta)).unwrap();
        prop_assert!((a - xi).abs() < 1e-12 && (b - eta).abs() < 1e-12);
    }
}
