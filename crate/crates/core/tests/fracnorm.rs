use nalgebra::DVector;
use polyspec::assembly::{interpolate, operator_map, DofLayout};
use polyspec::basis::{gll_rule, NodalTensor};
use polyspec::fracnorm::{edge_gram, edge_l2_gram, h_half_gram, jump_quantities, jump_vector, trace_nodes, Quantity};
use polyspec::geometry::{build_geometric_mesh, EdgeKind, ElemRef, GeometricMesh};
use polyspec::harness::builtins::builtin_problem;
use proptest::prelude::*;

fn nodal(d: usize, f: impl Fn(f64) -> f64) -> DVector<f64> {
    DVector::from_iterator(d + 1, gll_rule(d + 1).nodes.iter().map(|&t| f(t)))
}

/// `∬ (x^k − y^k)² / (x − y)²` over `(−1, 1)²`, expanding the difference
/// quotient as `Σ x^i y^{k−1−i}`.
fn slobodeckij_monomial(k: usize) -> f64 {
    let m = |e: usize| if e % 2 == 1 { 0.0 } else { 2.0 / (e as f64 + 1.0) };
    let mut s = 0.0;
    for i in 0..k {
        for ip in 0..k {
            s += m(i + ip) * m(2 * (k - 1) - i - ip);
        }
    }
    s
}

#[test]
fn l2_gram_examples() {
    let g = edge_l2_gram(3, 2.0);
    let one = nodal(3, |_| 1.0);
    assert!((one.dot(&(&g * &one)) - 2.0).abs() < 1e-14);
    let x = nodal(3, |t| t);
    assert!((x.dot(&(&g * &x)) - 2.0 / 3.0).abs() < 1e-14);
    let c = nodal(3, |t| t.powi(3));
    assert!((c.dot(&(&g * &c)) - 2.0 / 7.0).abs() < 1e-14);
    let g5 = edge_l2_gram(3, 5.0);
    assert!((x.dot(&(&g5 * &x)) - 2.5 * 2.0 / 3.0).abs() < 1e-13);
}

#[test]
fn slobodeckij_closed_form_values() {
    let frozen = [0.0, 4.0, 8.0 / 3.0, 44.0 / 15.0, 96.0 / 35.0, 892.0 / 315.0, 1912.0 / 693.0];
    for (k, f) in frozen.iter().enumerate() {
        assert!((slobodeckij_monomial(k) - f).abs() < 1e-14, "k={k}");
    }
}

#[test]
fn half_gram_reproduces_monomials() {
    for d in [6usize, 9] {
        let g = h_half_gram(d);
        for k in 0..=6usize {
            let v = nodal(d, |t| t.powi(k as i32));
            let q = v.dot(&(&g * &v));
            assert!((q - slobodeckij_monomial(k)).abs() < 1e-12, "d={d} k={k} q={q}");
        }
    }
}

#[test]
fn half_seminorm_is_scale_free_and_l2_scales() {
    let g = edge_gram(4);
    let v = nodal(4, |t| t * t - 0.3 * t);
    let l2 = v.dot(&(&g.l2 * &v));
    for len in [0.1, 1.0, 7.0] {
        let full = v.dot(&(g.h_half_scaled(len) * &v));
        let semi = v.dot(&(&g.half * &v));
        assert!((full - semi - 0.5 * len * l2).abs() < 1e-12 * full.max(1.0));
        assert!((v.dot(&(g.l2_scaled(len) * &v)) - 0.5 * len * l2).abs() < 1e-13 * len);
    }
}

#[test]
fn trace_node_count() {
    assert_eq!(trace_nodes(3, 5), 11);
    assert_eq!(trace_nodes(4, 4), 9);
}

#[test]
fn jump_triples_by_kind() {
    assert_eq!(jump_quantities(EdgeKind::InteriorInternal), [Quantity::Value, Quantity::DX1, Quantity::DX2]);
    assert_eq!(jump_quantities(EdgeKind::SectorInternal), [Quantity::Value, Quantity::DNu, Quantity::DPhi]);
    assert_eq!(jump_quantities(EdgeKind::SectorArcInterface), [Quantity::Value, Quantity::DNu, Quantity::DPhi]);
}

fn is_parallelogram(mesh: &GeometricMesh, e: ElemRef) -> bool {
    match e {
        ElemRef::Interior(l) => {
            let c = &mesh.interiors[l].corners;
            (0..2).all(|r| (c[0][r] - c[1][r] + c[2][r] - c[3][r]).abs() < 1e-14)
        }
        ElemRef::Sector(_) => false,
    }
}

/// Largest jump of any triple quantity over two-sided edges carrying
/// operators, split into parallelogram pairs and the rest.
fn max_jumps(w: usize, u: fn(f64, f64) -> f64) -> (f64, f64, usize) {
    let prob = builtin_problem("square_smooth").unwrap().with_degrees(Some(w), Some(w));
    let mesh = build_geometric_mesh(&prob).unwrap();
    let layout = DofLayout::new(&mesh);
    let ops = operator_map(&prob, &mesh).unwrap();
    let z = interpolate(&mesh, &layout, |x, y| Ok(u(x, y))).unwrap();
    let (mut flat, mut other, mut n) = (0.0f64, 0.0f64, 0);
    for e in mesh.edges.iter().filter(|e| e.sides.len() == 2 && e.finite_measure) {
        let (a, b) = (e.sides[0].elem, e.sides[1].elem);
        let (Some(oa), Some(ob)) = (ops.get(&a), ops.get(&b)) else { continue };
        let t = (layout.tensor(&z, a).unwrap(), layout.tensor(&z, b).unwrap());
        for q in jump_quantities(e.kind) {
            let j = jump_vector(&mesh, e, (oa, ob), (&t.0, &t.1), q).unwrap();
            let m = j.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if is_parallelogram(&mesh, a) && is_parallelogram(&mesh, b) {
                flat = flat.max(m);
            } else {
                other = other.max(m);
            }
        }
        n += 1;
    }
    (flat, other, n)
}

#[test]
fn constants_have_no_jumps() {
    let (flat, other, n) = max_jumps(3, |_, _| 1.7);
    assert!(n > 0);
    assert!(flat < 1e-10 && other < 1e-10, "{flat} {other}");
}

#[test]
fn linear_jumps_vanish_on_parallelograms_and_decay_elsewhere() {
    // Off parallelograms the metric is interpolated, so derivative traces
    // of a linear function carry a small degree-dependent error.
    let lin = |x: f64, y: f64| 1.0 + x - 2.0 * y;
    let (f3, o3, _) = max_jumps(3, lin);
    let (_, o7, _) = max_jumps(7, lin);
    assert!(f3 < 1e-10, "{f3}");
    assert!(o7 < 0.1 * o3, "{o3} {o7}");
}

#[test]
fn one_sided_edges_carry_no_jump() {
    let prob = builtin_problem("square_smooth").unwrap().with_degrees(Some(2), Some(2));
    let mesh = build_geometric_mesh(&prob).unwrap();
    let ops = operator_map(&prob, &mesh).unwrap();
    let e = mesh.edges.iter().find(|e| e.sides.len() == 1 && ops.contains_key(&e.sides[0].elem)).unwrap();
    let op = &ops[&e.sides[0].elem];
    let t = NodalTensor::zeros(2);
    assert!(jump_vector(&mesh, e, (op, op), (&t, &t), Quantity::Value).is_err());
}

proptest! {
    #[test]
    fn half_gram_is_psd_and_kills_constants(d in 1usize..10, vals in proptest::collection::vec(-3.0f64..3.0, 10)) {
        let g = h_half_gram(d);
        let v = DVector::from_iterator(d + 1, vals.iter().copied().take(d + 1));
        prop_assert!(v.dot(&(&g * &v)) >= -1e-12 * v.norm_squared());
        let one = DVector::from_element(d + 1, 1.0);
        prop_assert!((&g * one).amax() < 1e-11);
        prop_assert!((&g - g.transpose()).amax() < 1e-13);
    }
}
