//! Shipped test problems and the analytic solutions the expression
//! language cannot express.

use std::f64::consts::PI;

use crate::probdef::{parse_problem, EllipticProblem, Jet};
use crate::Error;

/// Named analytic functions with closed-form derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analytic {
    /// `r^{2/3} sin(2θ/3)` about the origin with `θ ∈ [0, 2π)` measured
    /// from the positive x-axis, the reentrant corner of the L-shape.
    LshapeSingular,
}

impl Analytic {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "lshape_singular" => Some(Analytic::LshapeSingular),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Analytic::LshapeSingular => "lshape_singular",
        }
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        match self {
            Analytic::LshapeSingular => {
                let th = y.atan2(x).rem_euclid(2.0 * PI);
                x.hypot(y).powf(2.0 / 3.0) * (2.0 * th / 3.0).sin()
            }
        }
    }

    pub fn jet(&self, x: f64, y: f64) -> Result<Jet, String> {
        match self {
            Analytic::LshapeSingular => {
                let r = x.hypot(y);
                let th = y.atan2(x).rem_euclid(2.0 * PI);
                let a = 2.0 / 3.0;
                if r == 0.0 {
                    return Err("derivatives are singular at the reentrant corner".into());
                }
                // u = Im z^a; u_x = Im f', u_y = Re f', u_xx = Im f'', u_xy = Re f''.
                let zp = |b: f64, c: f64| (c * r.powf(b) * (b * th).cos(), c * r.powf(b) * (b * th).sin());
                let (_, v) = zp(a, 1.0);
                let (re1, im1) = zp(a - 1.0, a);
                let (re2, im2) = zp(a - 2.0, a * (a - 1.0));
                Ok(Jet {
                    v,
                    gx: im1,
                    gy: re1,
                    hxx: im2,
                    hxy: re2,
                    hyy: -im2,
                })
            }
        }
    }
}

const LSHAPE: &str = include_str!("../../problems/lshape_singular.json");
const SQUARE_SMOOTH: &str = include_str!("../../problems/square_smooth.json");
const SQUARE_MIXED: &str = include_str!("../../problems/square_mixed_varcoef.json");

pub const BUILTIN_NAMES: [&str; 3] = ["lshape_singular", "square_smooth", "square_mixed_varcoef"];

pub fn builtin_source(name: &str) -> Option<&'static str> {
    match name {
        "lshape_singular" => Some(LSHAPE),
        "square_smooth" => Some(SQUARE_SMOOTH),
        "square_mixed_varcoef" => Some(SQUARE_MIXED),
        _ => None,
    }
}

pub fn builtin_problem(name: &str) -> Result<EllipticProblem, Error> {
    let src = builtin_source(name).ok_or_else(|| Error::Schema {
        field: "problem".into(),
        reason: format!("unknown builtin problem `{name}`"),
    })?;
    parse_problem(src, name)
}

pub fn builtin_problems() -> Vec<(&'static str, EllipticProblem)> {
    BUILTIN_NAMES
        .iter()
        .map(|&n| (n, builtin_problem(n).expect("shipped problem files are valid")))
        .collect()
}
