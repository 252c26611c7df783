//! A small arithmetic expression language in the variables `x` and `y`.
//!
//! Precedence from loosest to tightest: `+ -`, `* /`, unary `-`, `^`.
//! The exponent of `^` is itself a unary expression, so `2^-1` parses and
//! `2^3^2` groups to the right.

use std::fmt;

use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
    Atan2,
    Pow,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Atan2 => "atan2",
            Func::Pow => "pow",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Atan2 | Func::Pow => 2,
            _ => 1,
        }
    }

    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "atan2" => Func::Atan2,
            "pow" => Func::Pow,
            _ => return None,
        })
    }
}

/// Expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Pi,
    X,
    Y,
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    Y,
}

/// Parses `src` into an expression tree.
pub fn parse_expression(src: &str) -> Result<Expr, Error> {
    let chars: Vec<char> = src.chars().collect();
    if chars.iter().all(|c| c.is_whitespace()) {
        return Err(Error::Syntax {
            pos: 0,
            msg: "empty expression".into(),
        });
    }
    let mut p = Parser { chars, pos: 0 };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.chars.len() {
        return Err(p.err(format!("unexpected `{}`", p.chars[p.pos])));
    }
    Ok(e)
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn err(&self, msg: String) -> Error {
        Error::Syntax { pos: self.pos, msg }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, Error> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some('+') => BinOp::Add,
                Some('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, Error> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some('*') => BinOp::Mul,
                Some('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, Error> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, Error> {
        let base = self.primary()?;
        if self.eat('^') {
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, Error> {
        match self.peek() {
            None => Err(self.err("unexpected end of input".into())),
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(self.err("expected `)`".into()));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_alphabetic() || c == '_' => self.ident(),
            Some(c) => Err(self.err(format!("unexpected `{c}`"))),
        }
    }

    fn number(&mut self) -> Result<Expr, Error> {
        let start = self.pos;
        let n = self.chars.len();
        while self.pos < n && (self.chars[self.pos].is_ascii_digit() || self.chars[self.pos] == '.') {
            self.pos += 1;
        }
        if self.pos < n && (self.chars[self.pos] == 'e' || self.chars[self.pos] == 'E') {
            let mut q = self.pos + 1;
            if q < n && (self.chars[q] == '+' || self.chars[q] == '-') {
                q += 1;
            }
            if q < n && self.chars[q].is_ascii_digit() {
                while q < n && self.chars[q].is_ascii_digit() {
                    q += 1;
                }
                self.pos = q;
            }
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Expr::Const(v)),
            _ => Err(Error::Syntax {
                pos: start,
                msg: format!("invalid number `{text}`"),
            }),
        }
    }

    fn ident(&mut self) -> Result<Expr, Error> {
        let start = self.pos;
        while self.pos < self.chars.len()
            && (self.chars[self.pos].is_alphanumeric() || self.chars[self.pos] == '_')
        {
            self.pos += 1;
        }
        let name: String = self.chars[start..self.pos].iter().collect();
        if self.peek() == Some('(') {
            let func = Func::lookup(&name).ok_or_else(|| Error::UnknownIdentifier {
                name: name.clone(),
                pos: start,
            })?;
            self.pos += 1;
            let mut args = Vec::new();
            if !self.eat(')') {
                loop {
                    args.push(self.expr()?);
                    if self.eat(',') {
                        continue;
                    }
                    if self.eat(')') {
                        break;
                    }
                    return Err(self.err("expected `,` or `)`".into()));
                }
            }
            if args.len() != func.arity() {
                return Err(Error::Arity {
                    name,
                    expected: func.arity(),
                    got: args.len(),
                });
            }
            return Ok(Expr::Call(func, args));
        }
        match name.as_str() {
            "x" => Ok(Expr::X),
            "y" => Ok(Expr::Y),
            "pi" => Ok(Expr::Pi),
            _ => Err(Error::UnknownIdentifier { name, pos: start }),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) => write!(f, "{v}"),
            Expr::Pi => write!(f, "pi"),
            Expr::X => write!(f, "x"),
            Expr::Y => write!(f, "y"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a}{}{b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl Expr {
    pub fn constant(v: f64) -> Expr {
        Expr::Const(v)
    }

    /// True when the tree contains no variable.
    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Pi => true,
            Expr::X | Expr::Y => false,
            Expr::Neg(a) => a.is_constant(),
            Expr::Bin(_, a, b) => a.is_constant() && b.is_constant(),
            Expr::Call(_, args) => args.iter().all(Expr::is_constant),
        }
    }

    fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(v) => Some(*v),
            _ => None,
        }
    }

    /// Value at a single point; the message describes a domain failure.
    pub fn eval_at(&self, x: f64, y: f64) -> Result<f64, String> {
        let v = match self {
            Expr::Const(v) => *v,
            Expr::Pi => std::f64::consts::PI,
            Expr::X => x,
            Expr::Y => y,
            Expr::Neg(a) => -a.eval_at(x, y)?,
            Expr::Bin(op, a, b) => {
                let a = a.eval_at(x, y)?;
                let b = b.eval_at(x, y)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err("division by zero".into());
                        }
                        a / b
                    }
                    BinOp::Pow => pow_checked(a, b)?,
                }
            }
            Expr::Call(func, args) => {
                let a = args[0].eval_at(x, y)?;
                match func {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Tan => a.tan(),
                    Func::Exp => a.exp(),
                    Func::Log => {
                        if a <= 0.0 {
                            return Err(format!("log of non-positive value {a}"));
                        }
                        a.ln()
                    }
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(format!("sqrt of negative value {a}"));
                        }
                        a.sqrt()
                    }
                    Func::Abs => a.abs(),
                    Func::Atan2 => a.atan2(args[1].eval_at(x, y)?),
                    Func::Pow => pow_checked(a, args[1].eval_at(x, y)?)?,
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite result in `{self}`"))
        }
    }

    /// Pointwise values; the first failing point is reported by index.
    pub fn eval(&self, pts: &[(f64, f64)]) -> Result<Vec<f64>, Error> {
        pts.iter()
            .enumerate()
            .map(|(index, &(x, y))| {
                self.eval_at(x, y)
                    .map_err(|msg| Error::Domain { index, msg })
            })
            .collect()
    }

    /// Symbolic partial derivative.
    pub fn diff(&self, v: Var) -> Expr {
        use Expr::*;
        match self {
            Const(_) | Pi => Const(0.0),
            X => Const(if v == Var::X { 1.0 } else { 0.0 }),
            Y => Const(if v == Var::Y { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.diff(v)),
            Bin(op, a, b) => {
                let (da, db) = (a.diff(v), b.diff(v));
                match op {
                    BinOp::Add => add(da, db),
                    BinOp::Sub => sub(da, db),
                    BinOp::Mul => add(mul(da, (**b).clone()), mul((**a).clone(), db)),
                    BinOp::Div => div(
                        sub(mul(da, (**b).clone()), mul((**a).clone(), db)),
                        pow((**b).clone(), Const(2.0)),
                    ),
                    BinOp::Pow => diff_pow(a, b, da, db),
                }
            }
            Call(func, args) => {
                let a = &args[0];
                let da = a.diff(v);
                match func {
                    Func::Sin => mul(da, call(Func::Cos, a.clone())),
                    Func::Cos => neg(mul(da, call(Func::Sin, a.clone()))),
                    Func::Tan => div(da, pow(call(Func::Cos, a.clone()), Const(2.0))),
                    Func::Exp => mul(da, self.clone()),
                    Func::Log => div(da, a.clone()),
                    Func::Sqrt => div(da, mul(Const(2.0), self.clone())),
                    Func::Abs => mul(da, div(a.clone(), self.clone())),
                    Func::Atan2 => {
                        let b = &args[1];
                        let db = b.diff(v);
                        div(
                            sub(mul(b.clone(), da), mul(a.clone(), db)),
                            add(pow(a.clone(), Const(2.0)), pow(b.clone(), Const(2.0))),
                        )
                    }
                    Func::Pow => {
                        let b = &args[1];
                        diff_pow(a, b, da, b.diff(v))
                    }
                }
            }
        }
    }
}

fn pow_checked(a: f64, b: f64) -> Result<f64, String> {
    if a == 0.0 && b < 0.0 {
        return Err("zero raised to a negative power".into());
    }
    if a < 0.0 && b.fract() != 0.0 {
        return Err(format!("negative base {a} with non-integer exponent {b}"));
    }
    Ok(a.powf(b))
}

fn diff_pow(a: &Expr, b: &Expr, da: Expr, db: Expr) -> Expr {
    if b.is_constant() {
        // d(a^c) = c a^(c-1) a'
        let c = b.clone();
        let cm1 = match b.as_const() {
            Some(k) => Expr::Const(k - 1.0),
            None => sub(b.clone(), Expr::Const(1.0)),
        };
        return mul(mul(c, pow(a.clone(), cm1)), da);
    }
    let base = Expr::Bin(BinOp::Pow, Box::new(a.clone()), Box::new(b.clone()));
    mul(
        base,
        add(
            mul(db, call(Func::Log, a.clone())),
            div(mul(b.clone(), da), a.clone()),
        ),
    )
}

fn is_zero(e: &Expr) -> bool {
    e.as_const() == Some(0.0)
}

fn is_one(e: &Expr) -> bool {
    e.as_const() == Some(1.0)
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(v) => Expr::Const(-v),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => Expr::Const(x + y),
        _ if is_zero(&a) => b,
        _ if is_zero(&b) => a,
        _ => Expr::Bin(BinOp::Add, Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => Expr::Const(x - y),
        _ if is_zero(&b) => a,
        _ if is_zero(&a) => neg(b),
        _ => Expr::Bin(BinOp::Sub, Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => Expr::Const(x * y),
        _ if is_zero(&a) || is_zero(&b) => Expr::Const(0.0),
        _ if is_one(&a) => b,
        _ if is_one(&b) => a,
        _ => Expr::Bin(BinOp::Mul, Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    if is_zero(&a) {
        return Expr::Const(0.0);
    }
    if is_one(&b) {
        return a;
    }
    Expr::Bin(BinOp::Div, Box::new(a), Box::new(b))
}

fn pow(a: Expr, b: Expr) -> Expr {
    if is_one(&b) {
        return a;
    }
    if is_zero(&b) {
        return Expr::Const(1.0);
    }
    Expr::Bin(BinOp::Pow, Box::new(a), Box::new(b))
}

fn call(f: Func, a: Expr) -> Expr {
    Expr::Call(f, vec![a])
}
