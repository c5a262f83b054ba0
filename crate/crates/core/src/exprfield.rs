//! Closed-form scalar fields over chart coordinates.
//!
//! A [`ScalarField`] is an expression tree over the chart's coordinate names.
//! Derivatives are taken symbolically on the tree, so a derivative is again a
//! field that can be evaluated, printed and differentiated further.
//!
//! Grammar (whitespace between tokens is ignored):
//!
//! ```text
//! expr    = term { ("+" | "-") term } ;
//! term    = unary { ("*" | "/") unary } ;
//! unary   = "-" unary | power ;
//! power   = atom [ "^" unary ] ;                 (* right-associative *)
//! atom    = number | coord | "pi" | func "(" expr ")" | "(" expr ")" ;
//! func    = "sin" | "cos" | "tan" | "cot" | "exp" | "log" | "sqrt" ;
//! number  = digits [ "." digits ] [ ("e" | "E") [ "+" | "-" ] digits ]
//!         | "." digits [ exponent ] ;
//! ```
//!
//! Unary minus binds tighter than `*` and looser than `^`, so `-x^2` is
//! `-(x^2)` and `-x*y` is `(-x)*y`. Angles are radians.

use std::fmt;
use std::ops;
use std::sync::Arc;

use thiserror::Error;

/// Elementary functions admitted by the grammar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Cot,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "cot" => Func::Cot,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Cot => "cot",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }
}

/// Expression tree. Variables are indices into the owning field's coordinate list.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at column {column}: {message}")]
    Syntax { column: usize, message: String },
    #[error("unknown identifier `{name}` at column {column}")]
    UnknownIdentifier { column: usize, name: String },
}

impl ParseError {
    /// 1-based column of the offending token.
    pub fn column(&self) -> usize {
        match self {
            ParseError::Syntax { column, .. } | ParseError::UnknownIdentifier { column, .. } => {
                *column
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("singular evaluation of `{subexpr}`: {reason}")]
pub struct EvalError {
    pub subexpr: String,
    pub reason: &'static str,
}

// ---------------------------------------------------------------------------
// Folding constructors

fn num(v: f64) -> Expr {
    Expr::Num(v)
}

fn is_num(e: &Expr, v: f64) -> bool {
    matches!(e, Expr::Num(x) if *x == v)
}

fn fold(v: f64, fallback: impl FnOnce() -> Expr) -> Expr {
    if v.is_finite() {
        Expr::Num(v)
    } else {
        fallback()
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => Expr::Num(-v),
        Expr::Neg(inner) => *inner,
        a => Expr::Neg(Box::new(a)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x + y),
        (a, b) if is_num(&a, 0.0) => b,
        (a, b) if is_num(&b, 0.0) => a,
        (a, Expr::Neg(b)) => Expr::Sub(Box::new(a), b),
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x - y),
        (a, b) if is_num(&b, 0.0) => a,
        (a, b) if is_num(&a, 0.0) => neg(b),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x * y),
        (a, _) if is_num(&a, 0.0) => num(0.0),
        (_, b) if is_num(&b, 0.0) => num(0.0),
        (a, b) if is_num(&a, 1.0) => b,
        (a, b) if is_num(&b, 1.0) => a,
        (a, b) if is_num(&a, -1.0) => neg(b),
        (a, b) if is_num(&b, -1.0) => neg(a),
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => fold(x / y, || {
            Expr::Div(Box::new(Expr::Num(x)), Box::new(Expr::Num(y)))
        }),
        (a, b) if is_num(&b, 1.0) => a,
        (a, b) if is_num(&a, 0.0) && !matches!(b, Expr::Num(_)) => num(0.0),
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => fold(real_pow(x, y), || {
            Expr::Pow(Box::new(Expr::Num(x)), Box::new(Expr::Num(y)))
        }),
        (a, b) if is_num(&b, 1.0) => a,
        (_, b) if is_num(&b, 0.0) => num(1.0),
        (a, b) => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

fn call(f: Func, a: Expr) -> Expr {
    match a {
        Expr::Num(x) => match apply(f, x) {
            Ok(v) => Expr::Num(v),
            Err(_) => Expr::Call(f, Box::new(Expr::Num(x))),
        },
        a => Expr::Call(f, Box::new(a)),
    }
}

fn real_pow(base: f64, exponent: f64) -> f64 {
    if exponent.fract() == 0.0 && exponent.abs() <= 64.0 {
        base.powi(exponent as i32)
    } else {
        base.powf(exponent)
    }
}

fn apply(f: Func, x: f64) -> Result<f64, &'static str> {
    let v = match f {
        Func::Sin => x.sin(),
        Func::Cos => x.cos(),
        Func::Tan => {
            let c = x.cos();
            if c == 0.0 {
                return Err("tan pole");
            }
            x.sin() / c
        }
        Func::Cot => {
            let s = x.sin();
            if s == 0.0 {
                return Err("cot pole");
            }
            x.cos() / s
        }
        Func::Exp => x.exp(),
        Func::Log => {
            if x <= 0.0 {
                return Err("log of non-positive argument");
            }
            x.ln()
        }
        Func::Sqrt => {
            if x < 0.0 {
                return Err("sqrt of negative argument");
            }
            x.sqrt()
        }
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err("non-finite result")
    }
}

// ---------------------------------------------------------------------------
// Evaluation and differentiation

impl Expr {
    fn eval_with(&self, p: &[f64], names: &[String]) -> Result<f64, EvalError> {
        let singular = |reason| EvalError {
            subexpr: Printer { expr: self, names }.to_string(),
            reason,
        };
        let v = match self {
            Expr::Num(v) => *v,
            Expr::Var(k) => p[*k],
            Expr::Neg(a) => -a.eval_with(p, names)?,
            Expr::Add(a, b) => a.eval_with(p, names)? + b.eval_with(p, names)?,
            Expr::Sub(a, b) => a.eval_with(p, names)? - b.eval_with(p, names)?,
            Expr::Mul(a, b) => a.eval_with(p, names)? * b.eval_with(p, names)?,
            Expr::Div(a, b) => {
                let num = a.eval_with(p, names)?;
                let den = b.eval_with(p, names)?;
                if den == 0.0 {
                    return Err(singular("division by zero"));
                }
                num / den
            }
            Expr::Pow(a, b) => real_pow(a.eval_with(p, names)?, b.eval_with(p, names)?),
            Expr::Call(f, a) => apply(*f, a.eval_with(p, names)?).map_err(singular)?,
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(singular("non-finite result"))
        }
    }

    fn derivative(&self, k: usize) -> Expr {
        match self {
            Expr::Num(_) => num(0.0),
            Expr::Var(j) => num(if *j == k { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.derivative(k)),
            Expr::Add(a, b) => add(a.derivative(k), b.derivative(k)),
            Expr::Sub(a, b) => sub(a.derivative(k), b.derivative(k)),
            Expr::Mul(a, b) => add(
                mul(a.derivative(k), (**b).clone()),
                mul((**a).clone(), b.derivative(k)),
            ),
            Expr::Div(a, b) => {
                let da = a.derivative(k);
                let db = b.derivative(k);
                if is_num(&db, 0.0) {
                    return div(da, (**b).clone());
                }
                div(
                    sub(mul(da, (**b).clone()), mul((**a).clone(), db)),
                    pow((**b).clone(), num(2.0)),
                )
            }
            Expr::Pow(a, b) => {
                let da = a.derivative(k);
                let db = b.derivative(k);
                match (&**b, is_num(&db, 0.0)) {
                    (Expr::Num(c), _) => mul(
                        mul(num(*c), pow((**a).clone(), num(c - 1.0))),
                        da,
                    ),
                    (_, true) => mul(
                        mul((**b).clone(), pow((**a).clone(), sub((**b).clone(), num(1.0)))),
                        da,
                    ),
                    _ => {
                        // a^b (b' ln a + b a' / a)
                        let inner = add(
                            mul(db, call(Func::Log, (**a).clone())),
                            div(mul((**b).clone(), da), (**a).clone()),
                        );
                        mul(self.clone(), inner)
                    }
                }
            }
            Expr::Call(f, a) => {
                let da = a.derivative(k);
                if is_num(&da, 0.0) {
                    return num(0.0);
                }
                let a = (**a).clone();
                let outer = match f {
                    Func::Sin => call(Func::Cos, a),
                    Func::Cos => neg(call(Func::Sin, a)),
                    Func::Tan => add(num(1.0), pow(call(Func::Tan, a), num(2.0))),
                    Func::Cot => neg(add(num(1.0), pow(call(Func::Cot, a), num(2.0)))),
                    Func::Exp => call(Func::Exp, a),
                    Func::Log => return div(da, a),
                    Func::Sqrt => return div(da, mul(num(2.0), call(Func::Sqrt, a))),
                };
                mul(outer, da)
            }
        }
    }

    fn node_count(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::Var(_) => 1,
            Expr::Neg(a) | Expr::Call(_, a) => 1 + a.node_count(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => 1 + a.node_count() + b.node_count(),
        }
    }
}

// ---------------------------------------------------------------------------
// Printing

const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => PREC_ADD,
        Expr::Mul(..) | Expr::Div(..) => PREC_MUL,
        Expr::Neg(_) => PREC_NEG,
        Expr::Pow(..) => PREC_POW,
        _ => PREC_ATOM,
    }
}

struct Printer<'a> {
    expr: &'a Expr,
    names: &'a [String],
}

impl Printer<'_> {
    fn child<'b>(&'b self, e: &'b Expr) -> Printer<'b> {
        Printer {
            expr: e,
            names: self.names,
        }
    }

    fn wrapped(&self, f: &mut fmt::Formatter<'_>, e: &Expr, parens: bool) -> fmt::Result {
        if parens {
            write!(f, "({})", self.child(e))
        } else {
            write!(f, "{}", self.child(e))
        }
    }
}

impl fmt::Display for Printer<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.expr {
            Expr::Num(v) => {
                if v.is_sign_negative() {
                    write!(f, "(-{})", -v)
                } else {
                    write!(f, "{}", v)
                }
            }
            Expr::Var(k) => f.write_str(&self.names[*k]),
            Expr::Neg(a) => {
                f.write_str("-")?;
                self.wrapped(f, a, precedence(a) < PREC_POW)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                let (op, prec) = match self.expr {
                    Expr::Add(..) => (" + ", PREC_ADD),
                    Expr::Sub(..) => (" - ", PREC_ADD),
                    Expr::Mul(..) => ("*", PREC_MUL),
                    _ => ("/", PREC_MUL),
                };
                self.wrapped(f, a, precedence(a) < prec)?;
                f.write_str(op)?;
                // right operand of a left-associative operator
                let strict = matches!(self.expr, Expr::Sub(..) | Expr::Div(..));
                let pb = precedence(b);
                self.wrapped(f, b, pb < prec || (strict && pb == prec))
            }
            Expr::Pow(a, b) => {
                self.wrapped(f, a, precedence(a) <= PREC_POW)?;
                f.write_str("^")?;
                self.wrapped(f, b, precedence(b) < PREC_NEG)
            }
            Expr::Call(func, a) => write!(f, "{}({})", func.name(), self.child(a)),
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

struct Lexer {
    toks: Vec<(Tok, usize)>,
}

fn lex(src: &str) -> Result<Lexer, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                column,
                message: format!("malformed number `{}`", text),
            })?;
            toks.push((Tok::Num(v), column));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            toks.push((Tok::Ident(chars[start..i].iter().collect()), column));
        } else if "+-*/^()".contains(c) {
            toks.push((Tok::Op(c), column));
            i += 1;
        } else {
            return Err(ParseError::Syntax {
                column,
                message: format!("unexpected character `{}`", c),
            });
        }
    }
    toks.push((Tok::End, chars.len() + 1));
    Ok(Lexer { toks })
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    coords: &'a [String],
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn column(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, message: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            column: self.column(),
            message: message.into(),
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if *self.peek() == Tok::Op(c) {
            self.bump();
            Ok(())
        } else {
            Err(self.error(format!("expected `{}`", c)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Tok::Op('+') => {
                    self.bump();
                    lhs = add(lhs, self.term()?);
                }
                Tok::Op('-') => {
                    self.bump();
                    lhs = sub(lhs, self.term()?);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Tok::Op('*') => {
                    self.bump();
                    lhs = mul(lhs, self.unary()?);
                }
                Tok::Op('/') => {
                    self.bump();
                    lhs = div(lhs, self.unary()?);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Op('-') {
            self.bump();
            return Ok(neg(self.unary()?));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if *self.peek() == Tok::Op('^') {
            self.bump();
            let exponent = self.unary()?;
            return Ok(pow(base, exponent));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let (tok, column) = self.bump();
        match tok {
            Tok::Num(v) => Ok(num(v)),
            Tok::Op('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if let Some(k) = self.coords.iter().position(|c| *c == name) {
                    return Ok(Expr::Var(k));
                }
                if let Some(f) = Func::from_name(&name) {
                    if *self.peek() != Tok::Op('(') {
                        return Err(self.error(format!("expected `(` after `{}`", name)));
                    }
                    self.bump();
                    let arg = self.expr()?;
                    self.expect(')')?;
                    return Ok(call(f, arg));
                }
                if name == "pi" {
                    return Ok(num(std::f64::consts::PI));
                }
                Err(ParseError::UnknownIdentifier { column, name })
            }
            Tok::End => Err(ParseError::Syntax {
                column,
                message: "unexpected end of input".into(),
            }),
            Tok::Op(c) => Err(ParseError::Syntax {
                column,
                message: format!("unexpected `{}`", c),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// ScalarField

/// A closed-form function of the chart coordinates. Immutable and cheap to clone.
#[derive(Clone, Debug)]
pub struct ScalarField {
    expr: Arc<Expr>,
    coords: Arc<[String]>,
}

impl PartialEq for ScalarField {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords && self.expr == other.expr
    }
}

impl ScalarField {
    pub fn parse(src: &str, coords: &[impl AsRef<str>]) -> Result<Self, ParseError> {
        let coords: Arc<[String]> = coords.iter().map(|c| c.as_ref().to_string()).collect();
        Self::parse_shared(src, coords)
    }

    /// Parse against an already shared coordinate list.
    pub fn parse_shared(src: &str, coords: Arc<[String]>) -> Result<Self, ParseError> {
        let lexer = lex(src)?;
        let mut parser = Parser {
            toks: lexer.toks,
            pos: 0,
            coords: &coords,
        };
        let expr = parser.expr()?;
        if *parser.peek() != Tok::End {
            return Err(parser.error("unexpected trailing input"));
        }
        Ok(ScalarField {
            expr: Arc::new(expr),
            coords,
        })
    }

    pub fn constant(value: f64, coords: Arc<[String]>) -> Self {
        ScalarField {
            expr: Arc::new(Expr::Num(value)),
            coords,
        }
    }

    pub fn zero(coords: Arc<[String]>) -> Self {
        Self::constant(0.0, coords)
    }

    /// The coordinate function x^k.
    pub fn coordinate(k: usize, coords: Arc<[String]>) -> Self {
        assert!(k < coords.len(), "coordinate index out of range");
        ScalarField {
            expr: Arc::new(Expr::Var(k)),
            coords,
        }
    }

    pub fn from_expr(expr: Expr, coords: Arc<[String]>) -> Self {
        ScalarField {
            expr: Arc::new(expr),
            coords,
        }
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn coords(&self) -> &Arc<[String]> {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// `Some(c)` when the tree folded to a literal.
    pub fn as_constant(&self) -> Option<f64> {
        match *self.expr {
            Expr::Num(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_constant() == Some(0.0)
    }

    pub fn node_count(&self) -> usize {
        self.expr.node_count()
    }

    pub fn eval(&self, p: &[f64]) -> Result<f64, EvalError> {
        assert_eq!(p.len(), self.coords.len(), "point dimension mismatch");
        self.expr.eval_with(p, &self.coords)
    }

    /// Exact partial derivative with respect to coordinate `mu`.
    pub fn derivative(&self, mu: usize) -> ScalarField {
        assert!(mu < self.coords.len(), "coordinate index out of range");
        ScalarField {
            expr: Arc::new(self.expr.derivative(mu)),
            coords: self.coords.clone(),
        }
    }

    pub fn powi(&self, n: i32) -> ScalarField {
        self.lift(pow((*self.expr).clone(), num(n as f64)))
    }

    pub fn apply(&self, f: Func) -> ScalarField {
        self.lift(call(f, (*self.expr).clone()))
    }

    pub fn scale(&self, c: f64) -> ScalarField {
        self.lift(mul(num(c), (*self.expr).clone()))
    }

    fn lift(&self, expr: Expr) -> ScalarField {
        ScalarField {
            expr: Arc::new(expr),
            coords: self.coords.clone(),
        }
    }

    fn combine(&self, other: &ScalarField, op: fn(Expr, Expr) -> Expr) -> ScalarField {
        assert!(
            Arc::ptr_eq(&self.coords, &other.coords) || self.coords == other.coords,
            "fields live on different charts"
        );
        self.lift(op((*self.expr).clone(), (*other.expr).clone()))
    }
}

impl fmt::Display for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Printer {
            expr: &self.expr,
            names: &self.coords,
        }
        .fmt(f)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $ctor:ident) => {
        impl ops::$trait<&ScalarField> for &ScalarField {
            type Output = ScalarField;
            fn $method(self, rhs: &ScalarField) -> ScalarField {
                self.combine(rhs, $ctor)
            }
        }
        impl ops::$trait<ScalarField> for ScalarField {
            type Output = ScalarField;
            fn $method(self, rhs: ScalarField) -> ScalarField {
                self.combine(&rhs, $ctor)
            }
        }
    };
}

binop!(Add, add, add);
binop!(Sub, sub, sub);
binop!(Mul, mul, mul);
binop!(Div, div, div);

impl ops::Neg for &ScalarField {
    type Output = ScalarField;
    fn neg(self) -> ScalarField {
        self.lift(neg((*self.expr).clone()))
    }
}

impl ops::Neg for ScalarField {
    type Output = ScalarField;
    fn neg(self) -> ScalarField {
        -&self
    }
}

/// Several fields compiled into one instruction list in which structurally
/// equal subexpressions are shared, so each is evaluated once per point.
#[derive(Clone, Debug)]
pub struct Tape {
    ops: Vec<Op>,
    outputs: Vec<usize>,
    fields: Vec<ScalarField>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Op {
    Num(u64),
    Var(usize),
    Neg(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Pow(usize, usize),
    Call(Func, usize),
}

impl Tape {
    /// All fields must share one coordinate list.
    pub fn new(fields: &[ScalarField]) -> Self {
        let mut ops = Vec::new();
        let mut index = std::collections::HashMap::new();
        let outputs = fields
            .iter()
            .map(|f| {
                assert_eq!(f.coords, fields[0].coords, "fields over different coordinates");
                intern(&f.expr, &mut ops, &mut index)
            })
            .collect();
        Tape {
            ops,
            outputs,
            fields: fields.to_vec(),
        }
    }

    /// Number of fields.
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Number of distinct subexpressions.
    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    /// Values of all fields at `p`, in input order. Errors are those of the
    /// first field whose own evaluation fails.
    pub fn eval(&self, p: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut slots: Vec<f64> = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let v = match *op {
                Op::Num(bits) => f64::from_bits(bits),
                Op::Var(k) => p[k],
                Op::Neg(a) => -slots[a],
                Op::Add(a, b) => slots[a] + slots[b],
                Op::Sub(a, b) => slots[a] - slots[b],
                Op::Mul(a, b) => slots[a] * slots[b],
                Op::Div(a, b) => {
                    if slots[b] == 0.0 {
                        return Err(self.diagnose(p));
                    }
                    slots[a] / slots[b]
                }
                Op::Pow(a, b) => real_pow(slots[a], slots[b]),
                Op::Call(f, a) => match apply(f, slots[a]) {
                    Ok(v) => v,
                    Err(_) => return Err(self.diagnose(p)),
                },
            };
            if !v.is_finite() {
                return Err(self.diagnose(p));
            }
            slots.push(v);
        }
        Ok(self.outputs.iter().map(|&o| slots[o]).collect())
    }

    fn diagnose(&self, p: &[f64]) -> EvalError {
        self.fields
            .iter()
            .find_map(|f| f.eval(p).err())
            .unwrap_or(EvalError {
                subexpr: String::from("<shared subexpression>"),
                reason: "non-finite result",
            })
    }
}

fn intern(
    e: &Expr,
    ops: &mut Vec<Op>,
    index: &mut std::collections::HashMap<Op, usize>,
) -> usize {
    let op = match e {
        Expr::Num(v) => Op::Num(v.to_bits()),
        Expr::Var(k) => Op::Var(*k),
        Expr::Neg(a) => Op::Neg(intern(a, ops, index)),
        Expr::Add(a, b) => Op::Add(intern(a, ops, index), intern(b, ops, index)),
        Expr::Sub(a, b) => Op::Sub(intern(a, ops, index), intern(b, ops, index)),
        Expr::Mul(a, b) => Op::Mul(intern(a, ops, index), intern(b, ops, index)),
        Expr::Div(a, b) => Op::Div(intern(a, ops, index), intern(b, ops, index)),
        Expr::Pow(a, b) => Op::Pow(intern(a, ops, index), intern(b, ops, index)),
        Expr::Call(f, a) => Op::Call(*f, intern(a, ops, index)),
    };
    *index.entry(op).or_insert_with(|| {
        ops.push(op);
        ops.len() - 1
    })
}
