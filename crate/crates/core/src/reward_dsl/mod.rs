//! The reward expression language.
//!
//! A program is a list of weighted terms:
//!
//! ```text
//! # comments run to end of line
//! term track weight 1.0 = exp(-square(vx - vx_cmd));
//! term gap   weight -0.5 = frac_below(height_scan, -0.5);
//! ```
//!
//! Expressions combine numeric literals, feature names, `+ - * /`, unary
//! minus and a fixed set of functions. There are no loops, conditionals or
//! user functions. Division is always guarded and every intermediate value
//! is clamped, so evaluation of a validated program cannot fail.

mod eval;
mod parser;
mod schema;
mod validate;

use std::collections::BTreeSet;
use std::fmt;

pub use eval::{evaluate, CompiledReward, Evaluation, CLAMP_LIMIT, DIV_EPSILON};
pub use parser::parse;
pub use schema::{
    FeatureEnv, FeatureKind, FeatureSchema, FeatureValue, EXTEROCEPTIVE_FEATURES, STAT_FEATURES,
};
pub use validate::validate;

pub const GRAMMAR_VERSION: u32 = 1;

/// Location of a syntax node in the source text (1-based line/column).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Span {
    pub line: usize,
    pub col: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("syntax error at line {line}, column {col}: expected {expected}, found {found}")]
pub struct SyntaxError {
    pub line: usize,
    pub col: usize,
    pub expected: String,
    pub found: String,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("term `{term}`: {message}")]
pub struct ValidationError {
    pub term: String,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArgKind {
    Scalar,
    Vector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Func {
    Exp,
    Abs,
    Tanh,
    Clip,
    Square,
    Min,
    Max,
    Sum,
    Mean,
    Std,
    FracBelow,
    FracAbove,
}

impl Func {
    pub const ALL: [Func; 12] = [
        Func::Exp,
        Func::Abs,
        Func::Tanh,
        Func::Clip,
        Func::Square,
        Func::Min,
        Func::Max,
        Func::Sum,
        Func::Mean,
        Func::Std,
        Func::FracBelow,
        Func::FracAbove,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Clip => "clip",
            Func::Square => "square",
            Func::Min => "min",
            Func::Max => "max",
            Func::Sum => "sum",
            Func::Mean => "mean",
            Func::Std => "std",
            Func::FracBelow => "frac_below",
            Func::FracAbove => "frac_above",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn signature(self) -> &'static [ArgKind] {
        use ArgKind::*;
        match self {
            Func::Exp | Func::Abs | Func::Tanh | Func::Square => &[Scalar],
            Func::Clip => &[Scalar, Scalar, Scalar],
            Func::Min | Func::Max => &[Scalar, Scalar],
            Func::Sum | Func::Mean | Func::Std => &[Vector],
            Func::FracBelow | Func::FracAbove => &[Vector, Scalar],
        }
    }

    pub fn usage(self) -> &'static str {
        match self {
            Func::Exp => "exp(x)",
            Func::Abs => "abs(x)",
            Func::Tanh => "tanh(x)",
            Func::Clip => "clip(x, lo, hi)",
            Func::Square => "square(x)",
            Func::Min => "min(a, b)",
            Func::Max => "max(a, b)",
            Func::Sum => "sum(vec)",
            Func::Mean => "mean(vec)",
            Func::Std => "std(vec)",
            Func::FracBelow => "frac_below(vec, threshold)",
            Func::FracAbove => "frac_above(vec, threshold)",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExprKind {
    Num(f64),
    Feature(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Expression node. Equality ignores source spans.
#[derive(Clone, Debug)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl Expr {
    pub fn new(kind: ExprKind) -> Self {
        Expr { kind, span: Span::default() }
    }

    pub fn num(v: f64) -> Self {
        Expr::new(ExprKind::Num(v))
    }

    pub fn feature(name: &str) -> Self {
        Expr::new(ExprKind::Feature(name.to_string()))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(e: Expr) -> Self {
        Expr::new(ExprKind::Neg(Box::new(e)))
    }

    pub fn binary(op: BinOp, l: Expr, r: Expr) -> Self {
        Expr::new(ExprKind::Binary(op, Box::new(l), Box::new(r)))
    }

    pub fn call(f: Func, args: Vec<Expr>) -> Self {
        Expr::new(ExprKind::Call(f, args))
    }

    /// Visits every node, parents before children.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match &self.kind {
            ExprKind::Num(_) | ExprKind::Feature(_) => {}
            ExprKind::Neg(e) => e.walk(f),
            ExprKind::Binary(_, l, r) => {
                l.walk(f);
                r.walk(f);
            }
            ExprKind::Call(_, args) => args.iter().for_each(|a| a.walk(f)),
        }
    }

    pub fn features(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.walk(&mut |e| {
            if let ExprKind::Feature(n) = &e.kind {
                out.insert(n.as_str());
            }
        });
        out
    }

    pub fn node_count(&self) -> usize {
        let mut n = 0;
        self.walk(&mut |_| n += 1);
        n
    }

    fn precedence(&self) -> u8 {
        match &self.kind {
            ExprKind::Binary(op, ..) => op.precedence(),
            ExprKind::Neg(_) => 3,
            ExprKind::Num(v) if v.is_sign_negative() => 3,
            _ => 4,
        }
    }
}

pub(crate) fn format_number(v: f64) -> String {
    // Display prints the shortest representation that parses back exactly.
    format!("{v}")
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ExprKind::Num(v) => f.write_str(&format_number(*v)),
            ExprKind::Feature(n) => f.write_str(n),
            ExprKind::Neg(e) => {
                if matches!(e.kind, ExprKind::Num(_)) || e.precedence() < 3 {
                    write!(f, "-({e})")
                } else {
                    write!(f, "-{e}")
                }
            }
            ExprKind::Binary(op, l, r) => {
                let p = op.precedence();
                if l.precedence() < p {
                    write!(f, "({l})")?;
                } else {
                    write!(f, "{l}")?;
                }
                write!(f, " {} ", op.symbol())?;
                if r.precedence() <= p {
                    write!(f, "({r})")
                } else {
                    write!(f, "{r}")
                }
            }
            ExprKind::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Term {
    pub name: String,
    pub weight: f64,
    pub expr: Expr,
    pub span: Span,
}

impl PartialEq for Term {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.weight == other.weight && self.expr == other.expr
    }
}

impl Term {
    pub fn new(name: impl Into<String>, weight: f64, expr: Expr) -> Self {
        Term { name: name.into(), weight, expr, span: Span::default() }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "term {} weight {} = {};", self.name, format_number(self.weight), self.expr)
    }
}

/// A parsed reward function. Equality is structural: it compares the terms
/// and grammar version, not the original source text.
#[derive(Clone, Debug)]
pub struct RewardProgram {
    pub terms: Vec<Term>,
    pub source_text: String,
    pub version: u32,
}

impl PartialEq for RewardProgram {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version && self.terms == other.terms
    }
}

impl RewardProgram {
    /// Builds a program from terms; the source text is the canonical
    /// rendering.
    pub fn from_terms(terms: Vec<Term>) -> Self {
        let mut p = RewardProgram { terms, source_text: String::new(), version: GRAMMAR_VERSION };
        p.source_text = p.to_source();
        p
    }

    pub fn parse(text: &str) -> crate::Result<Self> {
        parse(text)
    }

    /// Canonical text, one term per line.
    pub fn to_source(&self) -> String {
        let mut out = String::new();
        for t in &self.terms {
            out.push_str(&t.to_string());
            out.push('\n');
        }
        out
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name.clone()).collect()
    }

    pub fn term(&self, name: &str) -> Option<&Term> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn features(&self) -> BTreeSet<&str> {
        self.terms.iter().flat_map(|t| t.expr.features()).collect()
    }

    /// Number of terms that read at least one of `names`.
    pub fn terms_referencing(&self, names: &[&str]) -> usize {
        self.terms
            .iter()
            .filter(|t| t.expr.features().iter().any(|f| names.contains(f)))
            .count()
    }

    pub fn scaled_weights(&self, factor: f64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| Term { weight: t.weight * factor, ..t.clone() })
            .collect();
        RewardProgram::from_terms(terms)
    }
}

impl fmt::Display for RewardProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_source())
    }
}

/// Grammar summary embedded in synthesis prompts.
pub fn grammar_text() -> String {
    let mut s = String::from(
        "program  := term*\n\
         term     := 'term' NAME 'weight' NUMBER '=' expr ';'\n\
         expr     := expr ('+' | '-') expr | expr ('*' | '/') expr | '-' expr\n\
         \x20         | NUMBER | FEATURE | FUNC '(' expr (',' expr)* ')' | '(' expr ')'\n\
         comments start with '#' and run to the end of the line.\n\
         Arithmetic operates on scalars only; vector features may only be passed to\n\
         vector functions. Division by a value smaller than 1e-9 in magnitude yields 0\n\
         and every intermediate value is clamped to [-1e6, 1e6].\n\
         Functions:\n",
    );
    for f in Func::ALL {
        s.push_str("  ");
        s.push_str(f.usage());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_keeps_structure() {
        let e = Expr::binary(
            BinOp::Sub,
            Expr::feature("a"),
            Expr::binary(BinOp::Sub, Expr::feature("b"), Expr::num(-2.0)),
        );
        assert_eq!(e.to_string(), "a - (b - -2)");
        assert_eq!(Expr::neg(Expr::num(3.0)).to_string(), "-(3)");
        assert_eq!(Expr::neg(Expr::neg(Expr::feature("x"))).to_string(), "--x");
    }

    #[test]
    fn function_table_is_consistent() {
        for f in Func::ALL {
            assert_eq!(Func::from_name(f.name()), Some(f));
            assert!(f.usage().starts_with(f.name()));
        }
        assert_eq!(Func::from_name("foo"), None);
    }
}
