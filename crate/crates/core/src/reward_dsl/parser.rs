use std::collections::HashSet;

use super::{BinOp, Expr, ExprKind, Func, RewardProgram, Span, SyntaxError, Term, GRAMMAR_VERSION};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Sym(char),
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Num(v) => format!("number {v}"),
            Tok::Sym(c) => format!("`{c}`"),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    span: Span,
}

fn lex(src: &str) -> std::result::Result<Vec<Token>, SyntaxError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let (mut i, mut line, mut line_start) = (0usize, 1usize, 0usize);
    while i < bytes.len() {
        let c = bytes[i] as char;
        let col = i - line_start + 1;
        if c == '\n' {
            i += 1;
            line += 1;
            line_start = i;
            continue;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == '#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let tok = if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            Tok::Ident(src[start..i].to_string())
        } else if c.is_ascii_digit() || (c == '.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            match text.parse::<f64>() {
                Ok(v) => Tok::Num(v),
                Err(_) => {
                    return Err(SyntaxError {
                        line,
                        col,
                        expected: "number".into(),
                        found: format!("`{text}`"),
                    })
                }
            }
        } else if "+-*/(),;=".contains(c) {
            i += 1;
            Tok::Sym(c)
        } else {
            let ch = src[i..].chars().next().unwrap_or(c);
            return Err(SyntaxError {
                line,
                col,
                expected: "token".into(),
                found: format!("`{ch}`"),
            });
        };
        out.push(Token { tok, span: Span { line, col, start, end: i } });
    }
    let col = bytes.len() - line_start + 1;
    out.push(Token {
        tok: Tok::Eof,
        span: Span { line, col, start: bytes.len(), end: bytes.len() },
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].tok
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &str) -> Error {
        let t = self.peek();
        Error::Syntax(SyntaxError {
            line: t.span.line,
            col: t.span.col,
            expected: expected.into(),
            found: t.tok.describe(),
        })
    }

    fn expect_sym(&mut self, c: char) -> Result<Token> {
        if self.peek().tok == Tok::Sym(c) {
            Ok(self.bump())
        } else {
            Err(self.error(&format!("`{c}`")))
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<Token> {
        match &self.peek().tok {
            Tok::Ident(s) if s == kw => Ok(self.bump()),
            _ => Err(self.error(&format!("`{kw}`"))),
        }
    }

    fn program(&mut self) -> Result<Vec<Term>> {
        let mut terms = Vec::new();
        let mut names = HashSet::new();
        while self.peek().tok != Tok::Eof {
            let start = self.expect_keyword("term")?.span;
            let name = match &self.peek().tok {
                Tok::Ident(s) => s.clone(),
                _ => return Err(self.error("term name")),
            };
            if !names.insert(name.clone()) {
                return Err(self.error("a term name not used before"));
            }
            self.bump();
            self.expect_keyword("weight")?;
            let weight = self.signed_number()?;
            self.expect_sym('=')?;
            let expr = self.expr(0)?;
            let end = self.expect_sym(';')?.span;
            let span = Span { end: end.end, ..start };
            terms.push(Term { name, weight, expr, span });
        }
        Ok(terms)
    }

    fn signed_number(&mut self) -> Result<f64> {
        let neg = if self.peek().tok == Tok::Sym('-') {
            self.bump();
            true
        } else {
            false
        };
        match self.peek().tok {
            Tok::Num(v) => {
                self.bump();
                Ok(if neg { -v } else { v })
            }
            _ => Err(self.error("number")),
        }
    }

    /// Precedence climbing; all binary operators are left associative.
    fn expr(&mut self, min_prec: u8) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Sym('+') => BinOp::Add,
                Tok::Sym('-') => BinOp::Sub,
                Tok::Sym('*') => BinOp::Mul,
                Tok::Sym('/') => BinOp::Div,
                _ => break,
            };
            let prec = op.precedence();
            if prec < min_prec.max(1) {
                break;
            }
            self.bump();
            let rhs = self.expr(prec + 1)?;
            let span = Span { end: rhs.span.end, ..lhs.span };
            lhs = Expr { kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), span };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek().tok == Tok::Sym('-') {
            let minus = self.bump().span;
            if let Tok::Num(v) = self.peek().tok {
                let t = self.bump();
                return Ok(Expr {
                    kind: ExprKind::Num(-v),
                    span: Span { end: t.span.end, ..minus },
                });
            }
            let inner = self.unary()?;
            let span = Span { end: inner.span.end, ..minus };
            return Ok(Expr { kind: ExprKind::Neg(Box::new(inner)), span });
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr { kind: ExprKind::Num(v), span: t.span })
            }
            Tok::Sym('(') => {
                self.bump();
                let e = self.expr(0)?;
                self.expect_sym(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if *self.peek_at(1) == Tok::Sym('(') {
                    let Some(func) = Func::from_name(&name) else {
                        return Err(Error::UnknownFunction {
                            name,
                            line: t.span.line,
                            col: t.span.col,
                        });
                    };
                    self.bump();
                    self.bump();
                    let mut args = Vec::new();
                    if self.peek().tok != Tok::Sym(')') {
                        loop {
                            args.push(self.expr(0)?);
                            if self.peek().tok == Tok::Sym(',') {
                                self.bump();
                            } else {
                                break;
                            }
                        }
                    }
                    let close = self.expect_sym(')')?;
                    let span = Span { end: close.span.end, ..t.span };
                    Ok(Expr { kind: ExprKind::Call(func, args), span })
                } else {
                    self.bump();
                    Ok(Expr { kind: ExprKind::Feature(name), span: t.span })
                }
            }
            _ => Err(self.error("expression")),
        }
    }
}

/// Parses reward program text. Only syntax is checked here; feature names
/// and argument types are checked by [`super::validate`].
pub fn parse(text: &str) -> Result<RewardProgram> {
    let toks = lex(text)?;
    let mut p = Parser { toks, pos: 0 };
    let terms = p.program()?;
    Ok(RewardProgram { terms, source_text: text.to_string(), version: GRAMMAR_VERSION })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expr_of(src: &str) -> Expr {
        let p = parse(&format!("term t weight 1 = {src};")).unwrap();
        p.terms[0].expr.clone()
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(expr_of("a - b - c").to_string(), "a - b - c");
        assert_eq!(
            expr_of("a - b - c"),
            Expr::binary(
                BinOp::Sub,
                Expr::binary(BinOp::Sub, Expr::feature("a"), Expr::feature("b")),
                Expr::feature("c")
            )
        );
        assert_eq!(
            expr_of("a + b * c"),
            Expr::binary(
                BinOp::Add,
                Expr::feature("a"),
                Expr::binary(BinOp::Mul, Expr::feature("b"), Expr::feature("c"))
            )
        );
    }

    #[test]
    fn negative_literals_fold() {
        assert_eq!(expr_of("-2.5"), Expr::num(-2.5));
        assert_eq!(expr_of("-(2.5)"), Expr::neg(Expr::num(2.5)));
        assert_eq!(expr_of("x - -1"), Expr::binary(BinOp::Sub, Expr::feature("x"), Expr::num(-1.0)));
    }

    #[test]
    fn comments_and_whitespace() {
        let p = parse("# header\nterm a weight -0.5 = vx; # trailing\n\n  term b weight 2e-1=abs(vy);").unwrap();
        assert_eq!(p.terms.len(), 2);
        assert_eq!(p.terms[0].weight, -0.5);
        assert_eq!(p.terms[1].weight, 0.2);
        assert_eq!(p.terms[1].span.line, 4);
    }

    #[test]
    fn syntax_error_position() {
        let Err(Error::Syntax(e)) = parse("term a weight 1 = vx +;\n") else {
            panic!("expected syntax error")
        };
        assert_eq!((e.line, e.col), (1, 23));
        assert_eq!(e.found, "`;`");
        let Err(Error::Syntax(e)) = parse("term a weight 1 = vx;\nterm b weight 1 = (vy;") else {
            panic!("expected syntax error")
        };
        assert_eq!(e.line, 2);
        assert!(e.expected.contains(')'));
    }

    #[test]
    fn unknown_function_reported() {
        match parse("term a weight 1 = foo(vx);") {
            Err(Error::UnknownFunction { name, line, col }) => {
                assert_eq!(name, "foo");
                assert_eq!((line, col), (1, 19));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_terms_rejected() {
        assert!(matches!(
            parse("term a weight 1 = vx; term a weight 2 = vy;"),
            Err(Error::Syntax(_))
        ));
    }

    #[test]
    fn empty_program_parses() {
        assert!(parse("  # nothing\n").unwrap().terms.is_empty());
    }
}
