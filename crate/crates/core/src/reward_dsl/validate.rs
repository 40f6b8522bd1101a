use super::{ArgKind, Expr, ExprKind, FeatureKind, FeatureSchema, RewardProgram, ValidationError};
use crate::{Error, Result};

/// Checks a parsed program against a feature schema and reports every
/// problem found, not just the first.
pub fn validate(prog: &RewardProgram, schema: &FeatureSchema) -> Result<()> {
    let mut errors = Vec::new();
    if prog.terms.is_empty() {
        errors.push(ValidationError {
            term: String::new(),
            message: "program has no terms".into(),
        });
    }
    for term in &prog.terms {
        let mut push = |message: String| {
            errors.push(ValidationError { term: term.name.clone(), message });
        };
        if !term.weight.is_finite() {
            push(format!("weight {} is not finite", term.weight));
        }
        match type_of(&term.expr, schema, &mut push) {
            Some(ArgKind::Vector) => {
                push("term evaluates to a vector; reduce it with sum, mean, std, frac_below or frac_above".into())
            }
            Some(ArgKind::Scalar) | None => {}
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errors))
    }
}

/// Infers the type of an expression. `None` means an error was already
/// reported below this node.
fn type_of(e: &Expr, schema: &FeatureSchema, push: &mut impl FnMut(String)) -> Option<ArgKind> {
    let at = |msg: String| format!("{msg} (line {}, column {})", e.span.line, e.span.col);
    match &e.kind {
        ExprKind::Num(v) => {
            if v.is_finite() {
                Some(ArgKind::Scalar)
            } else {
                push(at(format!("literal {v} is not finite")));
                None
            }
        }
        ExprKind::Feature(name) => match schema.kind(name) {
            Some(FeatureKind::Scalar) => Some(ArgKind::Scalar),
            Some(FeatureKind::Vector(_)) => Some(ArgKind::Vector),
            None => {
                push(at(format!("unknown feature `{name}`")));
                None
            }
        },
        ExprKind::Neg(inner) => {
            let t = type_of(inner, schema, push)?;
            if t == ArgKind::Vector {
                push(at("unary minus applied to a vector".into()));
                return None;
            }
            Some(ArgKind::Scalar)
        }
        ExprKind::Binary(op, l, r) => {
            let lt = type_of(l, schema, push);
            let rt = type_of(r, schema, push);
            let mut ok = lt.is_some() && rt.is_some();
            if lt == Some(ArgKind::Vector) || rt == Some(ArgKind::Vector) {
                push(at(format!("operator `{}` applied to a vector", op.symbol())));
                ok = false;
            }
            ok.then_some(ArgKind::Scalar)
        }
        ExprKind::Call(func, args) => {
            let sig = func.signature();
            let types: Vec<Option<ArgKind>> = args.iter().map(|a| type_of(a, schema, push)).collect();
            if args.len() != sig.len() {
                push(at(format!(
                    "{} takes {} argument(s), got {}; usage: {}",
                    func.name(),
                    sig.len(),
                    args.len(),
                    func.usage()
                )));
                return None;
            }
            let mut ok = true;
            for (i, (want, got)) in sig.iter().zip(&types).enumerate() {
                match got {
                    None => ok = false,
                    Some(got) if got != want => {
                        let kind = |k: &ArgKind| match k {
                            ArgKind::Scalar => "scalar",
                            ArgKind::Vector => "vector",
                        };
                        push(at(format!(
                            "argument {} of {} must be a {}, got a {}; usage: {}",
                            i + 1,
                            func.name(),
                            kind(want),
                            kind(got),
                            func.usage()
                        )));
                        ok = false;
                    }
                    Some(_) => {}
                }
            }
            ok.then_some(ArgKind::Scalar)
        }
    }
}
