use std::sync::Arc;

use super::{validate, BinOp, Expr, ExprKind, FeatureEnv, FeatureSchema, FeatureValue, Func, RewardProgram};
use crate::Result;

pub const CLAMP_LIMIT: f64 = 1e6;
pub const DIV_EPSILON: f64 = 1e-9;

#[inline]
pub(crate) fn clamp(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-CLAMP_LIMIT, CLAMP_LIMIT)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Num(f64),
    Scalar(usize),
    Neg,
    Bin(BinOp),
    Unary(Func),
    Binary(Func),
    Clip,
    Reduce(Func, usize),
    Threshold(Func, usize),
}

#[derive(Clone, Debug)]
struct CompiledTerm {
    name: String,
    weight: f64,
    ops: Vec<Op>,
}

/// A validated program lowered to postfix code with feature slots resolved.
#[derive(Clone, Debug)]
pub struct CompiledReward {
    program: RewardProgram,
    schema: Arc<FeatureSchema>,
    terms: Vec<CompiledTerm>,
    depth: usize,
}

/// Result of evaluating a program on one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub total: f64,
    /// Unweighted term values in program order.
    pub per_term: Vec<(String, f64)>,
}

impl CompiledReward {
    pub fn new(program: &RewardProgram, schema: Arc<FeatureSchema>) -> Result<Self> {
        validate(program, &schema)?;
        let mut terms = Vec::with_capacity(program.terms.len());
        let mut depth = 1;
        for t in &program.terms {
            let mut ops = Vec::new();
            lower(&t.expr, &schema, &mut ops);
            depth = depth.max(stack_depth(&ops));
            terms.push(CompiledTerm { name: t.name.clone(), weight: t.weight, ops });
        }
        Ok(CompiledReward { program: program.clone(), schema, terms, depth })
    }

    pub fn program(&self) -> &RewardProgram {
        &self.program
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name.clone()).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.weight).collect()
    }

    /// Writes unweighted term values into `per_term` and returns the
    /// weighted total.
    pub fn eval_into(&self, env: &FeatureEnv, per_term: &mut [f64]) -> f64 {
        debug_assert_eq!(env.schema().len(), self.schema.len());
        let mut stack = Vec::with_capacity(self.depth);
        let mut total = 0.0;
        for (t, out) in self.terms.iter().zip(per_term.iter_mut()) {
            stack.clear();
            run(&t.ops, env, &mut stack);
            let v = stack.pop().unwrap_or(0.0);
            *out = v;
            total += clamp(t.weight * v);
        }
        clamp(total)
    }

    pub fn evaluate(&self, env: &FeatureEnv) -> Evaluation {
        let mut vals = vec![0.0; self.terms.len()];
        let total = self.eval_into(env, &mut vals);
        Evaluation {
            total,
            per_term: self.terms.iter().map(|t| t.name.clone()).zip(vals).collect(),
        }
    }
}

/// Validates, compiles and evaluates in one call. The environment's schema
/// is used for validation.
pub fn evaluate(prog: &RewardProgram, env: &FeatureEnv) -> Result<Evaluation> {
    let compiled = CompiledReward::new(prog, env.schema().clone())?;
    Ok(compiled.evaluate(env))
}

fn lower(e: &Expr, schema: &FeatureSchema, ops: &mut Vec<Op>) {
    // Validation has already run, so every lookup below succeeds.
    let slot = |name: &str| schema.index_of(name).expect("validated feature");
    match &e.kind {
        ExprKind::Num(v) => ops.push(Op::Num(*v)),
        ExprKind::Feature(n) => ops.push(Op::Scalar(slot(n))),
        ExprKind::Neg(inner) => {
            lower(inner, schema, ops);
            ops.push(Op::Neg);
        }
        ExprKind::Binary(op, l, r) => {
            lower(l, schema, ops);
            lower(r, schema, ops);
            ops.push(Op::Bin(*op));
        }
        ExprKind::Call(f, args) => match f {
            Func::Exp | Func::Abs | Func::Tanh | Func::Square => {
                lower(&args[0], schema, ops);
                ops.push(Op::Unary(*f));
            }
            Func::Min | Func::Max => {
                lower(&args[0], schema, ops);
                lower(&args[1], schema, ops);
                ops.push(Op::Binary(*f));
            }
            Func::Clip => {
                args.iter().for_each(|a| lower(a, schema, ops));
                ops.push(Op::Clip);
            }
            Func::Sum | Func::Mean | Func::Std => {
                let ExprKind::Feature(n) = &args[0].kind else { unreachable!("validated") };
                ops.push(Op::Reduce(*f, slot(n)));
            }
            Func::FracBelow | Func::FracAbove => {
                let ExprKind::Feature(n) = &args[0].kind else { unreachable!("validated") };
                lower(&args[1], schema, ops);
                ops.push(Op::Threshold(*f, slot(n)));
            }
        },
    }
}

fn stack_depth(ops: &[Op]) -> usize {
    let (mut d, mut max) = (0usize, 0usize);
    for op in ops {
        match op {
            Op::Num(_) | Op::Scalar(_) | Op::Reduce(..) => d += 1,
            Op::Bin(_) | Op::Binary(_) => d -= 1,
            Op::Clip => d -= 2,
            Op::Neg | Op::Unary(_) | Op::Threshold(..) => {}
        }
        max = max.max(d);
    }
    max
}

fn scalar(env: &FeatureEnv, slot: usize) -> f64 {
    match env.value_at(slot) {
        FeatureValue::Scalar(x) => clamp(*x),
        FeatureValue::Vector(_) => 0.0,
    }
}

fn vector(env: &FeatureEnv, slot: usize) -> &[f64] {
    match env.value_at(slot) {
        FeatureValue::Vector(v) => v,
        FeatureValue::Scalar(_) => &[],
    }
}

pub(crate) fn apply_bin(op: BinOp, a: f64, b: f64) -> f64 {
    clamp(match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => {
            if b.abs() < DIV_EPSILON {
                0.0
            } else {
                a / b
            }
        }
    })
}

pub(crate) fn apply_unary(f: Func, x: f64) -> f64 {
    clamp(match f {
        Func::Exp => x.exp(),
        Func::Abs => x.abs(),
        Func::Tanh => x.tanh(),
        Func::Square => x * x,
        _ => unreachable!("not a unary function"),
    })
}

pub(crate) fn apply_reduce(f: Func, v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let sum: f64 = v.iter().map(|&x| clamp(x)).sum();
    clamp(match f {
        Func::Sum => sum,
        Func::Mean => sum / n,
        Func::Std => {
            let m = sum / n;
            (v.iter().map(|&x| (clamp(x) - m).powi(2)).sum::<f64>() / n).sqrt()
        }
        _ => unreachable!("not a reduction"),
    })
}

pub(crate) fn apply_threshold(f: Func, v: &[f64], t: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let count = match f {
        Func::FracBelow => v.iter().filter(|&&x| clamp(x) < t).count(),
        Func::FracAbove => v.iter().filter(|&&x| clamp(x) > t).count(),
        _ => unreachable!("not a threshold function"),
    };
    count as f64 / v.len() as f64
}

fn run(ops: &[Op], env: &FeatureEnv, st: &mut Vec<f64>) {
    for op in ops {
        match *op {
            Op::Num(v) => st.push(clamp(v)),
            Op::Scalar(s) => st.push(scalar(env, s)),
            Op::Neg => {
                let x = st.pop().unwrap_or(0.0);
                st.push(clamp(-x));
            }
            Op::Bin(b) => {
                let r = st.pop().unwrap_or(0.0);
                let l = st.pop().unwrap_or(0.0);
                st.push(apply_bin(b, l, r));
            }
            Op::Unary(f) => {
                let x = st.pop().unwrap_or(0.0);
                st.push(apply_unary(f, x));
            }
            Op::Binary(f) => {
                let b = st.pop().unwrap_or(0.0);
                let a = st.pop().unwrap_or(0.0);
                st.push(if f == Func::Min { a.min(b) } else { a.max(b) });
            }
            Op::Clip => {
                let hi = st.pop().unwrap_or(0.0);
                let lo = st.pop().unwrap_or(0.0);
                let x = st.pop().unwrap_or(0.0);
                st.push(x.max(lo).min(hi));
            }
            Op::Reduce(f, s) => st.push(apply_reduce(f, vector(env, s))),
            Op::Threshold(f, s) => {
                let t = st.pop().unwrap_or(0.0);
                st.push(apply_threshold(f, vector(env, s), t));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward_dsl::parse;
    use crate::sensors::{ObservationMode, SensorConfig};

    fn env() -> FeatureEnv {
        let schema = FeatureSchema::walker(ObservationMode::Perceptive, &SensorConfig::desk(), 6);
        FeatureEnv::zeros(Arc::new(schema))
    }

    #[test]
    fn tracking_term_is_one_on_target() {
        let mut e = env();
        e.set("vx", 0.4);
        e.set("vx_cmd", 0.4);
        let p = parse("term track weight 1.0 = exp(-square(vx - vx_cmd));").unwrap();
        let out = evaluate(&p, &e).unwrap();
        assert_eq!(out.per_term, vec![("track".to_string(), 1.0)]);
        assert_eq!(out.total, 1.0);
    }

    #[test]
    fn division_guard() {
        let p = parse("term d weight 1 = 1 / vx; term e weight 1 = 1 / 1e-10;").unwrap();
        let out = evaluate(&p, &env()).unwrap();
        assert_eq!(out.total, 0.0);
    }

    #[test]
    fn clamping_keeps_values_finite() {
        let mut e = env();
        e.set("vx", f64::MAX);
        e.set("vy", f64::NAN);
        let p = parse("term a weight 1e300 = exp(vx) * vx * vx; term b weight 1 = vy / 1e-3;").unwrap();
        let out = evaluate(&p, &e).unwrap();
        assert_eq!(out.per_term[0].1, CLAMP_LIMIT);
        assert_eq!(out.per_term[1].1, 0.0);
        assert!(out.total.is_finite());
    }

    #[test]
    fn vector_functions() {
        let mut e = env();
        let mut scan = vec![0.0; 99];
        scan[..33].iter_mut().for_each(|x| *x = -1.0);
        e.set_vector("height_scan", &scan);
        e.set_vector("foot_contact", &[1.0, 0.0]);
        let p = parse(
            "term a weight 1 = frac_below(height_scan, -0.5);\n\
             term b weight 1 = mean(foot_contact);\n\
             term c weight 1 = std(foot_contact);\n\
             term d weight 1 = sum(height_scan);",
        )
        .unwrap();
        let c = CompiledReward::new(&p, e.schema().clone()).unwrap();
        let out = c.evaluate(&e);
        let v: Vec<f64> = out.per_term.iter().map(|x| x.1).collect();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(&v[1..], &[0.5, 0.5, -33.0]);
    }

    #[test]
    fn clip_min_max() {
        let mut e = env();
        e.set("vx", 2.0);
        let p = parse("term a weight 1 = clip(vx, -1, 1) + min(vx, 0.5) * max(vx, 3);").unwrap();
        assert_eq!(evaluate(&p, &e).unwrap().total, 1.0 + 1.5);
    }
}
