//! Independent reference implementations and fixtures shared by the
//! integration suites.

#![allow(dead_code, clippy::manual_clamp, clippy::needless_range_loop)]

pub mod stub;

use std::collections::HashSet;
use std::sync::Arc;

use esds_core::ppo::{Batch, LossCoefficients, NetConfig, PolicyParams};
use esds_core::reward_dsl::{
    BinOp, Expr, ExprKind, FeatureEnv, FeatureKind, FeatureSchema, FeatureValue, Func, RewardProgram, Term,
};
use esds_core::sensors::{ObservationMode, SensorConfig};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- metrics

/// `sqrt((vx - cx)² + (vy - cy)² + (wz - cw)²)` written out longhand.
pub fn tracking_error_oracle(v: [f64; 3], c: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        s += (v[i] - c[i]) * (v[i] - c[i]);
    }
    s.sqrt()
}

/// Exploration score recomputed from the whole position history: distinct
/// grid cells relative to the first position, farthest distance from it,
/// and the displacement over the last `window + 1` positions.
pub fn exploration_oracle(positions: &[(f64, f64)], cell: f64, window: usize) -> f64 {
    let (x0, y0) = positions[0];
    let mut cells = HashSet::new();
    let mut r_max: f64 = 0.0;
    for &(x, y) in positions {
        cells.insert((((x - x0) / cell).floor() as i64, ((y - y0) / cell).floor() as i64));
        r_max = r_max.max(((x - x0).powi(2) + (y - y0).powi(2)).sqrt());
    }
    let first = positions.len().saturating_sub(window + 1);
    let (xa, ya) = positions[first];
    let (xb, yb) = positions[positions.len() - 1];
    let disp = ((xb - xa).powi(2) + (yb - ya).powi(2)).sqrt();
    let bonus = if 10.0 * disp > 5.0 { 5.0 } else { 10.0 * disp };
    0.5 * cells.len() as f64 + 2.0 * r_max + bonus
}

// ---------------------------------------------------------------- reward DSL

pub fn walker_schema() -> Arc<FeatureSchema> {
    Arc::new(FeatureSchema::walker(ObservationMode::Perceptive, &SensorConfig::default(), 6))
}

const LIMIT: f64 = 1e6;

fn lim(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else if x > LIMIT {
        LIMIT
    } else if x < -LIMIT {
        -LIMIT
    } else {
        x
    }
}

fn vec_of<'a>(env: &'a FeatureEnv, e: &Expr) -> &'a [f64] {
    match &e.kind {
        ExprKind::Feature(n) => match env.get(n) {
            Some(FeatureValue::Vector(v)) => v,
            _ => &[],
        },
        _ => &[],
    }
}

/// Recursive evaluator following the documented language semantics:
/// every intermediate clamped to ±1e6 with NaN mapped to 0, guarded
/// division, vector elements clamped before reduction.
pub fn tree_walk(e: &Expr, env: &FeatureEnv) -> f64 {
    match &e.kind {
        ExprKind::Num(v) => lim(*v),
        ExprKind::Feature(n) => match env.get(n) {
            Some(FeatureValue::Scalar(x)) => lim(*x),
            _ => 0.0,
        },
        ExprKind::Neg(a) => lim(-tree_walk(a, env)),
        ExprKind::Binary(op, a, b) => {
            let (a, b) = (tree_walk(a, env), tree_walk(b, env));
            lim(match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div if b.abs() < 1e-9 => 0.0,
                BinOp::Div => a / b,
            })
        }
        ExprKind::Call(f, args) => match f {
            Func::Exp => lim(tree_walk(&args[0], env).exp()),
            Func::Abs => lim(tree_walk(&args[0], env).abs()),
            Func::Tanh => lim(tree_walk(&args[0], env).tanh()),
            Func::Square => {
                let x = tree_walk(&args[0], env);
                lim(x * x)
            }
            Func::Min => {
                let (a, b) = (tree_walk(&args[0], env), tree_walk(&args[1], env));
                if b < a {
                    b
                } else {
                    a
                }
            }
            Func::Max => {
                let (a, b) = (tree_walk(&args[0], env), tree_walk(&args[1], env));
                if b > a {
                    b
                } else {
                    a
                }
            }
            Func::Clip => {
                let x = tree_walk(&args[0], env);
                let lo = tree_walk(&args[1], env);
                let hi = tree_walk(&args[2], env);
                let y = if x < lo { lo } else { x };
                if y > hi {
                    hi
                } else {
                    y
                }
            }
            Func::Sum | Func::Mean | Func::Std => {
                let v: Vec<f64> = vec_of(env, &args[0]).iter().map(|&x| lim(x)).collect();
                if v.is_empty() {
                    return 0.0;
                }
                let n = v.len() as f64;
                let mut sum = 0.0;
                for x in &v {
                    sum += x;
                }
                lim(match f {
                    Func::Sum => sum,
                    Func::Mean => sum / n,
                    _ => {
                        let m = sum / n;
                        let mut ss = 0.0;
                        for x in &v {
                            ss += (x - m) * (x - m);
                        }
                        (ss / n).sqrt()
                    }
                })
            }
            Func::FracBelow | Func::FracAbove => {
                let v = vec_of(env, &args[0]);
                let t = tree_walk(&args[1], env);
                if v.is_empty() {
                    return 0.0;
                }
                let mut hits = 0;
                for &x in v {
                    let x = lim(x);
                    if (*f == Func::FracBelow && x < t) || (*f == Func::FracAbove && x > t) {
                        hits += 1;
                    }
                }
                hits as f64 / v.len() as f64
            }
        },
    }
}

pub fn tree_walk_total(p: &RewardProgram, env: &FeatureEnv) -> f64 {
    let mut total = 0.0;
    for t in &p.terms {
        total += lim(t.weight * tree_walk(&t.expr, env));
    }
    lim(total)
}

fn scalar_names(schema: &FeatureSchema) -> Vec<String> {
    schema.names().iter().filter(|n| schema.kind(n) == Some(FeatureKind::Scalar)).cloned().collect()
}

fn vector_names(schema: &FeatureSchema) -> Vec<String> {
    schema.names().iter().filter(|n| matches!(schema.kind(n), Some(FeatureKind::Vector(_)))).cloned().collect()
}

/// Random well-typed expression of at most `depth` levels.
pub fn random_expr(r: &mut ChaCha8Rng, schema: &FeatureSchema, depth: usize) -> Expr {
    let scalars = scalar_names(schema);
    let vectors = vector_names(schema);
    let choice = if depth == 0 { 0 } else { r.random_range(0..10) };
    let sub = |r: &mut ChaCha8Rng| random_expr(r, schema, depth - 1);
    match choice {
        0 | 1 => {
            if r.random_bool(0.5) {
                Expr::feature(&scalars[r.random_range(0..scalars.len())])
            } else {
                let mag = 10f64.powf(r.random_range(-3.0..3.0));
                Expr::num(if r.random_bool(0.3) { -mag } else { mag })
            }
        }
        2 => Expr::neg(sub(r)),
        3 | 4 => {
            let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div][r.random_range(0..4)];
            let l = sub(r);
            Expr::binary(op, l, sub(r))
        }
        5 => {
            let f = [Func::Exp, Func::Abs, Func::Tanh, Func::Square][r.random_range(0..4)];
            Expr::call(f, vec![sub(r)])
        }
        6 => {
            let f = if r.random_bool(0.5) { Func::Min } else { Func::Max };
            let a = sub(r);
            Expr::call(f, vec![a, sub(r)])
        }
        7 => {
            let a = sub(r);
            let b = sub(r);
            Expr::call(Func::Clip, vec![a, b, sub(r)])
        }
        8 => {
            let f = [Func::Sum, Func::Mean, Func::Std][r.random_range(0..3)];
            Expr::call(f, vec![Expr::feature(&vectors[r.random_range(0..vectors.len())])])
        }
        _ => {
            let f = if r.random_bool(0.5) { Func::FracBelow } else { Func::FracAbove };
            let v = Expr::feature(&vectors[r.random_range(0..vectors.len())]);
            Expr::call(f, vec![v, sub(r)])
        }
    }
}

pub fn random_program(r: &mut ChaCha8Rng, schema: &FeatureSchema, max_depth: usize) -> RewardProgram {
    let n = r.random_range(1..6);
    let terms = (0..n)
        .map(|i| {
            let w = r.random_range(-3.0..3.0);
            let d = r.random_range(0..=max_depth);
            Term::new(format!("t{i}"), w, random_expr(r, schema, d))
        })
        .collect();
    RewardProgram::from_terms(terms)
}

/// Random feature values. With `extreme`, values span many orders of
/// magnitude and include infinities and NaN.
pub fn random_env(r: &mut ChaCha8Rng, schema: &Arc<FeatureSchema>, extreme: bool) -> FeatureEnv {
    let mut env = FeatureEnv::zeros(schema.clone());
    let draw = |r: &mut ChaCha8Rng| -> f64 {
        if extreme {
            match r.random_range(0..10) {
                0 => f64::NAN,
                1 => f64::INFINITY,
                2 => f64::NEG_INFINITY,
                3 => 0.0,
                _ => {
                    let v = 10f64.powf(r.random_range(-300.0..300.0));
                    if r.random_bool(0.5) {
                        -v
                    } else {
                        v
                    }
                }
            }
        } else {
            r.sample::<f64, _>(StandardNormal)
        }
    };
    for name in schema.names().to_vec() {
        match schema.kind(&name) {
            Some(FeatureKind::Scalar) => {
                let v = draw(r);
                env.set(&name, v);
            }
            Some(FeatureKind::Vector(n)) => {
                let v: Vec<f64> = (0..n).map(|_| draw(r)).collect();
                env.set_vector(&name, &v);
            }
            None => unreachable!(),
        }
    }
    env
}

/// Hand-written programs covering every construct of the language.
pub const CORPUS: [&str; 22] = [
    "term track weight 1.0 = exp(-square(vx - vx_cmd) / 0.25);",
    "term yaw weight 0.5 = exp(-square(wz - wz_cmd) / 0.25);",
    "term lin weight 1 = 1 - abs(vx - vx_cmd) - abs(vy - vy_cmd);",
    "# upright\nterm up weight -2.0 = square(roll) + square(pitch);",
    "term h weight -10 = square(base_height - 0.64);",
    "term torso weight -5 = torso_contact;",
    "term smooth weight -0.01 = action_rate;\nterm effort weight -0.001 = action_norm;",
    "term gap weight -1.5 = frac_below(height_scan, -0.3);",
    "term clear weight -1 = frac_above(height_scan, 0.15) + frac_below(lidar, 0.5);",
    "term rough weight -0.2 = std(height_scan) * roughness;",
    "term scan weight 0.1 = mean(height_scan) - min(sum(lidar) / 100, 3);",
    "term gait weight 0.1 = abs(foot_contact_0 - foot_contact_1);",
    "term c weight 1 = clip(vx / (vx_cmd + 0.1), -1, 1);",
    "term m weight 1 = max(0, min(vx, vx_cmd)) * tanh(2 * vx_cmd);",
    "term nested weight 0.3 = exp(-(square(vx - vx_cmd) + square(vy - vy_cmd) + 0.5 * square(wz - wz_cmd)));",
    "term neg weight -1.0e-2 = -(-(vz)) * --vz;",
    "term stats weight 1 = gap_ratio + obstacle_density - max_drop * mean_abs_slope;",
    "term rates weight -0.05 = square(roll_rate) + square(pitch_rate) + 0.01 * joint_vel_norm;",
    "term contacts weight 0.2 = sum(foot_contact) / 2 - mean(action) + std(prev_action);",
    "term a weight 1 = 1;\nterm b weight 2 = 2;\nterm c weight 3 = (1 + 2) * 3 - 4 / 5;",
    "term sci weight 2.5e-3 = 1e-3 * vx + 3.25E2 * 0;",
    "term guard weight -1 = abs(roll) / (abs(pitch) * 0) + vx / 0.0;",
];

// ---------------------------------------------------------------- PPO

/// GAE by explicit double sum: `Â_t = Σ_{l ≥ 0} (γλ)^l δ_{t+l}`, stopping
/// after the first step whose `done` flag is set.
pub fn gae_double_loop(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    for t in 0..n {
        let mut acc = 0.0;
        let mut coef = 1.0;
        for l in t..n {
            let delta = rewards[l] + gamma * next_values[l] - values[l];
            acc += coef * delta;
            if dones[l] {
                break;
            }
            coef *= gamma * lambda;
        }
        adv[t] = acc;
    }
    adv
}

pub fn small_net(obs: usize, act: usize, recurrent: usize, seed: u64) -> PolicyParams {
    let cfg = NetConfig { hidden: vec![8, 6], recurrent, init_log_std: -0.3 };
    let mut p = PolicyParams::init(obs, act, &cfg, &mut rng(seed));
    // Non-trivial heads and biases so every parameter has a nonzero gradient.
    let mut r = rng(seed ^ 0xabc);
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            *x += 0.2 * r.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

pub fn random_batch(p: &PolicyParams, n: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let (od, ad) = (p.obs_dim(), p.act_dim());
    let obs = Array2::from_shape_fn((n, od), |_| r.sample::<f64, _>(StandardNormal));
    let actions = Array2::from_shape_fn((n, ad), |_| r.sample::<f64, _>(StandardNormal) * 0.5);
    let fwd = p.forward(&obs, None);
    // Old log-probs near the current ones so some samples clip and some do not.
    let logp = p.log_prob(&fwd.mean, &actions);
    let old = Array1::from_shape_fn(n, |i| logp[i] + r.random_range(-0.4..0.4));
    let advantages = Array1::from_shape_fn(n, |_| r.sample::<f64, _>(StandardNormal));
    let returns = Array1::from_shape_fn(n, |_| r.sample::<f64, _>(StandardNormal));
    let hidden = (p.hidden_size() > 0).then(|| Array2::from_shape_fn((n, p.hidden_size()), |_| r.random_range(-0.5..0.5)));
    Batch { obs, actions, old_log_prob: old, advantages, returns, hidden }
}

pub const COEF: LossCoefficients = LossCoefficients { clip_eps: 0.2, value_coef: 0.5, entropy_coef: 0.01 };

/// Central differences of `loss` over every parameter, flattened in
/// `tensors()` order.
pub fn finite_difference(p: &PolicyParams, h: f64, loss: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    let shapes: Vec<usize> = p.tensors().iter().map(|t| t.2.len()).collect();
    for (ti, len) in shapes.into_iter().enumerate() {
        for i in 0..len {
            let mut plus = p.clone();
            plus.tensors_mut()[ti][i] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[ti][i] -= h;
            out.push((loss(&plus) - loss(&minus)) / (2.0 * h));
        }
    }
    out
}

pub fn flatten(p: &PolicyParams) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.2.iter().copied()).collect()
}
