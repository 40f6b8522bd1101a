use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gae::{compute_gae, normalize};
use super::loss::{ppo_loss_and_grad, Batch, LossTerms};
use super::net::PolicyParams;
use super::PPOConfig;
use crate::envstats::TerrainStats;
use crate::reward_dsl::{CompiledReward, RewardProgram};
use crate::seeds;
use crate::sim::{EnvConfig, Policy, StepOutcome, WalkerEnv};
use crate::terrain::TerrainMap;
use crate::{Error, Result};

/// Adam with bias correction; moments are stored in parameter-shaped
/// containers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: PolicyParams,
    v: PolicyParams,
    t: i32,
}

impl Adam {
    pub fn new(params: &PolicyParams, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grad: &PolicyParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let grads = grad.tensors();
        for (((p, m), v), (_, _, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Scales `grad` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub(crate) fn clip_grad_norm(grad: &mut PolicyParams, max_norm: f64) -> f64 {
    let norm = grad.tensors().iter().flat_map(|t| t.2.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grad.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// Mean over environments of the reward summed over the rollout window.
    pub mean_return: f64,
    pub episodes_completed: usize,
    /// Mean unweighted value of each reward term over the rollout.
    pub term_means: Vec<f64>,
    pub loss_total: f64,
    pub loss_clip: f64,
    pub loss_value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub term_names: Vec<String>,
    pub rows: Vec<IterationLog>,
}

impl TrainingLog {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["iteration".to_string(), "mean_return".into(), "episodes_completed".into()];
        h.extend(self.term_names.iter().map(|n| format!("term_{n}")));
        h.extend(["loss_total", "loss_clip", "loss_value", "entropy", "approx_kl", "seconds"].map(String::from));
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.iteration, r.mean_return, r.episodes_completed);
            for v in &r.term_means {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(
                out,
                ",{},{},{},{},{},{}",
                r.loss_total, r.loss_clip, r.loss_value, r.entropy, r.approx_kl, r.seconds
            );
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn first_return(&self) -> Option<f64> {
        self.rows.first().map(|r| r.mean_return)
    }

    pub fn last_return(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mean_return)
    }
}

/// Runs a policy's mean action, carrying the recurrent state across steps.
#[derive(Clone, Debug)]
pub struct PolicyRunner {
    params: PolicyParams,
    hidden: Option<Array2<f64>>,
}

impl PolicyRunner {
    pub fn new(params: PolicyParams) -> Self {
        PolicyRunner { params, hidden: None }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }
}

impl Policy for PolicyRunner {
    fn act(&mut self, obs: &[f64]) -> Vec<f64> {
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row vector");
        let fwd = self.params.forward(&x, self.hidden.as_ref());
        if self.params.cell.is_some() {
            self.hidden = Some(fwd.hidden);
        }
        fwd.mean.row(0).to_vec()
    }

    fn reset(&mut self) {
        self.hidden = None;
    }

    fn input_len(&self) -> Option<usize> {
        Some(self.params.obs_dim())
    }
}

/// Trains a fresh policy for `cfg.iterations` iterations.
pub fn train(
    reward: &RewardProgram,
    map: Arc<TerrainMap>,
    env_cfg: &EnvConfig,
    stats: &TerrainStats,
    cfg: &PPOConfig,
    seed: u64,
) -> Result<(PolicyParams, TrainingLog)> {
    train_with(reward, map, env_cfg, stats, cfg, seed, &mut |_| {})
}

/// Running variance of per-environment discounted returns. Rewards are
/// divided by its standard deviation before GAE so the value loss stays on
/// a fixed scale whatever the reward magnitudes; logged returns stay raw.
struct ReturnScaler {
    gamma: f64,
    running: Vec<f64>,
    count: f64,
    mean: f64,
    m2: f64,
}

impl ReturnScaler {
    fn new(n: usize, gamma: f64) -> Self {
        ReturnScaler { gamma, running: vec![0.0; n], count: 0.0, mean: 0.0, m2: 0.0 }
    }

    /// Folds in one reward per environment and returns the divisor.
    fn update(&mut self, rewards: &[f64], dones: &[bool]) -> f64 {
        for (i, &r) in rewards.iter().enumerate() {
            let g = self.running[i] * self.gamma + r;
            self.count += 1.0;
            let d = g - self.mean;
            self.mean += d / self.count;
            self.m2 += d * (g - self.mean);
            self.running[i] = if dones[i] { 0.0 } else { g };
        }
        (self.m2 / self.count + 1e-8).sqrt()
    }
}

struct Rollout {
    obs: Vec<f64>,
    actions: Vec<f64>,
    log_prob: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    bootstrap: Vec<f64>,
    hidden: Vec<f64>,
}

/// [`train`] with a callback after every iteration.
#[allow(clippy::too_many_arguments)]
pub fn train_with(
    reward: &RewardProgram,
    map: Arc<TerrainMap>,
    env_cfg: &EnvConfig,
    stats: &TerrainStats,
    cfg: &PPOConfig,
    seed: u64,
    progress: &mut dyn FnMut(&IterationLog),
) -> Result<(PolicyParams, TrainingLog)> {
    cfg.validate()?;
    env_cfg.validate()?;
    let schema = Arc::new(env_cfg.feature_schema());
    let compiled = Arc::new(CompiledReward::new(reward, schema)?);
    let obs_dim = env_cfg.observation_len();
    let act_dim = env_cfg.action_len();
    let mut init_rng = seeds::rng(seed, &[0x696e_6974]);
    let mut params = PolicyParams::init(obs_dim, act_dim, &cfg.net, &mut init_rng);
    let mut log = TrainingLog { term_names: compiled.term_names(), rows: Vec::new() };
    if cfg.iterations == 0 {
        return Ok((params, log));
    }

    let env_cfg = Arc::new(env_cfg.clone());
    let n = cfg.num_envs;
    let t_len = cfg.steps_per_rollout;
    let n_terms = compiled.num_terms();
    let hsize = params.hidden_size();
    let mut envs: Vec<WalkerEnv> = (0..n)
        .map(|i| {
            WalkerEnv::new(env_cfg.clone(), map.clone(), compiled.clone(), stats, seeds::derive(seed, &[0x0065_6e76, i as u64]))
        })
        .collect();
    let mut noise_rngs: Vec<ChaCha8Rng> = (0..n).map(|i| seeds::rng(seed, &[0x006e_6f69_7365, i as u64])).collect();
    let mut update_rng = seeds::rng(seed, &[0x7570_6461_7465]);
    let mut adam = Adam::new(&params, cfg.learning_rate);

    let mut obs = Array2::zeros((n, obs_dim));
    for (i, env) in envs.iter_mut().enumerate() {
        obs.row_mut(i).assign(&Array1::from(env.reset()));
    }
    let mut hidden = Array2::<f64>::zeros((n, hsize));
    let mut scaler = ReturnScaler::new(n, cfg.gamma);
    let start = Instant::now();

    for iteration in 1..=cfg.iterations {
        let mut ro = Rollout {
            obs: Vec::with_capacity(n * t_len * obs_dim),
            actions: Vec::with_capacity(n * t_len * act_dim),
            log_prob: Vec::with_capacity(n * t_len),
            values: Vec::with_capacity(n * t_len),
            rewards: Vec::with_capacity(n * t_len),
            dones: Vec::with_capacity(n * t_len),
            bootstrap: vec![0.0; n * t_len],
            hidden: Vec::with_capacity(n * t_len * hsize),
        };
        let mut term_sums = vec![0.0; n_terms];
        let mut episodes = 0usize;
        let mut window_return = 0.0;

        for t in 0..t_len {
            let fwd = params.forward(&obs, (hsize > 0).then_some(&hidden));
            let std = params.log_std.mapv(f64::exp);
            let mut actions = fwd.mean.clone();
            for (i, rng) in noise_rngs.iter_mut().enumerate() {
                for j in 0..act_dim {
                    actions[[i, j]] += std[j] * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let logp = params.log_prob(&fwd.mean, &actions);
            ro.obs.extend(obs.iter());
            ro.actions.extend(actions.iter());
            ro.log_prob.extend(logp.iter());
            ro.values.extend(fwd.value.iter());
            ro.hidden.extend(hidden.iter());

            let outcomes: Vec<(StepOutcome, Option<Vec<f64>>)> = envs
                .par_iter_mut()
                .zip(actions.as_slice().expect("standard layout").par_chunks(act_dim))
                .map(|(env, a)| {
                    let out = env.step(a);
                    let fresh = out.done().then(|| env.reset());
                    (out, fresh)
                })
                .collect();

            let mut truncated_rows = Vec::new();
            if hsize > 0 {
                hidden = fwd.hidden.clone();
            }
            let step_rewards: Vec<f64> = outcomes.iter().map(|(o, _)| o.reward).collect();
            let step_dones: Vec<bool> = outcomes.iter().map(|(o, _)| o.done()).collect();
            let divisor = if cfg.reward_scaling { scaler.update(&step_rewards, &step_dones) } else { 1.0 };
            window_return += step_rewards.iter().sum::<f64>();
            for (i, (out, fresh)) in outcomes.into_iter().enumerate() {
                ro.rewards.push(out.reward / divisor);
                ro.dones.push(out.done());
                for (s, v) in term_sums.iter_mut().zip(&out.per_term) {
                    *s += v;
                }
                match fresh {
                    Some(o) => {
                        episodes += 1;
                        if out.truncated {
                            truncated_rows.push((i, out.obs));
                        }
                        obs.row_mut(i).assign(&Array1::from(o));
                        if hsize > 0 {
                            hidden.row_mut(i).fill(0.0);
                        }
                    }
                    None => obs.row_mut(i).assign(&Array1::from(out.obs)),
                }
            }
            if !truncated_rows.is_empty() {
                let mut x = Array2::zeros((truncated_rows.len(), obs_dim));
                let mut h = Array2::zeros((truncated_rows.len(), hsize));
                for (r, (i, o)) in truncated_rows.iter().enumerate() {
                    x.row_mut(r).assign(&Array1::from(o.clone()));
                    if hsize > 0 {
                        h.row_mut(r).assign(&fwd.hidden.row(*i));
                    }
                }
                let v = params.forward(&x, (hsize > 0).then_some(&h)).value;
                for (r, (i, _)) in truncated_rows.iter().enumerate() {
                    ro.bootstrap[t * n + i] = v[r];
                }
            }
        }
        let last_values = params.forward(&obs, (hsize > 0).then_some(&hidden)).value;

        // Per-environment GAE over the time-major buffers.
        let total = n * t_len;
        let mut advantages = vec![0.0; total];
        let mut returns = vec![0.0; total];
        for e in 0..n {
            let idx: Vec<usize> = (0..t_len).map(|t| t * n + e).collect();
            let rewards: Vec<f64> = idx.iter().map(|&k| ro.rewards[k]).collect();
            let values: Vec<f64> = idx.iter().map(|&k| ro.values[k]).collect();
            let dones: Vec<bool> = idx.iter().map(|&k| ro.dones[k]).collect();
            let next: Vec<f64> = (0..t_len)
                .map(|t| {
                    if dones[t] {
                        ro.bootstrap[idx[t]]
                    } else if t + 1 < t_len {
                        values[t + 1]
                    } else {
                        last_values[e]
                    }
                })
                .collect();
            let (a, r) = compute_gae(&rewards, &values, &next, &dones, cfg.gamma, cfg.lambda);
            for (t, &k) in idx.iter().enumerate() {
                advantages[k] = a[t];
                returns[k] = r[t];
            }
        }
        normalize(&mut advantages);

        let obs_all = Array2::from_shape_vec((total, obs_dim), ro.obs).expect("rollout shape");
        let act_all = Array2::from_shape_vec((total, act_dim), ro.actions).expect("rollout shape");
        let hid_all = Array2::from_shape_vec((total, hsize), ro.hidden).expect("rollout shape");
        let logp_all = Array1::from(ro.log_prob);
        let adv_all = Array1::from(advantages);
        let ret_all = Array1::from(returns);

        let mb = total / cfg.minibatches;
        let coeffs = cfg.coefficients();
        let mut acc = LossTerms::default();
        let mut updates = 0usize;
        let mut order: Vec<usize> = (0..total).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut update_rng);
            for chunk in order.chunks(mb).take(cfg.minibatches) {
                let batch = Batch {
                    obs: obs_all.select(Axis(0), chunk),
                    actions: act_all.select(Axis(0), chunk),
                    old_log_prob: logp_all.select(Axis(0), chunk),
                    advantages: adv_all.select(Axis(0), chunk),
                    returns: ret_all.select(Axis(0), chunk),
                    hidden: (hsize > 0).then(|| hid_all.select(Axis(0), chunk)),
                };
                let (terms, mut grad) = ppo_loss_and_grad(&batch, &params, &coeffs)?;
                clip_grad_norm(&mut grad, cfg.max_grad_norm);
                adam.step(&mut params, &grad);
                params.clamp_log_std();
                if !params.is_finite() {
                    return Err(Error::NonFiniteLoss);
                }
                acc.total += terms.total;
                acc.clip += terms.clip;
                acc.value += terms.value;
                acc.entropy += terms.entropy;
                acc.approx_kl += terms.approx_kl;
                updates += 1;
            }
        }
        let u = updates.max(1) as f64;
        let row = IterationLog {
            iteration,
            mean_return: window_return / n as f64,
            episodes_completed: episodes,
            term_means: term_sums.iter().map(|s| s / total as f64).collect(),
            loss_total: acc.total / u,
            loss_clip: acc.clip / u,
            loss_value: acc.value / u,
            entropy: acc.entropy / u,
            approx_kl: acc.approx_kl / u,
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&row);
        log.rows.push(row);
    }
    Ok((params, log))
}
