use ndarray::{Array1, Array2, Axis};

use super::net::PolicyParams;
use crate::{Error, Result};

/// One minibatch of rollout data.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub old_log_prob: Array1<f64>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
    /// Recurrent state each sample was collected with.
    pub hidden: Option<Array2<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub clip: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        [self.total, self.clip, self.value, self.entropy].iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoefficients {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

/// Per-sample clipped surrogate `min(r·Â, clip(r, 1−ε, 1+ε)·Â)`.
pub fn clipped_objective(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Loss value only. `total = −clip + c1·value − c2·entropy`, so minimising
/// `total` maximises the clipped objective.
pub fn ppo_loss(batch: &Batch, params: &PolicyParams, c: &LossCoefficients) -> LossTerms {
    evaluate(batch, params, c, None)
}

/// Loss and its gradient with respect to every parameter.
pub fn ppo_loss_and_grad(
    batch: &Batch,
    params: &PolicyParams,
    c: &LossCoefficients,
) -> Result<(LossTerms, PolicyParams)> {
    let mut grad = params.zeros_like();
    let terms = evaluate(batch, params, c, Some(&mut grad));
    if !terms.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((terms, grad))
}

fn evaluate(batch: &Batch, params: &PolicyParams, c: &LossCoefficients, grad: Option<&mut PolicyParams>) -> LossTerms {
    let n = batch.obs.nrows();
    let bn = n.max(1) as f64;
    let fwd = params.forward(&batch.obs, batch.hidden.as_ref());
    let logp = params.log_prob(&fwd.mean, &batch.actions);
    let mut clip_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0usize;
    // d(total)/d(logp) per sample.
    let mut d_logp = Array1::zeros(n);
    for i in 0..n {
        let log_ratio = logp[i] - batch.old_log_prob[i];
        let ratio = log_ratio.exp();
        let adv = batch.advantages[i];
        let unclipped = ratio * adv;
        let bounded = ratio.clamp(1.0 - c.clip_eps, 1.0 + c.clip_eps) * adv;
        clip_sum += unclipped.min(bounded);
        if unclipped <= bounded {
            d_logp[i] = -unclipped / bn;
        } else {
            clipped += 1;
        }
        kl_sum += (ratio - 1.0) - log_ratio;
    }
    let diff = &fwd.value - &batch.returns;
    let value = diff.mapv(|d| d * d).sum() / bn;
    let entropy = params.entropy();
    let clip = clip_sum / bn;
    let total = -clip + c.value_coef * value - c.entropy_coef * entropy;

    if let Some(grad) = grad {
        let inv_var = params.log_std.mapv(|s| (-2.0 * s).exp());
        let z = &batch.actions - &fwd.mean;
        // ∂logp/∂μ = (a − μ)/σ², ∂logp/∂logσ = (a − μ)²/σ² − 1.
        let dl = d_logp.view().insert_axis(Axis(1));
        let d_mean = &(&z * &inv_var) * &dl;
        let d_logstd = (&(&(&z * &z) * &inv_var).mapv(|x| x - 1.0) * &dl).sum_axis(Axis(0));
        grad.log_std += &d_logstd;
        grad.log_std.mapv_inplace(|g| g - c.entropy_coef);
        let d_value = diff.mapv(|d| 2.0 * c.value_coef * d / bn);
        params.backward(&fwd, &d_mean, &d_value, grad);
    }
    LossTerms {
        total,
        clip,
        value,
        entropy,
        approx_kl: kl_sum / bn,
        clip_fraction: clipped as f64 / bn,
    }
}
