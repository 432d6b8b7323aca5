//! Proximal policy optimization with a clipped ratio objective, GAE and an
//! entropy bonus over a categorical action head.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::networks::PolicyValueNet;
use crate::error::{Error, Result};
use crate::fusion::EncodedObservation;
use crate::nncore::{log_softmax, softmax, AdamConfig, ParameterSet, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub rollout_length: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub value_coeff: f64,
    pub entropy_coeff: f64,
    pub lr: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            rollout_length: 256,
            epochs: 10,
            minibatch: 32,
            value_coeff: 0.5,
            entropy_coeff: 0.01,
            lr: 1e-3,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(0.0..=1.0).contains(&self.gamma) {
            return err("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return err("lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return err("clip must be positive");
        }
        if self.rollout_length == 0 || self.epochs == 0 || self.minibatch == 0 {
            return err("rollout_length, epochs and minibatch must be positive");
        }
        if !(self.lr > 0.0) {
            return err("lr must be positive");
        }
        if self.value_coeff < 0.0 || self.entropy_coeff < 0.0 {
            return err("loss coefficients must be non-negative");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

/// On-policy experience as parallel arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub states: Vec<EncodedObservation>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub old_log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, state: EncodedObservation, action: usize, log_prob: f64, value: f64) {
        self.states.push(state);
        self.actions.push(action);
        self.old_log_probs.push(log_prob);
        self.values.push(value);
    }

    /// Records the outcome of the most recent `push`.
    pub fn record(&mut self, reward: f64, done: bool) {
        self.rewards.push(reward);
        self.dones.push(done);
    }

    pub fn clear(&mut self) {
        *self = RolloutBatch::default();
    }

    /// Fills advantages and returns.
    pub fn finish(&mut self, gamma: f64, lambda: f64, bootstrap_value: f64) -> Result<()> {
        let (adv, ret) = compute_gae(&self.rewards, &self.values, &self.dones, gamma, lambda, bootstrap_value)?;
        self.advantages = adv;
        self.returns = ret;
        self.check()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.actions.len();
        let lens = [
            self.states.len(),
            self.rewards.len(),
            self.dones.len(),
            self.old_log_probs.len(),
            self.values.len(),
            self.advantages.len(),
            self.returns.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Shape(format!("rollout arrays of unequal length: {n} actions, {lens:?}")));
        }
        if let Some(a) = self.advantages.iter().find(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("advantage {a}")));
        }
        Ok(())
    }
}

/// Generalized advantage estimates and returns (`advantages + values`).
/// `bootstrap_value` stands in for V(s_T) when the last step is not terminal.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
    bootstrap_value: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Shape(format!(
            "gae: {n} rewards, {} values, {} dones",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts to mean 0 and scales to population std 1. A constant vector is
/// only centred.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
    adv.iter_mut().for_each(|a| *a = (*a - mean) * scale);
}

/// Mean loss components over one minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PpoLossTerms {
    /// Clipped surrogate, negated (a quantity to minimize).
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Loss and its gradients with respect to logits `[b, k]` and values `[b]`.
pub fn ppo_loss(
    logits: &Tensor,
    values: &[f64],
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    config: &PpoConfig,
) -> Result<(PpoLossTerms, Tensor, Vec<f64>)> {
    let (b, k) = logits.dims2()?;
    for (what, len) in [
        ("values", values.len()),
        ("actions", actions.len()),
        ("old_log_probs", old_log_probs.len()),
        ("advantages", advantages.len()),
        ("returns", returns.len()),
    ] {
        if len != b {
            return Err(Error::Shape(format!("ppo_loss: {len} {what} for batch {b}")));
        }
    }
    let probs = softmax(logits)?;
    let logp = log_softmax(logits)?;
    let bf = b as f64;
    let mut grad = Tensor::zeros(vec![b, k]);
    let mut terms = PpoLossTerms::default();
    for i in 0..b {
        let p = &probs.data()[i * k..(i + 1) * k];
        let lp = &logp.data()[i * k..(i + 1) * k];
        let a = actions[i];
        if a >= k {
            return Err(Error::InvalidInput(format!("action {a} out of range for {k} actions")));
        }
        let adv = advantages[i];
        let ratio = (lp[a] - old_log_probs[i]).exp();
        let clipped = ratio.clamp(1.0 - config.clip, 1.0 + config.clip);
        let unclipped_obj = ratio * adv;
        let clipped_obj = clipped * adv;
        terms.policy_loss -= unclipped_obj.min(clipped_obj) / bf;
        let entropy: f64 = -p.iter().zip(lp).map(|(pj, lj)| pj * lj).sum::<f64>();
        terms.entropy += entropy / bf;

        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        // the min picks the unclipped branch: gradient flows through the ratio
        if unclipped_obj <= clipped_obj {
            let coeff = -unclipped_obj / bf;
            for (j, gj) in g.iter_mut().enumerate() {
                let onehot = if j == a { 1.0 } else { 0.0 };
                *gj += coeff * (onehot - p[j]);
            }
        }
        for (j, gj) in g.iter_mut().enumerate() {
            *gj += config.entropy_coeff / bf * p[j] * (lp[j] + entropy);
        }
    }
    let mut grad_values = vec![0.0; b];
    for i in 0..b {
        let e = values[i] - returns[i];
        terms.value_loss += e * e / bf;
        grad_values[i] = config.value_coeff * 2.0 * e / bf;
    }
    terms.total = terms.policy_loss + config.value_coeff * terms.value_loss - config.entropy_coeff * terms.entropy;
    Ok((terms, grad, grad_values))
}

/// Epochs of shuffled minibatch Adam steps over a finished batch. `adam_step`
/// is incremented once per minibatch. Returns the mean of each loss
/// component over all minibatches.
pub fn ppo_update<R: Rng + ?Sized>(
    net: &PolicyValueNet,
    params: &mut ParameterSet,
    batch: &RolloutBatch,
    config: &PpoConfig,
    adam_step: &mut u64,
    rng: &mut R,
) -> Result<PpoLossTerms> {
    batch.check()?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty rollout batch".into()));
    }
    let mut advantages = batch.advantages.clone();
    if config.normalize_advantages {
        normalize_advantages(&mut advantages);
    }
    let adam = config.adam();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut sum = PpoLossTerms::default();
    let mut count = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch) {
            let states: Vec<&EncodedObservation> = chunk.iter().map(|&i| &batch.states[i]).collect();
            let pick = |v: &[f64]| chunk.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            let actions: Vec<usize> = chunk.iter().map(|&i| batch.actions[i]).collect();
            let (logits, values, cache) = net.forward(params, &states)?;
            let (terms, grad_logits, grad_values) = ppo_loss(
                &logits,
                &values,
                &actions,
                &pick(&batch.old_log_probs),
                &pick(&advantages),
                &pick(&batch.returns),
                config,
            )?;
            if !terms.total.is_finite() {
                return Err(Error::NonFinite(format!("ppo loss {} at update {}", terms.total, *adam_step + 1)));
            }
            params.zero_grad();
            net.backward(params, &cache, &grad_logits, &grad_values)?;
            if !params.grads_finite() {
                return Err(Error::NonFinite(format!("ppo gradient at update {}", *adam_step + 1)));
            }
            *adam_step += 1;
            params.adam_update(&adam, *adam_step);
            sum.policy_loss += terms.policy_loss;
            sum.value_loss += terms.value_loss;
            sum.entropy += terms.entropy;
            sum.total += terms.total;
            count += 1;
        }
    }
    let c = count as f64;
    Ok(PpoLossTerms {
        policy_loss: sum.policy_loss / c,
        value_loss: sum.value_loss / c,
        entropy: sum.entropy / c,
        total: sum.total / c,
    })
}

/// Samples from softmax(`logits`) by inverse CDF with one uniform draw.
/// Returns the action and its log-probability.
pub fn sample_categorical<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> (usize, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = logits.len() - 1;
    for (j, l) in logits.iter().enumerate() {
        acc += (l - lse).exp();
        if u < acc {
            chosen = j;
            break;
        }
    }
    (chosen, logits[chosen] - lse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gae_hand_cases() {
        let (adv, ret) = compute_gae(&[1.0, 1.0], &[0.0, 0.0], &[false, true], 1.0, 1.0, 0.0).unwrap();
        assert_eq!(adv, vec![2.0, 1.0]);
        assert_eq!(ret, vec![2.0, 1.0]);

        let rewards = [0.5, -1.0, 2.0];
        let values = [0.3, 0.1, -0.4];
        let dones = [false, false, false];
        let (adv, _) = compute_gae(&rewards, &values, &dones, 0.9, 0.0, 0.7).unwrap();
        let next = [0.1, -0.4, 0.7];
        for t in 0..3 {
            assert_eq!(adv[t], rewards[t] + 0.9 * next[t] - values[t]);
        }

        let (adv, _) = compute_gae(&[0.0; 4], &[0.0; 4], &[false, false, false, true], 0.99, 0.95, 5.0).unwrap();
        assert_eq!(adv, vec![0.0; 4]);
        assert!(compute_gae(&[0.0; 2], &[0.0], &[true; 2], 0.9, 0.9, 0.0).is_err());
    }

    #[test]
    fn done_cuts_bootstrap() {
        // an episode boundary in the middle: the first episode ignores what follows
        let (adv, _) = compute_gae(&[1.0, 0.0, 3.0], &[0.0, 0.0, 0.0], &[false, true, false], 1.0, 1.0, 10.0).unwrap();
        assert_eq!(adv, vec![1.0, 0.0, 13.0]);
    }

    #[test]
    fn normalization_moments() {
        let mut a = vec![3.0, -1.0, 4.0, 1.0, 5.0, 9.0];
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-12 && (std - 1.0).abs() < 1e-12);
        let mut c = vec![2.0; 3];
        normalize_advantages(&mut c);
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn unit_ratio_gives_negative_mean_advantage() {
        let logits = Tensor::new(vec![3, 2], vec![0.2, -0.1, 1.0, 0.0, -0.5, 0.5]).unwrap();
        let logp = log_softmax(&logits).unwrap();
        let actions = [0, 1, 1];
        let old: Vec<f64> = actions.iter().enumerate().map(|(i, &a)| logp.data()[i * 2 + a]).collect();
        let adv = [0.5, -1.0, 2.0];
        let (terms, _, _) = ppo_loss(&logits, &[0.0; 3], &actions, &old, &adv, &[0.0; 3], &PpoConfig::default()).unwrap();
        assert!((terms.policy_loss + (0.5 - 1.0 + 2.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_policy_entropy_is_ln_k() {
        let logits = Tensor::row(vec![0.3; 5]);
        let (terms, _, _) = ppo_loss(&logits, &[0.0], &[2], &[-(5f64.ln())], &[1.0], &[0.0], &PpoConfig::default()).unwrap();
        assert!((terms.entropy - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn clipped_branch_caps_positive_advantage() {
        // ratio 1.5 for the chosen action: old log-prob is ln(p/1.5)
        let logits = Tensor::row(vec![0.0, 0.0]);
        let old = (0.5f64 / 1.5).ln();
        let config = PpoConfig {
            entropy_coeff: 0.0,
            ..PpoConfig::default()
        };
        let (terms, grad, _) = ppo_loss(&logits, &[0.0], &[0], &[old], &[2.0], &[0.0], &config).unwrap();
        assert!((terms.policy_loss + 1.2 * 2.0).abs() < 1e-12);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sampling_matches_probabilities() {
        let logits = [0.0, 1f64.ln() + 1.0, 2.0];
        let total: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let (a, lp) = sample_categorical(&logits, &mut rng);
            assert!((lp - (logits[a] - total.ln())).abs() < 1e-12);
            counts[a] += 1;
        }
        for j in 0..3 {
            let p = logits[j].exp() / total;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((counts[j] as f64 - n as f64 * p).abs() < 4.0 * sd);
        }
    }
}
