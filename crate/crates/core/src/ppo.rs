//! Proximal policy optimization: GAE, the clipped surrogate and the
//! minibatch update over a batch of complete episodes.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{adam_step, AdamConfig, CategoricalDist, Network};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub epochs_per_batch: usize,
    pub episodes_per_batch: usize,
    pub total_episodes: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub minibatch_size: usize,
    pub advantage_normalization: bool,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Hidden layer widths shared by the policy and value networks.
    pub hidden_sizes: Vec<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.999,
            lambda: 0.95,
            clip_eps: 0.1,
            epochs_per_batch: 4,
            episodes_per_batch: 32,
            total_episodes: 2000,
            value_coef: 0.5,
            entropy_coef: 0.01,
            minibatch_size: 256,
            advantage_normalization: true,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            hidden_sizes: vec![64, 64],
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("ppo.gamma", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("ppo.lambda", "must lie in [0, 1]"));
        }
        if !(self.clip_eps > 0.0) {
            return Err(Error::config("ppo.clip_eps", "must be positive"));
        }
        let counts = [
            ("ppo.epochs_per_batch", self.epochs_per_batch),
            ("ppo.episodes_per_batch", self.episodes_per_batch),
            ("ppo.total_episodes", self.total_episodes),
            ("ppo.minibatch_size", self.minibatch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        let non_negative = [
            ("ppo.value_coef", self.value_coef),
            ("ppo.entropy_coef", self.entropy_coef),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("ppo.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::config("ppo.adam_beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("ppo.adam_beta2", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("ppo.adam_eps", "must be positive"));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::config(
                "ppo.hidden_sizes",
                "must list at least one positive width",
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One episode's rollout data, in parallel arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    /// False when the episode was cut off by the step cap or a solver failure.
    pub terminal: bool,
    pub score: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, observation: Vec<f64>, action: usize, log_prob: f64, value: f64, reward: f64) {
        self.observations.push(observation);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.values.push(value);
        self.rewards.push(reward);
    }

    fn check(&self) -> Result<()> {
        let n = self.rewards.len();
        let lens = [
            self.observations.len(),
            self.actions.len(),
            self.log_probs.len(),
            self.values.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Usage("trajectory arrays differ in length".into()));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numeric("non-finite reward in trajectory".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Generalized advantage estimates by backward recursion over TD residuals.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    terminal_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<AdvantageSet> {
    if rewards.len() != values.len() {
        return Err(Error::Usage(format!(
            "{} rewards but {} values",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { terminal_value };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        advantages[t] = running;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(AdvantageSet {
        advantages,
        returns,
    })
}

/// Negated clipped surrogate for one sample.
pub fn clipped_surrogate(log_prob_new: f64, log_prob_old: f64, advantage: f64, clip_eps: f64) -> f64 {
    let r = (log_prob_new - log_prob_old).exp();
    let clipped = r.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    -(r * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// One timestep as seen by the update.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub observation: &'a [f64],
    pub action: usize,
    pub log_prob_old: f64,
    pub advantage: f64,
    pub target: f64,
}

/// Sums (not means) of per-sample loss terms over a minibatch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSums {
    pub surrogate: f64,
    pub value_sq_err: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clipped: usize,
    /// Largest |r - 1| seen, for the first-epoch identity check.
    pub max_ratio_dev: f64,
}

impl LossSums {
    /// The minimized objective: mean surrogate + value_coef * MSE - entropy_coef * entropy.
    pub fn loss(&self, n: usize, cfg: &PpoConfig) -> f64 {
        (self.surrogate + cfg.value_coef * self.value_sq_err - cfg.entropy_coef * self.entropy)
            / n as f64
    }
}

/// Evaluate the minibatch loss and accumulate its gradients with respect to
/// the policy and value parameters into `g_pol` and `g_val`.
pub fn minibatch_gradients(
    policy: &Network,
    value: &Network,
    samples: &[Sample<'_>],
    cfg: &PpoConfig,
    g_pol: &mut [f64],
    g_val: &mut [f64],
) -> Result<LossSums> {
    let scale = 1.0 / samples.len() as f64;
    let mut sums = LossSums::default();
    for s in samples {
        let trace = policy.forward(s.observation)?;
        let dist = CategoricalDist::from_logits(&trace.output);
        let lp = dist.log_probs[s.action];
        let ratio = (lp - s.log_prob_old).exp();
        // The unclipped branch is active unless clipping lowers the objective.
        let unclipped = ratio * s.advantage
            <= ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * s.advantage;
        let d_surr = if unclipped { -s.advantage * ratio } else { 0.0 };
        let d_logits: Vec<f64> = dist
            .log_prob_grad(s.action)
            .iter()
            .zip(dist.entropy_grad())
            .map(|(glp, gh)| scale * (d_surr * glp - cfg.entropy_coef * gh))
            .collect();
        policy.backward(&trace, &d_logits, g_pol);

        let vtrace = value.forward(s.observation)?;
        let err = vtrace.output[0] - s.target;
        value.backward(&vtrace, &[scale * cfg.value_coef * 2.0 * err], g_val);

        sums.surrogate += clipped_surrogate(lp, s.log_prob_old, s.advantage, cfg.clip_eps);
        sums.value_sq_err += err * err;
        sums.entropy += dist.entropy();
        sums.approx_kl += s.log_prob_old - lp;
        if (ratio - 1.0).abs() > cfg.clip_eps {
            sums.clipped += 1;
        }
        sums.max_ratio_dev = sums.max_ratio_dev.max((ratio - 1.0).abs());
    }
    Ok(sums)
}

/// Several epochs of shuffled minibatch Adam steps on a batch of episodes.
pub fn ppo_update<R: Rng>(
    policy: &mut Network,
    value: &mut Network,
    batch: &[Trajectory],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    if batch.iter().all(Trajectory::is_empty) {
        return Err(Error::Usage("ppo_update needs a non-empty batch".into()));
    }
    let mut samples = Vec::new();
    for traj in batch {
        traj.check()?;
        let gae = compute_gae(&traj.rewards, &traj.values, 0.0, cfg.gamma, cfg.lambda)?;
        for t in 0..traj.len() {
            samples.push(Sample {
                observation: &traj.observations[t],
                action: traj.actions[t],
                log_prob_old: traj.log_probs[t],
                advantage: gae.advantages[t],
                target: gae.returns[t],
            });
        }
    }
    if cfg.advantage_normalization {
        let n = samples.len() as f64;
        let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
        let scale = 1.0 / (var.sqrt() + 1e-8);
        for s in &mut samples {
            s.advantage = (s.advantage - mean) * scale;
        }
    }

    let adam = cfg.adam();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut totals = LossSums::default();
    let mut first = true;
    let mut g_pol = vec![0.0; policy.params.len()];
    let mut g_val = vec![0.0; value.params.len()];
    let mut minibatch = Vec::with_capacity(cfg.minibatch_size);
    for _ in 0..cfg.epochs_per_batch {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            g_pol.iter_mut().for_each(|g| *g = 0.0);
            g_val.iter_mut().for_each(|g| *g = 0.0);
            minibatch.clear();
            minibatch.extend(chunk.iter().map(|&i| samples[i]));
            let sums = minibatch_gradients(policy, value, &minibatch, cfg, &mut g_pol, &mut g_val)?;
            if first && sums.max_ratio_dev > 1e-9 {
                return Err(Error::Numeric(format!(
                    "probability ratio off by {} before any update",
                    sums.max_ratio_dev
                )));
            }
            first = false;
            totals.surrogate += sums.surrogate;
            totals.value_sq_err += sums.value_sq_err;
            totals.entropy += sums.entropy;
            totals.approx_kl += sums.approx_kl;
            totals.clipped += sums.clipped;
            adam_step(policy, &g_pol, &adam)?;
            adam_step(value, &g_val, &adam)?;
        }
    }
    let n = (samples.len() * cfg.epochs_per_batch) as f64;
    Ok(UpdateStats {
        policy_loss: totals.surrogate / n,
        value_loss: totals.value_sq_err / n,
        entropy: totals.entropy / n,
        clip_fraction: totals.clipped as f64 / n,
        approx_kl: totals.approx_kl / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_lambda_zero_is_td_residual() {
        let r = [1.0, -0.5, 2.0];
        let v = [0.3, 0.1, -0.2];
        let g = compute_gae(&r, &v, 0.0, 0.9, 0.0).unwrap();
        assert_eq!(g.advantages[0], 1.0 + 0.9 * 0.1 - 0.3);
        assert_eq!(g.advantages[2], 2.0 - (-0.2));
    }

    #[test]
    fn gae_lambda_one_zero_values_is_reward_to_go() {
        let r = [1.0, 2.0, 3.0];
        let g = compute_gae(&r, &[0.0; 3], 0.0, 0.5, 1.0).unwrap();
        assert!((g.advantages[0] - (1.0 + 0.5 * 2.0 + 0.25 * 3.0)).abs() < 1e-15);
        assert_eq!(g.returns, g.advantages);
    }

    #[test]
    fn gae_length_mismatch() {
        assert!(compute_gae(&[1.0], &[], 0.0, 0.9, 0.9).unwrap_err().is_usage());
    }

    #[test]
    fn surrogate_worked_cases() {
        assert_eq!(clipped_surrogate(0.0, 0.0, 3.5, 0.2), -3.5);
        let c = clipped_surrogate(1.3f64.ln(), 0.0, 2.0, 0.1);
        assert!((c + 2.2).abs() < 1e-12);
        let c = clipped_surrogate(0.7f64.ln(), 0.0, -1.0, 0.1);
        assert!((c - 0.9).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        let bad = PpoConfig {
            gamma: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("ppo.gamma"));
        let bad = PpoConfig {
            clip_eps: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
