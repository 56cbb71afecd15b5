use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::{apply_intervention, InterventionKind};
use crate::model::AnyNetwork;
use crate::nn::{l2_penalty_grads, InitSpec, Network, RmsPropState};
use crate::rl::replay::Transition;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdLoss {
    #[default]
    Squared,
    /// Huber with threshold 1.
    Huber,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_eps_start")]
    pub epsilon_start: f64,
    #[serde(default = "d_eps_end")]
    pub epsilon_end: f64,
    /// Fraction of the step budget over which ε decays linearly.
    #[serde(default = "d_eps_fraction")]
    pub epsilon_decay_fraction: f64,
    /// Hard target copy every this many gradient steps.
    #[serde(default = "d_target_period")]
    pub target_update_period: u64,
    /// Gradient steps per environment step.
    #[serde(default = "d_replay_ratio")]
    pub replay_ratio: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_capacity")]
    pub buffer_capacity: usize,
    /// Hidden widths; input and output widths come from the environment.
    #[serde(default = "d_hidden")]
    pub hidden_widths: Vec<usize>,
    /// Encoder depth for injection; defaults to all but the last two layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_k: Option<usize>,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_rho")]
    pub decay_rho: f64,
    #[serde(default = "d_eps")]
    pub rmsprop_epsilon: f64,
    #[serde(default)]
    pub loss: TdLoss,
    #[serde(default)]
    pub l2: f64,
    /// Spectral normalization on the penultimate layer.
    #[serde(default)]
    pub spectral_norm: bool,
}

fn d_gamma() -> f64 {
    0.99
}
fn d_eps_start() -> f64 {
    1.0
}
fn d_eps_end() -> f64 {
    0.05
}
fn d_eps_fraction() -> f64 {
    0.1
}
fn d_target_period() -> u64 {
    250
}
fn d_replay_ratio() -> f64 {
    0.25
}
fn d_batch() -> usize {
    32
}
fn d_capacity() -> usize {
    10_000
}
fn d_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn d_lr() -> f64 {
    1e-3
}
fn d_rho() -> f64 {
    0.99
}
fn d_eps() -> f64 {
    1e-8
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: d_gamma(),
            epsilon_start: d_eps_start(),
            epsilon_end: d_eps_end(),
            epsilon_decay_fraction: d_eps_fraction(),
            target_update_period: d_target_period(),
            replay_ratio: d_replay_ratio(),
            batch_size: d_batch(),
            buffer_capacity: d_capacity(),
            hidden_widths: d_hidden(),
            split_k: None,
            learning_rate: d_lr(),
            decay_rho: d_rho(),
            rmsprop_epsilon: d_eps(),
            loss: TdLoss::Squared,
            l2: 0.0,
            spectral_norm: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        for (name, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return bad(format!(
                "epsilon_decay_fraction must lie in [0, 1], got {}",
                self.epsilon_decay_fraction
            ));
        }
        if self.target_update_period == 0 {
            return bad("target_update_period must be >= 1".into());
        }
        if !(self.replay_ratio > 0.0 && self.replay_ratio.is_finite()) {
            return bad(format!("replay_ratio must be > 0, got {}", self.replay_ratio));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("batch_size and buffer_capacity must be >= 1".into());
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return bad(format!("hidden_widths must be non-empty and positive, got {:?}", self.hidden_widths));
        }
        let depth = self.hidden_widths.len() + 1;
        if let Some(k) = self.split_k {
            if k >= depth {
                return bad(format!("split_k must be < {depth}, got {k}"));
            }
        }
        if !(self.l2 >= 0.0) {
            return bad(format!("l2 must be >= 0, got {}", self.l2));
        }
        RmsPropState::new(self.learning_rate, self.decay_rho, self.rmsprop_epsilon)?;
        Ok(())
    }

    pub fn widths(&self, obs_width: usize, n_actions: usize) -> Vec<usize> {
        let mut w = vec![obs_width];
        w.extend(&self.hidden_widths);
        w.push(n_actions);
        w
    }

    /// Encoder depth used when an injection leaves `split_k` to the agent.
    pub fn default_split_k(&self) -> usize {
        self.split_k.unwrap_or(self.hidden_widths.len() - 1)
    }

    /// Linear decay from `epsilon_start` to `epsilon_end` over the first
    /// `epsilon_decay_fraction` of `budget` steps.
    pub fn epsilon_at(&self, step: u64, budget: u64) -> f64 {
        let horizon = self.epsilon_decay_fraction * budget as f64;
        if horizon <= 0.0 || step as f64 >= horizon {
            return self.epsilon_end;
        }
        let frac = step as f64 / horizon;
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

/// Double DQN targets from precomputed next-state Q-values (`[n × A]`).
pub fn double_q_targets_from_values(
    rewards: &[f64],
    dones: &[bool],
    q_online_next: &Tensor,
    q_target_next: &Tensor,
    gamma: f64,
) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    if !q_online_next.is_finite() || !q_target_next.is_finite() {
        return Err(Error::Divergence("non-finite Q-values in target computation".into()));
    }
    Ok(rewards
        .iter()
        .zip(dones)
        .enumerate()
        .map(|(i, (r, done))| {
            if *done {
                *r
            } else {
                let a = argmax(q_online_next.row(i));
                r + gamma * q_target_next.row(i)[a]
            }
        })
        .collect())
}

/// `r + γ·Q_target(s', argmax_a Q_online(s', a))`, or `r` for terminal
/// transitions.
pub fn double_q_targets(batch: &[&Transition], online: &AnyNetwork, target: &AnyNetwork, gamma: f64) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let next = stack(batch.iter().map(|t| t.next_obs.as_slice()))?;
    let q_online = online.predict(&next)?;
    let q_target = target.predict(&next)?;
    let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    let dones: Vec<bool> = batch.iter().map(|t| t.done).collect();
    double_q_targets_from_values(&rewards, &dones, &q_online, &q_target, gamma)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Result<Tensor> {
    let mut values = Vec::new();
    let mut n = 0;
    let mut width = 0;
    for r in rows {
        width = r.len();
        values.extend_from_slice(r);
        n += 1;
    }
    Tensor::matrix(n, width, values)
}

#[derive(Clone, Debug)]
pub struct DoubleDqnAgent {
    pub online: AnyNetwork,
    pub target: AnyNetwork,
    pub opt: RmsPropState,
    pub cfg: AgentConfig,
    rng: ChaCha8Rng,
    grad_steps: u64,
}

impl DoubleDqnAgent {
    pub fn new(cfg: AgentConfig, obs_width: usize, n_actions: usize, seed_value: u64) -> Result<Self> {
        cfg.validate()?;
        let mut net = Network::mlp(&cfg.widths(obs_width, n_actions), &InitSpec::he_uniform(seed::mix(seed_value, 0x0A11)))?;
        if cfg.spectral_norm {
            net.enable_spectral_penultimate()?;
        }
        let opt = RmsPropState::new(cfg.learning_rate, cfg.decay_rho, cfg.rmsprop_epsilon)?;
        let online = AnyNetwork::Plain(net);
        Ok(Self {
            target: online.clone(),
            online,
            opt,
            cfg,
            rng: seed::rng(seed::mix(seed_value, 0xAC7)),
            grad_steps: 0,
        })
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.online.predict(&Tensor::row_vector(obs.to_vec()))?.into_values())
    }

    pub fn greedy_action(&self, obs: &[f64]) -> Result<usize> {
        Ok(argmax(&self.q_values(obs)?))
    }

    /// ε-greedy over the online network.
    pub fn act(&mut self, obs: &[f64], epsilon: f64) -> Result<usize> {
        if self.rng.random::<f64>() < epsilon {
            let n = self.online.output_width();
            return Ok(self.rng.random_range(0..n));
        }
        self.greedy_action(obs)
    }

    pub(crate) fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One gradient step on a batch; returns the mean TD loss before the update.
    pub fn train_step(&mut self, batch: &[&Transition]) -> Result<f64> {
        let targets = double_q_targets(batch, &self.online, &self.target, self.cfg.gamma)?;
        self.online.refresh_spectral(1);
        let obs = stack(batch.iter().map(|t| t.obs.as_slice()))?;
        let (q, cache) = self.online.forward(&obs)?;
        let n = batch.len();
        let a_width = q.cols();
        let mut dq = vec![0.0; n * a_width];
        let mut loss = 0.0;
        for (i, (t, y)) in batch.iter().zip(&targets).enumerate() {
            let d = q.row(i)[t.action] - y;
            let (l, g) = match self.cfg.loss {
                TdLoss::Squared => (d * d, 2.0 * d),
                TdLoss::Huber if d.abs() <= 1.0 => (0.5 * d * d, d),
                TdLoss::Huber => (d.abs() - 0.5, d.signum()),
            };
            loss += l;
            dq[i * a_width + t.action] = g / n as f64;
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence("non-finite TD loss".into()));
        }
        let mut grads = self.online.backward(&cache, &Tensor::matrix(n, a_width, dq)?)?.params;
        if self.cfg.l2 > 0.0 {
            for (k, p) in l2_penalty_grads(&self.online, self.cfg.l2)? {
                if let Some(g) = grads.get_mut(&k) {
                    g.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
                }
            }
        }
        self.opt.step_blocks(&mut self.online, &grads)?;
        self.grad_steps += 1;
        if self.grad_steps % self.cfg.target_update_period == 0 {
            self.sync_target();
        }
        Ok(loss)
    }

    /// Hard copy: the target becomes a bitwise clone of the online network.
    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }

    /// Applies `kind` to the online network (with its optimizer state) and
    /// to the target network, both drawing from the same `init`.
    pub fn apply_intervention(&mut self, kind: &InterventionKind, init: &InitSpec) -> Result<()> {
        apply_intervention(&mut self.online, Some(&mut self.opt), kind, init)?;
        apply_intervention(&mut self.target, None, kind, init)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_double_q_target() {
        let qo = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let qt = Tensor::from_rows(&[vec![5.0, 3.0]]);
        let y = double_q_targets_from_values(&[0.5], &[false], &qo, &qt, 0.9).unwrap();
        assert!((y[0] - 3.2).abs() < 1e-12);
        let y = double_q_targets_from_values(&[0.5], &[true], &qo, &qt, 0.9).unwrap();
        assert_eq!(y[0], 0.5);
        let y = double_q_targets_from_values(&[0.5], &[false], &qo, &qt, 0.0).unwrap();
        assert_eq!(y[0], 0.5);
    }

    #[test]
    fn non_finite_q_is_divergence() {
        let qo = Tensor::from_rows(&[vec![f64::NAN, 2.0]]);
        let qt = Tensor::from_rows(&[vec![5.0, 3.0]]);
        assert!(matches!(
            double_q_targets_from_values(&[0.5], &[false], &qo, &qt, 0.9),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
    }

    #[test]
    fn epsilon_schedule_is_linear_then_flat() {
        let cfg = AgentConfig::default();
        assert_eq!(cfg.epsilon_at(0, 1000), 1.0);
        assert!((cfg.epsilon_at(50, 1000) - 0.525).abs() < 1e-12);
        assert_eq!(cfg.epsilon_at(100, 1000), 0.05);
        assert_eq!(cfg.epsilon_at(900, 1000), 0.05);
    }
}
