use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::AdaptiveTriggerState;
use crate::interventions::{InterventionKind, InterventionSpec};
use crate::metrics::MetricSeries;
use crate::nn::{weight_norm, InitSpec, NormScope};
use crate::rl::agent::{AgentConfig, DoubleDqnAgent};
use crate::rl::catch::{CatchConfig, CatchEnv, N_ACTIONS};
use crate::rl::replay::{ReplayBuffer, Transition};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub env: CatchConfig,
    #[serde(default)]
    pub schedule: Vec<InterventionSpec>,
    #[serde(default = "d_budget")]
    pub budget_steps: u64,
    #[serde(default = "d_eval_every")]
    pub eval_every: u64,
    #[serde(default = "d_eval_episodes")]
    pub eval_episodes: usize,
}

fn d_budget() -> u64 {
    30_000
}
fn d_eval_every() -> u64 {
    2_000
}
fn d_eval_episodes() -> usize {
    100
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            agent: AgentConfig::default(),
            env: CatchConfig::default(),
            schedule: Vec::new(),
            budget_steps: d_budget(),
            eval_every: d_eval_every(),
            eval_episodes: d_eval_episodes(),
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.env.validate()?;
        if self.budget_steps == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(Error::Config(
                "budget_steps, eval_every and eval_episodes must be >= 1".into(),
            ));
        }
        let depth = self.agent.hidden_widths.len() + 1;
        for spec in &self.schedule {
            spec.validate()?;
            match &spec.intervention {
                InterventionKind::Inject(c) if c.split_k >= depth => {
                    return Err(Error::Config(format!(
                        "injection split_k {} must be < {depth}",
                        c.split_k
                    )))
                }
                InterventionKind::Reset { n_layers } | InterventionKind::ResetOptimizer { n_layers }
                    if *n_layers > depth =>
                {
                    return Err(Error::Config(format!("n_layers {n_layers} exceeds depth {depth}")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

pub const EVAL_RETURN: &str = "eval_return";
pub const TD_LOSS: &str = "td_loss";
pub const WEIGHT_NORM: &str = "weight_norm";
pub const GRAD_STEPS: &str = "grad_steps";

/// Fixed-point scale of the replay-ratio accumulator.
const RR_ONE: u64 = 1 << 32;

/// A training run advanced one environment step at a time.
pub struct RlRun {
    cfg: RlConfig,
    seed: u64,
    env: CatchEnv,
    pub agent: DoubleDqnAgent,
    pub buffer: ReplayBuffer,
    obs: Vec<f64>,
    step: u64,
    rr_units: u64,
    rr_acc: u64,
    triggers: Vec<Option<AdaptiveTriggerState>>,
    loss_sum: f64,
    loss_count: u64,
    interventions_applied: u64,
    pub series: MetricSeries,
}

impl RlRun {
    pub fn new(cfg: RlConfig, run_id: impl Into<String>, seed_value: u64) -> Result<Self> {
        cfg.validate()?;
        let mut env = CatchEnv::new(cfg.env.clone(), seed::mix(seed_value, 0xE4F))?;
        let agent = DoubleDqnAgent::new(cfg.agent.clone(), cfg.env.obs_width(), N_ACTIONS, seed_value)?;
        let w0 = weight_norm(&agent.online, NormScope::WeightsOnly);
        let triggers = cfg
            .schedule
            .iter()
            .map(|s| s.adaptive_factor.map(|f| AdaptiveTriggerState::new(w0, f)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let obs = env.reset();
        let mut series = MetricSeries::new(run_id, seed_value);
        series.push("train", 0, WEIGHT_NORM, w0);
        Ok(Self {
            rr_units: (cfg.agent.replay_ratio * RR_ONE as f64).round() as u64,
            buffer: ReplayBuffer::new(cfg.agent.buffer_capacity),
            cfg,
            seed: seed_value,
            env,
            agent,
            obs,
            step: 0,
            rr_acc: 0,
            triggers,
            loss_sum: 0.0,
            loss_count: 0,
            interventions_applied: 0,
            series,
        })
    }

    pub fn config(&self) -> &RlConfig {
        &self.cfg
    }

    /// Environment steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.budget_steps
    }

    pub fn env_switched(&self) -> bool {
        self.env.switched()
    }

    fn intervention_init(&self) -> InitSpec {
        InitSpec::he_uniform(seed::mix(self.seed, 0x1000 + self.interventions_applied))
    }

    /// Applies `kind` now to both networks and logs it.
    pub fn intervene(&mut self, kind: &InterventionKind) -> Result<()> {
        let init = self.intervention_init();
        self.agent.apply_intervention(kind, &init)?;
        self.interventions_applied += 1;
        self.series
            .push("intervention", self.step, format!("intervention:{}", kind.name()), 1.0);
        Ok(())
    }

    fn scheduled_interventions(&mut self) -> Result<()> {
        let due: Vec<InterventionKind> = self
            .cfg
            .schedule
            .iter()
            .filter(|s| s.apply_steps.contains(&self.step))
            .map(|s| s.intervention.clone())
            .collect();
        for kind in &due {
            self.intervene(kind)?;
        }
        if self.triggers.iter().any(Option::is_some) {
            let norm = weight_norm(&self.agent.online, NormScope::WeightsOnly);
            let mut fire = Vec::new();
            for (i, t) in self.triggers.iter_mut().enumerate() {
                if let Some(t) = t {
                    if t.observe(norm) {
                        fire.push(self.cfg.schedule[i].intervention.clone());
                    }
                }
            }
            for kind in &fire {
                self.intervene(kind)?;
            }
        }
        Ok(())
    }

    /// One environment step plus the gradient steps it pays for; evaluates
    /// after the step when the step count hits an evaluation point.
    pub fn step(&mut self) -> Result<()> {
        if self.is_finished() {
            return Err(Error::Usage("run already finished".into()));
        }
        self.scheduled_interventions()?;
        let eps = self.cfg.agent.epsilon_at(self.step, self.cfg.budget_steps);
        let action = self.agent.act(&self.obs, eps)?;
        let (next_obs, reward, done) = self.env.step(action)?;
        self.buffer.push(Transition {
            obs: std::mem::take(&mut self.obs),
            action,
            reward,
            next_obs: next_obs.clone(),
            done,
        });
        self.obs = if done { self.env.reset() } else { next_obs };
        self.step += 1;
        self.rr_acc += self.rr_units;
        while self.rr_acc >= RR_ONE {
            self.rr_acc -= RR_ONE;
            let batch_size = self.cfg.agent.batch_size;
            let batch = self.buffer.sample(self.agent.rng_mut(), batch_size);
            self.loss_sum += self.agent.train_step(&batch)?;
            self.loss_count += 1;
        }
        if self.step % self.cfg.eval_every == 0 || self.is_finished() {
            self.log_eval()?;
        }
        Ok(())
    }

    fn log_eval(&mut self) -> Result<()> {
        let ret = self.evaluate(self.cfg.eval_episodes)?;
        let s = self.step;
        self.series.push("eval", s, EVAL_RETURN, ret);
        if self.loss_count > 0 {
            self.series.push("train", s, TD_LOSS, self.loss_sum / self.loss_count as f64);
        }
        self.loss_sum = 0.0;
        self.loss_count = 0;
        self.series
            .push("train", s, WEIGHT_NORM, weight_norm(&self.agent.online, NormScope::WeightsOnly));
        self.series.push("train", s, GRAD_STEPS, self.agent.grad_steps() as f64);
        Ok(())
    }

    /// Mean greedy return over `episodes` episodes in the current regime.
    /// The evaluation environment is seeded from the current step, so the
    /// result depends only on the network and the step.
    pub fn evaluate(&self, episodes: usize) -> Result<f64> {
        let mut env_cfg = self.cfg.env.clone();
        if self.env.switched() {
            env_cfg.switch_step = Some(0);
        } else {
            env_cfg.switch_step = None;
            env_cfg.switch_kind = crate::rl::catch::SwitchKind::None;
        }
        let mut env = CatchEnv::new(env_cfg, seed::mix(self.seed ^ 0xE7A1, self.step))?;
        let mut total = 0.0;
        for _ in 0..episodes {
            let mut obs = env.reset();
            loop {
                let (next, r, done) = env.step(self.agent.greedy_action(&obs)?)?;
                total += r;
                if done {
                    break;
                }
                obs = next;
            }
        }
        Ok(total / episodes as f64)
    }

    pub fn finish(self) -> MetricSeries {
        self.series
    }

    /// Runs to the end of the budget; a divergence becomes an abort record.
    pub fn run_to_end(mut self) -> Result<MetricSeries> {
        while !self.is_finished() {
            match self.step() {
                Ok(()) => {}
                Err(Error::Divergence(reason)) => {
                    let s = self.step;
                    self.series.abort(s, format!("divergence: {reason}"));
                    return Ok(self.series);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(self.series)
    }
}

pub fn run_rl_experiment(cfg: &RlConfig, run_id: &str, seed_value: u64) -> Result<MetricSeries> {
    RlRun::new(cfg.clone(), run_id, seed_value)?.run_to_end()
}
