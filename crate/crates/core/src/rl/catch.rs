use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const N_ACTIONS: usize = 3;
pub const LEFT: usize = 0;
pub const STAY: usize = 1;
pub const RIGHT: usize = 2;

/// What changes when the regime switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchKind {
    #[default]
    None,
    /// Observations are flipped left to right.
    MirrorObservation,
    /// Left and right actions are swapped.
    PermuteActions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatchConfig {
    #[serde(default = "default_rows")]
    pub rows: usize,
    #[serde(default = "default_cols")]
    pub cols: usize,
    /// Global environment step from which the switched regime applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_step: Option<u64>,
    #[serde(default)]
    pub switch_kind: SwitchKind,
}

fn default_rows() -> usize {
    10
}

fn default_cols() -> usize {
    5
}

impl Default for CatchConfig {
    fn default() -> Self {
        Self {
            rows: default_rows(),
            cols: default_cols(),
            switch_step: None,
            switch_kind: SwitchKind::None,
        }
    }
}

impl CatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 1 {
            return Err(Error::Config(format!(
                "catch grid needs rows >= 2 and cols >= 1, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.switch_step.is_some() && self.switch_kind == SwitchKind::None {
            return Err(Error::Config("switch_step set but switch_kind is none".into()));
        }
        Ok(())
    }

    pub fn obs_width(&self) -> usize {
        self.rows * self.cols
    }
}

/// Ball falls one row per step from a random column in the top row; the
/// paddle moves along the bottom row.
#[derive(Clone, Debug)]
pub struct CatchEnv {
    cfg: CatchConfig,
    pub ball_row: usize,
    pub ball_col: usize,
    pub paddle_col: usize,
    done: bool,
    global_steps: u64,
    rng: ChaCha8Rng,
}

impl CatchEnv {
    pub fn new(cfg: CatchConfig, seed_value: u64) -> Result<Self> {
        cfg.validate()?;
        let mut env = Self {
            paddle_col: cfg.cols / 2,
            cfg,
            ball_row: 0,
            ball_col: 0,
            done: true,
            global_steps: 0,
            rng: seed::rng(seed_value),
        };
        env.reset();
        Ok(env)
    }

    pub fn config(&self) -> &CatchConfig {
        &self.cfg
    }

    pub fn global_steps(&self) -> u64 {
        self.global_steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn switched(&self) -> bool {
        self.cfg.switch_step.is_some_and(|s| self.global_steps >= s)
    }

    pub fn reset(&mut self) -> Vec<f64> {
        let col = self.rng.random_range(0..self.cfg.cols);
        self.reset_to(col, self.cfg.cols / 2)
    }

    /// Starts an episode from a chosen ball column and paddle column.
    pub fn reset_to(&mut self, ball_col: usize, paddle_col: usize) -> Vec<f64> {
        self.ball_row = 0;
        self.ball_col = ball_col.min(self.cfg.cols - 1);
        self.paddle_col = paddle_col.min(self.cfg.cols - 1);
        self.done = false;
        self.observe()
    }

    pub fn observe(&self) -> Vec<f64> {
        let (rows, cols) = (self.cfg.rows, self.cfg.cols);
        let mirror = self.switched() && self.cfg.switch_kind == SwitchKind::MirrorObservation;
        let col = |c: usize| if mirror { cols - 1 - c } else { c };
        let mut obs = vec![0.0; rows * cols];
        obs[self.ball_row * cols + col(self.ball_col)] = 1.0;
        obs[(rows - 1) * cols + col(self.paddle_col)] = 1.0;
        obs
    }

    /// Returns `(obs, reward, done)`.
    pub fn step(&mut self, action: usize) -> Result<(Vec<f64>, f64, bool)> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode; call reset".into()));
        }
        if action >= N_ACTIONS {
            return Err(Error::Usage(format!("action {action} out of range")));
        }
        let effective = if self.switched() && self.cfg.switch_kind == SwitchKind::PermuteActions {
            N_ACTIONS - 1 - action
        } else {
            action
        };
        match effective {
            LEFT => self.paddle_col = self.paddle_col.saturating_sub(1),
            RIGHT => self.paddle_col = (self.paddle_col + 1).min(self.cfg.cols - 1),
            _ => {}
        }
        self.ball_row += 1;
        self.global_steps += 1;
        let mut reward = 0.0;
        if self.ball_row == self.cfg.rows - 1 {
            self.done = true;
            reward = if self.paddle_col == self.ball_col { 1.0 } else { -1.0 };
        }
        Ok((self.observe(), reward, self.done))
    }
}
