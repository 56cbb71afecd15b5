//! Double DQN on a small Catch grid, with intervention schedules mirrored
//! onto the target network.

pub mod agent;
pub mod catch;
pub mod replay;
pub mod run;

pub use agent::{argmax, double_q_targets, double_q_targets_from_values, AgentConfig, DoubleDqnAgent, TdLoss};
pub use catch::{CatchConfig, CatchEnv, SwitchKind, N_ACTIONS};
pub use replay::{ReplayBuffer, Transition};
pub use run::{run_rl_experiment, RlConfig, RlRun};
