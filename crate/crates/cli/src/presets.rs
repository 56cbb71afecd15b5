//! Built-in experiments. Each expands to an ordinary [`ExperimentConfig`].

use plasticity::continual::{ProtocolConfig, ProtocolMode, TeacherConfig};
use plasticity::injection::{InjectionConfig, InjectionVariant, OptimizerStatePolicy};
use plasticity::interventions::{InterventionKind, InterventionSpec};
use plasticity::rl::{AgentConfig, CatchConfig, RlConfig, SwitchKind};

use crate::config::{ContinualExperiment, ContinualVariant, ExperimentConfig, ExperimentKind, RlExperiment, RlVariant};
use crate::CliError;

pub const PRESETS: [&str; 7] = ["fig1", "rescue", "diagnose", "reincarnate", "grow", "sensitivity", "ablate"];

const RL_BUDGET: u64 = 30_000;
const RL_SEEDS: [u64; 3] = [0, 1, 2];

pub fn preset(name: &str) -> Result<ExperimentConfig, CliError> {
    let cfg = match name {
        "fig1" => continual(
            name,
            vec![
                cv("reset_never", ProtocolConfig::new(ProtocolMode::ResetNever)),
                cv("reset_every_task", ProtocolConfig::new(ProtocolMode::ResetEveryTask)),
            ],
        ),
        "rescue" => continual(
            name,
            vec![
                cv("reset_never", ProtocolConfig::new(ProtocolMode::ResetNever)),
                cv("inject", ProtocolConfig::at_task(ProtocolMode::InjectAtTask, 10)),
                cv("snp", ProtocolConfig::at_task(ProtocolMode::SnpAtTask, 10)),
                cv("reset_head", ProtocolConfig::at_task(ProtocolMode::ResetHeadAtTask, 10)),
            ],
        ),
        "diagnose" => rl(
            name,
            vec![
                rv("baseline", switching(), vec![]),
                rv("inject_25", switching(), vec![at(inject(default_injection()), RL_BUDGET / 4)]),
                rv("inject_50", switching(), vec![at(inject(default_injection()), RL_BUDGET / 2)]),
            ],
        ),
        "reincarnate" => {
            let mid = RL_BUDGET / 2;
            let mut v = vec![
                rv("baseline", switching(), vec![]),
                rv("inject", switching(), vec![at(inject(default_injection()), mid)]),
                rv("reset", switching(), vec![at(InterventionKind::Reset { n_layers: 2 }, mid)]),
            ];
            for lambda in [0.1, 0.3, 1.0] {
                for sigma in [0.01, 0.1, 1.0] {
                    v.push(rv(
                        &format!("snp_l{lambda}_s{sigma}"),
                        switching(),
                        vec![at(InterventionKind::Snp { lambda, sigma }, mid)],
                    ));
                }
            }
            v.push(rv("widen", switching(), vec![at(InterventionKind::Widen { zero_new_outgoing: false }, mid)]));
            rl(name, v)
        }
        "grow" => {
            let mid = RL_BUDGET / 2;
            let small = |cfg: RlConfig| with_hidden(cfg, vec![32, 32]);
            rl(
                name,
                vec![
                    RlVariant { name: "small".into(), config: small(stationary(vec![])) },
                    RlVariant { name: "small_inject".into(), config: small(stationary(vec![at(inject(default_injection()), mid)])) },
                    RlVariant {
                        name: "small_widen".into(),
                        config: small(stationary(vec![at(InterventionKind::Widen { zero_new_outgoing: true }, mid)])),
                    },
                    RlVariant { name: "full".into(), config: stationary(vec![]) },
                ],
            )
        }
        "sensitivity" => {
            let mut v = Vec::new();
            for rr in [0.0625, 0.125, 0.25, 0.5, 1.0] {
                for injected in [false, true] {
                    let mut c = stationary(if injected { vec![at(inject(default_injection()), RL_BUDGET / 2)] } else { vec![] });
                    c.agent.replay_ratio = rr;
                    v.push(RlVariant { name: format!("rr{rr}{}", if injected { "_inject" } else { "" }), config: c });
                }
            }
            for e in -2i32..=2 {
                let w = (64.0 * 2f64.sqrt().powi(e)).round() as usize;
                for injected in [false, true] {
                    let c = stationary(if injected { vec![at(inject(default_injection()), RL_BUDGET / 2)] } else { vec![] });
                    v.push(RlVariant {
                        name: format!("width{w}{}", if injected { "_inject" } else { "" }),
                        config: with_hidden(c, vec![w, w]),
                    });
                }
            }
            rl(name, v)
        }
        "ablate" => {
            let mid = RL_BUDGET / 2;
            let base = default_injection();
            let grid = [
                ("shared_encoder", base),
                ("whole_net", base.with_variant(InjectionVariant::WholeNet)),
                ("whole_net_copy_encoder", base.with_variant(InjectionVariant::WholeNetCopyEncoder)),
                ("unfrozen_old_head", InjectionConfig { freeze_old: false, ..base }),
                ("no_output_correction", InjectionConfig { output_correction: false, ..base }),
                (
                    "copy_optimizer_state",
                    InjectionConfig { optimizer_state_policy: OptimizerStatePolicy::CopyFromOldHead, ..base },
                ),
            ];
            let mut v = vec![rv("baseline", switching(), vec![])];
            for (n, c) in grid {
                v.push(rv(n, switching(), vec![at(inject(c), mid)]));
            }
            rl(name, v)
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown preset {other:?}; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn continual(name: &str, variants: Vec<ContinualVariant>) -> ExperimentConfig {
    ExperimentConfig {
        kind: ExperimentKind::Continual,
        name: name.into(),
        preset: Some(name.into()),
        seeds: (0..10).collect(),
        output_dir: None,
        continual: Some(ContinualExperiment { teacher: TeacherConfig::default(), variants }),
        rl: None,
    }
}

fn rl(name: &str, variants: Vec<RlVariant>) -> ExperimentConfig {
    ExperimentConfig {
        kind: ExperimentKind::Rl,
        name: name.into(),
        preset: Some(name.into()),
        seeds: RL_SEEDS.to_vec(),
        output_dir: None,
        continual: None,
        rl: Some(RlExperiment { variants }),
    }
}

fn cv(name: &str, protocol: ProtocolConfig) -> ContinualVariant {
    ContinualVariant { name: name.into(), protocol }
}

fn rv(name: &str, env: CatchConfig, schedule: Vec<InterventionSpec>) -> RlVariant {
    RlVariant { name: name.into(), config: RlConfig { env, schedule, budget_steps: RL_BUDGET, ..RlConfig::default() } }
}

fn stationary(schedule: Vec<InterventionSpec>) -> RlConfig {
    rv("", CatchConfig::default(), schedule).config
}

/// Catch whose observations mirror at 40% of the budget.
fn switching() -> CatchConfig {
    CatchConfig {
        switch_step: Some(RL_BUDGET * 2 / 5),
        switch_kind: SwitchKind::MirrorObservation,
        ..CatchConfig::default()
    }
}

fn with_hidden(mut cfg: RlConfig, hidden_widths: Vec<usize>) -> RlConfig {
    cfg.agent = AgentConfig { hidden_widths, ..cfg.agent };
    cfg
}

fn default_injection() -> InjectionConfig {
    InjectionConfig::shared(AgentConfig::default().default_split_k())
}

fn inject(c: InjectionConfig) -> InterventionKind {
    InterventionKind::Inject(c)
}

fn at(kind: InterventionKind, step: u64) -> InterventionSpec {
    InterventionSpec::at(kind, vec![step])
}
