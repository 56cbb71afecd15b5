//! Continual regression on a drifting teacher.
//!
//! A fixed-architecture teacher network labels Gaussian inputs. Between
//! consecutive tasks its parameter vector moves by exactly `drift_scale` in a
//! uniformly random direction, and the input mean slides along a fixed
//! direction by `input_shift_scale` per task. A learner is trained on the
//! task sequence under one of several boundary protocols.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::{inject_with_optimizer, InjectionConfig};
use crate::interventions::{apply_intervention, InterventionKind};
use crate::metrics::MetricSeries;
use crate::model::{mse_loss, AnyNetwork, Learner};
use crate::nn::{weight_norm, InitSpec, Network, NormScope, Parameterized, RmsPropState};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default = "default_teacher_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_drift_scale")]
    pub drift_scale: f64,
    #[serde(default = "default_input_shift_scale")]
    pub input_shift_scale: f64,
}

fn default_teacher_widths() -> Vec<usize> {
    vec![8, 32, 32, 1]
}

fn default_drift_scale() -> f64 {
    1.0
}

fn default_input_shift_scale() -> f64 {
    0.05
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            widths: default_teacher_widths(),
            drift_scale: default_drift_scale(),
            input_shift_scale: default_input_shift_scale(),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid teacher widths {:?}", self.widths)));
        }
        if *self.widths.last().unwrap() != 1 {
            return Err(Error::Config("teacher output width must be 1".into()));
        }
        if !(self.drift_scale >= 0.0 && self.drift_scale.is_finite()) {
            return Err(Error::Config(format!("drift_scale must be >= 0, got {}", self.drift_scale)));
        }
        if !(self.input_shift_scale >= 0.0 && self.input_shift_scale.is_finite()) {
            return Err(Error::Config(format!(
                "input_shift_scale must be >= 0, got {}",
                self.input_shift_scale
            )));
        }
        Ok(())
    }
}

/// Teacher network at task 0 plus its drift parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherProcess {
    pub teacher: Network,
    pub drift_scale: f64,
    pub input_shift_scale: f64,
    pub seed: u64,
}

impl TeacherProcess {
    pub fn new(cfg: &TeacherConfig, seed_value: u64) -> Result<Self> {
        cfg.validate()?;
        let teacher = Network::mlp(&cfg.widths, &InitSpec::he_uniform(seed::mix(seed_value, 0x7EAC)))?;
        Ok(Self {
            teacher,
            drift_scale: cfg.drift_scale,
            input_shift_scale: cfg.input_shift_scale,
            seed: seed_value,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTask {
    pub inputs: Tensor,
    pub targets: Tensor,
    /// Flattened teacher parameters that produced `targets`.
    pub teacher_params: Vec<f64>,
}

fn set_flat_params<P: Parameterized>(net: &mut P, flat: &[f64]) {
    let mut offset = 0;
    for (key, _) in net.block_keys() {
        let block = net.block_mut(key).expect("listed key");
        let n = block.len();
        block.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
}

fn unit_gaussian_direction<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Deterministic in `tp.seed`.
pub fn generate_task_sequence(tp: &TeacherProcess, n_tasks: usize, n_samples: usize) -> Result<Vec<RegressionTask>> {
    if n_tasks == 0 || n_samples == 0 {
        return Err(Error::Config("n_tasks and n_samples must be >= 1".into()));
    }
    let d = tp.teacher.input_width();
    let mut rng = seed::rng(seed::mix(tp.seed, 0xDA7A));
    let shift_dir = unit_gaussian_direction(&mut rng, d);
    let mut teacher = tp.teacher.clone();
    let mut params = teacher.flat_params();
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        if t > 0 && tp.drift_scale > 0.0 {
            let dir = unit_gaussian_direction(&mut rng, params.len());
            for (p, u) in params.iter_mut().zip(&dir) {
                *p += tp.drift_scale * u;
            }
            set_flat_params(&mut teacher, &params);
        }
        let shift = t as f64 * tp.input_shift_scale;
        let mut xs = Vec::with_capacity(n_samples * d);
        for _ in 0..n_samples {
            for s in &shift_dir {
                let z: f64 = StandardNormal.sample(&mut rng);
                xs.push(z + shift * s);
            }
        }
        let inputs = Tensor::matrix(n_samples, d, xs)?;
        let targets = teacher.predict(&inputs)?;
        tasks.push(RegressionTask {
            inputs,
            targets,
            teacher_params: params.clone(),
        });
    }
    Ok(tasks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    ResetNever,
    ResetEveryTask,
    InjectAtTask,
    SnpAtTask,
    ResetHeadAtTask,
}

impl ProtocolMode {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolMode::ResetNever => "reset_never",
            ProtocolMode::ResetEveryTask => "reset_every_task",
            ProtocolMode::InjectAtTask => "inject_at_task",
            ProtocolMode::SnpAtTask => "snp_at_task",
            ProtocolMode::ResetHeadAtTask => "reset_head_at_task",
        }
    }

    fn needs_task_index(self) -> bool {
        matches!(
            self,
            ProtocolMode::InjectAtTask | ProtocolMode::SnpAtTask | ProtocolMode::ResetHeadAtTask
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub mode: ProtocolMode,
    #[serde(default = "d_n_tasks")]
    pub n_tasks: usize,
    #[serde(default = "d_iterations")]
    pub iterations_per_task: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Dataset size per task.
    #[serde(default = "d_samples")]
    pub n_samples: usize,
    #[serde(default = "d_learner_widths")]
    pub learner_widths: Vec<usize>,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_rho")]
    pub decay_rho: f64,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default)]
    pub l2: f64,
    /// Task at whose start the `*_at_task` intervention fires.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervention_task: Option<usize>,
    /// Injection settings; defaults to a shared encoder with a two-layer head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injection: Option<InjectionConfig>,
    #[serde(default = "d_snp_lambda")]
    pub snp_lambda: f64,
    #[serde(default = "d_snp_sigma")]
    pub snp_sigma: f64,
    #[serde(default = "d_head_layers")]
    pub reset_head_layers: usize,
}

fn d_n_tasks() -> usize {
    20
}
fn d_iterations() -> usize {
    1000
}
fn d_batch() -> usize {
    64
}
fn d_samples() -> usize {
    1024
}
fn d_learner_widths() -> Vec<usize> {
    vec![8, 64, 64, 1]
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
fn d_snp_lambda() -> f64 {
    0.3
}
fn d_snp_sigma() -> f64 {
    0.01
}
fn d_head_layers() -> usize {
    2
}

impl ProtocolConfig {
    pub fn new(mode: ProtocolMode) -> Self {
        Self {
            mode,
            n_tasks: d_n_tasks(),
            iterations_per_task: d_iterations(),
            batch_size: d_batch(),
            n_samples: d_samples(),
            learner_widths: d_learner_widths(),
            learning_rate: d_lr(),
            decay_rho: d_rho(),
            epsilon: d_eps(),
            l2: 0.0,
            intervention_task: None,
            injection: None,
            snp_lambda: d_snp_lambda(),
            snp_sigma: d_snp_sigma(),
            reset_head_layers: d_head_layers(),
        }
    }

    /// `mode` firing at `task`.
    pub fn at_task(mode: ProtocolMode, task: usize) -> Self {
        Self {
            intervention_task: Some(task),
            ..Self::new(mode)
        }
    }

    pub fn injection_config(&self) -> InjectionConfig {
        self.injection
            .unwrap_or_else(|| InjectionConfig::shared(self.learner_widths.len().saturating_sub(3)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.iterations_per_task == 0 || self.batch_size == 0 || self.n_samples == 0 {
            return Err(Error::Config(
                "n_tasks, iterations_per_task, batch_size and n_samples must be >= 1".into(),
            ));
        }
        if self.learner_widths.len() < 3 || self.learner_widths.contains(&0) {
            return Err(Error::Config(format!(
                "learner_widths needs at least one hidden layer and no zero widths, got {:?}",
                self.learner_widths
            )));
        }
        if *self.learner_widths.last().unwrap() != 1 {
            return Err(Error::Config("learner output width must be 1".into()));
        }
        RmsPropState::new(self.learning_rate, self.decay_rho, self.epsilon)?;
        if !(self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        match (self.mode.needs_task_index(), self.intervention_task) {
            (true, None) => {
                return Err(Error::Config(format!(
                    "mode {} requires intervention_task",
                    self.mode.name()
                )))
            }
            (true, Some(t)) if t >= self.n_tasks => {
                return Err(Error::Config(format!(
                    "intervention_task {t} must be < n_tasks {}",
                    self.n_tasks
                )))
            }
            _ => {}
        }
        let depth = self.learner_widths.len() - 1;
        if self.mode == ProtocolMode::InjectAtTask && self.injection_config().split_k >= depth {
            return Err(Error::Config(format!(
                "injection split_k must be < {depth}"
            )));
        }
        if self.mode == ProtocolMode::ResetHeadAtTask && !(1..=depth).contains(&self.reset_head_layers) {
            return Err(Error::Config(format!(
                "reset_head_layers must lie in [1, {depth}]"
            )));
        }
        if self.mode == ProtocolMode::SnpAtTask {
            InterventionKind::Snp {
                lambda: self.snp_lambda,
                sigma: self.snp_sigma,
            }
            .validate()?;
        }
        Ok(())
    }
}

pub const TRAIN_MSE: &str = "train_mse";
pub const TASK_END_MSE: &str = "task_end_mse";
pub const WEIGHT_NORM: &str = "weight_norm";
pub const BOUNDARY_PROBE_CHANGE: &str = "boundary_probe_max_abs_change";

pub fn task_context(task: usize) -> String {
    format!("task:{task}")
}

fn fresh_learner(cfg: &ProtocolConfig, init: &InitSpec) -> Result<Learner> {
    let net = Network::mlp(&cfg.learner_widths, init)?;
    let opt = RmsPropState::new(cfg.learning_rate, cfg.decay_rho, cfg.epsilon)?;
    let mut learner = Learner::new(net, opt);
    learner.l2 = cfg.l2;
    Ok(learner)
}

fn dataset_mse(net: &AnyNetwork, task: &RegressionTask) -> Result<f64> {
    let pred = net.predict(&task.inputs)?;
    Ok(mse_loss(&pred, &task.targets)?.0)
}

/// Runs one protocol; a divergence ends the run with an abort record rather
/// than an error.
pub fn run_continual(cfg: &ProtocolConfig, tp: &TeacherProcess) -> Result<MetricSeries> {
    cfg.validate()?;
    if cfg.learner_widths[0] != tp.teacher.input_width() {
        return Err(Error::Config(format!(
            "learner input width {} differs from teacher input width {}",
            cfg.learner_widths[0],
            tp.teacher.input_width()
        )));
    }
    let tasks = generate_task_sequence(tp, cfg.n_tasks, cfg.n_samples)?;
    let mut series = MetricSeries::new(cfg.mode.name(), tp.seed);
    match train_tasks(cfg, tp.seed, &tasks, &mut series) {
        Ok(()) => Ok(series),
        Err(Error::Divergence(reason)) => {
            let step = series.records.last().map_or(0, |r| r.step);
            series.abort(step, format!("divergence: {reason}"));
            Ok(series)
        }
        Err(e) => Err(e),
    }
}

fn train_tasks(cfg: &ProtocolConfig, seed_value: u64, tasks: &[RegressionTask], series: &mut MetricSeries) -> Result<()> {
    let base_init = InitSpec::he_uniform(seed::mix(seed_value, 0x1EA2));
    let mut learner = fresh_learner(cfg, &base_init)?;
    let mut batch_rng = seed::rng(seed::mix(seed_value, 0xBA7C));
    series.push(task_context(0), 0, WEIGHT_NORM, weight_norm(&learner.net, NormScope::WeightsOnly));
    let iters = cfg.iterations_per_task;
    for (t, task) in tasks.iter().enumerate() {
        let ctx = task_context(t);
        let start = (t * iters) as u64;
        if t > 0 {
            boundary(cfg, t, task, &base_init, &mut learner, series, &ctx, start)?;
        }
        let mut idx = vec![0usize; cfg.batch_size];
        for i in 0..iters {
            for j in idx.iter_mut() {
                *j = batch_rng.random_range(0..cfg.n_samples);
            }
            let x = task.inputs.select_rows(&idx);
            let y = task.targets.select_rows(&idx);
            let loss = learner.train_mse(&x, &y)?;
            series.push(ctx.clone(), start + i as u64, TRAIN_MSE, loss);
        }
        let end = start + iters as u64;
        series.push(ctx.clone(), end, TASK_END_MSE, dataset_mse(&learner.net, task)?);
        series.push(ctx, end, WEIGHT_NORM, weight_norm(&learner.net, NormScope::WeightsOnly));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn boundary(
    cfg: &ProtocolConfig,
    t: usize,
    task: &RegressionTask,
    base_init: &InitSpec,
    learner: &mut Learner,
    series: &mut MetricSeries,
    ctx: &str,
    step: u64,
) -> Result<()> {
    let init = base_init.derive(t as u64);
    let fires = cfg.intervention_task == Some(t);
    let kind = match cfg.mode {
        ProtocolMode::ResetNever => return Ok(()),
        ProtocolMode::ResetEveryTask => {
            *learner = fresh_learner(cfg, &init)?;
            return Ok(());
        }
        _ if !fires => return Ok(()),
        ProtocolMode::InjectAtTask => {
            let probe = task.inputs.select_rows(&(0..cfg.batch_size.min(cfg.n_samples)).collect::<Vec<_>>());
            let before = learner.net.predict(&probe)?;
            inject_with_optimizer(&mut learner.net, &mut learner.opt, &cfg.injection_config(), &init)?;
            let after = learner.net.predict(&probe)?;
            series.push(ctx, step, BOUNDARY_PROBE_CHANGE, before.max_abs_diff(&after));
            return Ok(());
        }
        ProtocolMode::SnpAtTask => InterventionKind::Snp {
            lambda: cfg.snp_lambda,
            sigma: cfg.snp_sigma,
        },
        ProtocolMode::ResetHeadAtTask => InterventionKind::Reset {
            n_layers: cfg.reset_head_layers,
        },
    };
    apply_intervention(&mut learner.net, Some(&mut learner.opt), &kind, &init)
}

/// Per task, the first within-task iteration whose training MSE is at or
/// below `threshold`; `None` if it never gets there.
pub fn plasticity_metric(series: &MetricSeries, mse_threshold: f64) -> Result<Vec<Option<u64>>> {
    if !(mse_threshold > 0.0) {
        return Err(Error::Usage(format!("threshold must be > 0, got {mse_threshold}")));
    }
    let mut out: Vec<Option<u64>> = Vec::new();
    let mut current: Option<(String, u64)> = None;
    for r in series.metric(TRAIN_MSE) {
        if current.as_ref().map(|(c, _)| c != &r.context).unwrap_or(true) {
            out.push(None);
            current = Some((r.context.clone(), r.step));
        }
        let (_, first_step) = current.as_ref().expect("set above");
        let slot = out.last_mut().expect("pushed above");
        if slot.is_none() && r.value <= mse_threshold {
            *slot = Some(r.step - first_step);
        }
    }
    Ok(out)
}

/// End-of-task dataset MSE per task, in task order.
pub fn task_end_mse(series: &MetricSeries) -> Vec<f64> {
    series.values(TASK_END_MSE)
}
