//! Competing interventions: last-layer resets, Shrink-and-Perturb and naive
//! width doubling of the last two layers, plus the hidden-width scaling
//! helper used to build larger or smaller networks.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::{inject, inject_with_optimizer, InjectionConfig};
use crate::model::AnyNetwork;
use crate::nn::{BlockKey, BlockKind, InitSpec, Network, Parameterized, RmsPropState, Segment};
use crate::seed;

/// Intervention and its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterventionKind {
    /// Re-initialize the last `n_layers` layers.
    Reset { n_layers: usize },
    /// `w ← λw + σε` on every parameter.
    Snp { lambda: f64, sigma: f64 },
    /// Double the hidden width feeding the output layer.
    Widen {
        #[serde(default)]
        zero_new_outgoing: bool,
    },
    Inject(InjectionConfig),
    /// Drop the RMSProp accumulators of the last `n_layers` trainable layers.
    ResetOptimizer { n_layers: usize },
}

impl InterventionKind {
    pub fn name(&self) -> &'static str {
        match self {
            InterventionKind::Reset { .. } => "reset",
            InterventionKind::Snp { .. } => "snp",
            InterventionKind::Widen { .. } => "widen",
            InterventionKind::Inject(_) => "inject",
            InterventionKind::ResetOptimizer { .. } => "reset_optimizer",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InterventionKind::Snp { lambda, sigma } => {
                if !(0.0..=1.0).contains(lambda) {
                    return Err(Error::Config(format!("snp lambda must lie in [0, 1], got {lambda}")));
                }
                if !(*sigma >= 0.0) || !sigma.is_finite() {
                    return Err(Error::Config(format!("snp sigma must be >= 0, got {sigma}")));
                }
            }
            InterventionKind::Reset { n_layers } | InterventionKind::ResetOptimizer { n_layers } => {
                if *n_layers == 0 {
                    return Err(Error::Config("n_layers must be >= 1 in a schedule".into()));
                }
            }
            InterventionKind::Widen { .. } | InterventionKind::Inject(_) => {}
        }
        Ok(())
    }
}

/// An intervention with its application steps, or an adaptive weight-norm
/// trigger (injection only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSpec {
    pub intervention: InterventionKind,
    #[serde(default)]
    pub apply_steps: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptive_factor: Option<f64>,
}

impl InterventionSpec {
    pub fn at(intervention: InterventionKind, apply_steps: Vec<u64>) -> Self {
        Self {
            intervention,
            apply_steps,
            adaptive_factor: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intervention.validate()?;
        if self.apply_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "apply_steps must be strictly increasing, got {:?}",
                self.apply_steps
            )));
        }
        match (self.apply_steps.is_empty(), self.adaptive_factor) {
            (true, None) => Err(Error::Config(
                "intervention needs apply_steps or adaptive_factor".into(),
            )),
            (false, Some(_)) => Err(Error::Config(
                "apply_steps and adaptive_factor are mutually exclusive".into(),
            )),
            (true, Some(f)) => {
                if !(f > 0.0) {
                    return Err(Error::Config(format!("adaptive_factor must be > 0, got {f}")));
                }
                if !matches!(self.intervention, InterventionKind::Inject(_)) {
                    return Err(Error::Config("adaptive_factor applies to injection only".into()));
                }
                Ok(())
            }
            (false, None) => Ok(()),
        }
    }
}

/// Re-draws the last `n_layers` layers from `init` (layer `l` from stream `l`).
pub fn reset_last_layers(net: &Network, n_layers: usize, init: &InitSpec) -> Result<Network> {
    let depth = net.depth();
    if n_layers > depth {
        return Err(Error::Config(format!(
            "cannot reset {n_layers} layers of a depth-{depth} network"
        )));
    }
    let mut out = net.clone();
    if n_layers == 0 {
        return Ok(out);
    }
    for l in depth - n_layers..depth {
        out.layer_mut(l).reinitialize(l, init);
    }
    Ok(out)
}

/// `w ← λw + σε`, `ε ~ N(0, 1)` per entry, over every block in key order
/// (biases and frozen blocks included). `σ = 0` draws no noise.
pub fn shrink_and_perturb<P: Parameterized + Clone>(
    net: &P,
    lambda: f64,
    sigma: f64,
    seed_value: u64,
) -> Result<P> {
    InterventionKind::Snp { lambda, sigma }.validate()?;
    let mut out = net.clone();
    let mut rng = seed::rng(seed_value);
    for (key, _) in net.block_keys() {
        let block = out.block_mut(key).expect("key listed by block_keys");
        for w in block.iter_mut() {
            *w *= lambda;
            if sigma != 0.0 {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *w += sigma * eps;
            }
        }
    }
    Ok(out)
}

/// Doubles the width `K` of the penultimate layer's output.
///
/// The penultimate weight grows from `[K × N]` to `[2K × N]` keeping the
/// first `K` rows, its bias keeps the first `K` entries and zero-fills the
/// rest, and the output weight grows from `[A × K]` to `[A × 2K]` keeping
/// the first `K` columns. New weight entries come from `init`, or are zero
/// for the outgoing block when `zero_new_outgoing` is set.
pub fn widen_last_layers(net: &Network, init: &InitSpec, zero_new_outgoing: bool) -> Result<Network> {
    let depth = net.depth();
    if depth < 2 {
        return Err(Error::Config("widening needs at least 2 layers".into()));
    }
    let (p, last) = (depth - 2, depth - 1);
    let pen = net.layer(p);
    let (n_in, k) = (pen.in_width(), pen.out_width());
    let out_w = net.layer(last).out_width();

    let fresh_pen = init.draw_weights(p, 2 * k, n_in);
    let mut w1 = pen.weight().to_vec();
    w1.extend_from_slice(&fresh_pen[k * n_in..]);
    let mut b1 = pen.bias().to_vec();
    b1.resize(2 * k, 0.0);

    let fresh_last = init.draw_weights(last, out_w, 2 * k);
    let old_w2 = net.layer(last).weight();
    let mut w2 = Vec::with_capacity(out_w * 2 * k);
    for a in 0..out_w {
        w2.extend_from_slice(&old_w2[a * k..(a + 1) * k]);
        if zero_new_outgoing {
            w2.extend(std::iter::repeat_n(0.0, k));
        } else {
            w2.extend_from_slice(&fresh_last[a * 2 * k + k..(a + 1) * 2 * k]);
        }
    }
    let b2 = net.layer(last).bias().to_vec();

    let mut out = net.clone();
    out.layer_mut(p).replace_parameters(n_in, 2 * k, w1, b1);
    out.layer_mut(last).replace_parameters(2 * k, out_w, w2, b2);
    Network::new(out.input_width(), out.into_layers())
}

/// Scales hidden widths by `factor`, rounding to nearest (minimum 1); the
/// input and output widths are unchanged.
pub fn scale_hidden_widths(widths: &[usize], factor: f64) -> Result<Vec<usize>> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Config(format!("width factor must be > 0, got {factor}")));
    }
    let n = widths.len();
    Ok(widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            if i == 0 || i + 1 == n {
                w
            } else {
                ((w as f64 * factor).round() as usize).max(1)
            }
        })
        .collect())
}

fn widen_optimizer_state(opt: &mut RmsPropState, net_before: &Network) {
    let depth = net_before.depth();
    let (p, last) = (depth - 2, depth - 1);
    let k = net_before.layer(p).out_width();
    let n_in = net_before.layer(p).in_width();
    let out_w = net_before.layer(last).out_width();
    let kw = |l| BlockKey::body(l, BlockKind::Weight);
    let kb = |l| BlockKey::body(l, BlockKind::Bias);
    if let Some(mut nu) = opt.remove_nu(&kw(p)) {
        nu.resize(2 * k * n_in, 0.0);
        opt.insert_nu(kw(p), nu);
    }
    if let Some(mut nu) = opt.remove_nu(&kb(p)) {
        nu.resize(2 * k, 0.0);
        opt.insert_nu(kb(p), nu);
    }
    if let Some(nu) = opt.remove_nu(&kw(last)) {
        let mut grown = Vec::with_capacity(out_w * 2 * k);
        for a in 0..out_w {
            grown.extend_from_slice(&nu[a * k..(a + 1) * k]);
            grown.extend(std::iter::repeat_n(0.0, k));
        }
        opt.insert_nu(kw(last), grown);
    }
}

/// Applies an intervention to a network and, when given, its optimizer
/// state. Online and target networks receive the same call with the same
/// `init`, so both draw identical new parameters.
pub fn apply_intervention(
    net: &mut AnyNetwork,
    opt: Option<&mut RmsPropState>,
    kind: &InterventionKind,
    init: &InitSpec,
) -> Result<()> {
    kind.validate()?;
    match kind {
        InterventionKind::Inject(cfg) => match opt {
            Some(opt) => inject_with_optimizer(net, opt, cfg, init)?,
            None => *net = AnyNetwork::Injected(inject(net, cfg, init)?),
        },
        InterventionKind::Snp { lambda, sigma } => {
            *net = shrink_and_perturb(net, *lambda, *sigma, init.seed)?;
        }
        InterventionKind::Reset { n_layers } => {
            let plain = net
                .as_plain()
                .ok_or_else(|| Error::Config("reset applies to plain networks only".into()))?;
            let depth = plain.depth();
            let reset = reset_last_layers(plain, *n_layers, init)?;
            *net = AnyNetwork::Plain(reset);
            if let Some(opt) = opt {
                opt.reset_where(|k| k.segment == Segment::Body && k.layer + n_layers >= depth);
            }
        }
        InterventionKind::Widen { zero_new_outgoing } => {
            let plain = net
                .as_plain()
                .ok_or_else(|| Error::Config("widening applies to plain networks only".into()))?;
            let widened = widen_last_layers(plain, init, *zero_new_outgoing)?;
            if let Some(opt) = opt {
                widen_optimizer_state(opt, plain);
            }
            *net = AnyNetwork::Plain(widened);
        }
        InterventionKind::ResetOptimizer { n_layers } => {
            if let Some(opt) = opt {
                let (segment, depth) = match &*net {
                    AnyNetwork::Plain(n) => (Segment::Body, n.depth()),
                    AnyNetwork::Injected(n) => (
                        Segment::Residual(n.generations().len() - 1),
                        n.newest_residual().depth(),
                    ),
                };
                opt.reset_where(|k| k.segment == segment && k.layer + n_layers >= depth);
            }
        }
    }
    Ok(())
}
