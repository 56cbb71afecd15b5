use plasticity::injection::{inject, inject_with_optimizer, FrozenFlow, InjectionConfig, InjectionVariant};
use plasticity::model::{AnyNetwork, Learner};
use plasticity::nn::{Activation, InitSpec, Network, Parameterized, RmsPropState};
use plasticity::{seed, Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

const VARIANTS: [InjectionVariant; 3] = [
    InjectionVariant::SharedEncoder,
    InjectionVariant::WholeNet,
    InjectionVariant::WholeNetCopyEncoder,
];

/// Plain dense forward written independently of the crate.
fn reference_forward(net: &Network, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in net.layers() {
        let w = layer.effective_weight();
        let mut next = Vec::with_capacity(layer.out_width());
        for o in 0..layer.out_width() {
            let mut z = layer.bias()[o];
            for i in 0..layer.in_width() {
                z += w[o * layer.in_width() + i] * h[i];
            }
            next.push(match layer.activation() {
                Activation::Relu => z.max(0.0),
                Activation::Identity => z,
            });
        }
        h = next;
    }
    h
}

fn reference_injected(net: &plasticity::injection::InjectedNetwork, x: &[f64]) -> Vec<f64> {
    let z = reference_forward(net.encoder(), x);
    let mut out = reference_forward(net.base_head(), &z);
    for g in net.generations() {
        let r = reference_forward(g.residual(), &z);
        let c = g.correction().map(|c| reference_forward(c, &z));
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i] - c.as_ref().map_or(0.0, |c| c[i]);
        }
    }
    out
}

fn random_input(rows: usize, cols: usize, seed_value: u64) -> Tensor {
    let mut rng = seed::rng(seed_value);
    let special = [0.0, -0.0, 1e-300, -1e-300, 1e6, -1e6];
    let values = (0..rows * cols)
        .map(|_| {
            if rng.random::<f64>() < 0.1 {
                special[rng.random_range(0..special.len())]
            } else {
                rng.random_range(-3.0..3.0)
            }
        })
        .collect();
    Tensor::matrix(rows, cols, values).unwrap()
}

fn arb_widths() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..8, 2..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn injection_is_output_neutral_bitwise(
        widths in arb_widths(),
        net_seed in any::<u64>(),
        x_seed in any::<u64>(),
        variant_idx in 0usize..3,
        k_frac in 0.0f64..1.0,
        rows in 1usize..6,
    ) {
        let net = Network::mlp(&widths, &InitSpec::he_uniform(net_seed)).unwrap();
        let depth = net.depth();
        let k = ((depth as f64) * k_frac) as usize % depth;
        let cfg = InjectionConfig::shared(k).with_variant(VARIANTS[variant_idx]);
        let x = random_input(rows, widths[0], x_seed);
        let before = net.predict(&x).unwrap();
        let injected = inject(&AnyNetwork::Plain(net), &cfg, &InitSpec::he_uniform(net_seed ^ 1)).unwrap();
        let after = injected.predict(&x).unwrap();
        prop_assert!(before.bitwise_eq(&after));
    }

    #[test]
    fn stacked_injections_preserve_trainable_count(
        widths in arb_widths(),
        net_seed in any::<u64>(),
        whole in any::<bool>(),
        k_frac in 0.0f64..1.0,
        n in 1usize..4,
    ) {
        let net = AnyNetwork::Plain(Network::mlp(&widths, &InitSpec::he_uniform(net_seed)).unwrap());
        let depth = widths.len() - 1;
        let k = ((depth as f64) * k_frac) as usize % depth;
        let variant = if whole { InjectionVariant::WholeNet } else { InjectionVariant::SharedEncoder };
        let cfg = InjectionConfig::shared(k).with_variant(variant);
        let count = net.trainable_param_count();
        let mut cur = net;
        for g in 0..n {
            cur = AnyNetwork::Injected(inject(&cur, &cfg, &InitSpec::he_uniform(g as u64)).unwrap());
            prop_assert_eq!(cur.trainable_param_count(), count);
        }
    }

    #[test]
    fn matches_reference_after_training_drift(
        widths in arb_widths(),
        net_seed in any::<u64>(),
        variant_idx in 0usize..3,
        n in 1usize..3,
    ) {
        let net = AnyNetwork::Plain(Network::mlp(&widths, &InitSpec::he_uniform(net_seed)).unwrap());
        let depth = widths.len() - 1;
        let cfg = InjectionConfig::shared(depth - 1).with_variant(VARIANTS[variant_idx]);
        let mut cur = net;
        for g in 0..n {
            cur = AnyNetwork::Injected(inject(&cur, &cfg, &InitSpec::he_uniform(g as u64)).unwrap());
        }
        let mut rng = seed::rng(net_seed);
        for (key, _) in cur.block_keys() {
            for w in cur.block_mut(key).unwrap() {
                *w += rng.random_range(-0.3..0.3);
            }
        }
        let x = random_input(4, widths[0], net_seed ^ 7);
        let y = cur.predict(&x).unwrap();
        let AnyNetwork::Injected(inet) = &cur else { unreachable!() };
        for r in 0..4 {
            let expect = reference_injected(inet, x.row(r));
            for (a, b) in y.row(r).iter().zip(&expect) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{} vs {}", a, b);
            }
        }
    }
}

#[test]
fn training_moves_only_trainable_blocks() {
    let net = Network::mlp(&[3, 8, 8, 2], &InitSpec::he_uniform(5)).unwrap();
    let mut learner = Learner::new(net, RmsPropState::new(1e-2, 0.9, 1e-8).unwrap());
    inject_with_optimizer(
        &mut learner.net,
        &mut learner.opt,
        &InjectionConfig::shared(1),
        &InitSpec::he_uniform(6),
    )
    .unwrap();
    let before = learner.net.clone();
    let x = random_input(8, 3, 1);
    let y = random_input(8, 2, 2);
    learner.train_mse(&x, &y).unwrap();
    for (key, trainable) in before.block_keys() {
        let changed = before.block(key) != learner.net.block(key);
        assert_eq!(changed, trainable, "{key}");
    }
}

#[test]
fn frozen_flow_stop_drops_frozen_head_encoder_gradient() {
    let base = AnyNetwork::Plain(Network::mlp(&[3, 6, 6, 2], &InitSpec::he_uniform(9)).unwrap());
    let inet = inject(&base, &InjectionConfig::shared(1), &InitSpec::he_uniform(10)).unwrap();
    let x = random_input(4, 3, 3);
    let (_, cache) = inet.forward(&x).unwrap();
    let dout = random_input(4, 2, 4);
    let full = inet.backward_with(&cache, &dout, FrozenFlow::Propagate).unwrap();
    let stop = inet.backward_with(&cache, &dout, FrozenFlow::Stop).unwrap();
    // the frozen base head and correction stop feeding the encoder
    let key = inet.block_keys()[0].0;
    assert_ne!(full.get(&key), stop.get(&key));
}

#[test]
fn stale_cache_is_rejected() {
    let mut net = Network::mlp(&[2, 3, 1], &InitSpec::he_uniform(1)).unwrap();
    let x = random_input(2, 2, 1);
    let (y, cache) = net.forward(&x).unwrap();
    net.layer_mut(0).weight_mut()[0] += 1.0;
    assert!(matches!(net.backward(&cache, &y), Err(Error::Usage(_))));
}
