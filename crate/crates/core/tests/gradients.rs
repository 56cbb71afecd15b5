//! Central finite-difference checks of every backward pass.

use plasticity::injection::{inject, InjectionConfig, InjectionVariant};
use plasticity::model::AnyNetwork;
use plasticity::nn::{InitSpec, Network, Parameterized};
use plasticity::seed;
use plasticity::Tensor;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
// Denominator floor: below it the error is judged in absolute terms, which
// keeps round-off of near-zero derivatives from dominating.
const FLOOR: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn random_tensor(rows: usize, cols: usize, seed_value: u64) -> Tensor {
    let mut rng = seed::rng(seed_value);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Scalar objective `Σ c ⊙ f(x)`.
fn objective(net: &AnyNetwork, x: &Tensor, c: &Tensor) -> f64 {
    let y = net.predict(x).unwrap();
    y.values().iter().zip(c.values()).map(|(a, b)| a * b).sum()
}

fn check(net: &AnyNetwork, label: &str) {
    let x = random_tensor(5, net.input_width(), 11);
    let c = random_tensor(5, net.output_width(), 12);
    let (_, cache) = net.forward(&x).unwrap();
    let grads = net.backward(&cache, &c).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (key, trainable) in net.block_keys() {
        let analytic = grads.get(&key);
        if !trainable {
            assert!(analytic.is_none(), "{label}: frozen block {key} received a gradient");
            continue;
        }
        let analytic = analytic.unwrap_or_else(|| panic!("{label}: missing gradient for {key}"));
        for i in 0..analytic.len() {
            let mut plus = net.clone();
            plus.block_mut(key).unwrap()[i] += H;
            let mut minus = net.clone();
            minus.block_mut(key).unwrap()[i] -= H;
            let fd = (objective(&plus, &x, &c) - objective(&minus, &x, &c)) / (2.0 * H);
            let e = rel_err(fd, analytic[i]);
            assert!(e < TOL, "{label}: {key}[{i}] fd {fd} analytic {} rel {e}", analytic[i]);
            worst = worst.max(e);
            checked += 1;
        }
    }
    for i in 0..x.values().len() {
        let mut xp = x.clone();
        xp.values_mut()[i] += H;
        let mut xm = x.clone();
        xm.values_mut()[i] -= H;
        let fd = (objective(net, &xp, &c) - objective(net, &xm, &c)) / (2.0 * H);
        let e = rel_err(fd, grads.input.values()[i]);
        assert!(e < TOL, "{label}: input[{i}] fd {fd} analytic {} rel {e}", grads.input.values()[i]);
    }
    assert!(checked > 0, "{label}: nothing to check");
    eprintln!("{label}: {checked} parameters, worst rel err {worst:.2e}");
}

/// Moves every parameter (frozen ones too) off its initial value so the
/// residual and correction heads differ.
fn jitter(net: &mut AnyNetwork, seed_value: u64) {
    let mut rng = seed::rng(seed_value);
    for (key, _) in net.block_keys() {
        for w in net.block_mut(key).unwrap() {
            *w += rng.random_range(-0.2..0.2);
        }
    }
}

fn plain(seed_value: u64) -> Network {
    Network::mlp(&[4, 6, 5, 3], &InitSpec::he_uniform(seed_value)).unwrap()
}

#[test]
fn plain_network() {
    let mut net = AnyNetwork::Plain(plain(1));
    jitter(&mut net, 2);
    check(&net, "plain");
}

#[test]
fn plain_network_with_frozen_layer() {
    let mut p = plain(3);
    p.layer_mut(1).set_trainable(false);
    let mut net = AnyNetwork::Plain(p);
    jitter(&mut net, 4);
    check(&net, "plain-frozen");
}

#[test]
fn injected_variants() {
    let variants = [
        InjectionVariant::SharedEncoder,
        InjectionVariant::WholeNet,
        InjectionVariant::WholeNetCopyEncoder,
    ];
    for (i, variant) in variants.into_iter().enumerate() {
        for split_k in [0, 1, 2] {
            let cfg = InjectionConfig::shared(split_k).with_variant(variant);
            let base = AnyNetwork::Plain(plain(10 + i as u64));
            let mut net = AnyNetwork::Injected(inject(&base, &cfg, &InitSpec::he_uniform(77)).unwrap());
            jitter(&mut net, 5);
            check(&net, &format!("{variant:?}/k={split_k}"));
        }
    }
}

#[test]
fn injected_ablations_and_stacking() {
    let base = AnyNetwork::Plain(plain(20));
    let mut cfg = InjectionConfig::shared(1);
    cfg.freeze_old = false;
    let mut net = AnyNetwork::Injected(inject(&base, &cfg, &InitSpec::he_uniform(1)).unwrap());
    jitter(&mut net, 6);
    check(&net, "unfrozen-old-head");

    let mut cfg = InjectionConfig::shared(1);
    cfg.output_correction = false;
    let mut net = AnyNetwork::Injected(inject(&base, &cfg, &InitSpec::he_uniform(2)).unwrap());
    jitter(&mut net, 7);
    check(&net, "no-output-correction");

    let cfg = InjectionConfig::shared(1);
    let mut net = base.clone();
    for g in 0..3 {
        net = AnyNetwork::Injected(inject(&net, &cfg, &InitSpec::he_uniform(30 + g)).unwrap());
    }
    jitter(&mut net, 8);
    check(&net, "three-generations");
}

#[test]
fn spectral_normalized() {
    let mut p = plain(40);
    p.enable_spectral_penultimate().unwrap();
    p.enable_spectral(0).unwrap();
    let mut net = AnyNetwork::Plain(p);
    jitter(&mut net, 9);
    check(&net, "spectral");

    let mut p = plain(41);
    p.enable_spectral_penultimate().unwrap();
    let injected = inject(&AnyNetwork::Plain(p), &InjectionConfig::shared(1), &InitSpec::he_uniform(3)).unwrap();
    let mut net = AnyNetwork::Injected(injected);
    jitter(&mut net, 10);
    check(&net, "spectral-injected");
}
