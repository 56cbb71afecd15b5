use plasticity::injection::{inject, InjectionConfig};
use plasticity::interventions::{reset_last_layers, scale_hidden_widths, shrink_and_perturb, widen_last_layers};
use plasticity::model::AnyNetwork;
use plasticity::nn::{InitSpec, Network, Parameterized};
use plasticity::{seed, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn inputs(rows: usize, cols: usize, seed_value: u64) -> Tensor {
    let mut rng = seed::rng(seed_value);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn snp_identity_on_plain_and_injected(widths in prop::collection::vec(1usize..7, 3..6), s in any::<u64>()) {
        let net = AnyNetwork::Plain(Network::mlp(&widths, &InitSpec::he_uniform(s)).unwrap());
        let same = shrink_and_perturb(&net, 1.0, 0.0, s).unwrap();
        prop_assert_eq!(bits(&same.flat_params()), bits(&net.flat_params()));
        let inj = AnyNetwork::Injected(inject(&net, &InjectionConfig::shared(1), &InitSpec::he_uniform(1)).unwrap());
        let same = shrink_and_perturb(&inj, 1.0, 0.0, s).unwrap();
        prop_assert_eq!(bits(&same.flat_params()), bits(&inj.flat_params()));
    }

    #[test]
    fn widen_with_zero_outgoing_is_exact(widths in prop::collection::vec(1usize..7, 3..6), s in any::<u64>()) {
        let net = Network::mlp(&widths, &InitSpec::he_uniform(s)).unwrap();
        let wide = widen_last_layers(&net, &InitSpec::he_uniform(s ^ 3), true).unwrap();
        let x = inputs(100, widths[0], s);
        let d = net.predict(&x).unwrap().max_abs_diff(&wide.predict(&x).unwrap());
        prop_assert_eq!(d, 0.0);
    }

    #[test]
    fn reset_changes_exactly_the_declared_layers(widths in prop::collection::vec(1usize..7, 3..6), s in any::<u64>(), n_frac in 0.0f64..1.0) {
        let net = Network::mlp(&widths, &InitSpec::he_uniform(s)).unwrap();
        let depth = net.depth();
        let n = ((depth + 1) as f64 * n_frac) as usize;
        let out = reset_last_layers(&net, n, &InitSpec::he_uniform(s.wrapping_add(1))).unwrap();
        for l in 0..depth {
            let same = bits(net.layer(l).weight()) == bits(out.layer(l).weight());
            if l + n < depth {
                prop_assert!(same, "layer {} changed", l);
                prop_assert_eq!(bits(net.layer(l).bias()), bits(out.layer(l).bias()));
            } else {
                prop_assert!(!same, "layer {} not redrawn", l);
                prop_assert!(out.layer(l).bias().iter().all(|b| *b == 0.0));
            }
        }
    }
}

#[test]
fn snp_hand_scaling() {
    let mut net = Network::mlp(&[1, 2, 1], &InitSpec::he_uniform(0)).unwrap();
    net.layer_mut(0).weight_mut().copy_from_slice(&[2.0, -4.0]);
    let out = shrink_and_perturb(&net, 0.5, 0.0, 9).unwrap();
    assert_eq!(out.layer(0).weight(), &[1.0, -2.0]);
}

#[test]
fn widening_shapes() {
    let net = Network::mlp(&[6, 5, 4, 3], &InitSpec::he_uniform(2)).unwrap();
    let wide = widen_last_layers(&net, &InitSpec::he_uniform(3), false).unwrap();
    assert_eq!(wide.widths(), vec![6, 5, 8, 3]);
    assert_eq!(wide.layer(1).weight().len(), 8 * 5);
    assert_eq!(wide.layer(2).weight().len(), 3 * 8);
    assert_eq!(&wide.layer(1).weight()[..20], net.layer(1).weight());
    assert!(wide.layer(1).bias()[4..].iter().all(|b| *b == 0.0));
    for a in 0..3 {
        assert_eq!(&wide.layer(2).weight()[a * 8..a * 8 + 4], &net.layer(2).weight()[a * 4..a * 4 + 4]);
    }
}

#[test]
fn sqrt_two_width_steps() {
    let s2 = std::f64::consts::SQRT_2;
    assert_eq!(scale_hidden_widths(&[4, 64, 64, 2], s2).unwrap(), vec![4, 91, 91, 2]);
    assert_eq!(scale_hidden_widths(&[4, 64, 64, 2], 1.0).unwrap(), vec![4, 64, 64, 2]);
    let count = |w: &[usize]| Network::mlp(w, &InitSpec::he_uniform(0)).unwrap().total_param_count() as f64;
    let base = [16, 64, 64, 4];
    let half = scale_hidden_widths(&scale_hidden_widths(&base, 1.0 / s2).unwrap(), 1.0 / s2).unwrap();
    let ratio = count(&half) / count(&base);
    // only the hidden-to-hidden block scales quadratically
    assert!(ratio > 0.25 && ratio < 0.55, "ratio {ratio}");
    assert!(scale_hidden_widths(&base, 0.0).is_err());
}
