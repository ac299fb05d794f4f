mod common;

use common::*;
use pcv_core::net::{Head, ResNet4Config};
use pcv_core::prune::{apply_prune, compute_plan};
use pcv_core::train::init_network;
use proptest::prelude::*;

fn arch() -> ResNet4Config {
    ResNet4Config {
        input_shape: [1, 8, 8],
        num_classes: 3,
        channels: 3,
        stem_stride: 2,
        head: Head::Flatten,
    }
}

#[test]
fn standard_ratios_hold_every_invariant() {
    let ratios: Vec<f64> = (1..=8).map(|k| k as f64 / 10.0).collect();
    for seed in [10, 20, 30] {
        let v = prune_violations(&init_network(&arch(), seed).unwrap(), &ratios);
        assert!(v.is_empty(), "{v:?}");
    }
}

#[test]
fn ties_break_by_layer_then_index() {
    let net = init_network(&arch(), 1).unwrap();
    let mut layers = net.layers().to_vec();
    for l in &mut layers {
        if let pcv_core::Layer::Conv2d(c) = l {
            c.weight.data_mut().iter_mut().for_each(|w| *w = 0.5);
        }
    }
    let net = pcv_core::Network::new(net.input_shape(), net.num_classes(), layers).unwrap();
    let plan = compute_plan(&net, 0.5).unwrap();
    let first = &plan.layers[0];
    let k = plan.pruned_count();
    assert_eq!(k, plan.total_prunable.div_ceil(2));
    let expected: Vec<usize> = (0..k.min(first.weight_count)).collect();
    assert_eq!(first.pruned, expected);
    assert_eq!(plan.threshold, 0.5);
}

#[test]
fn pruning_twice_keeps_earlier_masks() {
    let net = init_network(&arch(), 4).unwrap();
    let once = apply_prune(&net, &compute_plan(&net, 0.3).unwrap()).unwrap();
    let twice = apply_prune(&once, &compute_plan(&once, 0.6).unwrap()).unwrap();
    for (li, m) in once.masks() {
        let m2 = &twice.masks()[li];
        assert!((0..m.len()).all(|i| !m.is_pruned(i) || m2.is_pruned(i)));
    }
}

#[test]
fn bad_ratios_are_rejected() {
    let net = init_network(&arch(), 1).unwrap();
    for r in [-0.1, 1.0, f64::NAN] {
        assert!(compute_plan(&net, r).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn random_ratio_sets_hold_every_invariant(seed in 0u64..1000, mut ratios in prop::collection::vec(0.0f64..0.99, 1..6)) {
        ratios.sort_by(f64::total_cmp);
        let v = prune_violations(&init_network(&arch(), seed).unwrap(), &ratios);
        prop_assert!(v.is_empty(), "{:?}", v);
    }
}
