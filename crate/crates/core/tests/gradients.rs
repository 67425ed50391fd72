//! Reverse-mode parameter gradients against central finite differences of
//! the direct (non-graph) loss functions.

use citrus_core::graph::CompGraph;
use citrus_core::interval::ibp_loss;
use citrus_core::losses::cross_entropy;
use citrus_core::objective::{Clean, Ibp, Objective, StepContext};
use citrus_core::{init_weights, AttackConfig, Arch, Network, Sample};
use proptest::prelude::*;

const H: f64 = 1e-5;

fn direct_loss(kind: &str, net: &Network, batch: &[Sample], eps: f64) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|s| match kind {
            "clean" => cross_entropy(net, &s.x, s.y).unwrap(),
            _ => ibp_loss(net, &s.x, s.y, eps, None).unwrap(),
        })
        .sum();
    total / batch.len() as f64
}

/// Norm-wise relative error `|g - fd|_inf / max(|g|_inf, |fd|_inf)`.
fn max_relative_error(obj: &dyn Objective, net: &Network, batch: &[Sample], eps: f64) -> f64 {
    let ctx = StepContext {
        eps,
        tau: 0.0,
        attack: AttackConfig::default(),
        range: None,
        width_penalty: 0.0,
    };
    let mut graph = CompGraph::new();
    let bound = net.bind(&mut graph);
    let out = obj.batch_loss(net, &mut graph, &bound, batch, &ctx).unwrap();
    let value = graph.value(out.loss).item().unwrap();
    assert!((value - direct_loss(obj.name(), net, batch, eps)).abs() < 1e-12);
    let grads = graph.backward(out.loss).unwrap().params(&graph);

    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (p, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let mut plus = net.clone();
            plus.params_mut()[p].data_mut()[k] += H;
            let mut minus = net.clone();
            minus.params_mut()[p].data_mut()[k] -= H;
            let fd = (direct_loss(obj.name(), &plus, batch, eps)
                - direct_loss(obj.name(), &minus, batch, eps))
                / (2.0 * H);
            diff = diff.max((g.data()[k] - fd).abs());
            scale = scale.max(g.data()[k].abs()).max(fd.abs());
        }
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Initialised weights with non-zero biases, so no pre-activation sits
/// exactly on a ReLU kink.
fn random_net(sizes: Vec<usize>, seed: u64) -> Network {
    let mut net = init_weights(&Arch(sizes), seed).unwrap();
    for (p, t) in net.params_mut().into_iter().enumerate() {
        if p % 2 == 1 {
            for (k, b) in t.data_mut().iter_mut().enumerate() {
                *b = 0.3 * ((seed + 7 * k as u64 + 13 * p as u64) as f64).sin();
            }
        }
    }
    net
}

fn batch(seed: u64, n: usize, classes: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let t = (seed as f64 + 1.7 * i as f64).sin();
            Sample::new(vec![t, (3.0 * t).cos(), 0.5 * t], i % classes)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn clean_gradients_match(seed in 0u64..10_000, width in 2usize..10, classes in 2usize..4) {
        let net = random_net(vec![3, width, width, classes], seed);
        let err = max_relative_error(&Clean, &net, &batch(seed, 3, classes), 0.0);
        prop_assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn ibp_gradients_match(seed in 0u64..10_000, width in 2usize..10, eps in 0.01f64..0.3) {
        let net = random_net(vec![3, width, 3], seed);
        let err = max_relative_error(&Ibp, &net, &batch(seed, 3, 3), eps);
        prop_assert!(err < 1e-6, "relative error {err}");
    }
}
