//! Monte Carlo containment: concrete forward passes from inside a box never
//! leave the propagated bounds.

use citrus_core::interval::{margin_bounds, propagate_box};
use citrus_core::{init_weights, Arch, IntervalTensor, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn samples_stay_inside_bounds(
        seed in 0u64..100_000,
        dim in 1usize..5,
        width in 1usize..12,
        depth in 1usize..4,
        classes in 2usize..5,
        eps in 0.0f64..0.5,
    ) {
        let mut sizes = vec![dim];
        sizes.extend(std::iter::repeat_n(width, depth));
        sizes.push(classes);
        let net = init_weights(&Arch(sizes), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let center = Tensor::vector((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let region = IntervalTensor::ball(&center, eps, None).unwrap();
        let out = propagate_box(&net, &region).unwrap();
        let y = rng.random_range(0..classes);
        let margins = margin_bounds(&net, &region, y).unwrap();
        for _ in 0..500 {
            let x = Tensor::vector(
                center.data().iter().map(|c| c + rng.random_range(-eps..=eps)).collect(),
            );
            let z = net.forward(&x).unwrap();
            prop_assert!(out.contains(&z));
            for i in 0..classes {
                let m = z.data()[i] - z.data()[y];
                prop_assert!(m <= margins.upper.data()[i] + 1e-12);
            }
        }
    }

    #[test]
    fn wider_boxes_give_wider_bounds(seed in 0u64..10_000, eps in 0.0f64..0.3, extra in 0.0f64..0.3) {
        let net = init_weights(&Arch(vec![2, 8, 2]), seed).unwrap();
        let c = Tensor::vector(vec![0.2, -0.4]);
        let small = propagate_box(&net, &IntervalTensor::ball(&c, eps, None).unwrap()).unwrap();
        let big = propagate_box(&net, &IntervalTensor::ball(&c, eps + extra, None).unwrap()).unwrap();
        for k in 0..2 {
            prop_assert!(big.lower().data()[k] <= small.lower().data()[k] + 1e-12);
            prop_assert!(big.upper().data()[k] >= small.upper().data()[k] - 1e-12);
        }
    }
}
