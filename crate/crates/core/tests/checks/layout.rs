use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlsr::model::{build_model, ModelConfig, OutputHead};
use xlsr::ops::{depth_to_space, space_to_depth};
use xlsr::quant::{calibrate, quantize_model};
use xlsr::{Network, QuantParams, Shape, Tensor};

/// Random tensors per block size for which a round trip through
/// `depth_to_space` and `space_to_depth` is not the identity.
pub fn round_trip_failures(blocks: std::ops::RangeInclusive<usize>, per_block: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut failures = 0;
    for block in blocks {
        for _ in 0..per_block {
            let shape = Shape::new(
                rng.random_range(1..=2),
                rng.random_range(1..=5),
                rng.random_range(1..=5),
                block * block * rng.random_range(1..=4),
            );
            let x = Tensor::<f32>::from_fn(shape, |_, _, _, _| rng.random());
            let up = depth_to_space(&x, block).unwrap();
            let expected = Shape::new(shape.n, shape.h * block, shape.w * block, shape.c / (block * block));
            if up.shape() != expected || space_to_depth(&up, block).unwrap() != x {
                failures += 1;
            }
        }
    }
    failures
}

/// A 1x1 pixel with channels 1, 2, 3, 4 becomes the 2x2 image [[1, 2], [3, 4]].
pub fn channel_order_example_holds() -> bool {
    let x = Tensor::<f32>::new(Shape::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = depth_to_space(&x, 2).unwrap();
    y.shape() == Shape::new(1, 2, 2, 1) && y.data() == [1.0, 2.0, 3.0, 4.0]
}

/// Output elements outside `[0, 1]` over `settings` random weight draws of a
/// clipped-head model, with weight magnitudes spread over two decades.
pub fn clipped_head_violations(settings: usize) -> usize {
    let config = ModelConfig {
        scale: 2,
        feature_channels: 8,
        num_gblocks: 1,
        gblock_groups: 4,
        skip_channels: 4,
        ..ModelConfig::default()
    };
    assert_eq!(config.head, OutputHead::ClippedRelu);
    let network = Network::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x = Tensor::from_fn(Shape::new(1, 6, 6, 3), |_, _, _, _| rng.random_range(0.0f32..1.0));
    let mut params = build_model(&config, 0).unwrap();
    let mut violations = 0;
    for _ in 0..settings {
        let spread = rng.random_range(0.1f32..10.0);
        for a in params.arrays_mut() {
            for v in a.iter_mut() {
                *v = rng.random_range(-spread..spread);
            }
        }
        let y = network.forward(&params, &x).unwrap();
        violations += y.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    }
    violations
}

/// Output parameters of default clipped-head models quantized from several seeds.
pub fn clipped_head_output_params(seeds: u64) -> Vec<(QuantParams, bool)> {
    let config = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let images: Vec<Tensor> =
        (0..2).map(|_| Tensor::from_fn(Shape::new(1, 8, 8, 3), |_, _, _, _| rng.random_range(0.0f32..1.0))).collect();
    (0..seeds)
        .map(|seed| {
            let params = build_model(&config, seed).unwrap();
            let qm = quantize_model(&params, &config, &calibrate(&params, &config, &images).unwrap()).unwrap();
            (qm.output_qp, qm.pixel_requant.is_none())
        })
        .collect()
}

pub const UNIT: QuantParams = QuantParams { scale: 1.0 / 255.0, zero_point: 0 };
