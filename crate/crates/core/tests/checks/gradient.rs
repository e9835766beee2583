//! Central finite differences in f64 against every analytic gradient.
//! Each check returns the worst relative error over its trials.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlsr::model::{build_model, ModelConfig, Network, OutputHead};
use xlsr::ops::{
    self, charbonnier_loss, charbonnier_loss_grad, clipped_relu_grad, concat_channels, concat_channels_grad,
    conv2d_grad, relu_grad, space_to_depth, ConvSpec,
};
use xlsr::{ModelParams, Shape, Tensor};

pub const TRIALS: usize = 100;
const H: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// Values at least `gap` away from every point in `kinks`.
fn away_from(shape: Shape, kinks: &[f64], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| loop {
        let v: f64 = rng.random_range(-0.5..1.5);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn perturbed(t: &Tensor<f64>, i: usize, d: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[i] += d;
    Tensor::new(t.shape(), data).unwrap()
}

/// Checks `analytic[i]` against the central difference of `f` along coordinate `i`.
fn check_coord(f: impl Fn(f64) -> f64, analytic: f64, worst: &mut f64) {
    let numeric = (f(H) - f(-H)) / (2.0 * H);
    *worst = worst.max(rel_err(analytic, numeric));
}

fn random_shape(rng: &mut ChaCha8Rng, c: usize) -> Shape {
    Shape::new(rng.random_range(1..=2), rng.random_range(2..=5), rng.random_range(2..=5), c)
}

pub fn conv2d() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let groups = [1, 2, 4][rng.random_range(0..3)];
        let kernel = [1, 3][rng.random_range(0..2)];
        let cin = groups * rng.random_range(1..=3);
        let cout = groups * rng.random_range(1..=3);
        let spec = ConvSpec::new(kernel, cin, cout, groups);
        let x = random_tensor(random_shape(&mut rng, cin), &mut rng);
        let w: Vec<f64> = (0..spec.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = x.shape();
        let r = random_tensor(Shape::new(s.n, s.h, s.w, cout), &mut rng);
        let grads = conv2d_grad(&x, &spec, &w, &r).unwrap();
        let loss = |x: &Tensor<f64>, w: &[f64], b: &[f64]| dot(&ops::conv2d(x, &spec, w, b).unwrap(), &r);

        for _ in 0..4 {
            let i = rng.random_range(0..x.data().len());
            let gi = grads.input.as_ref().unwrap().data()[i];
            check_coord(|d| loss(&perturbed(&x, i, d), &w, &b), gi, &mut worst);
            let j = rng.random_range(0..w.len());
            check_coord(
                |d| {
                    let mut w2 = w.clone();
                    w2[j] += d;
                    loss(&x, &w2, &b)
                },
                grads.weights[j],
                &mut worst,
            );
        }
        let k = rng.random_range(0..cout);
        check_coord(
            |d| {
                let mut b2 = b.clone();
                b2[k] += d;
                loss(&x, &w, &b2)
            },
            grads.bias[k],
            &mut worst,
        );
    }
    worst
}

fn check_unary(
    kinks: &[f64],
    f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    grad: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let c = rng.random_range(1..=4);
        let shape = random_shape(&mut rng, c);
        let x = away_from(shape, kinks, 1e-3, &mut rng);
        let r = random_tensor(shape, &mut rng);
        let g = grad(&x, &r);
        for _ in 0..4 {
            let i = rng.random_range(0..x.data().len());
            check_coord(|d| dot(&f(&perturbed(&x, i, d)), &r), g.data()[i], &mut worst);
        }
    }
    worst
}

pub fn relu() -> f64 {
    check_unary(&[0.0], ops::relu, |x, r| relu_grad(x, r).unwrap())
}

pub fn clipped_relu() -> f64 {
    check_unary(&[0.0, 1.0], ops::clipped_relu, |x, r| clipped_relu_grad(x, r).unwrap())
}

pub fn depth_to_space() -> f64 {
    // the backward of a permutation is its inverse
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let block = rng.random_range(1..=3);
        let shape =
            Shape::new(1, rng.random_range(1..=4), rng.random_range(1..=4), block * block * rng.random_range(1..=3));
        let x = random_tensor(shape, &mut rng);
        let out = ops::depth_to_space(&x, block).unwrap();
        let r = random_tensor(out.shape(), &mut rng);
        let g = space_to_depth(&r, block).unwrap();
        for _ in 0..4 {
            let i = rng.random_range(0..x.data().len());
            check_coord(
                |d| dot(&ops::depth_to_space(&perturbed(&x, i, d), block).unwrap(), &r),
                g.data()[i],
                &mut worst,
            );
        }
    }
    worst
}

pub fn concat() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let s = random_shape(&mut rng, 1);
        let (ca, cb) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let a = random_tensor(Shape::new(s.n, s.h, s.w, ca), &mut rng);
        let b = random_tensor(Shape::new(s.n, s.h, s.w, cb), &mut rng);
        let r = random_tensor(Shape::new(s.n, s.h, s.w, ca + cb), &mut rng);
        let (ga, gb) = concat_channels_grad(&r, ca).unwrap();
        let i = rng.random_range(0..a.data().len());
        check_coord(|d| dot(&concat_channels(&perturbed(&a, i, d), &b).unwrap(), &r), ga.data()[i], &mut worst);
        let j = rng.random_range(0..b.data().len());
        check_coord(|d| dot(&concat_channels(&a, &perturbed(&b, j, d)).unwrap(), &r), gb.data()[j], &mut worst);
    }
    worst
}

pub fn charbonnier() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let shape = random_shape(&mut rng, 3);
        let (p, t) = (random_tensor(shape, &mut rng), random_tensor(shape, &mut rng));
        let eps = [0.1, 0.01, 1.0][rng.random_range(0..3)];
        let g = charbonnier_loss_grad(&p, &t, eps).unwrap();
        for _ in 0..4 {
            let i = rng.random_range(0..p.data().len());
            check_coord(|d| charbonnier_loss(&perturbed(&p, i, d), &t, eps).unwrap(), g.data()[i], &mut worst);
        }
    }
    worst
}

fn with_param(params: &ModelParams<f64>, layer: usize, bias: bool, k: usize, d: f64) -> ModelParams<f64> {
    let mut p = params.clone();
    let l = &mut p.layers[layer];
    if bias {
        l.bias[k] += d;
    } else {
        l.weights[k] += d;
    }
    p
}

pub fn full_model() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let groups = [2, 4][rng.random_range(0..2)];
        let config = ModelConfig {
            scale: rng.random_range(2..=3),
            feature_channels: 8,
            num_gblocks: rng.random_range(1..=2),
            gblock_groups: groups,
            skip_channels: 4,
            head: if trial % 2 == 0 { OutputHead::ClippedRelu } else { OutputHead::Linear },
        };
        let network = Network::new(config).unwrap();
        let mut params: ModelParams<f64> = build_model(&config, trial as u64).unwrap().cast();
        // lift biases off zero so the output straddles both clip points
        for l in &mut params.layers {
            for b in &mut l.bias {
                *b = rng.random_range(-0.3..0.6);
            }
        }
        let x = Tensor::from_fn(Shape::new(1, 4, 4, 3), |_, _, _, _| rng.random_range(0.0..1.0));
        let target = Tensor::from_fn(Shape::new(1, 4 * config.scale, 4 * config.scale, 3), |_, _, _, _| {
            rng.random_range(0.0..1.0)
        });
        let loss = |p: &ModelParams<f64>, x: &Tensor<f64>| {
            charbonnier_loss(&network.forward(p, x).unwrap(), &target, 0.1).unwrap()
        };
        let trace = network.forward_trace(&params, &x).unwrap();
        let grad = charbonnier_loss_grad(trace.output(), &target, 0.1).unwrap();
        let grads = network.backward(&params, &trace, grad, true).unwrap();
        for _ in 0..6 {
            let layer = rng.random_range(0..params.layers.len());
            let bias = rng.random_bool(0.25);
            let len = if bias { params.layers[layer].bias.len() } else { params.layers[layer].weights.len() };
            let k = rng.random_range(0..len);
            let g = &grads.params.layers[layer];
            let analytic = if bias { g.bias[k] } else { g.weights[k] };
            check_coord(|d| loss(&with_param(&params, layer, bias, k, d), &x), analytic, &mut worst);
        }
        let i = rng.random_range(0..x.data().len());
        let gi = grads.input.as_ref().unwrap().data()[i];
        check_coord(|d| loss(&params, &perturbed(&x, i, d)), gi, &mut worst);
    }
    worst
}

/// Worst relative error of every gradient check.
pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("conv2d", conv2d()),
        ("relu", relu()),
        ("clipped_relu", clipped_relu()),
        ("depth_to_space", depth_to_space()),
        ("concat", concat()),
        ("charbonnier", charbonnier()),
        ("full_model", full_model()),
    ]
}
