//! Central finite-difference checks of every layer and the whole network in
//! 64-bit mode.

use follicle::nn::layers::{
    batch_loss, conv2d_backward, conv2d_forward, dense_backward, dense_forward, dropout_backward, dropout_forward,
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, softmax, softmax_cross_entropy_grad, Mode,
};
use follicle::nn::{classifier_specs, Network, Tensor4};
use follicle::rng;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const COORDS: usize = 25;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Up to `COORDS` distinct indices below `len` (all of them when fewer).
fn coords(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    if len <= COORDS {
        (0..len).collect()
    } else {
        sample(rng, len, COORDS).into_vec()
    }
}

/// Max relative error between `analytic[i]` and the central difference of
/// `f` in coordinate `i` of `x`, over the sampled coordinates.
fn check(x: &[f64], analytic: &[f64], idx: &[usize], delta: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for &i in idx {
        probe[i] = x[i] + delta;
        let up = f(&probe);
        probe[i] = x[i] - delta;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * delta)));
    }
    worst
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tensor(shape: [usize; 4], data: Vec<f64>) -> Tensor4<f64> {
    Tensor4::from_vec(shape[0], shape[1], shape[2], shape[3], data)
}

fn conv_case(shape: [usize; 4], cout: usize, seed: u64, tol: f64, delta: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, shape.iter().product());
    let w = random(&mut rng, 9 * shape[3] * cout);
    let b = random(&mut rng, cout);
    let r = random(&mut rng, shape[0] * shape[1] * shape[2] * cout);
    let loss = |x: &[f64], w: &[f64], b: &[f64]| {
        let (y, _) = conv2d_forward(&tensor(shape, x.to_vec()), w, b).unwrap();
        dot(&y.data, &r)
    };
    let (_, cache) = conv2d_forward(&tensor(shape, x.clone()), &w, &b).unwrap();
    let g = tensor([shape[0], shape[1], shape[2], cout], r.clone());
    let (gx, pg) = conv2d_backward(&g, &cache, &w, true).unwrap();
    let gx = gx.unwrap();

    let e = check(&x, &gx.data, &coords(&mut rng, x.len()), delta, |p| loss(p, &w, &b));
    assert!(e < tol, "conv input grad rel err {e}");
    let e = check(&w, &pg.weights, &coords(&mut rng, w.len()), delta, |p| loss(&x, p, &b));
    assert!(e < tol, "conv weight grad rel err {e}");
    let e = check(&b, &pg.bias, &coords(&mut rng, b.len()), delta, |p| loss(&x, &w, p));
    assert!(e < tol, "conv bias grad rel err {e}");

    // Bias gradient is the per-channel sum of the upstream gradient.
    for o in 0..cout {
        let s: f64 = r.iter().skip(o).step_by(cout).sum();
        assert!((pg.bias[o] - s).abs() < 1e-12);
    }
}

#[test]
fn conv_single_channel_4x4() {
    conv_case([1, 4, 4, 1], 1, 1, 1e-5, 1e-3);
}

#[test]
fn conv_multi_channel_batch() {
    conv_case([2, 5, 5, 2], 3, 2, 1e-4, 1e-5);
}

#[test]
fn dense_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [3, 1, 1, 2];
    let units = 4;
    let x = random(&mut rng, 6);
    let w = random(&mut rng, 2 * units);
    let b = random(&mut rng, units);
    let r = random(&mut rng, 3 * units);
    let loss = |x: &[f64], w: &[f64], b: &[f64]| dot(&dense_forward(&tensor(shape, x.to_vec()), w, b).unwrap().data, &r);
    let input = tensor(shape, x.clone());
    let (gx, pg) = dense_backward(&tensor([3, 1, 1, units], r.clone()), &input, &w, true).unwrap();
    let gx = gx.unwrap();
    assert!(check(&x, &gx.data, &coords(&mut rng, x.len()), 1e-5, |p| loss(p, &w, &b)) < 1e-5);
    assert!(check(&w, &pg.weights, &coords(&mut rng, w.len()), 1e-5, |p| loss(&x, p, &b)) < 1e-5);
    assert!(check(&b, &pg.bias, &coords(&mut rng, b.len()), 1e-5, |p| loss(&x, &w, p)) < 1e-5);
}

#[test]
fn maxpool_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = [2, 6, 6, 2];
    // Distinct values spaced well beyond the probe step keep every argmax stable.
    let len: usize = shape.iter().product();
    let mut x: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
    for i in (1..len).rev() {
        x.swap(i, rng.gen_range(0..=i));
    }
    let r = random(&mut rng, 2 * 3 * 3 * 2);
    let (_, cache) = maxpool_forward(&tensor(shape, x.clone())).unwrap();
    let gx = maxpool_backward(&tensor([2, 3, 3, 2], r.clone()), &cache).unwrap();
    let e = check(&x, &gx.data, &coords(&mut rng, len), 1e-5, |p| {
        dot(&maxpool_forward(&tensor(shape, p.to_vec())).unwrap().0.data, &r)
    });
    assert!(e < 1e-4, "maxpool rel err {e}");
    // Every coordinate, not just the sampled ones: gradient is routed or zero.
    let all: Vec<usize> = (0..len).collect();
    assert!(check(&x, &gx.data, &all, 1e-5, |p| dot(&maxpool_forward(&tensor(shape, p.to_vec())).unwrap().0.data, &r)) < 1e-4);
}

#[test]
fn relu_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = [1, 4, 4, 3];
    let x: Vec<f64> = random(&mut rng, 48)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
        .collect();
    let r = random(&mut rng, 48);
    let (_, mask) = relu_forward(&tensor(shape, x.clone()));
    let gx = relu_backward(&tensor(shape, r.clone()), &mask);
    let all: Vec<usize> = (0..48).collect();
    let e = check(&x, &gx.data, &all, 1e-6, |p| dot(&relu_forward(&tensor(shape, p.to_vec())).0.data, &r));
    assert!(e < 1e-6, "relu rel err {e}");
}

#[test]
fn dropout_layer_with_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let shape = [2, 3, 3, 2];
    let x = random(&mut rng, 36);
    let r = random(&mut rng, 36);
    let run = |p: &[f64]| dropout_forward(&tensor(shape, p.to_vec()), 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(60));
    let (_, mask) = run(&x);
    let gx = dropout_backward(&tensor(shape, r.clone()), mask.as_deref());
    let all: Vec<usize> = (0..36).collect();
    let e = check(&x, &gx.data, &all, 1e-5, |p| dot(&run(p).0.data, &r));
    assert!(e < 1e-6, "dropout rel err {e}");
}

#[test]
fn softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 4;
    let z: Vec<f64> = random(&mut rng, n * 3).into_iter().map(|v| 3.0 * v).collect();
    let labels = [0usize, 2, 1, 2];
    let probs = |z: &[f64]| tensor([n, 1, 1, 3], z.chunks(3).flat_map(softmax).collect());
    let g = softmax_cross_entropy_grad(&probs(&z), &labels);
    let all: Vec<usize> = (0..n * 3).collect();
    let e = check(&z, &g.data, &all, 1e-6, |p| batch_loss(&probs(p), &labels));
    assert!(e < 1e-6, "softmax/CE rel err {e}");
}

fn param_mut(net: &mut Network<f64>, layer: usize, is_bias: bool, i: usize) -> &mut f64 {
    let p = net.params[layer].as_mut().unwrap();
    if is_bias {
        &mut p.bias[i]
    } else {
        &mut p.weights[i]
    }
}

#[test]
fn whole_network_16x16() {
    let specs = classifier_specs(&[4, 6, 8], 12, 0.3, 3);
    let mut net: Network<f64> = Network::init(specs, [16, 16, 3], 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = tensor([2, 16, 16, 3], (0..2 * 16 * 16 * 3).map(|_| rng.gen_range(0.0..1.0)).collect());
    let labels = [1usize, 2];
    // Same dropout mask on every evaluation.
    let loss_of = |net: &Network<f64>| {
        let cache = net.forward(&x, Mode::Train, &mut rng::stream(5, rng::DROPOUT, &[0])).unwrap();
        batch_loss(&cache.probs, &labels)
    };
    let cache = net.forward(&x, Mode::Train, &mut rng::stream(5, rng::DROPOUT, &[0])).unwrap();
    let grads = net.backward(&cache, &labels).unwrap();

    let mut checked_layers = 0;
    for layer in 0..net.params.len() {
        let Some(g) = grads[layer].clone() else { continue };
        checked_layers += 1;
        for (is_bias, analytic) in [(false, g.weights), (true, g.bias)] {
            let len = analytic.len();
            for i in coords(&mut rng, len) {
                let orig = *param_mut(&mut net, layer, is_bias, i);
                let delta = 1e-6;
                *param_mut(&mut net, layer, is_bias, i) = orig + delta;
                let up = loss_of(&net);
                *param_mut(&mut net, layer, is_bias, i) = orig - delta;
                let down = loss_of(&net);
                *param_mut(&mut net, layer, is_bias, i) = orig;
                let numeric = (up - down) / (2.0 * delta);
                let e = rel_err(analytic[i], numeric);
                // Tiny gradients are compared absolutely.
                assert!(
                    e < 1e-4 || (analytic[i] - numeric).abs() < 1e-9,
                    "{} {} [{i}]: analytic {} numeric {numeric} rel err {e}",
                    net.layer_name(layer),
                    if is_bias { "bias" } else { "weights" },
                    analytic[i]
                );
            }
        }
    }
    assert_eq!(checked_layers, 5);
}
