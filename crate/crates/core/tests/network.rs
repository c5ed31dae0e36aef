use prostacam_core::nn::{
    cross_entropy_batch, cross_entropy_loss, Classifier, Depth, GradTarget, Mode, ModelConfig, Network,
    NetworkBuilder, Tensor,
};
use prostacam_core::train::{fit, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(depth: Depth, in_channels: usize, width: usize, stem_pool: bool, seed: u64) -> ModelConfig {
    ModelConfig {
        depth,
        in_channels,
        base_width: width,
        stem_pool,
        seed,
        ..Default::default()
    }
}

fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

// sum(p.numel() for p in monai.networks.nets.resnetXX(spatial_dims=3,
// n_input_channels=c, num_classes=2).parameters()), MONAI 1.x
#[test]
fn parameter_counts_match_monai() {
    let cases = [
        (Depth::ResNet34, 1, 63_471_554),
        (Depth::ResNet34, 3, 63_515_458),
        (Depth::ResNet10, 1, 14_357_442),
        (Depth::ResNet10, 3, 14_401_346),
    ];
    for (depth, c, want) in cases {
        let m = Classifier::<f32>::new(config(depth, c, 64, true, 0)).unwrap();
        assert_eq!(m.parameter_count(), want, "{:?} in_channels {}", depth, c);
    }
}

#[test]
fn stage_shapes_for_composite_input() {
    // stem keeps 36x32x32, pool (k3 s2 p1) halves with ceil, each later stage
    // halves again: 18x16x16, 18x16x16, 9x8x8, 5x4x4, 3x2x2
    let want = [
        ("conv1", vec![1, 8, 36, 32, 32]),
        ("maxpool", vec![1, 8, 18, 16, 16]),
        ("layer1", vec![1, 8, 18, 16, 16]),
        ("layer2", vec![1, 16, 9, 8, 8]),
        ("layer3", vec![1, 32, 5, 4, 4]),
        ("layer4", vec![1, 64, 3, 2, 2]),
    ];
    let m = Classifier::<f32>::new(config(Depth::ResNet34, 1, 8, true, 3)).unwrap();
    let x = random_input(&[1, 1, 36, 32, 32], 1).cast::<f32>();
    for (name, shape) in want {
        let idx = m.network().layer_index(name).unwrap();
        let pass = m.network().forward(&x, Mode::Eval, Some(idx)).unwrap();
        assert_eq!(pass.tapped.unwrap().shape(), shape.as_slice(), "{}", name);
        assert_eq!(pass.logits.shape(), [1, 2]);
        assert!(pass.logits.all_finite());
    }

    let no_pool = Classifier::<f32>::new(config(Depth::ResNet10, 1, 8, false, 3)).unwrap();
    let idx = no_pool.network().layer_index("layer4").unwrap();
    let pass = no_pool.network().forward(&x, Mode::Eval, Some(idx)).unwrap();
    assert_eq!(pass.tapped.unwrap().shape(), [1, 64, 5, 4, 4]);
}

#[test]
fn seeded_initialization_is_reproducible() {
    let a = Classifier::<f32>::new(config(Depth::ResNet10, 1, 4, true, 11)).unwrap();
    let b = Classifier::<f32>::new(config(Depth::ResNet10, 1, 4, true, 11)).unwrap();
    let c = Classifier::<f32>::new(config(Depth::ResNet10, 1, 4, true, 12)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.network().params(), c.network().params());

    let x = random_input(&[1, 1, 12, 16, 16], 2).cast::<f32>();
    let p1 = a.predict_tensor(&x).unwrap();
    let p2 = a.predict_tensor(&x).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(p1.predicted_class, u8::from(p1.logits[1] > p1.logits[0]));
}

#[test]
fn training_is_reproducible() {
    let samples: Vec<Tensor<f32>> = (0..4)
        .map(|i| random_input(&[1, 12, 16, 16], 20 + i).cast())
        .collect();
    let labels = [0, 1, 0, 1];
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 5,
        ..Default::default()
    };
    let run = || {
        let mut m = Classifier::<f32>::new(config(Depth::ResNet10, 1, 4, false, 9)).unwrap();
        let r = fit(&mut m, &samples, &labels, &cfg).unwrap();
        (m, r)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(m1, m2);
    assert_eq!(r1.epoch_losses.len(), 2);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let samples: Vec<Tensor<f32>> = (0..3)
        .map(|i| random_input(&[1, 8, 8, 8], 40 + i).cast())
        .collect();
    let mut m = Classifier::<f32>::new(config(Depth::ResNet10, 1, 4, false, 1)).unwrap();
    let before = m.clone();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 1,
        ..Default::default()
    };
    fit(&mut m, &samples, &[0, 1, 1], &cfg).unwrap();
    for (a, b) in m.network().params().entries().iter().zip(before.network().params().entries()) {
        if !a.name.ends_with("running_mean") && !a.name.ends_with("running_var") {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((cross_entropy_loss([0.0, 0.0], 0).unwrap() - ln2).abs() < 1e-12);
    assert!(cross_entropy_loss([-10.0, 10.0], 1).unwrap() < 1e-8);
    let a = cross_entropy_loss([0.4, -1.2], 1).unwrap();
    let b = cross_entropy_loss([7.7, 6.1], 1).unwrap();
    assert!((a - b).abs() < 1e-6);
    // ln(1 + e^1.6)
    assert!((a - (1.0 + 1.6f64.exp()).ln()).abs() < 1e-12);
    assert!(cross_entropy_loss([f64::NAN, 0.0], 0).is_err());
    assert!(cross_entropy_loss([0.0, 0.0], 2).is_err());
}

fn batch_loss(m: &Classifier<f64>, x: &Tensor<f64>, y: &[u8]) -> f64 {
    let pass = m.network().forward(x, Mode::Train, None).unwrap();
    cross_entropy_batch(&pass.logits, y).unwrap().0
}

struct GradCase {
    model: Classifier<f64>,
    x: Tensor<f64>,
    y: [u8; 3],
    param_grads: Vec<Tensor<f64>>,
    input_grad: Tensor<f64>,
}

fn grad_case() -> GradCase {
    let model = Classifier::<f64>::new(config(Depth::ResNet10, 1, 2, false, 4)).unwrap();
    let x = random_input(&[3, 1, 16, 16, 16], 8);
    let y = [0u8, 1, 1];
    let net = model.network();
    let pass = net.forward(&x, Mode::Train, None).unwrap();
    let (_, dlogits) = cross_entropy_batch(&pass.logits, &y).unwrap();
    let mut grads = net.params().zero_grads();
    let input_grad = net
        .backward(&pass.tape, dlogits, GradTarget::Input, Some(&mut grads))
        .unwrap()
        .unwrap();
    GradCase {
        model,
        x,
        y,
        param_grads: grads.tensors,
        input_grad,
    }
}

/// Random `(tensor id, element)` picks over trainable tensors.
fn pick_params(m: &Classifier<f64>, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = m.network().params();
    let ids: Vec<usize> = (0..store.len())
        .filter(|&i| !store.entries()[i].name.contains("running"))
        .collect();
    (0..n)
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            (id, rng.random_range(0..store.get(id).len()))
        })
        .collect()
}

fn nudge(m: &mut Classifier<f64>, picks: &[(usize, usize)], dir: &[f64], h: f64) {
    for (&(id, i), &d) in picks.iter().zip(dir) {
        m.network_mut().params_mut().get_mut(id).data_mut()[i] += h * d;
    }
}

// A small step keeps the difference quotient off ReLU kinks, so every
// coordinate can be held to a tight tolerance.
#[test]
fn backward_matches_central_differences() {
    let GradCase {
        mut model,
        x,
        y,
        param_grads,
        input_grad,
    } = grad_case();
    let h = 1e-6;
    let close = |a: f64, n: f64| (a - n).abs() <= 1e-3 * a.abs().max(n.abs()) + 1e-9;
    for (id, i) in pick_params(&model, 40, 1) {
        nudge(&mut model, &[(id, i)], &[1.0], h);
        let lp = batch_loss(&model, &x, &y);
        nudge(&mut model, &[(id, i)], &[1.0], -2.0 * h);
        let lm = batch_loss(&model, &x, &y);
        nudge(&mut model, &[(id, i)], &[1.0], h);
        let fd = (lp - lm) / (2.0 * h);
        let an = param_grads[id].data()[i];
        let name = &model.network().params().entries()[id].name;
        assert!(close(an, fd), "{}[{}]: analytic {} vs numeric {}", name, i, an, fd);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let i = rng.random_range(0..x.len());
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (batch_loss(&model, &xp, &y) - batch_loss(&model, &xm, &y)) / (2.0 * h);
        let an = input_grad.data()[i];
        assert!(close(an, fd), "input[{}]: {} vs {}", i, an, fd);
    }
}

// At a 1e-3 step single coordinates of a ReLU network often straddle
// kinks, so the coarse step is checked on conv, batch-norm and linear
// layers alone, where the loss is smooth.
#[test]
fn coarse_step_on_smooth_layers() {
    let mut net = NetworkBuilder::<f64>::new(1, 3)
        .conv("c1", 4, 3, 1, 1, false)
        .batch_norm("b1")
        .conv("c2", 4, 3, 2, 1, true)
        .batch_norm("b2")
        .global_avg_pool("pool")
        .linear("fc", 2)
        .build()
        .unwrap();
    let x = random_input(&[3, 1, 16, 16, 16], 8);
    let y = [0u8, 1, 1];
    let loss = |n: &Network<f64>| {
        let pass = n.forward(&x, Mode::Train, None).unwrap();
        cross_entropy_batch(&pass.logits, &y).unwrap().0
    };
    let pass = net.forward(&x, Mode::Train, None).unwrap();
    let (_, dlogits) = cross_entropy_batch(&pass.logits, &y).unwrap();
    let mut grads = net.params().zero_grads();
    net.backward(&pass.tape, dlogits, GradTarget::Params, Some(&mut grads))
        .unwrap();

    let h = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ids: Vec<usize> = (0..net.params().len())
        .filter(|&i| !net.params().entries()[i].name.contains("running"))
        .collect();
    for _ in 0..10 {
        let id = ids[rng.random_range(0..ids.len())];
        let i = rng.random_range(0..net.params().get(id).len());
        let orig = net.params().get(id).data()[i];
        net.params_mut().get_mut(id).data_mut()[i] = orig + h;
        let lp = loss(&net);
        net.params_mut().get_mut(id).data_mut()[i] = orig - h;
        let lm = loss(&net);
        net.params_mut().get_mut(id).data_mut()[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let an = grads.tensors[id].data()[i];
        let name = &net.params().entries()[id].name;
        assert!((an - fd).abs() <= 1e-2 * an.abs().max(fd.abs()), "{}[{}]: {} vs {}", name, i, an, fd);
    }
}
