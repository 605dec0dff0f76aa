//! Fixtures shared by the gradient-oracle and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttsnn::snn::{cross_entropy, BatchNorm, Block, ConvOp, Gate, LIFParams, Linear, Network, Unit};
use ttsnn::tensor::{ConvGeometry, DenseTensor, TTConvCores};
use ttsnn::ttlayers::{build_htt_schedule, DenseConvLayer, HalfBranch, Placement, TTConvLayer, TtMode};

pub type Net = Network<f64>;

pub fn unit(conv: ConvOp<f64>, t: usize, rng: &mut ChaCha8Rng) -> Unit<f64> {
    let c = conv.in_channels();
    let mut bn = BatchNorm::new(c, t);
    bn.gamma = DenseTensor::from_fn(&[c], |_| 1.0 + 0.3 * rng.random::<f64>());
    bn.beta = DenseTensor::from_fn(&[c], |_| 0.4 + 0.2 * rng.random::<f64>());
    Unit { bn, conv }
}

pub fn head(c: usize, k: usize, rng: &mut ChaCha8Rng) -> Linear<f64> {
    Linear { weight: DenseTensor::randn(&[k, c], 1.0, rng), bias: DenseTensor::randn(&[k], 0.1, rng) }
}

/// Stem conv plus a single PTT unit.
pub fn two_layer(gate: Gate, t: usize, seed: u64) -> Net {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = DenseConvLayer::random(2, 3, 3, 1, &mut rng);
    let tt = TTConvLayer::new(TTConvCores::random(3, 3, 4, (2, 2, 2), &mut rng), TtMode::Ptt, 2, None).unwrap();
    let u = unit(ConvOp::Tt(tt), t, &mut rng);
    let h = head(4, 3, &mut rng);
    Network::new(stem, vec![Block::Plain(u)], h, LIFParams::default(), gate, t).unwrap()
}

/// Residual blocks with projection and identity shortcuts and an HTT layer.
pub fn residual(gate: Gate, seed: u64) -> Net {
    let t = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = DenseConvLayer::random(1, 3, 3, 1, &mut rng);
    let sched = build_htt_schedule(t, 2, Placement::EarlyFull, HalfBranch::Alternating).unwrap();
    let a1 = unit(ConvOp::Dense(DenseConvLayer::random(3, 4, 3, 2, &mut rng)), t, &mut rng);
    let b1 = unit(
        ConvOp::Tt(
            TTConvLayer::new(TTConvCores::random(4, 3, 4, (2, 2, 2), &mut rng), TtMode::Htt, 1, Some(sched)).unwrap(),
        ),
        t,
        &mut rng,
    );
    let sc = DenseConvLayer::new(DenseTensor::randn(&[4, 3, 1, 1], 0.5, &mut rng), ConvGeometry::new(2, 0, 0)).unwrap();
    let a2 = unit(
        ConvOp::Tt(TTConvLayer::new(TTConvCores::random(4, 3, 4, (2, 3, 2), &mut rng), TtMode::Stt, 1, None).unwrap()),
        t,
        &mut rng,
    );
    let b2 = unit(ConvOp::Dense(DenseConvLayer::random(4, 4, 3, 1, &mut rng)), t, &mut rng);
    let blocks =
        vec![Block::Residual { a: a1, b: b1, shortcut: Some(sc) }, Block::Residual { a: a2, b: b2, shortcut: None }];
    let h = head(4, 3, &mut rng);
    Network::new(stem, blocks, h, LIFParams::default(), gate, t).unwrap()
}

pub fn loss(net: &Net, x: &DenseTensor<f64>, labels: &[usize]) -> f64 {
    cross_entropy(&net.forward_train(x).unwrap().logits, labels).unwrap().0
}

pub fn analytic(net: &Net, x: &DenseTensor<f64>, labels: &[usize]) -> Vec<DenseTensor<f64>> {
    let fw = net.forward_train(x).unwrap();
    let (_, d) = cross_entropy(&fw.logits, labels).unwrap();
    net.backward(&fw.tape, &d).unwrap()
}

/// Central differences on `samples` randomly chosen parameter entries.
pub fn fd_check(net: &Net, x: &DenseTensor<f64>, labels: &[usize], samples: usize, seed: u64) -> f64 {
    let grads = analytic(net, x, labels);
    let sizes: Vec<usize> = grads.iter().map(|g| g.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let h = 1e-5;
    for _ in 0..samples {
        let p = rng.random_range(0..sizes.len());
        let i = rng.random_range(0..sizes[p]);
        let bumped = |d: f64| {
            let mut n = net.clone();
            n.params_mut()[p].data_mut()[i] += d;
            loss(&n, x, labels)
        };
        let fd = (bumped(h) - bumped(-h)) / (2.0 * h);
        let an = grads[p].data()[i];
        let rel = (fd - an).abs() / (fd.abs().max(an.abs()) + 1e-7);
        worst = worst.max(rel);
    }
    worst
}

pub fn batch(shape: &[usize], seed: u64) -> DenseTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseTensor::from_fn(shape, |_| rng.random::<f64>())
}
