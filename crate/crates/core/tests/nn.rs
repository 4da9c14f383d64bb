use mcdrop::nn::gradcheck::{check_layer, check_network, GradCheck};
use mcdrop::nn::layers::{BnStats, Pass};
use mcdrop::nn::weights::{read_weights, write_weights};
use mcdrop::nn::{Architecture, BatchNorm1d, Conv1d, Dropout, Layer, Linear, Mode, Network, ResidualBlock, Tensor};
use mcdrop::seed::rng;
use mcdrop::{Error, Exec};
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let n = shape.iter().product();
    let mut r = rng(seed);
    Tensor::new(shape, (0..n).map(|_| r.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

fn tiny_net() -> Network {
    Network::new(
        vec![2, 12],
        vec![
            Layer::Residual(Box::new(ResidualBlock::new(2, 3))),
            Layer::GlobalAvgPool,
            Layer::Dropout(Dropout::new(0.5, true)),
            Layer::Linear(Linear::new(3, 3)),
            Layer::Softmax,
        ],
    )
    .unwrap()
}

fn load_golden() -> (Network, Tensor, Value) {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/tiny_net.json")).unwrap();
    let g: Value = serde_json::from_str(&text).unwrap();
    let mut net = tiny_net();
    let tensors = g["tensors"].as_object().unwrap();
    let mut filled = 0;
    for slot in net.named_mut() {
        let t = &tensors[&slot.name];
        let shape: Vec<usize> = t["shape"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
        assert_eq!(shape, slot.shape, "{}", slot.name);
        for (d, v) in slot.data.iter_mut().zip(t["data"].as_array().unwrap()) {
            *d = v.as_f64().unwrap() as f32;
        }
        filled += 1;
    }
    assert_eq!(filled, tensors.len());
    let x: Vec<f32> = g["x"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap() as f32).collect();
    let x = Tensor::new(vec![2, 2, 12], x).unwrap();
    (net, x, g)
}

fn assert_close(got: &[f32], want: &Value, tol: f64) {
    let want = want.as_array().unwrap();
    assert_eq!(got.len(), want.len());
    for (a, b) in got.iter().zip(want) {
        let b = b.as_f64().unwrap();
        assert!((f64::from(*a) - b).abs() < tol, "got {a}, want {b}");
    }
}

#[test]
fn golden_disabled_and_mc_test_outputs() {
    let (net, x, g) = load_golden();
    let y = net.forward(&x, Mode::Disabled, 99).unwrap();
    assert_close(y.data(), &g["disabled"], 1e-5);
    for case in g["mc_test"].as_array().unwrap() {
        let seed = case["seed"].as_u64().unwrap();
        let y = net.forward(&x, Mode::McTest, seed).unwrap();
        assert_close(y.data(), &case["output"], 1e-5);
    }
}

#[test]
fn zero_final_layer_gives_uniform_output() {
    let mut net = Architecture::desk(7).build(3).unwrap();
    for n in net.named_mut() {
        if n.name.contains(".fc.") {
            n.data.fill(0.0);
        }
    }
    let x = random_tensor(vec![3, 2, 1000], 1);
    let y = net.forward(&x, Mode::McTest, 5).unwrap();
    assert!(y.data().iter().all(|&p| (p - 1.0 / 7.0).abs() < 1e-7));
}

#[test]
fn zero_dropout_rate_ignores_seed() {
    let mut arch = Architecture::desk(4);
    arch.dropout_rate = 0.0;
    arch.input_length = 64;
    let net = arch.build(11).unwrap();
    let x = random_tensor(vec![2, 2, 64], 2);
    let a = net.forward(&x, Mode::McTest, 1).unwrap();
    let b = net.forward(&x, Mode::McTest, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, net.forward(&x, Mode::Disabled, 0).unwrap());
}

#[test]
fn softmax_rows_sum_to_one_and_forward_is_deterministic() {
    let arch = Architecture { input_length: 100, ..Architecture::desk(10) };
    let net = arch.build(8).unwrap();
    let x = random_tensor(vec![5, 2, 100], 3);
    let y = net.forward(&x, Mode::McTest, 77).unwrap();
    for row in y.rows() {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert_eq!(y, net.forward(&x, Mode::McTest, 77).unwrap());
    assert_eq!(y, net.forward_with(Exec::Sequential, &x, Mode::McTest, 77).unwrap());
}

#[test]
fn input_shape_is_checked() {
    let net = tiny_net();
    let x = random_tensor(vec![1, 2, 13], 0);
    assert!(matches!(net.forward(&x, Mode::Disabled, 0), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn uniform_output_loss_is_ln_c() {
    let c = 5;
    let net = Network::new(vec![4], vec![Layer::Linear(Linear::new(4, c)), Layer::Softmax]).unwrap();
    let x = random_tensor(vec![3, 4], 1);
    let bp = net.backward(&x, &[0, 3, 4], 0).unwrap();
    assert!((bp.loss - (c as f64).ln()).abs() < 1e-12);
}

#[test]
fn logit_gradient_is_softmax_minus_one_hot() {
    // With identity weights the logits are the inputs, so dL/dbias is the
    // batch-summed logit gradient.
    let c = 4;
    let mut fc = Linear::new(c, c);
    for i in 0..c {
        fc.weight[i * c + i] = 1.0;
    }
    let net = Network::new(vec![c], vec![Layer::Linear(fc), Layer::Softmax]).unwrap();
    let x = Tensor::new(vec![1, c], vec![0.3, -1.2, 2.0, 0.1]).unwrap();
    let bp = net.backward(&x, &[1], 0).unwrap();
    let z: Vec<f64> = x.data().iter().map(|&v| f64::from(v).exp()).collect();
    let s: f64 = z.iter().sum();
    for (j, zj) in z.iter().enumerate() {
        let want = zj / s - if j == 1 { 1.0 } else { 0.0 };
        assert!((f64::from(bp.grads[1][j]) - want).abs() < 1e-6);
    }
}

#[test]
fn frozen_unit_batchnorm_is_identity() {
    let bn = BatchNorm1d::new(3);
    let x = random_tensor(vec![2, 3, 5], 4);
    let y = bn.forward(&x);
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
    }
}

#[test]
fn training_batchnorm_normalizes_per_channel() {
    let bn = BatchNorm1d::new(3);
    let mut x = random_tensor(vec![4, 3, 50], 5);
    x.data_mut().iter_mut().for_each(|v| *v = *v * 3.0 + 7.0);
    let (y, _) = bn.forward_train(&x).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.row(n)[c * 50..(c + 1) * 50].to_vec()).map(f64::from).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5, "mean {m}");
        assert!((v - 1.0).abs() < 1e-4, "var {v}");
    }
}

#[test]
fn running_stats_follow_two_step_moving_average() {
    let mut bn = BatchNorm1d::new(1);
    // batch 1: values 1,2,3,4 -> mean 2.5, unbiased var 5/3
    let b1 = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    // batch 2: values 0,0,0,8 -> mean 2, unbiased var 16
    let b2 = Tensor::new(vec![2, 1, 2], vec![0.0, 0.0, 0.0, 8.0]).unwrap();
    for b in [&b1, &b2] {
        let net_stats: BnStats = {
            let layer = Layer::BatchNorm(bn.clone());
            let pass = Pass { mode: Mode::Train, seed: 0, exec: Exec::Sequential };
            let (_, cache) = layer.forward_train(b, &pass, 0).unwrap();
            let mut s = Vec::new();
            Layer::batch_stats(&cache, &mut s);
            s.remove(0)
        };
        bn.apply_stats(&net_stats);
    }
    let mean = 0.9 * (0.9 * 0.0 + 0.1 * 2.5) + 0.1 * 2.0;
    let var = 0.9 * (0.9 * 1.0 + 0.1 * (5.0 / 3.0)) + 0.1 * 16.0;
    assert!((f64::from(bn.running_mean[0]) - mean).abs() < 1e-6);
    assert!((f64::from(bn.running_var[0]) - var).abs() < 1e-5);
}

#[test]
fn training_batch_of_one_is_rejected() {
    let net = tiny_net();
    let x = random_tensor(vec![1, 2, 12], 0);
    assert!(matches!(net.backward(&x, &[0], 0), Err(Error::BatchTooSmall(1))));
}

#[test]
fn inverted_dropout_mean_matches_disabled_output() {
    let mut fc = Linear::new(6, 2);
    let mut r = rng(9);
    fc.weight.iter_mut().for_each(|w| *w = r.sample(StandardNormal));
    let net = Network::new(vec![6], vec![Layer::Dropout(Dropout::new(0.5, true)), Layer::Linear(fc), Layer::Softmax]).unwrap();
    let x = random_tensor(vec![1, 6], 10);
    let reference = net.forward_range(Exec::Sequential, &x, 0..2, Mode::Disabled, 0).unwrap();
    let n = 20_000;
    let mut sum = [0.0f64; 2];
    let mut sq = [0.0f64; 2];
    for s in 0..n {
        let y = net.forward_range(Exec::Sequential, &x, 0..2, Mode::McTest, s).unwrap();
        for j in 0..2 {
            let v = f64::from(y.data()[j]);
            sum[j] += v;
            sq[j] += v * v;
        }
    }
    for j in 0..2 {
        let mean = sum[j] / n as f64;
        let se = ((sq[j] / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - f64::from(reference.data()[j])).abs() < 3.0 * se, "component {j}");
    }
}

#[test]
fn every_layer_type_passes_gradient_check() {
    let cfg = GradCheck::default();
    let mut conv = Conv1d::new(2, 3, 3, true);
    let mut r = rng(1);
    conv.weight.iter_mut().for_each(|w| *w = r.sample::<f32, _>(StandardNormal) * 0.5);
    conv.bias.as_mut().unwrap().iter_mut().for_each(|b| *b = 0.1);
    let mut proj = Conv1d::new(3, 2, 1, true);
    proj.weight.iter_mut().for_each(|w| *w = r.sample::<f32, _>(StandardNormal));
    let mut bn = BatchNorm1d::new(3);
    bn.gamma = vec![0.8, 1.3, -0.6];
    bn.beta = vec![0.1, -0.2, 0.3];
    let mut block = ResidualBlock::new(3, 4);
    let proj_w = &mut block.proj.as_mut().unwrap().weight;
    proj_w.iter_mut().for_each(|w| *w = r.sample::<f32, _>(StandardNormal) * 0.5);
    for w in [&mut block.conv1.weight, &mut block.conv2.weight] {
        w.iter_mut().for_each(|w| *w = r.sample::<f32, _>(StandardNormal) * 0.5);
    }
    let mut fc = Linear::new(12, 3);
    fc.weight.iter_mut().for_each(|w| *w = r.sample::<f32, _>(StandardNormal) * 0.3);

    let cases: Vec<(Layer, Vec<usize>)> = vec![
        (Layer::Conv(conv), vec![2, 2, 7]),
        (Layer::Conv(proj), vec![2, 3, 5]),
        (Layer::BatchNorm(bn), vec![3, 3, 4]),
        (Layer::Relu, vec![2, 3, 4]),
        (Layer::Residual(Box::new(block)), vec![2, 3, 6]),
        (Layer::GlobalAvgPool, vec![2, 3, 5]),
        (Layer::Dropout(Dropout::new(0.3, true)), vec![2, 8]),
        (Layer::Linear(fc), vec![2, 3, 4]),
    ];
    for (i, (layer, shape)) in cases.into_iter().enumerate() {
        let x = random_tensor(shape, 100 + i as u64);
        let rep = check_layer(&layer, &x, 7, &cfg).unwrap();
        assert!(rep.passed(), "case {i}: {:?} worst {}", rep.failures, rep.worst);
    }
}

#[test]
fn composed_tiny_network_passes_gradient_check() {
    let (net, x, _) = load_golden();
    let rep = check_network(&net, &x, &[2, 0], 3, &GradCheck::default(), 1).unwrap();
    assert!(rep.passed(), "{:?} worst {}", rep.failures, rep.worst);
}

#[test]
fn weight_file_round_trips_and_rejects_unknown_version() {
    let arch = Architecture { input_length: 32, ..Architecture::desk(5) };
    let mut net = arch.build(21).unwrap();
    for n in net.named_mut() {
        if n.name.ends_with("running_var") {
            n.data.fill(2.5);
        }
    }
    let mut buf = Vec::new();
    write_weights(&mut buf, &arch, &net).unwrap();
    let (arch2, net2) = read_weights(buf.as_slice()).unwrap();
    assert_eq!(arch, arch2);
    assert_eq!(net, net2);

    let mut bad = buf.clone();
    bad[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(read_weights(bad.as_slice()), Err(Error::UnsupportedVersion(2))));
    assert!(matches!(read_weights(&buf[..buf.len() - 3]), Err(Error::WeightFormat(_))));
}
