use mcdrop::nn::{Architecture, Conv1d, Dropout, Layer, Linear, Network, Tensor};
use mcdrop::seed::rng;
use mcdrop::split::{pass_seed, SplitNetwork};
use mcdrop::Exec;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let n = shape.iter().product();
    let mut r = rng(seed);
    Tensor::new(shape, (0..n).map(|_| r.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

fn small_net(seed: u64) -> SplitNetwork {
    let arch = Architecture { input_length: 40, ..Architecture::desk(5) };
    SplitNetwork::split(arch.build(seed).unwrap()).unwrap()
}

#[test]
fn single_pass_equals_full_forward() {
    let sn = small_net(1);
    let x = random_tensor(vec![3, 2, 40], 2);
    let cache = sn.run_trunk(&x, Exec::default()).unwrap();
    let head = sn.run_head(&cache, pass_seed(42, 1), Exec::default()).unwrap();
    let full = sn.full_forward(&x, pass_seed(42, 1), Exec::default()).unwrap();
    assert_eq!(head.data(), full.data());
}

#[test]
fn fifty_passes_match_uncached_references_bitwise() {
    let sn = small_net(3);
    let x = random_tensor(vec![2, 2, 40], 4);
    let seed = 0xC0FFEE;
    let ens = sn.mc_ensemble(&x, 50, seed, Exec::default()).unwrap();
    for k in 1..=50 {
        let full = sn.full_forward(&x, pass_seed(seed, k), Exec::Sequential).unwrap();
        for (row, members) in ens.iter().enumerate() {
            let want = mcdrop::prob::ProbabilityVector::from_f32(full.row(row)).unwrap();
            assert_eq!(members[k - 1], want, "row {row}, pass {k}");
        }
    }
}

#[test]
fn cached_trunk_equals_fresh_trunk() {
    let sn = small_net(5);
    let x = random_tensor(vec![2, 2, 40], 6);
    let a = sn.run_trunk(&x, Exec::Parallel).unwrap();
    let b = sn.run_trunk(&x, Exec::Sequential).unwrap();
    assert_eq!(a.activation(), b.activation());
    assert_eq!(a.source(), x.fingerprint());
}

#[test]
fn zero_rate_gives_identical_members() {
    let arch = Architecture { input_length: 40, dropout_rate: 0.0, ..Architecture::desk(4) };
    let sn = SplitNetwork::split(arch.build(7).unwrap()).unwrap();
    let x = random_tensor(vec![2, 2, 40], 8);
    for members in sn.mc_ensemble(&x, 20, 9, Exec::default()).unwrap() {
        assert!(members.iter().all(|m| *m == members[0]));
    }
}

#[test]
fn streaming_order_is_independent_of_execution_strategy() {
    let sn = small_net(10);
    let x = random_tensor(vec![2, 2, 40], 11);
    let a = sn.mc_ensemble(&x, 70, 12, Exec::Parallel).unwrap();
    let b = sn.mc_ensemble(&x, 70, 12, Exec::Sequential).unwrap();
    assert_eq!(a, b);
}

fn constant_width_net(blocks: usize) -> SplitNetwork {
    let arch = Architecture {
        blocks,
        base_width: 32,
        max_width: 32,
        double_every: blocks,
        input_length: 1000,
        ..Architecture::reference(10)
    };
    SplitNetwork::split(arch.build(1).unwrap()).unwrap()
}

#[test]
fn doubling_depth_doubles_ratio_and_keeps_head_time() {
    let x = random_tensor(vec![32, 2, 1000], 13);
    let shallow = constant_width_net(4).benchmark(&x, 30, Exec::Sequential).unwrap();
    let deep = constant_width_net(8).benchmark(&x, 30, Exec::Sequential).unwrap();
    let growth = deep.ratio / shallow.ratio;
    assert!((1.4..=2.6).contains(&growth), "ratio growth {growth}: {shallow:?} -> {deep:?}");
    let head_change = (deep.head_ms - shallow.head_ms).abs() / shallow.head_ms;
    assert!(head_change < 0.10, "head time moved {head_change}: {shallow:?} -> {deep:?}");
}

#[test]
fn one_conv_trunk_ratio_is_near_one() {
    let mut c1 = Conv1d::new(2, 16, 3, true);
    let mut c2 = Conv1d::new(16, 16, 3, true);
    let mut r = rng(1);
    c1.weight.iter_mut().chain(c2.weight.iter_mut()).for_each(|w| *w = r.sample::<f32, _>(StandardNormal) * 0.2);
    let net = Network::new(
        vec![2, 1000],
        vec![
            Layer::Conv(c1),
            Layer::Dropout(Dropout::new(0.5, true)),
            Layer::Conv(c2),
            Layer::GlobalAvgPool,
            Layer::Linear(Linear::new(16, 4)),
            Layer::Softmax,
        ],
    )
    .unwrap();
    let sn = SplitNetwork::split(net).unwrap();
    let x = random_tensor(vec![16, 2, 1000], 14);
    let t = sn.benchmark(&x, 20, Exec::Sequential).unwrap();
    assert!((0.1..=2.5).contains(&t.ratio), "{t:?}");
}
