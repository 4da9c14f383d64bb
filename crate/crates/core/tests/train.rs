use mcdrop::nn::weights::{load, save};
use mcdrop::nn::{Architecture, Slot};
use mcdrop::seed::rng;
use mcdrop::synth::{to_tensor, SignalRecord, Tag, RECORD_LEN};
use mcdrop::nn::Mode;
use mcdrop::train::{evaluate, train, train_with, TrainConfig};
use mcdrop::{Error, Exec};
use rand::Rng;
use rand_distr::StandardNormal;

/// Class 0 has a positive in-phase mean, class 1 a negative one.
fn separable(n: usize, seed: u64) -> Vec<SignalRecord> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let c = i % 2;
            let mu = if c == 0 { 0.5 } else { -0.5 };
            let iq = (0..2 * RECORD_LEN)
                .map(|j| {
                    let z: f32 = r.sample(StandardNormal);
                    if j % 2 == 0 { mu + 0.5 * z } else { 0.5 * z }
                })
                .collect();
            SignalRecord { iq, tag: Tag::Known, transmitter: Some(c), snr_db: None }
        })
        .collect()
}

fn tiny_arch() -> Architecture {
    Architecture { blocks: 1, base_width: 8, max_width: 8, ..Architecture::desk(2) }
}

fn smoke_cfg() -> TrainConfig {
    TrainConfig { epochs: 20, batch_size: 16, max_shift: 20, seed: 3, ..Default::default() }
}

/// Mean cross-entropy with dropout off.
fn fixed_batch_loss(net: &mcdrop::nn::Network, recs: &[SignalRecord]) -> f64 {
    let y = net.forward(&to_tensor(recs), Mode::Disabled, 0).unwrap();
    let total: f64 = y.rows().zip(recs).map(|(p, r)| -f64::from(p[r.transmitter.unwrap()]).ln()).sum();
    total / recs.len() as f64
}

#[test]
fn separable_smoke_test_converges() {
    let recs = separable(200, 1);
    let probe = &recs[..32];
    let mut losses = Vec::new();
    let out = train_with(&recs, &tiny_arch(), &smoke_cfg(), Exec::default(), |_, net| {
        losses.push(fixed_batch_loss(net, probe));
    })
    .unwrap();
    let refs: Vec<&SignalRecord> = recs.iter().collect();
    let labels: Vec<usize> = recs.iter().map(|r| r.transmitter.unwrap()).collect();
    let acc = evaluate(&out.network, &refs, &labels, Exec::default()).unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
    for w in losses[..5].windows(2) {
        assert!(w[1] <= w[0], "probe loss rose: {:?}", &losses[..5]);
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let recs = separable(40, 2);
    let arch = tiny_arch();
    let cfg = TrainConfig { learning_rate: 0.0, epochs: 2, ..smoke_cfg() };
    let out = train(&recs, &arch, &cfg, Exec::default()).unwrap();
    let init = arch.build(mcdrop::seed::derive_label(cfg.seed, "init")).unwrap();
    let params = |n: &mcdrop::nn::Network| -> Vec<Vec<f32>> {
        n.named().into_iter().filter(|t| t.slot == Slot::Param).map(|t| t.data.to_vec()).collect()
    };
    assert_eq!(params(&out.network), params(&init));
}

#[test]
fn fixed_seed_training_is_reproducible_and_reloads_exactly() {
    let recs = separable(60, 3);
    let cfg = TrainConfig { epochs: 3, ..smoke_cfg() };
    let a = train(&recs, &tiny_arch(), &cfg, Exec::Parallel).unwrap();
    let b = train(&recs, &tiny_arch(), &cfg, Exec::Sequential).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    save(&pa, &a.architecture, &a.network).unwrap();
    save(&pb, &b.architecture, &b.network).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    assert_eq!(a.log, b.log);

    let (_, reloaded) = load(&pa).unwrap();
    let val: Vec<&SignalRecord> = a.validation.iter().map(|&i| &recs[i]).collect();
    let labels: Vec<usize> = val.iter().map(|r| r.transmitter.unwrap()).collect();
    assert_eq!(evaluate(&reloaded, &val, &labels, Exec::default()).unwrap(), a.final_val_acc());
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let recs = separable(40, 4);
    let cfg = TrainConfig { learning_rate: 1e30, epochs: 3, ..smoke_cfg() };
    let err = train(&recs, &tiny_arch(), &cfg, Exec::default()).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn labels_outside_the_class_range_are_rejected() {
    let mut recs = separable(10, 5);
    recs[0].transmitter = Some(7);
    assert!(matches!(train(&recs, &tiny_arch(), &smoke_cfg(), Exec::default()), Err(Error::Incompatible(_))));
}
