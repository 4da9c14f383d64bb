//! Supervised training of the residual CNN on known-transmitter records.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{argmax_f32, Architecture, Mode, Network};
use crate::seed::{derive, derive_label, rng};
use crate::synth::{augment_shift, to_tensor, SignalRecord};

/// Records per inference batch outside training.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Uniform circular shift in `[-max_shift, max_shift]` per record and epoch.
    pub max_shift: usize,
    /// Share of each class held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_shift: 50,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch size must be at least 2 for batch normalization");
        }
        if self.epochs == 0 {
            return bad("need at least one epoch");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight decay non-negative");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must be in [0, 1)");
        }
        if self.max_shift >= crate::synth::RECORD_LEN {
            return bad("max_shift must be below the record length");
        }
        Ok(())
    }

    /// Step decay: ×0.1 from 50% of the epochs, ×0.01 from 75%.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.learning_rate;
        if 2 * epoch >= self.epochs {
            lr *= 0.1;
        }
        if 4 * epoch >= 3 * self.epochs {
            lr *= 0.1;
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub architecture: Architecture,
    pub network: Network,
    pub log: Vec<EpochLog>,
    /// Indices (into the training records) used for validation.
    pub validation: Vec<usize>,
}

impl TrainOutcome {
    pub fn final_val_acc(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |l| l.val_acc)
    }
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn label(r: &SignalRecord, classes: usize) -> Result<usize> {
    match r.transmitter {
        Some(t) if t < classes => Ok(t),
        _ => Err(Error::Incompatible(format!(
            "training record with label {:?} does not fit {classes} classes",
            r.transmitter
        ))),
    }
}

/// Per-class shuffle, first `round(fraction * n)` of each class held out.
pub fn stratified_split(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng(derive(seed, c as u64)));
        let n_val = (idx.len() as f64 * fraction).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Argmax accuracy with all dropout off.
pub fn evaluate(net: &Network, records: &[&SignalRecord], labels: &[usize], exec: Exec) -> Result<f64> {
    if records.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0;
    for (chunk, lab) in records.chunks(EVAL_BATCH).zip(labels.chunks(EVAL_BATCH)) {
        let y = net.forward_with(exec, &to_tensor(chunk.iter().copied()), Mode::Disabled, 0)?;
        correct += y.rows().zip(lab).filter(|(row, &l)| argmax_f32(row) == l).count();
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Parameters beyond this magnitude count as divergence; the next forward
/// pass could otherwise overflow f32.
pub const PARAM_LIMIT: f32 = 1e6;

/// Trains `arch` on `records` (labels are the transmitter ids). Deterministic
/// for a fixed configuration regardless of `exec`.
pub fn train(records: &[SignalRecord], arch: &Architecture, cfg: &TrainConfig, exec: Exec) -> Result<TrainOutcome> {
    train_with(records, arch, cfg, exec, |_, _| {})
}

/// [`train`] with `on_epoch` called after every epoch.
pub fn train_with<F>(
    records: &[SignalRecord],
    arch: &Architecture,
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog, &Network),
{
    cfg.validate()?;
    arch.validate()?;
    if records.is_empty() {
        return Err(Error::Dataset("no training records".into()));
    }
    let labels = records.iter().map(|r| label(r, arch.classes)).collect::<Result<Vec<_>>>()?;
    let (fit, val) = stratified_split(&labels, arch.classes, cfg.validation_fraction, derive_label(cfg.seed, "validation"));
    if fit.len() < 2 {
        return Err(Error::Dataset("fewer than 2 records left for fitting".into()));
    }
    let mut net = arch.build(derive_label(cfg.seed, "init"))?;
    let mut velocity: Vec<Vec<f32>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let val_recs: Vec<&SignalRecord> = val.iter().map(|&i| &records[i]).collect();
    let val_labels: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    let (shuffle_seed, shift_seed, mask_seed) = (
        derive_label(cfg.seed, "shuffle"),
        derive_label(cfg.seed, "shift"),
        derive_label(cfg.seed, "dropout"),
    );
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order = fit.clone();
        order.shuffle(&mut rng(derive(shuffle_seed, epoch as u64)));
        let epoch_shift = derive(shift_seed, epoch as u64);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let shifted = batch
                .iter()
                .map(|&i| augment_shift(&records[i], cfg.max_shift, derive(epoch_shift, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let x = to_tensor(&shifted);
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let seed = derive(derive(mask_seed, epoch as u64), b as u64);
            let bp = net.backward_with(exec, &x, &targets, seed)?;
            if !bp.loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss: bp.loss });
            }
            if !sgd_step(&mut net, &mut velocity, &bp.grads, lr, cfg) {
                return Err(Error::Diverged { epoch, batch: b, loss: bp.loss });
            }
            net.apply_batch_stats(&bp.stats);
            loss_sum += bp.loss * batch.len() as f64;
            correct += bp.correct;
            seen += batch.len();
        }
        let val_acc = evaluate(&net, &val_recs, &val_labels, exec)?;
        log.push(EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_acc,
            lr,
        });
        on_epoch(log.last().expect("just pushed"), &net);
    }
    Ok(TrainOutcome { architecture: arch.clone(), network: net, log, validation: val })
}

/// `v = μv + g + λw; w -= lr·v`. Returns false if any parameter exceeds
/// [`PARAM_LIMIT`] in magnitude.
fn sgd_step(net: &mut Network, velocity: &mut [Vec<f32>], grads: &[Vec<f32>], lr: f64, cfg: &TrainConfig) -> bool {
    let (mu, wd, lr) = (cfg.momentum as f32, cfg.weight_decay as f32, lr as f32);
    let mut finite = true;
    for ((w, v), g) in net.params_mut().into_iter().zip(velocity.iter_mut()).zip(grads) {
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = mu * *vi + gi + wd * *wi;
            *wi -= lr * *vi;
            finite &= wi.abs() <= PARAM_LIMIT;
        }
    }
    finite
}
