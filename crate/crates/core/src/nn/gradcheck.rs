//! Central finite-difference gradient checker.
//!
//! A single layer is checked against the scalar `Σ wᵢ yᵢ` for a fixed random
//! projection `w`; a network is checked against its training loss.
//! Coordinates whose `±eps` perturbation changes any ReLU sign are skipped,
//! since the loss is not differentiable across a kink.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::seed::rng;

use super::layers::{Layer, LayerCache, Mode, Pass, Slot};
use super::network::Network;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f32,
    /// Bound on `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub rel_tol: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-3, rel_tol: 1e-2, floor: 1e-1 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    fn record(&mut self, cfg: &GradCheck, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
        self.checked += 1;
        self.worst = self.worst.max(err);
        if err > cfg.rel_tol {
            self.failures.push(format!("{}: analytic {analytic:.6e}, numeric {numeric:.6e}", what()));
        }
    }

    pub fn merge(&mut self, other: Report) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.worst = self.worst.max(other.worst);
        self.failures.extend(other.failures);
    }
}

fn train_forward(layer: &Layer, x: &Tensor, seed: u64) -> Result<(Tensor, LayerCache)> {
    let pass = Pass { mode: Mode::Train, seed, exec: Exec::Sequential };
    layer.forward_train(x, &pass, 0)
}

fn project(y: &Tensor, w: &[f64]) -> f64 {
    y.data().iter().zip(w).map(|(&a, &b)| f64::from(a) * b).sum()
}

fn pattern(cache: &LayerCache) -> Vec<bool> {
    let mut p = Vec::new();
    Layer::relu_pattern(cache, &mut p);
    p
}

/// Checks `dx` and every parameter gradient of `layer` at input `x`.
#[allow(clippy::needless_range_loop)]
pub fn check_layer(layer: &Layer, x: &Tensor, seed: u64, cfg: &GradCheck) -> Result<Report> {
    if matches!(layer, Layer::Softmax) {
        return Err(Error::InvalidParams("softmax is differentiated through the loss; check it in a network".into()));
    }
    let (y, cache) = train_forward(layer, x, seed)?;
    let mut r = rng(seed ^ 0x5EED);
    let w: Vec<f64> = (0..y.data().len()).map(|_| r.sample(StandardNormal)).collect();
    let dy = Tensor::new(y.shape().to_vec(), w.iter().map(|&v| v as f32).collect())?;
    let (dx, grads) = layer.backward(&cache, &dy, Exec::Sequential);
    let base = pattern(&cache);
    let mut report = Report::default();

    let eps = f64::from(cfg.eps);
    let probe = |l: &Layer, xi: &Tensor| -> Result<(f64, Vec<bool>)> {
        let (y, c) = train_forward(l, xi, seed)?;
        Ok((project(&y, &w), pattern(&c)))
    };

    for i in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += cfg.eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= cfg.eps;
        let (lp, pp) = probe(layer, &xp)?;
        let (lm, pm) = probe(layer, &xm)?;
        if pp != base || pm != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        report.record(cfg, || format!("input[{i}]"), f64::from(dx.data()[i]), numeric);
    }

    let mut work = layer.clone();
    let names: Vec<(String, usize)> = {
        let mut v = Vec::new();
        layer.named("layer", &mut v);
        v.into_iter().filter(|n| n.slot == Slot::Param).map(|n| (n.name, n.data.len())).collect()
    };
    for (t, (name, len)) in names.iter().enumerate() {
        for j in 0..*len {
            let set = |l: &mut Layer, value: Option<f32>| -> f32 {
                let mut v = Vec::new();
                l.named_mut("layer", &mut v);
                let slot = v.into_iter().filter(|n| n.slot == Slot::Param).nth(t).expect("param slot");
                let old = slot.data[j];
                if let Some(value) = value {
                    slot.data[j] = value;
                }
                old
            };
            let orig = set(&mut work, None);
            set(&mut work, Some(orig + cfg.eps));
            let (lp, pp) = probe(&work, x)?;
            set(&mut work, Some(orig - cfg.eps));
            let (lm, pm) = probe(&work, x)?;
            set(&mut work, Some(orig));
            if pp != base || pm != base {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * eps);
            report.record(cfg, || format!("{name}[{j}]"), f64::from(grads[t][j]), numeric);
        }
    }
    Ok(report)
}

/// Checks every parameter gradient of the training loss. When `stride > 1`
/// only every `stride`-th coordinate of each tensor is perturbed.
pub fn check_network(net: &Network, x: &Tensor, targets: &[usize], seed: u64, cfg: &GradCheck, stride: usize) -> Result<Report> {
    let bp = net.backward_with(Exec::Sequential, x, targets, seed)?;
    let base = net.relu_pattern(x, seed)?;
    let eps = f64::from(cfg.eps);
    let mut work = net.clone();
    let mut report = Report::default();
    let names: Vec<(String, usize)> = net
        .named()
        .into_iter()
        .filter(|n| n.slot == Slot::Param)
        .map(|n| (n.name, n.data.len()))
        .collect();
    for (t, (name, len)) in names.iter().enumerate() {
        for j in (0..*len).step_by(stride.max(1)) {
            let orig = work.params()[t][j];
            work.params_mut()[t][j] = orig + cfg.eps;
            let lp = work.loss(x, targets, seed)?;
            let pp = work.relu_pattern(x, seed)?;
            work.params_mut()[t][j] = orig - cfg.eps;
            let lm = work.loss(x, targets, seed)?;
            let pm = work.relu_pattern(x, seed)?;
            work.params_mut()[t][j] = orig;
            if pp != base || pm != base {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * eps);
            report.record(cfg, || format!("{name}[{j}]"), f64::from(bp.grads[t][j]), numeric);
        }
    }
    Ok(report)
}
