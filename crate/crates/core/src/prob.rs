//! Probability vectors, threshold error correction and the two ensemble
//! decision rules (plain averaging and averaging of corrected members).
//!
//! All functions here are pure; accumulation is in `f64` and always runs in
//! member order, so the corrected rule with thresholds `(0, 1)` reproduces
//! the plain rule bit for bit.

use crate::error::{Error, Result};

/// A discrete distribution over `C >= 2` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector {
    mass: Vec<f64>,
}

impl ProbabilityVector {
    /// Absolute tolerance on `sum(mass) == 1`.
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(mass: Vec<f64>) -> Result<Self> {
        if mass.len() < 2 {
            return Err(Error::InvalidProbability(format!(
                "need at least 2 classes, got {}",
                mass.len()
            )));
        }
        if let Some(bad) = mass.iter().find(|m| !m.is_finite() || **m < 0.0) {
            return Err(Error::InvalidProbability(format!("entry {bad} is not a probability")));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidProbability(format!("entries sum to {total}")));
        }
        Ok(Self { mass })
    }

    /// Scales nonnegative weights to unit sum.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidProbability(format!("cannot normalize weights summing to {total}")));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    /// Widens a single-precision softmax row, renormalizing in `f64`.
    pub fn from_f32(row: &[f32]) -> Result<Self> {
        Self::normalized(row.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn uniform(classes: usize) -> Self {
        assert!(classes >= 2, "need at least 2 classes");
        Self { mass: vec![1.0 / classes as f64; classes] }
    }

    pub fn one_hot(classes: usize, index: usize) -> Self {
        assert!(classes >= 2 && index < classes);
        let mut mass = vec![0.0; classes];
        mass[index] = 1.0;
        Self { mass }
    }

    pub fn classes(&self) -> usize {
        self.mass.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.mass
    }

    pub fn peak(&self) -> f64 {
        self.mass.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &m) in self.mass.iter().enumerate().skip(1) {
            if m > self.mass[best] {
                best = i;
            }
        }
        best
    }
}

/// Thresholds and ensemble size for the corrected decision rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectionParams {
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub ensemble_size: usize,
}

impl CorrectionParams {
    pub fn new(beta1: f64, beta2: f64, lambda: f64, ensemble_size: usize) -> Result<Self> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(beta1) || !unit(beta2) {
            return Err(Error::InvalidParams(format!("thresholds ({beta1}, {beta2}) must lie in [0, 1]")));
        }
        if beta1 >= beta2 {
            return Err(Error::InvalidParams(format!("beta1 = {beta1} must be below beta2 = {beta2}")));
        }
        if !unit(lambda) {
            return Err(Error::InvalidParams(format!("lambda = {lambda} must lie in [0, 1]")));
        }
        if ensemble_size == 0 {
            return Err(Error::InvalidParams("ensemble size must be positive".into()));
        }
        Ok(Self { beta1, beta2, lambda, ensemble_size })
    }

    /// `beta1 = 0, beta2 = 1`: correction leaves every member unchanged.
    pub fn identity(lambda: f64, ensemble_size: usize) -> Result<Self> {
        Self::new(0.0, 1.0, lambda, ensemble_size)
    }
}

/// Threshold error correction of a single ensemble member.
///
/// peak `>= beta2` snaps to one-hot at the argmax, peak `< beta1` flattens to
/// uniform, anything in between is returned unchanged.
pub fn correct(v: &ProbabilityVector, p: &CorrectionParams) -> ProbabilityVector {
    let peak = v.peak();
    if peak >= p.beta2 {
        ProbabilityVector::one_hot(v.classes(), v.argmax())
    } else if peak < p.beta1 {
        ProbabilityVector::uniform(v.classes())
    } else {
        v.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Known { category: usize },
    /// Unknown transmitter or random signal.
    Other,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleDecision {
    pub verdict: Verdict,
    /// Element-wise ensemble mean `s`.
    pub averaged: ProbabilityVector,
    /// `t = max_i s_i`.
    pub peak: f64,
}

impl EnsembleDecision {
    /// Thresholds an averaged distribution: `peak < lambda` is rejected.
    pub fn decide(averaged: ProbabilityVector, lambda: f64) -> Self {
        let peak = averaged.peak();
        let verdict = if peak < lambda {
            Verdict::Other
        } else {
            Verdict::Known { category: averaged.argmax() }
        };
        Self { verdict, averaged, peak }
    }

    pub fn is_known(&self) -> bool {
        matches!(self.verdict, Verdict::Known { .. })
    }

    pub fn category(&self) -> Option<usize> {
        match self.verdict {
            Verdict::Known { category } => Some(category),
            Verdict::Other => None,
        }
    }
}

/// Streaming element-wise mean. Peak memory is one class-length buffer no
/// matter how many members are added.
#[derive(Clone, Debug)]
pub struct EnsembleAccumulator {
    sum: Vec<f64>,
    members: usize,
}

impl EnsembleAccumulator {
    pub fn new(classes: usize) -> Self {
        Self { sum: vec![0.0; classes], members: 0 }
    }

    pub fn add(&mut self, v: &ProbabilityVector) -> Result<()> {
        if v.classes() != self.sum.len() {
            return Err(Error::InvalidParams(format!(
                "ensemble member has {} classes, expected {}",
                v.classes(),
                self.sum.len()
            )));
        }
        for (s, m) in self.sum.iter_mut().zip(v.as_slice()) {
            *s += m;
        }
        self.members += 1;
        Ok(())
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn average(&self) -> Result<ProbabilityVector> {
        if self.members == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let k = self.members as f64;
        let mass: Vec<f64> = self.sum.iter().map(|s| s / k).collect();
        debug_assert!((mass.iter().sum::<f64>() - 1.0).abs() <= ProbabilityVector::SUM_TOLERANCE);
        Ok(ProbabilityVector { mass })
    }
}

/// Plain ensemble averaging followed by the `lambda` rejection test.
pub fn ensemble_average(vs: &[ProbabilityVector], lambda: f64) -> Result<EnsembleDecision> {
    let first = vs.first().ok_or(Error::EmptyEnsemble)?;
    let mut acc = EnsembleAccumulator::new(first.classes());
    for v in vs {
        acc.add(v)?;
    }
    Ok(EnsembleDecision::decide(acc.average()?, lambda))
}

/// Corrects every member, then averages and thresholds as
/// [`ensemble_average`] does.
pub fn ensemble_corrected(vs: &[ProbabilityVector], p: &CorrectionParams) -> Result<EnsembleDecision> {
    let corrected: Vec<ProbabilityVector> = vs.iter().map(|v| correct(v, p)).collect();
    ensemble_average(&corrected, p.lambda)
}
