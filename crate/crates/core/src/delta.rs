//! Gain of corrected averaging over plain averaging at the correct class.
//!
//! Two independent routes to the same quantity:
//!
//! * [`delta_closed_form`] evaluates the large-ensemble expression from a
//!   handful of conditional means and conditional CDF values
//!   ([`DeltaInputs`]), which [`estimate_delta_inputs`] measures from samples.
//! * [`delta_empirical`] draws members, runs [`correct`] on each and averages
//!   `corrected[c] - raw[c]` directly.
//!
//! Draws are generated in fixed-size chunks whose generators are keyed by
//! `(model seed, chunk index)`, so a given seed yields the same draws under
//! any [`Exec`] strategy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::prob::{correct, CorrectionParams, EnsembleAccumulator, ProbabilityVector};
use crate::seed;

/// Draws per generator chunk.
const CHUNK: usize = 4096;

/// Sufficient statistics for the closed-form gain at class `c`.
///
/// `right` refers to members whose strict argmax is `c`, `wrong` to the rest.
/// `_hi` / `_lo` are conditional means of the member's mass at `c` given the
/// relevant peak lies above `beta2` / below `beta1`. The `cdf_*` fields are
/// `P[x <= beta]` of the member's mass at `c` (right) or of its peak (wrong).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaInputs {
    pub alpha: f64,
    pub classes: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub vbar_right_hi: f64,
    pub vbar_right_lo: f64,
    pub vbar_wrong_hi: f64,
    pub vbar_wrong_lo: f64,
    pub cdf_right_b2: f64,
    pub cdf_right_b1: f64,
    pub cdf_wrong_b2: f64,
    pub cdf_wrong_b1: f64,
}

impl DeltaInputs {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let all_unit = [
            self.alpha,
            self.vbar_right_hi,
            self.vbar_right_lo,
            self.vbar_wrong_hi,
            self.vbar_wrong_lo,
            self.cdf_right_b2,
            self.cdf_right_b1,
            self.cdf_wrong_b2,
            self.cdf_wrong_b1,
        ]
        .into_iter()
        .all(unit);
        if !all_unit || self.classes < 2 {
            return Err(Error::InvalidParams(format!("delta inputs out of range: {self:?}")));
        }
        if self.cdf_right_b1 > self.cdf_right_b2 || self.cdf_wrong_b1 > self.cdf_wrong_b2 {
            return Err(Error::InvalidParams("conditional CDF must be non-decreasing".into()));
        }
        Ok(())
    }
}

/// Large-ensemble gain at the correct class.
pub fn delta_closed_form(d: &DeltaInputs) -> f64 {
    let inv_c = 1.0 / d.classes as f64;
    let right = (1.0 - d.vbar_right_hi) * (1.0 - d.cdf_right_b2) - (d.vbar_right_lo - inv_c) * d.cdf_right_b1;
    let wrong = d.vbar_wrong_hi * (1.0 - d.cdf_wrong_b2) - (inv_c - d.vbar_wrong_lo) * d.cdf_wrong_b1;
    d.alpha * right - (1.0 - d.alpha) * wrong
}

/// Whether corrected averaging puts more mass on the correct class.
pub fn theorem1_holds(d: &DeltaInputs) -> bool {
    delta_closed_form(d) > 0.0
}

/// Softmax outputs paired with the class they should have predicted.
#[derive(Clone, Debug, Default)]
pub struct SoftmaxSampleSet {
    samples: Vec<(ProbabilityVector, usize)>,
}

impl SoftmaxSampleSet {
    pub fn new(samples: Vec<(ProbabilityVector, usize)>) -> Result<Self> {
        if let Some((v, c)) = samples.iter().find(|(v, c)| *c >= v.classes()) {
            return Err(Error::InvalidParams(format!("class {c} out of range for {} classes", v.classes())));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[(ProbabilityVector, usize)] {
        &self.samples
    }

    /// Indices of correctly predicting members and of the rest.
    pub fn partition(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.samples.len()).partition(|&i| {
            let (v, c) = &self.samples[i];
            predicts(v.as_slice(), *c)
        })
    }
}

/// Strict argmax test: `v[c] > v[i]` for every `i != c`.
fn predicts(v: &[f64], c: usize) -> bool {
    v.iter().enumerate().all(|(i, &x)| i == c || v[c] > x)
}

#[derive(Clone, Debug, Default)]
struct DeltaStats {
    total: u64,
    right: u64,
    right_hi: (u64, f64),
    right_lo: (u64, f64),
    right_le_b2: u64,
    right_le_b1: u64,
    wrong_hi: (u64, f64),
    wrong_lo: (u64, f64),
    wrong_le_b2: u64,
    wrong_le_b1: u64,
    classes: usize,
}

impl DeltaStats {
    fn push(&mut self, v: &[f64], c: usize, beta1: f64, beta2: f64) {
        self.total += 1;
        self.classes = v.len();
        let vc = v[c];
        if predicts(v, c) {
            self.right += 1;
            if vc > beta2 {
                self.right_hi.0 += 1;
                self.right_hi.1 += vc;
            }
            if vc < beta1 {
                self.right_lo.0 += 1;
                self.right_lo.1 += vc;
            }
            self.right_le_b2 += u64::from(vc <= beta2);
            self.right_le_b1 += u64::from(vc <= beta1);
        } else {
            let peak = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if peak > beta2 {
                self.wrong_hi.0 += 1;
                self.wrong_hi.1 += vc;
            }
            if peak < beta1 {
                self.wrong_lo.0 += 1;
                self.wrong_lo.1 += vc;
            }
            self.wrong_le_b2 += u64::from(peak <= beta2);
            self.wrong_le_b1 += u64::from(peak <= beta1);
        }
    }

    fn merge(&mut self, o: &DeltaStats) {
        self.total += o.total;
        self.right += o.right;
        self.right_hi.0 += o.right_hi.0;
        self.right_hi.1 += o.right_hi.1;
        self.right_lo.0 += o.right_lo.0;
        self.right_lo.1 += o.right_lo.1;
        self.right_le_b2 += o.right_le_b2;
        self.right_le_b1 += o.right_le_b1;
        self.wrong_hi.0 += o.wrong_hi.0;
        self.wrong_hi.1 += o.wrong_hi.1;
        self.wrong_lo.0 += o.wrong_lo.0;
        self.wrong_lo.1 += o.wrong_lo.1;
        self.wrong_le_b2 += o.wrong_le_b2;
        self.wrong_le_b1 += o.wrong_le_b1;
        self.classes = self.classes.max(o.classes);
    }

    fn finish(&self, beta1: f64, beta2: f64) -> Result<DeltaInputs> {
        if self.total == 0 {
            return Err(Error::EmptySampleSet);
        }
        // An empty conditioning set gets mean 0; its multiplying probability is 0 too.
        let mean = |(n, s): (u64, f64)| if n == 0 { 0.0 } else { s / n as f64 };
        let frac = |k: u64, n: u64, empty: f64| if n == 0 { empty } else { k as f64 / n as f64 };
        let wrong = self.total - self.right;
        let d = DeltaInputs {
            alpha: self.right as f64 / self.total as f64,
            classes: self.classes,
            beta1,
            beta2,
            vbar_right_hi: mean(self.right_hi),
            vbar_right_lo: mean(self.right_lo),
            vbar_wrong_hi: mean(self.wrong_hi),
            vbar_wrong_lo: mean(self.wrong_lo),
            cdf_right_b2: frac(self.right_le_b2, self.right, 1.0),
            cdf_right_b1: frac(self.right_le_b1, self.right, 0.0),
            cdf_wrong_b2: frac(self.wrong_le_b2, wrong, 1.0),
            cdf_wrong_b1: frac(self.wrong_le_b1, wrong, 0.0),
        };
        debug_assert!(d.validate().is_ok());
        Ok(d)
    }
}

/// Empirical [`DeltaInputs`] for thresholds `(beta1, beta2)`.
pub fn estimate_delta_inputs(s: &SoftmaxSampleSet, beta1: f64, beta2: f64) -> Result<DeltaInputs> {
    let mut stats = DeltaStats::default();
    for (v, c) in s.samples() {
        stats.push(v.as_slice(), *c, beta1, beta2);
    }
    stats.finish(beta1, beta2)
}

/// [`estimate_delta_inputs`] over `n` draws of `model` without materializing
/// them. Uses exactly the draws [`delta_empirical`] sees for the same model.
pub fn estimate_delta_inputs_from_model(
    model: &NoiseModel,
    correct_class: usize,
    beta1: f64,
    beta2: f64,
    n: usize,
) -> Result<DeltaInputs> {
    model.check_class(correct_class)?;
    let parts = model.fold_chunks(Exec::default(), n, correct_class, |draws| {
        let mut st = DeltaStats::default();
        for v in draws {
            st.push(v.as_slice(), correct_class, beta1, beta2);
        }
        st
    });
    let mut stats = DeltaStats::default();
    for p in &parts {
        stats.merge(p);
    }
    stats.finish(beta1, beta2)
}

#[derive(Clone, Debug, PartialEq)]
pub enum NoiseKind {
    /// `Dir(concentration, ..., concentration)`; exchangeable coordinates.
    SymmetricDirichlet { concentration: f64 },
    /// With probability `alpha`, a Dirichlet vector with concentration `peak`
    /// at the correct class and `rest` elsewhere, conditioned by rejection on
    /// its argmax being the correct class. Otherwise the same construction
    /// peaked at a uniformly chosen other class, conditioned on its argmax not
    /// being the correct class.
    PeakedMixture { alpha: f64, peak: f64, rest: f64 },
    /// Always the same vector.
    Fixed(ProbabilityVector),
}

/// Generator of synthetic softmax outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub classes: usize,
    pub seed: u64,
}

impl NoiseModel {
    pub fn symmetric_dirichlet(classes: usize, concentration: f64, seed: u64) -> Result<Self> {
        Self::new(NoiseKind::SymmetricDirichlet { concentration }, classes, seed)
    }

    pub fn peaked_mixture(classes: usize, alpha: f64, peak: f64, rest: f64, seed: u64) -> Result<Self> {
        Self::new(NoiseKind::PeakedMixture { alpha, peak, rest }, classes, seed)
    }

    pub fn fixed(v: ProbabilityVector, seed: u64) -> Self {
        let classes = v.classes();
        Self { kind: NoiseKind::Fixed(v), classes, seed }
    }

    pub fn new(kind: NoiseKind, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidParams("noise model needs at least 2 classes".into()));
        }
        let positive = |a: f64| a.is_finite() && a > 0.0;
        match &kind {
            NoiseKind::SymmetricDirichlet { concentration } if !positive(*concentration) => {
                return Err(Error::InvalidParams(format!("concentration {concentration} must be positive")));
            }
            NoiseKind::PeakedMixture { alpha, peak, rest } => {
                if !(0.0..=1.0).contains(alpha) || !positive(*peak) || !positive(*rest) {
                    return Err(Error::InvalidParams(format!("bad mixture parameters {kind:?}")));
                }
            }
            NoiseKind::Fixed(v) if v.classes() != classes => {
                return Err(Error::InvalidParams("fixed vector has the wrong class count".into()));
            }
            _ => {}
        }
        Ok(Self { kind, classes, seed })
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.classes {
            return Err(Error::InvalidParams(format!("class {c} out of range for {} classes", self.classes)));
        }
        Ok(())
    }

    /// One draw. `correct_class` matters only for the mixture.
    pub fn draw(&self, rng: &mut ChaCha8Rng, correct_class: usize) -> ProbabilityVector {
        match &self.kind {
            NoiseKind::SymmetricDirichlet { concentration } => dirichlet(rng, self.classes, *concentration),
            NoiseKind::PeakedMixture { alpha, peak, rest } => {
                let right = rng.random::<f64>() < *alpha;
                let target = if right {
                    correct_class
                } else {
                    let t = rng.random_range(0..self.classes - 1);
                    t + usize::from(t >= correct_class)
                };
                let mut conc = vec![*rest; self.classes];
                conc[target] = *peak;
                let gammas: Vec<Gamma<f64>> =
                    conc.iter().map(|&a| Gamma::new(a, 1.0).expect("positive concentration")).collect();
                loop {
                    let w = gamma_weights(rng, &gammas);
                    if (argmax(&w) == correct_class) == right {
                        break normalize(w);
                    }
                }
            }
            NoiseKind::Fixed(v) => v.clone(),
        }
    }

    /// The first `n` draws of this model's stream.
    pub fn draws(&self, correct_class: usize, n: usize) -> Vec<ProbabilityVector> {
        self.fold_chunks(Exec::default(), n, correct_class, |d| d).into_iter().flatten().collect()
    }

    /// Generates `n` draws chunk by chunk and maps each chunk through `f`.
    /// Results come back in chunk order.
    fn fold_chunks<R, F>(&self, exec: Exec, n: usize, correct_class: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(Vec<ProbabilityVector>) -> R + Sync + Send,
    {
        let chunks = n.div_ceil(CHUNK);
        exec.map_range(chunks, |j| {
            let len = CHUNK.min(n - j * CHUNK);
            let mut rng = seed::rng(seed::derive(self.seed, j as u64));
            let draws = (0..len).map(|_| self.draw(&mut rng, correct_class)).collect();
            f(draws)
        })
    }
}

fn argmax(w: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..w.len() {
        if w[i] > w[best] {
            best = i;
        }
    }
    best
}

fn gamma_weights(rng: &mut ChaCha8Rng, gammas: &[Gamma<f64>]) -> Vec<f64> {
    loop {
        let w: Vec<f64> = gammas.iter().map(|g| g.sample(rng)).collect();
        // all coordinates can underflow for tiny concentrations
        if w.iter().sum::<f64>() > 0.0 {
            return w;
        }
    }
}

fn normalize(w: Vec<f64>) -> ProbabilityVector {
    ProbabilityVector::normalized(w).expect("positive Dirichlet weights")
}

fn dirichlet(rng: &mut ChaCha8Rng, classes: usize, concentration: f64) -> ProbabilityVector {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    normalize(gamma_weights(rng, &vec![gamma; classes]))
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaEstimate {
    pub value: f64,
    pub std_error: f64,
    pub draws: usize,
}

/// Brute-force gain: mean over `n_draws` members of
/// `correct(v)[c] - v[c]`, i.e. corrected-average mass minus plain-average
/// mass at the correct class.
pub fn delta_empirical(
    model: &NoiseModel,
    correct_class: usize,
    p: &CorrectionParams,
    n_draws: usize,
) -> Result<DeltaEstimate> {
    delta_empirical_with(Exec::default(), model, correct_class, p, n_draws)
}

pub fn delta_empirical_with(
    exec: Exec,
    model: &NoiseModel,
    correct_class: usize,
    p: &CorrectionParams,
    n_draws: usize,
) -> Result<DeltaEstimate> {
    if n_draws == 0 {
        return Err(Error::InvalidParams("need at least one draw".into()));
    }
    model.check_class(correct_class)?;
    let parts = model.fold_chunks(exec, n_draws, correct_class, |draws| {
        let (mut s, mut s2) = (0.0f64, 0.0f64);
        for v in &draws {
            let d = correct(v, p).as_slice()[correct_class] - v.as_slice()[correct_class];
            s += d;
            s2 += d * d;
        }
        (s, s2)
    });
    let (s, s2) = parts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let n = n_draws as f64;
    let mean = s / n;
    let var = if n_draws > 1 { ((s2 - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok(DeltaEstimate { value: mean, std_error: (var / n).sqrt(), draws: n_draws })
}

/// Largest per-class distance of each algorithm's averaged distribution from
/// uniform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformDeviation {
    pub average: f64,
    pub corrected: f64,
}

pub fn uniform_deviation(vs: &[ProbabilityVector], p: &CorrectionParams) -> Result<UniformDeviation> {
    let first = vs.first().ok_or(Error::EmptyEnsemble)?;
    let mut plain = EnsembleAccumulator::new(first.classes());
    let mut corrected = EnsembleAccumulator::new(first.classes());
    for v in vs {
        plain.add(v)?;
        corrected.add(&correct(v, p))?;
    }
    let dev = |s: ProbabilityVector| {
        let u = 1.0 / s.classes() as f64;
        s.as_slice().iter().map(|x| (x - u).abs()).fold(0.0, f64::max)
    };
    Ok(UniformDeviation { average: dev(plain.average()?), corrected: dev(corrected.average()?) })
}

/// Runs both algorithms on `k` draws of an exchangeable model and reports how
/// far each averaged distribution sits from uniform.
pub fn uniform_limit_check(model: &NoiseModel, p: &CorrectionParams, k: usize) -> Result<UniformDeviation> {
    if k == 0 {
        return Err(Error::EmptyEnsemble);
    }
    uniform_deviation(&model.draws(0, k), p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pv(m: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(m.to_vec()).unwrap()
    }

    fn zero_inputs() -> DeltaInputs {
        DeltaInputs {
            alpha: 0.0,
            classes: 10,
            beta1: 0.5,
            beta2: 0.92,
            vbar_right_hi: 0.0,
            vbar_right_lo: 0.0,
            vbar_wrong_hi: 0.0,
            vbar_wrong_lo: 0.0,
            cdf_right_b2: 1.0,
            cdf_right_b1: 0.0,
            cdf_wrong_b2: 1.0,
            cdf_wrong_b1: 0.0,
        }
    }

    fn reference_params() -> CorrectionParams {
        CorrectionParams::new(0.5, 0.92, 0.5, 500).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let d = DeltaInputs { alpha: 1.0, cdf_right_b2: 0.0, vbar_right_hi: 0.8, ..zero_inputs() };
        assert_abs_diff_eq!(delta_closed_form(&d), 0.2, epsilon = 1e-15);
        assert!(theorem1_holds(&d));

        let d = DeltaInputs { alpha: 1.0, cdf_right_b2: 1.0, cdf_right_b1: 0.0, vbar_right_hi: 0.3, ..zero_inputs() };
        assert_eq!(delta_closed_form(&d), 0.0);
        assert!(!theorem1_holds(&d));

        let d = DeltaInputs { alpha: 0.0, vbar_wrong_hi: 0.3, cdf_wrong_b2: 0.0, cdf_wrong_b1: 0.0, ..zero_inputs() };
        assert_abs_diff_eq!(delta_closed_form(&d), -0.3, epsilon = 1e-15);
        assert!(!theorem1_holds(&d));
    }

    #[test]
    fn validation() {
        assert!(zero_inputs().validate().is_ok());
        assert!(DeltaInputs { alpha: 1.5, ..zero_inputs() }.validate().is_err());
        assert!(DeltaInputs { cdf_right_b1: 0.9, cdf_right_b2: 0.1, ..zero_inputs() }.validate().is_err());
    }

    #[test]
    fn estimate_all_confident() {
        let set = SoftmaxSampleSet::new(vec![(pv(&[0.95, 0.03, 0.02]), 0); 10]).unwrap();
        let d = estimate_delta_inputs(&set, 0.5, 0.92).unwrap();
        assert_eq!(d.alpha, 1.0);
        assert_eq!(d.cdf_right_b2, 0.0);
        assert_abs_diff_eq!(d.vbar_right_hi, 0.95, epsilon = 1e-15);
    }

    #[test]
    fn estimate_two_point_split() {
        // one confident right member, one diffuse wrong member
        let right = pv(&[0.95, 0.03, 0.02]);
        let wrong = pv(&[0.2, 0.35, 0.45]);
        let set = SoftmaxSampleSet::new(vec![(right, 0), (wrong, 0)]).unwrap();
        let (r, w) = set.partition();
        assert_eq!((r, w), (vec![0], vec![1]));
        let d = estimate_delta_inputs(&set, 0.5, 0.92).unwrap();
        assert_eq!(d.alpha, 0.5);
        assert_eq!((d.cdf_right_b2, d.cdf_right_b1), (0.0, 0.0));
        assert_eq!((d.cdf_wrong_b2, d.cdf_wrong_b1), (1.0, 1.0));
        assert_abs_diff_eq!(d.vbar_right_hi, 0.95, epsilon = 1e-15);
        assert_abs_diff_eq!(d.vbar_wrong_lo, 0.2, epsilon = 1e-15);
        assert_eq!(d.vbar_wrong_hi, 0.0);
        // 0.5 * 0.05 + 0.5 * (1/3 - 0.2)
        let expected = 0.025 + 0.5 * (1.0 / 3.0 - 0.2);
        assert_abs_diff_eq!(delta_closed_form(&d), expected, epsilon = 1e-12);
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(matches!(
            estimate_delta_inputs(&SoftmaxSampleSet::default(), 0.5, 0.9),
            Err(Error::EmptySampleSet)
        ));
        let m = NoiseModel::symmetric_dirichlet(4, 1.0, 1).unwrap();
        assert!(delta_empirical(&m, 0, &reference_params(), 0).is_err());
        assert!(delta_empirical(&m, 4, &reference_params(), 10).is_err());
        assert!(SoftmaxSampleSet::new(vec![(pv(&[0.5, 0.5]), 2)]).is_err());
    }

    #[test]
    fn one_hot_model_has_zero_gain() {
        let m = NoiseModel::fixed(ProbabilityVector::one_hot(5, 2), 3);
        for (b1, b2) in [(0.5, 0.92), (0.0, 1.0), (0.3, 0.4)] {
            let p = CorrectionParams::new(b1, b2, 0.5, 1).unwrap();
            assert_eq!(delta_empirical(&m, 2, &p, 1000).unwrap().value, 0.0);
        }
    }

    #[test]
    fn mixture_respects_alpha_and_class() {
        let m = NoiseModel::peaked_mixture(10, 0.7, 5.0, 0.2, 11).unwrap();
        let draws = m.draws(3, 20_000);
        let right = draws.iter().filter(|v| v.argmax() == 3).count() as f64 / 20_000.0;
        assert!((right - 0.7).abs() < 4.0 * (0.7f64 * 0.3 / 20_000.0).sqrt(), "{right}");
        // wrong-branch argmax is spread over the other nine classes
        let other = draws.iter().filter(|v| v.argmax() == 0).count() as f64 / 20_000.0;
        assert!((other - 0.3 / 9.0).abs() < 0.006, "{other}");
    }

    #[test]
    fn draws_do_not_depend_on_strategy() {
        let m = NoiseModel::peaked_mixture(5, 0.9, 5.0, 0.4, 5).unwrap();
        let p = reference_params();
        let a = delta_empirical_with(Exec::Sequential, &m, 1, &p, 3 * CHUNK + 17).unwrap();
        let b = delta_empirical_with(Exec::Parallel, &m, 1, &p, 3 * CHUNK + 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn closed_form_matches_oracle_on_shared_draws() {
        let m = NoiseModel::peaked_mixture(10, 0.9, 10.0, 0.2, 2024).unwrap();
        let p = reference_params();
        let n = 200_000;
        let emp = delta_empirical(&m, 4, &p, n).unwrap();
        let d = estimate_delta_inputs_from_model(&m, 4, p.beta1, p.beta2, n).unwrap();
        assert!((delta_closed_form(&d) - emp.value).abs() <= 1e-12, "{} vs {}", delta_closed_form(&d), emp.value);
    }

    #[test]
    fn closed_form_matches_oracle_on_independent_draws() {
        let p = reference_params();
        let emp = delta_empirical(&NoiseModel::peaked_mixture(10, 0.9, 10.0, 0.2, 1).unwrap(), 0, &p, 1_000_000)
            .unwrap();
        let est_model = NoiseModel::peaked_mixture(10, 0.9, 10.0, 0.2, 2).unwrap();
        let d = estimate_delta_inputs_from_model(&est_model, 0, p.beta1, p.beta2, 100_000).unwrap();
        let diff = (delta_closed_form(&d) - emp.value).abs();
        assert!(diff <= 2e-3, "closed {} empirical {} (se {})", delta_closed_form(&d), emp.value, emp.std_error);
    }

    #[test]
    fn materialized_and_streamed_estimates_agree() {
        let m = NoiseModel::peaked_mixture(5, 0.7, 5.0, 0.4, 9).unwrap();
        let set = SoftmaxSampleSet::new(m.draws(1, 10_000).into_iter().map(|v| (v, 1)).collect()).unwrap();
        let a = estimate_delta_inputs(&set, 0.5, 0.92).unwrap();
        let b = estimate_delta_inputs_from_model(&m, 1, 0.5, 0.92, 10_000).unwrap();
        assert_abs_diff_eq!(delta_closed_form(&a), delta_closed_form(&b), epsilon = 1e-12);
        assert_eq!(a.alpha, b.alpha);
    }

    #[test]
    fn sign_change_in_alpha_matches_oracle() {
        // C = 5, peak 2, rest 0.2: positive gain at small alpha, negative near 1
        let p = reference_params();
        let step = 0.05;
        let alphas: Vec<f64> = (1..20).map(|i| i as f64 * step).collect();
        let flip = |signs: &[bool]| signs.iter().position(|&s| s != signs[0]).map(|i| alphas[i]);
        let closed: Vec<bool> = alphas
            .iter()
            .map(|&a| {
                let m = NoiseModel::peaked_mixture(5, a, 2.0, 0.2, 100).unwrap();
                theorem1_holds(&estimate_delta_inputs_from_model(&m, 0, p.beta1, p.beta2, 400_000).unwrap())
            })
            .collect();
        let empirical: Vec<bool> = alphas
            .iter()
            .map(|&a| {
                let m = NoiseModel::peaked_mixture(5, a, 2.0, 0.2, 200).unwrap();
                delta_empirical(&m, 0, &p, 400_000).unwrap().value > 0.0
            })
            .collect();
        assert!(closed[0] && !closed[closed.len() - 1]);
        let (a, b) = (flip(&closed).unwrap(), flip(&empirical).unwrap());
        assert!((a - b).abs() <= step + 1e-12, "closed-form flips at {a}, oracle at {b}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn identity_thresholds_give_zero_gain(seed in 0u64..1_000, alpha in 0.0f64..=1.0, classes in 2usize..20) {
            let m = NoiseModel::peaked_mixture(classes, alpha, 3.0, 0.3, seed).unwrap();
            let p = CorrectionParams::identity(0.5, 1).unwrap();
            proptest::prop_assert_eq!(delta_empirical(&m, 0, &p, 2_000).unwrap().value, 0.0);
        }
    }

    #[test]
    fn uniform_deviation_single_one_hot() {
        let dev = uniform_deviation(&[pv(&[1.0, 0.0])], &reference_params()).unwrap();
        assert_eq!(dev, UniformDeviation { average: 0.5, corrected: 0.5 });
    }

    #[test]
    fn uniform_limit_shrinks() {
        let p = reference_params();
        let m = NoiseModel::symmetric_dirichlet(10, 1.0, 77).unwrap();
        let k = 10_000;
        let dev = uniform_limit_check(&m, &p, k).unwrap();
        let bound = 5.0 / (k as f64).sqrt();
        assert!(dev.average < bound && dev.corrected < bound, "{dev:?}");
        let small = uniform_limit_check(&m, &p, 100).unwrap();
        assert!(small.average > dev.average);
    }

    #[test]
    fn exchangeable_noise_is_symmetric_under_correction() {
        // per-class deviation of the corrected average within 4 standard errors
        let p = CorrectionParams::new(0.3, 0.6, 0.5, 1).unwrap();
        let m = NoiseModel::symmetric_dirichlet(10, 0.5, 31).unwrap();
        let k = 10_000;
        let corrected: Vec<ProbabilityVector> = m.draws(0, k).iter().map(|v| correct(v, &p)).collect();
        for i in 0..10 {
            let xs: Vec<f64> = corrected.iter().map(|v| v.as_slice()[i]).collect();
            let mean = xs.iter().sum::<f64>() / k as f64;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt();
            let se = sd / (k as f64).sqrt();
            assert!((mean - 0.1).abs() <= 4.0 * se, "class {i}: {mean} (se {se})");
        }
    }
}
