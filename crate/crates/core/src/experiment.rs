//! Open-set evaluation of a trained network: K stochastic passes per record,
//! plain and corrected ensemble averages, and accuracy-versus-λ sweeps.
//!
//! Every algorithm consumes the same K head outputs of a record, so the
//! comparison between them shares one noise realization.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::prob::{correct, CorrectionParams, EnsembleAccumulator, EnsembleDecision, ProbabilityVector, Verdict};
use crate::seed::derive;
use crate::split::SplitNetwork;
use crate::synth::{to_tensor, SignalRecord, Tag, RECORD_LEN};

/// Records sharing one trunk pass.
pub const RECORD_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaPair {
    pub beta1: f64,
    pub beta2: f64,
}

impl BetaPair {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        CorrectionParams::new(beta1, beta2, 0.0, 1)?;
        Ok(Self { beta1, beta2 })
    }

    pub fn params(self, lambda: f64, k: usize) -> Result<CorrectionParams> {
        CorrectionParams::new(self.beta1, self.beta2, lambda, k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub lambdas: Vec<f64>,
    pub pairs: Vec<BetaPair>,
    pub ensemble_size: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            lambdas: (0..=20).map(|i| f64::from(i) * 0.05).collect(),
            pairs: vec![BetaPair { beta1: 0.5, beta2: 0.92 }, BetaPair { beta1: 0.0, beta2: 1.0 }],
            ensemble_size: 500,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidParams("lambda grid must be non-empty and inside [0, 1]".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::InvalidParams("ensemble size must be positive".into()));
        }
        for p in &self.pairs {
            BetaPair::new(p.beta1, p.beta2)?;
        }
        Ok(())
    }
}

/// Averaged distributions of one record: the plain mean first, then one per
/// correction pair in the order given.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordSummary {
    /// `None` for records of unknown provenance; they enter no accuracy.
    pub tag: Option<Tag>,
    pub transmitter: Option<usize>,
    pub plain: ProbabilityVector,
    pub corrected: Vec<ProbabilityVector>,
}

/// Checks that `sn` accepts IQ records and has `classes` outputs.
pub fn check_compatible(sn: &SplitNetwork, classes: usize) -> Result<()> {
    if sn.network().input_shape() != [2, RECORD_LEN] {
        return Err(Error::Incompatible(format!(
            "network expects input {:?}, records are [2, {RECORD_LEN}]",
            sn.network().input_shape()
        )));
    }
    if sn.classes() != classes {
        return Err(Error::Incompatible(format!(
            "network has {} classes, dataset has {classes} known transmitters",
            sn.classes()
        )));
    }
    Ok(())
}

/// Runs K passes over every record and accumulates the plain mean and one
/// corrected mean per pair. Batch `b` of [`RECORD_BATCH`] records uses the
/// ensemble seed `derive(seed, b)`.
pub fn summarize(
    sn: &SplitNetwork,
    records: &[&SignalRecord],
    pairs: &[BetaPair],
    k: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<RecordSummary>> {
    if k == 0 {
        return Err(Error::InvalidParams("ensemble size must be at least 1".into()));
    }
    let params = pairs.iter().map(|p| p.params(0.0, k)).collect::<Result<Vec<_>>>()?;
    let classes = sn.classes();
    let mut out = Vec::with_capacity(records.len());
    for (b, chunk) in records.chunks(RECORD_BATCH).enumerate() {
        let cache = sn.run_trunk(&to_tensor(chunk.iter().copied()), exec)?;
        let mut plain: Vec<EnsembleAccumulator> = (0..chunk.len()).map(|_| EnsembleAccumulator::new(classes)).collect();
        let mut fixed: Vec<Vec<EnsembleAccumulator>> = (0..chunk.len())
            .map(|_| (0..params.len()).map(|_| EnsembleAccumulator::new(classes)).collect())
            .collect();
        sn.mc_passes(&cache, k, derive(seed, b as u64), exec, |_, y| {
            for (row, (acc, accs)) in y.rows().zip(plain.iter_mut().zip(fixed.iter_mut())) {
                let v = ProbabilityVector::from_f32(row)?;
                acc.add(&v)?;
                for (a, p) in accs.iter_mut().zip(&params) {
                    a.add(&correct(&v, p))?;
                }
            }
            Ok(())
        })?;
        for ((r, acc), accs) in chunk.iter().zip(plain).zip(fixed) {
            out.push(RecordSummary {
                tag: Some(r.tag),
                transmitter: r.transmitter,
                plain: acc.average()?,
                corrected: accs.iter().map(EnsembleAccumulator::average).collect::<Result<_>>()?,
            });
        }
    }
    Ok(out)
}

/// Which averaged distribution of a [`RecordSummary`] to decide on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Algorithm {
    Plain,
    Corrected(usize),
}

impl RecordSummary {
    pub fn averaged(&self, alg: Algorithm) -> &ProbabilityVector {
        match alg {
            Algorithm::Plain => &self.plain,
            Algorithm::Corrected(i) => &self.corrected[i],
        }
    }

    pub fn decide(&self, alg: Algorithm, lambda: f64) -> EnsembleDecision {
        EnsembleDecision::decide(self.averaged(alg).clone(), lambda)
    }

    /// Known records count when accepted with the right class; unknown and
    /// random records count when rejected.
    pub fn is_correct(&self, verdict: Verdict) -> bool {
        match (self.tag, verdict) {
            (None, _) => false,
            (Some(Tag::Known), Verdict::Known { category }) => Some(category) == self.transmitter,
            (Some(Tag::Known), Verdict::Other) => false,
            (Some(_), v) => v == Verdict::Other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `alg1` for the plain average, `alg2` for a corrected one.
    pub algorithm: String,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub lambda: f64,
    pub known_acc: f64,
    pub unknown_acc: f64,
    pub random_acc: f64,
    /// Mean of the per-type accuracies that have at least one record.
    pub balanced_acc: f64,
    /// Records whose averaged peak is exactly 1, which no λ ≤ 1 rejects.
    pub saturated: usize,
}

fn accuracy_row(summaries: &[RecordSummary], alg: Algorithm, lambda: f64) -> [Option<f64>; 3] {
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for s in summaries {
        let t = match s.tag {
            Some(Tag::Known) => 0,
            Some(Tag::Unknown) => 1,
            Some(Tag::Random) => 2,
            None => continue,
        };
        totals[t] += 1;
        let peak = s.averaged(alg).peak();
        let verdict = if peak < lambda {
            Verdict::Other
        } else {
            Verdict::Known { category: s.averaged(alg).argmax() }
        };
        hits[t] += usize::from(s.is_correct(verdict));
    }
    std::array::from_fn(|i| (totals[i] > 0).then(|| hits[i] as f64 / totals[i] as f64))
}

/// Accuracy curves: every λ for the plain average, then every λ for each
/// correction pair.
pub fn sweep(summaries: &[RecordSummary], spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    if let Some(s) = summaries.iter().find(|s| s.corrected.len() != spec.pairs.len()) {
        return Err(Error::InvalidParams(format!(
            "summary holds {} corrected averages, sweep has {} pairs",
            s.corrected.len(),
            spec.pairs.len()
        )));
    }
    let algs = std::iter::once((Algorithm::Plain, None))
        .chain(spec.pairs.iter().enumerate().map(|(i, p)| (Algorithm::Corrected(i), Some(*p))));
    let mut rows = Vec::with_capacity((spec.pairs.len() + 1) * spec.lambdas.len());
    for (alg, pair) in algs {
        let saturated = summaries.iter().filter(|s| s.averaged(alg).peak() >= 1.0).count();
        for &lambda in &spec.lambdas {
            let acc = accuracy_row(summaries, alg, lambda);
            let present: Vec<f64> = acc.iter().flatten().copied().collect();
            let balanced = if present.is_empty() { f64::NAN } else { present.iter().sum::<f64>() / present.len() as f64 };
            rows.push(SweepRow {
                algorithm: if pair.is_some() { "alg2" } else { "alg1" }.to_string(),
                beta1: pair.map(|p| p.beta1),
                beta2: pair.map(|p| p.beta2),
                lambda,
                known_acc: acc[0].unwrap_or(f64::NAN),
                unknown_acc: acc[1].unwrap_or(f64::NAN),
                random_acc: acc[2].unwrap_or(f64::NAN),
                balanced_acc: balanced,
                saturated,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One decision row per record and algorithm. With `full`, the averaged
/// distribution follows as columns `s0..s{C-1}`.
pub fn write_decisions<W: Write>(
    w: W,
    summaries: &[RecordSummary],
    pairs: &[BetaPair],
    lambda: f64,
    full: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let classes = summaries.first().map_or(0, |s| s.plain.classes());
    let mut header: Vec<String> =
        ["record", "tag", "transmitter", "algorithm", "beta1", "beta2", "lambda", "decision", "category", "peak"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    if full {
        header.extend((0..classes).map(|i| format!("s{i}")));
    }
    w.write_record(&header)?;
    let algs = std::iter::once((Algorithm::Plain, None))
        .chain(pairs.iter().enumerate().map(|(i, p)| (Algorithm::Corrected(i), Some(*p))));
    let algs: Vec<_> = algs.collect();
    for (i, s) in summaries.iter().enumerate() {
        for &(alg, pair) in &algs {
            let d = s.decide(alg, lambda);
            let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
            let mut row = vec![
                i.to_string(),
                s.tag.map_or("", Tag::as_str).to_string(),
                s.transmitter.map_or(String::new(), |t| t.to_string()),
                if pair.is_some() { "alg2" } else { "alg1" }.to_string(),
                opt(pair.map(|p| p.beta1)),
                opt(pair.map(|p| p.beta2)),
                lambda.to_string(),
                if d.is_known() { "known" } else { "other" }.to_string(),
                d.category().map_or(String::new(), |c| c.to_string()),
                d.peak.to_string(),
            ];
            if full {
                row.extend(d.averaged.as_slice().iter().map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(tag: Tag, tx: Option<usize>, plain: &[f64], corrected: &[f64]) -> RecordSummary {
        RecordSummary {
            tag: Some(tag),
            transmitter: tx,
            plain: ProbabilityVector::new(plain.to_vec()).unwrap(),
            corrected: vec![ProbabilityVector::new(corrected.to_vec()).unwrap()],
        }
    }

    #[test]
    fn lambda_zero_accepts_everything() {
        let s = vec![
            summary(Tag::Known, Some(0), &[0.6, 0.4], &[1.0, 0.0]),
            summary(Tag::Known, Some(1), &[0.7, 0.3], &[0.5, 0.5]),
            summary(Tag::Unknown, Some(5), &[0.5, 0.5], &[0.5, 0.5]),
            summary(Tag::Random, None, &[0.9, 0.1], &[1.0, 0.0]),
        ];
        let spec = SweepSpec { lambdas: vec![0.0, 0.55, 1.0], pairs: vec![BetaPair::new(0.5, 0.92).unwrap()], ..Default::default() };
        let rows = sweep(&s, &spec).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!((rows[0].known_acc, rows[0].unknown_acc, rows[0].random_acc), (0.5, 0.0, 0.0));
        assert_eq!((rows[1].known_acc, rows[1].unknown_acc, rows[1].random_acc), (0.5, 1.0, 0.0));
        assert_eq!((rows[2].known_acc, rows[2].unknown_acc, rows[2].random_acc), (0.0, 1.0, 1.0));
        // the saturated corrected averages survive lambda = 1
        assert_eq!(rows[5].saturated, 2);
        assert_eq!((rows[5].known_acc, rows[5].random_acc), (0.5, 0.0));
        assert_eq!(rows[3].algorithm, "alg2");
        assert_eq!(rows[0].beta1, None);
    }

    #[test]
    fn mismatched_pair_count_is_rejected() {
        let s = vec![summary(Tag::Known, Some(0), &[0.6, 0.4], &[1.0, 0.0])];
        assert!(sweep(&s, &SweepSpec::default()).is_err());
    }
}
