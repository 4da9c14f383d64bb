//! Synthetic LoRa-like transmitter dataset.
//!
//! Each transmitter sends a burst of baseband up-chirps whose envelope ramps
//! up at the packet start and decays after its end. Per-transmitter
//! impairments (IQ gain/phase imbalance, carrier offset, DC offset, envelope
//! time constants, third-order compression) are the only thing that tells
//! transmitters apart. A record keeps 500 samples around the packet start and
//! 500 around its end.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::Tensor;
use crate::seed::{derive, derive_label, rng};

pub const RECORD_LEN: usize = 1000;
const HALF: usize = RECORD_LEN / 2;
/// Samples of the start window that precede the packet.
const LEAD: usize = 20;
/// Samples of the end window that follow the packet.
const TAIL: usize = 60;
/// Record indices whose envelope is within 1% of its plateau for every
/// allowed `tau`.
pub const STEADY: std::ops::Range<usize> = 300..650;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpairmentRanges {
    /// Symmetric bound, dB.
    pub gain_imbalance_db: f64,
    /// Symmetric bound, degrees.
    pub phase_imbalance_deg: f64,
    /// Symmetric bound, Hz.
    pub cfo_hz: f64,
    pub dc_offset_max: f64,
    /// Envelope time constants, samples.
    pub tau_min: f64,
    pub tau_max: f64,
    pub nonlinearity_max: f64,
}

impl Default for ImpairmentRanges {
    fn default() -> Self {
        Self {
            gain_imbalance_db: 1.0,
            phase_imbalance_deg: 5.0,
            cfo_hz: 2000.0,
            dc_offset_max: 0.02,
            tau_min: 5.0,
            tau_max: 50.0,
            nonlinearity_max: 0.15,
        }
    }
}

impl ImpairmentRanges {
    pub fn none() -> Self {
        Self {
            gain_imbalance_db: 0.0,
            phase_imbalance_deg: 0.0,
            cfo_hz: 0.0,
            dc_offset_max: 0.0,
            tau_min: 20.0,
            tau_max: 20.0,
            nonlinearity_max: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetManifest {
    pub known: usize,
    pub unknown: usize,
    pub signals_per_transmitter: usize,
    /// Pure-noise records, all in the test split.
    pub random_signals: usize,
    /// `f64::INFINITY` disables the noise.
    pub snr_db: f64,
    pub oversampling: usize,
    pub spreading_factor: u32,
    /// Chirp bandwidth, Hz. The sample rate is `bandwidth_hz * oversampling`.
    pub bandwidth_hz: f64,
    /// Metadata only; generation is at baseband.
    pub carrier_hz: f64,
    pub chirps_per_packet: usize,
    /// Share of each known transmitter's signals held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
    pub ranges: ImpairmentRanges,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            known: 44,
            unknown: 4,
            signals_per_transmitter: 1000,
            random_signals: 1000,
            snr_db: 20.0,
            oversampling: 4,
            spreading_factor: 7,
            bandwidth_hz: 1e6,
            carrier_hz: 902.3e6,
            chirps_per_packet: 8,
            test_fraction: 0.2,
            seed: 0,
            ranges: ImpairmentRanges::default(),
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.known == 0 || self.signals_per_transmitter == 0 {
            return bad("need at least one known transmitter and one signal each".into());
        }
        if self.oversampling == 0 || !(5..=12).contains(&self.spreading_factor) {
            return bad("oversampling must be positive and spreading factor in 5..=12".into());
        }
        if self.packet_len() < HALF {
            return bad(format!("packet of {} samples is shorter than half a record", self.packet_len()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test fraction must be in [0, 1)".into());
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY || self.bandwidth_hz.is_nan() || self.bandwidth_hz <= 0.0 {
            return bad("snr must be a number and bandwidth positive".into());
        }
        let r = &self.ranges;
        let all = [
            r.gain_imbalance_db,
            r.phase_imbalance_deg,
            r.cfo_hz,
            r.dc_offset_max,
            r.tau_min,
            r.tau_max,
            r.nonlinearity_max,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || r.tau_min > r.tau_max || r.tau_min <= 0.0 {
            return bad("impairment ranges must be finite, non-negative, and tau_min in (0, tau_max]".into());
        }
        if r.nonlinearity_max >= 1.0 / 3.0 {
            return bad("nonlinearity must stay below 1/3 so compression is monotone".into());
        }
        if 5.0 * r.tau_max > (STEADY.start - LEAD) as f64 {
            return bad("tau_max too large for the settled region of a record".into());
        }
        Ok(())
    }

    pub fn transmitters(&self) -> usize {
        self.known + self.unknown
    }

    pub fn chirp_len(&self) -> usize {
        (1usize << self.spreading_factor) * self.oversampling
    }

    pub fn packet_len(&self) -> usize {
        self.chirp_len() * self.chirps_per_packet
    }

    pub fn sample_rate(&self) -> f64 {
        self.bandwidth_hz * self.oversampling as f64
    }

    fn test_per_known(&self) -> usize {
        (self.signals_per_transmitter as f64 * self.test_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransmitterProfile {
    pub id: usize,
    pub iq_gain_imbalance_db: f64,
    pub iq_phase_imbalance_deg: f64,
    pub carrier_freq_offset_hz: f64,
    pub dc_offset: (f64, f64),
    pub ramp_up_tau: f64,
    pub ramp_down_tau: f64,
    pub nonlinearity_coeff: f64,
}

impl TransmitterProfile {
    pub fn ideal(id: usize, tau: f64) -> Self {
        Self {
            id,
            iq_gain_imbalance_db: 0.0,
            iq_phase_imbalance_deg: 0.0,
            carrier_freq_offset_hz: 0.0,
            dc_offset: (0.0, 0.0),
            ramp_up_tau: tau,
            ramp_down_tau: tau,
            nonlinearity_coeff: 0.0,
        }
    }
}

/// One profile per transmitter id. Each parameter takes the centre of a
/// distinct stratum of its range (Latin hypercube), so any two profiles
/// differ in every parameter by at least one stratum width.
pub fn draw_profiles(m: &DatasetManifest) -> Vec<TransmitterProfile> {
    let t = m.transmitters();
    let mut r = rng(derive_label(m.seed, "profiles"));
    let mut strata = || {
        let mut p: Vec<usize> = (0..t).collect();
        p.shuffle(&mut r);
        p.into_iter().map(|s| (s as f64 + 0.5) / t as f64).collect::<Vec<f64>>()
    };
    let sym = |u: f64, b: f64| (2.0 * u - 1.0) * b;
    let rg = &m.ranges;
    let (g, ph, cfo, dcm, dca, tu, td, nl) =
        (strata(), strata(), strata(), strata(), strata(), strata(), strata(), strata());
    (0..t)
        .map(|i| {
            let mag = dcm[i] * rg.dc_offset_max;
            let ang = dca[i] * std::f64::consts::TAU;
            TransmitterProfile {
                id: i,
                iq_gain_imbalance_db: sym(g[i], rg.gain_imbalance_db),
                iq_phase_imbalance_deg: sym(ph[i], rg.phase_imbalance_deg),
                carrier_freq_offset_hz: sym(cfo[i], rg.cfo_hz),
                dc_offset: (mag * ang.cos(), mag * ang.sin()),
                ramp_up_tau: rg.tau_min + tu[i] * (rg.tau_max - rg.tau_min),
                ramp_down_tau: rg.tau_min + td[i] * (rg.tau_max - rg.tau_min),
                nonlinearity_coeff: nl[i] * rg.nonlinearity_max,
            }
        })
        .collect()
}

/// Packet-relative time of record sample `i`.
fn packet_time(m: &DatasetManifest, i: usize) -> isize {
    if i < HALF {
        i as isize - LEAD as isize
    } else {
        (m.packet_len() + TAIL) as isize - (RECORD_LEN - i) as isize
    }
}

/// Noise-free impaired record for `p`.
pub fn clean_record(m: &DatasetManifest, p: &TransmitterProfile) -> Vec<Complex64> {
    let n_chirp = m.chirp_len() as f64;
    let os = m.oversampling as f64;
    let packet = m.packet_len() as isize;
    let fs = m.sample_rate();
    let g = 10f64.powf(p.iq_gain_imbalance_db / 20.0);
    let (sp, cp) = p.iq_phase_imbalance_deg.to_radians().sin_cos();
    let dc = Complex64::new(p.dc_offset.0, p.dc_offset.1);
    (0..RECORD_LEN)
        .map(|i| {
            let n = packet_time(m, i);
            let env = if n < 0 {
                0.0
            } else if n < packet {
                1.0 - (-(n as f64) / p.ramp_up_tau).exp()
            } else {
                let at_end = 1.0 - (-(packet as f64) / p.ramp_up_tau).exp();
                at_end * (-((n - packet) as f64) / p.ramp_down_tau).exp()
            };
            let s = if env == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                // up-chirp sweeping -B/2 .. B/2 over each symbol
                let u = n.rem_euclid(m.chirp_len() as isize) as f64;
                let phase = std::f64::consts::TAU * (-u / (2.0 * os) + u * u / (2.0 * os * n_chirp));
                let s = Complex64::from_polar(env, phase);
                let s = s * (1.0 - p.nonlinearity_coeff * s.norm_sqr());
                s * Complex64::from_polar(1.0, std::f64::consts::TAU * p.carrier_freq_offset_hz * n as f64 / fs)
            };
            let q = g * (s.im * cp - s.re * sp);
            Complex64::new(s.re, q) + dc
        })
        .collect()
}

/// Mean `|s|²` over [`STEADY`].
pub fn steady_power(s: &[Complex64]) -> f64 {
    s[STEADY].iter().map(|v| v.norm_sqr()).sum::<f64>() / STEADY.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Known,
    Unknown,
    Random,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Known => "known",
            Tag::Unknown => "unknown",
            Tag::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "known" => Some(Tag::Known),
            "unknown" => Some(Tag::Unknown),
            "random" => Some(Tag::Random),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecord {
    /// Interleaved `I, Q`, `2 * RECORD_LEN` values.
    pub iq: Vec<f32>,
    pub tag: Tag,
    /// Transmitter id; `None` for random records.
    pub transmitter: Option<usize>,
    /// `None` for random records.
    pub snr_db: Option<f64>,
}

impl SignalRecord {
    /// Sum of squared components, accumulated in sorted order so the value
    /// depends only on the multiset of samples.
    pub fn energy(&self) -> f64 {
        let mut sq: Vec<f64> = self.iq.iter().map(|&v| f64::from(v) * f64::from(v)).collect();
        sq.sort_by(f64::total_cmp);
        sq.iter().sum()
    }

    /// Circular shift by `s` complex samples (positive moves samples later).
    pub fn shifted(&self, s: isize) -> SignalRecord {
        let mut iq = self.iq.clone();
        let k = 2 * s.rem_euclid(RECORD_LEN as isize) as usize;
        iq.rotate_right(k);
        SignalRecord { iq, ..self.clone() }
    }

    /// `(2, RECORD_LEN)` channel-major copy: I row then Q row.
    pub fn channels(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; 2 * RECORD_LEN];
        for (j, iq) in self.iq.chunks_exact(2).enumerate() {
            out[j] = iq[0];
            out[RECORD_LEN + j] = iq[1];
        }
        out
    }
}

/// Circular shift by a uniform integer in `[-max_shift, max_shift]`.
pub fn augment_shift(record: &SignalRecord, max_shift: usize, seed: u64) -> Result<SignalRecord> {
    if max_shift >= RECORD_LEN {
        return Err(Error::InvalidParams(format!("max_shift must be below {RECORD_LEN}")));
    }
    let m = max_shift as i64;
    let s = rng(seed).random_range(-m..=m);
    Ok(record.shifted(s as isize))
}

/// Batch tensor `(records, 2, RECORD_LEN)`.
pub fn to_tensor<'a>(records: impl IntoIterator<Item = &'a SignalRecord>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for r in records {
        data.extend(r.channels());
        n += 1;
    }
    Tensor::new(vec![n, 2, RECORD_LEN], data).expect("record length is fixed")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub profiles: Vec<TransmitterProfile>,
    pub train: Vec<SignalRecord>,
    pub test: Vec<SignalRecord>,
}

fn noisy_record(m: &DatasetManifest, p: &TransmitterProfile, seed: u64) -> SignalRecord {
    let clean = clean_record(m, p);
    let sigma = if m.snr_db == f64::INFINITY {
        0.0
    } else {
        (steady_power(&clean) / 10f64.powf(m.snr_db / 10.0) / 2.0).sqrt()
    };
    let mut r = rng(seed);
    let mut iq = Vec::with_capacity(2 * RECORD_LEN);
    for s in clean {
        let (ni, nq): (f64, f64) = if sigma > 0.0 {
            (r.sample(StandardNormal), r.sample(StandardNormal))
        } else {
            (0.0, 0.0)
        };
        iq.push((s.re + sigma * ni) as f32);
        iq.push((s.im + sigma * nq) as f32);
    }
    let tag = if p.id < m.known { Tag::Known } else { Tag::Unknown };
    SignalRecord { iq, tag, transmitter: Some(p.id), snr_db: Some(m.snr_db) }
}

/// I.i.d. complex Gaussian record, per-component variance 1/2.
pub fn random_record(seed: u64) -> SignalRecord {
    let mut r = rng(seed);
    let sd = std::f64::consts::FRAC_1_SQRT_2;
    let iq = (0..2 * RECORD_LEN).map(|_| (sd * r.sample::<f64, _>(StandardNormal)) as f32).collect();
    SignalRecord { iq, tag: Tag::Random, transmitter: None, snr_db: None }
}

pub fn generate(m: &DatasetManifest) -> Result<Dataset> {
    generate_with(Exec::default(), m)
}

/// Deterministic for a fixed manifest. Train holds known records ordered by
/// (transmitter, signal); test holds the held-out known records, then
/// unknown transmitters, then random records.
pub fn generate_with(exec: Exec, m: &DatasetManifest) -> Result<Dataset> {
    m.validate()?;
    let profiles = draw_profiles(m);
    let sig_seed = derive_label(m.seed, "signals");
    let split_seed = derive_label(m.seed, "split");
    let per = m.signals_per_transmitter;
    let per_tx: Vec<Vec<SignalRecord>> = exec.map_range(m.transmitters(), |t| {
        let tx_seed = derive(sig_seed, t as u64);
        (0..per).map(|i| noisy_record(m, &profiles[t], derive(tx_seed, i as u64))).collect()
    });
    let n_test = m.test_per_known();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut unknown = Vec::new();
    for (t, recs) in per_tx.into_iter().enumerate() {
        if t >= m.known {
            unknown.extend(recs);
            continue;
        }
        let mut order: Vec<usize> = (0..per).collect();
        order.shuffle(&mut rng(derive(split_seed, t as u64)));
        let mut is_test = vec![false; per];
        order[..n_test].iter().for_each(|&i| is_test[i] = true);
        for (i, r) in recs.into_iter().enumerate() {
            if is_test[i] {
                test.push(r);
            } else {
                train.push(r);
            }
        }
    }
    test.extend(unknown);
    let rnd_seed = derive_label(m.seed, "random");
    test.extend(exec.map_range(m.random_signals, |i| random_record(derive(rnd_seed, i as u64))));
    Ok(Dataset { manifest: m.clone(), profiles, train, test })
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    manifest: DatasetManifest,
    sample_rate_hz: f64,
    record_len: usize,
    known_ids: Vec<usize>,
    unknown_ids: Vec<usize>,
    train_records: usize,
    test_records: usize,
    profiles: Vec<TransmitterProfile>,
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    split: String,
    index: usize,
    kind: Tag,
    transmitter: Option<usize>,
    snr_db: Option<f64>,
}

impl Dataset {
    pub fn known_classes(&self) -> usize {
        self.manifest.known
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mf = ManifestFile {
            manifest: self.manifest.clone(),
            sample_rate_hz: self.manifest.sample_rate(),
            record_len: RECORD_LEN,
            known_ids: (0..self.manifest.known).collect(),
            unknown_ids: (self.manifest.known..self.manifest.transmitters()).collect(),
            train_records: self.train.len(),
            test_records: self.test.len(),
            profiles: self.profiles.clone(),
        };
        let mut w = BufWriter::new(fs::File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, &mf)?;
        w.write_all(b"\n")?;
        w.flush()?;
        for (name, recs) in [("train", &self.train), ("test", &self.test)] {
            let mut w = BufWriter::new(fs::File::create(dir.join(format!("{name}.iqf32")))?);
            for r in recs.iter() {
                for v in &r.iq {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
        for (name, recs) in [("train", &self.train), ("test", &self.test)] {
            for (i, r) in recs.iter().enumerate() {
                w.serialize(LabelRow {
                    split: name.into(),
                    index: i,
                    kind: r.tag,
                    transmitter: r.transmitter,
                    snr_db: r.snr_db,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mf: ManifestFile = serde_json::from_reader(BufReader::new(fs::File::open(dir.join("manifest.json"))?))?;
        if mf.record_len != RECORD_LEN {
            return Err(Error::Dataset(format!("record length {} unsupported", mf.record_len)));
        }
        let mut rd = csv::Reader::from_path(dir.join("labels.csv"))?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for row in rd.deserialize() {
            let row: LabelRow = row?;
            let rec = SignalRecord { iq: Vec::new(), tag: row.kind, transmitter: row.transmitter, snr_db: row.snr_db };
            let dst = match row.split.as_str() {
                "train" => &mut train,
                "test" => &mut test,
                s => return Err(Error::Dataset(format!("unknown split {s:?}"))),
            };
            if row.index != dst.len() {
                return Err(Error::Dataset(format!("labels out of order at {} {}", row.split, row.index)));
            }
            dst.push(rec);
        }
        if train.len() != mf.train_records || test.len() != mf.test_records {
            return Err(Error::Dataset("labels.csv does not match manifest record counts".into()));
        }
        for (name, recs) in [("train", &mut train), ("test", &mut test)] {
            read_iq(&dir.join(format!("{name}.iqf32")), recs)?;
        }
        Ok(Self { manifest: mf.manifest, profiles: mf.profiles, train, test })
    }
}

fn read_iq(path: &Path, recs: &mut [SignalRecord]) -> Result<()> {
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(path)?).read_to_end(&mut bytes)?;
    let per = 2 * RECORD_LEN * 4;
    if bytes.len() != recs.len() * per {
        return Err(Error::Dataset(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            recs.len() * per
        )));
    }
    for (r, chunk) in recs.iter_mut().zip(bytes.chunks_exact(per)) {
        r.iq = chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if r.iq.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!("{} contains non-finite samples", path.display())));
        }
    }
    Ok(())
}
