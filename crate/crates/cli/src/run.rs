use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use mcdrop::delta::{delta_empirical_with, delta_closed_form, estimate_delta_inputs_from_model, theorem1_holds, NoiseModel};
use mcdrop::experiment::{check_compatible, summarize, sweep, write_decisions, write_sweep, BetaPair, SweepSpec};
use mcdrop::nn::weights::{load, save};
use mcdrop::nn::{Architecture, Tensor};
use mcdrop::prob::CorrectionParams;
use mcdrop::seed::{derive, derive_label, rng};
use mcdrop::split::SplitNetwork;
use mcdrop::synth::{generate_with, Dataset, DatasetManifest, ImpairmentRanges, SignalRecord, Tag, RECORD_LEN};
use mcdrop::train::{train_with, write_log, TrainConfig};
use mcdrop::Exec;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{Config, ConfigError};
use crate::{Cli, Command};

/// Labels of the per-purpose seed streams below the root seed.
pub mod stream {
    pub const DATA: &str = "data";
    pub const TRAIN: &str = "train";
    pub const ENSEMBLE: &str = "ensemble";
    pub const BENCH: &str = "bench";
    pub const DELTA: &str = "delta";
}

pub fn dispatch(cli: &Cli, cfg: &Config) -> Result<()> {
    let exec = if cli.common.sequential { Exec::Sequential } else { Exec::Parallel };
    let root: u64 = cfg.get("seed")?;
    let out = cli.common.out.as_deref();
    match &cli.command {
        Command::GenData => gen_data(cfg, root, out, exec),
        Command::Train { data } => train_cmd(cfg, root, data, out, exec),
        Command::Classify { weights, data, stdin, full } => {
            classify(cfg, root, weights, data.as_deref(), *stdin, *full, out, exec)
        }
        Command::Sweep { weights, data } => sweep_cmd(cfg, root, weights, data, out, exec),
        Command::Bench => bench(cfg, root, out, exec),
        Command::Delta => delta(cfg, root, out, exec),
        Command::Config => {
            print!("{}", cfg.render());
            Ok(())
        }
    }
}

fn require_out(out: Option<&Path>) -> Result<&Path> {
    let dir = out.ok_or_else(|| ConfigError("--out is required for this command".into()))?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// `out/name` when an output directory is given, stdout otherwise.
fn csv_sink(out: Option<&Path>, name: &str) -> Result<Box<dyn Write>> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(name);
            let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(BufWriter::new(std::io::stdout().lock()))),
    }
}

pub fn manifest(cfg: &Config, root: u64) -> Result<DatasetManifest, ConfigError> {
    Ok(DatasetManifest {
        known: cfg.get("data.known")?,
        unknown: cfg.get("data.unknown")?,
        signals_per_transmitter: cfg.get("data.signals_per_transmitter")?,
        random_signals: cfg.get("data.random_signals")?,
        snr_db: cfg.get("data.snr_db")?,
        oversampling: cfg.get("data.oversampling")?,
        spreading_factor: cfg.get("data.spreading_factor")?,
        bandwidth_hz: cfg.get("data.bandwidth_hz")?,
        carrier_hz: cfg.get("data.carrier_hz")?,
        chirps_per_packet: cfg.get("data.chirps_per_packet")?,
        test_fraction: cfg.get("data.test_fraction")?,
        seed: derive_label(root, stream::DATA),
        ranges: ImpairmentRanges {
            gain_imbalance_db: cfg.get("data.gain_imbalance_db")?,
            phase_imbalance_deg: cfg.get("data.phase_imbalance_deg")?,
            cfo_hz: cfg.get("data.cfo_hz")?,
            dc_offset_max: cfg.get("data.dc_offset_max")?,
            tau_min: cfg.get("data.tau_min")?,
            tau_max: cfg.get("data.tau_max")?,
            nonlinearity_max: cfg.get("data.nonlinearity_max")?,
        },
    })
}

fn architecture(cfg: &Config, preset_key: Option<&str>, classes: usize) -> Result<Architecture, ConfigError> {
    let preset: String = match preset_key {
        Some(p) => p.to_string(),
        None => cfg.get("net.preset")?,
    };
    let mut arch = match preset.as_str() {
        "desk" => Architecture::desk(classes),
        "reference" => Architecture::reference(classes),
        other => return Err(ConfigError(format!("net.preset = {other:?}; expected desk or reference"))),
    };
    if let Some(v) = cfg.get_opt("net.blocks")? {
        arch.blocks = v;
    }
    if let Some(v) = cfg.get_opt("net.base_width")? {
        arch.base_width = v;
    }
    if let Some(v) = cfg.get_opt("net.double_every")? {
        arch.double_every = v;
    }
    if let Some(v) = cfg.get_opt("net.max_width")? {
        arch.max_width = v;
    }
    arch.dropout_rate = cfg.get("net.dropout_rate")?;
    Ok(arch)
}

pub fn train_config(cfg: &Config, root: u64) -> Result<TrainConfig, ConfigError> {
    Ok(TrainConfig {
        epochs: cfg.get("train.epochs")?,
        batch_size: cfg.get("train.batch_size")?,
        learning_rate: cfg.get("train.learning_rate")?,
        momentum: cfg.get("train.momentum")?,
        weight_decay: cfg.get("train.weight_decay")?,
        max_shift: cfg.get("train.max_shift")?,
        validation_fraction: cfg.get("train.validation_fraction")?,
        seed: derive_label(root, stream::TRAIN),
    })
}

fn pairs(cfg: &Config, key: &str) -> Result<Vec<BetaPair>> {
    cfg.get_tuples::<f64>(key, 2)?.into_iter().map(|p| Ok(BetaPair::new(p[0], p[1])?)).collect()
}

/// `0, step, 2·step, ...` up to and including 1.
fn lambda_grid(step: f64) -> Result<Vec<f64>, ConfigError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(ConfigError(format!("sweep.lambda_step = {step} must lie in (0, 1]")));
    }
    let n = (1.0 / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|i| (i as f64 * step).min(1.0)).collect();
    if *grid.last().expect("n >= 1") < 1.0 - 1e-12 {
        grid.push(1.0);
    }
    Ok(grid)
}

fn gen_data(cfg: &Config, root: u64, out: Option<&Path>, exec: Exec) -> Result<()> {
    let dir = require_out(out)?;
    let m = manifest(cfg, root)?;
    let d = generate_with(exec, &m)?;
    d.save(dir)?;
    eprintln!("wrote {} training and {} test records to {}", d.train.len(), d.test.len(), dir.display());
    Ok(())
}

fn train_cmd(cfg: &Config, root: u64, data: &Path, out: Option<&Path>, exec: Exec) -> Result<()> {
    let dir = require_out(out)?;
    let d = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let arch = architecture(cfg, None, d.known_classes())?;
    let tc = train_config(cfg, root)?;
    let outcome = train_with(&d.train, &arch, &tc, exec, |log, _| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:.4}  val {:.4}  lr {:.2e}",
            log.epoch, log.train_loss, log.train_acc, log.val_acc, log.lr
        );
    })?;
    save(&dir.join("weights.bin"), &outcome.architecture, &outcome.network)?;
    write_log(&dir.join("train_log.csv"), &outcome.log)?;
    eprintln!("final validation accuracy {:.4}", outcome.final_val_acc());
    Ok(())
}

fn load_split(weights: &Path) -> Result<SplitNetwork> {
    let (_, net) = load(weights).with_context(|| format!("loading weights {}", weights.display()))?;
    Ok(SplitNetwork::split(net)?)
}

fn parse_stdin_records() -> Result<Vec<SignalRecord>> {
    let mut records = Vec::new();
    for (n, line) in std::io::stdin().lock().lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let iq = line
            .split(',')
            .map(|v| v.trim().parse::<f32>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| mcdrop::Error::Dataset(format!("stdin line {}: non-numeric or non-finite value", n + 1)))?;
        if iq.len() != 2 * RECORD_LEN {
            return Err(mcdrop::Error::Incompatible(format!(
                "stdin line {}: {} values, expected {}",
                n + 1,
                iq.len(),
                2 * RECORD_LEN
            ))
            .into());
        }
        records.push(SignalRecord { iq, tag: Tag::Unknown, transmitter: None, snr_db: None });
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn classify(
    cfg: &Config,
    root: u64,
    weights: &Path,
    data: Option<&Path>,
    stdin: bool,
    full: bool,
    out: Option<&Path>,
    exec: Exec,
) -> Result<()> {
    let sn = load_split(weights)?;
    let k: usize = cfg.get("ensemble.k")?;
    let lambda: f64 = cfg.get("ensemble.lambda")?;
    let pair = BetaPair::new(cfg.get("ensemble.beta1")?, cfg.get("ensemble.beta2")?)?;
    pair.params(lambda, k)?;
    let seed = derive_label(root, stream::ENSEMBLE);
    let summaries = if stdin {
        let records = parse_stdin_records()?;
        check_compatible(&sn, sn.classes())?;
        let refs: Vec<&SignalRecord> = records.iter().collect();
        let mut s = summarize(&sn, &refs, &[pair], k, seed, exec)?;
        s.iter_mut().for_each(|r| r.tag = None);
        s
    } else {
        let path = data.expect("clap requires --data without --stdin");
        let d = Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
        check_compatible(&sn, d.known_classes())?;
        let refs: Vec<&SignalRecord> = d.test.iter().collect();
        summarize(&sn, &refs, &[pair], k, seed, exec)?
    };
    write_decisions(csv_sink(out, "decisions.csv")?, &summaries, &[pair], lambda, full)?;
    Ok(())
}

pub fn sweep_spec(cfg: &Config) -> Result<SweepSpec> {
    let spec = SweepSpec {
        lambdas: lambda_grid(cfg.get("sweep.lambda_step")?)?,
        pairs: pairs(cfg, "sweep.pairs")?,
        ensemble_size: cfg.get("ensemble.k")?,
    };
    spec.validate()?;
    Ok(spec)
}

fn sweep_cmd(cfg: &Config, root: u64, weights: &Path, data: &Path, out: Option<&Path>, exec: Exec) -> Result<()> {
    let spec = sweep_spec(cfg)?;
    let sn = load_split(weights)?;
    let d = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    check_compatible(&sn, d.known_classes())?;
    let refs: Vec<&SignalRecord> = d.test.iter().collect();
    let summaries = summarize(&sn, &refs, &spec.pairs, spec.ensemble_size, derive_label(root, stream::ENSEMBLE), exec)?;
    write_sweep(csv_sink(out, "sweep.csv")?, &sweep(&summaries, &spec)?)?;
    Ok(())
}

#[derive(serde::Serialize)]
struct BenchRow {
    trunk_ms: f64,
    head_ms: f64,
    ratio: f64,
    batch: usize,
    #[serde(rename = "K")]
    k: usize,
    depth: usize,
}

fn bench(cfg: &Config, root: u64, out: Option<&Path>, exec: Exec) -> Result<()> {
    let batch: usize = cfg.get("bench.batch")?;
    let passes: usize = cfg.get("bench.passes")?;
    let classes: usize = cfg.get("bench.classes")?;
    let depths: Vec<usize> = cfg.get_list("bench.depths")?;
    if batch == 0 || depths.is_empty() || depths.iter().any(|d| *d == 0 || d % 2 != 0) {
        return Err(ConfigError("bench needs a positive batch and even, positive conv depths".into()).into());
    }
    let seed = derive_label(root, stream::BENCH);
    let mut r = rng(derive(seed, 0));
    let data: Vec<f32> = (0..batch * 2 * RECORD_LEN).map(|_| r.sample::<f32, _>(StandardNormal)).collect();
    let x = Tensor::new(vec![batch, 2, RECORD_LEN], data)?;
    let mut w = csv::Writer::from_writer(csv_sink(out, "bench.csv")?);
    for (i, &depth) in depths.iter().enumerate() {
        let mut arch = architecture(cfg, Some("reference"), classes)?;
        arch.blocks = depth / 2;
        let sn = SplitNetwork::split(arch.build(derive(seed, 1 + i as u64))?)?;
        let t = sn.benchmark(&x, passes, exec)?;
        eprintln!("depth {depth}: trunk {:.2} ms, head {:.3} ms, ratio {:.1}", t.trunk_ms, t.head_ms, t.ratio);
        w.serialize(BenchRow { trunk_ms: t.trunk_ms, head_ms: t.head_ms, ratio: t.ratio, batch, k: passes, depth })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(serde::Serialize)]
struct DeltaRow {
    classes: usize,
    alpha: f64,
    peak: f64,
    rest: f64,
    beta1: f64,
    beta2: f64,
    draws: usize,
    delta_closed: f64,
    delta_empirical: f64,
    std_error: f64,
    theorem1_holds: bool,
}

fn delta(cfg: &Config, root: u64, out: Option<&Path>, exec: Exec) -> Result<()> {
    let models = cfg.get_tuples::<f64>("delta.models", 3)?;
    let alphas: Vec<f64> = cfg.get_list("delta.alphas")?;
    let pairs = pairs(cfg, "delta.pairs")?;
    let draws: usize = cfg.get("delta.draws")?;
    let seed = derive_label(root, stream::DELTA);
    let mut w = csv::Writer::from_writer(csv_sink(out, "delta.csv")?);
    let mut idx = 0;
    for m in &models {
        if m[0].fract() != 0.0 || m[0] < 2.0 {
            return Err(ConfigError(format!("delta.models: class count {} must be an integer ≥ 2", m[0])).into());
        }
        let (classes, peak, rest) = (m[0] as usize, m[1], m[2]);
        for &alpha in &alphas {
            let model = NoiseModel::peaked_mixture(classes, alpha, peak, rest, derive(seed, idx))?;
            idx += 1;
            for p in &pairs {
                let inputs = estimate_delta_inputs_from_model(&model, 0, p.beta1, p.beta2, draws)?;
                let params = CorrectionParams::new(p.beta1, p.beta2, 0.0, draws)?;
                let emp = delta_empirical_with(exec, &model, 0, &params, draws)?;
                w.serialize(DeltaRow {
                    classes,
                    alpha,
                    peak,
                    rest,
                    beta1: p.beta1,
                    beta2: p.beta2,
                    draws,
                    delta_closed: delta_closed_form(&inputs),
                    delta_empirical: emp.value,
                    std_error: emp.std_error,
                    theorem1_holds: theorem1_holds(&inputs),
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
