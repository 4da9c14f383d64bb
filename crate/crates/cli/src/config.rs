//! Flat `key = value` configuration with `#` comments.
//!
//! Every key has a default; [`DEFAULTS`] is the complete key set, so unknown
//! keys are rejected rather than ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.known", "44"),
    ("data.unknown", "4"),
    ("data.signals_per_transmitter", "1000"),
    ("data.random_signals", "1000"),
    ("data.snr_db", "20"),
    ("data.oversampling", "4"),
    ("data.spreading_factor", "7"),
    ("data.bandwidth_hz", "1000000"),
    ("data.carrier_hz", "902300000"),
    ("data.chirps_per_packet", "8"),
    ("data.test_fraction", "0.2"),
    ("data.gain_imbalance_db", "1"),
    ("data.phase_imbalance_deg", "5"),
    ("data.cfo_hz", "2000"),
    ("data.dc_offset_max", "0.02"),
    ("data.tau_min", "5"),
    ("data.tau_max", "50"),
    ("data.nonlinearity_max", "0.15"),
    ("net.preset", "desk"),
    ("net.blocks", ""),
    ("net.base_width", ""),
    ("net.double_every", ""),
    ("net.max_width", ""),
    ("net.dropout_rate", "0.5"),
    ("train.epochs", "20"),
    ("train.batch_size", "32"),
    ("train.learning_rate", "0.05"),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "0.0001"),
    ("train.max_shift", "50"),
    ("train.validation_fraction", "0.1"),
    ("ensemble.k", "500"),
    ("ensemble.lambda", "0.5"),
    ("ensemble.beta1", "0.5"),
    ("ensemble.beta2", "0.92"),
    ("sweep.lambda_step", "0.05"),
    ("sweep.pairs", "0.5:0.92,0:1"),
    ("bench.batch", "256"),
    ("bench.passes", "30"),
    ("bench.depths", "16"),
    ("bench.classes", "44"),
    ("delta.models", "5:2:0.2,10:10:0.2,44:10:0.05"),
    ("delta.alphas", "0.5,0.7,0.9,0.99"),
    ("delta.pairs", "0.5:0.92"),
    ("delta.draws", "1000000"),
];

/// Bad key, value or file syntax. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Res<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl Config {
    pub fn load(path: &Path) -> Res<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.merge_text(&text)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Res<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set(line).map_err(|e| ConfigError(format!("line {}: {}", n + 1, e.0)))?;
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, assignment: &str) -> Res<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("expected key=value, got {assignment:?}")))?;
        let k = k.trim();
        match self.values.get_mut(k) {
            Some(slot) => {
                *slot = v.trim().to_string();
                Ok(())
            }
            None => Err(ConfigError(format!("unknown key {k:?}"))),
        }
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("{key} missing from DEFAULTS"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Res<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| ConfigError(format!("{key} = {v:?} is not a valid value")))
    }

    /// `None` when the value is empty.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Res<Option<T>> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Res<Vec<T>> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| ConfigError(format!("{key}: {s:?} is not a valid value"))))
            .collect()
    }

    /// Comma-separated list of colon-separated tuples of exactly `arity`.
    pub fn get_tuples<T: FromStr>(&self, key: &str, arity: usize) -> Res<Vec<Vec<T>>> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                let parts: Vec<&str> = item.split(':').collect();
                if parts.len() != arity {
                    return Err(ConfigError(format!("{key}: {item:?} needs {arity} colon-separated fields")));
                }
                parts
                    .iter()
                    .map(|p| p.trim().parse().map_err(|_| ConfigError(format!("{key}: {p:?} is not a valid value"))))
                    .collect()
            })
            .collect()
    }

    /// The whole configuration in file syntax.
    pub fn render(&self) -> String {
        DEFAULTS.iter().map(|(k, _)| format!("{k} = {}\n", self.raw(k))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_overrides_and_lists() {
        let mut c = Config::default();
        c.merge_text("# header\n seed = 7 # trailing\n\nsweep.pairs = 0.1:0.9, 0:1\n").unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), 7);
        assert_eq!(c.get_tuples::<f64>("sweep.pairs", 2).unwrap(), vec![vec![0.1, 0.9], vec![0.0, 1.0]]);
        assert_eq!(c.get_opt::<usize>("net.blocks").unwrap(), None);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = Config::default();
        assert!(c.merge_text("no_such = 1").is_err());
        assert!(c.merge_text("seed").is_err());
        c.set("train.epochs=many").unwrap();
        assert!(c.get::<usize>("train.epochs").is_err());
    }

    #[test]
    fn rendered_defaults_parse_back() {
        let mut c = Config::default();
        c.merge_text(&Config::default().render()).unwrap();
        assert_eq!(c.render(), Config::default().render());
    }
}
