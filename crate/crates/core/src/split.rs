//! Trunk/head partition for fast Monte Carlo dropout.
//!
//! The trunk (every layer before the first dropout enabled at test time) is
//! deterministic in [`Mode::McTest`], so its output is computed once and each
//! of the K stochastic passes only runs the head. Pass `k` (1-based) uses the
//! mask seed `derive(seed, k)`, and its output is bit-identical to an uncached
//! full forward with that seed.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{Layer, Mode, Network, Tensor};
use crate::prob::ProbabilityVector;
use crate::seed::derive;

/// Head passes evaluated together before being handed to the consumer.
const HEAD_CHUNK: usize = 32;

#[derive(Clone, Debug)]
pub struct SplitNetwork {
    network: Network,
    split_at: usize,
}

/// Input to the first enabled dropout layer for one batch.
#[derive(Clone, Debug)]
pub struct TrunkCache {
    activation: Tensor,
    source: u64,
}

impl TrunkCache {
    pub fn activation(&self) -> &Tensor {
        &self.activation
    }

    /// Fingerprint of the batch the trunk ran on.
    pub fn source(&self) -> u64 {
        self.source
    }
}

/// Median wall-clock milliseconds per pass.
#[derive(Clone, Copy, Debug)]
pub struct Timing {
    pub trunk_ms: f64,
    pub head_ms: f64,
    pub ratio: f64,
    pub passes: usize,
}

/// Pass seed for 1-based pass `k`.
#[inline]
pub fn pass_seed(seed: u64, k: usize) -> u64 {
    derive(seed, k as u64)
}

impl SplitNetwork {
    /// Splits before the first dropout layer enabled at test time. Dropout
    /// layers earlier in the stack are switched off at test time.
    pub fn split(mut network: Network) -> Result<Self> {
        let split_at = network.first_stochastic().ok_or(Error::NoSplitPoint)?;
        for l in &mut network.layers_mut()[..split_at] {
            if let Layer::Dropout(d) = l {
                d.enabled_at_test = false;
            }
        }
        Ok(Self { network, split_at })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    /// Index of the first head layer.
    pub fn split_at(&self) -> usize {
        self.split_at
    }

    pub fn trunk(&self) -> &[Layer] {
        &self.network.layers()[..self.split_at]
    }

    pub fn head(&self) -> &[Layer] {
        &self.network.layers()[self.split_at..]
    }

    pub fn classes(&self) -> usize {
        self.network.classes()
    }

    pub fn run_trunk(&self, x: &Tensor, exec: Exec) -> Result<TrunkCache> {
        let activation = self.network.forward_range(exec, x, 0..self.split_at, Mode::McTest, 0)?;
        Ok(TrunkCache { activation, source: x.fingerprint() })
    }

    /// One stochastic head pass with mask seed `seed`.
    pub fn run_head(&self, cache: &TrunkCache, seed: u64, exec: Exec) -> Result<Tensor> {
        let end = self.network.layers().len();
        self.network.forward_range(exec, &cache.activation, self.split_at..end, Mode::McTest, seed)
    }

    /// Uncached forward of the whole network in test mode.
    pub fn full_forward(&self, x: &Tensor, seed: u64, exec: Exec) -> Result<Tensor> {
        self.network.forward_with(exec, x, Mode::McTest, seed)
    }

    /// Streams the K head outputs to `f(k, output)` in order of `k`
    /// (1-based). At most `HEAD_CHUNK` outputs are alive at once.
    pub fn mc_passes<F>(&self, cache: &TrunkCache, k: usize, seed: u64, exec: Exec, mut f: F) -> Result<()>
    where
        F: FnMut(usize, Tensor) -> Result<()>,
    {
        let mut start = 1;
        while start <= k {
            let n = HEAD_CHUNK.min(k + 1 - start);
            let outs = exec.map_range(n, |j| self.run_head(cache, pass_seed(seed, start + j), Exec::Sequential));
            for (j, out) in outs.into_iter().enumerate() {
                f(start + j, out?)?;
            }
            start += n;
        }
        Ok(())
    }

    /// K softmax outputs per batch row: `result[row][k - 1]`.
    pub fn mc_ensemble(&self, x: &Tensor, k: usize, seed: u64, exec: Exec) -> Result<Vec<Vec<ProbabilityVector>>> {
        if k == 0 {
            return Err(Error::InvalidParams("ensemble size must be at least 1".into()));
        }
        let cache = self.run_trunk(x, exec)?;
        let mut out: Vec<Vec<ProbabilityVector>> = (0..x.batch()).map(|_| Vec::with_capacity(k)).collect();
        self.mc_passes(&cache, k, seed, exec, |_, y| {
            for (row, dst) in y.rows().zip(out.iter_mut()) {
                dst.push(ProbabilityVector::from_f32(row)?);
            }
            Ok(())
        })?;
        Ok(out)
    }

    /// Median trunk and head time over `passes` timed runs after 10 untimed
    /// warm-up runs of each.
    pub fn benchmark(&self, x: &Tensor, passes: usize, exec: Exec) -> Result<Timing> {
        if passes < 10 {
            return Err(Error::InvalidParams("benchmark needs at least 10 passes".into()));
        }
        const WARMUP: usize = 10;
        let mut cache = None;
        let mut trunk = Vec::with_capacity(passes);
        for i in 0..WARMUP + passes {
            let t0 = Instant::now();
            let c = self.run_trunk(x, exec)?;
            let dt = t0.elapsed().as_secs_f64() * 1e3;
            if i >= WARMUP {
                trunk.push(dt);
            }
            cache = Some(c);
        }
        let cache = cache.expect("at least one trunk pass");
        let mut head = Vec::with_capacity(passes);
        for i in 0..WARMUP + passes {
            let t0 = Instant::now();
            let y = self.run_head(&cache, pass_seed(0xBE4C, i + 1), exec)?;
            let dt = t0.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(y);
            if i >= WARMUP {
                head.push(dt);
            }
        }
        let trunk_ms = median(&mut trunk);
        let head_ms = median(&mut head);
        Ok(Timing { trunk_ms, head_ms, ratio: trunk_ms / head_ms, passes })
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, Dropout, Linear};

    #[test]
    fn split_point_is_first_enabled_dropout() {
        let net = Architecture { input_length: 16, ..Architecture::desk(3) }.build(1).unwrap();
        let sn = SplitNetwork::split(net).unwrap();
        assert_eq!(sn.split_at(), 5);
        assert!(matches!(sn.head()[0], Layer::Dropout(_)));
        assert!(matches!(sn.trunk().last(), Some(Layer::GlobalAvgPool)));
    }

    #[test]
    fn earlier_disabled_dropout_stays_in_trunk() {
        let layers = vec![
            Layer::Dropout(Dropout::new(0.2, false)),
            Layer::Linear(Linear::new(4, 4)),
            Layer::Dropout(Dropout::new(0.5, true)),
            Layer::Linear(Linear::new(4, 2)),
            Layer::Softmax,
        ];
        let sn = SplitNetwork::split(Network::new(vec![4], layers).unwrap()).unwrap();
        assert_eq!(sn.split_at(), 2);
    }

    #[test]
    fn missing_dropout_has_no_split_point() {
        let net = Network::new(vec![4], vec![Layer::Linear(Linear::new(4, 2)), Layer::Softmax]).unwrap();
        assert!(matches!(SplitNetwork::split(net), Err(Error::NoSplitPoint)));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
