use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::seed::{derive, rng};

use super::layers::{softmax_f64, BnStats, Dropout, Layer, LayerCache, Linear, Mode, Named, NamedMut, Pass, ResidualBlock, Slot};
use super::tensor::Tensor;

/// Residual 1-D CNN family: residual blocks of two 3-tap convolutions (each
/// followed by batch norm), global average pooling, dropout enabled at test
/// time, one fully connected layer, softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_length: usize,
    pub blocks: usize,
    pub base_width: usize,
    /// Width doubles after every `double_every` blocks.
    pub double_every: usize,
    pub max_width: usize,
    pub classes: usize,
    pub dropout_rate: f32,
}

impl Architecture {
    /// 16 convolutions, widths 16/32/64/128 for four convolutions each.
    pub fn reference(classes: usize) -> Self {
        Self {
            input_channels: 2,
            input_length: 1000,
            blocks: 8,
            base_width: 16,
            double_every: 2,
            max_width: 128,
            classes,
            dropout_rate: 0.5,
        }
    }

    /// 8 convolutions, widths 16/32/64/64 per block.
    pub fn desk(classes: usize) -> Self {
        Self { blocks: 4, double_every: 1, max_width: 64, ..Self::reference(classes) }
    }

    pub fn conv_layers(&self) -> usize {
        2 * self.blocks
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.blocks)
            .map(|b| (self.base_width << (b / self.double_every.max(1)).min(16)).min(self.max_width))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if self.input_channels == 0 || self.input_length == 0 {
            return bad("input shape must be non-empty");
        }
        if self.blocks == 0 || self.base_width == 0 || self.max_width == 0 {
            return bad("network needs at least one block of positive width");
        }
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout rate must be in [0, 1)");
        }
        Ok(())
    }

    /// He-initialized network; the final layer starts at zero bias.
    pub fn build(&self, seed: u64) -> Result<Network> {
        self.validate()?;
        let mut layers = Vec::with_capacity(self.blocks + 4);
        let mut ch = self.input_channels;
        for w in self.widths() {
            layers.push(Layer::Residual(Box::new(ResidualBlock::new(ch, w))));
            ch = w;
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Dropout(Dropout::new(self.dropout_rate, true)));
        layers.push(Layer::Linear(Linear::new(ch, self.classes)));
        layers.push(Layer::Softmax);
        let mut net = Network::new(vec![self.input_channels, self.input_length], layers)?;
        net.init_he(seed);
        Ok(net)
    }

    pub(crate) fn to_meta(&self) -> Vec<f32> {
        [
            self.input_channels,
            self.input_length,
            self.blocks,
            self.base_width,
            self.double_every,
            self.max_width,
            self.classes,
        ]
        .iter()
        .map(|&v| v as f32)
        .chain([self.dropout_rate])
        .collect()
    }

    pub(crate) fn from_meta(m: &[f32]) -> Result<Self> {
        if m.len() != 8 || m[..7].iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return Err(Error::WeightFormat("bad architecture record".into()));
        }
        let u = |i: usize| m[i] as usize;
        let a = Self {
            input_channels: u(0),
            input_length: u(1),
            blocks: u(2),
            base_width: u(3),
            double_every: u(4),
            max_width: u(5),
            classes: u(6),
            dropout_rate: m[7],
        };
        a.validate().map_err(|e| Error::WeightFormat(e.to_string()))?;
        Ok(a)
    }
}

/// Result of one training-mode forward/backward pass.
#[derive(Clone, Debug)]
pub struct Backprop {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Rows whose argmax equals the target.
    pub correct: usize,
    /// One entry per trainable tensor, in [`Network::params`] order.
    pub grads: Vec<Vec<f32>>,
    pub stats: Vec<BnStats>,
}

/// Ordered layer stack with a fixed per-row input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParams("network has no layers".into()));
        }
        let mut shape = input_shape.clone();
        for l in &layers {
            shape = l.output_shape(&shape)?;
        }
        if shape.len() != 1 {
            return Err(Error::InvalidParams(format!("network output must be a vector, got shape {shape:?}")));
        }
        if layers.iter().take(layers.len() - 1).any(|l| matches!(l, Layer::Softmax)) {
            return Err(Error::InvalidParams("softmax may only be the final layer".into()));
        }
        Ok(Self { input_shape, layers })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn classes(&self) -> usize {
        self.shape_at(self.layers.len())[0]
    }

    /// Per-row shape entering layer `i` (`i == len` gives the output shape).
    pub fn shape_at(&self, i: usize) -> Vec<usize> {
        let mut s = self.input_shape.clone();
        for l in &self.layers[..i] {
            s = l.output_shape(&s).expect("shapes validated at construction");
        }
        s
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, seed: u64) -> Result<Tensor> {
        self.forward_with(Exec::default(), x, mode, seed)
    }

    pub fn forward_with(&self, exec: Exec, x: &Tensor, mode: Mode, seed: u64) -> Result<Tensor> {
        self.forward_range(exec, x, 0..self.layers.len(), mode, seed)
    }

    /// Runs layers `range` (absolute indices, which key the dropout masks).
    pub fn forward_range(&self, exec: Exec, x: &Tensor, range: Range<usize>, mode: Mode, seed: u64) -> Result<Tensor> {
        let want = self.shape_at(range.start);
        if x.shape().len() != want.len() + 1 || x.shape()[1..] != want[..] {
            let mut expected = vec![x.batch()];
            expected.extend(want);
            return Err(Error::ShapeMismatch { expected, got: x.shape().to_vec() });
        }
        let pass = Pass { mode, seed, exec };
        let mut h = x.clone();
        for i in range {
            h = self.layers[i].forward(&h, &pass, i);
        }
        Ok(h)
    }

    fn forward_train(&self, exec: Exec, x: &Tensor, seed: u64) -> Result<(Tensor, Vec<LayerCache>)> {
        if !matches!(self.layers.last(), Some(Layer::Softmax)) {
            return Err(Error::InvalidParams("training needs a final softmax layer".into()));
        }
        let want = &self.input_shape;
        if x.shape().len() != want.len() + 1 || x.shape()[1..] != want[..] {
            let mut expected = vec![x.batch()];
            expected.extend(want);
            return Err(Error::ShapeMismatch { expected, got: x.shape().to_vec() });
        }
        let pass = Pass { mode: Mode::Train, seed, exec };
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, l) in self.layers[..self.layers.len() - 1].iter().enumerate() {
            let (y, c) = l.forward_train(&h, &pass, i)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    fn check_targets(&self, x: &Tensor, targets: &[usize]) -> Result<()> {
        let c = self.classes();
        if targets.len() != x.batch() {
            return Err(Error::ShapeMismatch { expected: vec![x.batch()], got: vec![targets.len()] });
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidParams(format!("target class {t} out of range for {c} classes")));
        }
        Ok(())
    }

    /// Training-mode mean cross-entropy without any state change.
    pub fn loss(&self, x: &Tensor, targets: &[usize], seed: u64) -> Result<f64> {
        self.check_targets(x, targets)?;
        let (logits, _) = self.forward_train(Exec::default(), x, seed)?;
        Ok(cross_entropy(&logits, targets).0)
    }

    /// Sign pattern of every ReLU output in a training-mode forward.
    pub fn relu_pattern(&self, x: &Tensor, seed: u64) -> Result<Vec<bool>> {
        let (_, caches) = self.forward_train(Exec::default(), x, seed)?;
        let mut out = Vec::new();
        caches.iter().for_each(|c| Layer::relu_pattern(c, &mut out));
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, targets: &[usize], seed: u64) -> Result<Backprop> {
        self.backward_with(Exec::default(), x, targets, seed)
    }

    /// Cross-entropy gradient of every trainable tensor. Batch-norm layers use
    /// batch statistics, which are returned for [`Network::apply_batch_stats`].
    pub fn backward_with(&self, exec: Exec, x: &Tensor, targets: &[usize], seed: u64) -> Result<Backprop> {
        self.check_targets(x, targets)?;
        let (logits, caches) = self.forward_train(exec, x, seed)?;
        let (loss, correct, dlogits) = cross_entropy(&logits, targets);
        let mut per_layer: Vec<Vec<Vec<f32>>> = Vec::with_capacity(caches.len());
        let mut d = dlogits;
        for (l, c) in self.layers.iter().zip(&caches).rev() {
            let (dx, g) = l.backward(c, &d, exec);
            per_layer.push(g);
            d = dx;
        }
        let grads = per_layer.into_iter().rev().flatten().collect();
        let mut stats = Vec::new();
        caches.iter().for_each(|c| Layer::batch_stats(c, &mut stats));
        Ok(Backprop { loss, correct, grads, stats })
    }

    pub fn apply_batch_stats(&mut self, stats: &[BnStats]) {
        let mut it = stats.iter();
        for l in &mut self.layers {
            l.apply_stats(&mut it);
        }
        assert!(it.next().is_none(), "more batch statistics than batch-norm layers");
    }

    /// Every stored tensor (parameters and buffers) with a stable name.
    pub fn named(&self) -> Vec<Named<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.named(&format!("{i}"), &mut out);
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<NamedMut<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.named_mut(&format!("{i}"), &mut out);
        }
        out
    }

    /// Trainable tensors, in gradient order.
    pub fn params(&self) -> Vec<&[f32]> {
        self.named().into_iter().filter(|n| n.slot == Slot::Param).map(|n| n.data).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        self.named_mut().into_iter().filter(|n| n.slot == Slot::Param).map(|n| n.data).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Normal(0, 2/fan_in) weights, zero biases, unit batch-norm scale. Tensor
    /// `i` draws from its own stream, so adding layers does not reshuffle the
    /// others.
    pub fn init_he(&mut self, seed: u64) {
        for (i, n) in self.named_mut().into_iter().enumerate() {
            if n.slot != Slot::Param {
                continue;
            }
            if n.name.ends_with(".weight") {
                let fan_in: usize = n.shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let mut r = rng(derive(seed, i as u64));
                for v in n.data.iter_mut() {
                    let z: f64 = r.sample(StandardNormal);
                    *v = (z * std) as f32;
                }
            } else if n.name.ends_with(".gamma") {
                n.data.fill(1.0);
            } else {
                n.data.fill(0.0);
            }
        }
    }

    /// Index of the first dropout layer enabled at test time.
    pub fn first_stochastic(&self) -> Option<usize> {
        self.layers.iter().position(Layer::is_stochastic_at_test)
    }
}

/// Mean cross-entropy from logits, correct count, and `(softmax - onehot) / N`.
fn cross_entropy(logits: &Tensor, targets: &[usize]) -> (f64, usize, Tensor) {
    let n = logits.batch();
    let mut loss = 0.0;
    let mut correct = 0;
    let mut d = Vec::with_capacity(logits.data().len());
    for (row, &t) in logits.rows().zip(targets) {
        let p = softmax_f64(row);
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = m + row.iter().map(|&v| (f64::from(v) - m).exp()).sum::<f64>().ln();
        loss += lse - f64::from(row[t]);
        if super::argmax_f32(row) == t {
            correct += 1;
        }
        d.extend(p.iter().enumerate().map(|(j, &pj)| ((pj - f64::from(u8::from(j == t))) / n as f64) as f32));
    }
    (loss / n as f64, correct, Tensor::from_parts(logits.shape().to_vec(), d))
}
