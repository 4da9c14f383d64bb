use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::seed::{derive, unit_f32};

use super::gemm::{matmul, matmul_nt, matmul_tn};
use super::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Samples per partial gradient sum in convolution backward. Fixed so the
/// reduction order never depends on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, every dropout layer active.
    Train,
    /// Running statistics, only dropout layers enabled at test time active.
    McTest,
    /// Running statistics, all dropout off.
    Disabled,
}

/// Per-call execution context. `seed` keys every dropout mask in the pass.
#[derive(Clone, Copy, Debug)]
pub struct Pass {
    pub mode: Mode,
    pub seed: u64,
    pub exec: Exec,
}

/// Whether a stored tensor is a trained parameter or a tracked buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Param,
    Buffer,
}

/// Named view of a stored tensor.
pub struct Named<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
    pub slot: Slot,
}

pub struct NamedMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f32],
    pub slot: Slot,
}

/// Batch statistics from one training forward of a batch-norm layer.
/// `var` is the unbiased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

// ---------------------------------------------------------------------------

thread_local! {
    static COLS: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

/// 1-D convolution, stride 1, same padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `[out_ch, in_ch, kernel]`
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl Conv1d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, bias: bool) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd for same padding");
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: vec![0.0; out_ch * in_ch * kernel],
            bias: bias.then(|| vec![0.0; out_ch]),
        }
    }

    fn fan_in(&self) -> usize {
        self.in_ch * self.kernel
    }

    /// `cols[(c*k + t)*len + l] = x[c, l + t - pad]`, zero outside.
    fn im2col(&self, x: &[f32], len: usize, cols: &mut Vec<f32>) {
        let k = self.kernel;
        let pad = k / 2;
        cols.clear();
        cols.resize(self.fan_in() * len, 0.0);
        for c in 0..self.in_ch {
            let src = &x[c * len..(c + 1) * len];
            for t in 0..k {
                let dst = &mut cols[(c * k + t) * len..(c * k + t + 1) * len];
                // dst[l] = src[l + t - pad]
                if t >= pad {
                    let s = t - pad;
                    dst[..len - s].copy_from_slice(&src[s..]);
                } else {
                    let s = pad - t;
                    dst[s..].copy_from_slice(&src[..len - s]);
                }
            }
        }
    }

    fn forward_sample(&self, x: &[f32], len: usize, y: &mut [f32]) {
        if self.kernel == 1 {
            matmul(self.out_ch, self.in_ch, len, &self.weight, x, y);
        } else {
            COLS.with(|cell| {
                let mut cols = cell.borrow_mut();
                self.im2col(x, len, &mut cols);
                matmul(self.out_ch, self.fan_in(), len, &self.weight, &cols, y);
            });
        }
        if let Some(b) = &self.bias {
            for (row, &bo) in y.chunks_exact_mut(len).zip(b) {
                row.iter_mut().for_each(|v| *v += bo);
            }
        }
    }

    pub fn forward(&self, x: &Tensor, exec: Exec) -> Tensor {
        let (n, len) = (x.batch(), x.shape()[2]);
        let mut y = vec![0.0f32; n * self.out_ch * len];
        exec.for_each_chunk_mut(&mut y, self.out_ch * len, |i, yi| {
            self.forward_sample(x.row(i), len, yi);
        });
        Tensor::from_parts(vec![n, self.out_ch, len], y)
    }

    /// Returns `dx` and `[dweight, dbias?]`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, exec: Exec) -> (Tensor, Vec<Vec<f32>>) {
        let (n, len) = (x.batch(), x.shape()[2]);
        let fan = self.fan_in();
        let chunks = n.div_ceil(GRAD_CHUNK);
        let parts = exec.map_range(chunks, |ci| {
            let mut dw = vec![0.0f32; self.weight.len()];
            let mut dw_s = vec![0.0f32; self.weight.len()];
            let mut db = vec![0.0f32; self.out_ch];
            let lo = ci * GRAD_CHUNK;
            let hi = (lo + GRAD_CHUNK).min(n);
            let mut dx = vec![0.0f32; (hi - lo) * self.in_ch * len];
            let mut cols = Vec::new();
            let mut dcols = vec![0.0f32; fan * len];
            for (j, i) in (lo..hi).enumerate() {
                let dyi = dy.row(i);
                let xi = x.row(i);
                let cols_ref: &[f32] = if self.kernel == 1 {
                    xi
                } else {
                    self.im2col(xi, len, &mut cols);
                    &cols
                };
                matmul_nt(self.out_ch, len, fan, dyi, cols_ref, &mut dw_s);
                dw.iter_mut().zip(&dw_s).for_each(|(a, b)| *a += b);
                for (o, row) in dyi.chunks_exact(len).enumerate() {
                    db[o] += row.iter().sum::<f32>();
                }
                let dxi = &mut dx[j * self.in_ch * len..(j + 1) * self.in_ch * len];
                if self.kernel == 1 {
                    matmul_tn(self.in_ch, self.out_ch, len, &self.weight, dyi, dxi);
                } else {
                    matmul_tn(fan, self.out_ch, len, &self.weight, dyi, &mut dcols);
                    self.col2im(&dcols, len, dxi);
                }
            }
            (dw, db, dx)
        });
        let mut dw = vec![0.0f32; self.weight.len()];
        let mut db = vec![0.0f32; self.out_ch];
        let mut dx = Vec::with_capacity(n * self.in_ch * len);
        for (pw, pb, px) in parts {
            dw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
            db.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
            dx.extend_from_slice(&px);
        }
        let mut grads = vec![dw];
        if self.bias.is_some() {
            grads.push(db);
        }
        (Tensor::from_parts(vec![n, self.in_ch, len], dx), grads)
    }

    fn col2im(&self, dcols: &[f32], len: usize, dx: &mut [f32]) {
        let k = self.kernel;
        let pad = k / 2;
        dx.fill(0.0);
        for c in 0..self.in_ch {
            let dst = &mut dx[c * len..(c + 1) * len];
            for t in 0..k {
                let src = &dcols[(c * k + t) * len..(c * k + t + 1) * len];
                if t >= pad {
                    let s = t - pad;
                    dst[s..].iter_mut().zip(&src[..len - s]).for_each(|(a, b)| *a += b);
                } else {
                    let s = pad - t;
                    dst[..len - s].iter_mut().zip(&src[s..]).for_each(|(a, b)| *a += b);
                }
            }
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<Named<'a>>) {
        out.push(Named {
            name: format!("{prefix}.weight"),
            shape: vec![self.out_ch, self.in_ch, self.kernel],
            data: &self.weight,
            slot: Slot::Param,
        });
        if let Some(b) = &self.bias {
            out.push(Named { name: format!("{prefix}.bias"), shape: vec![self.out_ch], data: b, slot: Slot::Param });
        }
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a>>) {
        let shape = vec![self.out_ch, self.in_ch, self.kernel];
        out.push(NamedMut { name: format!("{prefix}.weight"), shape, data: &mut self.weight, slot: Slot::Param });
        if let Some(b) = &mut self.bias {
            out.push(NamedMut { name: format!("{prefix}.bias"), shape: vec![self.out_ch], data: b, slot: Slot::Param });
        }
    }
}

// ---------------------------------------------------------------------------

/// Per-channel batch normalization over `(batch, length)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d {
    pub channels: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

pub struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f64>,
    stats: BnStats,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Inference transform with frozen running statistics.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let len = x.shape()[2];
        let scale: Vec<f32> = (0..self.channels)
            .map(|c| (f64::from(self.gamma[c]) / (f64::from(self.running_var[c]) + BN_EPS).sqrt()) as f32)
            .collect();
        let shift: Vec<f32> =
            (0..self.channels).map(|c| self.beta[c] - scale[c] * self.running_mean[c]).collect();
        let mut y = x.data().to_vec();
        for (j, seg) in y.chunks_exact_mut(len).enumerate() {
            let c = j % self.channels;
            seg.iter_mut().for_each(|v| *v = *v * scale[c] + shift[c]);
        }
        Tensor::from_parts(x.shape().to_vec(), y)
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        let n = x.batch();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let len = x.shape()[2];
        let m = (n * len) as f64;
        let mut mean = vec![0.0f64; self.channels];
        let mut sq = vec![0.0f64; self.channels];
        for (j, seg) in x.data().chunks_exact(len).enumerate() {
            mean[j % self.channels] += seg.iter().map(|&v| f64::from(v)).sum::<f64>();
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for (j, seg) in x.data().chunks_exact(len).enumerate() {
            let c = j % self.channels;
            sq[c] += seg.iter().map(|&v| (f64::from(v) - mean[c]).powi(2)).sum::<f64>();
        }
        let var: Vec<f64> = sq.iter().map(|s| s / m).collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0f32; x.data().len()];
        let mut y = vec![0.0f32; x.data().len()];
        for (j, (seg, (hs, ys))) in x
            .data()
            .chunks_exact(len)
            .zip(xhat.chunks_exact_mut(len).zip(y.chunks_exact_mut(len)))
            .enumerate()
        {
            let c = j % self.channels;
            for ((&v, h), out) in seg.iter().zip(hs).zip(ys) {
                let nh = ((f64::from(v) - mean[c]) * inv_std[c]) as f32;
                *h = nh;
                *out = self.gamma[c] * nh + self.beta[c];
            }
        }
        let stats = BnStats {
            mean: mean.iter().map(|&v| v as f32).collect(),
            var: sq.iter().map(|s| (s / (m - 1.0)) as f32).collect(),
        };
        Ok((Tensor::from_parts(x.shape().to_vec(), y), BnCache { xhat, inv_std, stats }))
    }

    /// Returns `dx` and `[dgamma, dbeta]`.
    pub fn backward(&self, cache: &BnCache, dy: &Tensor) -> (Tensor, Vec<Vec<f32>>) {
        let len = dy.shape()[2];
        let m = (dy.batch() * len) as f64;
        let mut sum_dy = vec![0.0f64; self.channels];
        let mut sum_dy_xhat = vec![0.0f64; self.channels];
        for (j, (g, h)) in dy.data().chunks_exact(len).zip(cache.xhat.chunks_exact(len)).enumerate() {
            let c = j % self.channels;
            for (&gv, &hv) in g.iter().zip(h) {
                sum_dy[c] += f64::from(gv);
                sum_dy_xhat[c] += f64::from(gv) * f64::from(hv);
            }
        }
        let mut dx = vec![0.0f32; dy.data().len()];
        for (j, ((g, h), d)) in dy
            .data()
            .chunks_exact(len)
            .zip(cache.xhat.chunks_exact(len))
            .zip(dx.chunks_exact_mut(len))
            .enumerate()
        {
            let c = j % self.channels;
            let k = f64::from(self.gamma[c]) * cache.inv_std[c] / m;
            for ((&gv, &hv), out) in g.iter().zip(h).zip(d) {
                *out = (k * (m * f64::from(gv) - sum_dy[c] - f64::from(hv) * sum_dy_xhat[c])) as f32;
            }
        }
        let dgamma = sum_dy_xhat.iter().map(|&v| v as f32).collect();
        let dbeta = sum_dy.iter().map(|&v| v as f32).collect();
        (Tensor::from_parts(dy.shape().to_vec(), dx), vec![dgamma, dbeta])
    }

    /// `running = (1 - m) * running + m * batch`.
    pub fn apply_stats(&mut self, stats: &BnStats) {
        let m = BN_MOMENTUM;
        for c in 0..self.channels {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c];
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<Named<'a>>) {
        let s = vec![self.channels];
        for (suffix, data, slot) in [
            ("gamma", &self.gamma, Slot::Param),
            ("beta", &self.beta, Slot::Param),
            ("running_mean", &self.running_mean, Slot::Buffer),
            ("running_var", &self.running_var, Slot::Buffer),
        ] {
            out.push(Named { name: format!("{prefix}.{suffix}"), shape: s.clone(), data, slot });
        }
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a>>) {
        let s = vec![self.channels];
        for (suffix, data, slot) in [
            ("gamma", &mut self.gamma, Slot::Param),
            ("beta", &mut self.beta, Slot::Param),
            ("running_mean", &mut self.running_mean, Slot::Buffer),
            ("running_var", &mut self.running_var, Slot::Buffer),
        ] {
            out.push(NamedMut { name: format!("{prefix}.{suffix}"), shape: s.clone(), data, slot });
        }
    }
}

// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect())
}

/// `dy` masked by `y > 0`, where `y` is the ReLU output.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let d = y.data().iter().zip(dy.data()).map(|(&o, &g)| if o > 0.0 { g } else { 0.0 }).collect();
    Tensor::from_parts(dy.shape().to_vec(), d)
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

// ---------------------------------------------------------------------------

/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`. The shortcut is
/// the identity, or a biased 1×1 convolution when the width changes.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv1d,
    pub bn1: BatchNorm1d,
    pub conv2: Conv1d,
    pub bn2: BatchNorm1d,
    pub proj: Option<Conv1d>,
}

pub struct ResidualCache {
    x: Tensor,
    bn1: BnCache,
    r1: Tensor,
    bn2: BnCache,
    out: Tensor,
}

impl ResidualBlock {
    pub fn new(in_ch: usize, out_ch: usize) -> Self {
        Self {
            conv1: Conv1d::new(in_ch, out_ch, 3, false),
            bn1: BatchNorm1d::new(out_ch),
            conv2: Conv1d::new(out_ch, out_ch, 3, false),
            bn2: BatchNorm1d::new(out_ch),
            proj: (in_ch != out_ch).then(|| Conv1d::new(in_ch, out_ch, 1, true)),
        }
    }

    pub fn in_ch(&self) -> usize {
        self.conv1.in_ch
    }

    pub fn out_ch(&self) -> usize {
        self.conv2.out_ch
    }

    fn shortcut(&self, x: &Tensor, exec: Exec) -> Tensor {
        match &self.proj {
            Some(p) => p.forward(x, exec),
            None => x.clone(),
        }
    }

    pub fn forward(&self, x: &Tensor, exec: Exec) -> Tensor {
        let h = relu(&self.bn1.forward(&self.conv1.forward(x, exec)));
        let h = self.bn2.forward(&self.conv2.forward(&h, exec));
        relu(&add(&h, &self.shortcut(x, exec)))
    }

    pub fn forward_train(&self, x: &Tensor, exec: Exec) -> Result<(Tensor, ResidualCache)> {
        let h1 = self.conv1.forward(x, exec);
        let (b1, bn1) = self.bn1.forward_train(&h1)?;
        let r1 = relu(&b1);
        let h2 = self.conv2.forward(&r1, exec);
        let (b2, bn2) = self.bn2.forward_train(&h2)?;
        let out = relu(&add(&b2, &self.shortcut(x, exec)));
        let cache = ResidualCache { x: x.clone(), bn1, r1, bn2, out: out.clone() };
        Ok((out, cache))
    }

    pub fn backward(&self, cache: &ResidualCache, dy: &Tensor, exec: Exec) -> (Tensor, Vec<Vec<f32>>) {
        let d = relu_backward(&cache.out, dy);
        let (db2, g_bn2) = self.bn2.backward(&cache.bn2, &d);
        let (dr1, g_c2) = self.conv2.backward(&cache.r1, &db2, exec);
        let db1 = relu_backward(&cache.r1, &dr1);
        let (dh1, g_bn1) = self.bn1.backward(&cache.bn1, &db1);
        let (dx_main, g_c1) = self.conv1.backward(&cache.x, &dh1, exec);
        let (dx_short, g_proj) = match &self.proj {
            Some(p) => p.backward(&cache.x, &d, exec),
            None => (d, Vec::new()),
        };
        let mut grads = g_c1;
        grads.extend(g_bn1);
        grads.extend(g_c2);
        grads.extend(g_bn2);
        grads.extend(g_proj);
        (add(&dx_main, &dx_short), grads)
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<Named<'a>>) {
        self.conv1.named(&format!("{prefix}.conv1"), out);
        self.bn1.named(&format!("{prefix}.bn1"), out);
        self.conv2.named(&format!("{prefix}.conv2"), out);
        self.bn2.named(&format!("{prefix}.bn2"), out);
        if let Some(p) = &self.proj {
            p.named(&format!("{prefix}.proj"), out);
        }
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a>>) {
        self.conv1.named_mut(&format!("{prefix}.conv1"), out);
        self.bn1.named_mut(&format!("{prefix}.bn1"), out);
        self.conv2.named_mut(&format!("{prefix}.conv2"), out);
        self.bn2.named_mut(&format!("{prefix}.bn2"), out);
        if let Some(p) = &mut self.proj {
            p.named_mut(&format!("{prefix}.proj"), out);
        }
    }
}

// ---------------------------------------------------------------------------

/// Inverted dropout. Element `e` of a batch tensor survives pass `seed` at
/// layer `layer` iff `unit_f32(derive(derive(seed, layer), e)) >= rate`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f32,
    pub enabled_at_test: bool,
}

impl Dropout {
    pub fn new(rate: f32, enabled_at_test: bool) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Self { rate, enabled_at_test }
    }

    pub fn active(&self, mode: Mode) -> bool {
        self.rate > 0.0
            && match mode {
                Mode::Train => true,
                Mode::McTest => self.enabled_at_test,
                Mode::Disabled => false,
            }
    }

    /// Multiplier per element: `0` or `1 / (1 - rate)`.
    pub fn mask(&self, len: usize, seed: u64, layer: usize) -> Vec<f32> {
        let key = derive(seed, layer as u64);
        let scale = 1.0 / (1.0 - self.rate);
        (0..len)
            .map(|e| if unit_f32(derive(key, e as u64)) >= self.rate { scale } else { 0.0 })
            .collect()
    }

    pub fn forward(&self, x: &Tensor, pass: &Pass, layer: usize) -> (Tensor, Option<Vec<f32>>) {
        if !self.active(pass.mode) {
            return (x.clone(), None);
        }
        let mask = self.mask(x.data().len(), pass.seed, layer);
        let y = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        (Tensor::from_parts(x.shape().to_vec(), y), Some(mask))
    }

    pub fn backward(mask: Option<&[f32]>, dy: &Tensor) -> Tensor {
        match mask {
            None => dy.clone(),
            Some(m) => Tensor::from_parts(dy.shape().to_vec(), dy.data().iter().zip(m).map(|(g, s)| g * s).collect()),
        }
    }
}

// ---------------------------------------------------------------------------

/// Fully connected layer over the flattened non-batch dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs, inputs]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weight: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.batch();
        let mut y = vec![0.0f32; n * self.outputs];
        matmul_nt(n, self.inputs, self.outputs, x.data(), &self.weight, &mut y);
        for row in y.chunks_exact_mut(self.outputs) {
            row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        Tensor::from_parts(vec![n, self.outputs], y)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> (Tensor, Vec<Vec<f32>>) {
        let n = x.batch();
        let mut dw = vec![0.0f32; self.weight.len()];
        matmul_tn(self.outputs, n, self.inputs, dy.data(), x.data(), &mut dw);
        let mut db = vec![0.0f32; self.outputs];
        for row in dy.rows() {
            db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
        }
        let mut dx = vec![0.0f32; n * self.inputs];
        matmul(n, self.outputs, self.inputs, dy.data(), &self.weight, &mut dx);
        (Tensor::from_parts(x.shape().to_vec(), dx), vec![dw, db])
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<Named<'a>>) {
        out.push(Named {
            name: format!("{prefix}.weight"),
            shape: vec![self.outputs, self.inputs],
            data: &self.weight,
            slot: Slot::Param,
        });
        out.push(Named { name: format!("{prefix}.bias"), shape: vec![self.outputs], data: &self.bias, slot: Slot::Param });
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a>>) {
        let shape = vec![self.outputs, self.inputs];
        out.push(NamedMut { name: format!("{prefix}.weight"), shape, data: &mut self.weight, slot: Slot::Param });
        out.push(NamedMut {
            name: format!("{prefix}.bias"),
            shape: vec![self.outputs],
            data: &mut self.bias,
            slot: Slot::Param,
        });
    }
}

// ---------------------------------------------------------------------------

/// `(N, C, L) -> (N, C)` mean over `L`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (n, c, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let y = x
        .data()
        .chunks_exact(len)
        .map(|seg| (seg.iter().map(|&v| f64::from(v)).sum::<f64>() / len as f64) as f32)
        .collect();
    Tensor::from_parts(vec![n, c], y)
}

pub fn global_avg_pool_backward(dy: &Tensor, len: usize) -> Tensor {
    let inv = 1.0 / len as f32;
    let mut dx = Vec::with_capacity(dy.data().len() * len);
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g * inv, len));
    }
    Tensor::from_parts(vec![dy.shape()[0], dy.shape()[1], len], dx)
}

/// Row-wise softmax, evaluated in double precision.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut y = Vec::with_capacity(x.data().len());
    for row in x.rows() {
        y.extend(softmax_f64(row).into_iter().map(|p| p as f32));
    }
    Tensor::from_parts(x.shape().to_vec(), y)
}

pub fn softmax_f64(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = row.iter().map(|&v| (f64::from(v) - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv1d),
    BatchNorm(BatchNorm1d),
    Relu,
    Residual(Box<ResidualBlock>),
    GlobalAvgPool,
    Dropout(Dropout),
    Linear(Linear),
    /// Must be the final layer; training differentiates through its logits.
    Softmax,
}

pub enum LayerCache {
    Conv(Tensor),
    BatchNorm(BnCache),
    Relu(Tensor),
    Residual(Box<ResidualCache>),
    GlobalAvgPool(usize),
    Dropout(Option<Vec<f32>>),
    Linear(Tensor),
    Softmax,
}

impl Layer {
    /// Output shape (without batch) for the given input shape, or an error if
    /// the layer cannot accept it.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Err(Error::ShapeMismatch { expected, got: input.to_vec() });
        match self {
            Layer::Conv(c) => match input {
                [ch, len] if *ch == c.in_ch => Ok(vec![c.out_ch, *len]),
                _ => mismatch(vec![c.in_ch, 0]),
            },
            Layer::BatchNorm(b) => match input {
                [ch, _] if *ch == b.channels => Ok(input.to_vec()),
                _ => mismatch(vec![b.channels, 0]),
            },
            Layer::Residual(r) => match input {
                [ch, len] if *ch == r.in_ch() => Ok(vec![r.out_ch(), *len]),
                _ => mismatch(vec![r.in_ch(), 0]),
            },
            Layer::GlobalAvgPool => match input {
                [ch, _] => Ok(vec![*ch]),
                _ => mismatch(vec![0, 0]),
            },
            Layer::Linear(l) => {
                if input.iter().product::<usize>() == l.inputs {
                    Ok(vec![l.outputs])
                } else {
                    mismatch(vec![l.inputs])
                }
            }
            Layer::Relu | Layer::Dropout(_) => Ok(input.to_vec()),
            Layer::Softmax => match input {
                [_] => Ok(input.to_vec()),
                _ => mismatch(vec![0]),
            },
        }
    }

    pub fn forward(&self, x: &Tensor, pass: &Pass, index: usize) -> Tensor {
        match self {
            Layer::Conv(c) => c.forward(x, pass.exec),
            Layer::BatchNorm(b) => b.forward(x),
            Layer::Relu => relu(x),
            Layer::Residual(r) => r.forward(x, pass.exec),
            Layer::GlobalAvgPool => global_avg_pool(x),
            Layer::Dropout(d) => d.forward(x, pass, index).0,
            Layer::Linear(l) => l.forward(&flatten(x)),
            Layer::Softmax => softmax(x),
        }
    }

    /// Training forward. Batch-norm layers use batch statistics; the cache
    /// carries them for [`Layer::batch_stats`].
    pub fn forward_train(&self, x: &Tensor, pass: &Pass, index: usize) -> Result<(Tensor, LayerCache)> {
        Ok(match self {
            Layer::Conv(c) => (c.forward(x, pass.exec), LayerCache::Conv(x.clone())),
            Layer::BatchNorm(b) => {
                let (y, c) = b.forward_train(x)?;
                (y, LayerCache::BatchNorm(c))
            }
            Layer::Relu => {
                let y = relu(x);
                (y.clone(), LayerCache::Relu(y))
            }
            Layer::Residual(r) => {
                let (y, c) = r.forward_train(x, pass.exec)?;
                (y, LayerCache::Residual(Box::new(c)))
            }
            Layer::GlobalAvgPool => (global_avg_pool(x), LayerCache::GlobalAvgPool(x.shape()[2])),
            Layer::Dropout(d) => {
                let (y, m) = d.forward(x, pass, index);
                (y, LayerCache::Dropout(m))
            }
            Layer::Linear(l) => {
                let xf = flatten(x);
                (l.forward(&xf), LayerCache::Linear(x.clone()))
            }
            Layer::Softmax => (softmax(x), LayerCache::Softmax),
        })
    }

    /// Returns `dx` and the parameter gradients in [`Layer::named`] order.
    /// `Softmax` is the identity here: callers pass the gradient with respect
    /// to its input.
    pub fn backward(&self, cache: &LayerCache, dy: &Tensor, exec: Exec) -> (Tensor, Vec<Vec<f32>>) {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv(x)) => c.backward(x, dy, exec),
            (Layer::BatchNorm(b), LayerCache::BatchNorm(c)) => b.backward(c, dy),
            (Layer::Relu, LayerCache::Relu(y)) => (relu_backward(y, dy), Vec::new()),
            (Layer::Residual(r), LayerCache::Residual(c)) => r.backward(c, dy, exec),
            (Layer::GlobalAvgPool, LayerCache::GlobalAvgPool(len)) => (global_avg_pool_backward(dy, *len), Vec::new()),
            (Layer::Dropout(_), LayerCache::Dropout(m)) => (Dropout::backward(m.as_deref(), dy), Vec::new()),
            (Layer::Linear(l), LayerCache::Linear(x)) => {
                let (dx, g) = l.backward(&flatten(x), dy);
                (Tensor::from_parts(x.shape().to_vec(), dx.into_data()), g)
            }
            (Layer::Softmax, LayerCache::Softmax) => (dy.clone(), Vec::new()),
            _ => panic!("layer cache does not belong to this layer"),
        }
    }

    /// Batch statistics recorded in a training cache, in layer order.
    pub fn batch_stats(cache: &LayerCache, out: &mut Vec<BnStats>) {
        match cache {
            LayerCache::BatchNorm(c) => out.push(c.stats.clone()),
            LayerCache::Residual(c) => {
                out.push(c.bn1.stats.clone());
                out.push(c.bn2.stats.clone());
            }
            _ => {}
        }
    }

    /// Consumes this layer's share of `stats` (in [`Layer::batch_stats`] order).
    pub fn apply_stats<'s>(&mut self, stats: &mut impl Iterator<Item = &'s BnStats>) {
        match self {
            Layer::BatchNorm(b) => b.apply_stats(stats.next().expect("missing batch statistics")),
            Layer::Residual(r) => {
                r.bn1.apply_stats(stats.next().expect("missing batch statistics"));
                r.bn2.apply_stats(stats.next().expect("missing batch statistics"));
            }
            _ => {}
        }
    }

    /// Positive-activation pattern of every ReLU recorded in a training cache.
    pub fn relu_pattern(cache: &LayerCache, out: &mut Vec<bool>) {
        match cache {
            LayerCache::Relu(y) => out.extend(y.data().iter().map(|&v| v > 0.0)),
            LayerCache::Residual(c) => {
                out.extend(c.r1.data().iter().map(|&v| v > 0.0));
                out.extend(c.out.data().iter().map(|&v| v > 0.0));
            }
            _ => {}
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<Named<'a>>) {
        match self {
            Layer::Conv(c) => c.named(&format!("{prefix}.conv"), out),
            Layer::BatchNorm(b) => b.named(&format!("{prefix}.bn"), out),
            Layer::Residual(r) => r.named(&format!("{prefix}.res"), out),
            Layer::Linear(l) => l.named(&format!("{prefix}.fc"), out),
            _ => {}
        }
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a>>) {
        match self {
            Layer::Conv(c) => c.named_mut(&format!("{prefix}.conv"), out),
            Layer::BatchNorm(b) => b.named_mut(&format!("{prefix}.bn"), out),
            Layer::Residual(r) => r.named_mut(&format!("{prefix}.res"), out),
            Layer::Linear(l) => l.named_mut(&format!("{prefix}.fc"), out),
            _ => {}
        }
    }

    pub fn is_stochastic_at_test(&self) -> bool {
        matches!(self, Layer::Dropout(d) if d.enabled_at_test)
    }
}

fn flatten(x: &Tensor) -> Tensor {
    Tensor::from_parts(vec![x.batch(), x.row_len()], x.data().to_vec())
}
