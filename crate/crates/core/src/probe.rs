//! The quality probe: a small convolutional regressor from an attention
//! stack and its timestep to a scalar predicted quality.
//!
//! Input layout: `(block, token slot)` pairs become input channels, spatial
//! dimensions are kept, padded slots are zeroed and maps are scaled by the
//! cell count so that a uniform map reads 1. The body is a chain of
//! DownBlocks (2×2 average pool except for the first, 3×3 input conv, an
//! additive projection of the timestep embedding, residual layers). The
//! OutputLayer standardizes activations per sample, averages them spatially
//! and maps the channel vector to one number with a 1×1 convolution.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::LN_10;

use crate::data::{AttentionStack, QualityLabel, StackShape, DEFAULT_TOKEN_SLOTS};
use crate::error::{bail, Error, Result};
use crate::eval::Predictor;
use crate::format::{decode_checkpoint, encode_checkpoint, fnv1a64, NamedTensor};
use crate::nn::{
    add_channel_bias, add_into, avg_pool2, avg_pool2_backward, channel_sums, silu, silu_backward, Adam, Conv2d,
    ConvCache, Dense, GroupNorm, Module, NormCache, Param, Real,
};
use crate::rng::Rng;

/// Sinusoidal embedding of `t / T` at `dim / 2` geometric frequencies from
/// 1 to 10⁴: `[sin(ω_i t/T)..., cos(ω_i t/T)...]`.
pub fn timestep_embed(t: u32, total: u32, dim: usize) -> Result<Vec<f64>> {
    if total == 0 || t < 1 || t > total {
        bail!(Argument, "timestep {t} outside 1..={total}");
    }
    if dim == 0 || dim % 2 != 0 {
        bail!(Argument, "embedding dimension {dim} must be positive and even");
    }
    Ok(embed_fraction(t as f64 / total as f64, dim))
}

/// [`timestep_embed`] at an arbitrary fraction, including the `t/T → 0` limit.
pub fn embed_fraction(x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = if half > 1 { (4.0 * LN_10 * i as f64 / (half - 1) as f64).exp() } else { 1.0 };
        out[i] = (freq * x).sin();
        out[half + i] = (freq * x).cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Pooling {
    GlobalAverage,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields, rename_all = "kebab-case"))]
pub struct ProbeConfig {
    pub n_blocks: usize,
    pub n_token_slots: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each DownBlock.
    pub widths: Vec<usize>,
    pub res_layers: usize,
    pub embed_dim: usize,
    pub pooling: Pooling,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Copies of each low-score sample in an epoch's sampling pool.
    pub oversample_factor: usize,
    /// Labels strictly below this quantile of the training labels count as low.
    pub low_score_quantile: f64,
    /// Train on a random flip/transpose of each sample's maps.
    pub augment: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            n_token_slots: DEFAULT_TOKEN_SLOTS,
            height: 16,
            width: 16,
            widths: vec![32, 64, 128],
            res_layers: 2,
            embed_dim: 64,
            pooling: Pooling::GlobalAverage,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            oversample_factor: 3,
            low_score_quantile: 0.3,
            augment: false,
        }
    }
}

impl ProbeConfig {
    /// Default hyperparameters for stacks of the given shape.
    pub fn for_shape(shape: StackShape) -> Self {
        Self {
            n_blocks: shape.n_blocks,
            n_token_slots: shape.n_tokens,
            height: shape.height,
            width: shape.width,
            ..Self::default()
        }
    }

    pub fn input_shape(&self) -> StackShape {
        StackShape::new(self.n_blocks, self.n_token_slots, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            bail!(Argument, "need at least one DownBlock with positive width");
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            bail!(Argument, "embedding dimension must be positive and even");
        }
        if self.oversample_factor < 1 {
            bail!(Argument, "oversampling factor must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.low_score_quantile) {
            bail!(Argument, "low-score quantile must lie in [0, 1]");
        }
        if self.n_blocks == 0 || self.n_token_slots == 0 || self.height == 0 || self.width == 0 {
            bail!(Argument, "input shape must be positive");
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            bail!(Argument, "batch size and learning rate must be positive");
        }
        Ok(())
    }

    /// Hash of everything that determines parameter shapes.
    pub fn fingerprint(&self) -> u64 {
        let desc = format!(
            "probe-v1;in={}x{}x{}x{};widths={:?};res={};embed={};pool={:?}",
            self.n_blocks, self.n_token_slots, self.height, self.width, self.widths, self.res_layers, self.embed_dim, self.pooling
        );
        fnv1a64(desc.as_bytes())
    }
}

#[derive(Debug, Clone)]
struct ResLayer<T> {
    conv_a: Conv2d<T>,
    conv_b: Conv2d<T>,
}

#[derive(Debug, Clone)]
struct DownBlock<T> {
    pool: bool,
    conv_in: Conv2d<T>,
    time_proj: Dense<T>,
    res: Vec<ResLayer<T>>,
}

/// Probe weights plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct Probe<T = f32> {
    config: ProbeConfig,
    blocks: Vec<DownBlock<T>>,
    out_norm: GroupNorm<T>,
    head: Dense<T>,
}

/// Checkpointable probe parameters.
pub type ProbeParams = Probe<f32>;

struct ResCache<T> {
    x: Vec<T>,
    ca: ConvCache<T>,
    a: Vec<T>,
    cb: ConvCache<T>,
}

struct BlockCache<T> {
    in_h: usize,
    in_w: usize,
    c_in: ConvCache<T>,
    res: Vec<ResCache<T>>,
}

struct ForwardCache<T> {
    temb: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    norm: NormCache<T>,
    pooled: Vec<T>,
    final_hw: usize,
}

impl<T: Real> Probe<T> {
    pub fn new(config: ProbeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut cin = config.n_blocks * config.n_token_slots;
        let (mut h, mut w) = (config.height, config.width);
        let mut blocks = Vec::with_capacity(config.widths.len());
        for (i, &width) in config.widths.iter().enumerate() {
            let pool = i > 0 && h % 2 == 0 && w % 2 == 0 && h >= 2 && w >= 2;
            if pool {
                h /= 2;
                w /= 2;
            }
            let name = format!("down{i}");
            let res = (0..config.res_layers)
                .map(|r| ResLayer {
                    conv_a: Conv2d::new(&format!("{name}.res{r}.a"), width, width, 3, 1, 1.0, &mut rng),
                    conv_b: Conv2d::new(&format!("{name}.res{r}.b"), width, width, 3, 1, 0.3, &mut rng),
                })
                .collect();
            blocks.push(DownBlock {
                pool,
                conv_in: Conv2d::new(&format!("{name}.conv_in"), cin, width, 3, 1, 1.0, &mut rng),
                time_proj: Dense::new(&format!("{name}.time_proj"), config.embed_dim, width, 0.5, &mut rng),
                res,
            });
            cin = width;
        }
        let out_norm = GroupNorm::new("out.norm", 1, cin);
        let head = Dense::new("out.head", cin, 1, 1.0, &mut rng);
        Ok(Self { config, blocks, out_norm, head })
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    /// Multiply-accumulate count of one prediction.
    pub fn macs(&self) -> usize {
        let (mut h, mut w) = (self.config.height, self.config.width);
        let mut total = 0;
        for b in &self.blocks {
            if b.pool {
                h /= 2;
                w /= 2;
            }
            total += b.conv_in.macs(h, w) + b.time_proj.macs(1);
            total += b.res.iter().map(|r| r.conv_a.macs(h, w) + r.conv_b.macs(h, w)).sum::<usize>();
        }
        total + self.head.macs(1)
    }

    fn check_stack(&self, stack: &AttentionStack) -> Result<()> {
        if stack.shape() != self.config.input_shape() {
            return Err(Error::Shape(format!(
                "stack {} does not match probe input {}",
                stack.shape(),
                self.config.input_shape()
            )));
        }
        if !stack.is_normalized() {
            bail!(Domain, "probe input must be normalized");
        }
        Ok(())
    }

    /// Network input for a stack: padded slots zeroed, maps scaled by the cell count.
    pub fn prepare_input(&self, stack: &AttentionStack) -> Result<Vec<T>> {
        self.check_stack(stack)?;
        let shape = stack.shape();
        let cells = shape.cells();
        let scale = cells as f64;
        let mask = stack.token_mask();
        let mut x = vec![T::zero(); stack.maps().len()];
        for (idx, (dst, src)) in x.chunks_exact_mut(cells).zip(stack.maps().chunks_exact(cells)).enumerate() {
            if mask[idx % shape.n_tokens] {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = T::from_f64(s as f64 * scale);
                }
            }
        }
        Ok(x)
    }

    fn embed(&self, step: u32, total: u32) -> Result<Vec<T>> {
        Ok(timestep_embed(step, total, self.config.embed_dim)?.into_iter().map(T::from_f64).collect())
    }

    fn forward_cached(&self, input: &[T], temb: Vec<T>) -> (T, ForwardCache<T>) {
        let (mut h, mut w) = (self.config.height, self.config.width);
        let mut x = input.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut channels = self.config.n_blocks * self.config.n_token_slots;
        for b in &self.blocks {
            let (in_h, in_w) = (h, w);
            if b.pool {
                x = avg_pool2(&x, channels, h, w);
                h /= 2;
                w /= 2;
            }
            let (mut y, c_in) = b.conv_in.forward(&x, h, w);
            let t = b.time_proj.forward(&temb, 1);
            add_channel_bias(&mut y, &t, h * w);
            let mut res = Vec::with_capacity(b.res.len());
            for r in &b.res {
                let (a_pre, ca) = r.conv_a.forward(&silu(&y), h, w);
                let (delta, cb) = r.conv_b.forward(&silu(&a_pre), h, w);
                let x_in = core::mem::replace(&mut y, Vec::new());
                y = x_in.iter().zip(&delta).map(|(&a, &b)| a + b).collect();
                res.push(ResCache { x: x_in, ca, a: a_pre, cb });
            }
            caches.push(BlockCache { in_h, in_w, c_in, res });
            x = y;
            channels = b.conv_in.cout;
        }
        let hw = h * w;
        let (normed, norm) = self.out_norm.forward(&x, hw);
        let inv = T::from_f64(1.0 / hw as f64);
        let pooled: Vec<T> = normed.chunks_exact(hw).map(|row| row.iter().fold(T::zero(), |a, &b| a + b) * inv).collect();
        let out = self.head.forward(&pooled, 1)[0];
        (out, ForwardCache { temb, blocks: caches, norm, pooled, final_hw: hw })
    }

    /// Accumulates parameter gradients for an output gradient `dout`.
    fn backward(&mut self, dout: T, cache: &ForwardCache<T>) {
        let dpooled = self.head.backward(&[dout], &cache.pooled, 1);
        let hw = cache.final_hw;
        let inv = T::from_f64(1.0 / hw as f64);
        let mut dnormed = Vec::with_capacity(dpooled.len() * hw);
        for &g in &dpooled {
            dnormed.extend(core::iter::repeat(g * inv).take(hw));
        }
        let mut dx = self.out_norm.backward(&dnormed, &cache.norm);
        for (b, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            for (r, rc) in b.res.iter_mut().zip(&bc.res).rev() {
                let d_silu_a = r.conv_b.backward(&dx, &rc.cb);
                let da = silu_backward(&d_silu_a, &rc.a);
                let d_silu_x = r.conv_a.backward(&da, &rc.ca);
                add_into(&mut dx, &silu_backward(&d_silu_x, &rc.x));
            }
            let hw_b = dx.len() / b.conv_in.cout;
            let dt = channel_sums(&dx, hw_b);
            b.time_proj.backward(&dt, &cache.temb, 1);
            dx = b.conv_in.backward(&dx, &bc.c_in);
            if b.pool {
                dx = avg_pool2_backward(&dx, b.conv_in.cin, bc.in_h, bc.in_w);
            }
        }
    }

    /// Predicted quality for a normalized stack.
    pub fn forward(&self, stack: &AttentionStack) -> Result<f64> {
        let input = self.prepare_input(stack)?;
        let temb = self.embed(stack.step(), stack.total_steps())?;
        Ok(self.forward_cached(&input, temb).0.to_f64())
    }

    /// Loss `(q̂ - q)²` and its parameter gradients (accumulated).
    pub fn loss_and_grad(&mut self, input: &[T], temb: &[T], target: f64) -> f64 {
        let (out, cache) = self.forward_cached(input, temb.to_vec());
        let err = out.to_f64() - target;
        self.backward(T::from_f64(2.0 * err), &cache);
        err * err
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        self.params()
            .into_iter()
            .map(|p| NamedTensor { name: p.name.clone(), values: p.value.iter().map(|&v| Real::to_f64(v) as f32).collect() })
            .collect()
    }

    /// Converts weights to another element type.
    pub fn cast<U: Real>(&self) -> Probe<U> {
        let mut out = Probe::<U>::new(self.config.clone()).expect("config already validated");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            for (d, s) in dst.value.iter_mut().zip(&src.value) {
                *d = U::from_f64(Real::to_f64(*s));
            }
        }
        out
    }
}

impl<T: Real> Module<T> for Probe<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.conv_in.params());
            out.extend(b.time_proj.params());
            for r in &b.res {
                out.extend(r.conv_a.params());
                out.extend(r.conv_b.params());
            }
        }
        out.extend(self.out_norm.params());
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.conv_in.params_mut());
            out.extend(b.time_proj.params_mut());
            for r in &mut b.res {
                out.extend(r.conv_a.params_mut());
                out.extend(r.conv_b.params_mut());
            }
        }
        out.extend(self.out_norm.params_mut());
        out.extend(self.head.params_mut());
        out
    }
}

impl Predictor for Probe<f32> {
    fn predict(&self, stack: &AttentionStack) -> Result<f64> {
        self.forward(stack)
    }
}

/// Serializes weights with the config fingerprint.
pub fn encode_probe(probe: &ProbeParams) -> Result<Vec<u8>> {
    encode_checkpoint(probe.config.fingerprint(), &probe.named_tensors())
}

/// Restores weights saved by [`encode_probe`] into a probe built from `config`.
pub fn decode_probe(bytes: &[u8], config: &ProbeConfig) -> Result<ProbeParams> {
    let (fingerprint, tensors) = decode_checkpoint(bytes)?;
    if fingerprint != config.fingerprint() {
        return Err(Error::Compatibility(format!(
            "checkpoint fingerprint {fingerprint:016x} does not match config {:016x}",
            config.fingerprint()
        )));
    }
    let mut probe = ProbeParams::new(config.clone())?;
    let mut params = probe.params_mut();
    if params.len() != tensors.len() {
        return Err(Error::Compatibility(format!("{} tensors for {} parameters", tensors.len(), params.len())));
    }
    for (p, t) in params.iter_mut().zip(tensors) {
        if p.name != t.name || p.value.len() != t.values.len() {
            return Err(Error::Compatibility(format!("tensor {} does not fit parameter {}", t.name, p.name)));
        }
        if t.values.iter().any(|v| !v.is_finite()) {
            bail!(Domain, "tensor {} has non-finite values", t.name);
        }
        p.value = t.values;
    }
    Ok(probe)
}

/// Per-epoch training record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean squared error over each epoch's sampling pool, measured on the
    /// fly before each batch update.
    pub epoch_mse: Vec<f64>,
    pub pool_size: usize,
}

/// `q`-quantile by linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Training indices for one epoch: every sample once, plus
/// `factor - 1` extra copies of samples strictly below the `quantile` label.
pub fn sampling_pool(labels: &[f64], factor: usize, q: f64) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..labels.len()).collect();
    if factor <= 1 || labels.is_empty() {
        return pool;
    }
    let threshold = quantile(labels, q);
    for (i, &v) in labels.iter().enumerate() {
        if v < threshold {
            pool.extend(core::iter::repeat(i).take(factor - 1));
        }
    }
    pool
}

/// Trains a probe by minibatch MSE regression with Adam.
pub fn train_probe(samples: &[(&AttentionStack, &QualityLabel)], config: &ProbeConfig) -> Result<(ProbeParams, TrainHistory)> {
    config.validate()?;
    let Some((_, first)) = samples.first() else {
        bail!(Argument, "training set is empty");
    };
    if let Some((_, other)) = samples.iter().find(|(_, l)| l.metric_name != first.metric_name) {
        bail!(Argument, "mixed metrics {:?} and {:?}", first.metric_name, other.metric_name);
    }
    let mut probe = ProbeParams::new(config.clone())?;
    let inputs: Vec<Vec<f32>> = samples.iter().map(|(s, _)| probe.prepare_input(s)).collect::<Result<_>>()?;
    let tembs: Vec<Vec<f32>> = samples.iter().map(|(s, _)| probe.embed(s.step(), s.total_steps())).collect::<Result<_>>()?;
    let labels: Vec<f64> = samples.iter().map(|(_, l)| l.value).collect();
    let base_pool = sampling_pool(&labels, config.oversample_factor, config.low_score_quantile);

    let mut rng = Rng::new(crate::rng::derive_seed(config.seed, 0x7a11));
    let mut opt = Adam::new(config.learning_rate);
    let mut history = TrainHistory { epoch_mse: Vec::with_capacity(config.epochs), pool_size: base_pool.len() };
    let mut iteration = 0;
    for _epoch in 0..config.epochs {
        let mut pool = base_pool.clone();
        rng.shuffle(&mut pool);
        let mut total = 0.0;
        for batch in pool.chunks(config.batch_size) {
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += if config.augment {
                    let x = dihedral(&inputs[i], config.height, config.width, rng.below(8));
                    probe.loss_and_grad(&x, &tembs[i], labels[i])
                } else {
                    probe.loss_and_grad(&inputs[i], &tembs[i], labels[i])
                };
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training { iteration, reason: String::from("loss is not finite") });
            }
            total += batch_loss;
            opt.step(&mut probe.params_mut(), 1.0 / batch.len() as f64);
            iteration += 1;
        }
        history.epoch_mse.push(total / pool.len() as f64);
    }
    Ok((probe, history))
}

/// One of the 8 symmetries of the square applied to every `h × w` plane of
/// `x`: bit 0 flips columns, bit 1 flips rows, bit 2 transposes (ignored for
/// non-square planes).
pub fn dihedral<T: Copy>(x: &[T], h: usize, w: usize, k: usize) -> Vec<T> {
    let transpose = k & 4 != 0 && h == w;
    let mut out = Vec::with_capacity(x.len());
    for plane in x.chunks_exact(h * w) {
        for y in 0..h {
            for c in 0..w {
                let (mut sy, mut sx) = if transpose { (c, y) } else { (y, c) };
                if k & 1 != 0 {
                    sx = w - 1 - sx;
                }
                if k & 2 != 0 {
                    sy = h - 1 - sy;
                }
                out.push(plane[sy * w + sx]);
            }
        }
    }
    out
}

/// Mean squared error of a probe over labeled stacks.
pub fn probe_mse(probe: &ProbeParams, samples: &[(&AttentionStack, &QualityLabel)]) -> Result<f64> {
    let mut total = 0.0;
    for (s, l) in samples {
        let e = probe.forward(s)? - l.value;
        total += e * e;
    }
    Ok(total / samples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Provenance, StackMeta};
    use crate::testbed::synth::{random_synth_record, SynthConfig, SYNTHETIC_METRIC};

    #[test]
    fn dihedral_covers_the_square_symmetries() {
        // two 3x3 planes; the second is offset so planes never mix
        let x: Vec<u32> = (0..18).collect();
        let at = |v: &[u32], p: usize, y: usize, c: usize| v[p * 9 + y * 3 + c];
        let mut seen = Vec::new();
        for k in 0..8 {
            let t = dihedral(&x, 3, 3, k);
            for p in 0..2 {
                let mut plane: Vec<u32> = t[p * 9..][..9].to_vec();
                plane.sort();
                assert_eq!(plane, (p as u32 * 9..p as u32 * 9 + 9).collect::<Vec<_>>());
            }
            assert!(!seen.contains(&t), "k={k} repeats an earlier transform");
            seen.push(t);
        }
        let rot180 = dihedral(&x, 3, 3, 3);
        let transposed = dihedral(&x, 3, 3, 4);
        for p in 0..2 {
            for y in 0..3 {
                for c in 0..3 {
                    assert_eq!(at(&rot180, p, y, c), at(&x, p, 2 - y, 2 - c));
                    assert_eq!(at(&transposed, p, y, c), at(&x, p, c, y));
                }
            }
        }
        assert_eq!(dihedral(&dihedral(&x, 3, 3, 1), 3, 3, 1), x);
        // non-square inputs ignore the transpose bit
        let r: Vec<u32> = (0..6).collect();
        assert_eq!(dihedral(&r, 2, 3, 4), r);
        assert_eq!(dihedral(&r, 2, 3, 1), vec![2, 1, 0, 5, 4, 3]);
    }

    fn tiny_config() -> ProbeConfig {
        ProbeConfig {
            n_blocks: 1,
            n_token_slots: 2,
            height: 4,
            width: 4,
            widths: vec![4],
            res_layers: 2,
            embed_dim: 4,
            ..ProbeConfig::default()
        }
    }

    fn random_stack(shape: StackShape, mask: Vec<bool>, seed: u64) -> AttentionStack {
        let mut rng = Rng::new(seed);
        let maps = (0..shape.len().unwrap()).map(|_| rng.uniform() as f32).collect();
        let mut meta = StackMeta::anonymous(shape);
        meta.token_mask = mask;
        meta.step = 5;
        meta.total_steps = 25;
        AttentionStack::new(meta, shape, maps).unwrap().normalize().unwrap()
    }

    #[test]
    fn embedding_examples() {
        let e = embed_fraction(0.0, 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert_eq!(timestep_embed(5, 25, 6).unwrap(), timestep_embed(5, 25, 6).unwrap());
        // dim 4: frequencies 1 and 10⁴ at t/T = 0.2
        let e = timestep_embed(5, 25, 4).unwrap();
        let expect = [0.2f64.sin(), (1e4f64 * 0.2).sin(), 0.2f64.cos(), (1e4f64 * 0.2).cos()];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(timestep_embed(0, 25, 4).is_err());
        assert!(timestep_embed(26, 25, 4).is_err());
        assert!(timestep_embed(5, 25, 3).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = tiny_config();
        let mut probe = Probe::<f64>::new(cfg.clone()).unwrap();
        // move every parameter away from its initialization pattern
        let mut rng = Rng::new(77);
        for p in probe.params_mut() {
            for v in &mut p.value {
                *v += 0.2 * rng.normal();
            }
        }
        let stack = random_stack(cfg.input_shape(), vec![true, true], 3);
        let input = probe.prepare_input(&stack).unwrap();
        let temb = probe.embed(5, 25).unwrap();
        let target = 0.3;
        probe.zero_grad();
        probe.loss_and_grad(&input, &temb, target);
        let analytic: Vec<Vec<f64>> = probe.params().iter().map(|p| p.grad.clone()).collect();
        let eps = 1e-5;
        let loss = |p: &Probe<f64>| {
            let (out, _) = p.forward_cached(&input, temb.clone());
            (out - target).powi(2)
        };
        let mut worst: f64 = 0.0;
        let n_params = probe.params().len();
        for pi in 0..n_params {
            for vi in 0..probe.params()[pi].value.len() {
                let orig = probe.params()[pi].value[vi];
                probe.params_mut()[pi].value[vi] = orig + eps;
                let lp = loss(&probe);
                probe.params_mut()[pi].value[vi] = orig - eps;
                let lm = loss(&probe);
                probe.params_mut()[pi].value[vi] = orig;
                let num = (lp - lm) / (2.0 * eps);
                let a = analytic[pi][vi];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel < 1e-3, "{} [{vi}]: analytic {a} numeric {num}", probe.params()[pi].name);
            }
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let cfg = tiny_config();
        let mut probe = ProbeParams::new(cfg.clone()).unwrap();
        for p in probe.params_mut() {
            p.value.fill(0.0);
        }
        let stack = random_stack(cfg.input_shape(), vec![true, false], 1);
        assert_eq!(probe.forward(&stack).unwrap(), 0.0);
    }

    #[test]
    fn padded_slots_are_ignored() {
        let cfg = tiny_config();
        let probe = ProbeParams::new(cfg.clone()).unwrap();
        let shape = cfg.input_shape();
        let a = random_stack(shape, vec![true, false], 1);
        // same real slice, different raw padding content
        let (meta, _, mut maps) = a.clone().into_parts();
        for v in &mut maps[16..] {
            *v = 0.7;
        }
        let mut raw_meta = meta.clone();
        raw_meta.normalized = false;
        let b = AttentionStack::new(raw_meta, shape, maps).unwrap();
        let b = b.normalize().unwrap();
        assert_eq!(probe.prepare_input(&a).unwrap(), probe.prepare_input(&b).unwrap());
        assert_eq!(probe.forward(&a).unwrap(), probe.forward(&b).unwrap());
    }

    #[test]
    fn spatial_permutation_changes_output() {
        let cfg = ProbeConfig { widths: vec![8], ..tiny_config() };
        let probe = ProbeParams::new(cfg.clone()).unwrap();
        let a = random_stack(cfg.input_shape(), vec![true, true], 5);
        let (meta, shape, mut maps) = a.clone().into_parts();
        maps[..16].reverse();
        let b = AttentionStack::new(meta, shape, maps).unwrap();
        assert_ne!(probe.forward(&a).unwrap(), probe.forward(&b).unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let probe = ProbeParams::new(tiny_config()).unwrap();
        let other = random_stack(StackShape::new(1, 3, 4, 4), vec![true; 3], 1);
        assert!(matches!(probe.forward(&other), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = tiny_config();
        let probe = ProbeParams::new(cfg.clone()).unwrap();
        let bytes = encode_probe(&probe).unwrap();
        let restored = decode_probe(&bytes, &cfg).unwrap();
        for seed in 0..10 {
            let s = random_stack(cfg.input_shape(), vec![true, seed % 2 == 0], seed);
            assert_eq!(probe.forward(&s).unwrap().to_bits(), restored.forward(&s).unwrap().to_bits());
        }
        let other = ProbeConfig { widths: vec![5], ..cfg.clone() };
        assert!(matches!(decode_probe(&bytes, &other), Err(Error::Compatibility(_))));
        assert!(decode_probe(&bytes[..bytes.len() - 2], &cfg).is_err());
    }

    #[test]
    fn oversampling_pool() {
        let labels = [0.1, 0.5, 0.9, 0.2];
        assert_eq!(sampling_pool(&labels, 1, 0.3), vec![0, 1, 2, 3]);
        assert_eq!(sampling_pool(&labels, 3, 0.0), vec![0, 1, 2, 3]);
        // 0.3-quantile of {0.1, 0.2, 0.5, 0.9} is 0.19 → only 0.1 is low
        assert_eq!(sampling_pool(&labels, 3, 0.3), vec![0, 1, 2, 3, 0, 0]);
    }

    #[test]
    fn training_rejects_bad_sets() {
        let cfg = tiny_config();
        assert!(train_probe(&[], &cfg).is_err());
        let s = random_stack(cfg.input_shape(), vec![true, true], 1);
        let a = QualityLabel::new("a", 0.1, Provenance::External).unwrap();
        let b = QualityLabel::new("b", 0.1, Provenance::External).unwrap();
        assert!(matches!(train_probe(&[(&s, &a), (&s, &b)], &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn training_reduces_loss() {
        let synth = SynthConfig { map_size: 8, n_blocks: 1, token_slots: 4, ..SynthConfig::default() };
        let records: Vec<_> = (0..24).map(|i| random_synth_record(1, i, 0.0, 0.1, &synth).unwrap().0).collect();
        let samples: Vec<_> = records.iter().map(|r| (&r.stacks[0], &r.labels[0])).collect();
        assert_eq!(samples[0].1.metric_name, SYNTHETIC_METRIC);
        let cfg = ProbeConfig {
            widths: vec![8, 16],
            res_layers: 1,
            epochs: 15,
            batch_size: 8,
            ..ProbeConfig::for_shape(records[0].stacks[0].shape())
        };
        let (_, hist) = train_probe(&samples, &cfg).unwrap();
        assert!(hist.epoch_mse[0] > *hist.epoch_mse.last().unwrap());
        let (_, again) = train_probe(&samples, &cfg).unwrap();
        assert_eq!(hist, again);
    }
}
