//! A tiny text-conditional denoiser with genuine cross-attention.
//!
//! The 32×32 canvas is folded into a 4×16×16 tensor (pixel unshuffle), joined
//! with coordinate planes, run through residual blocks interleaved with
//! cross-attention layers over the prompt's object tokens, and unfolded back
//! into a noise prediction. Object tokens are embedded by a small MLP over
//! fixed features; a learned null token gives the background somewhere to
//! attend and is not exported. Sampling is DDIM over a continuous cosine
//! schedule.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use crate::data::{
    AttentionStack, Image, Schedule, StackMeta, StackShape, TrajectoryRecord, DEFAULT_TOKEN_SLOTS,
};
use crate::error::{bail, Error, Result};
use crate::format::{decode_checkpoint, encode_checkpoint, fnv1a64, NamedTensor};
use crate::nn::{
    add_channel_bias, add_into, channel_sums, pixel_shuffle, pixel_unshuffle, silu, silu_backward, Adam,
    AttentionCache, Conv2d, ConvCache, CrossAttention, Dense, GroupNorm, Module, NormCache, Param, Real,
};
use crate::probe::embed_fraction;
use crate::rng::{derive_seed, Rng};

use super::scene::{
    coordinate_planes, position_encoding, token_features, SceneSpec, COORD_CHANNELS, POSITION_FEATURES, TOKEN_FEATURES,
};
use super::score::score_image;

const COSINE_OFFSET: f64 = 0.008;
const MIN_ALPHA_BAR: f64 = 1e-4;

/// Cumulative signal fraction ᾱ(u) of the cosine schedule at `u ∈ [0, 1]`.
pub fn alpha_bar(u: f64) -> f64 {
    let f = |s: f64| {
        let c = ((s + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos();
        c * c
    };
    (f(u.clamp(0.0, 1.0)) / f(0.0)).clamp(MIN_ALPHA_BAR, 1.0)
}

/// Schedule position of sampling step `i` (1-based) out of `T`: step 1 starts from pure noise.
pub fn step_time(i: u32, total: u32) -> f64 {
    (total - i + 1) as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields, rename_all = "kebab-case"))]
pub struct ToyDiffusionConfig {
    pub canvas: usize,
    /// Channels of the residual trunk.
    pub width: usize,
    /// Residual blocks before each attention layer and after the last one.
    pub depth: usize,
    pub attention_layers: usize,
    pub heads: usize,
    pub attention_dim: usize,
    pub token_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub total_steps: u32,
    pub train_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Upper clamp γ of the per-sample weight `clamp((1 - ᾱ)/ᾱ, 1, γ)` on the
    /// noise-prediction loss; 1 gives the plain objective.
    pub max_loss_weight: f64,
    /// DDIM stochasticity: 0 is deterministic given the initial noise, 1 is ancestral.
    pub eta: f64,
    pub seed: u64,
}

impl Default for ToyDiffusionConfig {
    fn default() -> Self {
        Self {
            canvas: 32,
            width: 32,
            depth: 1,
            attention_layers: 2,
            heads: 2,
            attention_dim: 32,
            token_dim: 32,
            time_dim: 32,
            groups: 8,
            total_steps: 25,
            train_iterations: 3000,
            batch_size: 16,
            learning_rate: 2e-3,
            max_loss_weight: 5.0,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl ToyDiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 2 {
            bail!(Argument, "need at least 2 sampling steps");
        }
        let sizes = [
            self.canvas,
            self.width,
            self.depth,
            self.attention_layers,
            self.heads,
            self.attention_dim,
            self.token_dim,
            self.time_dim,
            self.groups,
            self.batch_size,
        ];
        if sizes.contains(&0) {
            bail!(Argument, "all sizes must be positive");
        }
        if self.canvas % 2 != 0 {
            bail!(Argument, "canvas size must be even");
        }
        if self.width % self.groups != 0 || self.attention_dim % self.heads != 0 || self.time_dim % 2 != 0 {
            bail!(Argument, "width must divide into groups, attention dim into heads, time dim must be even");
        }
        if !(self.max_loss_weight >= 1.0) {
            bail!(Argument, "maximum loss weight must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.eta) {
            bail!(Argument, "learning rate must be positive and eta in [0, 1]");
        }
        Ok(())
    }

    /// Side length of the attention grid.
    pub fn grid(&self) -> usize {
        self.canvas / 2
    }

    pub fn fingerprint(&self) -> u64 {
        let desc = format!(
            "toy-v3;canvas={};width={};depth={};attn={};heads={};adim={};tdim={};time={};groups={}",
            self.canvas,
            self.width,
            self.depth,
            self.attention_layers,
            self.heads,
            self.attention_dim,
            self.token_dim,
            self.time_dim,
            self.groups
        );
        fnv1a64(desc.as_bytes())
    }
}

fn pixel_positions<T: Real>(g: usize) -> Vec<T> {
    let n = g * g;
    let mut out = vec![T::zero(); POSITION_FEATURES * n];
    for p in 0..n {
        let x = 2.0 * ((p % g) as f64 + 0.5) / g as f64 - 1.0;
        let y = 2.0 * ((p / g) as f64 + 0.5) / g as f64 - 1.0;
        for (f, v) in position_encoding(x, y).iter().enumerate() {
            out[f * n + p] = T::from_f64(*v as f64);
        }
    }
    out
}

#[derive(Debug, Clone)]
struct ResBlock<T> {
    norm1: GroupNorm<T>,
    conv1: Conv2d<T>,
    time: Dense<T>,
    norm2: GroupNorm<T>,
    conv2: Conv2d<T>,
}

struct ResCache<T> {
    n1: Vec<T>,
    c_n1: NormCache<T>,
    c1: ConvCache<T>,
    n2: Vec<T>,
    c_n2: NormCache<T>,
    c2: ConvCache<T>,
}

impl<T: Real> ResBlock<T> {
    fn new(name: &str, c: usize, groups: usize, rng: &mut Rng) -> Self {
        Self {
            norm1: GroupNorm::new(&format!("{name}.norm1"), groups, c),
            conv1: Conv2d::new(&format!("{name}.conv1"), c, c, 3, 1, 1.0, rng),
            time: Dense::new(&format!("{name}.time"), c, c, 1.0, rng),
            norm2: GroupNorm::new(&format!("{name}.norm2"), groups, c),
            conv2: Conv2d::new(&format!("{name}.conv2"), c, c, 3, 1, 0.3, rng),
        }
    }

    fn forward(&self, x: &[T], hw: usize, g: usize, temb: &[T]) -> (Vec<T>, ResCache<T>) {
        let (n1, c_n1) = self.norm1.forward(x, hw);
        let (mut a, c1) = self.conv1.forward(&silu(&n1), g, g);
        add_channel_bias(&mut a, &self.time.forward(temb, 1), hw);
        let (n2, c_n2) = self.norm2.forward(&a, hw);
        let (b, c2) = self.conv2.forward(&silu(&n2), g, g);
        let y = x.iter().zip(&b).map(|(&u, &v)| u + v).collect();
        (y, ResCache { n1, c_n1, c1, n2, c_n2, c2 })
    }

    /// Returns the input gradient; adds the time-embedding gradient into `dtemb`.
    fn backward(&mut self, dy: &[T], c: &ResCache<T>, hw: usize, temb: &[T], dtemb: &mut [T]) -> Vec<T> {
        let dn2 = silu_backward(&self.conv2.backward(dy, &c.c2), &c.n2);
        let da = self.norm2.backward(&dn2, &c.c_n2);
        add_into(dtemb, &self.time.backward(&channel_sums(&da, hw), temb, 1));
        let dn1 = silu_backward(&self.conv1.backward(&da, &c.c1), &c.n1);
        let mut dx = self.norm1.backward(&dn1, &c.c_n1);
        add_into(&mut dx, dy);
        dx
    }

    fn params_into<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        out.extend(self.norm1.params());
        out.extend(self.conv1.params());
        out.extend(self.time.params());
        out.extend(self.norm2.params());
        out.extend(self.conv2.params());
    }

    fn params_mut_into<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.extend(self.norm1.params_mut());
        out.extend(self.conv1.params_mut());
        out.extend(self.time.params_mut());
        out.extend(self.norm2.params_mut());
        out.extend(self.conv2.params_mut());
    }

    fn macs(&self, g: usize) -> usize {
        self.conv1.macs(g, g) + self.conv2.macs(g, g) + self.time.macs(1)
    }
}

#[derive(Debug, Clone)]
struct AttnBlock<T> {
    norm: GroupNorm<T>,
    attn: CrossAttention<T>,
}

/// Trained (or untrained) toy denoiser.
#[derive(Debug, Clone)]
pub struct ToyModel<T = f32> {
    config: ToyDiffusionConfig,
    token_in: Dense<T>,
    token_out: Dense<T>,
    null_token: Param<T>,
    time_in: Dense<T>,
    conv_in: Conv2d<T>,
    /// `(depth res blocks, attention)` per attention layer.
    stages: Vec<(Vec<ResBlock<T>>, AttnBlock<T>)>,
    tail: Vec<ResBlock<T>>,
    out_norm: GroupNorm<T>,
    conv_out: Conv2d<T>,
    coords: Vec<T>,
    /// Positional encoding of attention-grid cells, `[POSITION_FEATURES, cells]`.
    pixel_pos: Vec<T>,
}

/// Token context of a prompt: embedded objects plus the null token.
struct Context<T> {
    features: Vec<T>,
    hidden: Vec<T>,
    ctx: Vec<T>,
    /// Positional encoding of token placements; zero for the null token.
    pos: Vec<T>,
    tokens: usize,
}

struct StageCache<T> {
    res: Vec<ResCache<T>>,
    c_n: NormCache<T>,
    attn: AttentionCache<T>,
}

struct ForwardCache<T> {
    e0: Vec<T>,
    e_pre: Vec<T>,
    temb: Vec<T>,
    c_in: ConvCache<T>,
    stages: Vec<StageCache<T>>,
    tail: Vec<ResCache<T>>,
    c_out_norm: NormCache<T>,
    n_out: Vec<T>,
    c_out: ConvCache<T>,
}

impl<T: Real> ToyModel<T> {
    pub fn new(config: ToyDiffusionConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(derive_seed(config.seed, 0x70e));
        let c = config.width;
        let td = config.token_dim;
        let stages = (0..config.attention_layers)
            .map(|l| {
                let res = (0..config.depth)
                    .map(|d| ResBlock::new(&format!("stage{l}.res{d}"), c, config.groups, &mut rng))
                    .collect();
                let attn = AttnBlock {
                    norm: GroupNorm::new(&format!("stage{l}.attn.norm"), config.groups, c),
                    attn: CrossAttention::new(&format!("stage{l}.attn"), c, td, config.attention_dim, config.heads, &mut rng)
                        .with_positions(&format!("stage{l}.attn"), POSITION_FEATURES, &mut rng),
                };
                (res, attn)
            })
            .collect();
        let tail = (0..config.depth)
            .map(|d| ResBlock::new(&format!("tail.res{d}"), c, config.groups, &mut rng))
            .collect();
        Ok(Self {
            token_in: Dense::new("token.in", TOKEN_FEATURES, td, 1.0, &mut rng),
            token_out: Dense::new("token.out", td, td, 1.0, &mut rng),
            null_token: Param::normal("token.null", td, 1.0, &mut rng),
            time_in: Dense::new("time.in", config.time_dim, c, 1.0, &mut rng),
            conv_in: Conv2d::new("conv_in", 4 + COORD_CHANNELS, c, 3, 1, 1.0, &mut rng),
            stages,
            tail,
            out_norm: GroupNorm::new("out.norm", config.groups, c),
            conv_out: Conv2d::new("conv_out", c, 4, 3, 1, 0.1, &mut rng),
            coords: coordinate_planes(config.grid(), config.grid()).into_iter().map(|v| T::from_f64(v as f64)).collect(),
            pixel_pos: pixel_positions(config.grid()),
            config,
        })
    }

    pub fn config(&self) -> &ToyDiffusionConfig {
        &self.config
    }

    /// Multiply-accumulate count of one denoiser evaluation for a prompt with `objects` tokens.
    pub fn macs_per_step(&self, objects: usize) -> usize {
        let g = self.config.grid();
        let n = g * g;
        let tokens = objects + 1;
        let mut total = self.token_in.macs(objects) + self.token_out.macs(objects) + self.time_in.macs(1);
        total += self.conv_in.macs(g, g) + self.conv_out.macs(g, g);
        for (res, attn) in &self.stages {
            total += res.iter().map(|r| r.macs(g)).sum::<usize>() + attn.attn.macs(n, tokens);
        }
        total + self.tail.iter().map(|r| r.macs(g)).sum::<usize>()
    }

    fn context(&self, spec: &SceneSpec) -> Context<T> {
        let k = spec.objects.len();
        let mut features = vec![T::zero(); TOKEN_FEATURES * k];
        for (j, o) in spec.objects.iter().enumerate() {
            for (f, v) in token_features(o).iter().enumerate() {
                features[f * k + j] = T::from_f64(*v as f64);
            }
        }
        let hidden = self.token_in.forward(&features, k);
        let emb = self.token_out.forward(&silu(&hidden), k);
        let td = self.config.token_dim;
        let tokens = k + 1;
        let mut ctx = vec![T::zero(); td * tokens];
        for d in 0..td {
            ctx[d * tokens..d * tokens + k].copy_from_slice(&emb[d * k..(d + 1) * k]);
            ctx[d * tokens + k] = self.null_token.value[d];
        }
        let mut pos = vec![T::zero(); POSITION_FEATURES * tokens];
        for (j, o) in spec.objects.iter().enumerate() {
            let x = 2.0 * o.cx as f64 / spec.width as f64 - 1.0;
            let y = 2.0 * o.cy as f64 / spec.height as f64 - 1.0;
            for (f, v) in position_encoding(x, y).iter().enumerate() {
                pos[f * tokens + j] = T::from_f64(*v as f64);
            }
        }
        Context { features, hidden, ctx, pos, tokens }
    }

    fn context_backward(&mut self, c: &Context<T>, dctx: &[T]) {
        let td = self.config.token_dim;
        let k = c.tokens - 1;
        let mut demb = vec![T::zero(); td * k];
        for d in 0..td {
            demb[d * k..(d + 1) * k].copy_from_slice(&dctx[d * c.tokens..d * c.tokens + k]);
            self.null_token.grad[d] += dctx[d * c.tokens + k];
        }
        let dh = self.token_out.backward(&demb, &silu(&c.hidden), k);
        self.token_in.backward(&silu_backward(&dh, &c.hidden), &c.features, k);
    }

    fn input(&self, x: &[T]) -> Vec<T> {
        let s = self.config.canvas;
        let mut inp = pixel_unshuffle(x, 1, s, s);
        inp.extend_from_slice(&self.coords);
        inp
    }

    /// Noise prediction for `x` (`canvas²` values) at schedule time `u`.
    fn forward_cached(&self, x: &[T], u: f64, ctx: &Context<T>) -> (Vec<T>, ForwardCache<T>) {
        let g = self.config.grid();
        let hw = g * g;
        let e0: Vec<T> = embed_fraction(u, self.config.time_dim).into_iter().map(T::from_f64).collect();
        let e_pre = self.time_in.forward(&e0, 1);
        let temb = silu(&e_pre);
        let (mut h, c_in) = self.conv_in.forward(&self.input(x), g, g);
        let mask = vec![true; ctx.tokens];
        let mut stages = Vec::with_capacity(self.stages.len());
        for (res, ab) in &self.stages {
            let mut rc = Vec::with_capacity(res.len());
            for r in res {
                let (y, c) = r.forward(&h, hw, g, &temb);
                h = y;
                rc.push(c);
            }
            let (n, c_n) = ab.norm.forward(&h, hw);
            let (out, attn) = ab.attn.forward_positional(&n, hw, &ctx.ctx, ctx.tokens, &mask, &self.pixel_pos, &ctx.pos);
            add_into(&mut h, &out);
            stages.push(StageCache { res: rc, c_n, attn });
        }
        let mut tail = Vec::with_capacity(self.tail.len());
        for r in &self.tail {
            let (y, c) = r.forward(&h, hw, g, &temb);
            h = y;
            tail.push(c);
        }
        let (n_out, c_out_norm) = self.out_norm.forward(&h, hw);
        let (y, c_out) = self.conv_out.forward(&silu(&n_out), g, g);
        let s = self.config.canvas;
        let eps = pixel_shuffle(&y, 1, s, s);
        (eps, ForwardCache { e0, e_pre, temb, c_in, stages, tail, c_out_norm, n_out, c_out })
    }

    /// Accumulates parameter gradients for an output gradient `deps`.
    fn backward(&mut self, deps: &[T], c: &ForwardCache<T>, ctx: &Context<T>) {
        let g = self.config.grid();
        let hw = g * g;
        let s = self.config.canvas;
        let dy = pixel_unshuffle(deps, 1, s, s);
        let dn = silu_backward(&self.conv_out.backward(&dy, &c.c_out), &c.n_out);
        let mut dh = self.out_norm.backward(&dn, &c.c_out_norm);
        let mut dtemb = vec![T::zero(); self.config.width];
        for (r, rc) in self.tail.iter_mut().zip(&c.tail).rev() {
            dh = r.backward(&dh, rc, hw, &c.temb, &mut dtemb);
        }
        let mut dctx = vec![T::zero(); ctx.ctx.len()];
        for ((res, ab), sc) in self.stages.iter_mut().zip(&c.stages).rev() {
            let (dn, dc) = ab.attn.backward(&dh, &sc.attn);
            add_into(&mut dctx, &dc);
            add_into(&mut dh, &ab.norm.backward(&dn, &sc.c_n));
            for (r, rc) in res.iter_mut().zip(&sc.res).rev() {
                dh = r.backward(&dh, rc, hw, &c.temb, &mut dtemb);
            }
        }
        self.conv_in.backward(&dh, &c.c_in);
        self.time_in.backward(&silu_backward(&dtemb, &c.e_pre), &c.e0, 1);
        self.context_backward(ctx, &dctx);
    }

    /// Per-layer head-averaged attention `[layer][token, position]` over object tokens only.
    fn object_maps(&self, c: &ForwardCache<T>, objects: usize) -> Vec<Vec<T>> {
        let hw = self.config.grid() * self.config.grid();
        self.stages
            .iter()
            .zip(&c.stages)
            .map(|((_, ab), sc)| {
                let mut m = ab.attn.head_averaged_maps(&sc.attn);
                m.truncate(objects * hw);
                m
            })
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        self.params()
            .into_iter()
            .map(|p| NamedTensor { name: p.name.clone(), values: p.value.iter().map(|&v| Real::to_f64(v) as f32).collect() })
            .collect()
    }
}

impl<T: Real> Module<T> for ToyModel<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        out.extend(self.token_in.params());
        out.extend(self.token_out.params());
        out.push(&self.null_token);
        out.extend(self.time_in.params());
        out.extend(self.conv_in.params());
        for (res, ab) in &self.stages {
            for r in res {
                r.params_into(&mut out);
            }
            out.extend(ab.norm.params());
            out.extend(ab.attn.params());
        }
        for r in &self.tail {
            r.params_into(&mut out);
        }
        out.extend(self.out_norm.params());
        out.extend(self.conv_out.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        out.extend(self.token_in.params_mut());
        out.extend(self.token_out.params_mut());
        out.push(&mut self.null_token);
        out.extend(self.time_in.params_mut());
        out.extend(self.conv_in.params_mut());
        for (res, ab) in &mut self.stages {
            for r in res {
                r.params_mut_into(&mut out);
            }
            out.extend(ab.norm.params_mut());
            out.extend(ab.attn.params_mut());
        }
        for r in &mut self.tail {
            r.params_mut_into(&mut out);
        }
        out.extend(self.out_norm.params_mut());
        out.extend(self.conv_out.params_mut());
        out
    }
}

/// Serializes toy weights with the architecture fingerprint.
pub fn encode_toy(model: &ToyModel) -> Result<Vec<u8>> {
    encode_checkpoint(model.config.fingerprint(), &model.named_tensors())
}

/// Restores weights saved by [`encode_toy`] into a model built from `config`.
pub fn decode_toy(bytes: &[u8], config: &ToyDiffusionConfig) -> Result<ToyModel> {
    let (fingerprint, tensors) = decode_checkpoint(bytes)?;
    if fingerprint != config.fingerprint() {
        return Err(Error::Compatibility(format!(
            "checkpoint fingerprint {fingerprint:016x} does not match config {:016x}",
            config.fingerprint()
        )));
    }
    let mut model = ToyModel::new(config.clone())?;
    let mut params = model.params_mut();
    if params.len() != tensors.len() {
        return Err(Error::Compatibility(format!("{} tensors for {} parameters", tensors.len(), params.len())));
    }
    for (p, t) in params.iter_mut().zip(tensors) {
        if p.name != t.name || p.value.len() != t.values.len() {
            return Err(Error::Compatibility(format!("tensor {} does not fit parameter {}", t.name, p.name)));
        }
        p.value = t.values;
    }
    Ok(model)
}

/// Training weight of a sample at signal level `ab`: the factor by which an
/// ε error is amplified in x̂₀, clamped to `[1, max]`. High-noise steps decide
/// the layout, but their ε error barely depends on the prompt.
pub fn loss_weight(ab: f64, max: f64) -> f64 {
    ((1.0 - ab) / ab).clamp(1.0, max)
}

/// Unweighted noise-prediction loss per training iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToyTrainReport {
    pub losses: Vec<f64>,
}

impl ToyTrainReport {
    /// Mean loss over the first and last `window` iterations.
    pub fn loss_trend(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.losses.len());
        if w == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..])))
    }
}

/// Trains the denoiser to predict the noise added to rendered scenes.
pub fn toy_train(config: &ToyDiffusionConfig, scenes: &[SceneSpec]) -> Result<(ToyModel, ToyTrainReport)> {
    config.validate()?;
    if scenes.is_empty() {
        bail!(Argument, "training set is empty");
    }
    for s in scenes {
        s.validate()?;
        if s.height != config.canvas || s.width != config.canvas {
            bail!(Argument, "scene canvas {}x{} does not match model canvas {}", s.height, s.width, config.canvas);
        }
    }
    let mut model = ToyModel::<f32>::new(config.clone())?;
    let images: Vec<Vec<f32>> = scenes.iter().map(|s| s.render().data.iter().map(|v| 2.0 * v - 1.0).collect()).collect();
    let mut rng = Rng::new(derive_seed(config.seed, 0x7a1));
    let mut opt = Adam::new(config.learning_rate);
    let mut report = ToyTrainReport { losses: Vec::with_capacity(config.train_iterations) };
    let pixels = config.canvas * config.canvas;
    for iteration in 0..config.train_iterations {
        let mut batch_loss = 0.0;
        for _ in 0..config.batch_size {
            let i = rng.below(scenes.len());
            let u = 1.0 - rng.uniform();
            let ab = alpha_bar(u);
            let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let noise: Vec<f32> = (0..pixels).map(|_| rng.normal() as f32).collect();
            let x: Vec<f32> = images[i].iter().zip(&noise).map(|(&x0, &e)| sa * x0 + sn * e).collect();
            let ctx = model.context(&scenes[i]);
            let (eps, cache) = model.forward_cached(&x, u, &ctx);
            let scale = (2.0 * loss_weight(ab, config.max_loss_weight) / pixels as f64) as f32;
            let mut loss = 0.0;
            let deps: Vec<f32> = eps
                .iter()
                .zip(&noise)
                .map(|(&p, &e)| {
                    let d = p - e;
                    loss += (d * d) as f64;
                    scale * d
                })
                .collect();
            model.backward(&deps, &cache, &ctx);
            batch_loss += loss / pixels as f64;
        }
        let loss = batch_loss / config.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Training { iteration, reason: String::from("noise-prediction loss is not finite") });
        }
        report.losses.push(loss);
        opt.step(&mut model.params_mut(), 1.0 / config.batch_size as f64);
    }
    Ok((model, report))
}

/// Output of one (possibly truncated) sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRun {
    pub stacks: Vec<AttentionStack>,
    /// Predicted clean image x̂₀ at each capture step.
    pub previews: Vec<Image>,
    /// Present when all `T` steps ran.
    pub image: Option<Image>,
    pub steps_run: u32,
}

fn to_image(x: &[f32], canvas: usize) -> Result<Image> {
    Image::gray(canvas, canvas, x.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect())
}

fn check_steps(total: u32, steps: &[u32]) -> Result<()> {
    if total < 2 {
        bail!(Argument, "need at least 2 sampling steps");
    }
    if let Some(s) = steps.iter().find(|&&s| s < 1 || s > total) {
        bail!(Argument, "capture step {s} outside 1..={total}");
    }
    Ok(())
}

/// Runs the first `stop_after` of `total` DDIM steps (all of them when
/// `None`), capturing attention at `capture_steps`.
pub fn toy_run(
    model: &ToyModel,
    spec: &SceneSpec,
    seed: u64,
    total: u32,
    capture_steps: &[u32],
    stop_after: Option<u32>,
) -> Result<ToyRun> {
    check_steps(total, capture_steps)?;
    spec.validate()?;
    let cfg = &model.config;
    if spec.height != cfg.canvas || spec.width != cfg.canvas {
        bail!(Argument, "scene canvas {}x{} does not match model canvas {}", spec.height, spec.width, cfg.canvas);
    }
    let objects = spec.objects.len();
    if objects > DEFAULT_TOKEN_SLOTS {
        bail!(Argument, "{objects} objects exceed {DEFAULT_TOKEN_SLOTS} token slots");
    }
    let last = stop_after.unwrap_or(total);
    if last > total {
        bail!(Argument, "cannot stop after step {last} of {total}");
    }
    if let Some(s) = capture_steps.iter().find(|&&s| s > last) {
        bail!(Argument, "capture step {s} lies beyond the {last} steps run");
    }
    let g = cfg.grid();
    let hw = g * g;
    let shape = StackShape::new(cfg.attention_layers, DEFAULT_TOKEN_SLOTS, g, g);
    let prompt_id = spec.prompt_id();
    let ctx = model.context(spec);
    let mut rng = Rng::new(seed);
    let pixels = cfg.canvas * cfg.canvas;
    let mut x: Vec<f32> = (0..pixels).map(|_| rng.normal() as f32).collect();
    let mut x0 = vec![0.0f32; pixels];
    let mut stacks = Vec::with_capacity(capture_steps.len());
    let mut previews = Vec::with_capacity(capture_steps.len());
    for i in 1..=last {
        let u = step_time(i, total);
        let (eps, cache) = model.forward_cached(&x, u, &ctx);
        if capture_steps.contains(&i) {
            let mut maps = vec![0.0f32; shape.len().unwrap()];
            for (b, layer) in model.object_maps(&cache, objects).iter().enumerate() {
                maps[b * DEFAULT_TOKEN_SLOTS * hw..][..objects * hw].copy_from_slice(layer);
            }
            let meta = StackMeta {
                prompt_id: prompt_id.clone(),
                seed,
                step: i,
                total_steps: total,
                block_ids: (0..cfg.attention_layers as u32).collect(),
                token_mask: (0..DEFAULT_TOKEN_SLOTS).map(|t| t < objects).collect(),
                normalized: false,
            };
            stacks.push(AttentionStack::new(meta, shape, maps)?.normalize()?);
        }
        let ab = alpha_bar(u);
        let ab_next = if i == total { 1.0 } else { alpha_bar(step_time(i + 1, total)) };
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for ((p, &xt), &e) in x0.iter_mut().zip(&x).zip(&eps) {
            *p = (((xt as f64 - sn * e as f64) / sa).clamp(-1.0, 1.0)) as f32;
        }
        if capture_steps.contains(&i) {
            previews.push(to_image(&x0, cfg.canvas)?);
        }
        if i == total {
            break;
        }
        let sigma = cfg.eta * ((1.0 - ab_next) / (1.0 - ab) * (1.0 - ab / ab_next)).max(0.0).sqrt();
        let dir = (1.0 - ab_next - sigma * sigma).max(0.0).sqrt();
        // ε is re-derived from the clipped x̂₀ so the update stays consistent with it
        for (xt, &p) in x.iter_mut().zip(&x0) {
            let e_hat = (*xt as f64 - sa * p as f64) / sn;
            let z = if sigma > 0.0 { rng.normal() } else { 0.0 };
            *xt = (ab_next.sqrt() * p as f64 + dir * e_hat + sigma * z) as f32;
        }
    }
    let image = if last == total {
        Some(to_image(&x0, cfg.canvas)?)
    } else {
        None
    };
    Ok(ToyRun { stacks, previews, image, steps_run: last })
}

/// Full sampling run: final image, programmatic label and one stack per capture step.
pub fn toy_sample(
    model: &ToyModel,
    spec: &SceneSpec,
    seed: u64,
    total: u32,
    capture_steps: &[u32],
) -> Result<TrajectoryRecord> {
    let run = toy_run(model, spec, seed, total, capture_steps, None)?;
    let image = run.image.expect("full run yields an image");
    let label = score_image(&image, spec)?;
    Ok(TrajectoryRecord {
        prompt_id: spec.prompt_id(),
        prompt: spec.prompt(),
        seed,
        schedule: Schedule { total_steps: total, capture_step: capture_steps.iter().copied().min().unwrap_or(0) },
        stacks: run.stacks,
        final_image: Some(image),
        labels: vec![label],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testbed::scene::random_scene;

    fn small_config() -> ToyDiffusionConfig {
        ToyDiffusionConfig {
            canvas: 16,
            width: 8,
            attention_dim: 8,
            token_dim: 8,
            time_dim: 8,
            groups: 2,
            train_iterations: 0,
            ..ToyDiffusionConfig::default()
        }
    }

    fn scenes(n: usize, canvas: usize) -> Vec<SceneSpec> {
        let mut rng = Rng::new(11);
        (0..n).map(|_| random_scene(&mut rng, canvas, canvas, 2)).collect()
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(alpha_bar(0.0), 1.0);
        assert_eq!(alpha_bar(1.0), MIN_ALPHA_BAR);
        assert!((0..100).all(|i| alpha_bar(i as f64 / 100.0) > alpha_bar((i + 1) as f64 / 100.0)));
        assert_eq!(step_time(1, 25), 1.0);
        assert_eq!(step_time(25, 25), 1.0 / 25.0);
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = small_config();
        let mut model = ToyModel::<f64>::new(cfg.clone()).unwrap();
        let mut rng = Rng::new(5);
        for p in model.params_mut() {
            for v in &mut p.value {
                *v += 0.1 * rng.normal();
            }
        }
        let spec = &scenes(1, 16)[0];
        let x: Vec<f64> = (0..256).map(|_| rng.normal()).collect();
        let target: Vec<f64> = (0..256).map(|_| rng.normal()).collect();
        let u = 0.37;
        let loss = |m: &ToyModel<f64>| {
            let ctx = m.context(spec);
            let (eps, _) = m.forward_cached(&x, u, &ctx);
            eps.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let ctx = model.context(spec);
        let (eps, cache) = model.forward_cached(&x, u, &ctx);
        let deps: Vec<f64> = eps.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
        model.zero_grad();
        model.backward(&deps, &cache, &ctx);
        let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
        let eps_fd = 1e-5;
        for pi in 0..analytic.len() {
            // a few coordinates per tensor keep the test fast
            let len = analytic[pi].len();
            for vi in [0, len / 2, len - 1] {
                let orig = model.params()[pi].value[vi];
                model.params_mut()[pi].value[vi] = orig + eps_fd;
                let lp = loss(&model);
                model.params_mut()[pi].value[vi] = orig - eps_fd;
                let lm = loss(&model);
                model.params_mut()[pi].value[vi] = orig;
                let num = (lp - lm) / (2.0 * eps_fd);
                let a = analytic[pi][vi];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                // key biases get exactly zero gradient (softmax shift invariance)
                assert!(rel < 1e-4 || (a - num).abs() < 1e-6, "{} [{vi}]: analytic {a} numeric {num}", model.params()[pi].name);
            }
        }
    }

    #[test]
    fn capture_steps_select_stacks() {
        let model = ToyModel::new(small_config()).unwrap();
        let spec = &scenes(1, 16)[0];
        let r = toy_sample(&model, spec, 3, 25, &[5]).unwrap();
        assert_eq!(r.stacks.len(), 1);
        assert_eq!(r.stacks[0].step(), 5);
        assert_eq!(r.stacks[0].shape(), StackShape::new(2, DEFAULT_TOKEN_SLOTS, 8, 8));
        r.validate().unwrap();
        let r = toy_sample(&model, spec, 3, 25, &[]).unwrap();
        assert!(r.stacks.is_empty() && r.final_image.is_some());
        let r = toy_sample(&model, spec, 3, 25, &[1, 5, 10, 15]).unwrap();
        assert_eq!(r.stacks.iter().map(|s| s.step()).collect::<Vec<_>>(), vec![1, 5, 10, 15]);
        assert!(r.stacks.iter().all(|s| s.real_tokens() == spec.objects.len() && s.is_normalized()));
        assert!(matches!(toy_sample(&model, spec, 3, 25, &[0]), Err(Error::Argument(_))));
        assert!(matches!(toy_sample(&model, spec, 3, 25, &[26]), Err(Error::Argument(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_partial_runs_are_prefixes() {
        let cfg = ToyDiffusionConfig { eta: 1.0, ..small_config() };
        let model = ToyModel::new(cfg).unwrap();
        let spec = &scenes(1, 16)[0];
        let a = toy_sample(&model, spec, 9, 25, &[5]).unwrap();
        let b = toy_sample(&model, spec, 9, 25, &[5]).unwrap();
        assert_eq!(a, b);
        let p = toy_run(&model, spec, 9, 25, &[5], Some(5)).unwrap();
        assert_eq!(p.stacks, a.stacks);
        assert!(p.image.is_none());
        assert_ne!(a.final_image, toy_sample(&model, spec, 10, 25, &[5]).unwrap().final_image);
        assert!(toy_run(&model, spec, 9, 25, &[6], Some(5)).is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let cfg = ToyDiffusionConfig { train_iterations: 60, batch_size: 4, ..small_config() };
        let data = scenes(8, 16);
        let (model, report) = toy_train(&cfg, &data).unwrap();
        let (first, last) = report.loss_trend(10).unwrap();
        assert!(last < first, "{first} -> {last}");
        let (_, again) = toy_train(&cfg, &data).unwrap();
        assert_eq!(report, again);
        let bytes = encode_toy(&model).unwrap();
        let restored = decode_toy(&bytes, &cfg).unwrap();
        let spec = &data[0];
        assert_eq!(toy_sample(&model, spec, 1, 10, &[2]).unwrap(), toy_sample(&restored, spec, 1, 10, &[2]).unwrap());
        let other = ToyDiffusionConfig { width: 16, ..cfg };
        assert!(matches!(decode_toy(&bytes, &other), Err(Error::Compatibility(_))));
    }

    #[test]
    fn untrained_model_scores_near_blank() {
        let model = ToyModel::new(ToyDiffusionConfig::default()).unwrap();
        let data = scenes(6, 32);
        let mean = data.iter().enumerate().map(|(i, s)| toy_sample(&model, s, i as u64, 25, &[]).unwrap().labels[0].value).sum::<f64>()
            / data.len() as f64;
        assert!(mean < 0.15, "{mean}");
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        assert!(ToyModel::<f32>::new(ToyDiffusionConfig { total_steps: 1, ..small_config() }).is_err());
        assert!(ToyModel::<f32>::new(ToyDiffusionConfig { width: 0, ..small_config() }).is_err());
        assert!(toy_train(&small_config(), &[]).is_err());
        assert!(toy_train(&small_config(), &scenes(1, 32)).is_err());
    }
}
