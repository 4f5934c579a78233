//! Domain types shared by every stage of the pipeline.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{bail, Error, Result};

/// Token-slot count used when nothing else is configured.
pub const DEFAULT_TOKEN_SLOTS: usize = 16;

/// Tolerance on the per-slice sum of a normalized stack.
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// Dimensions of an attention stack: `[n_blocks, n_tokens, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StackShape {
    pub n_blocks: usize,
    pub n_tokens: usize,
    pub height: usize,
    pub width: usize,
}

impl StackShape {
    pub const fn new(n_blocks: usize, n_tokens: usize, height: usize, width: usize) -> Self {
        Self { n_blocks, n_tokens, height, width }
    }

    pub const fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Total number of map values, or `None` on overflow.
    pub fn len(&self) -> Option<usize> {
        self.n_blocks
            .checked_mul(self.n_tokens)?
            .checked_mul(self.height)?
            .checked_mul(self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }
}

impl fmt::Display for StackShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n_blocks, self.n_tokens, self.height, self.width)
    }
}

/// Metadata that travels with a stack but is not part of its binary payload.
#[derive(Debug, Clone, PartialEq)]
pub struct StackMeta {
    pub prompt_id: String,
    pub seed: u64,
    /// 1-based denoising step; 1 is the noisiest.
    pub step: u32,
    pub total_steps: u32,
    pub block_ids: Vec<u32>,
    /// `true` for a real prompt token, `false` for padding.
    pub token_mask: Vec<bool>,
    pub normalized: bool,
}

impl StackMeta {
    /// Metadata for a payload of unknown provenance: every slot real, not normalized.
    pub fn anonymous(shape: StackShape) -> Self {
        Self {
            prompt_id: String::new(),
            seed: 0,
            step: 1,
            total_steps: 1,
            block_ids: (0..shape.n_blocks as u32).collect(),
            token_mask: alloc::vec![true; shape.n_tokens],
            normalized: false,
        }
    }
}

/// Early-step cross-attention maps of one generation, indexed
/// `[block, token slot, row, column]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    meta: StackMeta,
    shape: StackShape,
    maps: Vec<f32>,
}

impl AttentionStack {
    pub fn new(meta: StackMeta, shape: StackShape, maps: Vec<f32>) -> Result<Self> {
        let stack = Self { meta, shape, maps };
        stack.validate()?;
        Ok(stack)
    }

    /// Checks every structural and numeric invariant.
    pub fn validate(&self) -> Result<()> {
        let StackShape { n_blocks, n_tokens, height, width } = self.shape;
        if n_blocks == 0 || n_tokens == 0 || height == 0 || width == 0 {
            bail!(Shape, "stack dimensions must be positive, got {}", self.shape);
        }
        let len = self
            .shape
            .len()
            .ok_or_else(|| Error::Shape(alloc::format!("stack {} overflows", self.shape)))?;
        if self.maps.len() != len {
            bail!(Shape, "payload has {} values, shape {} needs {len}", self.maps.len(), self.shape);
        }
        let meta = &self.meta;
        if meta.step < 1 || meta.step > meta.total_steps {
            bail!(Domain, "step {} outside 1..={}", meta.step, meta.total_steps);
        }
        if meta.block_ids.len() != n_blocks {
            bail!(Shape, "{} block ids for {n_blocks} blocks", meta.block_ids.len());
        }
        if meta.block_ids.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Domain, "block ids must be strictly increasing");
        }
        if meta.token_mask.len() != n_tokens {
            bail!(Shape, "token mask has {} entries for {n_tokens} slots", meta.token_mask.len());
        }
        if let Some(bad) = self.maps.iter().find(|v| !v.is_finite() || **v < 0.0) {
            bail!(Domain, "map value {bad} is negative or non-finite");
        }
        if meta.normalized {
            for b in 0..n_blocks {
                for t in 0..n_tokens {
                    let slice = self.slice(b, t);
                    if meta.token_mask[t] {
                        let sum: f64 = slice.iter().map(|&v| v as f64).sum();
                        if (sum - 1.0).abs() > NORMALIZATION_TOL {
                            bail!(Domain, "normalized slice ({b}, {t}) sums to {sum}");
                        }
                    } else if slice.iter().any(|&v| v != 0.0) {
                        bail!(Domain, "padded slice ({b}, {t}) is not zero");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> &StackMeta {
        &self.meta
    }

    pub fn shape(&self) -> StackShape {
        self.shape
    }

    pub fn maps(&self) -> &[f32] {
        &self.maps
    }

    pub fn prompt_id(&self) -> &str {
        &self.meta.prompt_id
    }

    pub fn seed(&self) -> u64 {
        self.meta.seed
    }

    pub fn step(&self) -> u32 {
        self.meta.step
    }

    pub fn total_steps(&self) -> u32 {
        self.meta.total_steps
    }

    pub fn token_mask(&self) -> &[bool] {
        &self.meta.token_mask
    }

    pub fn is_normalized(&self) -> bool {
        self.meta.normalized
    }

    pub fn real_tokens(&self) -> usize {
        self.meta.token_mask.iter().filter(|m| **m).count()
    }

    /// The `height × width` map of one (block, token) pair, row-major.
    pub fn slice(&self, block: usize, token: usize) -> &[f32] {
        let cells = self.shape.cells();
        let start = (block * self.shape.n_tokens + token) * cells;
        &self.maps[start..start + cells]
    }

    pub fn into_parts(self) -> (StackMeta, StackShape, Vec<f32>) {
        (self.meta, self.shape, self.maps)
    }

    /// Replaces the metadata, re-validating the result.
    pub fn with_meta(self, meta: StackMeta) -> Result<Self> {
        Self::new(meta, self.shape, self.maps)
    }

    /// Turns every real-token slice into a spatial distribution.
    ///
    /// All-zero slices become uniform; padded slices are zeroed.
    pub fn normalize(&self) -> Result<Self> {
        let cells = self.shape.cells();
        let mut maps = self.maps.clone();
        for (idx, slice) in maps.chunks_exact_mut(cells).enumerate() {
            let token = idx % self.shape.n_tokens;
            if !self.meta.token_mask[token] {
                slice.fill(0.0);
                continue;
            }
            normalize_slice(slice)?;
        }
        let mut meta = self.meta.clone();
        meta.normalized = true;
        Self::new(meta, self.shape, maps)
    }
}

/// Normalizes one map in place to sum to one. An all-zero map becomes uniform.
pub fn normalize_slice(slice: &mut [f32]) -> Result<()> {
    if let Some(bad) = slice.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        bail!(Domain, "cannot normalize map containing {bad}");
    }
    let sum: f64 = slice.iter().map(|&v| v as f64).sum();
    if sum <= 0.0 {
        let u = 1.0 / slice.len() as f32;
        slice.fill(u);
    } else {
        for v in slice.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
    Ok(())
}

/// Where a quality label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    SyntheticKnown,
    Programmatic,
    External,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::SyntheticKnown => "synthetic-known",
            Provenance::Programmatic => "programmatic",
            Provenance::External => "external",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic-known" => Ok(Provenance::SyntheticKnown),
            "programmatic" => Ok(Provenance::Programmatic),
            "external" => Ok(Provenance::External),
            other => bail!(Format, "unknown provenance {other:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityLabel {
    pub metric_name: String,
    pub value: f64,
    pub provenance: Provenance,
}

impl QualityLabel {
    pub fn new(metric_name: impl Into<String>, value: f64, provenance: Provenance) -> Result<Self> {
        let metric_name = metric_name.into();
        if metric_name.is_empty() {
            bail!(Argument, "metric name must be nonempty");
        }
        if !value.is_finite() {
            bail!(Domain, "label value {value} is not finite");
        }
        Ok(Self { metric_name, value, provenance })
    }
}

/// Train/test membership of a dataset record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A grayscale or multi-channel image with values in `[0, 1]`, stored
/// `[channel, row, column]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            bail!(Shape, "image data has {} values for {channels}x{height}x{width}", data.len());
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(Domain, "image value {bad} outside [0, 1]");
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(1, height, width, data)
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self { channels: 1, height, width, data: alloc::vec![0.0; height * width] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub tokens: Vec<String>,
}

/// Sampling schedule: total steps `T` and the capture step `T₀`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub total_steps: u32,
    pub capture_step: u32,
}

/// One (prompt, seed) generation with its captured stacks and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub prompt_id: String,
    pub prompt: Prompt,
    pub seed: u64,
    pub schedule: Schedule,
    pub stacks: Vec<AttentionStack>,
    pub final_image: Option<Image>,
    pub labels: Vec<QualityLabel>,
}

impl TrajectoryRecord {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.capture_step > self.schedule.total_steps {
            bail!(
                Domain,
                "capture step {} exceeds total steps {}",
                self.schedule.capture_step,
                self.schedule.total_steps
            );
        }
        for stack in &self.stacks {
            if stack.prompt_id() != self.prompt_id || stack.seed() != self.seed {
                bail!(
                    Domain,
                    "stack ({}, {}) does not belong to record ({}, {})",
                    stack.prompt_id(),
                    stack.seed(),
                    self.prompt_id,
                    self.seed
                );
            }
            stack.validate()?;
        }
        if let Some(img) = &self.final_image {
            if img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                bail!(Domain, "final image has values outside [0, 1]");
            }
        }
        for label in &self.labels {
            if label.metric_name.is_empty() || !label.value.is_finite() {
                bail!(Domain, "invalid label {label:?}");
            }
        }
        Ok(())
    }

    pub fn label(&self, metric: &str) -> Option<f64> {
        self.labels.iter().find(|l| l.metric_name == metric).map(|l| l.value)
    }

    pub fn stack_at(&self, step: u32) -> Option<&AttentionStack> {
        self.stacks.iter().find(|s| s.step() == step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn stack_1x1x2x2(values: [f32; 4]) -> AttentionStack {
        let shape = StackShape::new(1, 1, 2, 2);
        AttentionStack::new(StackMeta::anonymous(shape), shape, values.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let cases: [([f32; 4], [f32; 4]); 3] = [
            ([1.0, 1.0, 1.0, 1.0], [0.25; 4]),
            ([0.0; 4], [0.25; 4]),
            ([2.0, 1.0, 1.0, 0.0], [0.5, 0.25, 0.25, 0.0]),
        ];
        for (input, expected) in cases {
            let n = stack_1x1x2x2(input).normalize().unwrap();
            assert!(n.is_normalized());
            assert_eq!(n.maps(), &expected);
        }
    }

    #[test]
    fn normalize_rejects_negative() {
        let mut slice = [1.0f32, -0.5, 0.0, 0.0];
        assert!(matches!(normalize_slice(&mut slice), Err(Error::Domain(_))));
    }

    #[test]
    fn normalize_zeroes_padding() {
        let shape = StackShape::new(1, 2, 1, 2);
        let mut meta = StackMeta::anonymous(shape);
        meta.token_mask = vec![true, false];
        let s = AttentionStack::new(meta, shape, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let n = s.normalize().unwrap();
        assert_eq!(n.maps(), &[0.25, 0.75, 0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_invariants() {
        let shape = StackShape::new(2, 1, 1, 1);
        let mut meta = StackMeta::anonymous(shape);
        meta.block_ids = vec![3, 3];
        assert!(AttentionStack::new(meta, shape, vec![0.0, 0.0]).is_err());

        let mut meta = StackMeta::anonymous(shape);
        meta.step = 4;
        meta.total_steps = 3;
        assert!(AttentionStack::new(meta, shape, vec![0.0, 0.0]).is_err());

        let meta = StackMeta::anonymous(shape);
        assert!(AttentionStack::new(meta.clone(), shape, vec![f32::NAN, 0.0]).is_err());
        assert!(AttentionStack::new(meta, shape, vec![0.0]).is_err());
    }

    #[test]
    fn label_requires_name_and_finite_value() {
        assert!(QualityLabel::new("", 1.0, Provenance::External).is_err());
        assert!(QualityLabel::new("x", f64::INFINITY, Provenance::External).is_err());
        assert_eq!(Provenance::parse("programmatic").unwrap(), Provenance::Programmatic);
    }
}
