//! Synthetic attention stacks with a known dispersion → quality law.
//!
//! Each token's map mixes a Gaussian blob at the object's placement with a
//! uniform floor, `(1 - δ) · blob + δ · uniform`. The label is
//! `clamp(g(mean δ) + ε, 0, 1)` with `ε ~ N(0, σ_q²)`.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{
    AttentionStack, Provenance, QualityLabel, Schedule, StackMeta, StackShape, TrajectoryRecord, DEFAULT_TOKEN_SLOTS,
};
use crate::error::{bail, Result};
use crate::rng::{derive_seed, Rng};

use super::scene::{random_scene, SceneSpec, DEFAULT_CANVAS, MAX_OBJECTS};

pub const SYNTHETIC_METRIC: &str = "synthetic";

/// Monotone decreasing quality law `g` with `g(0) = 1`, `g(1) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QualityLaw {
    /// `g(x) = 1 - x`
    Linear,
    /// `g(x) = 1 - x^p`, `p > 0`
    Power(f64),
}

impl QualityLaw {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            QualityLaw::Linear => 1.0 - x,
            QualityLaw::Power(p) => 1.0 - x.powf(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCoupling {
    /// Per-token dispersion δ ∈ [0, 1], one per scene object.
    pub dispersion: Vec<f64>,
    pub law: QualityLaw,
    /// Label noise standard deviation σ_q.
    pub sigma_q: f64,
}

impl SynthCoupling {
    pub fn uniform(n_tokens: usize, delta: f64, sigma_q: f64) -> Self {
        Self { dispersion: vec![delta; n_tokens], law: QualityLaw::Linear, sigma_q }
    }

    pub fn mean_dispersion(&self) -> f64 {
        self.dispersion.iter().sum::<f64>() / self.dispersion.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_blocks: usize,
    pub token_slots: usize,
    /// Side length of the square attention grid.
    pub map_size: usize,
    /// Blob standard deviation in grid cells.
    pub blob_sigma: f64,
    pub total_steps: u32,
    pub capture_step: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            token_slots: DEFAULT_TOKEN_SLOTS,
            map_size: 16,
            blob_sigma: 1.5,
            total_steps: 25,
            capture_step: 5,
        }
    }
}

/// A normalized Gaussian blob on an `n × n` grid for a canvas-space center.
pub fn gaussian_blob(cx: f32, cy: f32, canvas_h: usize, canvas_w: usize, n: usize, sigma: f64) -> Vec<f64> {
    let gx = cx as f64 / canvas_w as f64 * n as f64 - 0.5;
    let gy = cy as f64 / canvas_h as f64 * n as f64 - 0.5;
    let mut blob: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            (-((x - gx).powi(2) + (y - gy).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = blob.iter().sum();
    blob.iter_mut().for_each(|v| *v /= s);
    blob
}

/// Generates one labeled synthetic record. Fully determined by `seed`.
pub fn synth_generate(
    spec: &SceneSpec,
    coupling: &SynthCoupling,
    seed: u64,
    config: &SynthConfig,
) -> Result<TrajectoryRecord> {
    spec.validate()?;
    let n_obj = spec.objects.len();
    if coupling.dispersion.len() != n_obj {
        bail!(Argument, "{} dispersion values for {n_obj} objects", coupling.dispersion.len());
    }
    if coupling.dispersion.iter().any(|d| !(0.0..=1.0).contains(d)) {
        bail!(Argument, "dispersion values must lie in [0, 1]");
    }
    if !(coupling.sigma_q >= 0.0) || !coupling.sigma_q.is_finite() {
        bail!(Argument, "σ_q must be finite and nonnegative");
    }
    if n_obj > config.token_slots {
        bail!(Argument, "{n_obj} objects exceed {} token slots", config.token_slots);
    }
    if config.capture_step < 1 || config.capture_step > config.total_steps {
        bail!(Argument, "capture step {} outside 1..={}", config.capture_step, config.total_steps);
    }
    let n = config.map_size;
    let cells = n * n;
    let shape = StackShape::new(config.n_blocks, config.token_slots, n, n);
    let mut maps = vec![0.0f32; shape.len().unwrap()];
    let floor = 1.0 / cells as f64;
    for (t, (o, &delta)) in spec.objects.iter().zip(&coupling.dispersion).enumerate() {
        let blob = gaussian_blob(o.cx, o.cy, spec.height, spec.width, n, config.blob_sigma);
        for b in 0..config.n_blocks {
            let dst = &mut maps[(b * config.token_slots + t) * cells..][..cells];
            for (d, &v) in dst.iter_mut().zip(&blob) {
                *d = ((1.0 - delta) * v + delta * floor) as f32;
            }
        }
    }
    let prompt_id = spec.prompt_id();
    let meta = StackMeta {
        prompt_id: prompt_id.clone(),
        seed,
        step: config.capture_step,
        total_steps: config.total_steps,
        block_ids: (0..config.n_blocks as u32).collect(),
        token_mask: (0..config.token_slots).map(|t| t < n_obj).collect(),
        normalized: false,
    };
    let stack = AttentionStack::new(meta, shape, maps)?.normalize()?;

    let mut rng = Rng::new(seed);
    let noise = if coupling.sigma_q > 0.0 { coupling.sigma_q * rng.normal() } else { 0.0 };
    let value = (coupling.law.eval(coupling.mean_dispersion()) + noise).clamp(0.0, 1.0);
    Ok(TrajectoryRecord {
        prompt_id,
        prompt: spec.prompt(),
        seed,
        schedule: Schedule { total_steps: config.total_steps, capture_step: config.capture_step },
        stacks: vec![stack],
        final_image: None,
        labels: vec![QualityLabel::new(SYNTHETIC_METRIC.to_string(), value, Provenance::SyntheticKnown)?],
    })
}

/// Record `index` of a synthetic dataset: a random scene, a record-level
/// dispersion level drawn uniformly, and per-token jitter of ±`jitter`.
pub fn random_synth_record(
    global_seed: u64,
    index: u64,
    sigma_q: f64,
    jitter: f64,
    config: &SynthConfig,
) -> Result<(TrajectoryRecord, SynthCoupling)> {
    let seed = derive_seed(global_seed, index);
    let mut rng = Rng::new(derive_seed(seed, 0x5ce7e));
    let spec = random_scene(&mut rng, DEFAULT_CANVAS, DEFAULT_CANVAS, MAX_OBJECTS.min(config.token_slots));
    let level = rng.uniform();
    let dispersion = spec
        .objects
        .iter()
        .map(|_| (level + rng.range(-jitter, jitter)).clamp(0.0, 1.0))
        .collect();
    let coupling = SynthCoupling { dispersion, law: QualityLaw::Linear, sigma_q };
    let record = synth_generate(&spec, &coupling, seed, config)?;
    Ok((record, coupling))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testbed::scene::{SceneObject, Shape};

    fn scene() -> SceneSpec {
        SceneSpec::new(
            32,
            32,
            vec![
                SceneObject { shape: Shape::Circle, level: 2, cx: 9.0, cy: 9.0, radius: 5.0 },
                SceneObject { shape: Shape::Triangle, level: 1, cx: 22.0, cy: 20.0, radius: 6.0 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn concentrated_maps_score_one() {
        let cfg = SynthConfig::default();
        let rec = synth_generate(&scene(), &SynthCoupling::uniform(2, 0.0, 0.0), 1, &cfg).unwrap();
        assert_eq!(rec.label(SYNTHETIC_METRIC), Some(1.0));
        let stack = &rec.stacks[0];
        let blob = gaussian_blob(9.0, 9.0, 32, 32, 16, cfg.blob_sigma);
        for (a, b) in stack.slice(0, 0).iter().zip(&blob) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        rec.validate().unwrap();
    }

    #[test]
    fn fully_dispersed_maps_are_uniform() {
        let rec = synth_generate(&scene(), &SynthCoupling::uniform(2, 1.0, 0.0), 1, &SynthConfig::default()).unwrap();
        assert_eq!(rec.label(SYNTHETIC_METRIC), Some(0.0));
        assert!(rec.stacks[0].slice(1, 1).iter().all(|&v| (v - 1.0 / 256.0).abs() < 1e-7));
    }

    #[test]
    fn half_dispersion_mixes_evenly() {
        let cfg = SynthConfig::default();
        let rec = synth_generate(&scene(), &SynthCoupling::uniform(2, 0.5, 0.0), 1, &cfg).unwrap();
        assert_eq!(rec.label(SYNTHETIC_METRIC), Some(0.5));
        let blob = gaussian_blob(22.0, 20.0, 32, 32, 16, cfg.blob_sigma);
        for (a, b) in rec.stacks[0].slice(0, 1).iter().zip(&blob) {
            assert!((*a as f64 - (0.5 * b + 0.5 / 256.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_and_noisy() {
        let cfg = SynthConfig::default();
        let c = SynthCoupling::uniform(2, 0.3, 0.1);
        let a = synth_generate(&scene(), &c, 9, &cfg).unwrap();
        assert_eq!(a, synth_generate(&scene(), &c, 9, &cfg).unwrap());
        assert_ne!(a.labels, synth_generate(&scene(), &c, 10, &cfg).unwrap().labels);
    }

    #[test]
    fn noiseless_labels_reverse_dispersion_order() {
        let cfg = SynthConfig::default();
        let mut pairs: Vec<(f64, f64)> = (0..60)
            .map(|i| {
                let (rec, c) = random_synth_record(3, i, 0.0, 0.1, &cfg).unwrap();
                (c.mean_dispersion(), rec.label(SYNTHETIC_METRIC).unwrap())
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn rejects_bad_couplings() {
        let cfg = SynthConfig::default();
        assert!(synth_generate(&scene(), &SynthCoupling::uniform(1, 0.5, 0.0), 1, &cfg).is_err());
        assert!(synth_generate(&scene(), &SynthCoupling::uniform(2, 1.5, 0.0), 1, &cfg).is_err());
        assert!(synth_generate(&scene(), &SynthCoupling::uniform(2, 0.5, -1.0), 1, &cfg).is_err());
    }
}
