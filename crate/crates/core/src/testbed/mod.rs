//! Desk-scale generators with programmatic ground truth.

pub mod adapter;
pub mod scene;
pub mod score;
pub mod synth;
pub mod toy;

pub use scene::{random_scene, SceneObject, SceneSpec, Shape};
pub use score::{score_image, PROGRAMMATIC_METRIC};
pub use synth::{random_synth_record, synth_generate, QualityLaw, SynthConfig, SynthCoupling, SYNTHETIC_METRIC};
