//! Programmatic image quality: template matching against the prompt's own render.

use crate::data::{Image, Provenance, QualityLabel};
use crate::error::{bail, Result};

use super::scene::SceneSpec;

pub const PROGRAMMATIC_METRIC: &str = "programmatic";

/// Pixels of background kept around each object's matching window.
pub const WINDOW_MARGIN: f32 = 2.0;

/// Normalized cross-correlation; zero when either patch is constant.
fn ncc(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa < 1e-12 || sbb < 1e-12 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Per-object match scores in `[0, 1]`, in prompt order.
pub fn object_scores(image: &Image, prompt: &SceneSpec) -> Result<alloc::vec::Vec<f64>> {
    if image.channels != 1 || image.height != prompt.height || image.width != prompt.width {
        bail!(
            Argument,
            "image {}x{}x{} does not match the {}x{} canvas",
            image.channels,
            image.height,
            image.width,
            prompt.height,
            prompt.width
        );
    }
    if image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        bail!(Domain, "image values must lie in [0, 1]");
    }
    let reference = prompt.render();
    let mut scores = alloc::vec::Vec::with_capacity(prompt.objects.len());
    let mut patch = alloc::vec::Vec::new();
    let mut template = alloc::vec::Vec::new();
    for o in &prompt.objects {
        let (x0, y0, x1, y1) = o.window(WINDOW_MARGIN, prompt.height, prompt.width);
        patch.clear();
        template.clear();
        for y in y0..y1 {
            let row = y * prompt.width;
            patch.extend_from_slice(&image.data[row + x0..row + x1]);
            template.extend_from_slice(&reference.data[row + x0..row + x1]);
        }
        scores.push(ncc(&patch, &template).clamp(0.0, 1.0));
    }
    Ok(scores)
}

/// Mean per-object template match of `image` against `prompt`.
pub fn score_image(image: &Image, prompt: &SceneSpec) -> Result<QualityLabel> {
    let scores = object_scores(image, prompt)?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    QualityLabel::new(PROGRAMMATIC_METRIC, mean, Provenance::Programmatic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testbed::scene::{SceneObject, Shape};
    use alloc::vec;

    fn two_objects() -> SceneSpec {
        SceneSpec::new(
            32,
            32,
            vec![
                SceneObject { shape: Shape::Circle, level: 3, cx: 8.0, cy: 8.0, radius: 5.0 },
                SceneObject { shape: Shape::Cross, level: 1, cx: 22.0, cy: 22.0, radius: 6.0 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn self_match_is_one() {
        let spec = two_objects();
        let s = score_image(&spec.render(), &spec).unwrap();
        assert!((s.value - 1.0).abs() < 1e-9);
        assert_eq!(s.metric_name, PROGRAMMATIC_METRIC);
    }

    #[test]
    fn blank_scores_zero() {
        let spec = two_objects();
        assert!(score_image(&Image::blank(32, 32), &spec).unwrap().value.abs() < 0.05);
    }

    #[test]
    fn missing_object_scores_half() {
        let spec = two_objects();
        let only_first = SceneSpec::new(32, 32, vec![spec.objects[0]]).unwrap();
        let s = score_image(&only_first.render(), &spec).unwrap().value;
        assert!((s - 0.5).abs() < 0.05, "{s}");
    }

    #[test]
    fn order_does_not_matter() {
        let spec = two_objects();
        let mut rev = spec.clone();
        rev.objects.reverse();
        let img = only_noise(&spec);
        let a = score_image(&img, &spec).unwrap().value;
        let b = score_image(&img, &rev).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    fn only_noise(spec: &SceneSpec) -> Image {
        let mut rng = crate::rng::Rng::new(1);
        let mut img = spec.render();
        for v in &mut img.data {
            *v = (*v + 0.3 * rng.normal() as f32).clamp(0.0, 1.0);
        }
        img
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(score_image(&Image::blank(16, 32), &two_objects()).is_err());
    }
}
