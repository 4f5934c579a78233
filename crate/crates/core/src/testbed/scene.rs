//! Scene prompts over a fixed vocabulary of shapes and gray levels.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::data::{Image, Prompt};
use crate::error::{bail, Result};
use crate::format::fnv1a64;
use crate::rng::Rng;

pub const INTENSITIES: [f32; 4] = [0.4, 0.6, 0.8, 1.0];
pub const MAX_OBJECTS: usize = 4;
pub const DEFAULT_CANVAS: usize = 32;
/// Radii drawn by [`random_scene`].
pub const RADII: [f32; 3] = [4.0, 5.0, 6.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn parse(s: &str) -> Result<Self> {
        match Self::ALL.iter().find(|sh| sh.name() == s) {
            Some(sh) => Ok(*sh),
            None => bail!(Format, "unknown shape {s:?}"),
        }
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of radius `r`.
    /// `dy` grows downward.
    pub fn contains(&self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Triangle => {
                // apex up, inscribed in the circle of radius r
                dy >= -r && dy <= 0.5 * r && dx.abs() <= (dy + r) / 3f32.sqrt()
            }
            Shape::Cross => {
                let arm = 0.3 * r;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    /// Index into [`INTENSITIES`].
    pub level: u8,
    /// Center in pixel coordinates (`x` right, `y` down); pixel `i` spans `[i, i+1)`.
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
}

impl SceneObject {
    pub fn intensity(&self) -> f32 {
        INTENSITIES[self.level as usize]
    }

    /// Token text, e.g. `circle/3@12.0,8.0r5.0`.
    pub fn token(&self) -> String {
        format!("{}/{}@{:.1},{:.1}r{:.1}", self.shape.name(), self.level, self.cx, self.cy, self.radius)
    }

    pub fn parse_token(token: &str) -> Result<Self> {
        let bad = || crate::error::Error::Format(format!("malformed scene token {token:?}"));
        let (shape, rest) = token.split_once('/').ok_or_else(bad)?;
        let (level, rest) = rest.split_once('@').ok_or_else(bad)?;
        let (cx, rest) = rest.split_once(',').ok_or_else(bad)?;
        let (cy, radius) = rest.split_once('r').ok_or_else(bad)?;
        let level: u8 = level.parse().map_err(|_| bad())?;
        if level as usize >= INTENSITIES.len() {
            return Err(bad());
        }
        Ok(Self {
            shape: Shape::parse(shape)?,
            level,
            cx: cx.parse().map_err(|_| bad())?,
            cy: cy.parse().map_err(|_| bad())?,
            radius: radius.parse().map_err(|_| bad())?,
        })
    }

    /// Pixel window `(x0, y0, x1, y1)` (exclusive end) covering the object
    /// plus `margin`, clipped to the canvas.
    pub fn window(&self, margin: f32, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let ext = self.radius + margin;
        let clip = |v: f32, hi: usize| (v.max(0.0) as usize).min(hi);
        (
            clip((self.cx - ext).floor(), width),
            clip((self.cy - ext).floor(), height),
            clip((self.cx + ext).ceil(), width),
            clip((self.cy + ext).ceil(), height),
        )
    }
}

/// A scene prompt: objects placed on a `height × width` canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn new(height: usize, width: usize, objects: Vec<SceneObject>) -> Result<Self> {
        let spec = Self { height, width, objects };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            bail!(Argument, "scene needs 1..={MAX_OBJECTS} objects, got {}", self.objects.len());
        }
        for o in &self.objects {
            if !(o.radius > 0.0)
                || o.cx - o.radius < 0.0
                || o.cy - o.radius < 0.0
                || o.cx + o.radius > self.width as f32
                || o.cy + o.radius > self.height as f32
            {
                bail!(Argument, "object {} does not fit the {}x{} canvas", o.token(), self.height, self.width);
            }
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
                if d < a.radius.max(b.radius) {
                    bail!(Argument, "objects {} and {} are closer than one radius", a.token(), b.token());
                }
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> Vec<String> {
        self.objects.iter().map(SceneObject::token).collect()
    }

    pub fn text(&self) -> String {
        let mut s = format!("{}x{}:", self.height, self.width);
        for (i, t) in self.tokens().iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(t);
        }
        s
    }

    pub fn prompt(&self) -> Prompt {
        Prompt { text: self.text(), tokens: self.tokens() }
    }

    /// Stable identifier derived from the prompt text.
    pub fn prompt_id(&self) -> String {
        format!("p{:016x}", fnv1a64(self.text().as_bytes()))
    }

    /// Parses the output of [`SceneSpec::text`].
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || crate::error::Error::Format(format!("malformed scene text {text:?}"));
        let (dims, objects) = text.split_once(':').ok_or_else(bad)?;
        let (h, w) = dims.split_once('x').ok_or_else(bad)?;
        let objects = objects.split_whitespace().map(SceneObject::parse_token).collect::<Result<Vec<_>>>()?;
        Self::new(h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?, objects)
    }

    /// Procedural render with 4×4 supersampling; later objects paint over
    /// earlier ones.
    pub fn render(&self) -> Image {
        let mut img = Image::blank(self.height, self.width);
        const SS: usize = 4;
        for o in &self.objects {
            let (x0, y0, x1, y1) = o.window(1.0, self.height, self.width);
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut hits = 0;
                    for sy in 0..SS {
                        for sx in 0..SS {
                            let px = x as f32 + (sx as f32 + 0.5) / SS as f32;
                            let py = y as f32 + (sy as f32 + 0.5) / SS as f32;
                            if o.shape.contains(px - o.cx, py - o.cy, o.radius) {
                                hits += 1;
                            }
                        }
                    }
                    if hits > 0 {
                        let cov = hits as f32 / (SS * SS) as f32;
                        let v = &mut img.data[y * self.width + x];
                        *v = *v * (1.0 - cov) + o.intensity() * cov;
                    }
                }
            }
        }
        img
    }
}

/// Draws a random valid scene with `1..=max_objects` non-overlapping objects.
pub fn random_scene(rng: &mut Rng, height: usize, width: usize, max_objects: usize) -> SceneSpec {
    let max_objects = max_objects.clamp(1, MAX_OBJECTS);
    loop {
        let n = 1 + rng.below(max_objects);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        let mut attempts = 0;
        while objects.len() < n && attempts < 200 {
            attempts += 1;
            let radius = RADII[rng.below(RADII.len())];
            let cx = rng.range(radius as f64, width as f64 - radius as f64) as f32;
            let cy = rng.range(radius as f64, height as f64 - radius as f64) as f32;
            // quantize to the token precision so text round-trips exactly
            let (cx, cy) = ((cx * 10.0).round() / 10.0, (cy * 10.0).round() / 10.0);
            let candidate = SceneObject {
                shape: Shape::ALL[rng.below(4)],
                level: rng.below(INTENSITIES.len()) as u8,
                cx,
                cy,
                radius,
            };
            let clear = objects.iter().all(|o| {
                let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
                d >= o.radius + radius
            });
            let inside = cx - radius >= 0.0
                && cy - radius >= 0.0
                && cx + radius <= width as f32
                && cy + radius <= height as f32;
            if clear && inside {
                objects.push(candidate);
            }
        }
        if let Ok(spec) = SceneSpec::new(height, width, objects) {
            return spec;
        }
    }
}

/// Number of scalar features per object token fed to the toy generator.
pub const TOKEN_FEATURES: usize = 4 + 4 + 1;

/// Fixed (non-learned) content features of an object token: shape and level
/// one-hots and the radius. Placement is deliberately absent; the toy model
/// learns where to draw only through the attention's positional keys.
pub fn token_features(o: &SceneObject) -> [f32; TOKEN_FEATURES] {
    let mut f = [0.0f32; TOKEN_FEATURES];
    f[o.shape.index()] = 1.0;
    f[4 + o.level as usize] = 1.0;
    f[8] = o.radius / 8.0;
    f
}

/// Channels of [`position_encoding`].
pub const POSITION_FEATURES: usize = 16;

/// Fourier encoding of a normalized position `(x, y) ∈ [-1, 1]²` at angular
/// frequencies π/2, π, 2π and 4π; the slowest one has no alias on the canvas.
pub fn position_encoding(x: f64, y: f64) -> [f32; POSITION_FEATURES] {
    let mut out = [0.0f32; POSITION_FEATURES];
    let mut k = 0;
    for freq in [0.5, 1.0, 2.0, 4.0] {
        for v in [x, y] {
            out[k] = (PI * freq * v).sin() as f32;
            out[k + 1] = (PI * freq * v).cos() as f32;
            k += 2;
        }
    }
    out
}

/// Channels of [`coordinate_planes`].
pub const COORD_CHANNELS: usize = 3 + 8;

/// Per-cell positional planes on an `h × w` grid: `x`, `y`, `x² + y²` and
/// Fourier features at angular frequencies π and 2π.
pub fn coordinate_planes(h: usize, w: usize) -> Vec<f32> {
    let n = h * w;
    let mut out = alloc::vec![0.0f32; COORD_CHANNELS * n];
    for yi in 0..h {
        for xi in 0..w {
            let x = 2.0 * (xi as f64 + 0.5) / w as f64 - 1.0;
            let y = 2.0 * (yi as f64 + 0.5) / h as f64 - 1.0;
            let p = yi * w + xi;
            out[p] = x as f32;
            out[n + p] = y as f32;
            out[2 * n + p] = (x * x + y * y) as f32;
            let mut k = 3;
            for freq in [1.0, 2.0] {
                for v in [x, y] {
                    out[k * n + p] = (PI * freq * v).sin() as f32;
                    out[(k + 1) * n + p] = (PI * freq * v).cos() as f32;
                    k += 2;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn random_scenes_are_valid_and_round_trip() {
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let s = random_scene(&mut rng, 32, 32, 4);
            s.validate().unwrap();
            assert_eq!(SceneSpec::parse(&s.text()).unwrap(), s);
        }
    }

    #[test]
    fn validation_rejects_bad_scenes() {
        let o = SceneObject { shape: Shape::Circle, level: 0, cx: 10.0, cy: 10.0, radius: 4.0 };
        assert!(SceneSpec::new(32, 32, vec![]).is_err());
        assert!(SceneSpec::new(32, 32, vec![o; 5]).is_err());
        assert!(SceneSpec::new(32, 32, vec![SceneObject { cx: 2.0, ..o }]).is_err());
        assert!(SceneSpec::new(32, 32, vec![o, SceneObject { cx: 12.0, ..o }]).is_err());
        assert!(SceneSpec::new(32, 32, vec![o, SceneObject { cx: 14.0, ..o }]).is_ok());
    }

    #[test]
    fn render_paints_shapes() {
        let o = SceneObject { shape: Shape::Square, level: 3, cx: 16.0, cy: 16.0, radius: 5.0 };
        let img = SceneSpec::new(32, 32, vec![o]).unwrap().render();
        assert_eq!(img.data[16 * 32 + 16], 1.0);
        assert_eq!(img.data[0], 0.0);
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
