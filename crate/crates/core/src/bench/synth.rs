//! Procedural tracking sequences: a coloured shape drifting over a
//! textured background, optionally among look-alike distractors.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::BBox;
use crate::imaging::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

/// How distractors relate to the target's appearance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorStyle {
    /// Target colour, other shape.
    SameColor,
    /// Target shape, other colour.
    SameShape,
    /// Alternates between the two.
    #[default]
    Mixed,
}

/// Parameters shared by every sequence drawn from a scene family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub frame_width: usize,
    pub frame_height: usize,
    /// Range of the target's initial `sqrt(w·h)` in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Largest `w/h` (and `h/w`) ratio.
    pub max_aspect: f64,
    /// Cap on the per-frame centre displacement in pixels.
    pub max_speed: f64,
    /// Standard deviation of the per-frame velocity change.
    pub accel: f64,
    /// Per-frame multiplicative size jitter.
    pub size_drift: f64,
    pub distractors: usize,
    pub distractor_style: DistractorStyle,
    /// Amplitude of the static per-pixel background texture.
    pub noise: f64,
    /// Amplitude of the smooth background gradient.
    pub gradient: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frame_width: 256,
            frame_height: 256,
            min_size: 24.0,
            max_size: 40.0,
            max_aspect: 1.6,
            max_speed: 4.0,
            accel: 0.8,
            size_drift: 0.01,
            distractors: 0,
            distractor_style: DistractorStyle::Mixed,
            noise: 0.05,
            gradient: 0.15,
        }
    }
}

impl SceneConfig {
    /// Easy scenes: one target, mild texture.
    pub fn easy() -> Self {
        Self::default()
    }

    /// Several look-alike distractors.
    pub fn distractor_heavy() -> Self {
        Self { distractors: 3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, d: String| Err(Error::Config { key: format!("data.{k}"), detail: d });
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad("min_size", format!("need 0 < min_size <= max_size, got {} and {}", self.min_size, self.max_size));
        }
        if self.max_aspect < 1.0 {
            return bad("max_aspect", format!("must be >= 1, got {}", self.max_aspect));
        }
        let largest = self.max_size * self.max_aspect.sqrt() * (1.0 + self.size_drift).powi(4) * 1.25;
        if largest >= self.frame_width.min(self.frame_height) as f64 {
            return Err(Error::invalid(format!(
                "target up to {largest:.1} px does not fit a {}x{} frame",
                self.frame_width, self.frame_height
            )));
        }
        if self.max_speed < 0.0 || self.accel < 0.0 || self.size_drift < 0.0 || self.noise < 0.0 || self.gradient < 0.0 {
            return bad("max_speed", "motion and texture parameters must be >= 0".into());
        }
        Ok(())
    }
}

/// One concrete scene: its seed and the family parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub config: SceneConfig,
}

#[derive(Clone, Debug)]
struct Mover {
    kind: ShapeKind,
    color: [f64; 3],
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
    base_w: f64,
    base_h: f64,
}

const PALETTE: [[f64; 3]; 6] = [
    [0.9, 0.15, 0.1],
    [0.1, 0.75, 0.2],
    [0.15, 0.3, 0.95],
    [0.95, 0.85, 0.1],
    [0.85, 0.2, 0.85],
    [0.1, 0.85, 0.9],
];

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl Mover {
    fn bbox(&self) -> BBox {
        BBox::new(self.cx, self.cy, self.w, self.h)
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / (self.w / 2.0), (y - self.cy) / (self.h / 2.0));
        match self.kind {
            ShapeKind::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng, c: &SceneConfig) {
        self.vx += c.accel * gauss(rng);
        self.vy += c.accel * gauss(rng);
        let speed = self.vx.hypot(self.vy);
        if speed > c.max_speed {
            self.vx *= c.max_speed / speed;
            self.vy *= c.max_speed / speed;
        }
        let (fw, fh) = (c.frame_width as f64, c.frame_height as f64);
        let mut nx = self.cx + self.vx;
        let mut ny = self.cy + self.vy;
        if nx - self.w / 2.0 < 0.0 || nx + self.w / 2.0 > fw {
            self.vx = -self.vx;
            nx = self.cx + self.vx;
        }
        if ny - self.h / 2.0 < 0.0 || ny + self.h / 2.0 > fh {
            self.vy = -self.vy;
            ny = self.cy + self.vy;
        }
        self.cx = nx;
        self.cy = ny;
        // size drifts around its initial value, never past the frame edge
        let drift = |rng: &mut ChaCha8Rng, v: f64, base: f64, room: f64| {
            (v * (1.0 + c.size_drift * gauss(rng))).clamp(base / 1.25, base * 1.25).min(room)
        };
        self.w = drift(rng, self.w, self.base_w, 2.0 * self.cx.min(fw - self.cx));
        self.h = drift(rng, self.h, self.base_h, 2.0 * self.cy.min(fh - self.cy));
    }
}

fn spawn(rng: &mut ChaCha8Rng, c: &SceneConfig, kind: ShapeKind, color: [f64; 3], avoid: Option<(f64, f64)>) -> Mover {
    let side = rng.gen_range(c.min_size..=c.max_size);
    let aspect = rng.gen_range(c.max_aspect.recip().ln()..=c.max_aspect.ln()).exp();
    let (w, h) = (side * aspect.sqrt(), side / aspect.sqrt());
    let (fw, fh) = (c.frame_width as f64, c.frame_height as f64);
    let margin = 1.25;
    let (mut cx, mut cy);
    loop {
        cx = rng.gen_range(w * margin / 2.0..=fw - w * margin / 2.0);
        cy = rng.gen_range(h * margin / 2.0..=fh - h * margin / 2.0);
        match avoid {
            Some((ax, ay)) if (cx - ax).hypot(cy - ay) < side => continue,
            _ => break,
        }
    }
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = rng.gen_range(0.0..=c.max_speed);
    Mover { kind, color, cx, cy, vx: speed * angle.cos(), vy: speed * angle.sin(), w, h, base_w: w, base_h: h }
}

/// Frames and ground-truth boxes of `length` frames; identical for equal
/// scenes.
pub fn generate_sequence(scene: &SyntheticScene, length: usize) -> Result<(Vec<Image>, Vec<BBox>)> {
    let c = &scene.config;
    c.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let (fw, fh) = (c.frame_width, c.frame_height);

    let ci = rng.gen_range(0..PALETTE.len());
    let color = PALETTE[ci];
    let kind = if rng.gen_bool(0.5) { ShapeKind::Rect } else { ShapeKind::Ellipse };
    let base = [rng.gen_range(0.25..0.5), rng.gen_range(0.25..0.5), rng.gen_range(0.25..0.5)];
    let tilt = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let mut background = Image::new(fh, fw);
    for y in 0..fh {
        for x in 0..fw {
            let g = c.gradient * (tilt[0] * (x as f64 / fw as f64 - 0.5) + tilt[1] * (y as f64 / fh as f64 - 0.5));
            let mut px = [0.0; 3];
            for ch in 0..3 {
                let n = if c.noise > 0.0 { c.noise * rng.gen_range(-1.0..1.0) } else { 0.0 };
                px[ch] = (base[ch] + g + n).clamp(0.0, 1.0);
            }
            background.set_pixel(y, x, px);
        }
    }

    let mut target = spawn(&mut rng, c, kind, color, None);
    let mut others: Vec<Mover> = (0..c.distractors)
        .map(|i| {
            let same_color = match c.distractor_style {
                DistractorStyle::SameColor => true,
                DistractorStyle::SameShape => false,
                DistractorStyle::Mixed => i % 2 == 0,
            };
            let (k, col) = if same_color {
                (if kind == ShapeKind::Rect { ShapeKind::Ellipse } else { ShapeKind::Rect }, color)
            } else {
                let other = (ci + 1 + rng.gen_range(0..PALETTE.len() - 1)) % PALETTE.len();
                (kind, PALETTE[other])
            };
            spawn(&mut rng, c, k, col, Some((target.cx, target.cy)))
        })
        .collect();

    let mut frames = Vec::with_capacity(length);
    let mut boxes = Vec::with_capacity(length);
    for t in 0..length {
        if t > 0 {
            target.step(&mut rng, c);
            for d in &mut others {
                d.step(&mut rng, c);
                if d.cx == target.cx && d.cy == target.cy {
                    d.cx = (d.cx + 1.0).min(fw as f64 - d.w / 2.0);
                }
            }
        }
        let mut img = background.clone();
        for m in others.iter().chain(std::iter::once(&target)) {
            paint(&mut img, m);
        }
        frames.push(img);
        boxes.push(target.bbox());
    }
    Ok((frames, boxes))
}

fn paint(img: &mut Image, m: &Mover) {
    let [x0, y0, x1, y1] = m.bbox().corners();
    let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().min(img.height() as f64) as usize);
    let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(img.width() as f64) as usize);
    for y in ys {
        for x in xs.clone() {
            if m.covers(x as f64 + 0.5, y as f64 + 0.5) {
                img.set_pixel(y, x, m.color);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(seed: u64, config: SceneConfig) -> SyntheticScene {
        SyntheticScene { seed, config }
    }

    #[test]
    fn deterministic_per_seed() {
        let s = scene(11, SceneConfig::distractor_heavy());
        let (f1, b1) = generate_sequence(&s, 8).unwrap();
        let (f2, b2) = generate_sequence(&s, 8).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(b1, b2);
        let (f3, _) = generate_sequence(&scene(12, SceneConfig::distractor_heavy()), 8).unwrap();
        assert_ne!(f1, f3);
    }

    #[test]
    fn flat_background_only_target_differs() {
        let c = SceneConfig { noise: 0.0, gradient: 0.0, ..SceneConfig::default() };
        let (frames, boxes) = generate_sequence(&scene(3, c), 5).unwrap();
        for (f, b) in frames.iter().zip(&boxes) {
            let bg = f.pixel(0, 0);
            let [x0, y0, x1, y1] = b.corners();
            for y in 0..f.height() {
                for x in 0..f.width() {
                    if f.pixel(y, x) != bg {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        assert!(px >= x0 && px <= x1 && py >= y0 && py <= y1);
                    }
                }
            }
        }
    }

    #[test]
    fn boxes_inside_and_motion_bounded() {
        for seed in 0..20 {
            let c = SceneConfig { distractors: 2, ..SceneConfig::default() };
            let (_, boxes) = generate_sequence(&scene(seed, c.clone()), 60).unwrap();
            for b in &boxes {
                let [x0, y0, x1, y1] = b.corners();
                assert!(x0 >= -1e-9 && y0 >= -1e-9 && x1 <= c.frame_width as f64 + 1e-9 && y1 <= c.frame_height as f64 + 1e-9);
            }
            for w in boxes.windows(2) {
                assert!(w[0].center_distance(&w[1]) <= c.max_speed + 1e-9);
            }
        }
    }

    #[test]
    fn oversized_targets_rejected() {
        let c = SceneConfig { min_size: 200.0, max_size: 250.0, ..SceneConfig::default() };
        assert!(generate_sequence(&scene(0, c), 3).is_err());
    }
}
