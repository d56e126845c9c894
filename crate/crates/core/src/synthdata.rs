//! Procedural glass-like scenes with class masks and boundary ground truth.
//!
//! Glass regions are rendered as the background texture seen through a tinted,
//! slightly refracting pane, so glass pixels stay correlated with the pixels
//! around them. Optional bright streaks emulate reflections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default total width of the boundary band, in pixels.
pub const DEFAULT_BOUNDARY_THICKNESS: usize = 8;

/// A row-major `H×W` grid of small integers (class ids or binary flags).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Rect,
    Ellipse,
    Polygon,
}

impl std::str::FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rect" => Ok(Self::Rect),
            "ellipse" => Ok(Self::Ellipse),
            "polygon" => Ok(Self::Polygon),
            other => Err(Error::Config(format!(
                "unknown shape family {other:?} (expected rect, ellipse or polygon)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// `(H, W)` in pixels; both must be multiples of 32 and at least 32.
    pub canvas: (usize, usize),
    pub n_objects: usize,
    pub shape_family: ShapeFamily,
    /// How strongly the background shows through glass, in `[0, 1]`.
    pub transparency_alpha: f64,
    pub reflective_streaks: usize,
    pub rng_seed: u64,
    /// Number of classes including background (class 0).
    pub n_classes: usize,
    pub boundary_thickness: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            canvas: (64, 64),
            n_objects: 2,
            shape_family: ShapeFamily::Rect,
            transparency_alpha: 0.6,
            reflective_streaks: 1,
            rng_seed: 0,
            n_classes: 3,
            boundary_thickness: DEFAULT_BOUNDARY_THICKNESS,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        validate_canvas(self.canvas)?;
        if !(0.0..=1.0).contains(&self.transparency_alpha) {
            return Err(Error::Config(format!(
                "transparency_alpha {} outside [0, 1]",
                self.transparency_alpha
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.boundary_thickness == 0 {
            return Err(Error::Config("boundary thickness must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn validate_canvas((h, w): (usize, usize)) -> Result<()> {
    for (axis, v) in [("height", h), ("width", w)] {
        if v < 32 || v % 32 != 0 {
            return Err(Error::Config(format!(
                "canvas {axis} {v} must be at least 32 and divisible by 32"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlassSample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: Grid,
    pub boundary: Grid,
    pub sample_id: String,
}

impl GlassSample {
    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Polygon { pts: Vec<(f64, f64)> },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Rect { y0, x0, y1, x1 } => y >= *y0 && y < *y1 && x >= *x0 && x < *x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y - cy) / ry;
                let dx = (x - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
            Shape::Polygon { pts } => {
                // even-odd ray casting
                let mut inside = false;
                let n = pts.len();
                for i in 0..n {
                    let (yi, xi) = pts[i];
                    let (yj, xj) = pts[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

/// Axis-aligned box `[y0, y1) × [x0, x1)` in whole pixels.
#[derive(Clone, Copy, Debug)]
struct BoxPx {
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
}

impl BoxPx {
    fn separated(&self, o: &BoxPx, gap: usize) -> bool {
        self.y1 + gap <= o.y0 || o.y1 + gap <= self.y0 || self.x1 + gap <= o.x0 || o.x1 + gap <= self.x0
    }
}

fn place_boxes(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize) -> Vec<BoxPx> {
    let mut boxes: Vec<BoxPx> = Vec::with_capacity(n);
    let mut scale = 0.45;
    let mut attempts = 0;
    while boxes.len() < n {
        attempts += 1;
        if attempts % 200 == 0 {
            scale *= 0.8;
        }
        if scale * (h.min(w) as f64) < 6.0 {
            break;
        }
        let bh = ((rng.random_range(0.45..1.0) * scale * h as f64) as usize).max(6);
        let bw = ((rng.random_range(0.45..1.0) * scale * w as f64) as usize).max(6);
        if bh + 4 > h || bw + 4 > w {
            continue;
        }
        let y0 = rng.random_range(2..=h - bh - 2);
        let x0 = rng.random_range(2..=w - bw - 2);
        let b = BoxPx {
            y0,
            x0,
            y1: y0 + bh,
            x1: x0 + bw,
        };
        // gap of 2 keeps objects from touching, even diagonally
        if boxes.iter().all(|o| o.separated(&b, 2)) {
            boxes.push(b);
        }
    }
    boxes
}

fn make_shape(rng: &mut ChaCha8Rng, family: ShapeFamily, b: BoxPx) -> Shape {
    let (y0, x0, y1, x1) = (b.y0 as f64, b.x0 as f64, b.y1 as f64, b.x1 as f64);
    match family {
        ShapeFamily::Rect => Shape::Rect { y0, x0, y1, x1 },
        ShapeFamily::Ellipse => Shape::Ellipse {
            cy: (y0 + y1) / 2.0 - 0.5,
            cx: (x0 + x1) / 2.0 - 0.5,
            ry: (y1 - y0) / 2.0 - 0.25,
            rx: (x1 - x0) / 2.0 - 0.25,
        },
        ShapeFamily::Polygon => {
            // convex polygon inscribed in the box
            let n = rng.random_range(5..=7);
            let (cy, cx) = ((y0 + y1) / 2.0 - 0.5, (x0 + x1) / 2.0 - 0.5);
            let (ry, rx) = ((y1 - y0) / 2.0 - 0.5, (x1 - x0) / 2.0 - 0.5);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let pts = (0..n)
                .map(|i| {
                    let t = phase + i as f64 * std::f64::consts::TAU / n as f64;
                    (cy + ry * t.sin(), cx + rx * t.cos())
                })
                .collect();
            Shape::Polygon { pts }
        }
    }
}

/// Smooth, colored background texture.
fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<[f64; 3]> {
    let mut waves = Vec::new();
    for _ in 0..4 {
        waves.push((
            rng.random_range(0.05..0.35),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
            [
                rng.random_range(0.05..0.2),
                rng.random_range(0.05..0.2),
                rng.random_range(0.05..0.2),
            ],
        ));
    }
    let base = [
        rng.random_range(0.3..0.6),
        rng.random_range(0.3..0.6),
        rng.random_range(0.3..0.6),
    ];
    let mut px = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut c = base;
            for &(freq, dir, phase, amp) in &waves {
                let t = (y as f64 * dir.sin() + x as f64 * dir.cos()) * freq + phase;
                let s = t.sin();
                for k in 0..3 {
                    c[k] += amp[k] * s;
                }
            }
            px.push(c);
        }
    }
    px
}

/// Per-class glass tints (index 0 unused).
fn tint(class: u8) -> [f64; 3] {
    match class % 4 {
        1 => [0.55, 0.85, 1.0],
        2 => [0.75, 1.0, 0.7],
        3 => [1.0, 0.8, 0.6],
        _ => [0.9, 0.9, 0.9],
    }
}

/// Renders one scene. Pure function of `spec`.
pub fn generate_scene(spec: &SceneSpec, sample_id: &str) -> Result<GlassSample> {
    spec.validate()?;
    let (h, w) = spec.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let bg = background(&mut rng, h, w);
    let boxes = place_boxes(&mut rng, h, w, spec.n_objects);
    let mut mask = Grid::zeros(h, w);
    let mut rgb = bg.clone();
    let alpha = spec.transparency_alpha;
    for b in &boxes {
        let shape = make_shape(&mut rng, spec.shape_family, *b);
        let class = rng.random_range(1..spec.n_classes) as u8;
        let t = tint(class);
        // refraction: glass shows the background from a shifted position
        let (sy, sx) = (rng.random_range(-3i64..=3), rng.random_range(-3i64..=3));
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                if !shape.contains(y as f64, x as f64) {
                    continue;
                }
                mask.set(y, x, class);
                let ry = (y as i64 + sy).clamp(0, h as i64 - 1) as usize;
                let rx = (x as i64 + sx).clamp(0, w as i64 - 1) as usize;
                let src = bg[ry * w + rx];
                let mut c = [0.0; 3];
                for k in 0..3 {
                    c[k] = alpha * src[k] + (1.0 - alpha) * t[k] * 0.8;
                }
                rgb[y * w + x] = c;
            }
        }
        // darker frame on the glass rim
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                if mask.at(y, x) != class {
                    continue;
                }
                let rim = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dy, dx)| {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 || mask.at(ny as usize, nx as usize) != class
                });
                if rim {
                    for v in rgb[y * w + x].iter_mut() {
                        *v *= 0.6;
                    }
                }
            }
        }
        for _ in 0..spec.reflective_streaks {
            // a bright diagonal band clipped to the object
            let off = rng.random_range(-(b.x1 as f64 - b.x0 as f64)..(b.x1 as f64 - b.x0 as f64));
            let slope = rng.random_range(0.5..1.5);
            let width = rng.random_range(1.0..2.5);
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    if mask.at(y, x) != class {
                        continue;
                    }
                    let d = (x as f64 - b.x0 as f64) - slope * (y as f64 - b.y0 as f64) - off;
                    if d.abs() < width {
                        for v in rgb[y * w + x].iter_mut() {
                            *v = 0.4 * *v + 0.6;
                        }
                    }
                }
            }
        }
    }
    let mut image = Tensor::zeros(&[3, h, w]);
    for (p, c) in rgb.iter().enumerate() {
        for k in 0..3 {
            image.data_mut()[k * h * w + p] = c[k].clamp(0.0, 1.0) as f32;
        }
    }
    let boundary = mask_to_boundary(&mask, spec.boundary_thickness);
    Ok(GlassSample {
        image,
        mask,
        boundary,
        sample_id: sample_id.to_string(),
    })
}

/// Pixels adjacent (4-neighborhood) to a pixel with a different label.
pub fn transition_pixels(mask: &Grid) -> Grid {
    let (h, w) = (mask.height, mask.width);
    let mut edge = Grid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = mask.at(y, x);
            let differs = (y > 0 && mask.at(y - 1, x) != v)
                || (y + 1 < h && mask.at(y + 1, x) != v)
                || (x > 0 && mask.at(y, x - 1) != v)
                || (x + 1 < w && mask.at(y, x + 1) != v);
            if differs {
                edge.set(y, x, 1);
            }
        }
    }
    edge
}

/// Binary band around label transitions: a pixel is set iff its chebyshev
/// distance to the nearest transition pixel is below `ceil(thickness / 2)`.
pub fn mask_to_boundary(mask: &Grid, thickness: usize) -> Grid {
    let thickness = thickness.max(1);
    let radius = thickness.div_ceil(2) - 1;
    let edge = transition_pixels(mask);
    let (h, w) = (mask.height, mask.width);
    // separable chebyshev dilation: rows, then columns
    let mut rows = Grid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            if (lo..=hi).any(|xx| edge.at(y, xx) != 0) {
                rows.set(y, x, 1);
            }
        }
    }
    let mut out = Grid::zeros(h, w);
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            if (lo..=hi).any(|yy| rows.at(yy, x) != 0) {
                out.set(y, x, 1);
            }
        }
    }
    out
}

/// Per-sample seed derived from a base seed and the sample index.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(base ^ mix(index))
}
