//! Procedural subject renderer for the synthetic domain.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Category, Color, Texture};
use crate::error::{Error, Result};

/// `height × width × 3` image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Side-by-side concatenation; heights must match.
    pub fn hconcat(&self, right: &Image) -> Result<Image> {
        if self.height != right.height {
            return Err(Error::shape("hconcat height mismatch"));
        }
        let width = self.width + right.width;
        let mut data = Vec::with_capacity(width * self.height * 3);
        for y in 0..self.height {
            data.extend_from_slice(&self.data[y * self.width * 3..(y + 1) * self.width * 3]);
            data.extend_from_slice(&right.data[y * right.width * 3..(y + 1) * right.width * 3]);
        }
        Image::new(width, self.height, data)
    }

    /// Box-filter downscale by integer factors.
    pub fn downscale(&self, fx: usize, fy: usize) -> Result<Image> {
        if fx == 0 || fy == 0 || !self.width.is_multiple_of(fx) || !self.height.is_multiple_of(fy) {
            return Err(Error::shape(format!(
                "cannot downscale {}x{} by {fx}x{fy}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / fx, self.height / fy);
        let norm = 1.0 / (fx * fy) as f32;
        let mut out = Image::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for dy in 0..fy {
                    for dx in 0..fx {
                        let p = self.pixel(x * fx + dx, y * fy + dy);
                        (0..3).for_each(|c| acc[c] += p[c]);
                    }
                }
                out.set_pixel(x, y, acc.map(|v| v * norm));
            }
        }
        Ok(out)
    }

    /// Nearest-neighbour resize to `w × h`.
    pub fn resize_nearest(&self, w: usize, h: usize) -> Image {
        let mut out = Image::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let sx = (x * self.width) / w.max(1);
                let sy = (y * self.height) / h.max(1);
                out.set_pixel(x, y, self.pixel(sx.min(self.width - 1), sy.min(self.height - 1)));
            }
        }
        out
    }

    /// Crop `[x0, x0+w) × [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        let mut out = Image::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(x, y, self.pixel(x0 + x, y0 + y));
            }
        }
        out
    }

    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| crate::pgm::unit_to_u8(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
        Image::new(width, height, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    /// 8-bit quantization round trip, matching what a PNG write/read yields.
    pub fn quantized(&self) -> Image {
        Image::from_rgb8(self.width, self.height, &self.to_rgb8()).expect("same extent")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::shape("png buffer"))?;
        buf.save(path.as_ref())?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }

    /// Fraction of pixels whose channels differ by more than `tol` anywhere.
    pub fn pixel_diff_fraction(&self, other: &Image, tol: f32) -> f32 {
        let n = self.width * self.height;
        let differ = (0..n)
            .filter(|&i| (0..3).any(|c| (self.data[i * 3 + c] - other.data[i * 3 + c]).abs() > tol))
            .count();
        differ as f32 / n.max(1) as f32
    }
}

/// Attributes of one synthetic subject. `seed` fixes the identity details
/// (proportions, pattern frequency and angle) that no prompt token names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub category: Category,
    pub color: Color,
    pub texture: Texture,
    pub seed: u64,
}

/// Identity details derived from the subject seed.
#[derive(Debug, Clone, Copy)]
struct Identity {
    aspect: f32,
    pattern_freq: f32,
    pattern_angle: f32,
    variant: f32,
    shade: f32,
}

impl Identity {
    fn of(spec: &SubjectSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
        Self {
            aspect: rng.gen_range(0.8..1.2),
            pattern_freq: rng.gen_range(2.0..3.5),
            pattern_angle: rng.gen_range(0.0..std::f32::consts::PI),
            variant: rng.gen_range(0.0..1.0),
            shade: rng.gen_range(0.45..0.65),
        }
    }
}

/// Where and how large a subject is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    /// Center in pixels.
    pub cx: f32,
    pub cy: f32,
    /// Bounding-box edge in pixels.
    pub size: f32,
    pub flip: bool,
}

/// Is local point `(u, v)` in `[-1, 1]²` (v pointing down) inside the silhouette?
fn inside(category: Category, id: &Identity, u: f32, v: f32) -> bool {
    match category {
        Category::Ball => u * u + v * v <= 1.0,
        Category::Box => {
            let r = 0.7 + 0.25 * id.variant;
            u.abs() <= r && v.abs() <= 0.95
        }
        Category::Cup => {
            let body = (-0.8..=0.9).contains(&v) && u.abs() <= 0.55 - 0.15 * v && u <= 0.6;
            let hu = u - 0.6;
            let hv = v - 0.05;
            let r2 = hu * hu + hv * hv;
            let ring = u > 0.3 && (0.18 * 0.18..=0.38 * 0.38).contains(&r2);
            body || ring
        }
        Category::Hat => {
            let brim_top = 0.35 + 0.15 * id.variant;
            let dome = v <= brim_top && (u / 0.6).powi(2) + ((v - brim_top) / 1.0).powi(2) <= 1.0;
            let brim = u.abs() <= 1.0 && v >= brim_top && v <= brim_top + 0.3;
            dome || brim
        }
        Category::Star => {
            let points = if id.variant < 0.5 { 5.0 } else { 6.0 };
            let r = (u * u + v * v).sqrt();
            let theta = v.atan2(u) + std::f32::consts::FRAC_PI_2;
            let sector = std::f32::consts::TAU / points;
            let t = ((theta.rem_euclid(sector)) / sector - 0.5).abs() * 2.0;
            let inner = 0.45;
            r <= inner + (1.0 - inner) * (1.0 - t)
        }
        Category::Fish => {
            let tail = 0.25 + 0.15 * id.variant;
            let body = ((u + 0.15) / 0.75).powi(2) + (v / 0.5).powi(2) <= 1.0;
            let tail_part = (0.45..=1.0).contains(&u) && v.abs() <= (u - 0.45) * (tail + 0.9);
            body || tail_part
        }
        Category::Tree => {
            let canopy = (-1.0..=0.5).contains(&v) && u.abs() <= (v + 1.0) / 1.5 * (0.8 + 0.15 * id.variant);
            let trunk = u.abs() <= 0.18 && v > 0.5 && v <= 1.0;
            canopy || trunk
        }
        Category::Kite => u.abs() / (0.6 + 0.2 * id.variant) + v.abs() <= 1.0,
    }
}

fn patterned(texture: Texture, id: &Identity, u: f32, v: f32) -> bool {
    match texture {
        Texture::Solid => false,
        Texture::Striped => {
            let (s, c) = id.pattern_angle.sin_cos();
            let t = u * c + v * s;
            (t * id.pattern_freq * std::f32::consts::PI).sin() > 0.0
        }
        Texture::Dotted => {
            let (s, c) = id.pattern_angle.sin_cos();
            let (a, b) = (u * c + v * s, -u * s + v * c);
            let cell = 2.0 / (id.pattern_freq + 1.0);
            let fa = (a / cell).rem_euclid(1.0) - 0.5;
            let fb = (b / cell).rem_euclid(1.0) - 0.5;
            fa * fa + fb * fb <= 0.09
        }
    }
}

/// Supersampling factor per axis.
const SUPERSAMPLE: usize = 3;

/// Draws `spec` onto `canvas` with anti-aliased coverage.
pub fn draw_subject(canvas: &mut Image, spec: &SubjectSpec, placement: &Placement) {
    let id = Identity::of(spec);
    let base = spec.color.rgb();
    let dark = base.map(|v| v * id.shade);
    let half = placement.size * 0.5;
    let (sx, sy) = if id.aspect >= 1.0 {
        (half, half / id.aspect)
    } else {
        (half * id.aspect, half)
    };
    let x0 = ((placement.cx - half).floor().max(0.0)) as usize;
    let y0 = ((placement.cy - half).floor().max(0.0)) as usize;
    let x1 = ((placement.cx + half).ceil() as usize).min(canvas.width);
    let y1 = ((placement.cy + half).ceil() as usize).min(canvas.height);
    let step = 1.0 / SUPERSAMPLE as f32;
    for y in y0..y1 {
        for x in x0..x1 {
            let mut acc = [0.0f32; 3];
            let mut hits = 0usize;
            for j in 0..SUPERSAMPLE {
                for i in 0..SUPERSAMPLE {
                    let px = x as f32 + (i as f32 + 0.5) * step;
                    let py = y as f32 + (j as f32 + 0.5) * step;
                    let mut u = (px - placement.cx) / sx;
                    let v = (py - placement.cy) / sy;
                    if placement.flip {
                        u = -u;
                    }
                    if inside(spec.category, &id, u, v) {
                        hits += 1;
                        let c = if patterned(spec.texture, &id, u, v) { dark } else { base };
                        (0..3).for_each(|k| acc[k] += c[k]);
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let total = (SUPERSAMPLE * SUPERSAMPLE) as f32;
            let cover = hits as f32 / total;
            let bg = canvas.pixel(x, y);
            let mut out = [0.0; 3];
            for k in 0..3 {
                out[k] = acc[k] / total + bg[k] * (1.0 - cover);
            }
            canvas.set_pixel(x, y, out);
        }
    }
}

/// Uniform background of the condition renders.
pub const CONDITION_BACKGROUND: [f32; 3] = [0.82, 0.82, 0.82];

/// Random low-saturation background with a mild vertical gradient.
pub fn random_background(width: usize, height: usize, rng: &mut impl Rng) -> Image {
    let value: f32 = rng.gen_range(0.25..0.9);
    let tint: [f32; 3] = [
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
    ];
    let slope: f32 = rng.gen_range(-0.12..0.12);
    let mut img = Image::filled(width, height, [0.0; 3]);
    for y in 0..height {
        let g = value + slope * (y as f32 / height.max(1) as f32 - 0.5);
        for x in 0..width {
            img.set_pixel(x, y, tint.map(|t| (g + t).clamp(0.0, 1.0)));
        }
    }
    img
}

/// HSV-based palette readout: `None` for low-saturation or dark pixels.
pub fn classify_pixel(rgb: [f32; 3]) -> Option<Color> {
    let max = rgb[0].max(rgb[1]).max(rgb[2]);
    let min = rgb[0].min(rgb[1]).min(rgb[2]);
    if max < 0.2 {
        return None;
    }
    let sat = (max - min) / max;
    if sat < 0.4 {
        return None;
    }
    let hue = hue_degrees(rgb);
    Color::ALL
        .iter()
        .copied()
        .min_by(|a, b| {
            let da = hue_distance(hue, hue_degrees(a.rgb()));
            let db = hue_distance(hue, hue_degrees(b.rgb()));
            da.total_cmp(&db)
        })
}

fn hue_degrees(rgb: [f32; 3]) -> f32 {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= f32::EPSILON {
        return 0.0;
    }
    let h = if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    h.rem_euclid(360.0)
}

fn hue_distance(a: f32, b: f32) -> f32 {
    let d = (a - b).abs();
    d.min(360.0 - d)
}
