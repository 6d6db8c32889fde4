//! Procedural layered stereo scenes with exact left-view disparity.
//!
//! Each layer is a plane `d = dc + gx (w - wc) + gy (h - hc)` over a support
//! (the whole frame, a rectangle or an ellipse) in left-image coordinates,
//! textured in right-image coordinates. The right view shows, per pixel, the
//! nearest layer (largest disparity) projecting there. A left pixel takes the
//! right pixel at `round(w - d)` when that right pixel belongs to the same
//! layer; otherwise it is occluded, marked invalid, and painted with its own
//! layer's texture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objective::{DisparityMap, GroundTruth};
use crate::tensor::{Element, Tensor};

/// 8-bit RGB image, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!("{} bytes for a {height}x{width} RGB image", data.len())));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn pixel(&self, h: usize, w: usize) -> [u8; 3] {
        let i = 3 * (h * self.width + w);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[3, H, W]` with values in `[0, 1]`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::zero(); 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = T::of(px[c] as f64 / 255.0);
            }
        }
        Tensor::new(&[3, self.height, self.width], out).expect("extents match by construction")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    Dots,
    SmoothNoise,
    Stripes,
}

impl TextureKind {
    pub const ALL: [TextureKind; 3] = [TextureKind::Dots, TextureKind::SmoothNoise, TextureKind::Stripes];

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Dots => "dots",
            TextureKind::SmoothNoise => "noise",
            TextureKind::Stripes => "stripes",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Ground truth lies in `[0, max_disp)`.
    pub max_disp: usize,
    /// Background plus `n_layers - 1` foreground shapes.
    pub n_layers: usize,
    /// `None` draws a kind per layer.
    pub texture: Option<TextureKind>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_disp >= self.width {
            return Err(Error::Config(format!("max_disp {} must be below width {}", self.max_disp, self.width)));
        }
        if self.max_disp < 2 || self.height == 0 || self.n_layers == 0 {
            return Err(Error::Config("need max_disp >= 2, a non-empty frame and at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Full,
    /// Inclusive-exclusive pixel bounds `[h0, h1) x [w0, w1)`.
    Rect { h0: f64, h1: f64, w0: f64, w1: f64 },
    Ellipse { hc: f64, wc: f64, rh: f64, rw: f64 },
}

impl Shape {
    fn contains(&self, h: f64, w: f64) -> bool {
        match *self {
            Shape::Full => true,
            Shape::Rect { h0, h1, w0, w1 } => h >= h0 && h < h1 && w >= w0 && w < w1,
            Shape::Ellipse { hc, wc, rh, rw } => {
                let (a, b) = ((h - hc) / rh, (w - wc) / rw);
                a * a + b * b <= 1.0
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub dc: f64,
    pub gx: f64,
    pub gy: f64,
    pub hc: f64,
    pub wc: f64,
}

impl Plane {
    pub fn constant(d: f64) -> Self {
        Plane { dc: d, gx: 0.0, gy: 0.0, hc: 0.0, wc: 0.0 }
    }

    pub fn at(&self, h: f64, w: f64) -> f64 {
        self.dc + self.gx * (w - self.wc) + self.gy * (h - self.hc)
    }

    /// Left column whose pixel lands on right column `x` in row `h`.
    fn preimage(&self, h: f64, x: f64) -> f64 {
        (x + self.dc - self.gx * self.wc + self.gy * (h - self.hc)) / (1.0 - self.gx)
    }

    fn scaled(&self, s: f64) -> Self {
        Plane { dc: self.dc * s, gx: self.gx * s, gy: self.gy * s, ..*self }
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub shape: Shape,
    pub plane: Plane,
    pub kind: TextureKind,
    pub texture_seed: u64,
}

/// Scene description plus the global disparity scale actually applied.
#[derive(Clone, Debug)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub max_disp: usize,
    pub layers: Vec<Layer>,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub seed: u64,
    pub scale: f64,
    pub scene: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: RgbImage,
    pub right: RgbImage,
    pub gt: GroundTruth,
    pub meta: SampleMeta,
}

/// Per-layer texture over right-image columns `[-max_disp, width)`.
struct Texture {
    width: usize,
    offset: usize,
    data: Vec<[u8; 3]>,
}

impl Texture {
    fn render(kind: TextureKind, seed: u64, height: usize, width: usize, offset: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tw = width + offset;
        let colour = |rng: &mut ChaCha8Rng| -> [f64; 3] { [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)] };
        let mut data = Vec::with_capacity(height * tw);
        match kind {
            TextureKind::Dots => {
                let base = colour(&mut rng);
                let density = rng.gen_range(0.3..0.7);
                for _ in 0..height * tw {
                    data.push(if rng.gen_bool(density) { colour(&mut rng) } else { base });
                }
            }
            TextureKind::SmoothNoise => {
                let cell = rng.gen_range(2..6usize);
                let (gh, gw) = (height / cell + 2, tw / cell + 2);
                let grid: Vec<[f64; 3]> = (0..gh * gw).map(|_| colour(&mut rng)).collect();
                for h in 0..height {
                    for x in 0..tw {
                        let (fy, fx) = (h as f64 / cell as f64, x as f64 / cell as f64);
                        let (y0, x0) = (fy as usize, fx as usize);
                        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                        let g = |y: usize, x: usize| grid[y * gw + x];
                        let mut c = [0.0; 3];
                        for (k, v) in c.iter_mut().enumerate() {
                            let top = g(y0, x0)[k] * (1.0 - tx) + g(y0, x0 + 1)[k] * tx;
                            let bot = g(y0 + 1, x0)[k] * (1.0 - tx) + g(y0 + 1, x0 + 1)[k] * tx;
                            *v = top * (1.0 - ty) + bot * ty + rng.gen_range(-12.0..12.0);
                        }
                        data.push(c);
                    }
                }
            }
            TextureKind::Stripes => {
                let (a, b) = (colour(&mut rng), colour(&mut rng));
                let period = rng.gen_range(3.0..9.0);
                // keep a horizontal component so rows are not constant
                let theta: f64 = rng.gen_range(-1.0..1.0);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                for h in 0..height {
                    for x in 0..tw {
                        let u = (x as f64 * theta.cos() + h as f64 * theta.sin()) / period;
                        let t = 0.5 * (1.0 + (std::f64::consts::TAU * u + phase).sin());
                        let mut c = [0.0; 3];
                        for (k, v) in c.iter_mut().enumerate() {
                            *v = a[k] + (b[k] - a[k]) * t + rng.gen_range(-16.0..16.0);
                        }
                        data.push(c);
                    }
                }
            }
        }
        let data = data.into_iter().map(|c| c.map(|v| v.round().clamp(0.0, 255.0) as u8)).collect();
        Texture { width: tw, offset, data }
    }

    fn at(&self, h: usize, x: isize) -> [u8; 3] {
        let xi = (x + self.offset as isize).clamp(0, self.width as isize - 1) as usize;
        self.data[h * self.width + xi]
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draw a random layered scene.
pub fn random_scene(seed: u64, cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let top = (cfg.max_disp - 1) as f64;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let kind = cfg.texture.unwrap_or_else(|| TextureKind::ALL[rng.gen_range(0..3)]);
        let slope = 0.15 * top / w;
        let (gx, gy) = if rng.gen_bool(0.5) { (uniform(&mut rng, -slope, slope), uniform(&mut rng, -slope, slope)) } else { (0.0, 0.0) };
        let (hc, wc) = (h / 2.0, w / 2.0);
        // headroom keeps the plane inside [0, top] over the whole frame
        let spread = gx.abs() * wc + gy.abs() * hc;
        let (lo, hi) = if i == 0 { (spread, 0.45 * top) } else { (0.25 * top + spread, top - spread) };
        let dc = uniform(&mut rng, lo, hi.max(lo));
        let shape = if i == 0 {
            Shape::Full
        } else if rng.gen_bool(0.5) {
            let (sh, sw) = (uniform(&mut rng, 0.2 * h, 0.6 * h), uniform(&mut rng, 0.15 * w, 0.5 * w));
            let (h0, w0) = (uniform(&mut rng, 0.0, h - sh), uniform(&mut rng, 0.0, w - sw));
            Shape::Rect { h0: h0.round(), h1: (h0 + sh).round(), w0: w0.round(), w1: (w0 + sw).round() }
        } else {
            Shape::Ellipse {
                hc: uniform(&mut rng, 0.2 * h, 0.8 * h),
                wc: uniform(&mut rng, 0.2 * w, 0.8 * w),
                rh: uniform(&mut rng, 0.1 * h, 0.35 * h),
                rw: uniform(&mut rng, 0.08 * w, 0.3 * w),
            }
        };
        layers.push(Layer { shape, plane: Plane { dc, gx, gy, hc, wc }, kind, texture_seed: rng.gen() });
    }
    let mut scale = rng.gen_range(0.5..1.5);
    let peak = layers
        .iter()
        .flat_map(|l| [(0.0, 0.0), (0.0, w - 1.0), (h - 1.0, 0.0), (h - 1.0, w - 1.0)].map(|(y, x)| l.plane.at(y, x)))
        .fold(0.0f64, f64::max);
    if peak * scale > top {
        scale = top / peak;
    }
    for l in &mut layers {
        l.plane = l.plane.scaled(scale);
    }
    Ok(Scene { height: cfg.height, width: cfg.width, max_disp: cfg.max_disp, layers, scale })
}

impl Scene {
    /// Index of the nearest layer covering left pixel `(h, w)`.
    fn left_owner(&self, h: usize, w: usize) -> usize {
        let (hf, wf) = (h as f64, w as f64);
        self.front(|l| l.shape.contains(hf, wf).then(|| l.plane.at(hf, wf)))
    }

    /// Index of the nearest layer projecting onto right pixel `(h, x)`.
    fn right_owner(&self, h: usize, x: usize) -> usize {
        let (hf, xf) = (h as f64, x as f64);
        self.front(|l| {
            let w = l.plane.preimage(hf, xf);
            l.shape.contains(hf, w).then(|| l.plane.at(hf, w))
        })
    }

    fn front(&self, depth: impl Fn(&Layer) -> Option<f64>) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(d) = depth(l) {
                if d > best.1 {
                    best = (i, d);
                }
            }
        }
        best.0
    }

    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .layers
            .iter()
            .map(|l| {
                let s = match l.shape {
                    Shape::Full => "full",
                    Shape::Rect { .. } => "rect",
                    Shape::Ellipse { .. } => "ellipse",
                };
                let slant = if l.plane.gx == 0.0 && l.plane.gy == 0.0 { "flat" } else { "slanted" };
                format!("{s}:{slant}:{}:{:.2}", l.kind.name(), l.plane.dc)
            })
            .collect();
        parts.join(",")
    }

    pub fn render(&self, seed: u64) -> Result<StereoSample> {
        let (hn, wn) = (self.height, self.width);
        let textures: Vec<Texture> = self
            .layers
            .iter()
            .map(|l| Texture::render(l.kind, l.texture_seed, hn, wn, self.max_disp + 1))
            .collect();
        let mut right = Vec::with_capacity(3 * hn * wn);
        let mut owners = vec![0usize; hn * wn];
        for h in 0..hn {
            for x in 0..wn {
                let o = self.right_owner(h, x);
                owners[h * wn + x] = o;
                right.extend_from_slice(&textures[o].at(h, x as isize));
            }
        }
        let mut left = Vec::with_capacity(3 * hn * wn);
        let mut disp = Vec::with_capacity(hn * wn);
        let mut valid = Vec::with_capacity(hn * wn);
        for h in 0..hn {
            for w in 0..wn {
                let o = self.left_owner(h, w);
                // stored precision decides the correspondence
                let d = self.layers[o].plane.at(h as f64, w as f64) as f32;
                let x = (w as f64 - d as f64).round() as isize;
                let visible = x >= 0 && (x as usize) < wn && owners[h * wn + x as usize] == o;
                let px = if visible {
                    let i = 3 * (h * wn + x as usize);
                    [right[i], right[i + 1], right[i + 2]]
                } else {
                    textures[o].at(h, x)
                };
                left.extend_from_slice(&px);
                disp.push(d);
                valid.push(visible);
            }
        }
        Ok(StereoSample {
            left: RgbImage::new(hn, wn, left)?,
            right: RgbImage::new(hn, wn, right)?,
            gt: GroundTruth::new(DisparityMap::new(hn, wn, disp)?, valid)?,
            meta: SampleMeta { seed, scale: self.scale, scene: self.describe() },
        })
    }
}

pub fn generate_sample(seed: u64, cfg: &SynthConfig) -> Result<StereoSample> {
    random_scene(seed, cfg)?.render(seed)
}

/// Minimum fraction of valid pixels for a sample to count as renderable.
pub const MIN_VALID_FRACTION: f64 = 0.5;

/// A sample is usable when its ground truth is finite, in range and mostly valid.
pub fn is_renderable(s: &StereoSample, max_disp: usize) -> bool {
    let gt = &s.gt;
    let n = gt.valid.len().max(1);
    gt.disparity.data.iter().all(|d| d.is_finite() && *d >= 0.0 && (*d as f64) < max_disp as f64)
        && gt.n_valid() as f64 >= MIN_VALID_FRACTION * n as f64
}

/// Replace the ground truth by independent uniform disparities in
/// `[0, max_disp)`, all marked valid, so the images no longer explain it.
pub fn decorrelate_ground_truth(s: &StereoSample, seed: u64, max_disp: usize) -> Result<StereoSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (s.gt.height(), s.gt.width());
    let d = (0..h * w).map(|_| rng.gen_range(0.0..max_disp as f32)).collect();
    let mut out = s.clone();
    out.gt = GroundTruth::new(DisparityMap::new(h, w, d)?, vec![true; h * w])?;
    out.meta.scene = format!("decorrelated:{seed}");
    Ok(out)
}
