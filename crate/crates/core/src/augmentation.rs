//! Label-aware raster augmentations: HSV colour shifts, Gaussian blur,
//! unsharp-mask sharpening, Gaussian noise, four-image mosaic and cutmix.
//!
//! Every operation is a pure function of its inputs, parameters and seed.
//! Pixel values are quantized with round-half-to-even and clamped to
//! `[0, 255]`.
//!
//! Colour conversion uses the hexcone model with hue in degrees:
//!
//! ```text
//! v = max(r, g, b)          c = v - min(r, g, b)       s = c / v   (0 if v = 0)
//! h = 60 * ((g - b) / c mod 6)   if v = r
//!     60 * ((b - r) / c + 2)     if v = g
//!     60 * ((r - g) / c + 4)     otherwise            (h = 0 if c = 0)
//! ```
//!
//! and back through `c = v s`, `x = c (1 - |(h / 60) mod 2 - 1|)`, `m = v - c`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::geometry::BBox;

/// Gray level of mosaic canvas pixels not covered by any input.
pub const MOSAIC_FILL: u8 = 114;
/// Boxes keeping less than this fraction of their area after mosaic cropping
/// are dropped.
pub const MOSAIC_MIN_VISIBLE: f64 = 0.25;
pub const CUTMIX_AREA: (f64, f64) = (0.1, 0.4);
pub const CUTMIX_ASPECT: (f64, f64) = (0.5, 2.0);
pub const CUTMIX_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AugError {
    #[error("patch must be at least 1x1, got {width}x{height}")]
    EmptyPatch { width: u32, height: u32 },
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("box {bbox} does not intersect the {width}x{height} patch")]
    BoxOutsidePatch { bbox: BBox, width: u32, height: u32 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("mosaic output size must be at least 2, got {0}")]
    MosaicSize(u32),
    #[error("mosaic center ({0}, {1}) lies outside the canvas")]
    MosaicCenter(u32, u32),
    #[error("no cutmix rectangle fitting the source found after {0} attempts")]
    CutmixRectangle(usize),
}

/// RGB raster, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl Patch {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, AugError> {
        if width == 0 || height == 0 {
            return Err(AugError::EmptyPatch { width, height });
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(AugError::BufferSize {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, AugError> {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.offset(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0.0, 0.0, f64::from(self.width), f64::from(self.height))
            .expect("patches are non-empty")
    }
}

/// A patch with its mitotic-figure boxes in patch coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub patch: Patch,
    pub boxes: Vec<BBox>,
}

impl LabeledPatch {
    pub fn new(patch: Patch, boxes: Vec<BBox>) -> Result<Self, AugError> {
        let bounds = patch.bounds();
        if let Some(b) = boxes.iter().find(|b| b.intersection(&bounds).is_none()) {
            return Err(AugError::BoxOutsidePatch {
                bbox: *b,
                width: patch.width,
                height: patch.height,
            });
        }
        Ok(Self { patch, boxes })
    }
}

/// Seed plus stream id. Each call draws from its own ChaCha stream, so the
/// same `(seed, sequence)` always yields the same numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AugSeed {
    pub seed: u64,
    pub sequence: u64,
}

impl AugSeed {
    pub fn new(seed: u64, sequence: u64) -> Self {
        Self { seed, sequence }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.sequence);
        rng
    }

    /// Independent seed for the `index`-th item of a batch.
    pub fn derive(&self, index: u64) -> AugSeed {
        AugSeed {
            seed: self.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17),
            sequence: self.sequence.wrapping_add(index),
        }
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    v.round_ties_even().clamp(0.0, 255.0) as u8
}

/// RGB in `[0, 1]` to (hue degrees in `[0, 360)`, saturation, value).
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    let s = if max > 0.0 { c / max } else { 0.0 };
    let h = if c == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / c + 2.0)
    } else {
        60.0 * ((r - g) / c + 4.0)
    };
    (h.rem_euclid(360.0), s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Rotates hue by `dh` degrees and scales saturation and value.
pub fn hsv_shift(p: &Patch, dh: f64, ds: f64, dv: f64) -> Result<Patch, AugError> {
    if !(dh.is_finite() && (-180.0..=180.0).contains(&dh)) {
        return Err(AugError::Parameter(format!("hue shift {dh} outside [-180, 180]")));
    }
    if !(ds.is_finite() && ds >= 0.0 && dv.is_finite() && dv >= 0.0) {
        return Err(AugError::Parameter(format!(
            "saturation/value scales must be non-negative, got {ds}, {dv}"
        )));
    }
    let mut data = Vec::with_capacity(p.data.len());
    for px in p.data.chunks_exact(3) {
        let (h, s, v) = rgb_to_hsv(
            f64::from(px[0]) / 255.0,
            f64::from(px[1]) / 255.0,
            f64::from(px[2]) / 255.0,
        );
        let (r, g, b) = hsv_to_rgb(
            (h + dh).rem_euclid(360.0),
            (s * ds).clamp(0.0, 1.0),
            (v * dv).clamp(0.0, 1.0),
        );
        data.extend([quantize(r * 255.0), quantize(g * 255.0), quantize(b * 255.0)]);
    }
    Patch::new(p.width, p.height, data)
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

fn check_sigma(sigma: f64) -> Result<(), AugError> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(AugError::Parameter(format!("sigma must be positive, got {sigma}")))
    }
}

/// Separable blur with edge replication, unquantized.
fn blur_f64(p: &Patch, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (p.width as i64, p.height as i64);
    let idx = |x: i64, y: i64| ((y * w + x) * 3) as usize;

    let mut horiz = vec![0.0f64; p.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (t, wt) in k.iter().enumerate() {
                let sx = (x + t as i64 - r).clamp(0, w - 1);
                let i = idx(sx, y);
                for (a, &v) in acc.iter_mut().zip(&p.data[i..i + 3]) {
                    *a += wt * f64::from(v);
                }
            }
            horiz[idx(x, y)..idx(x, y) + 3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0f64; p.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (t, wt) in k.iter().enumerate() {
                let sy = (y + t as i64 - r).clamp(0, h - 1);
                let i = idx(x, sy);
                for (a, &v) in acc.iter_mut().zip(&horiz[i..i + 3]) {
                    *a += wt * v;
                }
            }
            out[idx(x, y)..idx(x, y) + 3].copy_from_slice(&acc);
        }
    }
    out
}

pub fn gaussian_blur(p: &Patch, sigma: f64) -> Result<Patch, AugError> {
    check_sigma(sigma)?;
    let data = blur_f64(p, sigma).into_iter().map(quantize).collect();
    Patch::new(p.width, p.height, data)
}

/// Unsharp mask: `p + amount * (p - blur(p, sigma))`.
pub fn sharpen(p: &Patch, amount: f64, sigma: f64) -> Result<Patch, AugError> {
    check_sigma(sigma)?;
    if !(amount.is_finite() && amount >= 0.0) {
        return Err(AugError::Parameter(format!("sharpen amount must be >= 0, got {amount}")));
    }
    if amount == 0.0 {
        return Ok(p.clone());
    }
    let blurred = blur_f64(p, sigma);
    let data = p
        .data
        .iter()
        .zip(&blurred)
        .map(|(&v, &b)| {
            let v = f64::from(v);
            quantize(v + amount * (v - b))
        })
        .collect();
    Patch::new(p.width, p.height, data)
}

/// Adds independent `Normal(0, sigma^2)` noise to every channel value.
pub fn gaussian_noise(p: &Patch, sigma: f64, seed: AugSeed) -> Result<Patch, AugError> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(AugError::Parameter(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(p.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| AugError::Parameter(e.to_string()))?;
    let mut rng = seed.rng();
    let data = p
        .data
        .iter()
        .map(|&v| quantize(f64::from(v) + normal.sample(&mut rng)))
        .collect();
    Patch::new(p.width, p.height, data)
}

/// Axis-aligned integer rectangle `[x0, x1) × [y0, y1)` on the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl Rect {
    fn as_bbox(&self) -> Option<BBox> {
        BBox::new(
            f64::from(self.x0),
            f64::from(self.y0),
            f64::from(self.x1),
            f64::from(self.y1),
        )
        .ok()
    }
}

/// Four-image mosaic around a center drawn uniformly from the central half
/// of the canvas.
pub fn mosaic(inputs: &[LabeledPatch; 4], out_size: u32, seed: AugSeed) -> Result<LabeledPatch, AugError> {
    if out_size < 2 {
        return Err(AugError::MosaicSize(out_size));
    }
    let mut rng = seed.rng();
    let lo = out_size / 4;
    let hi = (3 * out_size / 4).max(lo + 1);
    let cx = rng.random_range(lo..hi);
    let cy = rng.random_range(lo..hi);
    mosaic_at(inputs, out_size, (cx, cy))
}

/// Mosaic with a fixed center. Inputs fill the top-left, top-right,
/// bottom-left and bottom-right quadrants in that order, each anchored at
/// its corner touching the center and cropped to its quadrant.
pub fn mosaic_at(
    inputs: &[LabeledPatch; 4],
    out_size: u32,
    center: (u32, u32),
) -> Result<LabeledPatch, AugError> {
    if out_size < 2 {
        return Err(AugError::MosaicSize(out_size));
    }
    let (cx, cy) = center;
    if cx > out_size || cy > out_size {
        return Err(AugError::MosaicCenter(cx, cy));
    }
    let mut canvas = Patch::filled(out_size, out_size, [MOSAIC_FILL; 3])?;
    let mut boxes = Vec::new();

    for (q, input) in inputs.iter().enumerate() {
        let (w, h) = (i64::from(input.patch.width), i64::from(input.patch.height));
        let (left, top) = (q % 2 == 0, q < 2);
        let quad = Rect {
            x0: if left { 0 } else { cx },
            y0: if top { 0 } else { cy },
            x1: if left { cx } else { out_size },
            y1: if top { cy } else { out_size },
        };
        let ox = if left { i64::from(cx) - w } else { i64::from(cx) };
        let oy = if top { i64::from(cy) - h } else { i64::from(cy) };

        for y in quad.y0..quad.y1 {
            let sy = i64::from(y) - oy;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in quad.x0..quad.x1 {
                let sx = i64::from(x) - ox;
                if sx < 0 || sx >= w {
                    continue;
                }
                canvas.set_pixel(x, y, input.patch.pixel(sx as u32, sy as u32));
            }
        }

        let Some(quad_box) = quad.as_bbox() else {
            continue;
        };
        for b in &input.boxes {
            let moved = b
                .translate(ox as f64, oy as f64)
                .expect("translation keeps positive area");
            if let Some(clipped) = moved.intersection(&quad_box) {
                if clipped.area() >= MOSAIC_MIN_VISIBLE * b.area() {
                    boxes.push(clipped);
                }
            }
        }
    }
    Ok(LabeledPatch {
        patch: canvas,
        boxes,
    })
}

fn sample_cutmix_rect(
    rng: &mut ChaCha8Rng,
    target: &Patch,
    source: &Patch,
) -> Result<Rect, AugError> {
    let (tw, th) = (f64::from(target.width), f64::from(target.height));
    let area = tw * th;
    for _ in 0..CUTMIX_ATTEMPTS {
        let frac = rng.random_range(CUTMIX_AREA.0..=CUTMIX_AREA.1);
        let aspect = rng.random_range(CUTMIX_ASPECT.0..=CUTMIX_ASPECT.1);
        let w = (frac * area * aspect).sqrt().round_ties_even().max(1.0);
        let h = (frac * area / aspect).sqrt().round_ties_even().max(1.0);
        if w > tw || h > th {
            continue;
        }
        let (w, h) = (w as u32, h as u32);
        let x0 = rng.random_range(0..=target.width - w);
        let y0 = rng.random_range(0..=target.height - h);
        if x0 + w > source.width || y0 + h > source.height {
            continue;
        }
        return Ok(Rect {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        });
    }
    Err(AugError::CutmixRectangle(CUTMIX_ATTEMPTS))
}

/// Pastes a random rectangle of `source` into `target` at the same position.
///
/// Labels follow box centers: target boxes centered inside the rectangle
/// are removed, source boxes centered inside it are transferred (clipped to
/// the rectangle), everything else is kept.
pub fn cutmix(target: &LabeledPatch, source: &LabeledPatch, seed: AugSeed) -> Result<LabeledPatch, AugError> {
    let mut rng = seed.rng();
    let rect = sample_cutmix_rect(&mut rng, &target.patch, &source.patch)?;
    Ok(cutmix_at(target, source, rect))
}

fn cutmix_at(target: &LabeledPatch, source: &LabeledPatch, rect: Rect) -> LabeledPatch {
    let mut patch = target.patch.clone();
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            patch.set_pixel(x, y, source.patch.pixel(x, y));
        }
    }
    let rbox = rect.as_bbox().expect("cutmix rectangles are non-empty");
    let canvas = patch.bounds();
    let centered = |b: &BBox| {
        let (x, y) = b.center();
        rbox.contains_point(x, y)
    };
    let mut boxes: Vec<BBox> = target
        .boxes
        .iter()
        .filter(|b| !centered(b))
        .filter_map(|b| b.intersection(&canvas))
        .collect();
    boxes.extend(
        source
            .boxes
            .iter()
            .filter(|b| centered(b))
            .filter_map(|b| b.intersection(&rbox)),
    );
    LabeledPatch { patch, boxes }
}

/// Pixel-level augmentation settings; `None` skips a step. Steps run in
/// field order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelAugment {
    pub hsv: Option<(f64, f64, f64)>,
    pub blur_sigma: Option<f64>,
    pub sharpen: Option<(f64, f64)>,
    pub noise_sigma: Option<f64>,
}

impl PixelAugment {
    pub fn apply(&self, input: &LabeledPatch, seed: AugSeed) -> Result<LabeledPatch, AugError> {
        let mut p = input.patch.clone();
        if let Some((dh, ds, dv)) = self.hsv {
            p = hsv_shift(&p, dh, ds, dv)?;
        }
        if let Some(sigma) = self.blur_sigma {
            p = gaussian_blur(&p, sigma)?;
        }
        if let Some((amount, sigma)) = self.sharpen {
            p = sharpen(&p, amount, sigma)?;
        }
        if let Some(sigma) = self.noise_sigma {
            p = gaussian_noise(&p, sigma, seed)?;
        }
        Ok(LabeledPatch {
            patch: p,
            boxes: input.boxes.clone(),
        })
    }
}

/// Applies `params` to every item with a per-item seed derived from `seed`,
/// so results do not depend on how the batch is scheduled.
pub fn augment_batch(
    items: &[LabeledPatch],
    params: &PixelAugment,
    seed: AugSeed,
    exec: Exec,
) -> Result<Vec<LabeledPatch>, AugError> {
    let indexed: Vec<(u64, &LabeledPatch)> = items.iter().enumerate().map(|(i, p)| (i as u64, p)).collect();
    exec.try_map(&indexed, |(i, item)| params.apply(item, seed.derive(*i)))
}
