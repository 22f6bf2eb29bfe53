//! Training-time image pipeline: random rotation and scaling on a fixed
//! canvas, random crop, one- or two-region random erasing, and [0,1]
//! normalization. Everything is driven by an explicit RNG stream so a seed
//! fully determines the output.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SydError};

/// Fill mode of erased rectangles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EraseFill {
    /// Constant gray, RGB = 127.
    Fixed127,
    /// Independent uniform bytes per pixel and channel.
    RandomRgb,
}

/// All augmentation knobs; the published recipe is the default.
#[derive(Clone, Debug)]
pub struct AugmentConfig {
    /// Rotation amplitude in degrees (uniform in [-x, +x]).
    pub rotation_deg: f64,
    /// Zoom amplitude: scale factor uniform in [1-x, 1+x] on a fixed canvas.
    pub scale_jitter: f64,
    pub source_size: usize,
    pub crop_size: usize,
    /// 0, 1, or 2 erased rectangles.
    pub erase_regions: usize,
    /// Total erased fraction of the crop area.
    pub erase_area_range: (f64, f64),
    pub erase_fill: EraseFill,
    /// Aspect ratio range of each rectangle.
    pub erase_aspect_range: (f64, f64),
    /// Two-region mode: share of the total area given to the first region.
    pub erase_split_range: (f64, f64),
    /// Two-region mode: sample each region's area independently instead of
    /// splitting one total.
    pub erase_independent_areas: bool,
    /// RandomRgb variant: one random color per rectangle instead of
    /// per-pixel noise.
    pub erase_per_rect_constant: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 25.0,
            scale_jitter: 0.25,
            source_size: 256,
            crop_size: 224,
            erase_regions: 2,
            erase_area_range: (0.1, 0.8),
            erase_fill: EraseFill::RandomRgb,
            erase_aspect_range: (0.5, 2.0),
            erase_split_range: (0.3, 0.7),
            erase_independent_areas: false,
            erase_per_rect_constant: false,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size > self.source_size {
            return Err(SydError::Parameter(format!(
                "crop size {} must be positive and at most the source size {}",
                self.crop_size, self.source_size
            )));
        }
        let (lo, hi) = self.erase_area_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(SydError::Parameter(format!(
                "erase area range ({lo}, {hi}) must sit inside (0, 1)"
            )));
        }
        if self.erase_regions > 2 {
            return Err(SydError::Parameter(format!(
                "erase_regions must be 0, 1, or 2, got {}",
                self.erase_regions
            )));
        }
        Ok(())
    }
}

/// One erased rectangle, in crop coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EraseRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl EraseRect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn overlaps(&self, other: &EraseRect) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

/// What the erasing stage actually did to one image.
#[derive(Clone, Debug, Default)]
pub struct EraseRecord {
    pub rects: Vec<EraseRect>,
    pub fill: Option<EraseFill>,
}

// ── Geometry ────────────────────────────────────────────────────────────

/// Bilinear sample with edge replication, on an f32 canvas in 0..255.
fn sample_bilinear(img: &[f32], size: usize, x: f64, y: f64, ch: usize) -> f32 {
    let xc = x.clamp(0.0, (size - 1) as f64);
    let yc = y.clamp(0.0, (size - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(size - 1);
    let y1 = (y0 + 1).min(size - 1);
    let fx = (xc - x0 as f64) as f32;
    let fy = (yc - y0 as f64) as f32;
    let at = |yy: usize, xx: usize| img[(yy * size + xx) * 3 + ch];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Rotate and zoom around the canvas center in one resampling pass.
/// Out-of-canvas reads replicate the nearest edge pixel.
fn affine_canvas(img: &[f32], size: usize, angle_deg: f64, zoom: f64) -> Vec<f32> {
    let mut out = vec![0.0f32; img.len()];
    let c = (size as f64 - 1.0) / 2.0;
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    for y in 0..size {
        for x in 0..size {
            // inverse map: undo zoom, then undo rotation
            let dx = (x as f64 - c) / zoom;
            let dy = (y as f64 - c) / zoom;
            let sx = cos * dx + sin * dy + c;
            let sy = -sin * dx + cos * dy + c;
            for ch in 0..3 {
                out[(y * size + x) * 3 + ch] = sample_bilinear(img, size, sx, sy, ch);
            }
        }
    }
    out
}

fn crop(img: &[f32], size: usize, x0: usize, y0: usize, crop_size: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(crop_size * crop_size * 3);
    for y in 0..crop_size {
        let row = ((y0 + y) * size + x0) * 3;
        out.extend_from_slice(&img[row..row + crop_size * 3]);
    }
    out
}

// ── Erasing ─────────────────────────────────────────────────────────────

/// Sample the erased rectangles. The total area in pixels always lands in
/// [ceil(lo*S), floor(hi*S)] where S is the crop area, the rectangles always
/// fit the image, and in two-region mode they never overlap.
pub fn sample_erase_rects(
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
    img_size: usize,
) -> Result<Vec<EraseRect>> {
    cfg.validate()?;
    if cfg.erase_regions == 0 {
        return Ok(Vec::new());
    }
    let area = (img_size * img_size) as f64;
    let (lo, hi) = cfg.erase_area_range;
    let lo_px = (lo * area).ceil() as usize;
    // reserve one row per region for the ceil-overshoot of each height
    let hi_px = ((hi * area).floor() as usize).saturating_sub(cfg.erase_regions * img_size);
    let total: usize = rng.random_range(lo_px..=hi_px.max(lo_px));

    let targets: Vec<usize> = if cfg.erase_regions == 1 {
        vec![total]
    } else if cfg.erase_independent_areas {
        // each region draws half-scale areas so the sum stays in range
        let a = rng.random_range(lo_px / 2..=hi_px.max(lo_px) / 2);
        let b = rng.random_range(lo_px / 2..=hi_px.max(lo_px) / 2);
        vec![a.max(1), b.max(1)]
    } else {
        let (slo, shi) = cfg.erase_split_range;
        let share = rng.random_range(slo..=shi);
        let first = ((total as f64 * share).round() as usize).clamp(1, total - 1);
        vec![first, total - first]
    };

    let dims_for = |target: usize, rng: &mut ChaCha8Rng| -> (usize, usize) {
        let (alo, ahi) = cfg.erase_aspect_range;
        let aspect = rng.random_range(alo..=ahi);
        let min_w = target.div_ceil(img_size);
        let w = (((target as f64) * aspect).sqrt().round() as usize).clamp(min_w.max(1), img_size);
        // round the height up so the realized area never undershoots
        let h = target.div_ceil(w).min(img_size);
        (w, h)
    };

    let mut rects: Vec<EraseRect> = Vec::with_capacity(targets.len());
    for &target in &targets {
        let mut placed = false;
        'rounds: for _round in 0..64 {
            let (w, h) = dims_for(target, rng);
            for _attempt in 0..50 {
                let x = rng.random_range(0..=img_size - w);
                let y = rng.random_range(0..=img_size - h);
                let cand = EraseRect { x, y, w, h };
                if rects.iter().all(|r| !r.overlaps(&cand)) {
                    rects.push(cand);
                    placed = true;
                    break 'rounds;
                }
            }
        }
        if !placed {
            // fallback: replace the whole placement with side-by-side
            // full-height columns, which are disjoint by construction and
            // keep the same ceil-overshoot accounting (total width is under
            // hi * img_size, so the columns always fit)
            rects.clear();
            let mut x = 0;
            for &t in &targets {
                let w = t.div_ceil(img_size);
                rects.push(EraseRect { x, y: 0, w, h: img_size });
                x += w;
            }
            break;
        }
    }
    Ok(rects)
}

fn apply_erase(
    img: &mut [f32],
    size: usize,
    rects: &[EraseRect],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) {
    for rect in rects {
        let rect_color: [f32; 3] = [
            rng.random_range(0..=255u32) as f32,
            rng.random_range(0..=255u32) as f32,
            rng.random_range(0..=255u32) as f32,
        ];
        for y in rect.y..rect.y + rect.h {
            for x in rect.x..rect.x + rect.w {
                let base = (y * size + x) * 3;
                match cfg.erase_fill {
                    EraseFill::Fixed127 => {
                        img[base] = 127.0;
                        img[base + 1] = 127.0;
                        img[base + 2] = 127.0;
                    }
                    EraseFill::RandomRgb => {
                        if cfg.erase_per_rect_constant {
                            img[base] = rect_color[0];
                            img[base + 1] = rect_color[1];
                            img[base + 2] = rect_color[2];
                        } else {
                            img[base] = rng.random_range(0..=255u32) as f32;
                            img[base + 1] = rng.random_range(0..=255u32) as f32;
                            img[base + 2] = rng.random_range(0..=255u32) as f32;
                        }
                    }
                }
            }
        }
    }
}

// ── Pipelines ───────────────────────────────────────────────────────────

/// Training pipeline: rotate/zoom on the fixed canvas, random crop, erase,
/// normalize to [0,1]. Input is 8-bit RGB at `source_size`.
pub fn augment_train(
    rgb: &[u8],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, EraseRecord)> {
    cfg.validate()?;
    let size = cfg.source_size;
    if rgb.len() != size * size * 3 {
        return Err(SydError::Data(format!(
            "expected a {size}x{size} RGB image ({} bytes), got {}",
            size * size * 3,
            rgb.len()
        )));
    }
    let mut canvas: Vec<f32> = rgb.iter().map(|&v| v as f32).collect();

    let angle = if cfg.rotation_deg > 0.0 {
        rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg)
    } else {
        0.0
    };
    let zoom = if cfg.scale_jitter > 0.0 {
        rng.random_range(1.0 - cfg.scale_jitter..=1.0 + cfg.scale_jitter)
    } else {
        1.0
    };
    if angle != 0.0 || zoom != 1.0 {
        canvas = affine_canvas(&canvas, size, angle, zoom);
    }

    let max_off = size - cfg.crop_size;
    let (x0, y0) = if max_off > 0 {
        (rng.random_range(0..=max_off), rng.random_range(0..=max_off))
    } else {
        (0, 0)
    };
    let mut cropped = crop(&canvas, size, x0, y0, cfg.crop_size);

    let rects = sample_erase_rects(cfg, rng, cfg.crop_size)?;
    apply_erase(&mut cropped, cfg.crop_size, &rects, cfg, rng);
    let record = EraseRecord {
        fill: (!rects.is_empty()).then_some(cfg.erase_fill),
        rects,
    };

    for v in &mut cropped {
        *v /= 255.0;
    }
    Ok((cropped, record))
}

/// Deterministic eval pipeline: center crop and normalize.
pub fn augment_eval(rgb: &[u8], cfg: &AugmentConfig) -> Result<Vec<f32>> {
    cfg.validate()?;
    let size = cfg.source_size;
    if rgb.len() != size * size * 3 {
        return Err(SydError::Data(format!(
            "expected a {size}x{size} RGB image ({} bytes), got {}",
            size * size * 3,
            rgb.len()
        )));
    }
    let off = (size - cfg.crop_size) / 2;
    let mut out = Vec::with_capacity(cfg.crop_size * cfg.crop_size * 3);
    for y in 0..cfg.crop_size {
        let row = ((off + y) * size + off) * 3;
        for &v in &rgb[row..row + cfg.crop_size * 3] {
            out.push(v as f32 / 255.0);
        }
    }
    Ok(out)
}
