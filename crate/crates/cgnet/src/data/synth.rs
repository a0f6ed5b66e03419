//! Deterministic synthetic segmentation data: a textured background plus
//! non-overlapping rectangles and discs, one color per class, with a
//! one-pixel ignore ring along every shape boundary.

use crate::data::{LabelMap, Manifest, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::rng::Pcg32;
use crate::tensor::Tensor;
use std::path::Path;

/// HSV (all in [0,1]) to 8-bit RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let sector = h.floor() as u32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let to8 = |x: f64| (x * 255.0).round().clamp(0.0, 255.0) as u8;
    [to8(r), to8(g), to8(b)]
}

fn class_color(class: u8, num_classes: usize) -> [u8; 3] {
    // background is dark gray; the rest walk the hue wheel
    if class == 0 {
        return [58, 58, 58];
    }
    let hue = (class as f64 - 1.0) / (num_classes as f64 - 1.0);
    hsv_to_rgb(hue, 0.85, 0.95)
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { x0: i64, y0: i64, w: i64, h: i64 },
    Disc { cx: i64, cy: i64, r: i64 },
}

impl Shape {
    fn contains(&self, x: i64, y: i64) -> bool {
        match *self {
            Shape::Rect { x0, y0, w, h } => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
            Shape::Disc { cx, cy, r } => (x - cx).pow(2) + (y - cy).pow(2) <= r * r,
        }
    }

    /// Inclusive bounding box.
    fn bbox(&self) -> (i64, i64, i64, i64) {
        match *self {
            Shape::Rect { x0, y0, w, h } => (x0, y0, x0 + w - 1, y0 + h - 1),
            Shape::Disc { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
        }
    }
}

const NOISE_AMPLITUDE: i64 = 20;

fn noise(rng: &mut Pcg32) -> i64 {
    rng.below(2 * NOISE_AMPLITUDE as u32 + 1) as i64 - NOISE_AMPLITUDE
}

/// One attempt at a full image; `None` if a shape cannot be placed within
/// 100 tries.
fn try_image(rng: &mut Pcg32, size: usize, num_classes: usize) -> Option<(Tensor<f32>, LabelMap)> {
    let s = size as i64;
    let shape_count = 2 + rng.below(4) as usize; // 2..=5
    let mut occupied = vec![false; size * size];
    let mut shapes: Vec<(Shape, u8)> = Vec::with_capacity(shape_count);

    for _ in 0..shape_count {
        let mut placed = false;
        for _attempt in 0..100 {
            // rectangles twice as often as discs
            let kind = rng.below(3);
            let class = 1 + rng.below(num_classes as u32 - 1) as u8;
            let shape = if kind < 2 {
                let lo = s / 4;
                let hi = s / 2;
                let w = lo + rng.below((hi - lo + 1) as u32) as i64;
                let h = lo + rng.below((hi - lo + 1) as u32) as i64;
                if s - w - 2 < 1 || s - h - 2 < 1 {
                    continue;
                }
                let x0 = 1 + rng.below((s - w - 1) as u32) as i64;
                let y0 = 1 + rng.below((s - h - 1) as u32) as i64;
                Shape::Rect { x0, y0, w, h }
            } else {
                let lo = s / 5;
                let hi = s / 4;
                let r = lo + rng.below((hi - lo + 1) as u32) as i64;
                let span = s - 2 * r - 2;
                if span < 1 {
                    continue;
                }
                let cx = r + 1 + rng.below(span as u32) as i64;
                let cy = r + 1 + rng.below(span as u32) as i64;
                Shape::Disc { cx, cy, r }
            };
            // Disjointness with a one-pixel gap: the candidate dilated by 1
            // must not touch occupied cells.
            let (bx0, by0, bx1, by1) = shape.bbox();
            let mut clash = false;
            'scan: for y in (by0 - 1).max(0)..=(by1 + 1).min(s - 1) {
                for x in (bx0 - 1).max(0)..=(bx1 + 1).min(s - 1) {
                    let near = shape.contains(x, y)
                        || shape.contains(x - 1, y)
                        || shape.contains(x + 1, y)
                        || shape.contains(x, y - 1)
                        || shape.contains(x, y + 1);
                    if near && occupied[y as usize * size + x as usize] {
                        clash = true;
                        break 'scan;
                    }
                }
            }
            if clash {
                continue;
            }
            for y in by0..=by1 {
                for x in bx0..=bx1 {
                    if shape.contains(x, y) {
                        occupied[y as usize * size + x as usize] = true;
                    }
                }
            }
            shapes.push((shape, class));
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }

    let plane = size * size;
    let mut img = vec![0.0f32; 3 * plane];
    let mut labels = LabelMap::filled(size, size, 0);

    // Background: base gray, mild diagonal gradient, one noise draw per
    // pixel applied to all three channels.
    let bg = class_color(0, num_classes);
    for y in 0..size {
        for x in 0..size {
            let n = noise(rng);
            let grad = (20 * (x + y) as i64) / (2 * s);
            for c in 0..3 {
                let v = (bg[c] as i64 + grad + n).clamp(0, 255);
                img[c * plane + y * size + x] = v as f32;
            }
        }
    }

    // Shapes, in placement order; the boundary ring keeps the class color
    // but gets the ignore label.
    for (shape, class) in &shapes {
        let color = class_color(*class, num_classes);
        let (bx0, by0, bx1, by1) = shape.bbox();
        for y in by0..=by1 {
            for x in bx0..=bx1 {
                if !shape.contains(x, y) {
                    continue;
                }
                let n = noise(rng);
                for c in 0..3 {
                    let v = (color[c] as i64 + n).clamp(0, 255);
                    img[c * plane + y as usize * size + x as usize] = v as f32;
                }
                let boundary = !(shape.contains(x - 1, y)
                    && shape.contains(x + 1, y)
                    && shape.contains(x, y - 1)
                    && shape.contains(x, y + 1));
                let label = if boundary { IGNORE_INDEX } else { *class };
                labels.set(y as usize, x as usize, label);
            }
        }
    }

    Some((Tensor::from_vec(&[3, size, size], img).expect("dims"), labels))
}

/// Generate one sample, retrying with fresh substreams until placement
/// succeeds.
pub fn gen_sample(seed: u64, index: usize, size: usize, num_classes: usize) -> (Tensor<f32>, LabelMap) {
    for attempt in 0u64.. {
        let mut rng = Pcg32::new(seed, index as u64 + (attempt << 32));
        if let Some(out) = try_image(&mut rng, size, num_classes) {
            return out;
        }
    }
    unreachable!("placement retries are unbounded")
}

/// Write `count` image/label pairs plus a manifest into `out_dir`; returns
/// the loaded manifest. Deterministic: the same arguments produce
/// byte-identical directories.
pub fn gen_synthetic(
    seed: u64,
    count: usize,
    size: usize,
    num_classes: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    if !(3..=8).contains(&num_classes) {
        return Err(Error::InvalidArg(format!(
            "synthetic class count {num_classes} must lie in 3..=8"
        )));
    }
    if !size.is_multiple_of(8) || size == 0 {
        return Err(Error::InvalidArg(format!(
            "synthetic image size {size} must be a positive multiple of 8"
        )));
    }
    if count == 0 {
        return Err(Error::InvalidArg("count must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut lines = format!("classes={num_classes}\n");
    for i in 0..count {
        let (img, labels) = gen_sample(seed, i, size, num_classes);
        let img_name = format!("img_{i:04}.ppm");
        let lab_name = format!("lab_{i:04}.pgm");
        crate::data::write_ppm(&out_dir.join(&img_name), &img)?;
        crate::data::write_pgm(&out_dir.join(&lab_name), &labels)?;
        lines.push_str(&format!("{img_name}\t{lab_name}\n"));
    }
    let manifest_path = out_dir.join("manifest.txt");
    std::fs::write(&manifest_path, lines)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Manifest::load(&manifest_path)
}
