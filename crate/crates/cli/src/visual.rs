//! PNG renderings of inspected samples: activation maps with peak markers,
//! original/masked pairs, reconstruction triptychs, and gallery rows.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

use sanm::masking::{MaskSpec, RegionKind};
use sanm::trainer::Inspection;

const GAP: u32 = 4;
const MAX_RED: Rgb<u8> = Rgb([230, 30, 30]);
const MIN_BLUE: Rgb<u8> = Rgb([30, 90, 230]);

/// Upscale factor so a panel is at least 96 pixels wide.
fn scale_for(side: usize) -> u32 {
    (96 / side.max(1)).max(1) as u32
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `(C, H, W)` in `[0, 1]` to RGB, grey images replicated.
fn rgb_of(img: &Array3<f32>, scale: u32) -> RgbImage {
    let (c, h, w) = img.dim();
    RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let (yy, xx) = ((y / scale) as usize, (x / scale) as usize);
        let ch = |k: usize| to_u8(img[[k.min(c - 1), yy, xx]]);
        Rgb([ch(0), ch(1), ch(2)])
    })
}

/// A blue-to-red ramp for values in `[0, 1]`.
fn heat(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Activation map blended over the image.
fn cam_overlay(img: &Array3<f32>, cam: &Array2<f32>, scale: u32) -> RgbImage {
    let base = rgb_of(img, scale);
    RgbImage::from_fn(base.width(), base.height(), |x, y| {
        let p = base.get_pixel(x, y).0;
        let h = heat(cam[[(y / scale) as usize, (x / scale) as usize]]);
        Rgb(std::array::from_fn(|k| to_u8(0.45 * p[k] as f32 / 255.0 + 0.55 * h[k])))
    })
}

fn cross(img: &mut RgbImage, (py, px): (usize, usize), scale: u32, color: Rgb<u8>) {
    let cx = px as i64 * scale as i64 + scale as i64 / 2;
    let cy = py as i64 * scale as i64 + scale as i64 / 2;
    let arm = (2 * scale as i64).max(3);
    for d in -arm..=arm {
        for (x, y) in [(cx + d, cy), (cx, cy + d)] {
            if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

fn outline(img: &mut RgbImage, spec: &MaskSpec, scale: u32) {
    let b = spec.bounds;
    if b.is_empty() {
        return;
    }
    let color = match spec.kind {
        RegionKind::MaxRegion => MAX_RED,
        RegionKind::MinRegion => MIN_BLUE,
    };
    let (x0, x1) = (b.w_lt as u32 * scale, (b.w_rt as u32 * scale).min(img.width()) - 1);
    let (y0, y1) = (b.h_up as u32 * scale, (b.h_dn as u32 * scale).min(img.height()) - 1);
    for x in x0..=x1 {
        img.put_pixel(x, y0, color);
        img.put_pixel(x, y1, color);
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, color);
        img.put_pixel(x1, y, color);
    }
}

/// Panels side by side on a white strip.
fn hstack(panels: &[RgbImage]) -> RgbImage {
    let h = panels.iter().map(RgbImage::height).max().unwrap_or(0);
    let w = panels.iter().map(RgbImage::width).sum::<u32>() + GAP * panels.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x = 0;
    for p in panels {
        image::imageops::replace(&mut out, p, x as i64, 0);
        x += p.width() + GAP;
    }
    out
}

fn vstack(rows: &[RgbImage]) -> RgbImage {
    let w = rows.iter().map(RgbImage::width).max().unwrap_or(0);
    let h = rows.iter().map(RgbImage::height).sum::<u32>() + GAP * rows.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut y = 0;
    for r in rows {
        image::imageops::replace(&mut out, r, 0, y as i64);
        y += r.height() + GAP;
    }
    out
}

fn side(v: &Inspection) -> usize {
    v.original.dim().1.max(v.original.dim().2)
}

/// Activation map over the original with the max (red) and min (blue) peaks.
pub fn cam_panel(v: &Inspection) -> RgbImage {
    let s = scale_for(side(v));
    let mut img = cam_overlay(&v.original, &v.cam.cam, s);
    if !v.cam.degenerate {
        cross(&mut img, v.cam.max_coord, s, MAX_RED);
        cross(&mut img, v.cam.min_coord, s, MIN_BLUE);
    }
    img
}

/// Masked image with both rectangles outlined.
fn masked_panel(v: &Inspection) -> RgbImage {
    let s = scale_for(side(v));
    let mut img = rgb_of(&v.masked, s);
    for spec in &v.specs {
        outline(&mut img, spec, s);
    }
    img
}

pub fn mask_pair(v: &Inspection) -> RgbImage {
    let s = scale_for(side(v));
    hstack(&[rgb_of(&v.original, s), masked_panel(v)])
}

pub fn triptych(v: &Inspection) -> RgbImage {
    let s = scale_for(side(v));
    hstack(&[rgb_of(&v.original, s), masked_panel(v), rgb_of(&v.reconstruction, s)])
}

/// One row per sample: original, masked, activation map, reconstruction.
pub fn gallery(views: &[Inspection]) -> RgbImage {
    let rows: Vec<RgbImage> = views
        .iter()
        .map(|v| {
            let s = scale_for(side(v));
            hstack(&[rgb_of(&v.original, s), masked_panel(v), cam_panel(v), rgb_of(&v.reconstruction, s)])
        })
        .collect();
    vstack(&rows)
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sanm::activation::ActivationResult;
    use sanm::masking::Bounds;

    fn view() -> Inspection {
        let spec = |kind, b| MaskSpec {
            center: (4, 4),
            ratio: 0.25,
            aspect: 1.0,
            half_extent: (2.0, 2.0),
            bounds: b,
            kind,
        };
        Inspection {
            sample_id: 0,
            true_label: 1,
            noisy_label: 1,
            clean_prob: 0.5,
            original: Array3::from_elem((3, 8, 8), 0.5),
            masked: Array3::from_elem((3, 8, 8), 0.2),
            cam: ActivationResult {
                cam: Array2::from_shape_fn((8, 8), |(y, x)| (y * 8 + x) as f32 / 63.0),
                max_coord: (7, 7),
                min_coord: (0, 0),
                target_class: 1,
                degenerate: false,
            },
            specs: [
                spec(RegionKind::MaxRegion, Bounds { h_up: 4, h_dn: 8, w_lt: 4, w_rt: 8 }),
                spec(RegionKind::MinRegion, Bounds { h_up: 0, h_dn: 0, w_lt: 0, w_rt: 0 }),
            ],
            target: vec![0.0, 1.0],
            reconstruction: Array3::from_elem((3, 8, 8), 0.4),
        }
    }

    #[test]
    fn panel_sizes() {
        let v = view();
        let s = scale_for(8);
        assert_eq!(s, 12);
        assert_eq!(cam_panel(&v).dimensions(), (96, 96));
        assert_eq!(triptych(&v).dimensions(), (3 * 96 + 2 * GAP, 96));
        let g = gallery(&[v.clone(), v]);
        assert_eq!(g.dimensions(), (4 * 96 + 3 * GAP, 2 * 96 + GAP));
    }

    #[test]
    fn markers_and_outlines_are_drawn() {
        let v = view();
        let cam = cam_panel(&v);
        assert_eq!(*cam.get_pixel(7 * 12 + 6, 7 * 12 + 6), MAX_RED);
        let pair = mask_pair(&v);
        // Top-left corner of the max-region outline in the masked panel.
        assert_eq!(*pair.get_pixel(96 + GAP + 4 * 12, 4 * 12), MAX_RED);
    }
}
