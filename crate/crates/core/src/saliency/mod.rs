//! Class activation maps and their overlay rendering.
//!
//! For class `c` the map is `M_c(y, x) = sum_k W[c, k] * F_k(y, x)`, with the
//! bias left out. Because the head consumes the spatial mean of each `F_k`,
//! `mean(M_c) = z_c - b_c` holds exactly up to rounding.

mod colormap;

use serde::Serialize;

pub use colormap::{Colormap, COLORMAP_CSV};

use crate::backbone::FeatureTensor;
use crate::error::{Error, Result};
use crate::tensor::{argmax_class, bilinear_resize, minmax_normalize, Grid2D, Probabilities};
use crate::trainer::LinearHead;
use crate::par;

/// Peak overlay opacity.
pub const ALPHA_MAX: f64 = 0.6;

/// Raw (signed) activation map for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyGrid {
    pub class_id: usize,
    pub grid: Grid2D,
}

pub fn compute_cam(features: &FeatureTensor, head: &LinearHead, class_id: usize) -> Result<SaliencyGrid> {
    let shape = features.shape();
    if shape.k != head.features() {
        return Err(Error::invalid(format!(
            "features have {} channels but the head expects {}",
            shape.k,
            head.features()
        )));
    }
    if class_id >= head.classes() {
        return Err(Error::NotFound(format!(
            "class {class_id} (head has {} classes)",
            head.classes()
        )));
    }
    let mut cam = vec![0.0f64; shape.cells()];
    // channel-outer keeps each cell's sum in ascending-k order
    for (k, &w) in head.row(class_id).iter().enumerate() {
        for (acc, &f) in cam.iter_mut().zip(features.map(k)) {
            *acc += w * f as f64;
        }
    }
    Ok(SaliencyGrid {
        class_id,
        grid: Grid2D::new(shape.h, shape.w, cam)?,
    })
}

/// The user's class if given, otherwise the most confident one.
pub fn select_saliency_class(scores: &Probabilities, user_choice: Option<usize>) -> Result<usize> {
    match user_choice {
        Some(c) if c < scores.len() => Ok(c),
        Some(c) => Err(Error::NotFound(format!("class {c} (have {} classes)", scores.len()))),
        None => argmax_class(scores.values()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderOptions {
    /// Zero out negative evidence before normalizing.
    pub clip_negative: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverlayPixel {
    pub rgb: [u8; 3],
    pub alpha: f64,
}

/// Colourised heat map at display resolution, covering the crop square.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyOverlay {
    side: usize,
    pixels: Vec<OverlayPixel>,
}

impl SaliencyOverlay {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[OverlayPixel] {
        &self.pixels
    }

    pub fn at(&self, y: usize, x: usize) -> OverlayPixel {
        self.pixels[y * self.side + x]
    }

    /// Alpha-blends the overlay onto `image` with its top-left corner at
    /// `(x0, y0)`. Pixels outside the square are untouched.
    pub fn composite_onto(&self, image: &mut image::RgbImage, x0: u32, y0: u32) {
        for y in 0..self.side {
            for x in 0..self.side {
                let (ix, iy) = (x0 + x as u32, y0 + y as u32);
                if ix >= image.width() || iy >= image.height() {
                    continue;
                }
                let o = self.at(y, x);
                let px = image.get_pixel_mut(ix, iy);
                for c in 0..3 {
                    let blended = (1.0 - o.alpha) * px[c] as f64 + o.alpha * o.rgb[c] as f64;
                    px[c] = blended.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
}

/// Values fed to the colormap: optional clipping then min-max scaling.
pub fn normalized(grid: &Grid2D, options: RenderOptions) -> Grid2D {
    if options.clip_negative {
        minmax_normalize(&grid.map(|v| v.max(0.0)))
    } else {
        minmax_normalize(grid)
    }
}

pub fn render_overlay(saliency: &SaliencyGrid, out_side: usize) -> Result<SaliencyOverlay> {
    render_overlay_with(saliency, out_side, RenderOptions::default())
}

/// Upsample, normalize, colourise; alpha is `0.6 * value`.
pub fn render_overlay_with(saliency: &SaliencyGrid, out_side: usize, options: RenderOptions) -> Result<SaliencyOverlay> {
    let source = if options.clip_negative {
        saliency.grid.map(|v| v.max(0.0))
    } else {
        saliency.grid.clone()
    };
    let upsampled = bilinear_resize(&source, out_side, out_side)?;
    let norm = minmax_normalize(&upsampled);
    let cm = Colormap::shipped();
    let mut pixels = vec![OverlayPixel { rgb: [0; 3], alpha: 0.0 }; out_side * out_side];
    let values = norm.values();
    par::for_each_row(&mut pixels, out_side, out_side * 16, |y, row| {
        for (x, px) in row.iter_mut().enumerate() {
            let v = values[y * out_side + x];
            *px = OverlayPixel { rgb: cm.lookup(v), alpha: ALPHA_MAX * v };
        }
    });
    Ok(SaliencyOverlay { side: out_side, pixels })
}

/// 8-bit quantization of a `[0, 1]` grid, as shipped to clients.
pub fn quantize(grid: &Grid2D) -> Vec<u8> {
    grid.values()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::backbone::FeatureShape;
    use crate::tensor::{softmax, Logits};
    use crate::trainer::{forward, init_head};

    fn two_channel() -> FeatureTensor {
        FeatureTensor::from_maps(
            FeatureShape { h: 2, w: 2, k: 2 },
            vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn worked_example() {
        let f = two_channel();
        let head = LinearHead::new(1, 2, vec![0.5, -1.0], vec![0.25]).unwrap();
        let cam = compute_cam(&f, &head, 0).unwrap();
        assert_eq!(cam.grid.values(), &[0.5, 0.0, 1.5, 1.0]);
        assert_eq!(cam.grid.mean(), 0.75);
        let z = forward(&head, f.gap()).unwrap().values()[0];
        assert_eq!(z - head.bias()[0], 0.75);
    }

    #[test]
    fn zero_row_gives_zero_map() {
        let head = init_head(3, 2).unwrap();
        let cam = compute_cam(&two_channel(), &head, 1).unwrap();
        assert!(cam.grid.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaling_the_row_scales_the_map() {
        let f = two_channel();
        let a = LinearHead::new(1, 2, vec![0.3, 0.7], vec![0.0]).unwrap();
        let b = LinearHead::new(1, 2, vec![0.3 * 4.0, 0.7 * 4.0], vec![0.0]).unwrap();
        let ca = compute_cam(&f, &a, 0).unwrap();
        let cb = compute_cam(&f, &b, 0).unwrap();
        for (x, y) in ca.grid.values().iter().zip(cb.grid.values()) {
            assert!((x * 4.0 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_does_not_move_the_map() {
        let f = two_channel();
        let a = LinearHead::new(2, 2, vec![0.3, 0.7, -1.0, 2.0], vec![0.0, 0.0]).unwrap();
        let b = LinearHead::new(2, 2, vec![0.3, 0.7, -1.0, 2.0], vec![5.0, -3.0]).unwrap();
        assert_eq!(compute_cam(&f, &a, 1).unwrap(), compute_cam(&f, &b, 1).unwrap());
    }

    #[test]
    fn cam_errors() {
        let head = init_head(3, 5).unwrap();
        assert!(matches!(compute_cam(&two_channel(), &head, 0), Err(Error::InvalidArgument(_))));
        let head = init_head(3, 2).unwrap();
        assert!(matches!(compute_cam(&two_channel(), &head, 3), Err(Error::NotFound(_))));
    }

    #[test]
    fn class_selection() {
        let p = Probabilities::new(vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(select_saliency_class(&p, None).unwrap(), 1);
        assert_eq!(select_saliency_class(&p, Some(0)).unwrap(), 0);
        assert!(matches!(select_saliency_class(&p, Some(5)), Err(Error::NotFound(_))));
        let tie = softmax(&Logits::new(vec![2.0, 2.0]).unwrap());
        assert_eq!(select_saliency_class(&tie, None).unwrap(), 0);
    }

    #[test]
    fn constant_map_renders_transparent() {
        let s = SaliencyGrid { class_id: 0, grid: Grid2D::filled(7, 7, 3.0).unwrap() };
        let o = render_overlay(&s, 32).unwrap();
        assert!(o.pixels().iter().all(|p| p.alpha == 0.0));
    }

    #[test]
    fn peak_gets_last_colour_and_full_alpha() {
        let mut v = vec![0.0; 49];
        v[3 * 7 + 3] = 5.0;
        let s = SaliencyGrid { class_id: 0, grid: Grid2D::new(7, 7, v).unwrap() };
        let o = render_overlay(&s, 7).unwrap();
        let peak = o.at(3, 3);
        assert_eq!(peak.rgb, *Colormap::shipped().entries().last().unwrap());
        assert_eq!(peak.alpha, ALPHA_MAX);
        assert!(o.pixels().iter().all(|p| (0.0..=ALPHA_MAX).contains(&p.alpha)));
    }

    #[test]
    fn small_grid_matches_per_pixel_oracle() {
        let g = Grid2D::from_rows(&[&[-1.0, 2.0], &[0.5, 4.0]]).unwrap();
        let s = SaliencyGrid { class_id: 0, grid: g.clone() };
        let o = render_overlay(&s, 4).unwrap();
        // independent evaluation: half-pixel bilinear, then min-max, then lookup
        let coord = |d: usize| ((d as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
        let mut up = [[0.0f64; 4]; 4];
        for y in 0..4 {
            for x in 0..4 {
                let (fy, fx) = (coord(y), coord(x));
                let top = g.get(0, 0) * (1.0 - fx) + g.get(0, 1) * fx;
                let bot = g.get(1, 0) * (1.0 - fx) + g.get(1, 1) * fx;
                up[y][x] = top * (1.0 - fy) + bot * fy;
            }
        }
        let lo = up.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let hi = up.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let cm = Colormap::shipped();
        for y in 0..4 {
            for x in 0..4 {
                let v = (up[y][x] - lo) / (hi - lo);
                assert_eq!(o.at(y, x).rgb, cm.lookup(v));
                assert!((o.at(y, x).alpha - 0.6 * v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clipping_hides_negative_evidence() {
        let g = Grid2D::from_rows(&[&[-4.0, -1.0], &[0.0, 2.0]]).unwrap();
        let s = SaliencyGrid { class_id: 0, grid: g.clone() };
        let clipped = render_overlay_with(&s, 2, RenderOptions { clip_negative: true }).unwrap();
        assert_eq!(clipped.at(0, 0).alpha, 0.0);
        assert_eq!(clipped.at(0, 1).alpha, 0.0);
        let full = render_overlay(&s, 2).unwrap();
        assert!(full.at(0, 1).alpha > 0.0);
        // input untouched
        assert_eq!(s.grid, g);
    }

    #[test]
    fn quantization_endpoints() {
        let g = Grid2D::from_rows(&[&[0.0, 1.0, 0.5]]).unwrap();
        assert_eq!(quantize(&g), vec![0, 255, 128]);
    }

    #[test]
    fn compositing_respects_alpha() {
        let mut img = image::RgbImage::from_pixel(4, 2, image::Rgb([100, 100, 100]));
        let s = SaliencyGrid { class_id: 0, grid: Grid2D::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]).unwrap() };
        let o = render_overlay(&s, 2).unwrap();
        o.composite_onto(&mut img, 1, 0);
        assert_eq!(img.get_pixel(0, 0).0, [100, 100, 100]);
        assert_eq!(img.get_pixel(1, 0).0, [100, 100, 100]);
        let red = img.get_pixel(2, 0).0;
        assert_eq!(red, [(0.4f64 * 100.0 + 0.6 * 255.0).round() as u8, 40, 40]);
        assert_eq!(img.get_pixel(3, 0).0, [100, 100, 100]);
    }
}
