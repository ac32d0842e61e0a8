//! Procedural glyph rendering.
//!
//! An identity is a 12-float glyph: a ring, a capsule bar and an equilateral
//! triangle, each with its own center plus radius/stroke/orientation/length
//! parameters. A sample applies nuisance (rotation, translation, scale,
//! brightness) and rasterizes the glyph twice:
//!
//! * modality V: anti-aliased dark ink on a white background;
//! * modality N: the same geometry pushed through intensity inversion,
//!   gamma 0.6, an additive horizontal sinusoidal illumination band
//!   (amplitude 0.15, one period over the image height), a Gaussian blur
//!   with sigma 0.8, and a final clamp to [0, 1].
//!
//! Everything is a pure function of the parameters, so renders are
//! bit-reproducible.

use crate::rng::RandomSource;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

const CENTER: f64 = IMAGE_SIDE as f64 / 2.0;
const AA_WIDTH: f64 = 1.0;
const BAR_WIDTH: f64 = 1.8;
const BAND_AMPLITUDE: f64 = 0.15;
const GAMMA: f64 = 0.6;
const BLUR_SIGMA: f64 = 0.8;
const BLUR_RADIUS: i64 = 3;

/// Identity code: the glyph geometry, without nuisance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphParams {
    pub ring_cx: f64,
    pub ring_cy: f64,
    pub ring_radius: f64,
    pub ring_stroke: f64,
    pub bar_cx: f64,
    pub bar_cy: f64,
    pub bar_angle: f64,
    pub bar_half_len: f64,
    pub tri_cx: f64,
    pub tri_cy: f64,
    pub tri_size: f64,
    pub tri_angle: f64,
}

/// Per-sample perturbation shared by both modalities of a pair.
#[derive(Clone, Copy, Debug)]
pub struct Nuisance {
    pub rotation: f64,
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub gain: f64,
}

fn gauss_clamped(rng: &mut RandomSource, lo: f64, hi: f64, sd_frac: f64) -> f64 {
    let mid = 0.5 * (lo + hi);
    let sd = (hi - lo) * sd_frac;
    (mid + sd * rng.normal()).clamp(lo, hi)
}

/// Glyph parameters from a seeded Gaussian, clamped to canvas-valid ranges.
///
/// Sizes and centers use a wide Gaussian (sd = half the clamp range) so a
/// good share of the mass sits near the range edges: identities end up far
/// apart relative to the scale and rotation jitter a sample adds on top.
/// Angles keep a narrow spread because their ranges already cover a full
/// period and clamp pile-up at 0 and the period would alias.
pub fn sample_glyph(rng: &mut RandomSource) -> GlyphParams {
    const WIDE: f64 = 0.5;
    const NARROW: f64 = 0.25;
    let pos = |rng: &mut RandomSource| gauss_clamped(rng, CENTER - 6.5, CENTER + 6.5, WIDE);
    GlyphParams {
        ring_cx: pos(rng),
        ring_cy: pos(rng),
        ring_radius: gauss_clamped(rng, 2.5, 8.0, WIDE),
        ring_stroke: gauss_clamped(rng, 1.2, 3.2, WIDE),
        bar_cx: pos(rng),
        bar_cy: pos(rng),
        bar_angle: gauss_clamped(rng, 0.0, std::f64::consts::PI, NARROW),
        bar_half_len: gauss_clamped(rng, 3.5, 9.0, WIDE),
        tri_cx: pos(rng),
        tri_cy: pos(rng),
        tri_size: gauss_clamped(rng, 2.5, 7.5, WIDE),
        tri_angle: gauss_clamped(rng, 0.0, 2.0 * std::f64::consts::PI / 3.0, NARROW),
    }
}

pub fn sample_nuisance(rng: &mut RandomSource) -> Nuisance {
    let deg25 = 25.0f64.to_radians();
    Nuisance {
        rotation: rng.uniform_in(-deg25, deg25),
        dx: rng.uniform_in(-3.0, 3.0),
        dy: rng.uniform_in(-3.0, 3.0),
        scale: rng.uniform_in(0.85, 1.15),
        gain: rng.uniform_in(0.9, 1.1),
    }
}

fn sdf_ring(q: (f64, f64), g: &GlyphParams) -> f64 {
    let d = ((q.0 - g.ring_cx).powi(2) + (q.1 - g.ring_cy).powi(2)).sqrt();
    (d - g.ring_radius).abs() - g.ring_stroke / 2.0
}

fn sdf_bar(q: (f64, f64), g: &GlyphParams) -> f64 {
    let (ux, uy) = (g.bar_angle.cos(), g.bar_angle.sin());
    let (px, py) = (q.0 - g.bar_cx, q.1 - g.bar_cy);
    let t = (px * ux + py * uy).clamp(-g.bar_half_len, g.bar_half_len);
    let (cx, cy) = (t * ux, t * uy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - BAR_WIDTH / 2.0
}

fn sdf_triangle(q: (f64, f64), g: &GlyphParams) -> f64 {
    // Filled equilateral triangle as the max of three half-plane distances.
    // Exact inside and near edges; corners round off within the AA band.
    let mut verts = [(0.0f64, 0.0f64); 3];
    for (k, v) in verts.iter_mut().enumerate() {
        let a = g.tri_angle + std::f64::consts::TAU * k as f64 / 3.0 - std::f64::consts::FRAC_PI_2;
        *v = (g.tri_cx + g.tri_size * a.cos(), g.tri_cy + g.tri_size * a.sin());
    }
    let mut d = f64::NEG_INFINITY;
    for k in 0..3 {
        let (ax, ay) = verts[k];
        let (bx, by) = verts[(k + 1) % 3];
        let (ex, ey) = (bx - ax, by - ay);
        let len = (ex * ex + ey * ey).sqrt();
        // Outward normal of a counter-clockwise edge.
        let (nx, ny) = (ey / len, -ex / len);
        d = d.max((q.0 - ax) * nx + (q.1 - ay) * ny);
    }
    d
}

fn coverage(glyph: &GlyphParams, nuisance: &Nuisance, px: f64, py: f64) -> f64 {
    // Map the pixel back into glyph space: undo translation, rotation and
    // scale about the canvas center.
    let (sx, sy) = (px - CENTER - nuisance.dx, py - CENTER - nuisance.dy);
    let (c, s) = (nuisance.rotation.cos(), nuisance.rotation.sin());
    let (rx, ry) = (c * sx + s * sy, -s * sx + c * sy);
    let q = (rx / nuisance.scale + CENTER, ry / nuisance.scale + CENTER);
    let d_glyph = sdf_ring(q, glyph).min(sdf_bar(q, glyph)).min(sdf_triangle(q, glyph));
    // Distances were measured in glyph space; scale back to pixels.
    let d = d_glyph * nuisance.scale;
    (0.5 - d / AA_WIDTH).clamp(0.0, 1.0)
}

fn blur_1d(src: &[f64], dst: &mut [f64], len: usize, stride: usize, base: usize, kernel: &[f64]) {
    for i in 0..len {
        let mut acc = 0.0;
        for (k, w) in kernel.iter().enumerate() {
            let offset = k as i64 - BLUR_RADIUS;
            let j = (i as i64 + offset).clamp(0, len as i64 - 1) as usize;
            acc += w * src[base + j * stride];
        }
        dst[base + i * stride] = acc;
    }
}

fn gaussian_blur(img: &mut [f64]) {
    let mut kernel = [0.0f64; (2 * BLUR_RADIUS + 1) as usize];
    let mut total = 0.0;
    for (k, w) in kernel.iter_mut().enumerate() {
        let x = k as f64 - BLUR_RADIUS as f64;
        *w = (-x * x / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
        total += *w;
    }
    for w in kernel.iter_mut() {
        *w /= total;
    }
    let mut tmp = vec![0.0; img.len()];
    for row in 0..IMAGE_SIDE {
        blur_1d(img, &mut tmp, IMAGE_SIDE, 1, row * IMAGE_SIDE, &kernel);
    }
    for col in 0..IMAGE_SIDE {
        blur_1d(&tmp, img, IMAGE_SIDE, IMAGE_SIDE, col, &kernel);
    }
}

fn bilinear(src: &[f64], side: usize, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, side as f64 - 1.0);
    let yc = y.clamp(0.0, side as f64 - 1.0);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(side - 1);
    let y1 = (y0 + 1).min(side - 1);
    let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
    let top = src[y0 * side + x0] * (1.0 - fx) + src[y0 * side + x1] * fx;
    let bot = src[y1 * side + x0] * (1.0 - fx) + src[y1 * side + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Resample an image under a small rigid-plus-scale jitter about the canvas
/// center, bilinear, border pixels replicated outside the frame. Identity
/// parameters (0, 0, 0, 1) reproduce the input exactly.
pub fn warp_image(src: &[f64], side: usize, rot: f64, dx: f64, dy: f64, scale: f64) -> Vec<f64> {
    assert_eq!(src.len(), side * side, "image length must match side^2");
    let c = side as f64 / 2.0;
    let (cs, sn) = (rot.cos(), rot.sin());
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5 - c - dx, y as f64 + 0.5 - c - dy);
            let (rx, ry) = (cs * px + sn * py, -sn * px + cs * py);
            let (qx, qy) = (rx / scale + c - 0.5, ry / scale + c - 0.5);
            out[y * side + x] = bilinear(src, side, qx, qy);
        }
    }
    out
}

/// Rasterize one sample in both modalities: `(modality_n, modality_v)`.
pub fn render_pair(glyph: &GlyphParams, nuisance: &Nuisance) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; IMAGE_PIXELS];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let cov = coverage(glyph, nuisance, x as f64 + 0.5, y as f64 + 0.5);
            v[y * IMAGE_SIDE + x] = (1.0 - nuisance.gain * cov).clamp(0.0, 1.0);
        }
    }
    let mut n = vec![0.0; IMAGE_PIXELS];
    for y in 0..IMAGE_SIDE {
        let band = BAND_AMPLITUDE
            * (std::f64::consts::TAU * (y as f64 + 0.5) / IMAGE_SIDE as f64).sin();
        for x in 0..IMAGE_SIDE {
            let inverted = 1.0 - v[y * IMAGE_SIDE + x];
            n[y * IMAGE_SIDE + x] = inverted.powf(GAMMA) + band;
        }
    }
    gaussian_blur(&mut n);
    for p in n.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    (n, v)
}
