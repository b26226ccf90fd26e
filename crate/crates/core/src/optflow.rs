//! Pyramidal iterative Lucas-Kanade optical flow, evaluated only at
//! foreground pixels of the earlier frame.
//!
//! Intensities are normalized to [0, 1]. Pixels whose 2×2 structure matrix is
//! degenerate at the finest level (smaller eigenvalue below `MIN_EIGEN`) are
//! emitted with flow (0, 0) rather than dropped, so the per-cell foreground
//! count stays meaningful downstream.

use rayon::prelude::*;
use thiserror::Error;

use crate::foreground::ForegroundMask;
use crate::ingest::GrayFrame;

/// Structure-matrix eigenvalue floor, on [0, 1] intensities.
pub const MIN_EIGEN: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("frame/mask dimensions disagree: prev {prev_w}x{prev_h}, next {next_w}x{next_h}, mask {mask_w}x{mask_h}")]
    DimensionMismatch {
        prev_w: usize,
        prev_h: usize,
        next_w: usize,
        next_h: usize,
        mask_w: usize,
        mask_h: usize,
    },
    #[error("invalid flow config: {0}")]
    InvalidConfig(String),
}

/// Flow vector attached to a foreground pixel of the earlier frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowEntry {
    pub x: u32,
    pub y: u32,
    pub vx: f32,
    pub vy: f32,
}

/// Sparse flow field: one entry per foreground pixel, displacement t → t+1.
#[derive(Debug, Clone, Default)]
pub struct FlowField {
    pub entries: Vec<FlowEntry>,
}

impl FlowField {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FlowConfig {
    /// Integration window side, odd and >= 3.
    pub window: usize,
    /// Requested pyramid depth; clamped so the coarsest level still fits the window.
    pub pyramid_levels: usize,
    pub max_iterations: usize,
    /// Stop once the update step norm falls below this, in pixels.
    pub epsilon: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { window: 15, pyramid_levels: 3, max_iterations: 10, epsilon: 0.01 }
    }
}

impl FlowConfig {
    fn validate(&self) -> Result<(), FlowError> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(FlowError::InvalidConfig(format!(
                "window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if self.pyramid_levels == 0 {
            return Err(FlowError::InvalidConfig("pyramid_levels must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(FlowError::InvalidConfig(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Single-channel f32 image, row-major.
#[derive(Debug, Clone)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let xx = x.clamp(0, self.width as isize - 1) as usize;
        let yy = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yy * self.width + xx]
    }
}

/// Coarse-to-fine image stack; level 0 is the source resolution.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<FloatImage>,
}

impl Pyramid {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

/// 5-tap binomial smoothing ([1 4 6 4 1]/16 per axis) then 2× decimation.
fn downsample(src: &FloatImage) -> FloatImage {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (w, h) = (src.width, src.height);
    // horizontal pass with edge replication
    let mut tmp = FloatImage::new(w, h);
    for y in 0..h {
        let row = &src.data[y * w..(y + 1) * w];
        let out = &mut tmp.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0f32;
            for (k, &kv) in K.iter().enumerate() {
                let xx = (x as isize + k as isize - 2).clamp(0, w as isize - 1) as usize;
                acc += kv * row[xx];
            }
            out[x] = acc;
        }
    }
    // vertical pass, sampled only at even rows/columns
    let (nw, nh) = (w / 2, h / 2);
    let mut out = FloatImage::new(nw, nh);
    for ny in 0..nh {
        let y = 2 * ny;
        for nx in 0..nw {
            let x = 2 * nx;
            let mut acc = 0.0f32;
            for (k, &kv) in K.iter().enumerate() {
                let yy = (y as isize + k as isize - 2).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp.data[yy * w + x];
            }
            out.data[ny * nw + nx] = acc;
        }
    }
    out
}

/// Build the image pyramid for `frame`, clamping the depth so the coarsest
/// level still measures at least `window` pixels per side.
pub fn build_pyramid(frame: &GrayFrame, levels: usize, window: usize) -> Pyramid {
    let base = FloatImage {
        width: frame.width,
        height: frame.height,
        data: frame.to_normalized(),
    };
    let mut stack = vec![base];
    for _ in 1..levels.max(1) {
        let prev = stack.last().expect("non-empty");
        let (nw, nh) = (prev.width / 2, prev.height / 2);
        if nw < window || nh < window {
            break;
        }
        stack.push(downsample(prev));
    }
    Pyramid { levels: stack }
}

/// Central-difference gradients with edge replication.
fn gradients(img: &FloatImage) -> (FloatImage, FloatImage) {
    let (w, h) = (img.width, img.height);
    let mut gx = FloatImage::new(w, h);
    let mut gy = FloatImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let xm = img.get_clamped(x as isize - 1, y as isize);
            let xp = img.get_clamped(x as isize + 1, y as isize);
            let ym = img.get_clamped(x as isize, y as isize - 1);
            let yp = img.get_clamped(x as isize, y as isize + 1);
            gx.data[y * w + x] = 0.5 * (xp - xm);
            gy.data[y * w + x] = 0.5 * (yp - ym);
        }
    }
    (gx, gy)
}

/// Gather a `win`×`win` window centered at integer (cx, cy) with clamping.
fn gather_int(img: &FloatImage, cx: isize, cy: isize, win: usize, out: &mut [f32]) {
    let hw = (win / 2) as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let interior = cx >= hw && cy >= hw && cx < w - hw && cy < h - hw;
    if interior {
        let x0 = (cx - hw) as usize;
        for wy in 0..win {
            let y = (cy - hw) as usize + wy;
            let row = &img.data[y * img.width + x0..y * img.width + x0 + win];
            out[wy * win..(wy + 1) * win].copy_from_slice(row);
        }
    } else {
        for wy in 0..win {
            let y = (cy - hw + wy as isize).clamp(0, h - 1) as usize;
            for wx in 0..win {
                let x = (cx - hw + wx as isize).clamp(0, w - 1) as usize;
                out[wy * win + wx] = img.data[y * img.width + x];
            }
        }
    }
}

/// Gather a window whose top-left sample sits at (base_x + ax, base_y + ay),
/// ax, ay in [0, 1), via bilinear interpolation.
///
/// Window positions are addressed as integer base plus a small fractional
/// offset so the arithmetic never touches absolute coordinates; interior
/// estimates are then bit-identical under integer translation.
fn gather_bilinear(
    img: &FloatImage,
    base_x: isize,
    base_y: isize,
    ax: f32,
    ay: f32,
    win: usize,
    out: &mut [f32],
) {
    let w00 = (1.0 - ax) * (1.0 - ay);
    let w10 = ax * (1.0 - ay);
    let w01 = (1.0 - ax) * ay;
    let w11 = ax * ay;
    let (w, h) = (img.width as isize, img.height as isize);
    let interior = base_x >= 0
        && base_y >= 0
        && base_x + win as isize + 1 <= w
        && base_y + win as isize + 1 <= h;
    if interior {
        for wy in 0..win {
            let y = (base_y as usize) + wy;
            let row = y * img.width + base_x as usize;
            let r0 = &img.data[row..row + win + 1];
            let r1 = &img.data[row + img.width..row + img.width + win + 1];
            let dst = &mut out[wy * win..(wy + 1) * win];
            for wx in 0..win {
                dst[wx] = w00 * r0[wx] + w10 * r0[wx + 1] + w01 * r1[wx] + w11 * r1[wx + 1];
            }
        }
    } else {
        for wy in 0..win {
            for wx in 0..win {
                let x = base_x + wx as isize;
                let y = base_y + wy as isize;
                let v = w00 * img.get_clamped(x, y)
                    + w10 * img.get_clamped(x + 1, y)
                    + w01 * img.get_clamped(x, y + 1)
                    + w11 * img.get_clamped(x + 1, y + 1);
                out[wy * win + wx] = v;
            }
        }
    }
}

/// Residual projections b = Σ g (P − N(window + d)) without materializing the
/// sampled window. Addressing as in [`gather_bilinear`].
#[allow(clippy::too_many_arguments)]
fn residual(
    next: &FloatImage,
    base_x: isize,
    base_y: isize,
    ax: f32,
    ay: f32,
    win: usize,
    patch: &[f32],
    gx: &[f32],
    gy: &[f32],
) -> (f64, f64) {
    let w00 = (1.0 - ax) * (1.0 - ay);
    let w10 = ax * (1.0 - ay);
    let w01 = (1.0 - ax) * ay;
    let w11 = ax * ay;
    let (w, h) = (next.width as isize, next.height as isize);
    let mut bx_acc = 0.0f64;
    let mut by_acc = 0.0f64;
    let interior = base_x >= 0
        && base_y >= 0
        && base_x + win as isize + 1 <= w
        && base_y + win as isize + 1 <= h;
    if interior {
        for wy in 0..win {
            let y = (base_y as usize) + wy;
            let row = y * next.width + base_x as usize;
            let r0 = &next.data[row..row + win + 1];
            let r1 = &next.data[row + next.width..row + next.width + win + 1];
            let p = &patch[wy * win..(wy + 1) * win];
            let gxr = &gx[wy * win..(wy + 1) * win];
            let gyr = &gy[wy * win..(wy + 1) * win];
            let mut row_x = 0.0f32;
            let mut row_y = 0.0f32;
            for wx in 0..win {
                let sampled =
                    w00 * r0[wx] + w10 * r0[wx + 1] + w01 * r1[wx] + w11 * r1[wx + 1];
                let diff = p[wx] - sampled;
                row_x += gxr[wx] * diff;
                row_y += gyr[wx] * diff;
            }
            bx_acc += row_x as f64;
            by_acc += row_y as f64;
        }
    } else {
        for wy in 0..win {
            for wx in 0..win {
                let x = base_x + wx as isize;
                let y = base_y + wy as isize;
                let sampled = w00 * next.get_clamped(x, y)
                    + w10 * next.get_clamped(x + 1, y)
                    + w01 * next.get_clamped(x, y + 1)
                    + w11 * next.get_clamped(x + 1, y + 1);
                let diff = patch[wy * win + wx] - sampled;
                bx_acc += (gx[wy * win + wx] * diff) as f64;
                by_acc += (gy[wy * win + wx] * diff) as f64;
            }
        }
    }
    (bx_acc, by_acc)
}

struct LevelData {
    prev: FloatImage,
    next: FloatImage,
    gx: FloatImage,
    gy: FloatImage,
}

struct Scratch {
    patch: Vec<f32>,
    gx: Vec<f32>,
    gy: Vec<f32>,
}

impl Scratch {
    fn new(win: usize) -> Self {
        Self { patch: vec![0.0; win * win], gx: vec![0.0; win * win], gy: vec![0.0; win * win] }
    }
}

fn track_pixel(levels: &[LevelData], x: u32, y: u32, cfg: &FlowConfig, s: &mut Scratch) -> (f32, f32) {
    let win = cfg.window;
    let hw = (win / 2) as isize;
    let taps = win * win;
    let mut dx = 0.0f32;
    let mut dy = 0.0f32;
    for (lvl, data) in levels.iter().enumerate().rev() {
        // center at this level: integer part plus an exact dyadic fraction
        let xi = (x >> lvl) as isize;
        let yi = (y >> lvl) as isize;
        let mask = (1u32 << lvl) - 1;
        let fx = (x & mask) as f32 / (1u32 << lvl) as f32;
        let fy = (y & mask) as f32 / (1u32 << lvl) as f32;
        if fx == 0.0 && fy == 0.0 {
            gather_int(&data.prev, xi, yi, win, &mut s.patch);
            gather_int(&data.gx, xi, yi, win, &mut s.gx);
            gather_int(&data.gy, xi, yi, win, &mut s.gy);
        } else {
            gather_bilinear(&data.prev, xi - hw, yi - hw, fx, fy, win, &mut s.patch);
            gather_bilinear(&data.gx, xi - hw, yi - hw, fx, fy, win, &mut s.gx);
            gather_bilinear(&data.gy, xi - hw, yi - hw, fx, fy, win, &mut s.gy);
        }
        let mut a = 0.0f64;
        let mut b = 0.0f64;
        let mut c = 0.0f64;
        for k in 0..taps {
            let gx = s.gx[k] as f64;
            let gy = s.gy[k] as f64;
            a += gx * gx;
            b += gx * gy;
            c += gy * gy;
        }
        let trace = a + c;
        let delta = a - c;
        let lambda_min = 0.5 * (trace - (delta * delta + 4.0 * b * b).sqrt());
        if lambda_min < MIN_EIGEN {
            if lvl == 0 {
                // aperture-degenerate at the pixel's own resolution
                return (0.0, 0.0);
            }
            dx *= 2.0;
            dy *= 2.0;
            continue;
        }
        let inv_det = 1.0 / (a * c - b * b);
        for _ in 0..cfg.max_iterations {
            // split the displaced window origin into integer base and
            // fractional weights; both stay small in magnitude
            let ox = fx + dx;
            let oy = fy + dy;
            let oxf = ox.floor();
            let oyf = oy.floor();
            let (bx, by) = residual(
                &data.next,
                xi - hw + oxf as isize,
                yi - hw + oyf as isize,
                ox - oxf,
                oy - oyf,
                win,
                &s.patch,
                &s.gx,
                &s.gy,
            );
            let step_x = inv_det * (c * bx - b * by);
            let step_y = inv_det * (a * by - b * bx);
            dx += step_x as f32;
            dy += step_y as f32;
            if step_x * step_x + step_y * step_y < cfg.epsilon * cfg.epsilon {
                break;
            }
        }
        // keep per-level displacement within one window reach so total flow
        // stays bounded by 2^levels * window
        let norm = (dx * dx + dy * dy).sqrt();
        if norm > win as f32 {
            let k = win as f32 / norm;
            dx *= k;
            dy *= k;
        }
        if lvl > 0 {
            dx *= 2.0;
            dy *= 2.0;
        }
    }
    (dx, dy)
}

/// Pyramidal iterative Lucas-Kanade over the foreground pixels of `mask`.
///
/// The mask belongs to `prev`; displacements are measured prev → next.
pub fn lucas_kanade(
    prev: &GrayFrame,
    next: &GrayFrame,
    mask: &ForegroundMask,
    cfg: &FlowConfig,
) -> Result<FlowField, FlowError> {
    cfg.validate()?;
    if prev.width != next.width
        || prev.height != next.height
        || mask.width != prev.width
        || mask.height != prev.height
    {
        return Err(FlowError::DimensionMismatch {
            prev_w: prev.width,
            prev_h: prev.height,
            next_w: next.width,
            next_h: next.height,
            mask_w: mask.width,
            mask_h: mask.height,
        });
    }
    let prev_pyr = build_pyramid(prev, cfg.pyramid_levels, cfg.window);
    let next_pyr = build_pyramid(next, cfg.pyramid_levels, cfg.window);
    let levels: Vec<LevelData> = prev_pyr
        .levels
        .into_iter()
        .zip(next_pyr.levels)
        .map(|(p, n)| {
            let (gx, gy) = gradients(&p);
            LevelData { prev: p, next: n, gx, gy }
        })
        .collect();

    let mut points = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                points.push((x as u32, y as u32));
            }
        }
    }
    let entries: Vec<FlowEntry> = points
        .par_iter()
        .map_init(
            || Scratch::new(cfg.window),
            |scratch, &(x, y)| {
                let (vx, vy) = track_pixel(&levels, x, y, cfg, scratch);
                FlowEntry { x, y, vx, vy }
            },
        )
        .collect();
    Ok(FlowField { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    // band-limited so the coarsest pyramid level stays below Nyquist
    fn textured(w: usize, h: usize, shift: (isize, isize)) -> GrayFrame {
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let xf = (x as isize - shift.0) as f64;
                let yf = (y as isize - shift.1) as f64;
                let v = 128.0
                    + 55.0 * (0.30 * xf + 0.11 * yf).sin()
                    + 45.0 * (0.07 * xf + 0.33 * yf).sin();
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        GrayFrame::new(w, h, data).unwrap()
    }

    fn full_mask(w: usize, h: usize) -> ForegroundMask {
        ForegroundMask { width: w, height: h, bits: vec![true; w * h] }
    }

    #[test]
    fn pyramid_level_sizes() {
        let frame = GrayFrame::filled(160, 120, 7);
        let pyr = build_pyramid(&frame, 3, 15);
        let dims: Vec<_> = pyr.levels.iter().map(|l| (l.width, l.height)).collect();
        assert_eq!(dims, vec![(160, 120), (80, 60), (40, 30)]);
    }

    #[test]
    fn pyramid_clamps_below_window() {
        let frame = GrayFrame::filled(16, 16, 7);
        let pyr = build_pyramid(&frame, 3, 15);
        assert_eq!(pyr.depth(), 1);
    }

    #[test]
    fn constant_frame_stays_constant_at_all_levels() {
        let frame = GrayFrame::filled(64, 48, 77);
        let pyr = build_pyramid(&frame, 3, 15);
        let expect = 77.0 / 255.0;
        for level in &pyr.levels {
            for &v in &level.data {
                assert!((v - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_frames_give_exact_zero_flow() {
        let frame = textured(80, 60, (0, 0));
        let mask = full_mask(80, 60);
        let flow = lucas_kanade(&frame, &frame, &mask, &FlowConfig::default()).unwrap();
        assert_eq!(flow.len(), 80 * 60);
        for e in &flow.entries {
            assert_eq!((e.vx, e.vy), (0.0, 0.0), "pixel ({}, {})", e.x, e.y);
        }
    }

    #[test]
    fn empty_mask_gives_empty_field() {
        let frame = textured(64, 48, (0, 0));
        let mask = ForegroundMask::empty(64, 48);
        let flow = lucas_kanade(&frame, &frame, &mask, &FlowConfig::default()).unwrap();
        assert!(flow.is_empty());
    }

    #[test]
    fn recovers_integer_translation() {
        let (w, h) = (96, 72);
        let prev = textured(w, h, (0, 0));
        let next = textured(w, h, (2, 1));
        let mask = full_mask(w, h);
        let cfg = FlowConfig::default();
        let flow = lucas_kanade(&prev, &next, &mask, &cfg).unwrap();
        let margin = cfg.window / 2 + 1;
        let mut err_x = 0.0;
        let mut err_y = 0.0;
        let mut n = 0usize;
        for e in &flow.entries {
            let (x, y) = (e.x as usize, e.y as usize);
            if x < margin || y < margin || x >= w - margin || y >= h - margin {
                continue;
            }
            err_x += (e.vx - 2.0).abs() as f64;
            err_y += (e.vy - 1.0).abs() as f64;
            n += 1;
        }
        assert!(n > 0);
        let (mx, my) = (err_x / n as f64, err_y / n as f64);
        assert!(mx < 0.25 && my < 0.25, "mean abs error ({mx:.3}, {my:.3})");
    }

    #[test]
    fn shift_equivariance_single_level() {
        let (w, h) = (90, 70);
        let prev_a = textured(w, h, (0, 0));
        let next_a = textured(w, h, (1, 2));
        let (sx, sy) = (5isize, 3isize);
        let prev_b = textured(w, h, (sx, sy));
        let next_b = textured(w, h, (1 + sx, 2 + sy));
        let mask = full_mask(w, h);
        let cfg = FlowConfig { pyramid_levels: 1, ..FlowConfig::default() };
        let fa = lucas_kanade(&prev_a, &next_a, &mask, &cfg).unwrap();
        let fb = lucas_kanade(&prev_b, &next_b, &mask, &cfg).unwrap();
        let index = |f: &FlowField| {
            let mut m = std::collections::HashMap::new();
            for e in &f.entries {
                m.insert((e.x as isize, e.y as isize), (e.vx, e.vy));
            }
            m
        };
        let ma = index(&fa);
        let mb = index(&fb);
        let margin = (cfg.window / 2 + sx.max(sy) as usize + 3) as isize;
        let mut compared = 0;
        for y in margin..h as isize - margin {
            for x in margin..w as isize - margin {
                let a = ma[&(x, y)];
                let b = mb[&(x + sx, y + sy)];
                assert!(
                    (a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6,
                    "({x},{y}): {a:?} vs {b:?}"
                );
                compared += 1;
            }
        }
        assert!(compared > 1000);
    }

    #[test]
    fn flow_magnitude_bounded_by_pyramid_reach() {
        // adversarial pair: unrelated textures
        let prev = textured(64, 64, (0, 0));
        let mut next = textured(64, 64, (31, 17));
        for (k, v) in next.data.iter_mut().enumerate() {
            *v = v.wrapping_add((k as u8).wrapping_mul(37));
        }
        let mask = full_mask(64, 64);
        let cfg = FlowConfig::default();
        let flow = lucas_kanade(&prev, &next, &mask, &cfg).unwrap();
        let bound = ((1usize << cfg.pyramid_levels) * cfg.window) as f32;
        for e in &flow.entries {
            let mag = (e.vx * e.vx + e.vy * e.vy).sqrt();
            assert!(mag <= bound, "|v|={mag} at ({}, {})", e.x, e.y);
        }
    }

    #[test]
    fn flat_pixels_emit_zero_flow() {
        let mut prev = GrayFrame::filled(64, 64, 100);
        let mut next = GrayFrame::filled(64, 64, 100);
        // texture only in the left half; right half is flat
        for y in 0..64 {
            for x in 0..24 {
                let v = 128 + ((x * 13 + y * 7) % 64) as u8;
                prev.set(x, y, v);
                next.set(x, y, v);
            }
        }
        let mut mask = ForegroundMask::empty(64, 64);
        mask.set(50, 32, true);
        let flow = lucas_kanade(&prev, &next, &mask, &FlowConfig::default()).unwrap();
        assert_eq!(flow.len(), 1);
        assert_eq!((flow.entries[0].vx, flow.entries[0].vy), (0.0, 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = GrayFrame::filled(32, 32, 0);
        let b = GrayFrame::filled(33, 32, 0);
        let mask = ForegroundMask::empty(32, 32);
        assert!(matches!(
            lucas_kanade(&a, &b, &mask, &FlowConfig::default()),
            Err(FlowError::DimensionMismatch { .. })
        ));
    }
}
