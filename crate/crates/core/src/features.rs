//! Per-cell features: average foreground motion, weighted foreground size,
//! and a 4-orientation Gabor texture descriptor.
//!
//! Motion averages the L1 norms of foreground flow vectors in a cell and is
//! smoothed over {t-1, t, t+1}. Size weights the 3×3 neighborhood of
//! foreground occupancies with a Gaussian mask. Texture sums Gabor response
//! magnitudes at 0°, 45°, 90° and 135° over the pixels of the cell, and is
//! only present for cells with at least one foreground pixel.

use rayon::prelude::*;
use thiserror::Error;

use crate::foreground::ForegroundMask;
use crate::ingest::{CellGridSpec, GrayFrame};
use crate::optflow::FlowField;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cell ({i}, {j}) outside {grid_w}x{grid_h} grid")]
    CellOutOfRange { i: usize, j: usize, grid_w: usize, grid_h: usize },
    #[error("frame {frame_w}x{frame_h} smaller than {ksize}x{ksize} kernel")]
    FrameSmallerThanKernel { frame_w: usize, frame_h: usize, ksize: usize },
    #[error("dimensions disagree: {0}")]
    DimensionMismatch(String),
    #[error("invalid size kernel: {0}")]
    InvalidSizeKernel(String),
    #[error("invalid gabor bank: {0}")]
    InvalidGaborBank(String),
}

/// Features of one analysed cell.
///
/// `mot` is the temporally smoothed motion; it can be absent at sequence
/// boundaries when no flow was measurable in the smoothing window. `txt` is
/// present iff the cell has at least one foreground pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFeatures {
    pub mot: Option<f64>,
    pub size: f64,
    pub txt: Option<[f64; 4]>,
    pub occupancy: u32,
}

/// 3×3 non-negative mask, summing to one, used by the size feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeKernel {
    pub weights: [[f64; 3]; 3],
}

impl Default for SizeKernel {
    /// Normalized binomial mask [1 2 1; 2 4 2; 1 2 1] / 16.
    fn default() -> Self {
        let w = |v: f64| v / 16.0;
        Self {
            weights: [
                [w(1.0), w(2.0), w(1.0)],
                [w(2.0), w(4.0), w(2.0)],
                [w(1.0), w(2.0), w(1.0)],
            ],
        }
    }
}

impl SizeKernel {
    pub fn new(weights: [[f64; 3]; 3]) -> Result<Self, FeatureError> {
        let sum: f64 = weights.iter().flatten().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FeatureError::InvalidSizeKernel(format!("weights sum to {sum}, not 1")));
        }
        if weights.iter().flatten().any(|&w| w < 0.0) {
            return Err(FeatureError::InvalidSizeKernel("negative weight".into()));
        }
        let center = weights[1][1];
        if weights.iter().flatten().any(|&w| w > center) {
            return Err(FeatureError::InvalidSizeKernel("center weight is not the maximum".into()));
        }
        for a in 0..3 {
            for b in 0..3 {
                if (weights[a][b] - weights[2 - a][2 - b]).abs() > 1e-12 {
                    return Err(FeatureError::InvalidSizeKernel("not symmetric".into()));
                }
            }
        }
        Ok(Self { weights })
    }
}

/// Quadrature Gabor pair for one orientation, flat row-major taps.
#[derive(Debug, Clone)]
pub struct GaborKernel {
    pub size: usize,
    pub even: Vec<f64>,
    pub odd: Vec<f64>,
}

/// Four quadrature Gabor pairs at 0°, 45°, 90° and 135°.
///
/// The orientation is the direction of the carrier wave vector: 0° responds
/// to intensity variation along x, i.e. vertical stripes. Even kernels are
/// mean-subtracted so constant regions produce zero response.
#[derive(Debug, Clone)]
pub struct GaborBank {
    pub kernels: [GaborKernel; 4],
    pub ksize: usize,
    pub wavelength: f64,
    pub sigma: f64,
    pub aspect: f64,
}

pub const GABOR_ORIENTATIONS_DEG: [f64; 4] = [0.0, 45.0, 90.0, 135.0];

impl Default for GaborBank {
    fn default() -> Self {
        Self::new(9, 4.0, 2.0, 0.5).expect("default parameters are valid")
    }
}

impl GaborBank {
    pub fn new(ksize: usize, wavelength: f64, sigma: f64, aspect: f64) -> Result<Self, FeatureError> {
        if ksize < 3 || ksize % 2 == 0 {
            return Err(FeatureError::InvalidGaborBank(format!(
                "kernel size must be odd and >= 3, got {ksize}"
            )));
        }
        if wavelength <= 0.0 || sigma <= 0.0 || aspect <= 0.0 {
            return Err(FeatureError::InvalidGaborBank(
                "wavelength, sigma and aspect must be positive".into(),
            ));
        }
        let half = (ksize / 2) as isize;
        let kernels: Vec<GaborKernel> = GABOR_ORIENTATIONS_DEG
            .iter()
            .map(|&deg| {
                let theta = deg.to_radians();
                let (sin_t, cos_t) = theta.sin_cos();
                let mut even = Vec::with_capacity(ksize * ksize);
                let mut odd = Vec::with_capacity(ksize * ksize);
                for y in -half..=half {
                    for x in -half..=half {
                        let xr = x as f64 * cos_t + y as f64 * sin_t;
                        let yr = -(x as f64) * sin_t + y as f64 * cos_t;
                        let envelope =
                            (-(xr * xr + aspect * aspect * yr * yr) / (2.0 * sigma * sigma)).exp();
                        let phase = 2.0 * std::f64::consts::PI * xr / wavelength;
                        even.push(envelope * phase.cos());
                        odd.push(envelope * phase.sin());
                    }
                }
                // remove the DC component of the even kernel
                let mean: f64 = even.iter().sum::<f64>() / even.len() as f64;
                for v in &mut even {
                    *v -= mean;
                }
                GaborKernel { size: ksize, even, odd }
            })
            .collect();
        let kernels: [GaborKernel; 4] = kernels.try_into().expect("four orientations");
        Ok(Self { kernels, ksize, wavelength, sigma, aspect })
    }
}

fn normalized_f64(frame: &GrayFrame) -> Vec<f64> {
    frame.data.iter().map(|&v| v as f64 / 255.0).collect()
}

/// Four full-frame Gabor magnitude maps, row-major f64.
#[derive(Debug, Clone)]
pub struct MagnitudeMaps {
    pub width: usize,
    pub height: usize,
    pub maps: [Vec<f64>; 4],
}

/// Gabor response magnitudes for all four orientations at one pixel,
/// with edge replication. `norm` holds [0, 1] intensities in f64 so the
/// DC-free invariance of the even kernels survives quantization.
fn gabor_magnitude_at(
    norm: &[f64],
    width: usize,
    height: usize,
    bank: &GaborBank,
    x: usize,
    y: usize,
    window: &mut [f64],
) -> [f64; 4] {
    let k = bank.ksize;
    let half = (k / 2) as isize;
    let interior = x as isize >= half
        && y as isize >= half
        && (x as isize) < width as isize - half
        && (y as isize) < height as isize - half;
    if interior {
        let x0 = x - half as usize;
        for wy in 0..k {
            let row = (y - half as usize + wy) * width + x0;
            window[wy * k..(wy + 1) * k].copy_from_slice(&norm[row..row + k]);
        }
    } else {
        for wy in 0..k {
            let yy = (y as isize + wy as isize - half).clamp(0, height as isize - 1) as usize;
            for wx in 0..k {
                let xx = (x as isize + wx as isize - half).clamp(0, width as isize - 1) as usize;
                window[wy * k + wx] = norm[yy * width + xx];
            }
        }
    }
    let mut out = [0.0f64; 4];
    for (o, kernel) in bank.kernels.iter().enumerate() {
        let mut even = 0.0f64;
        let mut odd = 0.0f64;
        for ((&w, &ke), &ko) in window.iter().zip(&kernel.even).zip(&kernel.odd) {
            even += w * ke;
            odd += w * ko;
        }
        out[o] = (even * even + odd * odd).sqrt();
    }
    out
}

/// Filter the whole frame with the Gabor bank, returning four magnitude maps.
pub fn gabor_responses(frame: &GrayFrame, bank: &GaborBank) -> Result<MagnitudeMaps, FeatureError> {
    if frame.width < bank.ksize || frame.height < bank.ksize {
        return Err(FeatureError::FrameSmallerThanKernel {
            frame_w: frame.width,
            frame_h: frame.height,
            ksize: bank.ksize,
        });
    }
    let norm = normalized_f64(frame);
    let (w, h) = (frame.width, frame.height);
    let rows: Vec<Vec<[f64; 4]>> = (0..h)
        .into_par_iter()
        .map_init(
            || vec![0.0f64; bank.ksize * bank.ksize],
            |window, y| {
                (0..w)
                    .map(|x| gabor_magnitude_at(&norm, w, h, bank, x, y, window))
                    .collect()
            },
        )
        .collect();
    let mut maps: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; w * h]);
    for (y, row) in rows.iter().enumerate() {
        for (x, px) in row.iter().enumerate() {
            for o in 0..4 {
                maps[o][y * w + x] = px[o];
            }
        }
    }
    Ok(MagnitudeMaps { width: w, height: h, maps })
}

fn check_cell(spec: &CellGridSpec, i: usize, j: usize) -> Result<(), FeatureError> {
    if !spec.contains(i, j) {
        return Err(FeatureError::CellOutOfRange {
            i,
            j,
            grid_w: spec.grid_w,
            grid_h: spec.grid_h,
        });
    }
    Ok(())
}

/// Average L1 flow magnitude over the foreground pixels of cell (i, j);
/// `None` when the cell has no foreground.
pub fn raw_cell_motion(
    flow: &FlowField,
    mask: &ForegroundMask,
    spec: &CellGridSpec,
    cell: (usize, usize),
) -> Result<Option<f64>, FeatureError> {
    let (i, j) = cell;
    check_cell(spec, i, j)?;
    let (x0, y0, x1, y1) = spec.cell_rect(i, j);
    let mut fg = 0u32;
    for y in y0..y1 {
        for x in x0..x1 {
            fg += mask.get(x, y) as u32;
        }
    }
    if fg == 0 {
        return Ok(None);
    }
    let mut sum = 0.0f64;
    for e in &flow.entries {
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= x0 && x < x1 && y >= y0 && y < y1 {
            sum += (e.vx.abs() + e.vy.abs()) as f64;
        }
    }
    Ok(Some(sum / fg as f64))
}

/// Temporal average over the present members of {t-1, t, t+1}.
pub fn smoothed_cell_motion(window: [Option<f64>; 3]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0u32;
    for v in window.into_iter().flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Weighted combination of the 3×3 occupancy neighborhood around a cell.
/// Out-of-frame neighbors must be supplied as 0.
pub fn cell_size(occupancies: [[f64; 3]; 3], kernel: &SizeKernel) -> f64 {
    let mut acc = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            acc += kernel.weights[a][b] * occupancies[a][b];
        }
    }
    acc
}

/// Per-orientation sum of Gabor magnitudes over the pixels of cell (i, j);
/// `None` when the cell has no foreground pixel.
pub fn cell_texture(
    maps: &MagnitudeMaps,
    spec: &CellGridSpec,
    cell: (usize, usize),
    occupancy: u32,
) -> Result<Option<[f64; 4]>, FeatureError> {
    let (i, j) = cell;
    check_cell(spec, i, j)?;
    if occupancy == 0 {
        return Ok(None);
    }
    let (x0, y0, x1, y1) = spec.cell_rect(i, j);
    let mut out = [0.0f64; 4];
    for y in y0..y1 {
        for x in x0..x1 {
            for o in 0..4 {
                out[o] += maps.maps[o][y * maps.width + x];
            }
        }
    }
    Ok(Some(out))
}

/// Foreground pixel count per cell.
pub fn occupancy_grid(mask: &ForegroundMask, spec: &CellGridSpec) -> Vec<u32> {
    let mut grid = vec![0u32; spec.cells()];
    for j in 0..spec.grid_h {
        for i in 0..spec.grid_w {
            let (x0, y0, x1, y1) = spec.cell_rect(i, j);
            let mut n = 0u32;
            for y in y0..y1 {
                for x in x0..x1 {
                    n += mask.get(x, y) as u32;
                }
            }
            grid[j * spec.grid_w + i] = n;
        }
    }
    grid
}

/// Raw cell motion for every cell of the grid in one pass over the flow field.
pub fn raw_motion_grid(
    flow: &FlowField,
    occupancy: &[u32],
    spec: &CellGridSpec,
) -> Vec<Option<f64>> {
    let mut sums = vec![0.0f64; spec.cells()];
    let n = spec.cell_size;
    for e in &flow.entries {
        let i = e.x as usize / n;
        let j = e.y as usize / n;
        if i < spec.grid_w && j < spec.grid_h {
            sums[j * spec.grid_w + i] += (e.vx.abs() + e.vy.abs()) as f64;
        }
    }
    sums.into_iter()
        .zip(occupancy)
        .map(|(sum, &occ)| (occ > 0).then(|| sum / occ as f64))
        .collect()
}

/// Size feature for every cell, zero-padding out-of-frame neighbors.
pub fn size_grid(occupancy: &[u32], spec: &CellGridSpec, kernel: &SizeKernel) -> Vec<f64> {
    let mut out = vec![0.0f64; spec.cells()];
    for j in 0..spec.grid_h {
        for i in 0..spec.grid_w {
            let mut neigh = [[0.0f64; 3]; 3];
            for (a, row) in neigh.iter_mut().enumerate() {
                for (b, v) in row.iter_mut().enumerate() {
                    let ii = i as isize + a as isize - 1;
                    let jj = j as isize + b as isize - 1;
                    if ii >= 0 && jj >= 0 && (ii as usize) < spec.grid_w && (jj as usize) < spec.grid_h
                    {
                        *v = occupancy[jj as usize * spec.grid_w + ii as usize] as f64;
                    }
                }
            }
            out[j * spec.grid_w + i] = cell_size(neigh, kernel);
        }
    }
    out
}

/// Texture descriptors for all occupied cells, computing Gabor magnitudes
/// only where needed. When `fg_only` is set, magnitudes are summed over
/// foreground pixels instead of all cell pixels.
pub fn texture_grid(
    frame: &GrayFrame,
    bank: &GaborBank,
    spec: &CellGridSpec,
    occupancy: &[u32],
    fg_only: Option<&ForegroundMask>,
) -> Result<Vec<Option<[f64; 4]>>, FeatureError> {
    if frame.width < bank.ksize || frame.height < bank.ksize {
        return Err(FeatureError::FrameSmallerThanKernel {
            frame_w: frame.width,
            frame_h: frame.height,
            ksize: bank.ksize,
        });
    }
    let norm = normalized_f64(frame);
    let (w, h) = (frame.width, frame.height);
    let cells: Vec<usize> = (0..spec.cells()).collect();
    let out: Vec<Option<[f64; 4]>> = cells
        .par_iter()
        .map_init(
            || vec![0.0f64; bank.ksize * bank.ksize],
            |window, &idx| {
                if occupancy[idx] == 0 {
                    return None;
                }
                let i = idx % spec.grid_w;
                let j = idx / spec.grid_w;
                let (x0, y0, x1, y1) = spec.cell_rect(i, j);
                let mut acc = [0.0f64; 4];
                for y in y0..y1 {
                    for x in x0..x1 {
                        if let Some(mask) = fg_only {
                            if !mask.get(x, y) {
                                continue;
                            }
                        }
                        let m = gabor_magnitude_at(&norm, w, h, bank, x, y, window);
                        for o in 0..4 {
                            acc[o] += m[o];
                        }
                    }
                }
                Some(acc)
            },
        )
        .collect();
    Ok(out)
}

/// All per-frame feature grids needed by training and detection.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub occupancy: Vec<u32>,
    pub size: Vec<f64>,
    /// Raw (unsmoothed) cell motion; `None` where the cell has no foreground
    /// or no flow was computed for the frame.
    pub raw_mot: Vec<Option<f64>>,
    pub txt: Vec<Option<[f64; 4]>>,
}

/// Feature-stage configuration shared by training and detection.
#[derive(Debug, Clone, Default)]
pub struct FeatureConfig {
    pub size_kernel: SizeKernel,
    pub gabor: GaborBank,
    /// Sum texture magnitudes over foreground pixels only.
    pub fg_only_texture: bool,
}

/// Compute occupancy, size, raw motion and texture grids for one frame.
/// `flow` is the field for displacement t → t+1 and is absent for the final
/// frame of a sequence.
pub fn compute_frame_features(
    frame: &GrayFrame,
    flow: Option<&FlowField>,
    mask: &ForegroundMask,
    spec: &CellGridSpec,
    cfg: &FeatureConfig,
) -> Result<FrameFeatures, FeatureError> {
    if mask.width != frame.width || mask.height != frame.height {
        return Err(FeatureError::DimensionMismatch(format!(
            "frame {}x{} vs mask {}x{}",
            frame.width, frame.height, mask.width, mask.height
        )));
    }
    let occupancy = occupancy_grid(mask, spec);
    let size = size_grid(&occupancy, spec, &cfg.size_kernel);
    let raw_mot = match flow {
        Some(field) => raw_motion_grid(field, &occupancy, spec),
        None => vec![None; spec.cells()],
    };
    let fg_mask = cfg.fg_only_texture.then_some(mask);
    let txt = texture_grid(frame, &cfg.gabor, spec, &occupancy, fg_mask)?;
    Ok(FrameFeatures { occupancy, size, raw_mot, txt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optflow::FlowEntry;
    use proptest::prelude::*;

    fn spec_16(w: usize, h: usize) -> CellGridSpec {
        CellGridSpec::from_frame_dims(w, h, 16).unwrap()
    }

    fn mask_with(w: usize, h: usize, px: &[(usize, usize)]) -> ForegroundMask {
        let mut m = ForegroundMask::empty(w, h);
        for &(x, y) in px {
            m.set(x, y, true);
        }
        m
    }

    #[test]
    fn motion_is_mean_l1_norm() {
        let spec = spec_16(64, 64);
        // all foreground pixels of cell (0, 0) flow at (3, 4)
        let px: Vec<(usize, usize)> = (0..16).flat_map(|y| (0..16).map(move |x| (x, y))).collect();
        let mask = mask_with(64, 64, &px);
        let entries = px
            .iter()
            .map(|&(x, y)| FlowEntry { x: x as u32, y: y as u32, vx: 3.0, vy: 4.0 })
            .collect();
        let flow = FlowField { entries };
        let mot = raw_cell_motion(&flow, &mask, &spec, (0, 0)).unwrap().unwrap();
        assert_eq!(mot, 7.0);
    }

    #[test]
    fn motion_absent_without_foreground() {
        let spec = spec_16(64, 64);
        let mask = ForegroundMask::empty(64, 64);
        let flow = FlowField::default();
        assert_eq!(raw_cell_motion(&flow, &mask, &spec, (1, 1)).unwrap(), None);
    }

    #[test]
    fn motion_averages_over_foreground_count() {
        let spec = spec_16(64, 64);
        let mask = mask_with(64, 64, &[(2, 3), (5, 7)]);
        let flow = FlowField {
            entries: vec![
                FlowEntry { x: 2, y: 3, vx: 1.0, vy: 0.0 },
                FlowEntry { x: 5, y: 7, vx: 0.0, vy: 3.0 },
            ],
        };
        let mot = raw_cell_motion(&flow, &mask, &spec, (0, 0)).unwrap().unwrap();
        assert_eq!(mot, 2.0);
    }

    #[test]
    fn motion_rejects_out_of_range_cell() {
        let spec = spec_16(64, 64);
        let mask = ForegroundMask::empty(64, 64);
        let flow = FlowField::default();
        assert!(matches!(
            raw_cell_motion(&flow, &mask, &spec, (4, 0)),
            Err(FeatureError::CellOutOfRange { .. })
        ));
    }

    #[test]
    fn smoothing_full_and_partial_windows() {
        assert_eq!(smoothed_cell_motion([Some(1.0), Some(2.0), Some(3.0)]), Some(2.0));
        assert_eq!(smoothed_cell_motion([None, Some(2.0), Some(4.0)]), Some(3.0));
        assert_eq!(smoothed_cell_motion([None, None, None]), None);
    }

    #[test]
    fn size_of_uniform_neighborhood_is_unchanged() {
        let k = SizeKernel::default();
        assert!((cell_size([[64.0; 3]; 3], &k) - 64.0).abs() < 1e-12);
    }

    #[test]
    fn size_weights_center_by_4_16() {
        let k = SizeKernel::default();
        let mut neigh = [[0.0; 3]; 3];
        neigh[1][1] = 160.0;
        assert!((cell_size(neigh, &k) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn corner_cell_zero_pads_missing_neighbors() {
        let k = SizeKernel::default();
        let spec = spec_16(48, 48);
        let occ = vec![16u32; spec.cells()];
        let sizes = size_grid(&occ, &spec, &k);
        // corner keeps center + right + down + diagonal = (4+2+2+1)/16
        assert!((sizes[0] - 9.0).abs() < 1e-12);
        // interior cell sees the full mask
        assert!((sizes[spec.grid_w + 1] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_kernel_degenerates_to_occupancy() {
        let mut w = [[0.0; 3]; 3];
        w[1][1] = 1.0;
        let k = SizeKernel::new(w).unwrap();
        let mut neigh = [[33.0; 3]; 3];
        neigh[1][1] = 123.0;
        assert_eq!(cell_size(neigh, &k), 123.0);
    }

    #[test]
    fn size_kernel_validation() {
        assert!(SizeKernel::new([[0.2; 3]; 3]).is_err()); // sums to 1.8
        let mut w = [[1.0 / 9.0; 3]; 3];
        w[0][0] = 2.0 / 9.0;
        w[1][1] = 0.0;
        assert!(SizeKernel::new(w).is_err()); // asymmetric, center not max
    }

    #[test]
    fn even_kernels_are_dc_free() {
        let bank = GaborBank::default();
        for k in &bank.kernels {
            let sum: f64 = k.even.iter().sum();
            assert!(sum.abs() < 1e-12, "even kernel sum {sum}");
        }
    }

    #[test]
    fn constant_frame_has_zero_magnitude() {
        let frame = GrayFrame::filled(32, 32, 140);
        let maps = gabor_responses(&frame, &GaborBank::default()).unwrap();
        for map in &maps.maps {
            for &v in map {
                assert!(v < 1e-12, "magnitude {v}");
            }
        }
    }

    #[test]
    fn frame_smaller_than_kernel_is_an_error() {
        let frame = GrayFrame::filled(8, 8, 0);
        assert!(matches!(
            gabor_responses(&frame, &GaborBank::default()),
            Err(FeatureError::FrameSmallerThanKernel { .. })
        ));
    }

    /// Independent direct-convolution oracle for one orientation.
    fn oracle_magnitude(frame: &GrayFrame, kernel: &GaborKernel, x: usize, y: usize) -> f64 {
        let k = kernel.size;
        let half = (k / 2) as isize;
        let mut even = 0.0f64;
        let mut odd = 0.0f64;
        for wy in 0..k {
            for wx in 0..k {
                let xx = (x as isize + wx as isize - half).clamp(0, frame.width as isize - 1);
                let yy = (y as isize + wy as isize - half).clamp(0, frame.height as isize - 1);
                let v = frame.get(xx as usize, yy as usize) as f64 / 255.0;
                even += v * kernel.even[wy * k + wx];
                odd += v * kernel.odd[wy * k + wx];
            }
        }
        (even * even + odd * odd).sqrt()
    }

    fn vertical_stripes(w: usize, h: usize, period: f64) -> GrayFrame {
        let mut data = Vec::with_capacity(w * h);
        for _y in 0..h {
            for x in 0..w {
                let v = 128.0 + 100.0 * (2.0 * std::f64::consts::PI * x as f64 / period).sin();
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        GrayFrame::new(w, h, data).unwrap()
    }

    #[test]
    fn stripes_excite_matching_orientation() {
        let bank = GaborBank::default();
        let frame = vertical_stripes(40, 40, bank.wavelength);
        let maps = gabor_responses(&frame, &bank).unwrap();
        // oracle agreement at a few interior pixels
        for &(x, y) in &[(10, 10), (20, 17), (29, 29)] {
            for o in 0..4 {
                let expect = oracle_magnitude(&frame, &bank.kernels[o], x, y);
                let got = maps.maps[o][y * frame.width + x];
                assert!((got - expect).abs() < 1e-9, "orientation {o} at ({x},{y})");
            }
        }
        // orientation 0 dominates in the interior
        let half = bank.ksize / 2;
        for y in half..40 - half {
            for x in half..40 - half {
                let m0 = maps.maps[0][y * 40 + x];
                for o in 1..4 {
                    assert!(
                        m0 > maps.maps[o][y * 40 + x],
                        "m0={m0} <= m{o}={} at ({x},{y})",
                        maps.maps[o][y * 40 + x]
                    );
                }
            }
        }
    }

    #[test]
    fn noise_frame_has_positive_response() {
        let mut data = Vec::with_capacity(32 * 32);
        let mut state = 0x1234_5678_u64;
        for _ in 0..32 * 32 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            data.push((state >> 56) as u8);
        }
        let frame = GrayFrame::new(32, 32, data).unwrap();
        let maps = gabor_responses(&frame, &GaborBank::default()).unwrap();
        for map in &maps.maps {
            assert!(map.iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn texture_sums_match_spec_examples() {
        let spec = spec_16(32, 32);
        let zero = MagnitudeMaps {
            width: 32,
            height: 32,
            maps: std::array::from_fn(|_| vec![0.0; 32 * 32]),
        };
        assert_eq!(
            cell_texture(&zero, &spec, (0, 0), 5).unwrap(),
            Some([0.0, 0.0, 0.0, 0.0])
        );
        assert_eq!(cell_texture(&zero, &spec, (0, 0), 0).unwrap(), None);
        let half = MagnitudeMaps {
            width: 32,
            height: 32,
            maps: std::array::from_fn(|_| vec![0.5; 32 * 32]),
        };
        let txt = cell_texture(&half, &spec, (1, 1), 3).unwrap().unwrap();
        for v in txt {
            assert!((v - 128.0).abs() < 1e-9);
        }
    }

    #[test]
    fn texture_grid_matches_full_map_path() {
        let bank = GaborBank::default();
        let frame = vertical_stripes(48, 48, 7.0);
        let spec = spec_16(48, 48);
        let mut mask = ForegroundMask::empty(48, 48);
        for y in 4..20 {
            for x in 4..30 {
                mask.set(x, y, true);
            }
        }
        let occ = occupancy_grid(&mask, &spec);
        let grid = texture_grid(&frame, &bank, &spec, &occ, None).unwrap();
        let maps = gabor_responses(&frame, &bank).unwrap();
        for j in 0..spec.grid_h {
            for i in 0..spec.grid_w {
                let idx = j * spec.grid_w + i;
                let reference = cell_texture(&maps, &spec, (i, j), occ[idx]).unwrap();
                match (grid[idx], reference) {
                    (None, None) => {}
                    (Some(a), Some(b)) => {
                        for o in 0..4 {
                            assert!((a[o] - b[o]).abs() < 1e-9, "cell ({i},{j}) o={o}");
                        }
                    }
                    other => panic!("presence mismatch at ({i},{j}): {other:?}"),
                }
            }
        }
    }

    #[test]
    fn texture_invariant_to_intensity_offset() {
        let bank = GaborBank::default();
        let spec = spec_16(32, 32);
        let base = vertical_stripes(32, 32, 6.0);
        // compress into [40, 160] so +60 does not clip
        let low = GrayFrame::new(
            32,
            32,
            base.data.iter().map(|&v| 40 + (v as u16 * 120 / 255) as u8).collect(),
        )
        .unwrap();
        let high = GrayFrame::new(32, 32, low.data.iter().map(|&v| v + 60).collect()).unwrap();
        let occ = vec![1u32; spec.cells()];
        let a = texture_grid(&low, &bank, &spec, &occ, None).unwrap();
        let b = texture_grid(&high, &bank, &spec, &occ, None).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            let (ta, tb) = (ta.unwrap(), tb.unwrap());
            for o in 0..4 {
                assert!((ta[o] - tb[o]).abs() < 1e-6, "{} vs {}", ta[o], tb[o]);
            }
        }
    }

    proptest! {
        #[test]
        fn motion_is_homogeneous_in_flow_scale(
            exp in -2i32..4,
            vals in proptest::collection::vec((0.0f32..4.0, 0.0f32..4.0), 1..20),
        ) {
            let k = 2.0f32.powi(exp);
            let spec = spec_16(32, 32);
            let px: Vec<(usize, usize)> =
                (0..vals.len()).map(|n| (n % 16, n / 16)).collect();
            let mask = mask_with(32, 32, &px);
            let base = FlowField {
                entries: px
                    .iter()
                    .zip(&vals)
                    .map(|(&(x, y), &(vx, vy))| FlowEntry { x: x as u32, y: y as u32, vx, vy })
                    .collect(),
            };
            let scaled = FlowField {
                entries: base
                    .entries
                    .iter()
                    .map(|e| FlowEntry { vx: k * e.vx, vy: k * e.vy, ..*e })
                    .collect(),
            };
            let m1 = raw_cell_motion(&base, &mask, &spec, (0, 0)).unwrap().unwrap();
            let m2 = raw_cell_motion(&scaled, &mask, &spec, (0, 0)).unwrap().unwrap();
            // powers of two keep the scaling exact in floating point
            prop_assert_eq!(m2, k as f64 * m1);
        }

        #[test]
        fn cell_size_is_monotone_in_occupancy(
            base in proptest::collection::vec(0.0f64..256.0, 9),
            bump in 0.0f64..64.0,
            slot in 0usize..9,
        ) {
            let kernel = SizeKernel::default();
            let to_neigh = |v: &[f64]| {
                let mut n = [[0.0; 3]; 3];
                for a in 0..3 {
                    for b in 0..3 {
                        n[a][b] = v[a * 3 + b];
                    }
                }
                n
            };
            let mut bumped = base.clone();
            bumped[slot] += bump;
            let s0 = cell_size(to_neigh(&base), &kernel);
            let s1 = cell_size(to_neigh(&bumped), &kernel);
            prop_assert!(s1 >= s0);
        }
    }
}
