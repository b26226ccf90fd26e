//! Foreground segmentation: temporal-median background model with a fixed
//! difference threshold, plus a loader for externally produced masks.
//!
//! The background is trained once on the training sequences and held fixed
//! during testing. Segmentation applies one 3×3 binary median pass to remove
//! speckle; any better segmentation method can be plugged in through
//! [`load_external_masks`].

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ingest::{self, FrameSequence, GrayFrame, IngestError};

#[derive(Debug, Error)]
pub enum ForegroundError {
    #[error("background training needs at least 3 frames, got {0}")]
    TooFewFrames(usize),
    #[error("frame is {frame_w}x{frame_h} but background model is {model_w}x{model_h}")]
    DimensionMismatch {
        frame_w: usize,
        frame_h: usize,
        model_w: usize,
        model_h: usize,
    },
    #[error("mask {path} is {found_w}x{found_h}, expected {expect_w}x{expect_h}")]
    MaskDimensionMismatch {
        path: PathBuf,
        expect_w: usize,
        expect_h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Fixed per-pixel reference intensities plus the difference threshold τ.
#[derive(Debug, Clone)]
pub struct BackgroundModel {
    pub width: usize,
    pub height: usize,
    pub background: Vec<u8>,
    pub threshold: u8,
}

/// Per-pixel binary foreground mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl ForegroundMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn from_frame(frame: &GrayFrame) -> Self {
        Self {
            width: frame.width,
            height: frame.height,
            bits: frame.data.iter().map(|&v| v != 0).collect(),
        }
    }
}

/// Accumulates per-pixel intensity histograms so the median can be taken
/// over arbitrarily many frames in fixed memory.
pub struct BackgroundAccumulator {
    width: usize,
    height: usize,
    histograms: Vec<u32>, // pixel-major, 256 bins each
    frames: usize,
}

impl BackgroundAccumulator {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, histograms: vec![0; width * height * 256], frames: 0 }
    }

    pub fn push(&mut self, frame: &GrayFrame) -> Result<(), ForegroundError> {
        if frame.width != self.width || frame.height != self.height {
            return Err(ForegroundError::DimensionMismatch {
                frame_w: frame.width,
                frame_h: frame.height,
                model_w: self.width,
                model_h: self.height,
            });
        }
        for (px, &v) in frame.data.iter().enumerate() {
            self.histograms[px * 256 + v as usize] += 1;
        }
        self.frames += 1;
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Per-pixel temporal median (lower median for even counts).
    pub fn finish(self, threshold: u8) -> Result<BackgroundModel, ForegroundError> {
        if self.frames < 3 {
            return Err(ForegroundError::TooFewFrames(self.frames));
        }
        let rank = self.frames.div_ceil(2); // 1-based lower median
        let background = self
            .histograms
            .chunks_exact(256)
            .map(|hist| {
                let mut seen = 0u32;
                for (value, &count) in hist.iter().enumerate() {
                    seen += count;
                    if seen as usize >= rank {
                        return value as u8;
                    }
                }
                255
            })
            .collect();
        Ok(BackgroundModel { width: self.width, height: self.height, background, threshold })
    }
}

/// Train a background model as the per-pixel temporal median of `frames`.
pub fn train_background(
    frames: &FrameSequence,
    threshold: u8,
) -> Result<BackgroundModel, ForegroundError> {
    if frames.len() < 3 {
        return Err(ForegroundError::TooFewFrames(frames.len()));
    }
    let mut acc = BackgroundAccumulator::new(frames.width(), frames.height());
    for frame in &frames.frames {
        acc.push(frame)?;
    }
    acc.finish(threshold)
}

/// Threshold |frame - background| > τ, then one 3×3 binary median pass with
/// edge replication.
pub fn segment(frame: &GrayFrame, model: &BackgroundModel) -> Result<ForegroundMask, ForegroundError> {
    if frame.width != model.width || frame.height != model.height {
        return Err(ForegroundError::DimensionMismatch {
            frame_w: frame.width,
            frame_h: frame.height,
            model_w: model.width,
            model_h: model.height,
        });
    }
    let (w, h) = (frame.width, frame.height);
    let mut raw = vec![false; w * h];
    for (out, (&f, &b)) in raw.iter_mut().zip(frame.data.iter().zip(model.background.iter())) {
        *out = f.abs_diff(b) > model.threshold;
    }
    Ok(ForegroundMask { width: w, height: h, bits: median3x3(&raw, w, h) })
}

/// 3×3 binary median (majority of the 9-neighborhood), edges replicated.
fn median3x3(bits: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut out = vec![false; w * h];
    let clamp = |v: isize, hi: usize| -> usize { v.clamp(0, hi as isize - 1) as usize };
    for y in 0..h {
        for x in 0..w {
            let mut ones = 0u32;
            for dy in -1isize..=1 {
                let yy = clamp(y as isize + dy, h);
                for dx in -1isize..=1 {
                    let xx = clamp(x as isize + dx, w);
                    ones += bits[yy * w + xx] as u32;
                }
            }
            out[y * w + x] = ones >= 5;
        }
    }
    out
}

/// Load externally produced P5 masks; any nonzero pixel is foreground.
pub fn load_external_masks(
    dir: &Path,
    pattern: &str,
) -> Result<Vec<ForegroundMask>, ForegroundError> {
    let paths = ingest::matching_files(dir, pattern)?;
    if paths.is_empty() {
        return Err(ForegroundError::Ingest(IngestError::NoFramesMatched {
            dir: dir.to_path_buf(),
            pattern: pattern.to_string(),
        }));
    }
    let mut masks: Vec<ForegroundMask> = Vec::with_capacity(paths.len());
    for path in &paths {
        let frame = ingest::load_frame(path)?;
        if let Some(first) = masks.first() {
            if frame.width != first.width || frame.height != first.height {
                return Err(ForegroundError::MaskDimensionMismatch {
                    path: path.clone(),
                    expect_w: first.width,
                    expect_h: first.height,
                    found_w: frame.width,
                    found_h: frame.height,
                });
            }
        }
        masks.push(ForegroundMask::from_frame(&frame));
    }
    Ok(masks)
}
