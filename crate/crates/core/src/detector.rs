//! Two-stage cascade classification and spatio-temporal post-filtering.
//!
//! A cell is anomalous if (a) its motion probability falls below the decision
//! threshold, or else (b) its size probability falls below the threshold AND
//! no codebook entry correlates with its texture above the texture gate. The
//! second stage is not consulted when the first fires. A 3×3×3 neighborhood
//! vote then removes isolated flags: a raw-anomalous cell survives only if
//! each of the three temporal planes around it contains at least two
//! raw-anomalous cells.
//!
//! Untrained cells read as probability 0 (and best-match correlation -1), so
//! any activity in a region never seen during training is flagged.

use rayon::prelude::*;
use thiserror::Error;

use crate::features::{
    compute_frame_features, smoothed_cell_motion, CellFeatures, FeatureConfig, FeatureError,
    FrameFeatures,
};
use crate::foreground::ForegroundMask;
use crate::ingest::{CellGrid, CellGridSpec, FrameSequence};
use crate::models::{pmf_lookup, CellModel, ModelGrid, MATCH_THRESHOLD};
use crate::optflow::{lucas_kanade, FlowConfig, FlowError};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("{found} masks for {expected} frames")]
    MaskCount { expected: usize, found: usize },
    #[error("frame {frame}: mask is {mask_w}x{mask_h}, frame is {frame_w}x{frame_h}")]
    MaskDimensionMismatch {
        frame: usize,
        frame_w: usize,
        frame_h: usize,
        mask_w: usize,
        mask_h: usize,
    },
    #[error("model grid is {model_w}x{model_h} cells of {model_cell}, frames imply {frame_w}x{frame_h}")]
    SpecMismatch {
        model_w: usize,
        model_h: usize,
        model_cell: usize,
        frame_w: usize,
        frame_h: usize,
    },
    #[error("frame {frame}: {source}")]
    Flow {
        frame: usize,
        #[source]
        source: FlowError,
    },
    #[error("frame {frame}: {source}")]
    Feature {
        frame: usize,
        #[source]
        source: FeatureError,
    },
}

/// Decision thresholds for the cascade.
#[derive(Debug, Clone, Copy)]
pub struct DetectorConfig {
    /// Decision threshold T applied to both pmf lookups.
    pub threshold: f64,
    /// Texture gate ρ*: size alarms are vetoed at or above this correlation.
    pub texture_gate: f64,
    /// Features trained on fewer samples than this read as untrained.
    pub min_train_samples: usize,
    /// Optional per-feature overrides of T; off by default so one threshold
    /// serves both conditions.
    pub mot_threshold: Option<f64>,
    pub size_threshold: Option<f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.01,
            texture_gate: MATCH_THRESHOLD,
            min_train_samples: 1,
            mot_threshold: None,
            size_threshold: None,
        }
    }
}

/// Which cascade stage flagged the cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reason {
    Motion,
    SizeTexture,
}

impl Reason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Reason::Motion => "motion",
            Reason::SizeTexture => "size+texture",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellClass {
    Normal,
    Anomalous(Reason),
}

impl CellClass {
    pub fn is_anomalous(&self) -> bool {
        matches!(self, CellClass::Anomalous(_))
    }
}

/// Classification plus the sweepable anomaly score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellDecision {
    pub class: CellClass,
    /// min(p_mot, gated size score); thresholding this at T reproduces the
    /// cascade decision at every T.
    pub score: f64,
}

/// Classify one analysed cell (occupancy >= 1).
pub fn classify_cell(
    features: &CellFeatures,
    model: &CellModel,
    cfg: &DetectorConfig,
) -> CellDecision {
    let t_mot = cfg.mot_threshold.unwrap_or(cfg.threshold);
    let t_size = cfg.size_threshold.unwrap_or(cfg.threshold);
    let mot_prob = features.mot.map(|m| match &model.motion_pmf {
        Some(pmf) if model.motion_samples() >= cfg.min_train_samples => pmf_lookup(pmf, m),
        _ => 0.0,
    });
    let size_prob = match &model.size_pmf {
        Some(pmf) if model.size_samples() >= cfg.min_train_samples => {
            pmf_lookup(pmf, features.size)
        }
        _ => 0.0,
    };
    let rho_max = match &features.txt {
        Some(txt) if model.texture_samples() >= cfg.min_train_samples => {
            model.codebook.best_match(txt)
        }
        _ => -1.0,
    };
    let size_score = if rho_max < cfg.texture_gate { size_prob } else { 1.0 };
    let score = mot_prob.unwrap_or(1.0).min(size_score);

    // condition (a); the second classifier is not consulted when it fires
    if let Some(p) = mot_prob {
        if p < t_mot {
            return CellDecision { class: CellClass::Anomalous(Reason::Motion), score };
        }
    }
    // condition (b)
    if size_prob < t_size && rho_max < cfg.texture_gate {
        return CellDecision { class: CellClass::Anomalous(Reason::SizeTexture), score };
    }
    CellDecision { class: CellClass::Normal, score }
}

fn plane_count(grid: &CellGrid, i: usize, j: usize) -> u32 {
    let mut n = 0u32;
    for dj in -1isize..=1 {
        let jj = j as isize + dj;
        if jj < 0 || jj >= grid.grid_h as isize {
            continue;
        }
        for di in -1isize..=1 {
            let ii = i as isize + di;
            if ii < 0 || ii >= grid.grid_w as isize {
                continue;
            }
            n += grid.get(ii as usize, jj as usize) as u32;
        }
    }
    n
}

/// Spatio-temporal vote on the raw grid at time t given its temporal
/// neighbors. A raw-anomalous cell stays anomalous iff every existing plane
/// (t-1, t, t+1) holds at least two raw-anomalous cells in the 3×3
/// neighborhood; at sequence boundaries only the existing planes are checked.
pub fn postprocess(
    prev: Option<&CellGrid>,
    cur: &CellGrid,
    next: Option<&CellGrid>,
) -> CellGrid {
    let mut out = CellGrid::new(cur.grid_w, cur.grid_h);
    for j in 0..cur.grid_h {
        for i in 0..cur.grid_w {
            if !cur.get(i, j) {
                continue;
            }
            let keep = [prev, Some(cur), next]
                .into_iter()
                .flatten()
                .all(|plane| plane_count(plane, i, j) >= 2);
            out.set(i, j, keep);
        }
    }
    out
}

/// Per-frame classification output.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    /// Cells with at least one foreground pixel, i.e. the cells the
    /// cascade actually ran on.
    pub analysed: CellGrid,
    /// Cascade decisions before post-filtering.
    pub raw: CellGrid,
    /// After the 3×3×3 vote; always a subset of `raw`.
    pub final_grid: CellGrid,
    /// Per-cell anomaly scores; 1.0 for cells that were not analysed.
    pub scores: Vec<f64>,
    /// Raw-stage reasons for flagged cells.
    pub reasons: Vec<Option<Reason>>,
}

/// Detection output over a whole sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyVolume {
    pub spec: CellGridSpec,
    pub frames: Vec<FrameDetections>,
    /// Per-frame score: minimum cell score over analysed cells (1.0 when the
    /// frame has none). Thresholding at T matches the raw cascade decisions.
    pub frame_scores: Vec<f64>,
}

impl AnomalyVolume {
    /// Frame-level decision: anomalous iff any cell survived post-filtering.
    pub fn frame_flag(&self, t: usize) -> bool {
        self.frames[t].final_grid.count() > 0
    }
}

fn validate_masks(
    frames: &FrameSequence,
    masks: &[ForegroundMask],
) -> Result<(), DetectError> {
    if masks.len() != frames.len() {
        return Err(DetectError::MaskCount { expected: frames.len(), found: masks.len() });
    }
    for (t, (frame, mask)) in frames.frames.iter().zip(masks).enumerate() {
        if frame.width != mask.width || frame.height != mask.height {
            return Err(DetectError::MaskDimensionMismatch {
                frame: t,
                frame_w: frame.width,
                frame_h: frame.height,
                mask_w: mask.width,
                mask_h: mask.height,
            });
        }
    }
    Ok(())
}

/// Foreground flow plus feature grids for every frame of a sequence.
/// Flow for frame t measures displacement t → t+1; the final frame has none.
pub fn compute_sequence_features(
    frames: &FrameSequence,
    masks: &[ForegroundMask],
    spec: &CellGridSpec,
    flow_cfg: &FlowConfig,
    feat_cfg: &FeatureConfig,
) -> Result<Vec<FrameFeatures>, DetectError> {
    validate_masks(frames, masks)?;
    let len = frames.len();
    (0..len)
        .into_par_iter()
        .map(|t| {
            let flow = if t + 1 < len {
                Some(
                    lucas_kanade(&frames.frames[t], &frames.frames[t + 1], &masks[t], flow_cfg)
                        .map_err(|source| DetectError::Flow { frame: t, source })?,
                )
            } else {
                None
            };
            compute_frame_features(&frames.frames[t], flow.as_ref(), &masks[t], spec, feat_cfg)
                .map_err(|source| DetectError::Feature { frame: t, source })
        })
        .collect()
}

/// Run the full per-frame pipeline: features, cascade classification and
/// spatio-temporal post-filtering.
pub fn detect_sequence(
    frames: &FrameSequence,
    masks: &[ForegroundMask],
    models: &ModelGrid,
    flow_cfg: &FlowConfig,
    feat_cfg: &FeatureConfig,
    det_cfg: &DetectorConfig,
) -> Result<AnomalyVolume, DetectError> {
    let spec = models.spec;
    if spec.grid_w != frames.width() / spec.cell_size
        || spec.grid_h != frames.height() / spec.cell_size
    {
        return Err(DetectError::SpecMismatch {
            model_w: spec.grid_w,
            model_h: spec.grid_h,
            model_cell: spec.cell_size,
            frame_w: frames.width(),
            frame_h: frames.height(),
        });
    }
    let features = compute_sequence_features(frames, masks, &spec, flow_cfg, feat_cfg)?;
    Ok(classify_and_filter(&features, models, det_cfg))
}

/// Classification and post-filtering over precomputed feature grids.
pub fn classify_and_filter(
    features: &[FrameFeatures],
    models: &ModelGrid,
    det_cfg: &DetectorConfig,
) -> AnomalyVolume {
    let spec = models.spec;
    let cells = spec.cells();
    let len = features.len();
    let mut analysed_grids = Vec::with_capacity(len);
    let mut raw_grids = Vec::with_capacity(len);
    let mut score_grids = Vec::with_capacity(len);
    let mut reason_grids = Vec::with_capacity(len);
    let mut frame_scores = Vec::with_capacity(len);
    for t in 0..len {
        let mut analysed = CellGrid::new(spec.grid_w, spec.grid_h);
        let mut raw = CellGrid::new(spec.grid_w, spec.grid_h);
        let mut scores = vec![1.0f64; cells];
        let mut reasons = vec![None; cells];
        let mut frame_score = 1.0f64;
        for idx in 0..cells {
            if features[t].occupancy[idx] == 0 {
                continue;
            }
            analysed.cells[idx] = true;
            let before = t.checked_sub(1).and_then(|p| features[p].raw_mot[idx]);
            let after = features.get(t + 1).and_then(|f| f.raw_mot[idx]);
            let cell_features = CellFeatures {
                mot: smoothed_cell_motion([before, features[t].raw_mot[idx], after]),
                size: features[t].size[idx],
                txt: features[t].txt[idx],
                occupancy: features[t].occupancy[idx],
            };
            let decision = classify_cell(&cell_features, &models.cells[idx], det_cfg);
            scores[idx] = decision.score;
            frame_score = frame_score.min(decision.score);
            if let CellClass::Anomalous(reason) = decision.class {
                raw.cells[idx] = true;
                reasons[idx] = Some(reason);
            }
        }
        analysed_grids.push(analysed);
        raw_grids.push(raw);
        score_grids.push(scores);
        reason_grids.push(reasons);
        frame_scores.push(frame_score);
    }
    let frames = (0..len)
        .map(|t| {
            let prev = t.checked_sub(1).map(|p| &raw_grids[p]);
            let next = raw_grids.get(t + 1);
            let final_grid = postprocess(prev, &raw_grids[t], next);
            FrameDetections {
                analysed: analysed_grids[t].clone(),
                raw: raw_grids[t].clone(),
                final_grid,
                scores: score_grids[t].clone(),
                reasons: reason_grids[t].clone(),
            }
        })
        .collect();
    AnomalyVolume { spec, frames, frame_scores }
}
