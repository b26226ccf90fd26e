//! Evaluation protocol: frame-level ROC/EER, pixel-level localization
//! scoring, and deterministic synthetic scene generation for desk-scale
//! validation.
//!
//! Frames are predicted anomalous when their score falls strictly below the
//! sweep threshold. The reported rates are false positive rate and false
//! negative rate; the equal error rate is found by linear interpolation
//! between the two sweep points where FNR - FPR changes sign.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::foreground::ForegroundMask;
use crate::ingest::{FrameSequence, GrayFrame};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{scores} scores for {gt} ground-truth frames")]
    LengthMismatch { scores: usize, gt: usize },
    #[error("degenerate ground truth: needs at least one anomalous and one normal frame")]
    DegenerateGroundTruth,
    #[error("mask size mismatch: detected {det_w}x{det_h}, ground truth {gt_w}x{gt_h}")]
    SizeMismatch { det_w: usize, det_h: usize, gt_w: usize, gt_h: usize },
    #[error("empty threshold sweep")]
    EmptySweep,
    #[error("scenario line {line}: {msg}")]
    Scenario { line: usize, msg: String },
    #[error("blob {blob} placed outside frame bounds")]
    BlobOutOfBounds { blob: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ground-truth flag file {path} line {line}: expected 0 or 1")]
    BadFlag { path: PathBuf, line: usize },
}

/// One point of a threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub fnr: f64,
}

/// Threshold sweep plus the interpolated equal error rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub eer: f64,
}

/// Interpolated EER: the first point where FNR - FPR reaches zero, or the
/// linear crossing between the two adjacent points where the sign changes.
fn eer_from_points(points: &[RocPoint]) -> Result<f64, EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptySweep);
    }
    let d = |p: &RocPoint| p.fnr - p.fpr;
    if d(&points[0]) == 0.0 {
        return Ok(points[0].fpr);
    }
    if d(&points[0]) < 0.0 {
        // sweep starts past the crossing; report its first point
        return Ok(0.5 * (points[0].fpr + points[0].fnr));
    }
    for k in 1..points.len() {
        let d0 = d(&points[k - 1]);
        let d1 = d(&points[k]);
        if d1 <= 0.0 {
            if d1 == 0.0 {
                return Ok(points[k].fpr);
            }
            let alpha = d0 / (d0 - d1);
            return Ok(points[k - 1].fpr + alpha * (points[k].fpr - points[k - 1].fpr));
        }
    }
    // no crossing in the supplied sweep: report the closest approach
    let best = points
        .iter()
        .min_by(|a, b| d(a).abs().partial_cmp(&d(b).abs()).unwrap())
        .expect("non-empty");
    Ok(0.5 * (best.fpr + best.fnr))
}

/// Assemble a curve from externally computed sweep points: sorts by
/// threshold and interpolates the EER.
pub fn roc_from_points(mut points: Vec<RocPoint>) -> Result<RocCurve, EvalError> {
    points.sort_by(|a, b| a.threshold.partial_cmp(&b.threshold).unwrap());
    let eer = eer_from_points(&points)?;
    Ok(RocCurve { points, eer })
}

/// Frame-level ROC: sweep thresholds over the distinct score values plus
/// ±infinity sentinels; a frame is predicted anomalous iff score < T.
pub fn frame_roc(frame_scores: &[f64], gt: &[bool]) -> Result<RocCurve, EvalError> {
    if frame_scores.len() != gt.len() {
        return Err(EvalError::LengthMismatch { scores: frame_scores.len(), gt: gt.len() });
    }
    let positives = gt.iter().filter(|&&g| g).count();
    let negatives = gt.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::DegenerateGroundTruth);
    }
    let mut order: Vec<usize> = (0..frame_scores.len()).collect();
    order.sort_by(|&a, &b| frame_scores[a].partial_cmp(&frame_scores[b]).unwrap());

    let mut thresholds = vec![f64::NEG_INFINITY];
    for &idx in &order {
        let s = frame_scores[idx];
        if *thresholds.last().unwrap() != s {
            thresholds.push(s);
        }
    }
    thresholds.push(f64::INFINITY);

    let mut points = Vec::with_capacity(thresholds.len());
    // walk the sorted scores once per threshold: everything strictly below T
    // is detected
    let mut cursor = 0usize;
    let mut pos_detected = 0usize;
    let mut neg_detected = 0usize;
    for &t in &thresholds {
        while cursor < order.len() && frame_scores[order[cursor]] < t {
            if gt[order[cursor]] {
                pos_detected += 1;
            } else {
                neg_detected += 1;
            }
            cursor += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: neg_detected as f64 / negatives as f64,
            fnr: (positives - pos_detected) as f64 / positives as f64,
        });
    }
    let eer = eer_from_points(&points)?;
    Ok(RocCurve { points, eer })
}

/// Localization hit test: at least 40% of detected pixels overlap the
/// ground-truth anomalous pixels. An empty detection is never a hit.
pub fn localization_hit(detected: &ForegroundMask, gt: &ForegroundMask) -> Result<bool, EvalError> {
    if detected.width != gt.width || detected.height != gt.height {
        return Err(EvalError::SizeMismatch {
            det_w: detected.width,
            det_h: detected.height,
            gt_w: gt.width,
            gt_h: gt.height,
        });
    }
    let mut det = 0usize;
    let mut hit = 0usize;
    for (d, g) in detected.bits.iter().zip(&gt.bits) {
        det += *d as usize;
        hit += (*d && *g) as usize;
    }
    if det == 0 {
        return Ok(false);
    }
    Ok(hit as f64 / det as f64 >= 0.40)
}

/// Pixel-level localization ROC over an externally built sweep: one set of
/// per-frame detection masks per threshold. FNR is the fraction of
/// ground-truth anomalous frames not hit; FPR the fraction of normal frames
/// with any detection.
pub fn localization_roc(
    sweep: &[(f64, Vec<ForegroundMask>)],
    gt: &[ForegroundMask],
) -> Result<RocCurve, EvalError> {
    if sweep.is_empty() {
        return Err(EvalError::EmptySweep);
    }
    let anomalous: Vec<bool> = gt.iter().map(|m| m.count() > 0).collect();
    let positives = anomalous.iter().filter(|&&a| a).count();
    let negatives = gt.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::DegenerateGroundTruth);
    }
    let mut points = Vec::with_capacity(sweep.len());
    for (threshold, detections) in sweep {
        if detections.len() != gt.len() {
            return Err(EvalError::LengthMismatch { scores: detections.len(), gt: gt.len() });
        }
        let mut misses = 0usize;
        let mut false_alarms = 0usize;
        for ((det, gt_mask), &is_anomalous) in detections.iter().zip(gt).zip(&anomalous) {
            if is_anomalous {
                if !localization_hit(det, gt_mask)? {
                    misses += 1;
                }
            } else if det.count() > 0 {
                false_alarms += 1;
            }
        }
        points.push(RocPoint {
            threshold: *threshold,
            fpr: false_alarms as f64 / negatives as f64,
            fnr: misses as f64 / positives as f64,
        });
    }
    roc_from_points(points)
}

/// Read a per-frame ground-truth flag file: one `0` or `1` per line.
pub fn read_frame_flags(path: &Path) -> Result<Vec<bool>, EvalError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EvalError::Io { path: path.to_path_buf(), source: e })?;
    let mut flags = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "0" => flags.push(false),
            "1" => flags.push(true),
            _ => {
                return Err(EvalError::BadFlag { path: path.to_path_buf(), line: lineno + 1 })
            }
        }
    }
    Ok(flags)
}

/// Blob fill pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlobTexture {
    Flat,
    /// Square-wave stripes; the orientation is the direction of intensity
    /// variation (0° varies along x, i.e. vertical bands).
    Stripes { orientation_deg: f64, period: f64, contrast: u8 },
}

/// One moving square blob. Blobs bounce off the frame edges, so only the
/// initial placement can be out of bounds.
#[derive(Debug, Clone)]
pub struct BlobSpec {
    /// Top-left corner at t = 0, in pixels.
    pub start: (f64, f64),
    /// Direction of travel; normalized internally.
    pub dir: (f64, f64),
    /// Speed in px/frame.
    pub speed: f64,
    /// Square side in pixels.
    pub size: usize,
    pub intensity: u8,
    pub texture: BlobTexture,
    pub anomalous: bool,
    /// Half-open frame range [start, end) during which the blob is rendered.
    pub appear: Option<(usize, usize)>,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            start: (0.0, 0.0),
            dir: (1.0, 0.0),
            speed: 1.0,
            size: 12,
            intensity: 220,
            texture: BlobTexture::Flat,
            anomalous: false,
            appear: None,
        }
    }
}

/// Full scenario: a textured static background plus moving blobs.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    pub bg_base: u8,
    pub bg_noise: u8,
    pub blobs: Vec<BlobSpec>,
}

impl ScenarioSpec {
    pub fn new(width: usize, height: usize, frames: usize) -> Self {
        Self { width, height, frames, seed: 0, bg_base: 100, bg_noise: 20, blobs: Vec::new() }
    }
}

/// Rendered scenario plus both ground truths.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub frames: FrameSequence,
    /// Perfect per-frame foreground masks (all blob pixels).
    pub masks: Vec<ForegroundMask>,
    /// Per-frame anomaly flag: any anomalous blob rendered.
    pub frame_gt: Vec<bool>,
    /// Per-frame masks of anomalous blob pixels.
    pub pixel_gt: Vec<ForegroundMask>,
}

fn blob_pixel(blob: &BlobSpec, rel_x: usize, rel_y: usize) -> u8 {
    match blob.texture {
        BlobTexture::Flat => blob.intensity,
        BlobTexture::Stripes { orientation_deg, period, contrast } => {
            let theta = orientation_deg.to_radians();
            let u = rel_x as f64 * theta.cos() + rel_y as f64 * theta.sin();
            let phase = (2.0 * std::f64::consts::PI * u / period).sin();
            if phase >= 0.0 {
                blob.intensity.saturating_add(contrast)
            } else {
                blob.intensity.saturating_sub(contrast)
            }
        }
    }
}

/// Render the scenario deterministically. The background is static noise in
/// [base - noise, base + noise] drawn once from the seed; blob trajectories
/// integrate per frame and reflect off the edges.
pub fn synth_scene(spec: &ScenarioSpec) -> Result<SynthScene, EvalError> {
    let (w, h) = (spec.width, spec.height);
    for (b, blob) in spec.blobs.iter().enumerate() {
        if blob.size == 0 || blob.size > w || blob.size > h {
            return Err(EvalError::BlobOutOfBounds { blob: b });
        }
        let (x, y) = blob.start;
        if x < 0.0 || y < 0.0 || x > (w - blob.size) as f64 || y > (h - blob.size) as f64 {
            return Err(EvalError::BlobOutOfBounds { blob: b });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background: Vec<u8> = (0..w * h)
        .map(|_| {
            let lo = spec.bg_base.saturating_sub(spec.bg_noise);
            let hi = spec.bg_base.saturating_add(spec.bg_noise);
            rng.random_range(lo..=hi)
        })
        .collect();

    // integrate trajectories with edge reflection
    let mut pos: Vec<(f64, f64)> = spec.blobs.iter().map(|b| b.start).collect();
    let mut dir: Vec<(f64, f64)> = spec
        .blobs
        .iter()
        .map(|b| {
            let norm = (b.dir.0 * b.dir.0 + b.dir.1 * b.dir.1).sqrt();
            if norm == 0.0 {
                (0.0, 0.0)
            } else {
                (b.dir.0 / norm, b.dir.1 / norm)
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut frame_gt = Vec::with_capacity(spec.frames);
    let mut pixel_gt = Vec::with_capacity(spec.frames);

    for t in 0..spec.frames {
        let mut frame = GrayFrame { width: w, height: h, data: background.clone() };
        let mut mask = ForegroundMask::empty(w, h);
        let mut gt_mask = ForegroundMask::empty(w, h);
        let mut any_anomalous = false;

        for (b, blob) in spec.blobs.iter().enumerate() {
            let visible = match blob.appear {
                Some((start, end)) => t >= start && t < end,
                None => true,
            };
            if visible {
                let (px, py) = pos[b];
                let x0 = px.round() as usize;
                let y0 = py.round() as usize;
                for ry in 0..blob.size {
                    for rx in 0..blob.size {
                        let (x, y) = (x0 + rx, y0 + ry);
                        if x >= w || y >= h {
                            continue;
                        }
                        frame.set(x, y, blob_pixel(blob, rx, ry));
                        mask.set(x, y, true);
                        if blob.anomalous {
                            gt_mask.set(x, y, true);
                        }
                    }
                }
                if blob.anomalous {
                    any_anomalous = true;
                }
            }
            // advance with reflection off [0, limit]
            let (mut x, mut y) = pos[b];
            let (mut dx, mut dy) = dir[b];
            x += dx * blob.speed;
            y += dy * blob.speed;
            let x_max = (w - blob.size) as f64;
            let y_max = (h - blob.size) as f64;
            while x < 0.0 || x > x_max {
                if x < 0.0 {
                    x = -x;
                    dx = -dx;
                } else {
                    x = 2.0 * x_max - x;
                    dx = -dx;
                }
            }
            while y < 0.0 || y > y_max {
                if y < 0.0 {
                    y = -y;
                    dy = -dy;
                } else {
                    y = 2.0 * y_max - y;
                    dy = -dy;
                }
            }
            pos[b] = (x, y);
            dir[b] = (dx, dy);
        }

        frames.push(frame);
        masks.push(mask);
        frame_gt.push(any_anomalous);
        pixel_gt.push(gt_mask);
    }

    Ok(SynthScene {
        frames: FrameSequence { frames, fps_hint: None },
        masks,
        frame_gt,
        pixel_gt,
    })
}

fn scenario_err(line: usize, msg: impl Into<String>) -> EvalError {
    EvalError::Scenario { line, msg: msg.into() }
}

/// Parse a scenario description: UTF-8 `key = value` lines with `#` comments.
///
/// Global keys: `width`, `height`, `frames`, `seed`, `bg.base`, `bg.noise`.
/// Blob keys (N = 0, 1, ...): `blob.N.start` ("x,y"), `blob.N.dir` ("dx,dy"),
/// `blob.N.speed`, `blob.N.size`, `blob.N.intensity`, `blob.N.texture`
/// (`flat` or `stripes:<deg>:<period>[:<contrast>]`), `blob.N.anomalous`,
/// `blob.N.appear` ("start:end", half-open).
pub fn parse_scenario(text: &str) -> Result<ScenarioSpec, EvalError> {
    let mut width = None;
    let mut height = None;
    let mut frames = None;
    let mut seed = 0u64;
    let mut bg_base = 100u8;
    let mut bg_noise = 20u8;
    let mut blobs: Vec<(usize, BlobSpec)> = Vec::new();

    fn blob_entry(blobs: &mut Vec<(usize, BlobSpec)>, n: usize) -> &mut BlobSpec {
        if let Some(at) = blobs.iter().position(|(k, _)| *k == n) {
            return &mut blobs[at].1;
        }
        blobs.push((n, BlobSpec::default()));
        &mut blobs.last_mut().unwrap().1
    }

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| scenario_err(line, "expected key = value"))?;
        let key = key.trim();
        let value = value.trim();
        let parse_num = |what: &str| -> Result<usize, EvalError> {
            value.parse().map_err(|_| scenario_err(line, format!("bad {what}: {value:?}")))
        };
        match key {
            "width" => width = Some(parse_num("width")?),
            "height" => height = Some(parse_num("height")?),
            "frames" => frames = Some(parse_num("frames")?),
            "seed" => {
                seed = value
                    .parse()
                    .map_err(|_| scenario_err(line, format!("bad seed: {value:?}")))?
            }
            "bg.base" => {
                bg_base = value
                    .parse()
                    .map_err(|_| scenario_err(line, format!("bad bg.base: {value:?}")))?
            }
            "bg.noise" => {
                bg_noise = value
                    .parse()
                    .map_err(|_| scenario_err(line, format!("bad bg.noise: {value:?}")))?
            }
            _ => {
                let rest = key
                    .strip_prefix("blob.")
                    .ok_or_else(|| scenario_err(line, format!("unknown key {key:?}")))?;
                let (index, field) = rest
                    .split_once('.')
                    .ok_or_else(|| scenario_err(line, format!("unknown key {key:?}")))?;
                let n: usize = index
                    .parse()
                    .map_err(|_| scenario_err(line, format!("bad blob index {index:?}")))?;
                let blob = blob_entry(&mut blobs, n);
                let parse_pair = || -> Result<(f64, f64), EvalError> {
                    let (a, b) = value
                        .split_once(',')
                        .ok_or_else(|| scenario_err(line, format!("expected x,y: {value:?}")))?;
                    let a = a.trim().parse().map_err(|_| scenario_err(line, "bad number"))?;
                    let b = b.trim().parse().map_err(|_| scenario_err(line, "bad number"))?;
                    Ok((a, b))
                };
                match field {
                    "start" => blob.start = parse_pair()?,
                    "dir" => blob.dir = parse_pair()?,
                    "speed" => {
                        blob.speed = value
                            .parse()
                            .map_err(|_| scenario_err(line, format!("bad speed: {value:?}")))?
                    }
                    "size" => {
                        blob.size = value
                            .parse()
                            .map_err(|_| scenario_err(line, format!("bad size: {value:?}")))?
                    }
                    "intensity" => {
                        blob.intensity = value.parse().map_err(|_| {
                            scenario_err(line, format!("bad intensity: {value:?}"))
                        })?
                    }
                    "anomalous" => {
                        blob.anomalous = match value {
                            "true" | "1" => true,
                            "false" | "0" => false,
                            _ => {
                                return Err(scenario_err(
                                    line,
                                    format!("bad anomalous flag: {value:?}"),
                                ))
                            }
                        }
                    }
                    "appear" => {
                        let (a, b) = value.split_once(':').ok_or_else(|| {
                            scenario_err(line, format!("expected start:end, got {value:?}"))
                        })?;
                        let a = a.trim().parse().map_err(|_| scenario_err(line, "bad frame"))?;
                        let b = b.trim().parse().map_err(|_| scenario_err(line, "bad frame"))?;
                        blob.appear = Some((a, b));
                    }
                    "texture" => {
                        blob.texture = if value == "flat" {
                            BlobTexture::Flat
                        } else if let Some(rest) = value.strip_prefix("stripes:") {
                            let parts: Vec<&str> = rest.split(':').collect();
                            if parts.len() < 2 || parts.len() > 3 {
                                return Err(scenario_err(
                                    line,
                                    "stripes take <deg>:<period>[:<contrast>]",
                                ));
                            }
                            let deg = parts[0]
                                .parse()
                                .map_err(|_| scenario_err(line, "bad orientation"))?;
                            let period: f64 = parts[1]
                                .parse()
                                .map_err(|_| scenario_err(line, "bad period"))?;
                            if period <= 0.0 {
                                return Err(scenario_err(line, "period must be positive"));
                            }
                            let contrast = if parts.len() == 3 {
                                parts[2]
                                    .parse()
                                    .map_err(|_| scenario_err(line, "bad contrast"))?
                            } else {
                                30
                            };
                            BlobTexture::Stripes { orientation_deg: deg, period, contrast }
                        } else {
                            return Err(scenario_err(
                                line,
                                format!("unknown texture {value:?}"),
                            ));
                        }
                    }
                    other => {
                        return Err(scenario_err(line, format!("unknown blob field {other:?}")))
                    }
                }
            }
        }
    }

    let width = width.ok_or_else(|| scenario_err(0, "missing width"))?;
    let height = height.ok_or_else(|| scenario_err(0, "missing height"))?;
    let frames = frames.ok_or_else(|| scenario_err(0, "missing frames"))?;
    blobs.sort_by_key(|(n, _)| *n);
    Ok(ScenarioSpec {
        width,
        height,
        frames,
        seed,
        bg_base,
        bg_noise,
        blobs: blobs.into_iter().map(|(_, b)| b).collect(),
    })
}
