//! Subcommand implementations: train, detect, eval, synth.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};

use crowdcell::detector;
use crowdcell::evaluate::{self, RocCurve, RocPoint};
use crowdcell::foreground::{self, BackgroundAccumulator, BackgroundModel, ForegroundMask};
use crowdcell::ingest::{self, CellGrid, CellGridSpec, FrameSequence, GrayFrame};
use crowdcell::models::{self, ModelTrainer};

use crate::config::{ConfigError, RunConfig};

/// Command failure with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Configuration or usage problem: exit 2.
    Usage(String),
    /// Runtime or I/O failure: exit 1.
    Runtime(anyhow::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

/// A named frame sequence directory. Single-sequence layouts use ".".
struct SequenceDir {
    name: String,
    dir: PathBuf,
}

impl SequenceDir {
    fn is_root(&self) -> bool {
        self.name == "."
    }
}

/// Find sequences under `root`: either frames matching `pattern` directly in
/// `root`, or one subdirectory per sequence.
fn discover_sequences(root: &Path, pattern: &str) -> Result<Vec<SequenceDir>> {
    let direct = ingest::matching_files(root, pattern)
        .with_context(|| format!("scanning {}", root.display()))?;
    if !direct.is_empty() {
        return Ok(vec![SequenceDir { name: ".".into(), dir: root.to_path_buf() }]);
    }
    let mut sequences = Vec::new();
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("scanning {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for dir in subdirs {
        if !ingest::matching_files(&dir, pattern)?.is_empty() {
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| ".".into());
            sequences.push(SequenceDir { name, dir });
        }
    }
    if sequences.is_empty() {
        bail!("no sequences matching {pattern:?} under {}", root.display());
    }
    Ok(sequences)
}

/// Frame file stems in load order, for deriving output names.
fn frame_stems(dir: &Path, pattern: &str) -> Result<Vec<String>> {
    Ok(ingest::matching_files(dir, pattern)?
        .iter()
        .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
        .collect())
}

fn background_sidecar(model_path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.bg.pgm", model_path.display()))
}

/// Masks for one sequence: externally supplied, or segmented against the
/// trained background model.
fn masks_for_sequence(
    seq: &SequenceDir,
    frames: &FrameSequence,
    pattern: &str,
    external_root: Option<&Path>,
    background: Option<&BackgroundModel>,
) -> Result<Vec<ForegroundMask>> {
    if let Some(root) = external_root {
        let dir = if seq.is_root() { root.to_path_buf() } else { root.join(&seq.name) };
        let masks = foreground::load_external_masks(&dir, pattern)
            .with_context(|| format!("loading external masks from {}", dir.display()))?;
        if masks.len() != frames.len() {
            bail!(
                "sequence {}: {} external masks for {} frames",
                seq.name,
                masks.len(),
                frames.len()
            );
        }
        return Ok(masks);
    }
    let model = background.ok_or_else(|| anyhow!("no background model available"))?;
    frames
        .frames
        .iter()
        .map(|f| foreground::segment(f, model).map_err(Into::into))
        .collect()
}

fn median_of(mut counts: Vec<usize>) -> usize {
    if counts.is_empty() {
        return 0;
    }
    counts.sort_unstable();
    counts[counts.len() / 2]
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let train_dir = cfg.require_path("train_dir")?;
    let model_path = cfg.require_path("model_path")?;
    let pattern = cfg.pattern();
    let cell_size = cfg.cell_size()?;
    let flow_cfg = cfg.flow()?;
    let feat_cfg = cfg.features()?;
    let pmf_cfg = cfg.pmf()?;
    let fg_threshold = cfg.fg_threshold()?;
    let external = cfg.optional_path("fg.external_mask_dir");

    let run = || -> Result<()> {
        let sequences = discover_sequences(&train_dir, &pattern)?;
        let mut loaded: Vec<(SequenceDir, FrameSequence)> = Vec::new();
        for seq in sequences {
            let frames = ingest::load_sequence(&seq.dir, &pattern)
                .with_context(|| format!("loading sequence {}", seq.name))?;
            if let Some((first, prev)) = loaded.first() {
                if frames.width() != prev.width() || frames.height() != prev.height() {
                    bail!(
                        "sequence {} is {}x{}, but {} is {}x{}",
                        seq.name,
                        frames.width(),
                        frames.height(),
                        first.name,
                        prev.width(),
                        prev.height()
                    );
                }
            }
            loaded.push((seq, frames));
        }
        let (w, h) = (loaded[0].1.width(), loaded[0].1.height());
        let spec = CellGridSpec::from_frame_dims(w, h, cell_size)
            .map_err(|e| anyhow!("cell grid: {e}"))?;

        let background = if external.is_none() {
            let mut acc = BackgroundAccumulator::new(w, h);
            for (_, frames) in &loaded {
                for frame in &frames.frames {
                    acc.push(frame)?;
                }
            }
            Some(acc.finish(fg_threshold)?)
        } else {
            None
        };

        let mut trainer = ModelTrainer::new(spec);
        let mut total_frames = 0usize;
        for (seq, frames) in &loaded {
            let masks =
                masks_for_sequence(seq, frames, &pattern, external.as_deref(), background.as_ref())?;
            let features =
                detector::compute_sequence_features(frames, &masks, &spec, &flow_cfg, &feat_cfg)?;
            trainer.observe_sequence(&features);
            total_frames += frames.len();
        }
        let models = trainer.finish(&pmf_cfg);
        models::save_models(&models, &model_path)?;
        if let Some(bg) = &background {
            let raster = GrayFrame {
                width: bg.width,
                height: bg.height,
                data: bg.background.clone(),
            };
            ingest::write_pgm(&raster, &background_sidecar(&model_path))?;
        }

        // per-cell sample-count summary
        let mot: Vec<usize> = models.cells.iter().map(|c| c.motion_samples()).collect();
        let size: Vec<usize> = models.cells.iter().map(|c| c.size_samples()).collect();
        let txt: Vec<usize> = models.cells.iter().map(|c| c.texture_samples()).collect();
        let entries: Vec<usize> = models.cells.iter().map(|c| c.codebook.len()).collect();
        println!(
            "trained {} cells ({}x{} grid, cell {}) over {} frames",
            spec.cells(),
            spec.grid_w,
            spec.grid_h,
            spec.cell_size,
            total_frames
        );
        println!(
            "motion:  {} cells trained, samples median {} max {}",
            mot.iter().filter(|&&n| n > 0).count(),
            median_of(mot.clone()),
            mot.iter().max().unwrap_or(&0)
        );
        println!(
            "size:    {} cells trained, samples median {} max {}",
            size.iter().filter(|&&n| n > 0).count(),
            median_of(size.clone()),
            size.iter().max().unwrap_or(&0)
        );
        println!(
            "texture: {} cells trained, observations median {}, codebook entries max {}",
            txt.iter().filter(|&&n| n > 0).count(),
            median_of(txt.clone()),
            entries.iter().max().unwrap_or(&0)
        );
        println!("models written to {}", model_path.display());
        Ok(())
    };
    run().map_err(CliError::Runtime)
}

struct CombinedRow {
    seq: String,
    frame: usize,
    score: f64,
}

struct CellScoreRow {
    seq: String,
    frame: usize,
    i: usize,
    j: usize,
    score: f64,
}

pub fn cmd_detect(cfg: &RunConfig) -> Result<(), CliError> {
    let model_path = cfg.require_path("model_path")?;
    let test_dir = cfg.require_path("test_dir")?;
    let out_dir = cfg.require_path("out_dir")?;
    let pattern = cfg.pattern();
    let flow_cfg = cfg.flow()?;
    let feat_cfg = cfg.features()?;
    let det_cfg = cfg.detector()?;
    let fg_threshold = cfg.fg_threshold()?;
    let external = cfg.optional_path("fg.external_mask_dir");

    let run = || -> Result<()> {
        let models = models::load_models(&model_path)
            .with_context(|| format!("loading models from {}", model_path.display()))?;
        let spec = models.spec;

        let background = if external.is_none() {
            let sidecar = background_sidecar(&model_path);
            let raster = ingest::load_frame(&sidecar).with_context(|| {
                format!(
                    "loading background sidecar {} (train with the built-in \
                     segmenter or set fg.external_mask_dir)",
                    sidecar.display()
                )
            })?;
            Some(BackgroundModel {
                width: raster.width,
                height: raster.height,
                background: raster.data,
                threshold: fg_threshold,
            })
        } else {
            None
        };

        let sequences = discover_sequences(&test_dir, &pattern)?;
        std::fs::create_dir_all(&out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;

        let mut frame_rows: Vec<CombinedRow> = Vec::new();
        let mut cell_rows: Vec<CellScoreRow> = Vec::new();
        let mut processed_frames = 0usize;
        let mut processing_seconds = 0.0f64;
        let mut frame_dims = (0usize, 0usize);

        for seq in &sequences {
            let frames = ingest::load_sequence(&seq.dir, &pattern)
                .with_context(|| format!("loading sequence {}", seq.name))?;
            let stems = frame_stems(&seq.dir, &pattern)?;
            frame_dims = (frames.width(), frames.height());

            let started = Instant::now();
            let masks = masks_for_sequence(
                seq,
                &frames,
                &pattern,
                external.as_deref(),
                background.as_ref(),
            )?;
            let volume =
                detector::detect_sequence(&frames, &masks, &models, &flow_cfg, &feat_cfg, &det_cfg)?;
            processing_seconds += started.elapsed().as_secs_f64();
            processed_frames += frames.len();

            let seq_out = if seq.is_root() { out_dir.clone() } else { out_dir.join(&seq.name) };
            std::fs::create_dir_all(&seq_out)
                .with_context(|| format!("creating {}", seq_out.display()))?;

            let mut anomalies = String::from("frame,i,j,reason,score\n");
            for (t, detections) in volume.frames.iter().enumerate() {
                ingest::write_cell_mask(
                    &detections.final_grid,
                    &spec,
                    &seq_out.join(format!("{}_cells.pgm", stems[t])),
                )?;
                ingest::write_overlay(
                    &frames.frames[t],
                    &detections.final_grid,
                    &spec,
                    &seq_out.join(format!("{}_overlay.pgm", stems[t])),
                )?;
                for j in 0..spec.grid_h {
                    for i in 0..spec.grid_w {
                        let idx = j * spec.grid_w + i;
                        if detections.final_grid.cells[idx] {
                            let reason =
                                detections.reasons[idx].map(|r| r.as_str()).unwrap_or("unknown");
                            let _ = writeln!(
                                anomalies,
                                "{t},{i},{j},{reason},{}",
                                detections.scores[idx]
                            );
                        }
                        if detections.analysed.cells[idx] {
                            cell_rows.push(CellScoreRow {
                                seq: seq.name.clone(),
                                frame: t,
                                i,
                                j,
                                score: detections.scores[idx],
                            });
                        }
                    }
                }
                frame_rows.push(CombinedRow {
                    seq: seq.name.clone(),
                    frame: t,
                    score: volume.frame_scores[t],
                });
            }
            std::fs::write(seq_out.join("anomalies.csv"), anomalies)?;
        }

        let mut frame_scores = String::from("seq,frame,score\n");
        for row in &frame_rows {
            let _ = writeln!(frame_scores, "{},{},{}", row.seq, row.frame, row.score);
        }
        std::fs::write(out_dir.join("frame_scores.csv"), frame_scores)?;

        let mut cell_scores = format!(
            "# width={} height={} cell={} grid_w={} grid_h={}\nseq,frame,i,j,score\n",
            frame_dims.0, frame_dims.1, spec.cell_size, spec.grid_w, spec.grid_h
        );
        for row in &cell_rows {
            let _ = writeln!(
                cell_scores,
                "{},{},{},{},{}",
                row.seq, row.frame, row.i, row.j, row.score
            );
        }
        std::fs::write(out_dir.join("cell_scores.csv"), cell_scores)?;

        let fps = processed_frames as f64 / processing_seconds;
        println!(
            "throughput: {fps:.1} fps ({processed_frames} frames in {processing_seconds:.3} s)"
        );
        println!("outputs written to {}", out_dir.display());
        Ok(())
    };
    run().map_err(CliError::Runtime)
}

fn write_roc_csv(path: &Path, roc: &RocCurve) -> Result<()> {
    let mut out = String::from("threshold,fpr,fnr\n");
    for p in &roc.points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.fnr);
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_frame_scores(path: &Path) -> Result<Vec<(String, usize, f64)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            bail!("{}:{}: expected seq,frame,score", path.display(), lineno + 1);
        }
        rows.push((
            parts[0].to_string(),
            parts[1].parse().with_context(|| format!("line {}", lineno + 1))?,
            parts[2].parse().with_context(|| format!("line {}", lineno + 1))?,
        ));
    }
    Ok(rows)
}

struct CellScoresFile {
    width: usize,
    height: usize,
    spec: CellGridSpec,
    /// (seq, frame) → sparse cell scores
    scores: BTreeMap<(String, usize), Vec<(usize, usize, f64)>>,
}

fn read_cell_scores(path: &Path) -> Result<CellScoresFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let meta = lines.next().unwrap_or_default();
    let mut width = 0;
    let mut height = 0;
    let mut cell = 0;
    let mut grid_w = 0;
    let mut grid_h = 0;
    for token in meta.trim_start_matches('#').split_ascii_whitespace() {
        if let Some((key, value)) = token.split_once('=') {
            let value: usize = value.parse().unwrap_or(0);
            match key {
                "width" => width = value,
                "height" => height = value,
                "cell" => cell = value,
                "grid_w" => grid_w = value,
                "grid_h" => grid_h = value,
                _ => {}
            }
        }
    }
    if cell < 2 || grid_w == 0 || grid_h == 0 {
        bail!("{}: missing or malformed metadata line", path.display());
    }
    let mut scores: BTreeMap<(String, usize), Vec<(usize, usize, f64)>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate().skip(2) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            bail!("{}:{}: expected seq,frame,i,j,score", path.display(), lineno + 1);
        }
        let key = (parts[0].to_string(), parts[1].parse()?);
        scores.entry(key).or_default().push((
            parts[2].parse()?,
            parts[3].parse()?,
            parts[4].parse()?,
        ));
    }
    Ok(CellScoresFile {
        width,
        height,
        spec: CellGridSpec { cell_size: cell, grid_w, grid_h },
        scores,
    })
}

fn upsample_cells(grid: &CellGrid, spec: &CellGridSpec, w: usize, h: usize) -> ForegroundMask {
    let mut mask = ForegroundMask::empty(w, h);
    for j in 0..spec.grid_h {
        for i in 0..spec.grid_w {
            if !grid.get(i, j) {
                continue;
            }
            let (x0, y0, x1, y1) = spec.cell_rect(i, j);
            for y in y0..y1.min(h) {
                for x in x0..x1.min(w) {
                    mask.set(x, y, true);
                }
            }
        }
    }
    mask
}

/// Thresholds for the localization sweep: distinct frame scores (subsampled
/// to at most 254 quantiles) plus ±infinity sentinels.
fn sweep_thresholds(frame_scores: &[f64]) -> Vec<f64> {
    let mut distinct: Vec<f64> = frame_scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    if distinct.len() <= 254 {
        thresholds.extend_from_slice(&distinct);
    } else {
        for k in 0..254 {
            let idx = k * (distinct.len() - 1) / 253;
            thresholds.push(distinct[idx]);
        }
        thresholds.dedup();
    }
    thresholds.push(f64::INFINITY);
    thresholds
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let out_dir = cfg.require_path("out_dir")?;
    let gt_frames_path = cfg.require_path("gt_frames")?;
    if !gt_frames_path.is_file() {
        return Err(CliError::Usage(format!(
            "ground-truth file {} does not exist",
            gt_frames_path.display()
        )));
    }
    let gt_pixel_dir = cfg.optional_path("gt_pixel_dir");
    if let Some(dir) = &gt_pixel_dir {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!(
                "ground-truth pixel directory {} does not exist",
                dir.display()
            )));
        }
    }
    let pattern = cfg.pattern();

    let run = || -> Result<()> {
        let rows = read_frame_scores(&out_dir.join("frame_scores.csv"))?;
        let scores: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let gt = evaluate::read_frame_flags(&gt_frames_path)?;
        if gt.len() != scores.len() {
            bail!("{} ground-truth flags for {} scored frames", gt.len(), scores.len());
        }
        let roc = evaluate::frame_roc(&scores, &gt)?;
        write_roc_csv(&out_dir.join("roc.csv"), &roc)?;
        std::fs::write(out_dir.join("eer.txt"), format!("{:.6}\n", roc.eer))?;
        println!("frame-level EER: {:.4} ({} frames)", roc.eer, scores.len());

        if let Some(gt_root) = &gt_pixel_dir {
            let cells = read_cell_scores(&out_dir.join("cell_scores.csv"))?;
            // group frames by sequence in frame_scores order
            let mut sequence_names: Vec<String> = Vec::new();
            for (seq, _, _) in &rows {
                if !sequence_names.contains(seq) {
                    sequence_names.push(seq.clone());
                }
            }
            let mut gt_masks: Vec<ForegroundMask> = Vec::new();
            for name in &sequence_names {
                let dir = if name == "." { gt_root.clone() } else { gt_root.join(name) };
                let masks = foreground::load_external_masks(&dir, &pattern)
                    .with_context(|| format!("loading pixel ground truth from {}", dir.display()))?;
                gt_masks.extend(masks);
            }
            if gt_masks.len() != rows.len() {
                bail!("{} pixel ground-truth masks for {} frames", gt_masks.len(), rows.len());
            }
            for mask in &gt_masks {
                if mask.width != cells.width || mask.height != cells.height {
                    bail!(
                        "pixel ground truth is {}x{}, detections are {}x{}",
                        mask.width,
                        mask.height,
                        cells.width,
                        cells.height
                    );
                }
            }

            let anomalous: Vec<bool> = gt_masks.iter().map(|m| m.count() > 0).collect();
            let positives = anomalous.iter().filter(|&&a| a).count();
            let negatives = gt_masks.len() - positives;
            if positives == 0 || negatives == 0 {
                bail!("pixel ground truth needs both anomalous and normal frames");
            }

            let spec = cells.spec;
            let mut points = Vec::new();
            for threshold in sweep_thresholds(&scores) {
                let mut misses = 0usize;
                let mut false_alarms = 0usize;
                for (k, (seq, frame, _)) in rows.iter().enumerate() {
                    let mut grid = CellGrid::new(spec.grid_w, spec.grid_h);
                    if let Some(sparse) = cells.scores.get(&(seq.clone(), *frame)) {
                        for &(i, j, score) in sparse {
                            if score < threshold {
                                grid.set(i, j, true);
                            }
                        }
                    }
                    let detected = upsample_cells(&grid, &spec, cells.width, cells.height);
                    if anomalous[k] {
                        if !evaluate::localization_hit(&detected, &gt_masks[k])? {
                            misses += 1;
                        }
                    } else if detected.count() > 0 {
                        false_alarms += 1;
                    }
                }
                points.push(RocPoint {
                    threshold,
                    fpr: false_alarms as f64 / negatives as f64,
                    fnr: misses as f64 / positives as f64,
                });
            }
            let roc = evaluate::roc_from_points(points)?;
            write_roc_csv(&out_dir.join("localization_roc.csv"), &roc)?;
            std::fs::write(out_dir.join("localization_eer.txt"), format!("{:.6}\n", roc.eer))?;
            println!("localization EER: {:.4}", roc.eer);
        }
        Ok(())
    };
    run().map_err(CliError::Runtime)
}

pub fn cmd_synth(spec_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| {
        CliError::Usage(format!("cannot read scenario {}: {e}", spec_path.display()))
    })?;
    let scenario =
        evaluate::parse_scenario(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    let scene = match evaluate::synth_scene(&scenario) {
        Ok(scene) => scene,
        Err(e @ crowdcell::evaluate::EvalError::BlobOutOfBounds { .. }) => {
            return Err(CliError::Usage(e.to_string()))
        }
        Err(e) => return Err(CliError::Runtime(e.into())),
    };

    let run = || -> Result<()> {
        let frames_dir = out_dir.join("frames");
        let masks_dir = out_dir.join("masks");
        let gt_dir = out_dir.join("gt_pixels");
        for dir in [&frames_dir, &masks_dir, &gt_dir] {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let mut flags = String::new();
        for t in 0..scene.frames.len() {
            ingest::write_pgm(
                &scene.frames.frames[t],
                &frames_dir.join(format!("frame_{t:05}.pgm")),
            )?;
            let mask_img = GrayFrame {
                width: scene.masks[t].width,
                height: scene.masks[t].height,
                data: scene.masks[t].bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
            };
            ingest::write_pgm(&mask_img, &masks_dir.join(format!("mask_{t:05}.pgm")))?;
            let gt_img = GrayFrame {
                width: scene.pixel_gt[t].width,
                height: scene.pixel_gt[t].height,
                data: scene.pixel_gt[t].bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
            };
            ingest::write_pgm(&gt_img, &gt_dir.join(format!("gt_{t:05}.pgm")))?;
            flags.push(if scene.frame_gt[t] { '1' } else { '0' });
            flags.push('\n');
        }
        std::fs::write(out_dir.join("gt_frames.txt"), flags)?;
        println!(
            "synthesized {} frames of {}x{} into {}",
            scene.frames.len(),
            scenario.width,
            scenario.height,
            out_dir.display()
        );
        Ok(())
    };
    run().map_err(CliError::Runtime)
}

