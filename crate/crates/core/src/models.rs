//! Per-cell semi-parametric models.
//!
//! Motion and size are modelled by smoothed discrete pmfs: Gaussian-kernel
//! density evaluated at fixed grid points s·Δx and normalized, after which
//! the training samples are discarded. Texture is modelled by an adaptively
//! grown codebook matched with Pearson correlation; entries above the 0.9
//! match threshold are folded in with a running-mean update, anything else
//! appends a new entry.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::features::{smoothed_cell_motion, FrameFeatures};
use crate::ingest::CellGridSpec;

/// Codebook match threshold ρ*.
pub const MATCH_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file: expected header {expected:?}, found {found:?}")]
    Version { expected: String, found: String },
    #[error("model file schema violation at byte {offset}: {msg}")]
    Schema { offset: usize, msg: String },
}

/// Discrete smoothed pmf over grid points 0, Δx, 2Δx, ..., SΔx.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    pub delta_x: f64,
    pub upper_s: usize,
    /// S+1 probabilities summing to 1.
    pub probs: Vec<f64>,
    pub sample_count: usize,
}

/// Gaussian-kernel density at the grid points, normalized to a pmf.
/// Returns `None` for an empty sample set (an explicitly empty model).
pub fn fit_pmf(samples: &[f64], delta_x: f64, upper_s: usize, bandwidth: f64) -> Option<Pmf> {
    assert!(delta_x > 0.0, "delta_x must be positive");
    assert!(upper_s >= 1, "upper_s must be >= 1");
    assert!(bandwidth > 0.0, "bandwidth must be positive");
    if samples.is_empty() {
        return None;
    }
    let hi = upper_s as f64 * delta_x;
    let clamped: Vec<f64> = samples.iter().map(|&x| x.clamp(0.0, hi)).collect();
    let norm = 1.0 / (bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let inv_2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut probs: Vec<f64> = (0..=upper_s)
        .map(|s| {
            let grid = s as f64 * delta_x;
            let mut acc = 0.0;
            for &x in &clamped {
                let d = grid - x;
                acc += norm * (-d * d * inv_2h2).exp();
            }
            acc / clamped.len() as f64
        })
        .collect();
    let total: f64 = probs.iter().sum();
    if total > 0.0 {
        for p in &mut probs {
            *p /= total;
        }
    } else {
        // bandwidth so small every kernel underflowed: fall back to point
        // masses at the nearest grid points
        for &x in &clamped {
            let s = ((x / delta_x).round() as usize).min(upper_s);
            probs[s] += 1.0 / clamped.len() as f64;
        }
    }
    Some(Pmf { delta_x, upper_s, probs, sample_count: samples.len() })
}

/// Probability at the grid point nearest to `value` (ties round half-up),
/// with the index clamped to [0, S].
pub fn pmf_lookup(pmf: &Pmf, value: f64) -> f64 {
    let idx = (value / pmf.delta_x).round();
    let idx = if idx < 0.0 { 0 } else { (idx as usize).min(pmf.upper_s) };
    pmf.probs[idx]
}

/// Silverman's rule of thumb with a floor of Δx, so single-valued training
/// sets still smooth over at least one grid step.
pub fn silverman_bandwidth(samples: &[f64], delta_x: f64) -> f64 {
    let n = samples.len();
    let sigma = if n >= 2 {
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
        var.sqrt()
    } else {
        0.0
    };
    let h = sigma * (4.0 / (3.0 * n as f64)).powf(0.2);
    h.max(delta_x)
}

/// Pearson's correlation coefficient between two 4-vectors, in [-1, 1].
/// Defined as 0 when either vector has zero variance.
pub fn pearson(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let mean = |v: &[f64; 4]| v.iter().sum::<f64>() / 4.0;
    let (ma, mb) = (mean(a), mean(b));
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..4 {
        let da = a[k] - ma;
        let db = b[k] - mb;
        dot += da * db;
        na += da * da;
        nb += db * db;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Adaptively grown list of representative texture vectors with counts.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureCodebook {
    pub entries: Vec<[f64; 4]>,
    pub counts: Vec<u64>,
    pub match_threshold: f64,
}

impl Default for TextureCodebook {
    fn default() -> Self {
        Self::new()
    }
}

/// What happened to an observed vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObserveOutcome {
    /// Folded into the existing entry at this index.
    Matched(usize),
    /// Appended as a new entry at this index.
    Appended(usize),
}

impl TextureCodebook {
    pub fn new() -> Self {
        Self { entries: Vec::new(), counts: Vec::new(), match_threshold: MATCH_THRESHOLD }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn observation_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fold `x` into its best-matching entry when the correlation exceeds the
    /// match threshold, otherwise append it. Ties on the correlation are
    /// broken by the lowest entry index.
    pub fn observe(&mut self, x: [f64; 4]) -> ObserveOutcome {
        if self.entries.is_empty() {
            self.entries.push(x);
            self.counts.push(1);
            return ObserveOutcome::Appended(0);
        }
        let mut best_k = 0usize;
        let mut best_rho = f64::NEG_INFINITY;
        for (k, entry) in self.entries.iter().enumerate() {
            let rho = pearson(&x, entry);
            if rho > best_rho {
                best_rho = rho;
                best_k = k;
            }
        }
        if best_rho > self.match_threshold {
            let w = self.counts[best_k];
            let entry = &mut self.entries[best_k];
            for k in 0..4 {
                entry[k] += (x[k] - entry[k]) / (w as f64 + 1.0);
            }
            self.counts[best_k] = w + 1;
            ObserveOutcome::Matched(best_k)
        } else {
            self.entries.push(x);
            self.counts.push(1);
            ObserveOutcome::Appended(self.entries.len() - 1)
        }
    }

    /// Correlation of the closest matching entry; -1 for an empty codebook so
    /// any texture in a never-trained cell reads as unknown.
    pub fn best_match(&self, x: &[f64; 4]) -> f64 {
        if self.entries.is_empty() {
            return -1.0;
        }
        self.entries
            .iter()
            .map(|entry| pearson(x, entry))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Standalone wrappers mirroring the operation-style API.
pub fn codebook_observe(cb: &mut TextureCodebook, x: [f64; 4]) -> ObserveOutcome {
    cb.observe(x)
}

pub fn codebook_best_match(cb: &TextureCodebook, x: &[f64; 4]) -> f64 {
    cb.best_match(x)
}

/// Trained state of one cell. Empty pmfs/codebooks mark untrained features.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellModel {
    pub motion_pmf: Option<Pmf>,
    pub size_pmf: Option<Pmf>,
    pub codebook: TextureCodebook,
}

impl CellModel {
    pub fn motion_samples(&self) -> usize {
        self.motion_pmf.as_ref().map_or(0, |p| p.sample_count)
    }

    pub fn size_samples(&self) -> usize {
        self.size_pmf.as_ref().map_or(0, |p| p.sample_count)
    }

    pub fn texture_samples(&self) -> usize {
        self.codebook.observation_count() as usize
    }
}

/// Grid of per-cell models plus the cell layout they were trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrid {
    pub spec: CellGridSpec,
    pub cells: Vec<CellModel>,
}

impl ModelGrid {
    pub fn empty(spec: CellGridSpec) -> Self {
        Self { spec, cells: vec![CellModel::default(); spec.cells()] }
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &CellModel {
        &self.cells[j * self.spec.grid_w + i]
    }
}

/// Pmf fitting parameters.
#[derive(Debug, Clone, Copy)]
pub enum Bandwidth {
    /// Silverman's rule per feature, floored at Δx.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct PmfConfig {
    pub delta_x: f64,
    /// Upper limit of the motion pmf support, in px/frame.
    pub mot_max: f64,
    pub bandwidth: Bandwidth,
}

impl Default for PmfConfig {
    fn default() -> Self {
        Self { delta_x: 0.25, mot_max: 10.0, bandwidth: Bandwidth::Auto }
    }
}

impl PmfConfig {
    fn resolve_bandwidth(&self, samples: &[f64]) -> f64 {
        match self.bandwidth {
            Bandwidth::Auto => silverman_bandwidth(samples, self.delta_x),
            Bandwidth::Fixed(h) => h,
        }
    }
}

/// Accumulates per-cell feature samples across training sequences, then fits
/// the pmfs. Codebooks grow online in observation order; pmf samples are held
/// until [`ModelTrainer::finish`] and discarded afterwards.
pub struct ModelTrainer {
    spec: CellGridSpec,
    motion: Vec<Vec<f64>>,
    size: Vec<Vec<f64>>,
    codebooks: Vec<TextureCodebook>,
}

impl ModelTrainer {
    pub fn new(spec: CellGridSpec) -> Self {
        let n = spec.cells();
        Self {
            spec,
            motion: vec![Vec::new(); n],
            size: vec![Vec::new(); n],
            codebooks: vec![TextureCodebook::new(); n],
        }
    }

    /// Accumulate one training sequence. Cells contribute only at frames
    /// where they contain foreground; motion uses the temporally smoothed
    /// value over the available neighbors.
    pub fn observe_sequence(&mut self, frames: &[FrameFeatures]) {
        let cells = self.spec.cells();
        for t in 0..frames.len() {
            for idx in 0..cells {
                if frames[t].occupancy[idx] == 0 {
                    continue;
                }
                let before = t.checked_sub(1).and_then(|p| frames[p].raw_mot[idx]);
                let after = frames.get(t + 1).and_then(|f| f.raw_mot[idx]);
                if let Some(mot) = smoothed_cell_motion([before, frames[t].raw_mot[idx], after]) {
                    self.motion[idx].push(mot);
                }
                self.size[idx].push(frames[t].size[idx]);
                if let Some(txt) = frames[t].txt[idx] {
                    self.codebooks[idx].observe(txt);
                }
            }
        }
    }

    /// Fit the per-cell pmfs and freeze the models.
    pub fn finish(self, cfg: &PmfConfig) -> ModelGrid {
        let mot_s = (cfg.mot_max / cfg.delta_x).round() as usize;
        let size_max = (self.spec.cell_size * self.spec.cell_size) as f64;
        let size_s = (size_max / cfg.delta_x).round() as usize;
        let cells = self
            .motion
            .into_iter()
            .zip(self.size)
            .zip(self.codebooks)
            .map(|((mot, size), codebook)| CellModel {
                motion_pmf: fit_pmf(&mot, cfg.delta_x, mot_s, cfg.resolve_bandwidth(&mot)),
                size_pmf: fit_pmf(&size, cfg.delta_x, size_s, cfg.resolve_bandwidth(&size)),
                codebook,
            })
            .collect();
        ModelGrid { spec: self.spec, cells }
    }
}

const MODEL_HEADER: &str = "CROWDCELL-MODEL v1";

fn fmt_f64(v: f64) -> String {
    // 17 significant decimal digits: enough for exact f64 round-trips
    format!("{v:.16e}")
}

fn write_pmf(out: &mut String, tag: &str, pmf: &Option<Pmf>) {
    match pmf {
        None => {
            let _ = writeln!(out, "{tag} empty");
        }
        Some(p) => {
            let _ = write!(
                out,
                "{tag} pmf {} {} {}",
                fmt_f64(p.delta_x),
                p.upper_s,
                p.sample_count
            );
            for v in &p.probs {
                let _ = write!(out, " {}", fmt_f64(*v));
            }
            let _ = writeln!(out);
        }
    }
}

/// Serialize a model grid as versioned UTF-8 text with 17-significant-digit
/// decimals, so a reload is exact on every field.
pub fn save_models(grid: &ModelGrid, path: &Path) -> Result<(), ModelError> {
    let mut out = String::new();
    let _ = writeln!(out, "{MODEL_HEADER}");
    let _ = writeln!(
        out,
        "grid {} {} cell {}",
        grid.spec.grid_w, grid.spec.grid_h, grid.spec.cell_size
    );
    for j in 0..grid.spec.grid_h {
        for i in 0..grid.spec.grid_w {
            let cell = grid.cell(i, j);
            let _ = writeln!(out, "cell {i} {j}");
            write_pmf(&mut out, "mot", &cell.motion_pmf);
            write_pmf(&mut out, "size", &cell.size_pmf);
            let _ = writeln!(out, "codebook {}", cell.codebook.len());
            for (entry, count) in cell.codebook.entries.iter().zip(&cell.codebook.counts) {
                let _ = writeln!(
                    out,
                    "entry {count} {} {} {} {}",
                    fmt_f64(entry[0]),
                    fmt_f64(entry[1]),
                    fmt_f64(entry[2]),
                    fmt_f64(entry[3])
                );
            }
            let _ = writeln!(out, "end");
        }
    }
    std::fs::write(path, out).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })
}

/// Line reader that tracks the byte offset of the line it just produced.
struct Lines<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self { text, pos: 0 }
    }

    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        if self.pos >= self.text.len() {
            return None;
        }
        let start = self.pos;
        let rest = &self.text[start..];
        let (line, consumed) = match rest.find('\n') {
            Some(nl) => (&rest[..nl], nl + 1),
            None => (rest, rest.len()),
        };
        self.pos += consumed;
        Some((start, line.trim_end_matches('\r')))
    }

    fn expect_line(&mut self, what: &str) -> Result<(usize, &'a str), ModelError> {
        let eof = self.text.len();
        self.next_line().ok_or_else(|| ModelError::Schema {
            offset: eof,
            msg: format!("unexpected end of file, expected {what}"),
        })
    }
}

fn schema(offset: usize, msg: impl Into<String>) -> ModelError {
    ModelError::Schema { offset, msg: msg.into() }
}

fn parse_usize(tok: &str, offset: usize, what: &str) -> Result<usize, ModelError> {
    tok.parse().map_err(|_| schema(offset, format!("bad {what}: {tok:?}")))
}

fn parse_f64(tok: &str, offset: usize, what: &str) -> Result<f64, ModelError> {
    tok.parse().map_err(|_| schema(offset, format!("bad {what}: {tok:?}")))
}

fn parse_pmf(offset: usize, line: &str, tag: &str) -> Result<Option<Pmf>, ModelError> {
    let mut toks = line.split_ascii_whitespace();
    let head = toks.next().ok_or_else(|| schema(offset, "empty line"))?;
    if head != tag {
        return Err(schema(offset, format!("expected {tag:?} record, found {head:?}")));
    }
    match toks.next() {
        Some("empty") => Ok(None),
        Some("pmf") => {
            let delta_x = parse_f64(
                toks.next().ok_or_else(|| schema(offset, "missing delta_x"))?,
                offset,
                "delta_x",
            )?;
            let upper_s = parse_usize(
                toks.next().ok_or_else(|| schema(offset, "missing upper_s"))?,
                offset,
                "upper_s",
            )?;
            let sample_count = parse_usize(
                toks.next().ok_or_else(|| schema(offset, "missing sample_count"))?,
                offset,
                "sample_count",
            )?;
            let probs: Vec<f64> = toks
                .map(|t| parse_f64(t, offset, "probability"))
                .collect::<Result<_, _>>()?;
            if probs.len() != upper_s + 1 {
                return Err(schema(
                    offset,
                    format!("pmf has {} values, expected {}", probs.len(), upper_s + 1),
                ));
            }
            Ok(Some(Pmf { delta_x, upper_s, probs, sample_count }))
        }
        other => Err(schema(offset, format!("expected 'pmf' or 'empty', found {other:?}"))),
    }
}

/// Load a model grid written by [`save_models`].
pub fn load_models(path: &Path) -> Result<ModelGrid, ModelError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })?;
    let mut lines = Lines::new(&text);
    let (_, header) = lines.expect_line("header")?;
    if header != MODEL_HEADER {
        return Err(ModelError::Version {
            expected: MODEL_HEADER.to_string(),
            found: header.chars().take(40).collect(),
        });
    }
    let (off, grid_line) = lines.expect_line("grid line")?;
    let toks: Vec<&str> = grid_line.split_ascii_whitespace().collect();
    if toks.len() != 5 || toks[0] != "grid" || toks[3] != "cell" {
        return Err(schema(off, "malformed grid line"));
    }
    let grid_w = parse_usize(toks[1], off, "grid_w")?;
    let grid_h = parse_usize(toks[2], off, "grid_h")?;
    let cell_size = parse_usize(toks[4], off, "cell_size")?;
    if cell_size < 2 {
        return Err(schema(off, format!("cell size {cell_size} < 2")));
    }
    let spec = CellGridSpec { cell_size, grid_w, grid_h };

    let mut cells = Vec::with_capacity(spec.cells());
    for j in 0..grid_h {
        for i in 0..grid_w {
            let (off, line) = lines.expect_line("cell header")?;
            let toks: Vec<&str> = line.split_ascii_whitespace().collect();
            if toks.len() != 3 || toks[0] != "cell" {
                return Err(schema(off, "expected cell header"));
            }
            let fi = parse_usize(toks[1], off, "cell i")?;
            let fj = parse_usize(toks[2], off, "cell j")?;
            if (fi, fj) != (i, j) {
                return Err(schema(off, format!("cell ({fi}, {fj}) out of order, expected ({i}, {j})")));
            }
            let (off, line) = lines.expect_line("mot record")?;
            let motion_pmf = parse_pmf(off, line, "mot")?;
            let (off, line) = lines.expect_line("size record")?;
            let size_pmf = parse_pmf(off, line, "size")?;
            let (off, line) = lines.expect_line("codebook record")?;
            let toks: Vec<&str> = line.split_ascii_whitespace().collect();
            if toks.len() != 2 || toks[0] != "codebook" {
                return Err(schema(off, "expected codebook record"));
            }
            let k = parse_usize(toks[1], off, "codebook length")?;
            let mut codebook = TextureCodebook::new();
            for _ in 0..k {
                let (off, line) = lines.expect_line("codebook entry")?;
                let toks: Vec<&str> = line.split_ascii_whitespace().collect();
                if toks.len() != 6 || toks[0] != "entry" {
                    return Err(schema(off, "expected codebook entry"));
                }
                let count = toks[1]
                    .parse::<u64>()
                    .map_err(|_| schema(off, format!("bad entry count: {:?}", toks[1])))?;
                if count == 0 {
                    return Err(schema(off, "zero entry count"));
                }
                let mut vec = [0.0f64; 4];
                for (slot, tok) in vec.iter_mut().zip(&toks[2..]) {
                    *slot = parse_f64(tok, off, "entry value")?;
                }
                codebook.entries.push(vec);
                codebook.counts.push(count);
            }
            let (off, line) = lines.expect_line("end marker")?;
            if line.trim() != "end" {
                return Err(schema(off, "expected end marker"));
            }
            cells.push(CellModel { motion_pmf, size_pmf, codebook });
        }
    }
    Ok(ModelGrid { spec, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct density oracle: kernel sums at the grid points, then normalization.
    fn oracle_pmf(samples: &[f64], dx: f64, s_max: usize, h: f64) -> Vec<f64> {
        let hi = s_max as f64 * dx;
        let clamped: Vec<f64> = samples.iter().map(|&x| x.clamp(0.0, hi)).collect();
        let mut f: Vec<f64> = (0..=s_max)
            .map(|s| {
                let grid = s as f64 * dx;
                clamped
                    .iter()
                    .map(|&x| {
                        (1.0 / (h * (2.0 * std::f64::consts::PI).sqrt()))
                            * (-(grid - x).powi(2) / (2.0 * h * h)).exp()
                    })
                    .sum::<f64>()
                    / clamped.len() as f64
            })
            .collect();
        let total: f64 = f.iter().sum();
        for v in &mut f {
            *v /= total;
        }
        f
    }

    #[test]
    fn all_zero_samples_peak_at_origin() {
        let pmf = fit_pmf(&[0.0; 7], 0.25, 40, 0.25).unwrap();
        let argmax = pmf
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 0);
        assert!((pmf.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_sample_is_symmetric_around_it() {
        let pmf = fit_pmf(&[1.0], 0.25, 40, 0.5).unwrap();
        assert!((pmf.probs[3] - pmf.probs[5]).abs() < 1e-12);
        assert!((pmf.probs[2] - pmf.probs[6]).abs() < 1e-12);
        let oracle = oracle_pmf(&[1.0], 0.25, 40, 0.5);
        for (a, b) in pmf.probs.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_far_samples_are_bimodal() {
        let pmf = fit_pmf(&[0.0, 10.0], 0.25, 40, 0.25).unwrap();
        let p = &pmf.probs;
        assert!(p[0] > p[1], "local max at s=0");
        assert!(p[40] > p[39], "local max at s=40");
        let mid = 20;
        assert!(p[mid] < p[0] && p[mid] < p[40]);
        let oracle = oracle_pmf(&[0.0, 10.0], 0.25, 40, 0.25);
        for (a, b) in p.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_samples_yield_empty_model() {
        assert!(fit_pmf(&[], 0.25, 40, 0.5).is_none());
    }

    #[test]
    fn out_of_range_samples_saturate() {
        let pmf = fit_pmf(&[1e6], 0.25, 40, 0.25).unwrap();
        let argmax = pmf
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 40);
    }

    #[test]
    fn lookup_rounds_to_nearest_grid_point() {
        let pmf = Pmf {
            delta_x: 0.25,
            upper_s: 4,
            probs: vec![0.1, 0.2, 0.3, 0.25, 0.15],
            sample_count: 10,
        };
        assert_eq!(pmf_lookup(&pmf, 0.5), 0.3); // exact grid point s=2
        assert_eq!(pmf_lookup(&pmf, 0.3), 0.2); // nearest is s=1
        assert_eq!(pmf_lookup(&pmf, 2.0), 0.15); // clamped to S
        assert_eq!(pmf_lookup(&pmf, -3.0), 0.1); // clamped to 0
        assert_eq!(pmf_lookup(&pmf, 0.125), 0.2); // tie rounds half-up to s=1
    }

    #[test]
    fn pearson_reference_points() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]), 1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]), -1.0);
        assert_eq!(pearson(&[5.0, 5.0, 5.0, 5.0], &[1.0, 7.0, 2.0, 9.0]), 0.0);
    }

    #[test]
    fn codebook_first_vector_becomes_first_entry() {
        let mut cb = TextureCodebook::new();
        let outcome = cb.observe([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(outcome, ObserveOutcome::Appended(0));
        assert_eq!(cb.entries, vec![[1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(cb.counts, vec![1]);
    }

    #[test]
    fn codebook_running_mean_update() {
        let mut cb = TextureCodebook::new();
        cb.observe([1.0, 2.0, 3.0, 4.0]);
        let outcome = cb.observe([2.0, 4.0, 6.0, 8.0]); // rho = 1 > 0.9
        assert_eq!(outcome, ObserveOutcome::Matched(0));
        assert_eq!(cb.entries, vec![[1.5, 3.0, 4.5, 6.0]]);
        assert_eq!(cb.counts, vec![2]);
    }

    #[test]
    fn codebook_appends_unmatched_vector() {
        let mut cb = TextureCodebook::new();
        cb.observe([1.0, 2.0, 3.0, 4.0]);
        let outcome = cb.observe([4.0, 3.0, 2.0, 1.0]); // rho = -1
        assert_eq!(outcome, ObserveOutcome::Appended(1));
        assert_eq!(cb.len(), 2);
        assert_eq!(cb.counts, vec![1, 1]);
    }

    #[test]
    fn best_match_reference_points() {
        let mut cb = TextureCodebook::new();
        assert_eq!(cb.best_match(&[1.0, 2.0, 3.0, 4.0]), -1.0);
        cb.observe([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cb.best_match(&[1.0, 2.0, 3.0, 4.0]), 1.0);
        assert_eq!(cb.best_match(&[4.0, 3.0, 2.0, 1.0]), -1.0);
    }

    #[test]
    fn model_file_round_trip_is_exact() {
        let spec = CellGridSpec { cell_size: 16, grid_w: 2, grid_h: 2 };
        let mut grid = ModelGrid::empty(spec);
        grid.cells[0].motion_pmf = fit_pmf(&[0.3, 1.7, 2.2], 0.25, 40, 0.31);
        grid.cells[0].size_pmf = fit_pmf(&[100.0, 120.5], 0.25, 1024, 7.3);
        grid.cells[0].codebook.observe([1.0, 2.0, 3.0, 4.0]);
        grid.cells[0].codebook.observe([0.1, 0.9, 0.2, 0.8]);
        grid.cells[3].motion_pmf = fit_pmf(&[5.0], 0.25, 40, 0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("models.txt");
        save_models(&grid, &path).unwrap();
        let loaded = load_models(&path).unwrap();
        assert_eq!(grid, loaded);
    }

    #[test]
    fn wrong_magic_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "SOMETHING-ELSE v9\n").unwrap();
        assert!(matches!(load_models(&path), Err(ModelError::Version { .. })));
    }

    #[test]
    fn truncated_file_reports_byte_offset() {
        let spec = CellGridSpec { cell_size: 16, grid_w: 2, grid_h: 1 };
        let grid = ModelGrid::empty(spec);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.txt");
        save_models(&grid, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = text.len() - 30;
        std::fs::write(&path, &text[..cut]).unwrap();
        match load_models(&path) {
            Err(ModelError::Schema { offset, .. }) => assert!(offset <= cut),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn pmf_sums_to_one_and_matches_oracle(
            samples in proptest::collection::vec(0.0f64..10.0, 1..50),
            h in 0.05f64..2.0,
        ) {
            let pmf = fit_pmf(&samples, 0.25, 40, h).unwrap();
            let total: f64 = pmf.probs.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let oracle = oracle_pmf(&samples, 0.25, 40, h);
            for (a, b) in pmf.probs.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn pearson_symmetry_and_affine_invariance(
            a in proptest::collection::vec(-100.0f64..100.0, 4),
            b in proptest::collection::vec(-100.0f64..100.0, 4),
            alpha in 0.01f64..10.0,
            beta in -50.0f64..50.0,
        ) {
            let a: [f64; 4] = a.try_into().unwrap();
            let b: [f64; 4] = b.try_into().unwrap();
            let r1 = pearson(&a, &b);
            prop_assert!((-1.0..=1.0).contains(&r1));
            prop_assert!((r1 - pearson(&b, &a)).abs() < 1e-12);
            let scaled: [f64; 4] = std::array::from_fn(|k| alpha * a[k] + beta);
            prop_assert!((pearson(&scaled, &b) - r1).abs() < 1e-9);
        }

        #[test]
        fn codebook_counts_and_running_means(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cb = TextureCodebook::new();
            let mut absorbed: Vec<Vec<[f64; 4]>> = Vec::new();
            let mut prev_len = 0usize;
            let n = 200;
            for _ in 0..n {
                let x: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..10.0));
                match cb.observe(x) {
                    ObserveOutcome::Matched(k) => absorbed[k].push(x),
                    ObserveOutcome::Appended(k) => {
                        prop_assert_eq!(k, absorbed.len());
                        absorbed.push(vec![x]);
                    }
                }
                prop_assert!(cb.len() >= prev_len, "codebook shrank");
                prev_len = cb.len();
            }
            prop_assert_eq!(cb.observation_count(), n as u64);
            for (k, vectors) in absorbed.iter().enumerate() {
                prop_assert_eq!(cb.counts[k], vectors.len() as u64);
                for slot in 0..4 {
                    let mean: f64 =
                        vectors.iter().map(|v| v[slot]).sum::<f64>() / vectors.len() as f64;
                    prop_assert!((cb.entries[k][slot] - mean).abs() < 1e-9);
                }
            }
        }
    }
}
