//! Frame sequence ingestion and cell-level output writers.
//!
//! Input formats are binary PGM (P5) and binary PPM (P6) with maxval 255;
//! PPM is converted to luma on load. Lexicographic filename order defines
//! time order.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors for frame loading and mask/overlay writing.
#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no frames matched pattern {pattern:?} in {dir}")]
    NoFramesMatched { dir: PathBuf, pattern: String },
    #[error("corrupt image {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("frame {path} is {found_w}x{found_h}, expected {expect_w}x{expect_h}")]
    DimensionMismatch {
        path: PathBuf,
        expect_w: usize,
        expect_h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("cell grid is {found_w}x{found_h}, spec expects {expect_w}x{expect_h}")]
    GridMismatch {
        expect_w: usize,
        expect_h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("invalid cell size {0}, must be >= 2")]
    InvalidCellSize(usize),
    #[error("invalid frame geometry {width}x{height}")]
    InvalidGeometry { width: usize, height: usize },
}

/// A single 8-bit grayscale frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, IngestError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(IngestError::InvalidGeometry { width, height });
        }
        Ok(Self { width, height, data })
    }

    /// Frame filled with a constant intensity.
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    /// Intensities scaled to [0, 1] as f32, row-major.
    pub fn to_normalized(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }
}

/// An ordered sequence of frames with uniform dimensions.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<GrayFrame>,
    pub fps_hint: Option<f64>,
}

impl FrameSequence {
    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Spatial layout of the non-overlapping N×N cell grid over a frame.
///
/// Trailing pixels beyond the last full cell are excluded from all analysis.
/// Cell indices are 0-based: `i` indexes columns (x), `j` rows (y).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellGridSpec {
    pub cell_size: usize,
    pub grid_w: usize,
    pub grid_h: usize,
}

impl CellGridSpec {
    pub fn from_frame_dims(
        width: usize,
        height: usize,
        cell_size: usize,
    ) -> Result<Self, IngestError> {
        if cell_size < 2 {
            return Err(IngestError::InvalidCellSize(cell_size));
        }
        Ok(Self { cell_size, grid_w: width / cell_size, grid_h: height / cell_size })
    }

    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    #[inline]
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.grid_w && j < self.grid_h
    }

    /// Pixel rectangle of cell (i, j) as (x0, y0, x1, y1), exclusive ends.
    #[inline]
    pub fn cell_rect(&self, i: usize, j: usize) -> (usize, usize, usize, usize) {
        let x0 = i * self.cell_size;
        let y0 = j * self.cell_size;
        (x0, y0, x0 + self.cell_size, y0 + self.cell_size)
    }
}

/// Per-cell boolean grid (anomaly flags, analysed-cell markers, ...).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellGrid {
    pub grid_w: usize,
    pub grid_h: usize,
    pub cells: Vec<bool>,
}

impl CellGrid {
    pub fn new(grid_w: usize, grid_h: usize) -> Self {
        Self { grid_w, grid_h, cells: vec![false; grid_w * grid_h] }
    }

    pub fn from_spec(spec: &CellGridSpec) -> Self {
        Self::new(spec.grid_w, spec.grid_h)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[j * self.grid_w + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.cells[j * self.grid_w + i] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

impl fmt::Display for CellGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for j in 0..self.grid_h {
            for i in 0..self.grid_w {
                write!(f, "{}", if self.get(i, j) { '#' } else { '.' })?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io { path: path.to_path_buf(), source }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> IngestError {
    IngestError::Corrupt { path: path.to_path_buf(), reason: reason.into() }
}

/// Parse the three header integers of a binary netpbm file, skipping
/// whitespace and `#` comments. Returns (width, height, maxval, data offset).
fn parse_pnm_header(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, usize), IngestError> {
    let mut pos = 2; // past magic
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt(path, "malformed header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text
            .parse()
            .map_err(|_| corrupt(path, "header value out of range"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(corrupt(path, "missing raster separator"));
    }
    pos += 1;
    Ok((fields[0], fields[1], fields[2], pos))
}

/// Luma conversion used for P6 input: round(0.299 R + 0.587 G + 0.114 B).
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round().min(255.0) as u8
}

/// Load a single frame from a binary PGM (P5) or PPM (P6, converted to luma).
pub fn load_frame(path: &Path) -> Result<GrayFrame, IngestError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 2 {
        return Err(corrupt(path, "file too short"));
    }
    let magic = &bytes[..2];
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(corrupt(path, "not a binary PGM/PPM (P5/P6)")),
    };
    let (width, height, maxval, offset) = parse_pnm_header(&bytes, path)?;
    if width == 0 || height == 0 {
        return Err(corrupt(path, "zero dimension"));
    }
    if maxval != 255 {
        return Err(corrupt(path, format!("unsupported maxval {maxval}, only 255")));
    }
    let expected = width * height * channels;
    let raster = &bytes[offset..];
    if raster.len() < expected {
        return Err(corrupt(
            path,
            format!("raster truncated: {} bytes, expected {}", raster.len(), expected),
        ));
    }
    let data = if channels == 1 {
        raster[..expected].to_vec()
    } else {
        raster[..expected]
            .chunks_exact(3)
            .map(|px| luma(px[0], px[1], px[2]))
            .collect()
    };
    GrayFrame::new(width, height, data)
}

/// Minimal filename glob: `*` matches any run, `?` matches one character.
pub(crate) fn glob_match(pattern: &str, name: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let n: Vec<char> = name.chars().collect();
    // iterative wildcard match with backtracking on the last `*`
    let (mut pi, mut ni) = (0usize, 0usize);
    let (mut star, mut mark) = (None::<usize>, 0usize);
    while ni < n.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == n[ni]) {
            pi += 1;
            ni += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some(pi);
            mark = ni;
            pi += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ni = mark;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}

/// Paths in `dir` whose file names match `pattern`, lexicographically sorted.
pub fn matching_files(dir: &Path, pattern: &str) -> Result<Vec<PathBuf>, IngestError> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if glob_match(pattern, name) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Load all frames in `dir` matching `pattern` as one sequence.
///
/// All frames must share identical dimensions; the first mismatching file is
/// named in the error.
pub fn load_sequence(dir: &Path, pattern: &str) -> Result<FrameSequence, IngestError> {
    let paths = matching_files(dir, pattern)?;
    if paths.is_empty() {
        return Err(IngestError::NoFramesMatched {
            dir: dir.to_path_buf(),
            pattern: pattern.to_string(),
        });
    }
    let mut frames = Vec::with_capacity(paths.len());
    for path in &paths {
        let frame = load_frame(path)?;
        if let Some(first) = frames.first() {
            let first: &GrayFrame = first;
            if frame.width != first.width || frame.height != first.height {
                return Err(IngestError::DimensionMismatch {
                    path: path.clone(),
                    expect_w: first.width,
                    expect_h: first.height,
                    found_w: frame.width,
                    found_h: frame.height,
                });
            }
        }
        frames.push(frame);
    }
    Ok(FrameSequence { frames, fps_hint: None })
}

/// Write a frame as binary PGM (P5), maxval 255.
pub fn write_pgm(frame: &GrayFrame, path: &Path) -> Result<(), IngestError> {
    let mut out = Vec::with_capacity(frame.data.len() + 32);
    write!(out, "P5\n{} {}\n255\n", frame.width, frame.height).expect("vec write");
    out.extend_from_slice(&frame.data);
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Write a per-cell grid as a grid_w × grid_h P5 image, 255 for set cells.
pub fn write_cell_mask(
    grid: &CellGrid,
    spec: &CellGridSpec,
    path: &Path,
) -> Result<(), IngestError> {
    if grid.grid_w != spec.grid_w || grid.grid_h != spec.grid_h {
        return Err(IngestError::GridMismatch {
            expect_w: spec.grid_w,
            expect_h: spec.grid_h,
            found_w: grid.grid_w,
            found_h: grid.grid_h,
        });
    }
    let data: Vec<u8> = grid.cells.iter().map(|&c| if c { 255 } else { 0 }).collect();
    let img = GrayFrame { width: grid.grid_w, height: grid.grid_h, data };
    write_pgm(&img, path)
}

/// Write a full-resolution overlay: the source frame with every set cell
/// painted at maximum intensity.
pub fn write_overlay(
    frame: &GrayFrame,
    grid: &CellGrid,
    spec: &CellGridSpec,
    path: &Path,
) -> Result<(), IngestError> {
    if grid.grid_w != spec.grid_w || grid.grid_h != spec.grid_h {
        return Err(IngestError::GridMismatch {
            expect_w: spec.grid_w,
            expect_h: spec.grid_h,
            found_w: grid.grid_w,
            found_h: grid.grid_h,
        });
    }
    let mut out = frame.clone();
    for j in 0..grid.grid_h {
        for i in 0..grid.grid_w {
            if !grid.get(i, j) {
                continue;
            }
            let (x0, y0, x1, y1) = spec.cell_rect(i, j);
            for y in y0..y1.min(frame.height) {
                for x in x0..x1.min(frame.width) {
                    out.set(x, y, 255);
                }
            }
        }
    }
    write_pgm(&out, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_raw(path: &Path, bytes: &[u8]) {
        fs::write(path, bytes).unwrap();
    }

    fn pgm_bytes(w: usize, h: usize, data: &[u8]) -> Vec<u8> {
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn loads_directory_in_filename_order() {
        let dir = tempfile::tempdir().unwrap();
        for (name, fill) in [("b.pgm", 20u8), ("a.pgm", 10), ("c.pgm", 30)] {
            write_raw(&dir.path().join(name), &pgm_bytes(238, 158, &vec![fill; 238 * 158]));
        }
        let seq = load_sequence(dir.path(), "*.pgm").unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.width(), 238);
        assert_eq!(seq.height(), 158);
        assert_eq!(seq.frames[0].get(0, 0), 10);
        assert_eq!(seq.frames[2].get(0, 0), 30);
    }

    #[test]
    fn empty_match_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_sequence(dir.path(), "*.pgm").unwrap_err();
        assert!(matches!(err, IngestError::NoFramesMatched { .. }));
        assert!(err.to_string().contains("no frames matched"));
    }

    #[test]
    fn dimension_mismatch_names_offending_file() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(&dir.path().join("000.pgm"), &pgm_bytes(238, 158, &vec![0; 238 * 158]));
        write_raw(&dir.path().join("001.pgm"), &pgm_bytes(360, 240, &vec![0; 360 * 240]));
        let err = load_sequence(dir.path(), "*.pgm").unwrap_err();
        match err {
            IngestError::DimensionMismatch { path, found_w, found_h, .. } => {
                assert!(path.to_string_lossy().ends_with("001.pgm"));
                assert_eq!((found_w, found_h), (360, 240));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_raster_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = pgm_bytes(10, 10, &[0; 100]);
        bytes.truncate(bytes.len() - 5);
        let path = dir.path().join("bad.pgm");
        write_raw(&path, &bytes);
        let err = load_frame(&path).unwrap_err();
        assert!(matches!(err, IngestError::Corrupt { .. }));
    }

    #[test]
    fn maxval_other_than_255_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = b"P5\n2 2\n65535\n".to_vec();
        out.extend_from_slice(&[0; 8]);
        let path = dir.path().join("deep.pgm");
        write_raw(&path, &out);
        assert!(load_frame(&path).is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = b"P5\n# created by a scanner\n3 2\n# why not here too\n255\n".to_vec();
        out.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let path = dir.path().join("c.pgm");
        write_raw(&path, &out);
        let frame = load_frame(&path).unwrap();
        assert_eq!((frame.width, frame.height), (3, 2));
        assert_eq!(frame.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn ppm_luma_conversion_endpoints() {
        assert_eq!(luma(255, 255, 255), 255);
        assert_eq!(luma(0, 0, 0), 0);
        let dir = tempfile::tempdir().unwrap();
        let mut out = b"P6\n2 1\n255\n".to_vec();
        out.extend_from_slice(&[255, 255, 255, 0, 0, 0]);
        let path = dir.path().join("rgb.ppm");
        write_raw(&path, &out);
        let frame = load_frame(&path).unwrap();
        assert_eq!(frame.data, vec![255, 0]);
    }

    #[test]
    fn cell_mask_all_false_is_all_zero() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CellGridSpec::from_frame_dims(64, 48, 16).unwrap();
        let grid = CellGrid::from_spec(&spec);
        let path = dir.path().join("mask_cells.pgm");
        write_cell_mask(&grid, &spec, &path).unwrap();
        let img = load_frame(&path).unwrap();
        assert_eq!((img.width, img.height), (4, 3));
        assert!(img.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn cell_mask_single_cell_maps_to_column_row() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CellGridSpec::from_frame_dims(64, 48, 16).unwrap();
        let mut grid = CellGrid::from_spec(&spec);
        grid.set(2, 1, true);
        let path = dir.path().join("one_cells.pgm");
        write_cell_mask(&grid, &spec, &path).unwrap();
        let img = load_frame(&path).unwrap();
        for y in 0..img.height {
            for x in 0..img.width {
                let expect = if (x, y) == (2, 1) { 255 } else { 0 };
                assert_eq!(img.get(x, y), expect, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn cell_mask_grid_spec_mismatch_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CellGridSpec::from_frame_dims(64, 48, 16).unwrap();
        let grid = CellGrid::new(5, 3);
        let err = write_cell_mask(&grid, &spec, &dir.path().join("x.pgm")).unwrap_err();
        assert!(matches!(err, IngestError::GridMismatch { .. }));
    }

    #[test]
    fn overlay_paints_cells_to_max() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CellGridSpec::from_frame_dims(32, 32, 16).unwrap();
        let frame = GrayFrame::filled(32, 32, 100);
        let mut grid = CellGrid::from_spec(&spec);
        grid.set(1, 0, true);
        let path = dir.path().join("f_overlay.pgm");
        write_overlay(&frame, &grid, &spec, &path).unwrap();
        let img = load_frame(&path).unwrap();
        assert_eq!(img.get(16, 0), 255);
        assert_eq!(img.get(31, 15), 255);
        assert_eq!(img.get(0, 0), 100);
        assert_eq!(img.get(16, 16), 100);
    }

    #[test]
    fn grid_spec_floors_partial_cells() {
        let spec = CellGridSpec::from_frame_dims(238, 158, 16).unwrap();
        assert_eq!((spec.grid_w, spec.grid_h), (14, 9));
        assert!(CellGridSpec::from_frame_dims(238, 158, 1).is_err());
    }

    #[test]
    fn glob_basics() {
        assert!(glob_match("*.pgm", "frame_001.pgm"));
        assert!(!glob_match("*.pgm", "frame_001.ppm"));
        assert!(glob_match("frame_??.pgm", "frame_01.pgm"));
        assert!(!glob_match("frame_??.pgm", "frame_001.pgm"));
        assert!(glob_match("*", "anything"));
    }

    proptest! {
        #[test]
        fn pgm_round_trip_is_bit_exact(
            w in 1usize..40,
            h in 1usize..40,
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let data: Vec<u8> = (0..w * h)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 56) as u8
                })
                .collect();
            let frame = GrayFrame::new(w, h, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.pgm");
            write_pgm(&frame, &path).unwrap();
            let back = load_frame(&path).unwrap();
            prop_assert_eq!(frame, back);
        }
    }
}
