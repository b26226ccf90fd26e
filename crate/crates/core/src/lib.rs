//! Cell-based anomaly detection for crowded surveillance video.
//!
//! The pipeline splits each frame into non-overlapping N×N cells, restricts
//! all analysis to foreground pixels, and extracts three features per cell:
//! average foreground motion (pyramidal Lucas-Kanade flow), weighted
//! foreground size, and a 4-orientation Gabor texture descriptor. Motion and
//! size are modelled per cell by smoothed discrete pmfs; texture by an
//! adaptively grown codebook matched with Pearson correlation. A two-stage
//! cascade flags cells as anomalous, and a 3×3×3 spatio-temporal vote removes
//! isolated flags.
//!
//! Modules mirror the pipeline stages:
//! - [`ingest`]: PGM/PPM frame I/O, cell grids, mask/overlay writers
//! - [`foreground`]: median background model and segmentation
//! - [`optflow`]: pyramidal iterative Lucas-Kanade on foreground pixels
//! - [`features`]: per-cell motion, size and texture features
//! - [`models`]: per-cell pmfs, texture codebooks, persistence
//! - [`detector`]: cascade classification, post-filtering, sequence driver
//! - [`evaluate`]: ROC/EER metrics, localization scoring, synthetic scenes

pub mod detector;
pub mod evaluate;
pub mod features;
pub mod foreground;
pub mod ingest;
pub mod models;
pub mod optflow;

pub use detector::{AnomalyVolume, CellClass, DetectorConfig, Reason};
pub use features::{CellFeatures, GaborBank, SizeKernel};
pub use foreground::{BackgroundModel, ForegroundMask};
pub use ingest::{CellGrid, CellGridSpec, FrameSequence, GrayFrame};
pub use models::{CellModel, ModelGrid, Pmf, TextureCodebook};
pub use optflow::{FlowConfig, FlowField};
