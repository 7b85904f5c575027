//! Landmark-pair stent tracking for X-ray fluoroscopy.
//!
//! Pipeline: [`detect`] finds candidate balloon markers, [`propose`] pairs
//! them into scored stent candidates with appearance descriptors, [`graph`]
//! links candidates of adjacent frames, [`gcn`] classifies graph nodes, and
//! [`track`] turns node probabilities into a per-frame stent track. [`eval`]
//! scores tracks against ground truth and [`enhance`] averages
//! motion-compensated frames. [`simulate`] generates labeled synthetic data.

pub mod ablate;
pub mod cli;
pub mod detect;
pub mod domain;
pub mod enhance;
mod error;
pub mod eval;
pub mod gcn;
pub mod graph;
pub mod io;
pub mod kv;
pub mod nn;
pub mod propose;
pub mod simulate;
pub mod track;
pub mod train;

pub use domain::{
    bbox_from_pair, iou, BoundingBox, GrayFrame, GroundTruth, GtFrame, LandmarkDetection, Point2,
    Sequence, StentCandidate, MIN_SIDE,
};
pub use error::{Error, Result};
