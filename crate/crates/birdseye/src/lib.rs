//! Bird's-eye traffic-video analysis pipeline.
//!
//! The crate covers the full offline chain for fixed, high-altitude footage of
//! a four-arm intersection:
//!
//! 1. [`imaging`] — grayscale image primitives: block down-sampling,
//!    projective warps, windowed SSIM, normalized intensity vectors, PGM I/O.
//! 2. [`stabilize`] — video stabilization against a reference frame: corner
//!    matching, RANSAC homography, ECC refinement, and a threshold-driven
//!    controller that reuses or re-estimates homographies per frame.
//! 3. [`roadmap`] — road-aligned coordinates: pixel positions to arc-length /
//!    signed-lateral-offset pairs on a polyline centerline, plus lane and
//!    section assignment and road masking.
//! 4. [`tracking`] — multi-object tracking of road-plane detections with
//!    constant-velocity Kalman filters, greedy gated association, and RTS
//!    smoothing.
//! 5. [`predict`] — LSTM models for turn-intention / yield classification and
//!    short-horizon trajectory regression, optionally conditioned on
//!    lane-center reference paths.
//! 6. [`scenegen`] — deterministic synthetic scene generator producing
//!    jittered frames, detections, and labeled vehicle-pair episodes with
//!    exact ground truth, used to exercise everything above end to end.

pub mod imaging;
pub mod predict;
pub mod roadmap;
pub mod scenegen;
pub mod stabilize;
pub mod tracking;
