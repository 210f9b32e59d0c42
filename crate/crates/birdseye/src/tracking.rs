//! Multi-object tracking over metric road-plane detections.
//!
//! The filter is a linear Kalman filter; the default motion model is
//! constant-velocity with state `[pos_x, pos_y, vel_x, vel_y]` (meters,
//! meters/second), position-only measurements, and discrete
//! white-noise-acceleration process noise. The core predict/update steps are
//! dimension-agnostic so degenerate (e.g. scalar) models can be exercised
//! directly.
//!
//! [`run_tracker`] performs per-frame greedy nearest-neighbor association
//! with a Euclidean gate and a tentative/confirmed/dead lifecycle;
//! [`rts_smooth`] runs a backward smoothing pass over a finished track using
//! the stored per-frame predicted and filtered moments.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Linear-Gaussian model `x' = Fx + w`, `z = Hx + v` with `w ~ N(0, Q)`,
/// `v ~ N(0, R)`.
#[derive(Debug, Clone)]
pub struct KalmanModel {
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub dt: f64,
}

impl KalmanModel {
    pub fn new(
        f: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        dt: f64,
    ) -> Result<Self, TrackingError> {
        let n = f.nrows();
        if f.ncols() != n || q.nrows() != n || q.ncols() != n {
            return Err(TrackingError::InvalidInput(
                "F and Q must be square with matching dimension".into(),
            ));
        }
        let m = h.nrows();
        if h.ncols() != n || r.nrows() != m || r.ncols() != m {
            return Err(TrackingError::InvalidInput(
                "H and R dimensions inconsistent with state".into(),
            ));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(TrackingError::InvalidInput("dt must be positive".into()));
        }
        for (name, mat) in [("Q", &q), ("R", &r)] {
            if (mat - mat.transpose()).amax() > 1e-9 {
                return Err(TrackingError::InvalidInput(format!(
                    "{name} must be symmetric"
                )));
            }
        }
        if r.clone().cholesky().is_none() {
            return Err(TrackingError::InvalidInput(
                "R must be positive definite".into(),
            ));
        }
        Ok(Self { f, h, q, r, dt })
    }

    /// Constant-velocity model: 4-state `[px, py, vx, vy]`, position-only
    /// measurements, discrete white-noise-acceleration `Q` with the given
    /// acceleration variance ((m/s²)²) and isotropic measurement variance
    /// (m²).
    pub fn constant_velocity(dt: f64, accel_var: f64, meas_var: f64) -> Result<Self, TrackingError> {
        if !(accel_var.is_finite() && accel_var >= 0.0) {
            return Err(TrackingError::InvalidInput(
                "acceleration variance must be non-negative".into(),
            ));
        }
        if !(meas_var.is_finite() && meas_var > 0.0) {
            return Err(TrackingError::InvalidInput(
                "measurement variance must be positive".into(),
            ));
        }
        let f = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.0, dt, 0.0, //
                0.0, 1.0, 0.0, dt, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        );
        let h = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let (d2, d3, d4) = (dt * dt, dt * dt * dt, dt * dt * dt * dt);
        let q = accel_var
            * DMatrix::from_row_slice(
                4,
                4,
                &[
                    d4 / 4.0,
                    0.0,
                    d3 / 2.0,
                    0.0,
                    0.0,
                    d4 / 4.0,
                    0.0,
                    d3 / 2.0,
                    d3 / 2.0,
                    0.0,
                    d2,
                    0.0,
                    0.0,
                    d3 / 2.0,
                    0.0,
                    d2,
                ],
            );
        let r = DMatrix::from_diagonal_element(2, 2, meas_var);
        Self::new(f, h, q, r, dt)
    }
}

/// Filter moments (mean and covariance).
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
}

/// Position detection with physical extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub frame: u64,
    pub z: [f64; 2],
    pub length_m: f64,
    pub width_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Dead,
}

/// Per-frame record kept for smoothing: prior (predicted) and posterior
/// (filtered) moments plus the associated measurement, if any.
#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub frame: u64,
    pub predicted: KalmanState,
    pub filtered: KalmanState,
    pub measurement: Option<Measurement>,
}

#[derive(Debug, Clone)]
pub struct KalmanTrack {
    pub track_id: u64,
    pub status: TrackStatus,
    /// Consecutive hits (reset by a miss).
    pub hits: u32,
    /// Consecutive misses (reset by a hit).
    pub misses: u32,
    pub history: Vec<HistoryEntry>,
}

impl KalmanTrack {
    /// Mean measured extent over all associated detections.
    pub fn mean_extent(&self) -> (f64, f64) {
        let mut n = 0usize;
        let (mut l, mut w) = (0.0, 0.0);
        for e in &self.history {
            if let Some(m) = &e.measurement {
                l += m.length_m;
                w += m.width_m;
                n += 1;
            }
        }
        if n == 0 {
            (0.0, 0.0)
        } else {
            (l / n as f64, w / n as f64)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrackerConfig {
    /// Association gate on Euclidean distance, meters.
    pub gate_m: f64,
    /// Consecutive hits promoting a tentative track.
    pub confirm_hits: u32,
    /// Consecutive misses killing a track.
    pub max_misses: u32,
    /// Initial velocity variance for spawned tracks, (m/s)².
    pub init_vel_var: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            gate_m: 3.0,
            confirm_hits: 3,
            max_misses: 5,
            init_vel_var: 100.0,
        }
    }
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let pt = p.transpose();
    *p += pt;
    *p *= 0.5;
}

/// Prediction step: `x <- Fx`, `P <- FPFᵀ + Q` (covariance symmetrized).
pub fn kf_predict(state: &KalmanState, f: &DMatrix<f64>, q: &DMatrix<f64>) -> KalmanState {
    let x = f * &state.x;
    let mut p = f * &state.p * f.transpose() + q;
    symmetrize(&mut p);
    KalmanState { x, p }
}

/// Measurement update with Joseph-form covariance.
pub fn kf_update(
    state: &KalmanState,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    z: &DVector<f64>,
) -> Result<KalmanState, TrackingError> {
    let innovation = z - h * &state.x;
    let s = h * &state.p * h.transpose() + r;
    let s_inv = s.clone().try_inverse().ok_or_else(|| {
        TrackingError::NumericalFailure("innovation covariance not invertible".into())
    })?;
    let k = &state.p * h.transpose() * s_inv;
    let x = &state.x + &k * innovation;
    let n = state.x.len();
    let ikh = DMatrix::identity(n, n) - &k * h;
    let mut p = &ikh * &state.p * ikh.transpose() + &k * r * k.transpose();
    symmetrize(&mut p);
    Ok(KalmanState { x, p })
}

/// One filter cycle: predict, then update if a measurement is present.
pub fn kf_step(
    state: &KalmanState,
    model: &KalmanModel,
    z: Option<&Measurement>,
) -> Result<KalmanState, TrackingError> {
    let predicted = kf_predict(state, &model.f, &model.q);
    match z {
        Some(m) => kf_update(
            &predicted,
            &model.h,
            &model.r,
            &DVector::from_row_slice(&m.z),
        ),
        None => Ok(predicted),
    }
}

/// Normalized innovation squared `νᵀ S⁻¹ ν` of a measurement against a
/// predicted state (whiteness diagnostic; expectation equals the measurement
/// dimension for a consistent filter).
pub fn innovation_nis(
    predicted: &KalmanState,
    model: &KalmanModel,
    z: &[f64; 2],
) -> Result<f64, TrackingError> {
    let zv = DVector::from_row_slice(z);
    let innovation = &zv - &model.h * &predicted.x;
    let s = &model.h * &predicted.p * model.h.transpose() + &model.r;
    let s_inv = s.try_inverse().ok_or_else(|| {
        TrackingError::NumericalFailure("innovation covariance not invertible".into())
    })?;
    Ok((innovation.transpose() * s_inv * innovation)[(0, 0)])
}

/// Association result between track and detection indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Association {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Greedy matching on ascending Euclidean distance: all within-gate pairs are
/// sorted by (distance, track index, detection index) and taken while both
/// sides are unused.
pub fn associate(
    track_positions: &[[f64; 2]],
    detections: &[[f64; 2]],
    gate_m: f64,
) -> Result<Association, TrackingError> {
    if !(gate_m.is_finite() && gate_m > 0.0) {
        return Err(TrackingError::InvalidInput("gate must be positive".into()));
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, tp) in track_positions.iter().enumerate() {
        for (di, dp) in detections.iter().enumerate() {
            let dist = ((tp[0] - dp[0]).powi(2) + (tp[1] - dp[1]).powi(2)).sqrt();
            if dist <= gate_m {
                candidates.push((dist, ti, di));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut track_used = vec![false; track_positions.len()];
    let mut det_used = vec![false; detections.len()];
    let mut pairs = Vec::new();
    for (_, ti, di) in candidates {
        if !track_used[ti] && !det_used[di] {
            track_used[ti] = true;
            det_used[di] = true;
            pairs.push((ti, di));
        }
    }
    Ok(Association {
        pairs,
        unmatched_tracks: (0..track_positions.len()).filter(|i| !track_used[*i]).collect(),
        unmatched_detections: (0..detections.len()).filter(|i| !det_used[*i]).collect(),
    })
}

/// Runs the full tracker over a detection stream (any frame order; grouped
/// internally). Frames between the first and last detection with no
/// detections still advance prediction and count as misses.
pub fn run_tracker(
    detections: &[Measurement],
    model: &KalmanModel,
    cfg: &TrackerConfig,
) -> Result<Vec<KalmanTrack>, TrackingError> {
    if model.f.nrows() != 4 || model.h.nrows() != 2 {
        return Err(TrackingError::InvalidInput(
            "run_tracker requires the 4-state / 2-measurement model".into(),
        ));
    }
    let mut by_frame: BTreeMap<u64, Vec<&Measurement>> = BTreeMap::new();
    for d in detections {
        if !(d.z[0].is_finite() && d.z[1].is_finite()) {
            return Err(TrackingError::InvalidInput(
                "detections must be finite".into(),
            ));
        }
        by_frame.entry(d.frame).or_default().push(d);
    }
    let mut finished: Vec<KalmanTrack> = Vec::new();
    let mut live: Vec<(KalmanTrack, KalmanState)> = Vec::new();
    let mut next_id = 1u64;
    let (first, last) = match (by_frame.keys().next(), by_frame.keys().next_back()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return Ok(Vec::new()),
    };
    let empty: Vec<&Measurement> = Vec::new();
    for frame in first..=last {
        let frame_dets = by_frame.get(&frame).unwrap_or(&empty);
        // Predict all live tracks.
        let predicted: Vec<KalmanState> = live
            .iter()
            .map(|(_, s)| kf_predict(s, &model.f, &model.q))
            .collect();
        let track_pos: Vec<[f64; 2]> = predicted.iter().map(|s| [s.x[0], s.x[1]]).collect();
        let det_pos: Vec<[f64; 2]> = frame_dets.iter().map(|d| d.z).collect();
        let assoc = associate(&track_pos, &det_pos, cfg.gate_m)?;

        let mut matched_det: Vec<Option<usize>> = vec![None; live.len()];
        for (ti, di) in &assoc.pairs {
            matched_det[*ti] = Some(*di);
        }
        let mut still_live: Vec<(KalmanTrack, KalmanState)> = Vec::new();
        for (idx, ((mut track, _), pred)) in
            live.into_iter().zip(predicted.into_iter()).enumerate()
        {
            let (filtered, measurement) = match matched_det[idx] {
                Some(di) => {
                    let m = frame_dets[di];
                    let f = kf_update(
                        &pred,
                        &model.h,
                        &model.r,
                        &DVector::from_row_slice(&m.z),
                    )?;
                    (f, Some(m.clone()))
                }
                None => (pred.clone(), None),
            };
            let hit = measurement.is_some();
            track.history.push(HistoryEntry {
                frame,
                predicted: pred,
                filtered: filtered.clone(),
                measurement,
            });
            if hit {
                track.hits += 1;
                track.misses = 0;
                if track.status == TrackStatus::Tentative && track.hits >= cfg.confirm_hits {
                    track.status = TrackStatus::Confirmed;
                }
            } else {
                track.misses += 1;
                track.hits = 0;
                if track.misses >= cfg.max_misses {
                    track.status = TrackStatus::Dead;
                    finished.push(track);
                    continue;
                }
            }
            still_live.push((track, filtered));
        }
        live = still_live;
        // Spawn tentative tracks from unmatched detections, in input order.
        for di in assoc.unmatched_detections {
            let m = frame_dets[di];
            let x = DVector::from_row_slice(&[m.z[0], m.z[1], 0.0, 0.0]);
            let mut p = DMatrix::zeros(4, 4);
            p[(0, 0)] = model.r[(0, 0)];
            p[(1, 1)] = model.r[(1, 1)];
            p[(2, 2)] = cfg.init_vel_var;
            p[(3, 3)] = cfg.init_vel_var;
            let state = KalmanState { x, p };
            let track = KalmanTrack {
                track_id: next_id,
                status: TrackStatus::Tentative,
                hits: 1,
                misses: 0,
                history: vec![HistoryEntry {
                    frame,
                    predicted: state.clone(),
                    filtered: state.clone(),
                    measurement: Some(m.clone()),
                }],
            };
            next_id += 1;
            live.push((track, state));
        }
    }
    finished.extend(live.into_iter().map(|(t, _)| t));
    // Histories end at the last associated detection: trailing coast-only
    // entries are extrapolation, not trajectory.
    for t in finished.iter_mut() {
        while t
            .history
            .last()
            .map(|e| e.measurement.is_none())
            .unwrap_or(false)
        {
            t.history.pop();
        }
    }
    finished.sort_by_key(|t| t.track_id);
    Ok(finished)
}

/// Smoothed moments for one frame.
#[derive(Debug, Clone)]
pub struct SmoothedState {
    pub frame: u64,
    pub state: KalmanState,
}

/// Backward (Rauch-Tung-Striebel) smoothing pass over a finished track.
///
/// Uses the stored per-frame predicted/filtered moments:
/// `G_k = P_k Fᵀ (P_{k+1|k})⁻¹`, then
/// `x_k^s = x_k + G_k (x_{k+1}^s − x_{k+1|k})` and the matching covariance
/// recursion, with symmetrization each step.
pub fn rts_smooth(
    track: &KalmanTrack,
    model: &KalmanModel,
) -> Result<Vec<SmoothedState>, TrackingError> {
    let n = track.history.len();
    if n < 2 {
        return Err(TrackingError::InvalidInput(
            "smoothing needs at least 2 history entries with stored covariances".into(),
        ));
    }
    let mut smoothed: Vec<KalmanState> = vec![track.history[n - 1].filtered.clone()];
    for k in (0..n - 1).rev() {
        let filt = &track.history[k].filtered;
        let pred_next = &track.history[k + 1].predicted;
        let p_pred_inv = pred_next.p.clone().try_inverse().ok_or_else(|| {
            TrackingError::NumericalFailure("predicted covariance not invertible".into())
        })?;
        let gain = &filt.p * model.f.transpose() * p_pred_inv;
        let next_s = smoothed.last().unwrap();
        let x = &filt.x + &gain * (&next_s.x - &pred_next.x);
        let mut p = &filt.p + &gain * (&next_s.p - &pred_next.p) * gain.transpose();
        symmetrize(&mut p);
        smoothed.push(KalmanState { x, p });
    }
    smoothed.reverse();
    Ok(track
        .history
        .iter()
        .zip(smoothed)
        .map(|(e, state)| SmoothedState {
            frame: e.frame,
            state,
        })
        .collect())
}

/// RMS magnitude of the discrete jerk (third difference / dt³) of a 2-D
/// position sequence. Returns 0 for sequences shorter than 4.
pub fn rms_jerk(positions: &[[f64; 2]], dt: f64) -> f64 {
    if positions.len() < 4 {
        return 0.0;
    }
    let dt3 = dt * dt * dt;
    let mut acc = 0.0;
    let mut count = 0usize;
    for w in positions.windows(4) {
        let jx = (w[3][0] - 3.0 * w[2][0] + 3.0 * w[1][0] - w[0][0]) / dt3;
        let jy = (w[3][1] - 3.0 * w[2][1] + 3.0 * w[1][1] - w[0][1]) / dt3;
        acc += jx * jx + jy * jy;
        count += 1;
    }
    (acc / count as f64).sqrt()
}

/// One detection line of the road-plane detection stream (JSON-lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: u64,
    pub x_m: f64,
    pub y_m: f64,
    pub length_m: f64,
    pub width_m: f64,
    pub score: f64,
}

impl DetectionRecord {
    pub fn to_measurement(&self) -> Measurement {
        Measurement {
            frame: self.frame,
            z: [self.x_m, self.y_m],
            length_m: self.length_m,
            width_m: self.width_m,
        }
    }
}

/// Writes detections as JSON-lines; `provenance_line`, when given, is written
/// first verbatim (it should be a JSON object with a `provenance` key).
pub fn write_detections_jsonl(
    writer: &mut impl Write,
    detections: &[DetectionRecord],
    provenance_line: Option<&str>,
) -> Result<(), TrackingError> {
    if let Some(p) = provenance_line {
        writeln!(writer, "{p}")?;
    }
    for d in detections {
        writeln!(writer, "{}", serde_json::to_string(d)?)?;
    }
    Ok(())
}

pub fn read_detections_jsonl(reader: impl BufRead) -> Result<Vec<DetectionRecord>, TrackingError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)?;
        if value.get("provenance").is_some() {
            continue;
        }
        out.push(serde_json::from_value(value)?);
    }
    Ok(out)
}

/// One row of the trajectory CSV: the vehicle-record schema plus velocity and
/// heading.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub track_id: u64,
    pub frame: u64,
    pub x_m: f64,
    pub y_m: f64,
    pub section_id: usize,
    pub lane_id: i32,
    pub length_m: f64,
    pub width_m: f64,
    pub vx: f64,
    pub vy: f64,
    pub heading_rad: f64,
}

pub const TRAJECTORY_HEADER: &str =
    "track_id,frame,x_m,y_m,section_id,lane_id,length_m,width_m,vx,vy,heading_rad";

pub fn write_trajectory_csv(
    writer: &mut impl Write,
    rows: &[TrajectoryRow],
    provenance: Option<&str>,
) -> Result<(), TrackingError> {
    if let Some(p) = provenance {
        writeln!(writer, "# {p}")?;
    }
    writeln!(writer, "{TRAJECTORY_HEADER}")?;
    for r in rows {
        writeln!(
            writer,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.track_id,
            r.frame,
            r.x_m,
            r.y_m,
            r.section_id,
            r.lane_id,
            r.length_m,
            r.width_m,
            r.vx,
            r.vy,
            r.heading_rad
        )?;
    }
    Ok(())
}

pub fn read_trajectory_csv(reader: impl BufRead) -> Result<Vec<TrajectoryRow>, TrackingError> {
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != TRAJECTORY_HEADER {
                return Err(TrackingError::Parse(format!("unexpected header {line:?}")));
            }
            saw_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(TrackingError::Parse(format!(
                "line {}: expected 11 fields, got {}",
                lineno + 1,
                f.len()
            )));
        }
        let err = |e: String| TrackingError::Parse(format!("line {}: {e}", lineno + 1));
        rows.push(TrajectoryRow {
            track_id: f[0].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
            frame: f[1].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
            x_m: f[2].parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?,
            y_m: f[3].parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?,
            section_id: f[4].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
            lane_id: f[5].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
            length_m: f[6].parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?,
            width_m: f[7].parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?,
            vx: f[8].parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?,
            vy: f[9].parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?,
            heading_rad: f[10].parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?,
        });
    }
    Ok(rows)
}
