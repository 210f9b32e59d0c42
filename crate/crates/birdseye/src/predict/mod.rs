//! Intention and trajectory prediction for interacting vehicle pairs.
//!
//! Models are hand-rolled LSTMs over per-step pair features (positions,
//! velocities, headings, and distances to the intersection center of both
//! vehicles, all relative to the intersection center at the origin):
//!
//! - the *intention* network emits per-step direction (go-straight /
//!   turn-left / turn-right) and yield (ego-first / target-first)
//!   probabilities;
//! - the *trajectory* network regresses a fixed future horizon for the
//!   target vehicle, in one of three modes: absolute displacements from the
//!   current position, the same plus intention one-hots, or residuals
//!   relative to samples of a lane-center [`reference::ReferenceTrajectory`]
//!   selected by the intention.
//!
//! Training is plain BPTT with an adaptive-moment optimizer, gradient-checked
//! against central finite differences. Everything is deterministic given a
//! seed.

pub mod eval;
pub mod lstm;
pub mod model_io;
pub mod models;
pub mod reference;
pub mod train;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Direction intention of a vehicle approaching the intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Go straight.
    GS,
    /// Turn left.
    TL,
    /// Turn right.
    TR,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::GS, Direction::TL, Direction::TR];

    pub fn index(self) -> usize {
        match self {
            Direction::GS => 0,
            Direction::TL => 1,
            Direction::TR => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Which vehicle of a pair passes the conflict point first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YieldOrder {
    EgoFirst,
    TargetFirst,
}

impl YieldOrder {
    pub fn index(self) -> usize {
        match self {
            YieldOrder::EgoFirst => 0,
            YieldOrder::TargetFirst => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        [YieldOrder::EgoFirst, YieldOrder::TargetFirst].get(i).copied()
    }
}

/// Number of per-step pair features (6 per vehicle).
pub const PAIR_FEATURES: usize = 12;

/// Kinematic state of one vehicle at one step, intersection-centered meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    /// Velocity heading, radians in (−π, π].
    pub heading: f64,
    /// Distance to the intersection center.
    pub dist_center: f64,
}

impl AgentState {
    pub fn speed(&self) -> f64 {
        (self.vx * self.vx + self.vy * self.vy).sqrt()
    }
}

/// Joint state of the interacting pair at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairState {
    pub ego: AgentState,
    pub target: AgentState,
}

impl PairState {
    /// Flat feature layout: `[ego x,y,vx,vy,heading,dist, target ditto]`.
    pub fn to_flat(&self) -> [f64; PAIR_FEATURES] {
        [
            self.ego.x,
            self.ego.y,
            self.ego.vx,
            self.ego.vy,
            self.ego.heading,
            self.ego.dist_center,
            self.target.x,
            self.target.y,
            self.target.vx,
            self.target.vy,
            self.target.heading,
            self.target.dist_center,
        ]
    }

    pub fn from_flat(v: &[f64; PAIR_FEATURES]) -> Self {
        let agent = |s: &[f64]| AgentState {
            x: s[0],
            y: s[1],
            vx: s[2],
            vy: s[3],
            heading: s[4],
            dist_center: s[5],
        };
        PairState {
            ego: agent(&v[0..6]),
            target: agent(&v[6..12]),
        }
    }
}

/// Wraps a heading into (−π, π].
pub fn normalize_heading(h: f64) -> f64 {
    let mut h = h.rem_euclid(2.0 * std::f64::consts::PI);
    if h > std::f64::consts::PI {
        h -= 2.0 * std::f64::consts::PI;
    }
    h
}

/// One labeled interaction-pair episode (dataset line).
///
/// `steps[t]` are the flat [`PairState`] features at 1/`dt_s` Hz.
/// `future_target_xy` shares the same timeline: index `t` is the target
/// position at step `t`, and the array extends past the end of `steps` so
/// every window has a full future horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEpisode {
    pub pair_id: u64,
    pub dt_s: f64,
    pub steps: Vec<[f64; PAIR_FEATURES]>,
    pub direction_label: Direction,
    pub yield_label: YieldOrder,
    pub future_target_xy: Vec<[f64; 2]>,
}

impl PairEpisode {
    pub fn pair_state(&self, t: usize) -> PairState {
        PairState::from_flat(&self.steps[t])
    }

    /// Validates the per-step invariants and internal consistency.
    pub fn validate(&self) -> Result<(), PredictError> {
        if self.steps.is_empty() {
            return Err(PredictError::InvalidData("episode has no steps".into()));
        }
        if !(self.dt_s.is_finite() && self.dt_s > 0.0) {
            return Err(PredictError::InvalidData("dt must be positive".into()));
        }
        if self.future_target_xy.len() < self.steps.len() {
            return Err(PredictError::InvalidData(
                "future_target_xy shorter than steps".into(),
            ));
        }
        for (t, flat) in self.steps.iter().enumerate() {
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(PredictError::InvalidData(format!(
                    "non-finite feature at step {t}"
                )));
            }
            let s = PairState::from_flat(flat);
            for (who, a) in [("ego", &s.ego), ("target", &s.target)] {
                let d = (a.x * a.x + a.y * a.y).sqrt();
                if (d - a.dist_center).abs() > 1e-9 {
                    return Err(PredictError::InvalidData(format!(
                        "step {t}: {who} distance feature {} != |position| {d}",
                        a.dist_center
                    )));
                }
                if !(a.heading > -std::f64::consts::PI - 1e-12
                    && a.heading <= std::f64::consts::PI + 1e-12)
                {
                    return Err(PredictError::InvalidData(format!(
                        "step {t}: {who} heading {} outside (-pi, pi]",
                        a.heading
                    )));
                }
            }
            let fut = self.future_target_xy[t];
            if (fut[0] - s.target.x).abs() > 1e-6 || (fut[1] - s.target.y).abs() > 1e-6 {
                return Err(PredictError::InvalidData(format!(
                    "step {t}: future_target_xy disagrees with target position"
                )));
            }
        }
        Ok(())
    }
}

/// Writes a pair dataset as JSON-lines; optional verbatim provenance line
/// first.
pub fn write_pairs_jsonl(
    writer: &mut impl Write,
    episodes: &[PairEpisode],
    provenance_line: Option<&str>,
) -> Result<(), PredictError> {
    if let Some(p) = provenance_line {
        writeln!(writer, "{p}")?;
    }
    for e in episodes {
        writeln!(writer, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}

/// Reads and validates a pair dataset.
pub fn read_pairs_jsonl(reader: impl BufRead) -> Result<Vec<PairEpisode>, PredictError> {
    let mut out: Vec<PairEpisode> = Vec::new();
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
        let episode: PairEpisode = serde_json::from_value(value)?;
        episode.validate()?;
        out.push(episode);
    }
    Ok(out)
}

/// Fixed feature scaling applied inside every model: positions and distances
/// are divided by [`POS_SCALE`], velocities by [`VEL_SCALE`], headings by π.
/// Keeps LSTM pre-activations O(1) without any data-dependent statistics.
pub const POS_SCALE: f64 = 40.0;
pub const VEL_SCALE: f64 = 10.0;

/// Scaled 12-feature vector for one step.
pub fn scaled_pair_features(flat: &[f64; PAIR_FEATURES]) -> [f64; PAIR_FEATURES] {
    let mut out = [0.0; PAIR_FEATURES];
    for agent in 0..2 {
        let b = agent * 6;
        out[b] = flat[b] / POS_SCALE;
        out[b + 1] = flat[b + 1] / POS_SCALE;
        out[b + 2] = flat[b + 2] / VEL_SCALE;
        out[b + 3] = flat[b + 3] / VEL_SCALE;
        out[b + 4] = flat[b + 4] / std::f64::consts::PI;
        out[b + 5] = flat[b + 5] / POS_SCALE;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn make_episode() -> PairEpisode {
        let mut steps = Vec::new();
        let mut future = Vec::new();
        for t in 0..5 {
            let x = -30.0 + t as f64;
            let ego = AgentState {
                x,
                y: -1.75,
                vx: 10.0,
                vy: 0.0,
                heading: 0.0,
                dist_center: (x * x + 1.75f64 * 1.75).sqrt(),
            };
            let target = AgentState {
                x: 1.75,
                y: -(40.0 - t as f64),
                vx: 0.0,
                vy: 10.0,
                heading: std::f64::consts::FRAC_PI_2,
                dist_center: (1.75f64 * 1.75 + (40.0 - t as f64).powi(2)).sqrt(),
            };
            steps.push(PairState { ego, target }.to_flat());
            future.push([target.x, target.y]);
        }
        for extra in 0..3 {
            future.push([1.75, -35.0 + extra as f64]);
        }
        PairEpisode {
            pair_id: 9,
            dt_s: 0.1,
            steps,
            direction_label: Direction::GS,
            yield_label: YieldOrder::TargetFirst,
            future_target_xy: future,
        }
    }

    #[test]
    fn episode_jsonl_roundtrip() {
        let ep = make_episode();
        ep.validate().unwrap();
        let mut buf = Vec::new();
        write_pairs_jsonl(
            &mut buf,
            &[ep.clone()],
            Some(r#"{"provenance":{"stage":"gen","config":"00","seed":7}}"#),
        )
        .unwrap();
        let back = read_pairs_jsonl(&buf[..]).unwrap();
        assert_eq!(back, vec![ep]);
    }

    #[test]
    fn validation_rejects_inconsistent_distance() {
        let mut ep = make_episode();
        ep.steps[2][5] += 0.5; // corrupt ego dist_center
        assert!(matches!(ep.validate(), Err(PredictError::InvalidData(_))));
    }

    #[test]
    fn validation_rejects_short_future() {
        let mut ep = make_episode();
        ep.future_target_xy.truncate(3);
        assert!(ep.validate().is_err());
    }

    #[test]
    fn heading_normalization() {
        use std::f64::consts::PI;
        assert!((normalize_heading(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_heading(-PI) - PI).abs() < 1e-12, "-pi wraps to +pi");
        assert_eq!(normalize_heading(0.5), 0.5);
        let h = normalize_heading(-3.5 * PI);
        assert!(h > -PI && h <= PI);
    }

    #[test]
    fn flat_roundtrip_and_scaling() {
        let ep = make_episode();
        let s = ep.pair_state(0);
        let flat = s.to_flat();
        assert_eq!(PairState::from_flat(&flat), s);
        let scaled = scaled_pair_features(&flat);
        assert!((scaled[0] - flat[0] / POS_SCALE).abs() < 1e-15);
        assert!((scaled[2] - flat[2] / VEL_SCALE).abs() < 1e-15);
        assert!((scaled[10] - flat[10] / std::f64::consts::PI).abs() < 1e-15);
    }
}
