//! Intention and trajectory networks: an LSTM trunk plus linear heads, with
//! the feature encodings that connect them to pair episodes.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lstm::{softmax, LstmLayer};
use super::reference::ApproachReferences;
use super::train::{FlatParams, SequenceModel};
use super::{
    scaled_pair_features, Direction, PairEpisode, PredictError, YieldOrder, PAIR_FEATURES,
    POS_SCALE,
};

/// Spacing of the reference samples fed to the conditioned trajectory model.
pub const REF_FEATURE_SPACING_M: f64 = 4.0;
/// Number of reference samples in the conditioned feature vector.
pub const REF_FEATURE_POINTS: usize = 6;
/// One-hot width of the intention context (3 direction + 2 yield).
pub const INTENT_ONEHOT: usize = 5;

fn head_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let k = 1.0 / (cols as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-k..k))
}

// ---------------------------------------------------------------------------
// Intention model
// ---------------------------------------------------------------------------

/// Per-step direction/yield classifier over pair-state sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentionModel {
    pub lstm: LstmLayer,
    /// Direction head, `3 × hidden`.
    pub w_dir: DMatrix<f64>,
    pub b_dir: DVector<f64>,
    /// Yield head, `2 × hidden`.
    pub w_yield: DMatrix<f64>,
    pub b_yield: DVector<f64>,
}

/// One training sequence: raw (unscaled) pair steps plus the episode labels,
/// which apply at every step.
#[derive(Debug, Clone)]
pub struct IntentionSample {
    pub features: Vec<DVector<f64>>,
    pub direction: Direction,
    pub yield_order: YieldOrder,
}

/// Scaled per-step feature vectors for the intention model.
pub fn intention_features(ep: &PairEpisode) -> Vec<DVector<f64>> {
    ep.steps
        .iter()
        .map(|s| DVector::from_column_slice(&scaled_pair_features(s)))
        .collect()
}

pub fn intention_sample(ep: &PairEpisode) -> IntentionSample {
    IntentionSample {
        features: intention_features(ep),
        direction: ep.direction_label,
        yield_order: ep.yield_label,
    }
}

impl IntentionModel {
    pub fn zeros(hidden: usize) -> Result<Self, PredictError> {
        Ok(Self {
            lstm: LstmLayer::zeros(PAIR_FEATURES, hidden)?,
            w_dir: DMatrix::zeros(3, hidden),
            b_dir: DVector::zeros(3),
            w_yield: DMatrix::zeros(2, hidden),
            b_yield: DVector::zeros(2),
        })
    }

    pub fn new(hidden: usize, seed: u64) -> Result<Self, PredictError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            lstm: LstmLayer::init_uniform(PAIR_FEATURES, hidden, &mut rng)?,
            w_dir: head_init(3, hidden, &mut rng),
            b_dir: DVector::zeros(3),
            w_yield: head_init(2, hidden, &mut rng),
            b_yield: DVector::zeros(2),
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.lstm.hidden_size
    }

    /// Per-step (direction, yield) probability vectors.
    pub fn forward(
        &self,
        features: &[DVector<f64>],
    ) -> Result<Vec<(DVector<f64>, DVector<f64>)>, PredictError> {
        let cache = self.lstm.forward(features)?;
        Ok(cache
            .hidden
            .iter()
            .map(|h| {
                (
                    softmax(&(&self.w_dir * h + &self.b_dir)),
                    softmax(&(&self.w_yield * h + &self.b_yield)),
                )
            })
            .collect())
    }

    /// Per-step argmax labels.
    pub fn predict_labels(
        &self,
        features: &[DVector<f64>],
    ) -> Result<Vec<(Direction, YieldOrder)>, PredictError> {
        Ok(self
            .forward(features)?
            .into_iter()
            .map(|(pd, py)| {
                (
                    Direction::from_index(pd.imax()).unwrap(),
                    YieldOrder::from_index(py.imax()).unwrap(),
                )
            })
            .collect())
    }

    /// Mean per-step cross-entropy (both heads summed) and its gradient in
    /// flat-parameter order.
    pub fn loss_grad(&self, sample: &IntentionSample) -> Result<(f64, Vec<f64>), PredictError> {
        let cache = self.lstm.forward(&sample.features)?;
        let steps = cache.hidden.len();
        let inv = 1.0 / steps as f64;
        let di = sample.direction.index();
        let yi = sample.yield_order.index();
        let mut loss = 0.0;
        let mut dh = Vec::with_capacity(steps);
        let mut dw_dir = DMatrix::zeros(3, self.hidden_size());
        let mut db_dir = DVector::zeros(3);
        let mut dw_yield = DMatrix::zeros(2, self.hidden_size());
        let mut db_yield = DVector::zeros(2);
        for h in &cache.hidden {
            let pd = softmax(&(&self.w_dir * h + &self.b_dir));
            let py = softmax(&(&self.w_yield * h + &self.b_yield));
            loss -= inv * (pd[di].max(1e-300).ln() + py[yi].max(1e-300).ln());
            let mut dz_d = pd;
            dz_d[di] -= 1.0;
            dz_d *= inv;
            let mut dz_y = py;
            dz_y[yi] -= 1.0;
            dz_y *= inv;
            dw_dir += &dz_d * h.transpose();
            db_dir += &dz_d;
            dw_yield += &dz_y * h.transpose();
            db_yield += &dz_y;
            dh.push(self.w_dir.transpose() * dz_d + self.w_yield.transpose() * dz_y);
        }
        let lg = self.lstm.backward(&cache, &dh);
        let mut flat = Vec::with_capacity(self.n_params());
        flat.extend_from_slice(lg.dw.as_slice());
        flat.extend_from_slice(lg.du.as_slice());
        flat.extend_from_slice(lg.db.as_slice());
        flat.extend_from_slice(dw_dir.as_slice());
        flat.extend_from_slice(db_dir.as_slice());
        flat.extend_from_slice(dw_yield.as_slice());
        flat.extend_from_slice(db_yield.as_slice());
        Ok((loss, flat))
    }
}

impl FlatParams for IntentionModel {
    fn n_params(&self) -> usize {
        self.lstm.n_params() + self.w_dir.len() + 3 + self.w_yield.len() + 2
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(self.lstm.w.as_slice());
        v.extend_from_slice(self.lstm.u.as_slice());
        v.extend_from_slice(self.lstm.b.as_slice());
        v.extend_from_slice(self.w_dir.as_slice());
        v.extend_from_slice(self.b_dir.as_slice());
        v.extend_from_slice(self.w_yield.as_slice());
        v.extend_from_slice(self.b_yield.as_slice());
        v
    }

    fn set_flat(&mut self, v: &[f64]) -> Result<(), PredictError> {
        if v.len() != self.n_params() {
            return Err(PredictError::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                v.len()
            )));
        }
        let mut at = 0;
        for dst in [
            self.lstm.w.as_mut_slice(),
            self.lstm.u.as_mut_slice(),
            self.lstm.b.as_mut_slice(),
            self.w_dir.as_mut_slice(),
            self.b_dir.as_mut_slice(),
            self.w_yield.as_mut_slice(),
            self.b_yield.as_mut_slice(),
        ] {
            dst.copy_from_slice(&v[at..at + dst.len()]);
            at += dst.len();
        }
        Ok(())
    }
}

impl SequenceModel for IntentionModel {
    type Sample = IntentionSample;

    fn sample_loss_grad(&self, sample: &IntentionSample) -> Result<(f64, Vec<f64>), PredictError> {
        self.loss_grad(sample)
    }
}

// ---------------------------------------------------------------------------
// Trajectory model
// ---------------------------------------------------------------------------

/// Input encoding of the trajectory regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryMode {
    /// Pair state only; output = absolute displacement from current position.
    Plain,
    /// Pair state + per-step intention one-hot.
    WithIntention,
    /// Pair state + intention one-hot + reference samples; output = residuals
    /// in the reference tangent/normal frame.
    Conditioned,
}

impl TrajectoryMode {
    pub fn input_size(self) -> usize {
        match self {
            TrajectoryMode::Plain => PAIR_FEATURES,
            TrajectoryMode::WithIntention => PAIR_FEATURES + INTENT_ONEHOT,
            TrajectoryMode::Conditioned => {
                PAIR_FEATURES + INTENT_ONEHOT + 2 * REF_FEATURE_POINTS
            }
        }
    }

    pub fn uses_intention(self) -> bool {
        !matches!(self, TrajectoryMode::Plain)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryMode::Plain => "plain",
            TrajectoryMode::WithIntention => "with_intention",
            TrajectoryMode::Conditioned => "conditioned",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "plain" => Some(TrajectoryMode::Plain),
            "with_intention" => Some(TrajectoryMode::WithIntention),
            "conditioned" => Some(TrajectoryMode::Conditioned),
            _ => None,
        }
    }
}

/// Future-horizon regressor over a fixed past window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryModel {
    pub mode: TrajectoryMode,
    /// Past window length in steps.
    pub window: usize,
    /// Future horizon in steps.
    pub horizon: usize,
    pub lstm: LstmLayer,
    /// Output head, `2*horizon × hidden`.
    pub w_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
}

impl TrajectoryModel {
    pub fn zeros(
        mode: TrajectoryMode,
        window: usize,
        horizon: usize,
        hidden: usize,
    ) -> Result<Self, PredictError> {
        if window == 0 || horizon == 0 {
            return Err(PredictError::InvalidArgument(
                "window and horizon must be positive".into(),
            ));
        }
        Ok(Self {
            mode,
            window,
            horizon,
            lstm: LstmLayer::zeros(mode.input_size(), hidden)?,
            w_out: DMatrix::zeros(2 * horizon, hidden),
            b_out: DVector::zeros(2 * horizon),
        })
    }

    pub fn new(
        mode: TrajectoryMode,
        window: usize,
        horizon: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self, PredictError> {
        let mut model = Self::zeros(mode, window, horizon, hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.lstm = LstmLayer::init_uniform(mode.input_size(), hidden, &mut rng)?;
        model.w_out = head_init(2 * horizon, hidden, &mut rng);
        Ok(model)
    }

    /// Head output (2·horizon) from the last hidden state of a window.
    pub fn forward_window(&self, features: &[DVector<f64>]) -> Result<DVector<f64>, PredictError> {
        if features.len() != self.window {
            return Err(PredictError::InvalidArgument(format!(
                "expected window of {} steps, got {}",
                self.window,
                features.len()
            )));
        }
        let cache = self.lstm.forward(features)?;
        let h = cache.hidden.last().unwrap();
        Ok(&self.w_out * h + &self.b_out)
    }

    /// Mean-squared error over the 2·horizon outputs and its flat gradient.
    pub fn loss_grad(&self, sample: &TrajectorySample) -> Result<(f64, Vec<f64>), PredictError> {
        if sample.target.len() != 2 * self.horizon {
            return Err(PredictError::InvalidArgument(format!(
                "target length {} != 2*horizon {}",
                sample.target.len(),
                2 * self.horizon
            )));
        }
        let cache = self.lstm.forward(&sample.features)?;
        if sample.features.len() != self.window {
            return Err(PredictError::InvalidArgument(
                "sample window length mismatch".into(),
            ));
        }
        let hlast = cache.hidden.last().unwrap();
        let out = &self.w_out * hlast + &self.b_out;
        let err = &out - &sample.target;
        let n = err.len() as f64;
        let loss = err.norm_squared() / n;
        let dout = err * (2.0 / n);
        let dw_out = &dout * hlast.transpose();
        let db_out = dout.clone();
        let mut dh = vec![DVector::zeros(self.lstm.hidden_size); sample.features.len()];
        *dh.last_mut().unwrap() = self.w_out.transpose() * dout;
        let lg = self.lstm.backward(&cache, &dh);
        let mut flat = Vec::with_capacity(self.n_params());
        flat.extend_from_slice(lg.dw.as_slice());
        flat.extend_from_slice(lg.du.as_slice());
        flat.extend_from_slice(lg.db.as_slice());
        flat.extend_from_slice(dw_out.as_slice());
        flat.extend_from_slice(db_out.as_slice());
        Ok((loss, flat))
    }
}

impl FlatParams for TrajectoryModel {
    fn n_params(&self) -> usize {
        self.lstm.n_params() + self.w_out.len() + self.b_out.len()
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(self.lstm.w.as_slice());
        v.extend_from_slice(self.lstm.u.as_slice());
        v.extend_from_slice(self.lstm.b.as_slice());
        v.extend_from_slice(self.w_out.as_slice());
        v.extend_from_slice(self.b_out.as_slice());
        v
    }

    fn set_flat(&mut self, v: &[f64]) -> Result<(), PredictError> {
        if v.len() != self.n_params() {
            return Err(PredictError::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                v.len()
            )));
        }
        let mut at = 0;
        for dst in [
            self.lstm.w.as_mut_slice(),
            self.lstm.u.as_mut_slice(),
            self.lstm.b.as_mut_slice(),
            self.w_out.as_mut_slice(),
            self.b_out.as_mut_slice(),
        ] {
            dst.copy_from_slice(&v[at..at + dst.len()]);
            at += dst.len();
        }
        Ok(())
    }
}

impl SequenceModel for TrajectoryModel {
    type Sample = TrajectorySample;

    fn sample_loss_grad(&self, sample: &TrajectorySample) -> Result<(f64, Vec<f64>), PredictError> {
        self.loss_grad(sample)
    }
}

// ---------------------------------------------------------------------------
// Trajectory feature windows, anchors, and residual encoding
// ---------------------------------------------------------------------------

/// Decode basis for one future step: `position = base + out₀·e1 + out₁·e2`
/// with `e1 ⊥ e2` both unit, so output-space MSE equals position MSE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub base: [f64; 2],
    pub e1: [f64; 2],
    pub e2: [f64; 2],
}

/// One supervised window plus the anchors that map outputs back to meters.
#[derive(Debug, Clone)]
pub struct TrajectorySample {
    pub features: Vec<DVector<f64>>,
    /// Encoded future, length 2·horizon.
    pub target: DVector<f64>,
    pub anchors: Vec<Anchor>,
}

fn intent_onehot(intent: (Direction, YieldOrder)) -> [f64; INTENT_ONEHOT] {
    let mut v = [0.0; INTENT_ONEHOT];
    v[intent.0.index()] = 1.0;
    v[3 + intent.1.index()] = 1.0;
    v
}

/// Feature vectors for the window ending at step `t` (steps
/// `t−window+1 ..= t`). `intents[s]` supplies the per-step intention context
/// for the non-plain modes; `refs` is required in conditioned mode.
pub fn trajectory_features(
    mode: TrajectoryMode,
    ep: &PairEpisode,
    t: usize,
    window: usize,
    intents: &[(Direction, YieldOrder)],
    refs: Option<&ApproachReferences>,
) -> Result<Vec<DVector<f64>>, PredictError> {
    if t + 1 < window || t >= ep.steps.len() {
        return Err(PredictError::InvalidArgument(format!(
            "window ending at {t} is incomplete"
        )));
    }
    if mode.uses_intention() && intents.len() <= t {
        return Err(PredictError::InvalidArgument(
            "per-step intents shorter than window end".into(),
        ));
    }
    let mut out = Vec::with_capacity(window);
    for s in t + 1 - window..=t {
        let state = ep.pair_state(s);
        let mut v: Vec<f64> = scaled_pair_features(&ep.steps[s]).to_vec();
        if mode.uses_intention() {
            v.extend_from_slice(&intent_onehot(intents[s]));
        }
        if mode == TrajectoryMode::Conditioned {
            let refs = refs.ok_or_else(|| {
                PredictError::InvalidArgument("conditioned mode needs reference trajectories".into())
            })?;
            let r = refs.get(intents[s].0);
            let pos = [state.target.x, state.target.y];
            let (arc, _) = r.project(pos);
            for j in 1..=REF_FEATURE_POINTS {
                let p = r.pose_at(arc + j as f64 * REF_FEATURE_SPACING_M).0;
                v.push((p[0] - pos[0]) / POS_SCALE);
                v.push((p[1] - pos[1]) / POS_SCALE);
            }
        }
        out.push(DVector::from_vec(v));
    }
    Ok(out)
}

/// Decode anchors for the horizon after step `t`.
///
/// Plain / with-intention: every anchor is the current target position with
/// the world axes. Conditioned: anchors advance along the intended reference
/// with a constant-acceleration extrapolation of the target's speed
/// (estimated over the last few steps, clamped at standstill), using the
/// reference tangent/right-normal as the basis; zero outputs therefore
/// reproduce reference-following at the extrapolated speed profile. At
/// constant speed this reduces to the reference samples at `v·iΔt`.
pub fn trajectory_anchors(
    mode: TrajectoryMode,
    ep: &PairEpisode,
    t: usize,
    horizon: usize,
    intent_dir: Direction,
    refs: Option<&ApproachReferences>,
) -> Result<Vec<Anchor>, PredictError> {
    let state = ep.pair_state(t);
    let pos = [state.target.x, state.target.y];
    match mode {
        TrajectoryMode::Plain | TrajectoryMode::WithIntention => Ok(vec![
            Anchor {
                base: pos,
                e1: [1.0, 0.0],
                e2: [0.0, 1.0],
            };
            horizon
        ]),
        TrajectoryMode::Conditioned => {
            let refs = refs.ok_or_else(|| {
                PredictError::InvalidArgument("conditioned mode needs reference trajectories".into())
            })?;
            let r = refs.get(intent_dir);
            let (arc, _) = r.project(pos);
            let speed = state.target.speed();
            // Finite-difference acceleration over the recent past keeps
            // anchors from overshooting into the turn while the target is
            // still braking for it.
            let lag = t.min(3);
            let accel = if lag > 0 {
                let prev = ep.pair_state(t - lag).target.speed();
                ((speed - prev) / (lag as f64 * ep.dt_s)).clamp(-4.0, 3.0)
            } else {
                0.0
            };
            Ok((1..=horizon)
                .map(|i| {
                    let tau = i as f64 * ep.dt_s;
                    let tc = if accel < 0.0 {
                        tau.min(speed / -accel)
                    } else {
                        tau
                    };
                    let s = speed * tc + 0.5 * accel * tc * tc;
                    let (base, tan) = r.pose_at(arc + s);
                    Anchor {
                        base,
                        e1: tan,
                        e2: [tan[1], -tan[0]],
                    }
                })
                .collect())
        }
    }
}

/// Encodes true future positions into the anchor bases (training target).
pub fn encode_target(anchors: &[Anchor], future: &[[f64; 2]]) -> DVector<f64> {
    assert_eq!(anchors.len(), future.len());
    let mut v = DVector::zeros(2 * anchors.len());
    for (i, (a, f)) in anchors.iter().zip(future).enumerate() {
        let d = [f[0] - a.base[0], f[1] - a.base[1]];
        v[2 * i] = d[0] * a.e1[0] + d[1] * a.e1[1];
        v[2 * i + 1] = d[0] * a.e2[0] + d[1] * a.e2[1];
    }
    v
}

/// Decodes head outputs into world positions.
pub fn decode_prediction(anchors: &[Anchor], out: &DVector<f64>) -> Vec<[f64; 2]> {
    assert_eq!(out.len(), 2 * anchors.len());
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            [
                a.base[0] + out[2 * i] * a.e1[0] + out[2 * i + 1] * a.e2[0],
                a.base[1] + out[2 * i] * a.e1[1] + out[2 * i + 1] * a.e2[1],
            ]
        })
        .collect()
}

/// Builds the supervised sample for the window ending at step `t`, using the
/// ground-truth labels as intention context (teacher forcing).
pub fn trajectory_sample(
    mode: TrajectoryMode,
    ep: &PairEpisode,
    t: usize,
    window: usize,
    horizon: usize,
    refs: Option<&ApproachReferences>,
) -> Result<TrajectorySample, PredictError> {
    if t + horizon >= ep.future_target_xy.len() {
        return Err(PredictError::InvalidArgument(format!(
            "future horizon after step {t} exceeds episode"
        )));
    }
    let intents = vec![(ep.direction_label, ep.yield_label); ep.steps.len()];
    let features = trajectory_features(mode, ep, t, window, &intents, refs)?;
    let anchors = trajectory_anchors(mode, ep, t, horizon, ep.direction_label, refs)?;
    let future: Vec<[f64; 2]> = ep.future_target_xy[t + 1..=t + horizon].to_vec();
    let target = encode_target(&anchors, &future);
    Ok(TrajectorySample {
        features,
        target,
        anchors,
    })
}

/// All complete windows of an episode at the given stride.
pub fn trajectory_samples(
    mode: TrajectoryMode,
    ep: &PairEpisode,
    window: usize,
    horizon: usize,
    stride: usize,
    refs: Option<&ApproachReferences>,
) -> Result<Vec<TrajectorySample>, PredictError> {
    let mut out = Vec::new();
    let mut t = window - 1;
    while t < ep.steps.len() && t + horizon < ep.future_target_xy.len() {
        out.push(trajectory_sample(mode, ep, t, window, horizon, refs)?);
        t += stride.max(1);
    }
    Ok(out)
}
