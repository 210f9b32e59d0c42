//! Deterministic synthetic intersection worlds: vehicle pairs with known
//! intentions and yield order, ground-truth kinematics at 10 Hz, and labeled
//! pair datasets. Rendering lives in [`render`].
//!
//! Every pair runs in its own time block on a four-arm intersection. One
//! vehicle is scheduled to reach the shared conflict point first and the
//! other is made to yield: it holds short of the conflict until the leader's
//! passage plus a 2 s gap (the enforced invariant is ≥ 1.5 s). Yield labels
//! are recomputed from the simulated passage times, never assumed.

pub mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::predict::reference::{
    reference_trajectory, IntersectionGeometry, ReferenceTrajectory,
};
use crate::predict::{
    normalize_heading, AgentState, Direction, PairEpisode, PairState, PredictError, YieldOrder,
};

#[derive(Debug, Error)]
pub enum ScenegenError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("simulation failed: {0}")]
    Simulation(String),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Ground-truth sample cadence.
pub const WORLD_DT_S: f64 = 0.1;
/// Minimum enforced gap between conflict-point passages within a pair.
pub const CONFLICT_GAP_MIN_S: f64 = 1.5;
/// Gap the scheduler actually aims for.
const CONFLICT_GAP_TARGET_S: f64 = 2.0;
/// The yielder holds this far before its conflict point.
const STOP_SETBACK_M: f64 = 6.0;
/// Local simulation length per pair.
const PAIR_SIM_STEPS: usize = 400;
/// Time-block spacing between consecutive pairs.
pub const PAIR_BLOCK_STEPS: usize = 450;
/// Extra future samples kept past each episode's last step.
const FUTURE_MARGIN_STEPS: usize = 35;

const A_ACC: f64 = 2.5;
const A_DEC: f64 = 2.6;
/// Deceleration used inside braking curves (below the cap so the
/// discrete-time controller can track them).
const BRAKE_CURVE_A: f64 = 2.2;
/// Comfort lateral acceleration setting turn speeds.
const LAT_A_MAX: f64 = 2.0;
/// The turn speed cap engages this far before the arc so braking has
/// finished before the centripetal load starts.
const TURN_LEAD_M: f64 = 3.0;
/// Stationary standard deviation of the lateral path noise.
const LATERAL_NOISE_SIGMA_M: f64 = 0.15;
const NOISE_ALPHA: f64 = 0.96;

/// One 10 Hz ground-truth sample of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehState {
    /// World position, meters (includes lateral noise).
    pub pos: [f64; 2],
    /// Velocity from central differences of `pos`.
    pub vel: [f64; 2],
    /// Body heading, radians in (−π, π]; frozen below walking speed.
    pub heading: f64,
    /// Planned arc length along the vehicle's reference path.
    pub arc: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleSpec {
    pub vehicle_id: u64,
    pub approach_arm: usize,
    pub direction: Direction,
    pub cruise_speed: f64,
    pub length_m: f64,
    pub width_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleTrack {
    pub spec: VehicleSpec,
    /// Global step index of `states[0]`.
    pub t0_step: usize,
    pub states: Vec<VehState>,
}

impl VehicleTrack {
    /// State at a global step, if active.
    pub fn state_at(&self, step: usize) -> Option<&VehState> {
        step.checked_sub(self.t0_step).and_then(|i| self.states.get(i))
    }

    pub fn last_step(&self) -> usize {
        self.t0_step + self.states.len() - 1
    }
}

/// An interacting two-vehicle scenario with its labels and conflict data.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSpec {
    pub pair_id: u64,
    pub ego_id: u64,
    pub target_id: u64,
    /// Direction intention of the target vehicle (the episode label).
    pub direction_label: Direction,
    pub yield_label: YieldOrder,
    pub conflict_point: [f64; 2],
    /// Arc length of the conflict point on each vehicle's reference path.
    pub ego_conflict_arc: f64,
    pub target_conflict_arc: f64,
    /// Simulated conflict passage times, seconds from world start.
    pub ego_pass_time_s: f64,
    pub target_pass_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub seed: u64,
    pub geom: IntersectionGeometry,
    pub dt_s: f64,
    pub vehicles: Vec<VehicleTrack>,
    pub pairs: Vec<PairSpec>,
    /// Total world duration in steps.
    pub n_steps: usize,
}

impl World {
    pub fn vehicle(&self, id: u64) -> &VehicleTrack {
        self.vehicles
            .iter()
            .find(|v| v.spec.vehicle_id == id)
            .expect("vehicle id")
    }
}

// ---------------------------------------------------------------------------
// Speed-plan simulation along a reference path
// ---------------------------------------------------------------------------

struct Hold {
    /// The vehicle may not pass `conflict_arc` before this local time.
    allowed_pass_s: f64,
    conflict_arc: f64,
}

/// Double low-pass Gaussian chain with stationary standard deviation `sigma`.
struct SmoothNoise {
    e1: f64,
    e2: f64,
    sigma_u: f64,
    rng: ChaCha8Rng,
}

impl SmoothNoise {
    fn new(sigma: f64, seed: u64) -> Self {
        // Var(e2) = (1−α)⁴ (1+α²) / (1−α²)³ · Var(u); solve for σ_u.
        let a = NOISE_ALPHA;
        let factor = ((1.0 - a).powi(4) * (1.0 + a * a) / (1.0 - a * a).powi(3)).sqrt();
        Self {
            e1: 0.0,
            e2: 0.0,
            sigma_u: sigma / factor,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn gauss(&mut self) -> f64 {
        // Box-Muller.
        let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn next(&mut self) -> f64 {
        // Truncated at 3σ so worst-case acceleration stays bounded.
        let u = (self.gauss() * self.sigma_u).clamp(-3.0 * self.sigma_u, 3.0 * self.sigma_u);
        self.e1 = NOISE_ALPHA * self.e1 + (1.0 - NOISE_ALPHA) * u;
        self.e2 = NOISE_ALPHA * self.e2 + (1.0 - NOISE_ALPHA) * self.e1;
        self.e2
    }
}

/// Turn window (arc range and speed cap) of a turning reference path.
fn turn_window(r: &ReferenceTrajectory) -> Option<(f64, f64, f64)> {
    let arc = r.arc?;
    let j0 = *r.junction_indices.first()?;
    let j1 = *r.junction_indices.last()?;
    let v_turn = (LAT_A_MAX * arc.radius).sqrt();
    Some((r.arc_at_index(j0) - TURN_LEAD_M, r.arc_at_index(j1), v_turn))
}

/// Exact pose at arc length `s` on the analytic straight-arc-straight path
/// underlying a reference trajectory. The sampled polyline is adequate for
/// projection but its facets would put spurious direction jumps (and hence
/// acceleration spikes) into simulated kinematics.
fn analytic_pose(r: &ReferenceTrajectory, s: f64) -> ([f64; 2], [f64; 2]) {
    let p0 = r.points[0];
    let t0 = r.tangents[0];
    let Some(arc) = &r.arc else {
        return ([p0[0] + s * t0[0], p0[1] + s * t0[1]], t0);
    };
    let s0 = ((arc.entry[0] - p0[0]).powi(2) + (arc.entry[1] - p0[1]).powi(2)).sqrt();
    let s1 = s0 + arc.radius * std::f64::consts::FRAC_PI_2;
    if s < s0 {
        return ([p0[0] + s * t0[0], p0[1] + s * t0[1]], t0);
    }
    if s <= s1 {
        let sign = if r.direction == Direction::TL { 1.0 } else { -1.0 };
        let phi0 = (arc.entry[1] - arc.center[1]).atan2(arc.entry[0] - arc.center[0]);
        let phi = phi0 + sign * (s - s0) / arc.radius;
        let p = [
            arc.center[0] + arc.radius * phi.cos(),
            arc.center[1] + arc.radius * phi.sin(),
        ];
        let tan = [-sign * phi.sin(), sign * phi.cos()];
        return (p, tan);
    }
    let tx = [arc.exit_heading.cos(), arc.exit_heading.sin()];
    (
        [
            arc.exit[0] + (s - s1) * tx[0],
            arc.exit[1] + (s - s1) * tx[1],
        ],
        tx,
    )
}

/// Shortest possible time to cover distance `d` starting at speed `v`,
/// accelerating at `A_ACC` up to `v_cap`.
fn min_time_to_pass(d: f64, v: f64, v_cap: f64) -> f64 {
    if d <= 0.0 {
        return 0.0;
    }
    if v >= v_cap {
        return d / v_cap;
    }
    let d_accel = (v_cap * v_cap - v * v) / (2.0 * A_ACC);
    if d <= d_accel {
        ((v * v + 2.0 * A_ACC * d).sqrt() - v) / A_ACC
    } else {
        (v_cap - v) / A_ACC + (d - d_accel) / v_cap
    }
}

/// Target-speed limit at arc `s`, speed `v`, local time `t`.
///
/// The hold is self-scheduling: it brakes toward a stop line short of the
/// conflict for as long as even a maximum-effort run from the current state
/// would still pass the conflict before the allowed time.
fn speed_limit(
    cruise: f64,
    turn: Option<(f64, f64, f64)>,
    hold: Option<&Hold>,
    s: f64,
    v: f64,
    t: f64,
) -> f64 {
    let mut lim = cruise;
    if let Some((s0, s1, vt)) = turn {
        if s < s1 {
            let cap = if s >= s0 {
                vt
            } else {
                (vt * vt + 2.0 * BRAKE_CURVE_A * (s0 - s)).sqrt()
            };
            lim = lim.min(cap);
        }
    }
    if let Some(h) = hold {
        let d = h.conflict_arc - s;
        if d > 0.0 && t + min_time_to_pass(d, v, 20.0) < h.allowed_pass_s {
            let s_stop = h.conflict_arc - STOP_SETBACK_M;
            let cap = if s >= s_stop {
                0.0
            } else {
                (2.0 * BRAKE_CURVE_A * (s_stop - s)).sqrt()
            };
            lim = lim.min(cap);
        }
    }
    lim
}

/// Simulates one vehicle along its reference path.
///
/// `noise_seed` feeds the lateral and speed noise chains; pass the same seed
/// to reproduce a run exactly.
fn simulate_vehicle(
    r: &ReferenceTrajectory,
    cruise: f64,
    hold: Option<Hold>,
    n_steps: usize,
    noise_seed: u64,
) -> Vec<VehState> {
    let turn = turn_window(r);
    let mut lat_noise = SmoothNoise::new(LATERAL_NOISE_SIGMA_M, noise_seed);
    let mut speed_noise = SmoothNoise::new(0.02, noise_seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut s = 0.0;
    let mut v: f64 = speed_limit(cruise, turn, hold.as_ref(), 0.0, cruise, 0.0).min(cruise);
    let mut centers = Vec::with_capacity(n_steps);
    let mut arcs = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let t = k as f64 * WORLD_DT_S;
        let cruise_k = cruise * (1.0 + speed_noise.next());
        let lim = speed_limit(cruise_k, turn, hold.as_ref(), s, v, t);
        let dv = (lim - v).clamp(-A_DEC * WORLD_DT_S, A_ACC * WORLD_DT_S);
        v = (v + dv).max(0.0);
        let (p, tan) = analytic_pose(r, s);
        let right = [tan[1], -tan[0]];
        let lat = lat_noise.next();
        centers.push([p[0] + lat * right[0], p[1] + lat * right[1]]);
        arcs.push(s);
        s += v * WORLD_DT_S;
    }
    // Velocities from central differences of the noisy positions; body
    // heading follows the velocity while moving and freezes when stopped.
    let mut states = Vec::with_capacity(n_steps);
    let mut heading = {
        let t0 = r.tangents[0];
        normalize_heading(t0[1].atan2(t0[0]))
    };
    for k in 0..n_steps {
        let (prev, next, denom) = if k == 0 {
            (0, 1.min(n_steps - 1), WORLD_DT_S)
        } else if k == n_steps - 1 {
            (k - 1, k, WORLD_DT_S)
        } else {
            (k - 1, k + 1, 2.0 * WORLD_DT_S)
        };
        let vel = [
            (centers[next][0] - centers[prev][0]) / denom,
            (centers[next][1] - centers[prev][1]) / denom,
        ];
        let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
        if speed >= 0.5 {
            heading = normalize_heading(vel[1].atan2(vel[0]));
        }
        states.push(VehState {
            pos: centers[k],
            vel,
            heading,
            arc: arcs[k],
            speed,
        });
    }
    states
}

/// Local time at which the states first reach `arc` (linear interpolation),
/// or `None` if they never do.
fn passage_time(states: &[VehState], arc: f64) -> Option<f64> {
    for k in 0..states.len() {
        if states[k].arc >= arc {
            if k == 0 {
                return Some(0.0);
            }
            let (a0, a1) = (states[k - 1].arc, states[k].arc);
            let frac = if a1 > a0 { (arc - a0) / (a1 - a0) } else { 0.0 };
            return Some(((k - 1) as f64 + frac) * WORLD_DT_S);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Conflict geometry
// ---------------------------------------------------------------------------

/// First point (in `a`'s travel order) where the two reference polylines
/// meet, with the arc length of that point on each. Handles both transversal
/// crossings and collinear merges.
pub fn path_conflict(
    a: &ReferenceTrajectory,
    b: &ReferenceTrajectory,
) -> Option<([f64; 2], f64, f64)> {
    let cum = |pts: &[[f64; 2]]| -> Vec<f64> {
        let mut c = vec![0.0];
        for w in pts.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            c.push(c.last().unwrap() + d);
        }
        c
    };
    let ca = cum(&a.points);
    let cb = cum(&b.points);
    for i in 0..a.points.len() - 1 {
        let mut best: Option<(f64, f64, usize)> = None; // (t_a, t_b, j)
        for j in 0..b.points.len() - 1 {
            if let Some((ta, tb)) = seg_intersect(
                a.points[i],
                a.points[i + 1],
                b.points[j],
                b.points[j + 1],
            ) {
                if best.map_or(true, |(bt, _, _)| ta < bt) {
                    best = Some((ta, tb, j));
                }
            }
        }
        if let Some((ta, tb, j)) = best {
            let p = [
                a.points[i][0] + ta * (a.points[i + 1][0] - a.points[i][0]),
                a.points[i][1] + ta * (a.points[i + 1][1] - a.points[i][1]),
            ];
            let arc_a = ca[i] + ta * (ca[i + 1] - ca[i]);
            let arc_b = cb[j] + tb * (cb[j + 1] - cb[j]);
            return Some((p, arc_a, arc_b));
        }
    }
    None
}

/// Segment intersection parameters, including the earliest overlap point of
/// collinear segments.
fn seg_intersect(a1: [f64; 2], a2: [f64; 2], b1: [f64; 2], b2: [f64; 2]) -> Option<(f64, f64)> {
    let da = [a2[0] - a1[0], a2[1] - a1[1]];
    let db = [b2[0] - b1[0], b2[1] - b1[1]];
    let denom = da[0] * db[1] - da[1] * db[0];
    let r = [b1[0] - a1[0], b1[1] - a1[1]];
    if denom.abs() > 1e-12 {
        let ta = (r[0] * db[1] - r[1] * db[0]) / denom;
        let tb = (r[0] * da[1] - r[1] * da[0]) / denom;
        let eps = 1e-9;
        if (-eps..=1.0 + eps).contains(&ta) && (-eps..=1.0 + eps).contains(&tb) {
            return Some((ta.clamp(0.0, 1.0), tb.clamp(0.0, 1.0)));
        }
        return None;
    }
    // Parallel: collinear only if b1 lies on the a-line.
    let cross = r[0] * da[1] - r[1] * da[0];
    let la2 = da[0] * da[0] + da[1] * da[1];
    if cross.abs() > 1e-9 * la2.sqrt().max(1.0) || la2 == 0.0 {
        return None;
    }
    let proj = |p: [f64; 2]| ((p[0] - a1[0]) * da[0] + (p[1] - a1[1]) * da[1]) / la2;
    let (tb1, tb2) = (proj(b1), proj(b2));
    let (lo, hi) = (tb1.min(tb2), tb1.max(tb2));
    let start = lo.max(0.0);
    if start > hi.min(1.0) + 1e-12 {
        return None;
    }
    let ta = start.clamp(0.0, 1.0);
    // Recover b's parameter for the shared point.
    let p = [a1[0] + ta * da[0], a1[1] + ta * da[1]];
    let lb2 = db[0] * db[0] + db[1] * db[1];
    let tb = (((p[0] - b1[0]) * db[0] + (p[1] - b1[1]) * db[1]) / lb2).clamp(0.0, 1.0);
    Some((ta, tb))
}

// ---------------------------------------------------------------------------
// World generation
// ---------------------------------------------------------------------------

/// (ego direction, ego local arm, target direction, target local arm) before
/// rotation by the pair's base arm. Local arm 3 approaches from −y, 1 from +y.
fn pair_arrangement(i: usize) -> (Direction, usize, Direction, usize) {
    match i % 3 {
        // Target goes straight from the north; ego turns left across it.
        0 => (Direction::TL, 3, Direction::GS, 1),
        // Target turns left; ego alternates between oncoming-straight and
        // right-turn-merge partners.
        1 => {
            if (i / 3) % 2 == 0 {
                (Direction::GS, 1, Direction::TL, 3)
            } else {
                (Direction::TR, 1, Direction::TL, 3)
            }
        }
        // Target turns right from the north; ego's left turn merges with it.
        _ => (Direction::TL, 3, Direction::TR, 1),
    }
}

/// Generates `n_pairs` interacting vehicle pairs, each in its own time block.
pub fn gen_world(seed: u64, n_pairs: usize) -> Result<World, ScenegenError> {
    if n_pairs == 0 {
        return Err(ScenegenError::InvalidArgument("n_pairs must be ≥ 1".into()));
    }
    let geom = IntersectionGeometry::default();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut vehicles = Vec::with_capacity(2 * n_pairs);
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut next_vehicle_id = 1u64;

    for pair_idx in 0..n_pairs {
        let pair_seed: u64 = master.gen();
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
        let block_start = pair_idx * PAIR_BLOCK_STEPS;
        let (ego_dir, ego_local_arm, target_dir, target_local_arm) = pair_arrangement(pair_idx);
        let base_arm: usize = rng.gen_range(0..4);
        let ego_arm = (ego_local_arm + base_arm) % 4;
        let target_arm = (target_local_arm + base_arm) % 4;
        let ego_ref = reference_trajectory(&geom, ego_arm, ego_dir)?;
        let target_ref = reference_trajectory(&geom, target_arm, target_dir)?;
        let (conflict_point, ego_conflict_arc, target_conflict_arc) =
            path_conflict(&ego_ref, &target_ref).ok_or_else(|| {
                ScenegenError::Simulation(format!(
                    "paths of pair {pair_idx} never meet (arrangement bug)"
                ))
            })?;

        let ego_cruise = rng.gen_range(8.0..14.0);
        let target_cruise = rng.gen_range(8.0..14.0);
        let ego_dims = (rng.gen_range(4.0..5.2), rng.gen_range(1.7..2.0));
        let target_dims = (rng.gen_range(4.0..5.2), rng.gen_range(1.7..2.0));
        let ego_noise_seed: u64 = rng.gen();
        let target_noise_seed: u64 = rng.gen();
        let ego_yields: bool = rng.gen();
        let delta: f64 = rng.gen_range(-1.0..1.0);

        // Dry runs establish each vehicle's natural time to the conflict.
        let dry_ego = simulate_vehicle(&ego_ref, ego_cruise, None, PAIR_SIM_STEPS, ego_noise_seed);
        let dry_target = simulate_vehicle(
            &target_ref,
            target_cruise,
            None,
            PAIR_SIM_STEPS,
            target_noise_seed,
        );
        let tau_ego = passage_time(&dry_ego, ego_conflict_arc)
            .ok_or_else(|| ScenegenError::Simulation("ego never reaches conflict".into()))?;
        let tau_target = passage_time(&dry_target, target_conflict_arc)
            .ok_or_else(|| ScenegenError::Simulation("target never reaches conflict".into()))?;

        // Offset the yielder so its unconstrained passage would trail the
        // leader's by `delta` (±1 s) — close enough that the hold must act.
        let (tau_leader, tau_yielder) = if ego_yields {
            (tau_target, tau_ego)
        } else {
            (tau_ego, tau_target)
        };
        let raw_offset = tau_leader - tau_yielder + delta;
        let (leader_offset_s, yielder_offset_s) = if raw_offset >= 0.0 {
            (0.0, raw_offset)
        } else {
            (-raw_offset, 0.0)
        };
        let to_steps = |t: f64| (t / WORLD_DT_S).round() as usize;
        let (ego_offset, target_offset) = if ego_yields {
            (to_steps(yielder_offset_s), to_steps(leader_offset_s))
        } else {
            (to_steps(leader_offset_s), to_steps(yielder_offset_s))
        };

        // Leader runs free; the yielder may not pass the conflict before the
        // leader's passage plus the target gap.
        let (leader_states, leader_offset, leader_arc) = if ego_yields {
            (dry_target, target_offset, target_conflict_arc)
        } else {
            (dry_ego, ego_offset, ego_conflict_arc)
        };
        let leader_pass_local = passage_time(&leader_states, leader_arc).unwrap();
        let leader_pass_global = leader_offset as f64 * WORLD_DT_S + leader_pass_local;

        let (yielder_ref, yielder_cruise, yielder_seed, yielder_offset, yielder_arc) = if ego_yields
        {
            (&ego_ref, ego_cruise, ego_noise_seed, ego_offset, ego_conflict_arc)
        } else {
            (
                &target_ref,
                target_cruise,
                target_noise_seed,
                target_offset,
                target_conflict_arc,
            )
        };
        let allowed_pass_local =
            leader_pass_global + CONFLICT_GAP_TARGET_S - yielder_offset as f64 * WORLD_DT_S;
        let yielder_states = simulate_vehicle(
            yielder_ref,
            yielder_cruise,
            Some(Hold {
                allowed_pass_s: allowed_pass_local,
                conflict_arc: yielder_arc,
            }),
            PAIR_SIM_STEPS,
            yielder_seed,
        );

        let (ego_states, target_states) = if ego_yields {
            (yielder_states, leader_states)
        } else {
            (leader_states, yielder_states)
        };

        let ego_pass_time_s = (block_start + ego_offset) as f64 * WORLD_DT_S
            + passage_time(&ego_states, ego_conflict_arc)
                .ok_or_else(|| ScenegenError::Simulation("held ego never released".into()))?;
        let target_pass_time_s = (block_start + target_offset) as f64 * WORLD_DT_S
            + passage_time(&target_states, target_conflict_arc)
                .ok_or_else(|| ScenegenError::Simulation("held target never released".into()))?;

        let ego_id = next_vehicle_id;
        let target_id = next_vehicle_id + 1;
        next_vehicle_id += 2;
        vehicles.push(VehicleTrack {
            spec: VehicleSpec {
                vehicle_id: ego_id,
                approach_arm: ego_arm,
                direction: ego_dir,
                cruise_speed: ego_cruise,
                length_m: ego_dims.0,
                width_m: ego_dims.1,
            },
            t0_step: block_start + ego_offset,
            states: ego_states,
        });
        vehicles.push(VehicleTrack {
            spec: VehicleSpec {
                vehicle_id: target_id,
                approach_arm: target_arm,
                direction: target_dir,
                cruise_speed: target_cruise,
                length_m: target_dims.0,
                width_m: target_dims.1,
            },
            t0_step: block_start + target_offset,
            states: target_states,
        });
        pairs.push(PairSpec {
            pair_id: pair_idx as u64,
            ego_id,
            target_id,
            direction_label: target_dir,
            yield_label: if ego_pass_time_s < target_pass_time_s {
                YieldOrder::EgoFirst
            } else {
                YieldOrder::TargetFirst
            },
            conflict_point,
            ego_conflict_arc,
            target_conflict_arc,
            ego_pass_time_s,
            target_pass_time_s,
        });
    }

    Ok(World {
        seed,
        geom,
        dt_s: WORLD_DT_S,
        vehicles,
        pairs,
        n_steps: n_pairs * PAIR_BLOCK_STEPS,
    })
}

// ---------------------------------------------------------------------------
// Pair dataset extraction
// ---------------------------------------------------------------------------

fn agent_state(s: &VehState) -> AgentState {
    AgentState {
        x: s.pos[0],
        y: s.pos[1],
        vx: s.vel[0],
        vy: s.vel[1],
        heading: s.heading,
        dist_center: (s.pos[0] * s.pos[0] + s.pos[1] * s.pos[1]).sqrt(),
    }
}

/// Builds the labeled episode of one pair from the ground-truth kinematics.
pub fn pair_episode(world: &World, pair: &PairSpec) -> Result<PairEpisode, ScenegenError> {
    let ego = world.vehicle(pair.ego_id);
    let target = world.vehicle(pair.target_id);
    let first = ego.t0_step.max(target.t0_step);
    let last = ego.last_step().min(target.last_step());
    if last < first + FUTURE_MARGIN_STEPS + 1 {
        return Err(ScenegenError::Simulation(format!(
            "pair {} has too little overlap for an episode",
            pair.pair_id
        )));
    }
    let step_last = last - FUTURE_MARGIN_STEPS;
    let mut steps = Vec::with_capacity(step_last - first + 1);
    let mut future = Vec::with_capacity(last - first + 1);
    for g in first..=last {
        let ts = target.state_at(g).unwrap();
        if g <= step_last {
            let es = ego.state_at(g).unwrap();
            steps.push(
                PairState {
                    ego: agent_state(es),
                    target: agent_state(ts),
                }
                .to_flat(),
            );
        }
        future.push(ts.pos);
    }
    let ep = PairEpisode {
        pair_id: pair.pair_id,
        dt_s: world.dt_s,
        steps,
        direction_label: pair.direction_label,
        yield_label: pair.yield_label,
        future_target_xy: future,
    };
    ep.validate()?;
    Ok(ep)
}

/// Splits the world's pairs into train/validation/test episode sets.
///
/// Ratios must sum to 1; the split is pair-disjoint and seeded by the world
/// seed. A positive ratio that rounds to an empty split is an error.
pub fn gen_pairs_dataset(
    world: &World,
    ratios: [f64; 3],
) -> Result<[Vec<PairEpisode>; 3], ScenegenError> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(ScenegenError::InvalidArgument(
            "ratios must lie in [0, 1]".into(),
        ));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(ScenegenError::InvalidArgument(format!(
            "ratios sum to {total}, expected 1"
        )));
    }
    let n = world.pairs.len();
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_val = (ratios[1] * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let n_test = n - n_train - n_val;
    for (count, ratio, name) in [
        (n_train, ratios[0], "train"),
        (n_val, ratios[1], "validation"),
        (n_test, ratios[2], "test"),
    ] {
        if ratio > 0.0 && count == 0 {
            return Err(ScenegenError::InvalidArgument(format!(
                "too few pairs: {name} split would be empty"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed ^ 0x5370_6c69_7453_6565); // "SplitSee"
    order.shuffle(&mut rng);
    let mut sets: [Vec<PairEpisode>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (rank, &idx) in order.iter().enumerate() {
        let bucket = if rank < n_train {
            0
        } else if rank < n_train + n_val {
            1
        } else {
            2
        };
        sets[bucket].push(pair_episode(world, &world.pairs[idx])?);
    }
    for s in sets.iter_mut() {
        s.sort_by_key(|e| e.pair_id);
    }
    Ok(sets)
}
