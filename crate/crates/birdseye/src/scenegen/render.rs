//! Rasterizes worlds into jittered grayscale frames with exact ground truth.
//!
//! Geometry is drawn directly under each frame's jitter homography (no
//! resampling step), so the emitted correction homographies are exact by
//! construction: warping frame `k` by its correction reproduces the frame-0
//! view of the static scene up to rasterization error. Detections are the
//! true vehicle centers projected into jittered pixel coordinates.

use std::io::{BufRead, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ScenegenError, VehicleTrack, World};
use crate::imaging::{write_pgm, Homography, ImageBuffer};
use crate::predict::normalize_heading;
use crate::roadmap::RoadGeometryFile;

/// Surface intensities of the synthetic scene, unit range.
const BACKGROUND_VALUE: f64 = 0.1;
const ROAD_VALUE: f64 = 0.35;
const LINE_VALUE: f64 = 0.9;
const VEHICLE_VALUE: f64 = 0.7;
const LANDMARK_VALUE: f64 = 0.9;

/// Lane markings: edge strips and a dashed centerline.
const EDGE_LINE_W_M: f64 = 0.3;
const CENTER_LINE_HALF_W_M: f64 = 0.15;
const DASH_PERIOD_M: f64 = 4.0;
const DASH_LEN_M: f64 = 2.0;

/// Off-road landmark squares on a regular grid give the stabilizer corners
/// to lock onto and the tests exact world positions to reproject. Sizes
/// alternate by grid parity so structure survives block-mean down-sampling.
const LANDMARK_PITCH_M: f64 = 20.0;
const LANDMARK_HALF_SMALL_M: f64 = 0.8;
const LANDMARK_HALF_LARGE_M: f64 = 1.6;
const LANDMARK_ROAD_CLEARANCE_M: f64 = 2.8;

/// Smoothed camera-shake model in pixel space. Each frame draws a uniform
/// proposal inside the bounds and low-passes it, so the realized parameters
/// stay inside the bounds for every frame by convexity.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterModel {
    pub max_translation_px: f64,
    pub max_rotation_rad: f64,
    pub max_perspective: f64,
    /// Low-pass coefficient on the previous state (0 = white noise).
    pub smoothing: f64,
}

impl Default for JitterModel {
    fn default() -> Self {
        Self {
            max_translation_px: 10.0,
            max_rotation_rad: 1.0_f64.to_radians(),
            max_perspective: 1e-4,
            smoothing: 0.8,
        }
    }
}

impl JitterModel {
    /// A rigid camera: every frame renders in the reference pose.
    pub fn none() -> Self {
        Self {
            max_translation_px: 0.0,
            max_rotation_rad: 0.0,
            max_perspective: 0.0,
            smoothing: 0.8,
        }
    }

    fn bounds(&self) -> [f64; 5] {
        [
            self.max_translation_px,
            self.max_translation_px,
            self.max_rotation_rad,
            self.max_perspective,
            self.max_perspective,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub meters_per_pixel: f64,
    pub frame_rate_hz: f64,
    pub n_frames: usize,
    /// World time of frame 0, seconds.
    pub t_start_s: f64,
    /// Standard deviation of detection-center noise, meters (0 = exact).
    pub detection_noise_sigma_m: f64,
    /// Sub-pixel samples per axis for antialiasing.
    pub supersample: usize,
    /// Seeds the jitter and detection-noise streams.
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            meters_per_pixel: 0.35,
            frame_rate_hz: 30.0,
            n_frames: 30,
            t_start_s: 0.0,
            detection_noise_sigma_m: 0.0,
            supersample: 1,
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), ScenegenError> {
        if self.width < 256 || self.height < 256 {
            return Err(ScenegenError::InvalidArgument(format!(
                "canvas must be at least 256x256 (got {}x{})",
                self.width, self.height
            )));
        }
        if !(self.meters_per_pixel.is_finite() && self.meters_per_pixel > 0.0) {
            return Err(ScenegenError::InvalidArgument(
                "meters_per_pixel must be positive".into(),
            ));
        }
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return Err(ScenegenError::InvalidArgument(
                "frame_rate_hz must be positive".into(),
            ));
        }
        if self.n_frames == 0 {
            return Err(ScenegenError::InvalidArgument("n_frames must be ≥ 1".into()));
        }
        if !(1..=4).contains(&self.supersample) {
            return Err(ScenegenError::InvalidArgument(
                "supersample must be in 1..=4".into(),
            ));
        }
        if !(self.detection_noise_sigma_m.is_finite() && self.detection_noise_sigma_m >= 0.0) {
            return Err(ScenegenError::InvalidArgument(
                "detection noise sigma must be ≥ 0".into(),
            ));
        }
        if !(self.t_start_s.is_finite() && self.t_start_s >= 0.0) {
            return Err(ScenegenError::InvalidArgument(
                "t_start_s must be ≥ 0".into(),
            ));
        }
        Ok(())
    }

    fn center_px(&self) -> (f64, f64) {
        ((self.width - 1) as f64 / 2.0, (self.height - 1) as f64 / 2.0)
    }

    /// World meters (x east, y north, origin at the intersection center) to
    /// reference pixel coordinates (y down).
    pub fn world_to_image(&self) -> Homography {
        let (cx, cy) = self.center_px();
        let s = 1.0 / self.meters_per_pixel;
        Homography::from_array([s, 0.0, cx, 0.0, -s, cy, 0.0, 0.0, 1.0]).expect("finite")
    }
}

/// A ground-truth detection in jittered pixel coordinates. `off_frame` marks
/// centers outside the canvas; such rows are dropped when writing files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PxDetection {
    pub frame: usize,
    pub vehicle_id: u64,
    pub x_px: f64,
    pub y_px: f64,
    pub length_m: f64,
    pub width_m: f64,
    /// World heading of the vehicle body, radians CCW from east.
    pub heading_rad: f64,
    pub score: f64,
    #[serde(skip, default)]
    pub off_frame: bool,
}

#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub frames: Vec<ImageBuffer>,
    /// Realized jitter parameters per frame: tx, ty, rotation, p6, p7.
    pub jitter_params: Vec<[f64; 5]>,
    /// Pixel-space warp applied to frame `k` (frame-0 coords → frame-k).
    pub jitter: Vec<Homography>,
    /// Exact corrections (frame-k coords → frame-0); inverse of `jitter`.
    pub truth_corrections: Vec<Homography>,
    pub detections: Vec<Vec<PxDetection>>,
    /// Landmark squares inside the canvas, world meters.
    pub landmarks: Vec<Landmark>,
    pub world_to_image: Homography,
}

fn jitter_homography(p: &[f64; 5], cx: f64, cy: f64) -> Homography {
    let t = Homography::translation(p[0], p[1]);
    let r = Homography::rotation_about(p[2], cx, cy);
    let persp = Homography::translation(cx, cy)
        .compose(
            &Homography::from_array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, p[3], p[4], 1.0])
                .expect("finite"),
        )
        .and_then(|h| h.compose(&Homography::translation(-cx, -cy)))
        .expect("compose");
    t.compose(&r).and_then(|h| h.compose(&persp)).expect("compose")
}

/// Antialiasing ramp width in pixels. Edges are rendered as linear
/// intensity ramps of this width; bilinear warping reproduces linear ramps
/// exactly, which keeps truth-warped frames nearly identical to frame 0.
const AA_RAMP_PX: f64 = 1.5;

/// Signed distance to an axis-aligned rectangle centered at the origin
/// (Chebyshev metric; exact on edges, slightly conservative at corners).
fn sdf_rect(px: f64, py: f64, hx: f64, hy: f64) -> f64 {
    (px.abs() - hx).max(py.abs() - hy)
}

/// Linear edge coverage for a signed distance, 1 inside, 0 outside.
fn coverage(d_m: f64, aa_m: f64) -> f64 {
    (0.5 - d_m / aa_m).clamp(0.0, 1.0)
}

/// Distance to the lane markings of one road: edge strips plus a dashed
/// centerline along the arms (`t` = along-road coordinate, `c` = across).
fn sdf_road_markings(t: f64, c: f64, half_width: f64, arm_len: f64) -> f64 {
    let ta = t.abs();
    // Along-road clamp: markings live on the arms only.
    let d_arm = (half_width - ta).max(ta - arm_len);
    let edge = (c.abs() - (half_width - EDGE_LINE_W_M / 2.0)).abs() - EDGE_LINE_W_M / 2.0;
    let u = ta - half_width;
    let d_dash_along = if u < 0.0 {
        -u
    } else {
        // Nearest dash may be in this period cell or the next one.
        let local = u.rem_euclid(DASH_PERIOD_M);
        let d_this = (local - DASH_LEN_M / 2.0).abs() - DASH_LEN_M / 2.0;
        let d_next = (local - DASH_PERIOD_M - DASH_LEN_M / 2.0).abs() - DASH_LEN_M / 2.0;
        d_this.min(d_next)
    };
    let center = d_dash_along.max(c.abs() - CENTER_LINE_HALF_W_M);
    edge.max(d_arm).min(center.max(ta - arm_len))
}

/// Grid index of the landmark cell nearest to coordinate `v`.
fn landmark_cell(v: f64) -> i64 {
    ((v - LANDMARK_PITCH_M / 2.0) / LANDMARK_PITCH_M).round() as i64
}

fn landmark_center(i: i64) -> f64 {
    i as f64 * LANDMARK_PITCH_M + LANDMARK_PITCH_M / 2.0
}

fn landmark_half(ix: i64, iy: i64) -> f64 {
    if (ix + iy).rem_euclid(2) == 0 {
        LANDMARK_HALF_LARGE_M
    } else {
        LANDMARK_HALF_SMALL_M
    }
}

/// Distance to the nearest off-road landmark square.
fn sdf_landmarks(p: [f64; 2], half_width: f64) -> f64 {
    let (ix, iy) = (landmark_cell(p[0]), landmark_cell(p[1]));
    let (gx, gy) = (landmark_center(ix), landmark_center(iy));
    let clear = half_width + LANDMARK_ROAD_CLEARANCE_M;
    if gx.abs() <= clear || gy.abs() <= clear {
        return f64::INFINITY;
    }
    let half = landmark_half(ix, iy);
    sdf_rect(p[0] - gx, p[1] - gy, half, half)
}

/// Smoothly shaded scene intensity at a world point.
fn scene_value(p: [f64; 2], half_width: f64, arm_len: f64, aa_m: f64, actives: &[ActiveVehicle]) -> f64 {
    let d_road = sdf_rect(p[0], p[1], half_width, arm_len)
        .min(sdf_rect(p[0], p[1], arm_len, half_width));
    let mut v = BACKGROUND_VALUE + (ROAD_VALUE - BACKGROUND_VALUE) * coverage(d_road, aa_m);
    let d_lines = sdf_road_markings(p[1], p[0], half_width, arm_len)
        .min(sdf_road_markings(p[0], p[1], half_width, arm_len));
    v += (LINE_VALUE - v) * coverage(d_lines, aa_m);
    let d_lm = sdf_landmarks(p, half_width);
    if d_lm.is_finite() {
        v += (LANDMARK_VALUE - v) * coverage(d_lm, aa_m);
    }
    let mut d_veh = f64::INFINITY;
    for veh in actives {
        d_veh = d_veh.min(veh.sdf(p));
        if d_veh < -aa_m {
            break;
        }
    }
    if d_veh.is_finite() {
        v += (VEHICLE_VALUE - v) * coverage(d_veh, aa_m);
    }
    v
}

/// Oriented vehicle footprint for point-containment tests.
struct ActiveVehicle {
    center: [f64; 2],
    cos_h: f64,
    sin_h: f64,
    half_len: f64,
    half_wid: f64,
    vehicle_id: u64,
    heading: f64,
    length_m: f64,
    width_m: f64,
}

impl ActiveVehicle {
    /// Signed distance to the oriented body rectangle.
    fn sdf(&self, p: [f64; 2]) -> f64 {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let u = dx * self.cos_h + dy * self.sin_h;
        let w = -dx * self.sin_h + dy * self.cos_h;
        (u.abs() - self.half_len).max(w.abs() - self.half_wid)
    }
}

/// Interpolated pose of a vehicle at world time `t_s`, if active.
fn vehicle_pose_at(tr: &VehicleTrack, t_s: f64, dt_s: f64) -> Option<([f64; 2], f64)> {
    let f = t_s / dt_s - tr.t0_step as f64;
    let last = (tr.states.len() - 1) as f64;
    if f < -1e-9 || f > last + 1e-9 {
        return None;
    }
    let f = f.clamp(0.0, last);
    let i = (f as usize).min(tr.states.len().saturating_sub(2));
    if tr.states.len() == 1 {
        let s = &tr.states[0];
        return Some((s.pos, s.heading));
    }
    let frac = f - i as f64;
    let (a, b) = (&tr.states[i], &tr.states[i + 1]);
    let pos = [
        a.pos[0] + frac * (b.pos[0] - a.pos[0]),
        a.pos[1] + frac * (b.pos[1] - a.pos[1]),
    ];
    let heading = normalize_heading(a.heading + frac * normalize_heading(b.heading - a.heading));
    Some((pos, heading))
}

fn active_vehicles(world: &World, t_s: f64) -> Vec<ActiveVehicle> {
    world
        .vehicles
        .iter()
        .filter_map(|tr| {
            vehicle_pose_at(tr, t_s, world.dt_s).map(|(pos, heading)| ActiveVehicle {
                center: pos,
                cos_h: heading.cos(),
                sin_h: heading.sin(),
                half_len: tr.spec.length_m / 2.0,
                half_wid: tr.spec.width_m / 2.0,
                vehicle_id: tr.spec.vehicle_id,
                heading,
                length_m: tr.spec.length_m,
                width_m: tr.spec.width_m,
            })
        })
        .collect()
}

/// A landmark square: world center and half-extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub center: [f64; 2],
    pub half_m: f64,
}

/// Landmarks whose squares fall fully inside the reference canvas.
fn canvas_landmarks(cfg: &RenderConfig, half_width: f64) -> Vec<Landmark> {
    let (cx, cy) = cfg.center_px();
    let clear = half_width + LANDMARK_ROAD_CLEARANCE_M;
    let mut out = Vec::new();
    let ext = (cx.max(cy) * cfg.meters_per_pixel / LANDMARK_PITCH_M).ceil() as i64 + 1;
    for ix in -ext..=ext {
        for iy in -ext..=ext {
            let (gx, gy) = (landmark_center(ix), landmark_center(iy));
            let half = landmark_half(ix, iy);
            if gx.abs() + half <= cx * cfg.meters_per_pixel
                && gy.abs() + half <= cy * cfg.meters_per_pixel
                && gx.abs() > clear
                && gy.abs() > clear
            {
                out.push(Landmark {
                    center: [gx, gy],
                    half_m: half,
                });
            }
        }
    }
    out
}

/// Renders `cfg.n_frames` frames of the world under the jitter model.
pub fn render_frames(
    world: &World,
    jm: &JitterModel,
    cfg: &RenderConfig,
) -> Result<RenderedScene, ScenegenError> {
    cfg.validate()?;
    let (cx, cy) = cfg.center_px();
    let w2i = cfg.world_to_image();
    let half_width = world.geom.half_width();
    let arm_len = world.geom.arm_length_m;
    let bounds = jm.bounds();
    let mut rng_jitter = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4a69_7474_6572_3a31); // "Jitter:1"
    let mut rng_det = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4465_7465_6374_3a32); // "Detect:2"

    let aa_m = AA_RAMP_PX * cfg.meters_per_pixel;
    let ss = cfg.supersample;
    let mut offsets = Vec::with_capacity(ss * ss);
    for a in 0..ss {
        for b in 0..ss {
            offsets.push((
                -0.5 + (a as f64 + 0.5) / ss as f64,
                -0.5 + (b as f64 + 0.5) / ss as f64,
            ));
        }
    }
    let inv_n = 1.0 / offsets.len() as f64;

    let mut params = [0.0f64; 5];
    let mut scene = RenderedScene {
        frames: Vec::with_capacity(cfg.n_frames),
        jitter_params: Vec::with_capacity(cfg.n_frames),
        jitter: Vec::with_capacity(cfg.n_frames),
        truth_corrections: Vec::with_capacity(cfg.n_frames),
        detections: Vec::with_capacity(cfg.n_frames),
        landmarks: canvas_landmarks(cfg, half_width),
        world_to_image: w2i.clone(),
    };

    for k in 0..cfg.n_frames {
        if k > 0 {
            for (c, b) in params.iter_mut().zip(bounds) {
                let u = if b > 0.0 { rng_jitter.gen_range(-b..=b) } else { 0.0 };
                *c = jm.smoothing * *c + (1.0 - jm.smoothing) * u;
            }
        }
        let jitter = jitter_homography(&params, cx, cy);
        let m = jitter.compose(&w2i)?;
        let m_inv = m.inverse()?;
        let t_s = cfg.t_start_s + k as f64 / cfg.frame_rate_hz;
        let actives = active_vehicles(world, t_s);

        let mut data = Vec::with_capacity(cfg.width * cfg.height);
        for py in 0..cfg.height {
            for px in 0..cfg.width {
                let mut acc = 0.0;
                for (dx, dy) in &offsets {
                    let (wx, wy) = m_inv.apply(px as f64 + dx, py as f64 + dy);
                    acc += scene_value([wx, wy], half_width, arm_len, aa_m, &actives);
                }
                data.push((acc * inv_n).clamp(0.0, 1.0) as f32);
            }
        }

        let mut dets = Vec::with_capacity(actives.len());
        for veh in &actives {
            let mut center = veh.center;
            if cfg.detection_noise_sigma_m > 0.0 {
                let g = |r: &mut ChaCha8Rng| -> f64 {
                    let u1: f64 = r.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = r.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                };
                center[0] += g(&mut rng_det) * cfg.detection_noise_sigma_m;
                center[1] += g(&mut rng_det) * cfg.detection_noise_sigma_m;
            }
            let (x_px, y_px) = m.apply(center[0], center[1]);
            let off_frame = !(x_px >= 0.0
                && x_px <= (cfg.width - 1) as f64
                && y_px >= 0.0
                && y_px <= (cfg.height - 1) as f64);
            dets.push(PxDetection {
                frame: k,
                vehicle_id: veh.vehicle_id,
                x_px,
                y_px,
                length_m: veh.length_m,
                width_m: veh.width_m,
                heading_rad: veh.heading,
                score: 1.0,
                off_frame,
            });
        }

        scene.frames.push(ImageBuffer::new(cfg.width, cfg.height, data)?);
        scene.jitter_params.push(params);
        scene.truth_corrections.push(jitter.inverse()?);
        scene.jitter.push(jitter);
        scene.detections.push(dets);
    }
    Ok(scene)
}

/// Road-frame description of the north-south road through the rendered
/// scene, in reference-frame pixels. Sections split the road at the
/// intersection-box edges.
pub fn scene_geometry(world: &World, cfg: &RenderConfig) -> RoadGeometryFile {
    let (cx, cy) = cfg.center_px();
    let l = world.geom.arm_length_m;
    let b = world.geom.half_width();
    let s = 1.0 / cfg.meters_per_pixel;
    RoadGeometryFile {
        centerline_px: vec![[cx, cy + l * s], [cx, cy - l * s]],
        meters_per_pixel: cfg.meters_per_pixel,
        lane_width_m: world.geom.lane_width_m,
        lanes_per_side: world.geom.lanes_per_side,
        section_boundaries_m: vec![l - b, l + b],
        intersection_center_px: [cx, cy],
    }
}

/// Exact vehicle state at one frame time: generator ground truth for the
/// detection→track pipeline, free of camera jitter and detection noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthState {
    pub frame: u64,
    pub vehicle_id: u64,
    /// World position, meters.
    pub pos_m: [f64; 2],
    /// World velocity, m/s.
    pub vel_mps: [f64; 2],
    pub heading_rad: f64,
    pub length_m: f64,
    pub width_m: f64,
}

/// Ground-truth states of every active vehicle at every frame time of `cfg`,
/// using the same linear pose interpolation as the renderer.
pub fn truth_states(world: &World, cfg: &RenderConfig) -> Vec<TruthState> {
    let mut out = Vec::new();
    for k in 0..cfg.n_frames {
        let t_s = cfg.t_start_s + k as f64 / cfg.frame_rate_hz;
        for tr in &world.vehicles {
            let Some((pos, heading)) = vehicle_pose_at(tr, t_s, world.dt_s) else {
                continue;
            };
            let last = (tr.states.len() - 1) as f64;
            let f = (t_s / world.dt_s - tr.t0_step as f64).clamp(0.0, last);
            let i = (f as usize).min(tr.states.len().saturating_sub(2));
            let vel = if tr.states.len() == 1 {
                tr.states[0].vel
            } else {
                let frac = f - i as f64;
                let (a, b) = (&tr.states[i], &tr.states[i + 1]);
                [
                    a.vel[0] + frac * (b.vel[0] - a.vel[0]),
                    a.vel[1] + frac * (b.vel[1] - a.vel[1]),
                ]
            };
            out.push(TruthState {
                frame: k as u64,
                vehicle_id: tr.spec.vehicle_id,
                pos_m: pos,
                vel_mps: vel,
                heading_rad: heading,
                length_m: tr.spec.length_m,
                width_m: tr.spec.width_m,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// File IO
// ---------------------------------------------------------------------------

pub const TRUTH_HOMOGRAPHY_HEADER: &str = "frame_index,h00,h01,h02,h10,h11,h12,h20,h21,h22";

/// Writes per-frame correction homographies as CSV. `provenance`, if given,
/// is emitted as a leading `#` comment.
pub fn write_truth_homographies_csv(
    w: &mut impl IoWrite,
    homs: &[Homography],
    provenance: Option<&str>,
) -> Result<(), ScenegenError> {
    if let Some(p) = provenance {
        writeln!(w, "# {p}")?;
    }
    writeln!(w, "{TRUTH_HOMOGRAPHY_HEADER}")?;
    for (k, h) in homs.iter().enumerate() {
        let m = h.as_array();
        write!(w, "{k}")?;
        for v in m {
            write!(w, ",{v:.17e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_truth_homographies_csv(
    r: impl BufRead,
) -> Result<Vec<Homography>, ScenegenError> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with("frame_index") {
            continue;
        }
        let fields: Vec<&str> = t.split(',').collect();
        if fields.len() != 10 {
            return Err(ScenegenError::InvalidArgument(format!(
                "homography CSV line {}: expected 10 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mut m = [0.0f64; 9];
        for (i, f) in fields[1..].iter().enumerate() {
            m[i] = f.parse().map_err(|e| {
                ScenegenError::InvalidArgument(format!(
                    "homography CSV line {}: bad number: {e}",
                    lineno + 1
                ))
            })?;
        }
        out.push(Homography::from_array(m).map_err(ScenegenError::Imaging)?);
    }
    Ok(out)
}

/// Writes visible detections (off-frame rows are clipped) as JSON lines.
pub fn write_px_detections_jsonl(
    w: &mut impl IoWrite,
    detections: &[Vec<PxDetection>],
    provenance: Option<&str>,
) -> Result<(), ScenegenError> {
    if let Some(p) = provenance {
        writeln!(w, "{}", serde_json::json!({ "provenance": p }))?;
    }
    for frame in detections {
        for d in frame.iter().filter(|d| !d.off_frame) {
            writeln!(w, "{}", serde_json::to_string(d)?)?;
        }
    }
    Ok(())
}

pub fn read_px_detections_jsonl(r: impl BufRead) -> Result<Vec<PxDetection>, ScenegenError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(t)?;
        if v.get("provenance").is_some() {
            continue;
        }
        out.push(serde_json::from_value(v)?);
    }
    Ok(out)
}

/// Writes frames as `frame_XXXXX.pgm` under `dir`, returning the paths.
pub fn write_frames_pgm(
    dir: impl AsRef<Path>,
    frames: &[ImageBuffer],
) -> Result<Vec<PathBuf>, ScenegenError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(frames.len());
    for (k, f) in frames.iter().enumerate() {
        let path = dir.join(format!("frame_{k:05}.pgm"));
        write_pgm(f, &path).map_err(ScenegenError::Imaging)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{ssim, warp};
    use crate::scenegen::gen_world;

    fn small_cfg(n_frames: usize, t_start_s: f64) -> RenderConfig {
        RenderConfig {
            n_frames,
            t_start_s,
            ..RenderConfig::default()
        }
    }

    #[test]
    fn truth_states_match_noise_free_detections() {
        let world = gen_world(3, 2).unwrap();
        let v0 = &world.vehicles[0];
        let cfg = small_cfg(5, v0.t0_step as f64 * world.dt_s);
        let scene = render_frames(&world, &JitterModel::none(), &cfg).unwrap();
        let truth = truth_states(&world, &cfg);
        let w2i = cfg.world_to_image();
        let mut n = 0;
        for ts in &truth {
            let d = scene.detections[ts.frame as usize]
                .iter()
                .find(|d| d.vehicle_id == ts.vehicle_id)
                .unwrap();
            let (x, y) = w2i.apply(ts.pos_m[0], ts.pos_m[1]);
            assert!((x - d.x_px).abs() < 1e-9 && (y - d.y_px).abs() < 1e-9);
            assert_eq!(ts.heading_rad, d.heading_rad);
            assert_eq!(ts.length_m, d.length_m);
            n += 1;
        }
        assert!(n > 0, "no active vehicles in the sampled frames");
    }

    #[test]
    fn zero_jitter_gives_identity_truth_and_is_deterministic() {
        let world = gen_world(1, 1).unwrap();
        let cfg = small_cfg(4, 0.0);
        let a = render_frames(&world, &JitterModel::none(), &cfg).unwrap();
        for h in &a.truth_corrections {
            assert_eq!(h.as_array(), Homography::identity().as_array());
        }
        for p in &a.jitter_params {
            assert_eq!(p, &[0.0; 5]);
        }
        let b = render_frames(&world, &JitterModel::none(), &cfg).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.data, fb.data);
        }
        // Static scene: later frames equal frame 0 exactly (no vehicles yet).
        assert_eq!(a.frames[0].data, a.frames[3].data);
    }

    #[test]
    fn jitter_params_stay_in_bounds_every_frame() {
        let world = gen_world(2, 1).unwrap();
        let jm = JitterModel::default();
        let cfg = RenderConfig {
            n_frames: 40,
            ..RenderConfig::default()
        };
        let scene = render_frames(&world, &jm, &cfg).unwrap();
        let mut max_t = 0.0f64;
        for p in &scene.jitter_params {
            assert!(p[0].abs() <= jm.max_translation_px);
            assert!(p[1].abs() <= jm.max_translation_px);
            assert!(p[2].abs() <= jm.max_rotation_rad);
            assert!(p[3].abs() <= jm.max_perspective);
            assert!(p[4].abs() <= jm.max_perspective);
            max_t = max_t.max(p[0].abs()).max(p[1].abs());
        }
        assert!(max_t > 0.1, "jitter never moved ({max_t} px)");
    }

    /// Warping frame k by its truth correction must place each landmark
    /// square within half a pixel of its frame-0 position, measured by an
    /// intensity centroid.
    #[test]
    fn landmarks_reproject_within_half_pixel() {
        let world = gen_world(4, 1).unwrap();
        let cfg = small_cfg(8, 0.0);
        let scene = render_frames(&world, &JitterModel::default(), &cfg).unwrap();
        let w2i = &scene.world_to_image;
        let mut checked = 0;
        for k in 1..scene.frames.len() {
            let (warped, mask) = warp(
                &scene.frames[k],
                &scene.truth_corrections[k],
                cfg.width,
                cfg.height,
            )
            .unwrap();
            for lm in &scene.landmarks {
                let (ex, ey) = w2i.apply(lm.center[0], lm.center[1]);
                let r = (lm.half_m / cfg.meters_per_pixel).ceil() as i64 + 3;
                let (ix, iy) = (ex.round() as i64, ey.round() as i64);
                if ix - r < 0
                    || iy - r < 0
                    || ix + r >= cfg.width as i64
                    || iy + r >= cfg.height as i64
                {
                    continue;
                }
                let mut ok = true;
                let (mut sw, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
                for y in (iy - r)..=(iy + r) {
                    for x in (ix - r)..=(ix + r) {
                        if !mask.get(x as usize, y as usize) {
                            ok = false;
                        }
                        let v = warped.data[y as usize * cfg.width + x as usize] as f64;
                        let wgt = (v - 0.25).max(0.0);
                        sw += wgt;
                        sx += wgt * x as f64;
                        sy += wgt * y as f64;
                    }
                }
                if !ok || sw < 1.0 {
                    continue; // clipped by the jitter; not observable
                }
                let (mx, my) = (sx / sw, sy / sw);
                let err = ((mx - ex).powi(2) + (my - ey).powi(2)).sqrt();
                assert!(
                    err <= 0.5,
                    "frame {k}: landmark {lm:?} reprojected {err:.3} px off"
                );
                checked += 1;
            }
        }
        assert!(checked >= 20, "only {checked} landmark observations checked");
    }

    /// Truth-warped frames must match frame 0 closely on the static scene.
    #[test]
    fn truth_warped_frames_reach_ssim_098() {
        let world = gen_world(3, 1).unwrap();
        // Early frames: vehicles are still far outside the canvas.
        let cfg = small_cfg(8, 0.0);
        let scene = render_frames(&world, &JitterModel::default(), &cfg).unwrap();
        let mut scores = Vec::new();
        for k in 1..scene.frames.len() {
            let (warped, mask) = warp(
                &scene.frames[k],
                &scene.truth_corrections[k],
                cfg.width,
                cfg.height,
            )
            .unwrap();
            scores.push(ssim(&warped, &scene.frames[0], Some(&mask)).unwrap());
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!(mean >= 0.98, "mean SSIM {mean:.4} below 0.98 ({scores:?})");
    }

    #[test]
    fn detection_rows_count_visible_vehicles() {
        let world = gen_world(6, 1).unwrap();
        // Find a time when pair 0's vehicles are inside the canvas.
        let ext = 127.5 * 0.35 - 5.0;
        let v0 = &world.vehicles[0];
        let step = (0..v0.states.len())
            .map(|i| (v0.t0_step + i, &v0.states[i]))
            .find(|(_, s)| s.pos[0].abs() < ext && s.pos[1].abs() < ext)
            .map(|(g, _)| g)
            .expect("vehicle enters canvas");
        let cfg = small_cfg(6, step as f64 * world.dt_s);
        let scene = render_frames(&world, &JitterModel::default(), &cfg).unwrap();

        let mut n_visible = 0usize;
        for (k, dets) in scene.detections.iter().enumerate() {
            let t = cfg.t_start_s + k as f64 / cfg.frame_rate_hz;
            let n_active = world
                .vehicles
                .iter()
                .filter(|tr| super::vehicle_pose_at(tr, t, world.dt_s).is_some())
                .count();
            assert_eq!(dets.len(), n_active, "frame {k}");
            assert!(dets.iter().any(|d| !d.off_frame), "frame {k} has no visible vehicle");
            for d in dets {
                let in_bounds = d.x_px >= 0.0
                    && d.x_px <= (cfg.width - 1) as f64
                    && d.y_px >= 0.0
                    && d.y_px <= (cfg.height - 1) as f64;
                assert_eq!(in_bounds, !d.off_frame);
            }
            n_visible += dets.iter().filter(|d| !d.off_frame).count();
        }

        let mut buf = Vec::new();
        write_px_detections_jsonl(&mut buf, &scene.detections, Some("test")).unwrap();
        let rows = read_px_detections_jsonl(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(rows.len(), n_visible);
        assert!(rows.iter().all(|d| !d.off_frame));
    }

    #[test]
    fn exact_detection_centers_project_through_world_to_image() {
        let world = gen_world(9, 1).unwrap();
        let v0 = &world.vehicles[0];
        let cfg = small_cfg(3, v0.t0_step as f64 * world.dt_s);
        let scene = render_frames(&world, &JitterModel::none(), &cfg).unwrap();
        // Zero jitter and zero noise: detections are W(world center) exactly.
        let d = scene.detections[0]
            .iter()
            .find(|d| d.vehicle_id == v0.spec.vehicle_id)
            .unwrap();
        let (ex, ey) = scene.world_to_image.apply(v0.states[0].pos[0], v0.states[0].pos[1]);
        assert!((d.x_px - ex).abs() < 1e-12 && (d.y_px - ey).abs() < 1e-12);
    }

    #[test]
    fn truth_homography_csv_roundtrip() {
        let world = gen_world(5, 1).unwrap();
        let cfg = small_cfg(5, 0.0);
        let scene = render_frames(&world, &JitterModel::default(), &cfg).unwrap();
        let mut buf = Vec::new();
        write_truth_homographies_csv(&mut buf, &scene.truth_corrections, Some("truth")).unwrap();
        let back = read_truth_homographies_csv(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(back.len(), scene.truth_corrections.len());
        for (a, b) in back.iter().zip(&scene.truth_corrections) {
            for (x, y) in a.as_array().iter().zip(b.as_array()) {
                assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn scene_geometry_maps_ns_road() {
        let world = gen_world(1, 1).unwrap();
        let cfg = RenderConfig::default();
        let geo = scene_geometry(&world, &cfg);
        let frame = geo.to_road_frame().unwrap();
        // World (0, 10): on the centerline, 10 m north of center.
        let (px, py) = cfg.world_to_image().apply(0.0, 10.0);
        let pos = frame.image_to_road([px, py]).unwrap();
        assert!((pos.x_m - 90.0).abs() < 1e-6, "arc {}", pos.x_m);
        assert!(pos.y_m.abs() < 1e-6);
        assert!(!pos.off_road);
        assert_eq!(pos.section_id, 2); // past both box edges
    }

    #[test]
    fn render_config_validation() {
        let world = gen_world(1, 1).unwrap();
        let bad = RenderConfig {
            width: 128,
            ..RenderConfig::default()
        };
        assert!(matches!(
            render_frames(&world, &JitterModel::none(), &bad),
            Err(ScenegenError::InvalidArgument(_))
        ));
        let bad = RenderConfig {
            supersample: 9,
            ..RenderConfig::default()
        };
        assert!(render_frames(&world, &JitterModel::none(), &bad).is_err());
    }
}
