//! Lane-center reference trajectories through a four-arm intersection.
//!
//! World frame: meters, intersection center at the origin, x east, y north.
//! Arms are indexed by outward direction: 0 = +x, 1 = +y, 2 = −x, 3 = −y.
//! A vehicle "approaching from arm a" travels inbound along −arm_outward(a)
//! on the innermost right-hand lane. Lateral offsets are positive to the
//! right of the travel direction (normal `(t_y, −t_x)` for tangent `t`).

use crate::roadmap::{RoadFrame, RoadmapError};

use super::{normalize_heading, Direction, PredictError};

/// Target spacing between consecutive reference points, meters.
pub const REFERENCE_SPACING_M: f64 = 0.5;

/// Symmetric four-arm intersection layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntersectionGeometry {
    pub lane_width_m: f64,
    pub lanes_per_side: u32,
    /// Length of each arm measured from the intersection center.
    pub arm_length_m: f64,
}

impl Default for IntersectionGeometry {
    fn default() -> Self {
        Self {
            lane_width_m: 3.5,
            lanes_per_side: 1,
            arm_length_m: 80.0,
        }
    }
}

impl IntersectionGeometry {
    pub fn validate(&self) -> Result<(), PredictError> {
        if !(self.lane_width_m.is_finite() && self.lane_width_m > 0.0) {
            return Err(PredictError::InvalidGeometry(
                "lane width must be positive".into(),
            ));
        }
        if self.lanes_per_side == 0 {
            return Err(PredictError::InvalidGeometry(
                "need at least one lane per side".into(),
            ));
        }
        if !(self.arm_length_m.is_finite() && self.arm_length_m > 2.0 * self.half_width()) {
            return Err(PredictError::InvalidGeometry(
                "arm length must exceed the intersection box".into(),
            ));
        }
        Ok(())
    }

    /// Half width of a road: distance from centerline to road edge. The
    /// central box spans `[-half_width, half_width]` on both axes.
    pub fn half_width(&self) -> f64 {
        self.lanes_per_side as f64 * self.lane_width_m
    }

    /// Lateral offset of the innermost lane center from the road centerline.
    pub fn lane_center_offset(&self) -> f64 {
        self.lane_width_m / 2.0
    }

    /// Unit outward direction of an arm (exact for the four axis arms).
    pub fn arm_outward(&self, arm: usize) -> Result<[f64; 2], PredictError> {
        match arm {
            0 => Ok([1.0, 0.0]),
            1 => Ok([0.0, 1.0]),
            2 => Ok([-1.0, 0.0]),
            3 => Ok([0.0, -1.0]),
            _ => Err(PredictError::InvalidGeometry(format!(
                "no arm {arm} in a four-arm intersection"
            ))),
        }
    }

    /// Arm a vehicle leaves through when approaching from `approach_arm`.
    pub fn exit_arm(&self, approach_arm: usize, direction: Direction) -> Result<usize, PredictError> {
        self.arm_outward(approach_arm)?;
        Ok(match direction {
            Direction::GS => (approach_arm + 2) % 4,
            Direction::TL => (approach_arm + 3) % 4,
            Direction::TR => (approach_arm + 1) % 4,
        })
    }

    /// Distance from a world position to the intersection box entry
    /// (negative once inside the box radius).
    pub fn distance_to_entry(&self, pos: [f64; 2]) -> f64 {
        (pos[0] * pos[0] + pos[1] * pos[1]).sqrt() - self.half_width()
    }
}

/// Circular-arc metadata of a turning reference trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurnArc {
    pub center: [f64; 2],
    pub radius: f64,
    /// Point where the incoming straight meets the arc.
    pub entry: [f64; 2],
    /// Point where the arc meets the outgoing straight.
    pub exit: [f64; 2],
    /// Travel heading at entry/exit, radians in (−π, π].
    pub entry_heading: f64,
    pub exit_heading: f64,
}

/// One analytic path segment prior to sampling.
enum Segment {
    Straight {
        a: [f64; 2],
        b: [f64; 2],
    },
    /// Circle arc from `phi0` to `phi1` (counterclockwise when
    /// `phi1 > phi0`, clockwise otherwise).
    Arc {
        center: [f64; 2],
        radius: f64,
        phi0: f64,
        phi1: f64,
    },
}

impl Segment {
    fn length(&self) -> f64 {
        match self {
            Segment::Straight { a, b } => ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt(),
            Segment::Arc { radius, phi0, phi1, .. } => radius * (phi1 - phi0).abs(),
        }
    }

    /// Point and unit travel tangent at arc-length `s` from the segment start.
    fn pose(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        match self {
            Segment::Straight { a, b } => {
                let len = self.length();
                let t = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
                ([a[0] + s * t[0], a[1] + s * t[1]], t)
            }
            Segment::Arc {
                center,
                radius,
                phi0,
                phi1,
            } => {
                let dir = if phi1 >= phi0 { 1.0 } else { -1.0 };
                let phi = phi0 + dir * s / radius;
                let p = [
                    center[0] + radius * phi.cos(),
                    center[1] + radius * phi.sin(),
                ];
                // CCW tangent is (−sin, cos); CW is its negation.
                let t = [-dir * phi.sin(), dir * phi.cos()];
                (p, t)
            }
        }
    }
}

/// Lane-center path for one approach arm and direction, sampled at
/// [`REFERENCE_SPACING_M`] (each analytic segment is subdivided evenly at a
/// step ≤ the target spacing so junction points are exact sample points).
#[derive(Debug, Clone)]
pub struct ReferenceTrajectory {
    pub direction: Direction,
    pub approach_arm: usize,
    /// Sampled points, world meters.
    pub points: Vec<[f64; 2]>,
    /// Analytic unit travel tangents at each point.
    pub tangents: Vec<[f64; 2]>,
    /// Turn geometry; `None` for go-straight.
    pub arc: Option<TurnArc>,
    /// Point indices where analytic segments join.
    pub junction_indices: Vec<usize>,
    /// Polyline frame over `points` for projection and arc-length queries.
    frame: RoadFrame,
}

impl ReferenceTrajectory {
    pub fn total_length(&self) -> f64 {
        self.frame.total_length_m()
    }

    pub fn entry_heading(&self) -> f64 {
        let t = self.tangents[0];
        normalize_heading(t[1].atan2(t[0]))
    }

    pub fn exit_heading(&self) -> f64 {
        let t = self.tangents[self.tangents.len() - 1];
        normalize_heading(t[1].atan2(t[0]))
    }

    /// Point and unit tangent at arc length `s` along the sampled polyline,
    /// extended linearly beyond both ends.
    pub fn pose_at(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let total = self.total_length();
        if s < 0.0 {
            let p0 = self.points[0];
            let t0 = self.tangents[0];
            ([p0[0] + s * t0[0], p0[1] + s * t0[1]], t0)
        } else if s > total {
            let pn = self.points[self.points.len() - 1];
            let tn = self.tangents[self.tangents.len() - 1];
            let e = s - total;
            ([pn[0] + e * tn[0], pn[1] + e * tn[1]], tn)
        } else {
            // Inside range; the frame cannot fail here.
            self.frame.point_tangent_at(s).expect("in-range arc length")
        }
    }

    /// Projects a world point to (arc length, signed lateral offset), lateral
    /// positive right of travel. Total: where the nearest-foot projection is
    /// ambiguous (e.g. near a turn-arc center) the nearest polyline vertex is
    /// used instead.
    pub fn project(&self, p: [f64; 2]) -> (f64, f64) {
        match self.frame.image_to_road(p) {
            Ok(rp) => (rp.x_m, rp.y_m),
            Err(RoadmapError::AmbiguousProjection(_)) => {
                let (mut best_d2, mut best_i) = (f64::INFINITY, 0);
                for (i, q) in self.points.iter().enumerate() {
                    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                    if d2 < best_d2 {
                        best_d2 = d2;
                        best_i = i;
                    }
                }
                let q = self.points[best_i];
                let t = self.tangents[best_i];
                let v = [p[0] - q[0], p[1] - q[1]];
                let arc = self.arc_at_index(best_i);
                (arc, v[0] * t[1] - v[1] * t[0])
            }
            Err(e) => unreachable!("finite point projection cannot fail: {e}"),
        }
    }

    /// Arc length of sample point `i`.
    pub fn arc_at_index(&self, i: usize) -> f64 {
        let mut s = 0.0;
        for w in self.points.windows(2).take(i) {
            s += ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        }
        s
    }

    /// `n` points ahead of arc length `s0` at the given spacing.
    pub fn sample_ahead(&self, s0: f64, spacing: f64, n: usize) -> Vec<[f64; 2]> {
        (1..=n)
            .map(|i| self.pose_at(s0 + i as f64 * spacing).0)
            .collect()
    }
}

/// Rotates a point by `k` exact quarter turns counterclockwise.
fn rot90(p: [f64; 2], k: usize) -> [f64; 2] {
    match k % 4 {
        0 => p,
        1 => [-p[1], p[0]],
        2 => [-p[0], -p[1]],
        _ => [p[1], -p[0]],
    }
}

/// Builds the lane-center reference path for `approach_arm` and `direction`.
///
/// Construction (in a local frame approaching from −y, then rotated into
/// place): the incoming straight runs up the innermost right-hand lane center
/// to the intersection box edge; turns continue on a circle tangent to both
/// the incoming and outgoing lane centers (left radius `half_width +
/// lane_offset`, right radius `half_width − lane_offset`), then exit straight
/// to the far arm end. Go-straight is a single line through the box.
pub fn reference_trajectory(
    geom: &IntersectionGeometry,
    approach_arm: usize,
    direction: Direction,
) -> Result<ReferenceTrajectory, PredictError> {
    geom.validate()?;
    geom.arm_outward(approach_arm)?;
    let b = geom.half_width();
    let off = geom.lane_center_offset();
    let l = geom.arm_length_m;
    let rot = (approach_arm + 1) % 4; // maps the local from−y frame onto the arm

    let (segments, arc_local): (Vec<Segment>, Option<(([f64; 2], f64), ([f64; 2], [f64; 2]))>) =
        match direction {
            Direction::GS => (
                vec![Segment::Straight {
                    a: [off, -l],
                    b: [off, l],
                }],
                None,
            ),
            Direction::TL => {
                let radius = b + off;
                let center = [-b, -b];
                let entry = [off, -b];
                let exit = [-b, off];
                (
                    vec![
                        Segment::Straight { a: [off, -l], b: entry },
                        Segment::Arc {
                            center,
                            radius,
                            phi0: 0.0,
                            phi1: std::f64::consts::FRAC_PI_2,
                        },
                        Segment::Straight { a: exit, b: [-l, off] },
                    ],
                    Some(((center, radius), (entry, exit))),
                )
            }
            Direction::TR => {
                let radius = b - off;
                let center = [b, -b];
                let entry = [off, -b];
                let exit = [b, -off];
                (
                    vec![
                        Segment::Straight { a: [off, -l], b: entry },
                        Segment::Arc {
                            center,
                            radius,
                            phi0: std::f64::consts::PI,
                            phi1: std::f64::consts::FRAC_PI_2,
                        },
                        Segment::Straight { a: exit, b: [l, -off] },
                    ],
                    Some(((center, radius), (entry, exit))),
                )
            }
        };

    let mut points: Vec<[f64; 2]> = Vec::new();
    let mut tangents: Vec<[f64; 2]> = Vec::new();
    let mut junction_indices = Vec::new();
    for (si, seg) in segments.iter().enumerate() {
        let len = seg.length();
        let n = (len / REFERENCE_SPACING_M).ceil().max(1.0) as usize;
        let step = len / n as f64;
        let start = if si == 0 {
            0
        } else {
            // The segment start duplicates the previous end point; verify the
            // junction is tangent-continuous, then skip the duplicate.
            let (p0, t0) = seg.pose(0.0);
            let (p0, t0) = (rot90(p0, rot), rot90(t0, rot));
            let pp = *points.last().unwrap();
            let tp = *tangents.last().unwrap();
            let gap = ((p0[0] - pp[0]).powi(2) + (p0[1] - pp[1]).powi(2)).sqrt();
            let cross = (tp[0] * t0[1] - tp[1] * t0[0]).abs();
            if gap > 1e-9 || cross.asin() > 1f64.to_radians() {
                return Err(PredictError::InvalidGeometry(format!(
                    "segment junction discontinuous (gap {gap:.2e}, turn {:.3}°)",
                    cross.asin().to_degrees()
                )));
            }
            junction_indices.push(points.len() - 1);
            // Overwrite the stored junction tangent with the exact shared one.
            *tangents.last_mut().unwrap() = t0;
            1
        };
        for i in start..=n {
            let (p, t) = seg.pose(i as f64 * step);
            points.push(rot90(p, rot));
            tangents.push(rot90(t, rot));
        }
    }

    let arc = arc_local.map(|((center, radius), (entry, exit))| {
        let entry_w = rot90(entry, rot);
        let exit_w = rot90(exit, rot);
        let entry_t = rot90([0.0, 1.0], rot); // local inbound travel is +y
        let exit_t = match direction {
            Direction::TL => rot90([-1.0, 0.0], rot),
            Direction::TR => rot90([1.0, 0.0], rot),
            Direction::GS => unreachable!(),
        };
        TurnArc {
            center: rot90(center, rot),
            radius,
            entry: entry_w,
            exit: exit_w,
            entry_heading: normalize_heading(entry_t[1].atan2(entry_t[0])),
            exit_heading: normalize_heading(exit_t[1].atan2(exit_t[0])),
        }
    });

    let frame = RoadFrame::new(points.clone(), 1.0, geom.lane_width_m, geom.lanes_per_side, vec![])
        .map_err(|e| PredictError::InvalidGeometry(e.to_string()))?;
    Ok(ReferenceTrajectory {
        direction,
        approach_arm,
        points,
        tangents,
        arc,
        junction_indices,
        frame,
    })
}

/// The three reference trajectories for one approach arm.
#[derive(Debug, Clone)]
pub struct ApproachReferences {
    pub arm: usize,
    refs: [ReferenceTrajectory; 3],
}

impl ApproachReferences {
    pub fn new(geom: &IntersectionGeometry, arm: usize) -> Result<Self, PredictError> {
        Ok(Self {
            arm,
            refs: [
                reference_trajectory(geom, arm, Direction::GS)?,
                reference_trajectory(geom, arm, Direction::TL)?,
                reference_trajectory(geom, arm, Direction::TR)?,
            ],
        })
    }

    pub fn get(&self, direction: Direction) -> &ReferenceTrajectory {
        &self.refs[direction.index()]
    }
}

/// Approach arm implied by a position far out on one arm (largest axis
/// component wins; exact ties resolve to the x axis).
pub fn approach_arm_of_position(pos: [f64; 2]) -> usize {
    if pos[0].abs() >= pos[1].abs() {
        if pos[0] >= 0.0 {
            0
        } else {
            2
        }
    } else if pos[1] >= 0.0 {
        1
    } else {
        3
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn geom() -> IntersectionGeometry {
        IntersectionGeometry::default()
    }

    #[test]
    fn gs_from_south_is_constant_lateral_offset() {
        let r = reference_trajectory(&geom(), 3, Direction::GS).unwrap();
        assert!(r.arc.is_none());
        for (p, t) in r.points.iter().zip(&r.tangents) {
            assert!((p[0] - 1.75).abs() < 1e-12, "lateral drift at {p:?}");
            assert!((t[0] - 0.0).abs() < 1e-12 && (t[1] - 1.0).abs() < 1e-12);
        }
        assert_eq!(r.points.first().unwrap(), &[1.75, -80.0]);
        assert_eq!(r.points.last().unwrap(), &[1.75, 80.0]);
        assert!((r.entry_heading() - FRAC_PI_2).abs() < 1e-12);
        assert!((r.exit_heading() - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn tl_arc_matches_circle_oracle() {
        // Independent construction: the left-turn circle must be tangent to
        // the incoming lane line x = 1.75 and the outgoing lane line y = 1.75,
        // turning counterclockwise, entering at the box edge y = -3.5. That
        // forces center (-3.5, -3.5) and radius 5.25.
        let r = reference_trajectory(&geom(), 3, Direction::TL).unwrap();
        let arc = r.arc.unwrap();
        assert!((arc.radius - 5.25).abs() < 1e-9);
        assert!((arc.center[0] + 3.5).abs() < 1e-9 && (arc.center[1] + 3.5).abs() < 1e-9);
        // Endpoints on the two lane centers.
        assert!((arc.entry[0] - 1.75).abs() < 1e-6 && (arc.entry[1] + 3.5).abs() < 1e-6);
        assert!((arc.exit[0] + 3.5).abs() < 1e-6 && (arc.exit[1] - 1.75).abs() < 1e-6);
        // Entry/exit tangents match the arm headings (north in, west out).
        assert!((arc.entry_heading - FRAC_PI_2).abs() < 1e-6);
        assert!((arc.exit_heading - PI).abs() < 1e-6);
        // Every sampled point between the junctions lies on the circle.
        let (j0, j1) = (r.junction_indices[0], r.junction_indices[1]);
        for p in &r.points[j0..=j1] {
            let d = ((p[0] - arc.center[0]).powi(2) + (p[1] - arc.center[1]).powi(2)).sqrt();
            assert!((d - arc.radius).abs() < 1e-9);
        }
        // Path ends on the west arm outgoing lane center.
        assert_eq!(r.points.last().unwrap(), &[-80.0, 1.75]);
    }

    #[test]
    fn tr_arc_is_smaller_and_exits_east() {
        let tl = reference_trajectory(&geom(), 3, Direction::TL).unwrap();
        let tr = reference_trajectory(&geom(), 3, Direction::TR).unwrap();
        let (a_tl, a_tr) = (tl.arc.unwrap(), tr.arc.unwrap());
        assert!(a_tr.radius < a_tl.radius);
        assert!((a_tr.radius - 1.75).abs() < 1e-9);
        assert!((a_tr.center[0] - 3.5).abs() < 1e-9 && (a_tr.center[1] + 3.5).abs() < 1e-9);
        assert!((a_tr.entry[0] - 1.75).abs() < 1e-6 && (a_tr.entry[1] + 3.5).abs() < 1e-6);
        assert!((a_tr.exit[0] - 3.5).abs() < 1e-6 && (a_tr.exit[1] + 1.75).abs() < 1e-6);
        assert!((a_tr.entry_heading - FRAC_PI_2).abs() < 1e-6);
        assert!(a_tr.exit_heading.abs() < 1e-6, "east exit heading");
        assert_eq!(tr.points.last().unwrap(), &[80.0, -1.75]);
    }

    #[test]
    fn sample_spacing_and_junction_continuity() {
        for dir in Direction::ALL {
            let r = reference_trajectory(&geom(), 3, dir).unwrap();
            for w in r.points.windows(2) {
                let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
                assert!(d <= REFERENCE_SPACING_M + 1e-9, "over-spaced: {d}");
                assert!(d > 0.05, "near-duplicate points: {d}");
            }
            // Analytic tangent turn across each junction sample stays within
            // one arc step (junction itself is exactly continuous).
            for &j in &r.junction_indices {
                for k in [j.saturating_sub(1), j, j + 1] {
                    let t = r.tangents[k];
                    assert!((t[0].hypot(t[1]) - 1.0).abs() < 1e-12);
                }
            }
            if dir != Direction::GS {
                assert_eq!(r.junction_indices.len(), 2);
            }
        }
    }

    #[test]
    fn rotation_maps_south_to_north_exactly() {
        let g = geom();
        let south = reference_trajectory(&g, 3, Direction::TL).unwrap();
        let north = reference_trajectory(&g, 1, Direction::TL).unwrap();
        assert_eq!(south.points.len(), north.points.len());
        for (p, q) in south.points.iter().zip(&north.points) {
            let expect = [-p[0], -p[1]]; // two quarter turns
            assert!((q[0] - expect[0]).abs() < 1e-12 && (q[1] - expect[1]).abs() < 1e-12);
        }
        // From the north, a left turn exits through the east arm.
        assert_eq!(g.exit_arm(1, Direction::TL).unwrap(), 0);
        let end = north.points.last().unwrap();
        assert!((end[0] - 80.0).abs() < 1e-9 && (end[1] + 1.75).abs() < 1e-9);
    }

    #[test]
    fn pose_extrapolates_linearly_beyond_ends() {
        let r = reference_trajectory(&geom(), 3, Direction::GS).unwrap();
        let (p, t) = r.pose_at(-5.0);
        assert!((p[0] - 1.75).abs() < 1e-9 && (p[1] + 85.0).abs() < 1e-9);
        assert_eq!(t, [0.0, 1.0]);
        let total = r.total_length();
        let (p, _) = r.pose_at(total + 7.0);
        assert!((p[0] - 1.75).abs() < 1e-9 && (p[1] - 87.0).abs() < 1e-9);
    }

    #[test]
    fn project_roundtrips_on_straight_and_vertices() {
        let r = reference_trajectory(&geom(), 3, Direction::GS).unwrap();
        let (pos, t) = r.pose_at(30.0);
        let right = [t[1], -t[0]];
        let p = [pos[0] + 0.8 * right[0], pos[1] + 0.8 * right[1]];
        let (s, lat) = r.project(p);
        assert!((s - 30.0).abs() < 1e-9);
        assert!((lat - 0.8).abs() < 1e-9);

        let tl = reference_trajectory(&geom(), 3, Direction::TL).unwrap();
        for i in (0..tl.points.len()).step_by(13) {
            let (s, lat) = tl.project(tl.points[i]);
            assert!((s - tl.arc_at_index(i)).abs() < 1e-9);
            assert!(lat.abs() < 1e-9);
        }
    }

    #[test]
    fn project_is_total_even_at_arc_center() {
        // The left-turn circle center is equidistant from the whole arc: the
        // underlying nearest-foot projection is ambiguous there, so the
        // fallback must still return finite coordinates.
        let r = reference_trajectory(&geom(), 3, Direction::TL).unwrap();
        let c = r.arc.unwrap().center;
        let (s, lat) = r.project(c);
        assert!(s.is_finite() && lat.is_finite());
        assert!(lat.abs() <= r.arc.unwrap().radius + 1e-6);
    }

    #[test]
    fn bad_arm_and_geometry_rejected() {
        assert!(reference_trajectory(&geom(), 4, Direction::GS).is_err());
        let mut g = geom();
        g.lane_width_m = 0.0;
        assert!(reference_trajectory(&g, 0, Direction::GS).is_err());
        let mut g = geom();
        g.arm_length_m = 5.0; // shorter than the box
        assert!(reference_trajectory(&g, 0, Direction::TL).is_err());
    }

    #[test]
    fn approach_arm_from_position() {
        assert_eq!(approach_arm_of_position([70.0, 1.75]), 0);
        assert_eq!(approach_arm_of_position([-1.75, 70.0]), 1);
        assert_eq!(approach_arm_of_position([-70.0, -1.75]), 2);
        assert_eq!(approach_arm_of_position([1.75, -70.0]), 3);
    }
}
