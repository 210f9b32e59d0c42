//! Road-aligned coordinates for bird's-eye footage.
//!
//! A [`RoadFrame`] is a polyline centerline (the marking separating the two
//! travel directions) in image pixels plus a metric scale. Points map to
//! road coordinates `(x, y)`:
//!
//! - `x`: arc length in meters along the centerline from its first vertex;
//! - `y`: signed perpendicular offset in meters, positive on the *left* of
//!   the traversal direction. Image coordinates have y growing downward, so
//!   the left normal of direction `(dx, dy)` is `(dy, -dx)`.
//!
//! Lane and section IDs follow from the lateral offset and configured
//! arc-length boundaries. The module also provides polygonal road masking
//! and the road-geometry / vehicle-record file formats.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::ImageBuffer;

#[derive(Debug, Error)]
pub enum RoadmapError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("ambiguous projection: {0}")]
    AmbiguousProjection(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Position in road coordinates with lane/section assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadPosition {
    /// Longitudinal arc length, meters.
    pub x_m: f64,
    /// Signed lateral offset, meters; positive left of the travel direction.
    pub y_m: f64,
    /// Number of section boundaries at or before `x_m`.
    pub section_id: usize,
    /// Signed lane index (`+` left of centerline, `-` right, 0 on the line
    /// or off-road).
    pub lane_id: i32,
    /// Set when `|y|` exceeds `lanes_per_side * lane_width`.
    pub off_road: bool,
}

/// Road-based coordinate frame over a polyline centerline.
#[derive(Debug, Clone)]
pub struct RoadFrame {
    vertices_px: Vec<[f64; 2]>,
    /// Cumulative arc length (pixels) at each vertex.
    cum_px: Vec<f64>,
    meters_per_pixel: f64,
    lane_width_m: f64,
    lanes_per_side: u32,
    section_boundaries_m: Vec<f64>,
}

impl RoadFrame {
    pub fn new(
        centerline_px: Vec<[f64; 2]>,
        meters_per_pixel: f64,
        lane_width_m: f64,
        lanes_per_side: u32,
        section_boundaries_m: Vec<f64>,
    ) -> Result<Self, RoadmapError> {
        if centerline_px.len() < 2 {
            return Err(RoadmapError::InvalidGeometry(
                "centerline needs at least 2 vertices".into(),
            ));
        }
        if centerline_px
            .iter()
            .any(|p| !p[0].is_finite() || !p[1].is_finite())
        {
            return Err(RoadmapError::InvalidGeometry(
                "centerline vertices must be finite".into(),
            ));
        }
        if !(meters_per_pixel.is_finite() && meters_per_pixel > 0.0) {
            return Err(RoadmapError::InvalidGeometry(
                "meters_per_pixel must be positive".into(),
            ));
        }
        if !(lane_width_m.is_finite() && lane_width_m > 0.0) {
            return Err(RoadmapError::InvalidGeometry(
                "lane_width must be positive".into(),
            ));
        }
        if lanes_per_side == 0 {
            return Err(RoadmapError::InvalidGeometry(
                "lanes_per_side must be at least 1".into(),
            ));
        }
        if section_boundaries_m.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RoadmapError::InvalidGeometry(
                "section boundaries must be strictly increasing".into(),
            ));
        }
        let mut cum_px = Vec::with_capacity(centerline_px.len());
        cum_px.push(0.0);
        for w in centerline_px.windows(2) {
            let len = seg_len(w[0], w[1]);
            if len < 1e-9 {
                return Err(RoadmapError::InvalidGeometry(
                    "duplicate consecutive centerline vertices".into(),
                ));
            }
            cum_px.push(cum_px.last().unwrap() + len);
        }
        Ok(Self {
            vertices_px: centerline_px,
            cum_px,
            meters_per_pixel,
            lane_width_m,
            lanes_per_side,
            section_boundaries_m,
        })
    }

    pub fn total_length_m(&self) -> f64 {
        self.cum_px.last().unwrap() * self.meters_per_pixel
    }

    pub fn meters_per_pixel(&self) -> f64 {
        self.meters_per_pixel
    }

    pub fn lane_width_m(&self) -> f64 {
        self.lane_width_m
    }

    pub fn lanes_per_side(&self) -> u32 {
        self.lanes_per_side
    }

    pub fn section_boundaries_m(&self) -> &[f64] {
        &self.section_boundaries_m
    }

    /// Projects an image point to road coordinates.
    ///
    /// The foot point is the closest point over all segments, ties broken
    /// toward smaller arc length. If several near-minimal feet (within 1% of
    /// the best distance) are spread over an arc interval larger than twice
    /// the distance itself, the projection is ambiguous — this happens
    /// exactly when the point lies at or beyond the local center of
    /// curvature — and an error is returned.
    pub fn image_to_road(&self, p_px: [f64; 2]) -> Result<RoadPosition, RoadmapError> {
        if !p_px[0].is_finite() || !p_px[1].is_finite() {
            return Err(RoadmapError::InvalidArgument(
                "point must be finite".into(),
            ));
        }
        let mut best_d2 = f64::INFINITY;
        let mut best_arc_px = 0.0;
        let mut best_side = 0.0f64;
        let mut feet: Vec<(f64, f64)> = Vec::with_capacity(self.vertices_px.len());
        for k in 0..self.vertices_px.len() - 1 {
            let a = self.vertices_px[k];
            let b = self.vertices_px[k + 1];
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            let t = (((p_px[0] - a[0]) * d[0] + (p_px[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
            // Use exact vertex coordinates at clamped ends so shared vertices
            // yield identical feet from both adjacent segments.
            let foot = if t == 0.0 {
                a
            } else if t == 1.0 {
                b
            } else {
                [a[0] + t * d[0], a[1] + t * d[1]]
            };
            let v = [p_px[0] - foot[0], p_px[1] - foot[1]];
            let d2 = v[0] * v[0] + v[1] * v[1];
            let arc = self.cum_px[k] + t * len2.sqrt();
            feet.push((d2, arc));
            if d2 < best_d2 {
                best_d2 = d2;
                best_arc_px = arc;
                // Left-of-direction sign: dot with the left normal (dy, -dx).
                let side = v[0] * d[1] - v[1] * d[0];
                best_side = if side > 0.0 {
                    1.0
                } else if side < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        let d_star = best_d2.sqrt();
        let band = d_star * 1.01 + 1e-9;
        let mut arc_min = f64::INFINITY;
        let mut arc_max = f64::NEG_INFINITY;
        for (d2, arc) in &feet {
            if d2.sqrt() <= band {
                arc_min = arc_min.min(*arc);
                arc_max = arc_max.max(*arc);
            }
        }
        if arc_max - arc_min > (2.0 * d_star).max(1e-6) {
            return Err(RoadmapError::AmbiguousProjection(format!(
                "near-minimal feet span arcs [{:.3}, {:.3}] px at distance {:.3} px",
                arc_min, arc_max, d_star
            )));
        }
        let x_m = best_arc_px * self.meters_per_pixel;
        let y_m = best_side * d_star * self.meters_per_pixel;
        let (section_id, lane_id, off_road) = self.assign_lane_section(x_m, y_m);
        Ok(RoadPosition {
            x_m,
            y_m,
            section_id,
            lane_id,
            off_road,
        })
    }

    /// Centerline point and unit tangent (pixel space) at arc length `x_m`.
    pub fn point_tangent_at(&self, x_m: f64) -> Result<([f64; 2], [f64; 2]), RoadmapError> {
        let total = self.total_length_m();
        if !x_m.is_finite() || x_m < 0.0 || x_m > total {
            return Err(RoadmapError::OutOfRange(format!(
                "arc length {x_m} outside [0, {total}]"
            )));
        }
        let x_px = x_m / self.meters_per_pixel;
        let seg = self
            .cum_px
            .partition_point(|c| *c <= x_px)
            .saturating_sub(1)
            .min(self.vertices_px.len() - 2);
        let a = self.vertices_px[seg];
        let b = self.vertices_px[seg + 1];
        let len = self.cum_px[seg + 1] - self.cum_px[seg];
        let t = ((x_px - self.cum_px[seg]) / len).clamp(0.0, 1.0);
        let tangent = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let point = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        Ok((point, tangent))
    }

    /// Inverse mapping: road coordinates to an image point.
    pub fn road_to_image(&self, x_m: f64, y_m: f64) -> Result<[f64; 2], RoadmapError> {
        if !y_m.is_finite() {
            return Err(RoadmapError::InvalidArgument(
                "lateral offset must be finite".into(),
            ));
        }
        let (point, tangent) = self.point_tangent_at(x_m)?;
        let n_left = [tangent[1], -tangent[0]];
        let off_px = y_m / self.meters_per_pixel;
        Ok([point[0] + off_px * n_left[0], point[1] + off_px * n_left[1]])
    }

    /// Section and signed lane assignment for a road position.
    ///
    /// `section_id` counts boundaries at or before `x`; `lane_id` is
    /// `ceil(|y| / lane_width)` signed like `y`; positions with
    /// `|y| > lanes_per_side * lane_width` are flagged off-road with lane 0.
    pub fn assign_lane_section(&self, x_m: f64, y_m: f64) -> (usize, i32, bool) {
        let section_id = self.section_boundaries_m.partition_point(|b| *b <= x_m);
        let abs_y = y_m.abs();
        if abs_y > self.lanes_per_side as f64 * self.lane_width_m {
            return (section_id, 0, true);
        }
        let magnitude = (abs_y / self.lane_width_m).ceil() as i32;
        let lane_id = if y_m > 0.0 {
            magnitude
        } else if y_m < 0.0 {
            -magnitude
        } else {
            0
        };
        (section_id, lane_id, false)
    }
}

#[inline]
fn seg_len(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
}

/// Zeroes every pixel whose center lies outside all polygons (even-odd rule).
/// Pixel `(x, y)` is tested at the continuous point `(x, y)`, matching the
/// sampling convention of [`crate::imaging::warp`].
pub fn apply_road_mask(
    img: &ImageBuffer,
    mask_polygons: &[Vec<[f64; 2]>],
) -> Result<ImageBuffer, RoadmapError> {
    for poly in mask_polygons {
        validate_polygon(poly)?;
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let p = [x as f64, y as f64];
            if !mask_polygons.iter().any(|poly| point_in_polygon(p, poly)) {
                out.data[y * img.width + x] = 0.0;
            }
        }
    }
    Ok(out)
}

fn validate_polygon(poly: &[[f64; 2]]) -> Result<(), RoadmapError> {
    if poly.len() < 3 {
        return Err(RoadmapError::InvalidGeometry(
            "polygon needs at least 3 vertices".into(),
        ));
    }
    if poly.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(RoadmapError::InvalidGeometry(
            "polygon vertices must be finite".into(),
        ));
    }
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if seg_len(a, b) < 1e-9 {
            return Err(RoadmapError::InvalidGeometry(
                "polygon has a zero-length edge".into(),
            ));
        }
    }
    // Simplicity: no two non-adjacent edges may intersect.
    for i in 0..n {
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (a1, a2) = (poly[i], poly[(i + 1) % n]);
            let (b1, b2) = (poly[j], poly[(j + 1) % n]);
            if segments_intersect(a1, a2, b1, b2) {
                return Err(RoadmapError::InvalidGeometry(format!(
                    "polygon self-intersects (edges {i} and {j})"
                )));
            }
        }
    }
    Ok(())
}

fn cross3(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

/// Segment intersection including improper (touching / collinear) cases.
fn segments_intersect(a1: [f64; 2], a2: [f64; 2], b1: [f64; 2], b2: [f64; 2]) -> bool {
    let d1 = cross3(b1, b2, a1);
    let d2 = cross3(b1, b2, a2);
    let d3 = cross3(a1, a2, b1);
    let d4 = cross3(a1, a2, b2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(b1, b2, a1))
        || (d2 == 0.0 && on_segment(b1, b2, a2))
        || (d3 == 0.0 && on_segment(a1, a2, b1))
        || (d4 == 0.0 && on_segment(a1, a2, b2))
}

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let a = poly[i];
        let b = poly[j];
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x_cross = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// On-disk road geometry description (JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoadGeometryFile {
    pub centerline_px: Vec<[f64; 2]>,
    pub meters_per_pixel: f64,
    pub lane_width_m: f64,
    pub lanes_per_side: u32,
    pub section_boundaries_m: Vec<f64>,
    pub intersection_center_px: [f64; 2],
}

impl RoadGeometryFile {
    pub fn to_road_frame(&self) -> Result<RoadFrame, RoadmapError> {
        RoadFrame::new(
            self.centerline_px.clone(),
            self.meters_per_pixel,
            self.lane_width_m,
            self.lanes_per_side,
            self.section_boundaries_m.clone(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RoadmapError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RoadmapError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One detection expressed in road coordinates, with extent.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleRecord {
    pub track_id: u64,
    pub frame: u64,
    pub pos: RoadPosition,
    pub length_m: f64,
    pub width_m: f64,
}

pub const VEHICLE_RECORD_HEADER: &str =
    "track_id,frame,x_m,y_m,section_id,lane_id,length_m,width_m";

/// Writes vehicle records as CSV. `provenance`, when given, is emitted as a
/// leading `#` comment line.
pub fn write_vehicle_records(
    writer: &mut impl Write,
    records: &[VehicleRecord],
    provenance: Option<&str>,
) -> Result<(), RoadmapError> {
    if let Some(p) = provenance {
        writeln!(writer, "# {p}")?;
    }
    writeln!(writer, "{VEHICLE_RECORD_HEADER}")?;
    for r in records {
        writeln!(
            writer,
            "{},{},{},{},{},{},{},{}",
            r.track_id,
            r.frame,
            r.pos.x_m,
            r.pos.y_m,
            r.pos.section_id,
            r.pos.lane_id,
            r.length_m,
            r.width_m
        )?;
    }
    Ok(())
}

pub fn read_vehicle_records(reader: impl BufRead) -> Result<Vec<VehicleRecord>, RoadmapError> {
    let mut records = Vec::new();
    let mut saw_header = false;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != VEHICLE_RECORD_HEADER {
                return Err(RoadmapError::Parse(format!(
                    "unexpected header {line:?}"
                )));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(RoadmapError::Parse(format!(
                "line {}: expected 8 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| RoadmapError::Parse(format!("line {}: {e}", lineno + 1)))
        };
        let y_m = parse_f(fields[3])?;
        let lane_id = fields[5]
            .parse::<i32>()
            .map_err(|e| RoadmapError::Parse(format!("line {}: {e}", lineno + 1)))?;
        records.push(VehicleRecord {
            track_id: fields[0]
                .parse()
                .map_err(|e| RoadmapError::Parse(format!("line {}: {e}", lineno + 1)))?,
            frame: fields[1]
                .parse()
                .map_err(|e| RoadmapError::Parse(format!("line {}: {e}", lineno + 1)))?,
            pos: RoadPosition {
                x_m: parse_f(fields[2])?,
                y_m,
                section_id: fields[4]
                    .parse()
                    .map_err(|e| RoadmapError::Parse(format!("line {}: {e}", lineno + 1)))?,
                lane_id,
                off_road: lane_id == 0 && y_m != 0.0,
            },
            length_m: parse_f(fields[6])?,
            width_m: parse_f(fields[7])?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn straight_frame() -> RoadFrame {
        // 1000 px horizontal centerline at 0.1 m/px: 100 m total.
        RoadFrame::new(
            vec![[100.0, 200.0], [1100.0, 200.0]],
            0.1,
            3.5,
            2,
            vec![50.0, 70.0],
        )
        .unwrap()
    }

    /// Circular-arc centerline of the given radius (meters) at 0.1 m/px,
    /// sampled every `step_deg` degrees over `span_deg`.
    fn arc_frame(radius_m: f64, span_deg: usize, step_deg: usize) -> RoadFrame {
        let r_px = radius_m / 0.1;
        let mut pts = Vec::new();
        let mut deg = 0usize;
        while deg <= span_deg {
            let th = (deg as f64).to_radians();
            pts.push([500.0 + r_px * th.cos(), 500.0 + r_px * th.sin()]);
            deg += step_deg;
        }
        RoadFrame::new(pts, 0.1, 3.5, 2, vec![]).unwrap()
    }

    #[test]
    fn straight_centerline_total_length() {
        assert!((straight_frame().total_length_m() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn l_shaped_centerline_total_length() {
        let rf = RoadFrame::new(
            vec![[0.0, 0.0], [600.0, 0.0], [600.0, 800.0]],
            0.1,
            3.5,
            1,
            vec![],
        )
        .unwrap();
        assert!((rf.total_length_m() - 140.0).abs() < 1e-12);
    }

    #[test]
    fn circular_arc_length_close_to_analytic() {
        let rf = arc_frame(50.0, 90, 1);
        let analytic = 50.0 * std::f64::consts::FRAC_PI_2;
        let rel = (rf.total_length_m() - analytic).abs() / analytic;
        assert!(rel <= 1e-3, "relative arc-length error {rel}");
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(RoadFrame::new(vec![[0.0, 0.0]], 0.1, 3.5, 1, vec![]).is_err());
        assert!(
            RoadFrame::new(vec![[0.0, 0.0], [0.0, 0.0]], 0.1, 3.5, 1, vec![]).is_err(),
            "duplicate vertices"
        );
        assert!(RoadFrame::new(vec![[0.0, 0.0], [1.0, 0.0]], 0.0, 3.5, 1, vec![]).is_err());
        assert!(RoadFrame::new(vec![[0.0, 0.0], [1.0, 0.0]], 0.1, 3.5, 0, vec![]).is_err());
        assert!(
            RoadFrame::new(vec![[0.0, 0.0], [1.0, 0.0]], 0.1, 3.5, 1, vec![5.0, 5.0]).is_err(),
            "non-increasing boundaries"
        );
    }

    #[test]
    fn origin_maps_to_origin() {
        let rf = straight_frame();
        let rp = rf.image_to_road([100.0, 200.0]).unwrap();
        assert_eq!(rp.x_m, 0.0);
        assert_eq!(rp.y_m, 0.0);
        let back = rf.road_to_image(0.0, 0.0).unwrap();
        assert_eq!(back, [100.0, 200.0]);
    }

    #[test]
    fn centerline_vertex_maps_to_arc_position() {
        let rf = RoadFrame::new(
            vec![[100.0, 200.0], [450.0, 200.0], [450.0, 640.0]],
            0.1,
            3.5,
            2,
            vec![],
        )
        .unwrap();
        let rp = rf.image_to_road([450.0, 200.0]).unwrap();
        assert!((rp.x_m - 35.0).abs() < 1e-9);
        assert_eq!(rp.y_m, 0.0);
        let back = rf.road_to_image(35.0, 0.0).unwrap();
        assert!((back[0] - 450.0).abs() < 1e-9 && (back[1] - 200.0).abs() < 1e-9);
    }

    #[test]
    fn perpendicular_left_offset_from_forward_construction() {
        // Forward-construction oracle: build the query point from the frame
        // geometry itself (foot + 35 px along the left normal), then check
        // image_to_road recovers (35.0, +3.5).
        let rf = straight_frame();
        let (foot, tangent) = rf.point_tangent_at(35.0).unwrap();
        let n_left = [tangent[1], -tangent[0]];
        let p = [foot[0] + 35.0 * n_left[0], foot[1] + 35.0 * n_left[1]];
        // Eastward travel with image y down: left is up (smaller image y).
        assert!(p[1] < foot[1]);
        let rp = rf.image_to_road(p).unwrap();
        assert!((rp.x_m - 35.0).abs() < 1e-6);
        assert!((rp.y_m - 3.5).abs() < 1e-6);
        assert_eq!(rp.lane_id, 1);
    }

    #[test]
    fn side_sign_flips_across_centerline() {
        let rf = straight_frame();
        let above = rf.image_to_road([350.0, 180.0]).unwrap();
        let below = rf.image_to_road([350.0, 220.0]).unwrap();
        assert!((above.x_m - 25.0).abs() < 1e-9);
        assert!((above.y_m - 2.0).abs() < 1e-9, "above line is left (+)");
        assert!((below.y_m + 2.0).abs() < 1e-9, "below line is right (-)");
    }

    #[test]
    fn circle_center_projection_is_ambiguous() {
        let rf = arc_frame(50.0, 180, 1);
        // The center of curvature is equidistant from the whole arc.
        let err = rf.image_to_road([500.0, 500.0]).unwrap_err();
        assert!(matches!(err, RoadmapError::AmbiguousProjection(_)), "{err}");
    }

    /// Inverse round-trips on a polyline are only defined away from the
    /// non-injective wedges of the offset map: an offset toward the inside of
    /// a joint whose foot lies within arc distance `|y| * tan(turn angle)` of
    /// the vertex maps into the overlap region of the two segment offsets
    /// (the contract's "ambiguity zone"). This predicate characterizes those
    /// zones geometrically for the regular `arc_frame` polylines, where the
    /// inside of every turn is the negative-y (right) side.
    fn in_joint_wedge(rf: &RoadFrame, step_deg: usize, x: f64, y: f64) -> bool {
        if y >= 0.0 {
            return false; // outward offsets stay injective
        }
        let n_segs = rf.vertices_px.len() - 1;
        let chord_m = rf.total_length_m() / n_segs as f64;
        let delta = (step_deg as f64).to_radians();
        let band = y.abs() * delta.tan() * 1.1 + 1e-6;
        let nearest_vertex = (x / chord_m).round() * chord_m;
        (x - nearest_vertex).abs() <= band
    }

    #[test]
    fn interior_points_project_cleanly_on_curves() {
        let rf = arc_frame(50.0, 90, 1);
        let n_segs = rf.vertices_px.len() - 1;
        let chord_m = rf.total_length_m() / n_segs as f64;
        // Offsets up to half the curvature radius, feet mid-segment (outside
        // every joint wedge), round-trip to float precision.
        for &y in &[-20.0, -5.0, 0.0, 5.0, 20.0] {
            for k in [1usize, 20, 50, 80] {
                let x = (k as f64 + 0.5) * chord_m;
                let p = rf.road_to_image(x, y).unwrap();
                let rp = rf.image_to_road(p).unwrap();
                assert!(
                    (rp.x_m - x).abs() < 1e-6 && (rp.y_m - y).abs() < 1e-6,
                    "({x},{y}) -> ({},{})",
                    rp.x_m,
                    rp.y_m
                );
            }
        }
    }

    #[test]
    fn thousand_point_roundtrip_on_curved_frame() {
        use rand::{Rng, SeedableRng};
        let rf = arc_frame(50.0, 120, 1);
        let total = rf.total_length_m();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x0AD5_EED1);
        let mut max_err = 0.0f64;
        let mut n = 0usize;
        while n < 1000 {
            let x = rng.gen_range(0.0..total);
            let y = rng.gen_range(-15.0..15.0);
            if in_joint_wedge(&rf, 1, x, y) {
                continue;
            }
            n += 1;
            let p = rf.road_to_image(x, y).unwrap();
            let rp = rf.image_to_road(p).unwrap();
            max_err = max_err.max((rp.x_m - x).abs()).max((rp.y_m - y).abs());
        }
        assert!(max_err <= 1e-6, "max round-trip error {max_err} m");
    }

    #[test]
    fn road_to_image_range_checks() {
        let rf = straight_frame();
        assert!(rf.road_to_image(-0.001, 0.0).is_err());
        assert!(rf.road_to_image(100.001, 0.0).is_err());
        assert!(rf.road_to_image(100.0, 5.0).is_ok(), "inclusive end");
    }

    #[test]
    fn lane_and_section_examples() {
        let rf = straight_frame();
        let (_, lane, off) = rf.assign_lane_section(10.0, -1.75);
        assert_eq!(lane, -1);
        assert!(!off);
        assert_eq!(rf.assign_lane_section(0.0, 0.0).0, 0);
        assert_eq!(rf.assign_lane_section(60.0, 0.0).0, 1);
        assert_eq!(rf.assign_lane_section(80.0, 0.0).0, 2);
        // Boundary itself counts: b <= x.
        assert_eq!(rf.assign_lane_section(50.0, 0.0).0, 1);
        // Off-road beyond lanes_per_side * lane_width.
        let (_, lane, off) = rf.assign_lane_section(10.0, 7.2);
        assert_eq!(lane, 0);
        assert!(off);
        let (_, lane, off) = rf.assign_lane_section(10.0, 7.0);
        assert_eq!(lane, 2, "exactly on the outer edge is still lane 2");
        assert!(!off);
    }

    /// Brute-force interval-scan oracle for lane and section assignment.
    fn scan_oracle(rf: &RoadFrame, x: f64, y: f64) -> (usize, i32, bool) {
        let mut section = 0usize;
        for b in rf.section_boundaries_m() {
            if *b <= x {
                section += 1;
            } else {
                break;
            }
        }
        let lanes = rf.lanes_per_side() as i32;
        let w = rf.lane_width_m();
        let abs_y = y.abs();
        if abs_y > lanes as f64 * w {
            return (section, 0, true);
        }
        let mut lane = 0i32;
        for k in 1..=lanes {
            if abs_y <= k as f64 * w {
                lane = k;
                break;
            }
        }
        if lane == 0 {
            // abs_y == lanes*w handled above; only y == 0 remains.
            lane = if abs_y == 0.0 { 0 } else { lanes };
        }
        let signed = if y > 0.0 {
            lane
        } else if y < 0.0 {
            -lane
        } else {
            0
        };
        (section, signed, false)
    }

    #[test]
    fn lane_section_fuzz_matches_interval_scan_oracle() {
        use rand::{Rng, SeedableRng};
        let rf = straight_frame();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x0AD5_EED2);
        for i in 0..10_000 {
            let (x, y) = if i % 10 == 0 {
                // Exercise exact lane edges and section boundaries.
                (
                    [0.0, 50.0, 70.0, 100.0][rng.gen_range(0..4)],
                    [-7.0, -3.5, 0.0, 3.5, 7.0][rng.gen_range(0..5)],
                )
            } else {
                (rng.gen_range(-5.0..110.0), rng.gen_range(-9.0..9.0))
            };
            let got = rf.assign_lane_section(x, y);
            let want = scan_oracle(&rf, x, y);
            assert_eq!(got, want, "x={x} y={y}");
        }
    }

    #[test]
    fn resampling_preserves_total_length() {
        let rf = arc_frame(50.0, 90, 2);
        // Refine: insert the midpoint of every segment.
        let orig: Vec<[f64; 2]> = rf.vertices_px.clone();
        let mut refined = Vec::new();
        for w in orig.windows(2) {
            refined.push(w[0]);
            refined.push([(w[0][0] + w[1][0]) / 2.0, (w[0][1] + w[1][1]) / 2.0]);
        }
        refined.push(*orig.last().unwrap());
        let rf2 = RoadFrame::new(refined, 0.1, 3.5, 2, vec![]).unwrap();
        let rel = (rf.total_length_m() - rf2.total_length_m()).abs() / rf.total_length_m();
        assert!(rel <= 1e-12, "refinement changed length by {rel} (relative)");
    }

    #[test]
    fn road_mask_full_cover_is_identity() {
        let img = ImageBuffer::from_fn(16, 12, |x, y| ((x + y) % 7) as f32 / 6.0).unwrap();
        let full = vec![vec![
            [-1.0, -1.0],
            [16.0, -1.0],
            [16.0, 12.0],
            [-1.0, 12.0],
        ]];
        let out = apply_road_mask(&img, &full).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn road_mask_empty_list_zeroes_everything() {
        let img = ImageBuffer::filled(8, 8, 0.7).unwrap();
        let out = apply_road_mask(&img, &[]).unwrap();
        assert!(out.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn road_mask_rectangle_matches_containment_oracle() {
        let img = ImageBuffer::filled(20, 20, 0.5).unwrap();
        let rect = vec![vec![[4.5, 6.5], [14.5, 6.5], [14.5, 11.5], [4.5, 11.5]]];
        let out = apply_road_mask(&img, &rect).unwrap();
        for y in 0..20 {
            for x in 0..20 {
                let inside = (x as f64) > 4.5
                    && (x as f64) < 14.5
                    && (y as f64) > 6.5
                    && (y as f64) < 11.5;
                let expect = if inside { 0.5 } else { 0.0 };
                assert_eq!(out.pixel(x, y), expect, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn road_mask_rejects_self_intersecting_polygon() {
        let img = ImageBuffer::filled(8, 8, 0.5).unwrap();
        let bowtie = vec![vec![[0.0, 0.0], [7.0, 7.0], [7.0, 0.0], [0.0, 7.0]]];
        let err = apply_road_mask(&img, &bowtie).unwrap_err();
        assert!(matches!(err, RoadmapError::InvalidGeometry(_)));
    }

    #[test]
    fn geometry_json_roundtrip() {
        let g = RoadGeometryFile {
            centerline_px: vec![[0.0, 320.0], [640.0, 320.0]],
            meters_per_pixel: 0.25,
            lane_width_m: 3.5,
            lanes_per_side: 1,
            section_boundaries_m: vec![76.5, 83.5],
            intersection_center_px: [320.0, 320.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("road_geometry.json");
        g.save(&path).unwrap();
        let back = RoadGeometryFile::load(&path).unwrap();
        assert_eq!(back.centerline_px, g.centerline_px);
        assert_eq!(back.meters_per_pixel, g.meters_per_pixel);
        assert_eq!(back.section_boundaries_m, g.section_boundaries_m);
        back.to_road_frame().unwrap();
    }

    #[test]
    fn vehicle_record_csv_roundtrip() {
        let records = vec![
            VehicleRecord {
                track_id: 1,
                frame: 17,
                pos: RoadPosition {
                    x_m: 35.25,
                    y_m: -1.75,
                    section_id: 0,
                    lane_id: -1,
                    off_road: false,
                },
                length_m: 4.6,
                width_m: 1.9,
            },
            VehicleRecord {
                track_id: 2,
                frame: 18,
                pos: RoadPosition {
                    x_m: 0.123456789012345,
                    y_m: 9.5,
                    section_id: 2,
                    lane_id: 0,
                    off_road: true,
                },
                length_m: 5.0,
                width_m: 2.0,
            },
        ];
        let mut buf = Vec::new();
        write_vehicle_records(&mut buf, &records, Some("stage=test config=deadbeef seed=1"))
            .unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# stage=test"));
        assert!(text.contains(VEHICLE_RECORD_HEADER));
        let back = read_vehicle_records(&buf[..]).unwrap();
        assert_eq!(back, records);
    }

    proptest! {
        /// Negating y negates the lane everywhere on-road.
        #[test]
        fn lane_assignment_is_symmetric(x in -10.0..120.0f64, y in -6.9f64..6.9) {
            let rf = straight_frame();
            let (_, lane_pos, off_p) = rf.assign_lane_section(x, y);
            let (_, lane_neg, off_n) = rf.assign_lane_section(x, -y);
            prop_assert_eq!(lane_pos, -lane_neg);
            prop_assert_eq!(off_p, off_n);
        }

        /// Round-trips on the straight frame are exact to float precision.
        #[test]
        fn straight_roundtrip(x in 0.0..100.0f64, y in -7.0..7.0f64) {
            let rf = straight_frame();
            let p = rf.road_to_image(x, y).unwrap();
            let rp = rf.image_to_road(p).unwrap();
            prop_assert!((rp.x_m - x).abs() < 1e-9);
            prop_assert!((rp.y_m - y).abs() < 1e-9);
        }
    }
}
