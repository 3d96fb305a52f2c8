//! Reference-line geometry: Frenet projections, conflict points, and
//! DTW-based reference-line assignment.
//!
//! Reference lines are polylines with linear interpolation everywhere —
//! exactness over smoothness. All operations are pure functions over
//! immutable values.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("reference line {0} is degenerate (needs >= 2 distinct waypoints)")]
    DegenerateLine(String),
    #[error("arc length {s} outside [0, {total}] on line {line}")]
    ArcLengthOutOfRange { line: String, s: f64, total: f64 },
    #[error("no candidate reference lines given")]
    NoCandidates,
    #[error("empty track")]
    EmptyTrack,
    #[error("map parse error: {0}")]
    MapParse(String),
}

/// 2-D point/vector in meters.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the cross product `self x o`.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        self.sub(o).norm()
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Arc-length-parameterized lane geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceLine {
    id: String,
    waypoints: Vec<Vec2>,
    cum_arclen: Vec<f64>,
}

/// Projection of a tracked state onto a reference line.
///
/// `d` is the signed lateral offset, positive to the left of the line
/// direction. `phi` is the heading relative to the local tangent, in
/// `(-pi, pi]`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct FrenetState {
    pub s: f64,
    pub d: f64,
    pub v_s: f64,
    pub phi: f64,
}

/// First crossing of two reference lines, by ascending arc length on the
/// first line.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ConflictPoint {
    pub s_a: f64,
    pub s_b: f64,
    pub point: Vec2,
}

impl ReferenceLine {
    pub fn new(id: impl Into<String>, waypoints: Vec<Vec2>) -> Result<Self, GeometryError> {
        let id = id.into();
        if waypoints.len() < 2 {
            return Err(GeometryError::DegenerateLine(id));
        }
        let mut cum = Vec::with_capacity(waypoints.len());
        cum.push(0.0);
        for w in waypoints.windows(2) {
            let seg = w[0].dist(w[1]);
            if seg <= 0.0 {
                return Err(GeometryError::DegenerateLine(id));
            }
            cum.push(cum.last().unwrap() + seg);
        }
        Ok(ReferenceLine {
            id,
            waypoints,
            cum_arclen: cum,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn waypoints(&self) -> &[Vec2] {
        &self.waypoints
    }

    pub fn cum_arclen(&self) -> &[f64] {
        &self.cum_arclen
    }

    pub fn total_len(&self) -> f64 {
        *self.cum_arclen.last().unwrap()
    }

    /// Same geometry traversed in the opposite direction.
    pub fn reversed(&self) -> ReferenceLine {
        let mut pts = self.waypoints.clone();
        pts.reverse();
        ReferenceLine::new(format!("{}-rev", self.id), pts).expect("valid reversal")
    }

    /// Segment index and interpolation parameter for arc length `s`.
    fn locate(&self, s: f64) -> (usize, f64) {
        // binary search over the monotone arc-length table
        let idx = match self
            .cum_arclen
            .binary_search_by(|v| v.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.waypoints.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.waypoints.len() - 2),
        };
        let seg_len = self.cum_arclen[idx + 1] - self.cum_arclen[idx];
        let t = ((s - self.cum_arclen[idx]) / seg_len).clamp(0.0, 1.0);
        (idx, t)
    }

    /// Point at arc length `s` (clamped to the line's domain).
    pub fn point_at(&self, s: f64) -> Vec2 {
        let (i, t) = self.locate(s.clamp(0.0, self.total_len()));
        let a = self.waypoints[i];
        let b = self.waypoints[i + 1];
        a.add(b.sub(a).scale(t))
    }

    /// Unit tangent of the segment containing arc length `s`.
    pub fn tangent_at(&self, s: f64) -> Vec2 {
        let (i, _) = self.locate(s.clamp(0.0, self.total_len()));
        let d = self.waypoints[i + 1].sub(self.waypoints[i]);
        d.scale(1.0 / d.norm())
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let t = self.tangent_at(s);
        t.y.atan2(t.x)
    }

    /// Resampled copy at the given spacing (endpoint always included).
    pub fn resample(&self, spacing: f64) -> Vec<Vec2> {
        let total = self.total_len();
        let mut pts = Vec::new();
        let mut s = 0.0;
        while s < total {
            pts.push(self.point_at(s));
            s += spacing;
        }
        pts.push(self.point_at(total));
        pts
    }
}

/// Project a tracked pose onto a line: closest polyline point by clamped
/// per-segment projection, ties broken toward smaller arc length.
pub fn project_to_frenet(
    p: Vec2,
    heading: f64,
    speed: f64,
    line: &ReferenceLine,
) -> Result<FrenetState, GeometryError> {
    let pts = line.waypoints();
    let mut best_dist2 = f64::INFINITY;
    let mut best_s = 0.0;
    let mut best_idx = 0usize;
    for i in 0..pts.len() - 1 {
        let a = pts[i];
        let b = pts[i + 1];
        let ab = b.sub(a);
        let seg_len2 = ab.dot(ab);
        let t = (p.sub(a).dot(ab) / seg_len2).clamp(0.0, 1.0);
        let proj = a.add(ab.scale(t));
        let d2 = p.dist(proj).powi(2);
        if d2 < best_dist2 - 1e-12 {
            best_dist2 = d2;
            best_s = line.cum_arclen()[i] + t * (line.cum_arclen()[i + 1] - line.cum_arclen()[i]);
            best_idx = i;
        }
    }
    let tangent = {
        let d = pts[best_idx + 1].sub(pts[best_idx]);
        d.scale(1.0 / d.norm())
    };
    let base = line.point_at(best_s);
    let offset = p.sub(base);
    let d = tangent.cross(offset); // left of the tangent is positive
    let phi = wrap_angle(heading - tangent.y.atan2(tangent.x));
    Ok(FrenetState {
        s: best_s,
        d,
        v_s: speed * phi.cos(),
        phi,
    })
}

/// Map a Frenet state back to a map-frame point and heading.
pub fn frenet_to_cartesian(
    s: f64,
    d: f64,
    phi: f64,
    line: &ReferenceLine,
) -> Result<(Vec2, f64), GeometryError> {
    let total = line.total_len();
    if !(0.0..=total).contains(&s) {
        return Err(GeometryError::ArcLengthOutOfRange {
            line: line.id().to_string(),
            s,
            total,
        });
    }
    let base = line.point_at(s);
    let t = line.tangent_at(s);
    let normal_left = Vec2::new(-t.y, t.x);
    let p = base.add(normal_left.scale(d));
    let heading = wrap_angle(t.y.atan2(t.x) + phi);
    Ok((p, heading))
}

fn segment_intersection(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> Option<(f64, f64, Vec2)> {
    let r = a1.sub(a0);
    let s = b1.sub(b0);
    let denom = r.cross(s);
    // Parallel (including collinear) segments carry no single crossing point.
    if denom.abs() < 1e-12 {
        return None;
    }
    let qp = b0.sub(a0);
    let t = qp.cross(s) / denom;
    let u = qp.cross(r) / denom;
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
        Some((t, u, a0.add(r.scale(t))))
    } else {
        None
    }
}

/// First intersection of two polylines by ascending arc length on `a`
/// (ties broken by ascending arc length on `b`). `None` when they do not
/// cross.
pub fn conflict_point(a: &ReferenceLine, b: &ReferenceLine) -> Option<ConflictPoint> {
    let mut best: Option<ConflictPoint> = None;
    for i in 0..a.waypoints().len() - 1 {
        let a_from = a.cum_arclen()[i];
        let a_to = a.cum_arclen()[i + 1];
        if let Some(found) = &best {
            if a_from > found.s_a {
                break; // later segments only increase s_a
            }
        }
        for j in 0..b.waypoints().len() - 1 {
            if let Some((t, u, point)) = segment_intersection(
                a.waypoints()[i],
                a.waypoints()[i + 1],
                b.waypoints()[j],
                b.waypoints()[j + 1],
            ) {
                let s_a = a_from + t * (a_to - a_from);
                let s_b = b.cum_arclen()[j] + u * (b.cum_arclen()[j + 1] - b.cum_arclen()[j]);
                let better = match &best {
                    None => true,
                    Some(c) => s_a < c.s_a - 1e-12 || ((s_a - c.s_a).abs() <= 1e-12 && s_b < c.s_b),
                };
                if better {
                    best = Some(ConflictPoint { s_a, s_b, point });
                }
            }
        }
    }
    best
}

/// DTW cost of aligning the whole track against a subsequence of the line
/// points (open begin and end on the line side, no window band), Euclidean
/// point distance.
///
/// Tracks are short histories while reference lines span whole lanes, so the
/// track is matched into the line rather than stretched across it; a track
/// sampled exactly on the line costs zero.
pub fn dtw_cost(track: &[Vec2], line_pts: &[Vec2]) -> f64 {
    let (n, m) = (track.len(), line_pts.len());
    // dp[j]: best cost of aligning track[..i] ending at line point j.
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![f64::INFINITY; m];
    for (j, lp) in line_pts.iter().enumerate() {
        prev[j] = track[0].dist(*lp); // free start anywhere on the line
    }
    for i in 1..n {
        for j in 0..m {
            let step = track[i].dist(line_pts[j]);
            let mut best = prev[j]; // advance track only
            if j > 0 {
                best = best.min(cur[j - 1]); // advance line only
                best = best.min(prev[j - 1]); // advance both
            }
            cur[j] = step + best;
        }
        std::mem::swap(&mut prev, &mut cur);
        cur.fill(f64::INFINITY);
    }
    prev.iter().cloned().fold(f64::INFINITY, f64::min) // free end
}

pub const DTW_RESAMPLE_SPACING: f64 = 1.0;

/// Assign a track to the reference line with the lowest DTW cost.
///
/// Lines are resampled at 1 m spacing; ties break toward the lowest line id.
pub fn dtw_assign<'a>(
    track: &[Vec2],
    candidates: &'a [ReferenceLine],
) -> Result<(&'a ReferenceLine, f64), GeometryError> {
    if track.is_empty() {
        return Err(GeometryError::EmptyTrack);
    }
    if candidates.is_empty() {
        return Err(GeometryError::NoCandidates);
    }
    let mut best: Option<(&ReferenceLine, f64)> = None;
    for line in candidates {
        let pts = line.resample(DTW_RESAMPLE_SPACING);
        let cost = dtw_cost(track, &pts);
        let better = match &best {
            None => true,
            Some((bl, bc)) => cost < *bc || (cost == *bc && line.id() < bl.id()),
        };
        if better {
            best = Some((line, cost));
        }
    }
    Ok(best.unwrap())
}

/// Road map: a set of reference lines.
#[derive(Clone, Debug)]
pub struct RoadMap {
    lines: Vec<ReferenceLine>,
}

#[derive(Serialize, Deserialize)]
struct MapFileLine {
    id: String,
    waypoints: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct MapFile {
    reference_lines: Vec<MapFileLine>,
}

impl RoadMap {
    pub fn new(lines: Vec<ReferenceLine>) -> Self {
        RoadMap { lines }
    }

    pub fn lines(&self) -> &[ReferenceLine] {
        &self.lines
    }

    pub fn line(&self, id: &str) -> Option<&ReferenceLine> {
        self.lines.iter().find(|l| l.id() == id)
    }

    pub fn from_json(json: &str) -> Result<Self, GeometryError> {
        let file: MapFile =
            serde_json::from_str(json).map_err(|e| GeometryError::MapParse(e.to_string()))?;
        let mut lines = Vec::with_capacity(file.reference_lines.len());
        for l in file.reference_lines {
            let pts = l.waypoints.iter().map(|w| Vec2::new(w[0], w[1])).collect();
            lines.push(ReferenceLine::new(l.id, pts)?);
        }
        Ok(RoadMap { lines })
    }

    pub fn to_json(&self) -> String {
        let file = MapFile {
            reference_lines: self
                .lines
                .iter()
                .map(|l| MapFileLine {
                    id: l.id().to_string(),
                    waypoints: l.waypoints().iter().map(|p| [p.x, p.y]).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("map serialization")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, GeometryError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| GeometryError::MapParse(format!("{}: {e}", path.display())))?;
        Self::from_json(&json)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_json() + "\n")
            .map_err(|e| GeometryError::MapParse(format!("{}: {e}", path.display())))
    }
}
