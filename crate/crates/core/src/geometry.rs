//! Ray geometry on disk domains: chord exit times, boundary projection,
//! ordered crossings of the piece partition, and the flat-segment audit
//! that decides whether coefficient interfaces can seed new discontinuities.

use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

/// Tolerance for unit-vector and on-boundary checks.
pub const UNIT_TOL: f64 = 1e-12;
/// Squared-discriminant threshold below which a ray/circle contact counts as tangential.
pub const TANGENT_TOL: f64 = 1e-12;
/// Crossings closer than this along a ray are merged into one record.
pub const MERGE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point ({0}, {1}) lies outside the closed domain")]
    OutsideDomain(f64, f64),
    #[error("direction ({0}, {1}) is not a unit vector")]
    NotUnit(f64, f64),
    #[error("radius must be positive and finite, got {0}")]
    BadRadius(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Counterclockwise perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        if n > 0.0 && n.is_finite() {
            Some(self * (1.0 / n))
        } else {
            None
        }
    }

    pub fn rotated(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn from_angle(angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c, s)
    }

    pub fn is_unit(self) -> bool {
        (self.norm_sq() - 1.0).abs() <= 2.0 * UNIT_TOL
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Angle between two unit vectors, computed via atan2 so that values near
/// zero keep full precision.
pub fn angle_between(a: Vec2, b: Vec2) -> f64 {
    a.cross(b).abs().atan2(a.dot(b))
}

/// How a disk domain arose; both kinds behave identically, the slice kind
/// records that the disk came from cutting a ball.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainKind {
    Disk,
    BallSlice,
}

/// Open disk centered at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvexDomain {
    kind: DomainKind,
    radius: f64,
}

/// Distances from a point to the domain boundary against and along a
/// direction: the point minus `backward` times the direction and the point
/// plus `forward` times the direction both lie on the boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChordTimes {
    pub backward: f64,
    pub forward: f64,
}

impl ConvexDomain {
    pub fn disk(radius: f64) -> Result<Self, GeometryError> {
        Self::with_kind(DomainKind::Disk, radius)
    }

    pub fn ball_slice(radius: f64) -> Result<Self, GeometryError> {
        Self::with_kind(DomainKind::BallSlice, radius)
    }

    fn with_kind(kind: DomainKind, radius: f64) -> Result<Self, GeometryError> {
        if radius.is_finite() && radius > 0.0 {
            Ok(ConvexDomain { kind, radius })
        } else {
            Err(GeometryError::BadRadius(radius))
        }
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains_closed(&self, p: Vec2) -> bool {
        p.norm_sq() <= self.radius * self.radius * (1.0 + 4.0 * UNIT_TOL)
    }

    pub fn contains_open(&self, p: Vec2) -> bool {
        p.norm_sq() < self.radius * self.radius
    }

    pub fn outward_normal(&self, p: Vec2) -> Vec2 {
        p.normalized().unwrap_or(Vec2::new(1.0, 0.0))
    }

    /// Pull a nearly-on-boundary point exactly onto the circle.
    pub fn snap_to_boundary(&self, p: Vec2) -> Result<Vec2, GeometryError> {
        let n = p.norm();
        if (n - self.radius).abs() > 1e-9 * self.radius.max(1.0) || n == 0.0 {
            return Err(GeometryError::OutsideDomain(p.x, p.y));
        }
        Ok(p * (self.radius / n))
    }

    /// Boundary point at the given polar angle.
    pub fn boundary_point(&self, angle: f64) -> Vec2 {
        Vec2::from_angle(angle) * self.radius
    }

    /// Exit distances of the chord through `x` with direction `dir`.
    pub fn chord_exit_times(&self, x: Vec2, dir: Vec2) -> Result<ChordTimes, GeometryError> {
        if !dir.is_unit() {
            return Err(GeometryError::NotUnit(dir.x, dir.y));
        }
        if !self.contains_closed(x) {
            return Err(GeometryError::OutsideDomain(x.x, x.y));
        }
        let b = x.dot(dir);
        let root = (b * b + self.radius * self.radius - x.norm_sq()).max(0.0).sqrt();
        Ok(ChordTimes {
            backward: (b + root).max(0.0),
            forward: (root - b).max(0.0),
        })
    }

    /// Entry point of the backward ray from `(x, dir)`.
    pub fn boundary_projection(&self, x: Vec2, dir: Vec2) -> Result<Vec2, GeometryError> {
        let times = self.chord_exit_times(x, dir)?;
        Ok(x - dir * times.backward)
    }
}

/// Subdomain shapes of the piece partition. `Background` matches every
/// domain point not claimed by an earlier piece.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Circle {
        center: Vec2,
        radius: f64,
    },
    Annulus {
        center: Vec2,
        inner_radius: f64,
        outer_radius: f64,
    },
    Polygon {
        vertices: Vec<Vec2>,
    },
    Background,
}

impl Shape {
    pub fn contains_closed(&self, p: Vec2, domain: &ConvexDomain) -> bool {
        match self {
            Shape::Circle { center, radius } => (p - *center).norm_sq() <= radius * radius,
            Shape::Annulus {
                center,
                inner_radius,
                outer_radius,
            } => {
                let d = (p - *center).norm_sq();
                d >= inner_radius * inner_radius && d <= outer_radius * outer_radius
            }
            Shape::Polygon { vertices } => polygon_contains(vertices, p),
            Shape::Background => domain.contains_closed(p),
        }
    }

    pub fn contains_open(&self, p: Vec2, domain: &ConvexDomain) -> bool {
        match self {
            Shape::Circle { center, radius } => (p - *center).norm_sq() < radius * radius,
            Shape::Annulus {
                center,
                inner_radius,
                outer_radius,
            } => {
                let d = (p - *center).norm_sq();
                d > inner_radius * inner_radius && d < outer_radius * outer_radius
            }
            Shape::Polygon { vertices } => polygon_contains(vertices, p),
            Shape::Background => domain.contains_open(p),
        }
    }

    /// Hit parameters of the backward ray `x - t*dir` against the shape
    /// boundary, pushed onto `out` as `(t, tangential)`.
    fn boundary_hits(&self, x: Vec2, dir: Vec2, out: &mut Vec<(f64, bool)>) {
        match self {
            Shape::Circle { center, radius } => circle_hits(x, dir, *center, *radius, out),
            Shape::Annulus {
                center,
                inner_radius,
                outer_radius,
            } => {
                circle_hits(x, dir, *center, *inner_radius, out);
                circle_hits(x, dir, *center, *outer_radius, out);
            }
            Shape::Polygon { vertices } => {
                let n = vertices.len();
                for i in 0..n {
                    segment_hit(x, dir, vertices[i], vertices[(i + 1) % n], out);
                }
            }
            Shape::Background => {}
        }
    }
}

/// Even-odd point-in-polygon test; boundary points are classified by the
/// crossing count and need no special treatment here.
fn polygon_contains(vertices: &[Vec2], p: Vec2) -> bool {
    let mut inside = false;
    let n = vertices.len();
    let mut j = n - 1;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[j];
        if (a.y > p.y) != (b.y > p.y) {
            let slope_x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < slope_x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Intersections of the backward ray with a circle; a discriminant within
/// `TANGENT_TOL` of zero is a grazing contact reported as tangential.
fn circle_hits(x: Vec2, dir: Vec2, center: Vec2, radius: f64, out: &mut Vec<(f64, bool)>) {
    let w = x - center;
    let b = w.dot(dir);
    let disc = b * b - (w.norm_sq() - radius * radius);
    if disc > TANGENT_TOL {
        let root = disc.sqrt();
        out.push((b - root, false));
        out.push((b + root, false));
    } else if disc >= -TANGENT_TOL {
        out.push((b, true));
    }
}

/// Intersection of the backward ray with a polygon edge.
fn segment_hit(x: Vec2, dir: Vec2, a: Vec2, b: Vec2, out: &mut Vec<(f64, bool)>) {
    let e = b - a;
    let det = dir.cross(e);
    if det.abs() < 1e-14 {
        return;
    }
    let w = x - a;
    // w = t*dir + u*e, so crossing with e isolates t and crossing with dir isolates u.
    let t = w.cross(e) / det;
    let u = dir.cross(w) / det;
    if (-1e-12..=1.0 + 1e-12).contains(&u) {
        out.push((t, false));
    }
}

/// One piece of the partition. Ids come from the scene description and are
/// echoed in crossing records and audit output.
#[derive(Clone, Debug, PartialEq)]
pub struct Piece {
    pub id: u32,
    pub shape: Shape,
}

/// Membership with declaration-order priority: the first piece whose closure
/// contains the point wins.
pub fn piece_index_at(pieces: &[Piece], domain: &ConvexDomain, p: Vec2) -> Option<usize> {
    pieces
        .iter()
        .position(|piece| piece.shape.contains_closed(p, domain))
}

/// A crossing of the piece partition along a backward ray. `before` is the
/// piece on the near side (smaller parameter, closer to the ray origin),
/// `after` the piece beyond the crossing; `None` means vacuum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crossing {
    pub t: f64,
    pub tangential: bool,
    pub before: Option<u32>,
    pub after: Option<u32>,
}

/// Ordered partition crossings of the backward ray from `x` along `dir`,
/// restricted to the chord inside the domain.
pub fn piece_crossings(
    domain: &ConvexDomain,
    pieces: &[Piece],
    x: Vec2,
    dir: Vec2,
) -> Result<Vec<Crossing>, GeometryError> {
    let times = domain.chord_exit_times(x, dir)?;
    let mut hits = Vec::new();
    for piece in pieces {
        piece.shape.boundary_hits(x, dir, &mut hits);
    }
    hits.retain(|&(t, _)| t > MERGE_TOL && t < times.backward - MERGE_TOL);
    hits.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut merged: Vec<(f64, bool)> = Vec::with_capacity(hits.len());
    for (t, tangential) in hits {
        match merged.last_mut() {
            Some(last) if (t - last.0).abs() <= MERGE_TOL => last.1 = last.1 && tangential,
            _ => merged.push((t, tangential)),
        }
    }

    let id_at = |t: f64| -> Option<u32> {
        piece_index_at(pieces, domain, x - dir * t).map(|i| pieces[i].id)
    };
    let mut crossings = Vec::with_capacity(merged.len());
    for (j, &(t, tangential)) in merged.iter().enumerate() {
        let prev = if j == 0 { 0.0 } else { merged[j - 1].0 };
        let next = if j + 1 < merged.len() {
            merged[j + 1].0
        } else {
            times.backward
        };
        crossings.push(Crossing {
            t,
            tangential,
            before: id_at(0.5 * (prev + t)),
            after: id_at(0.5 * (t + next)),
        });
    }
    Ok(crossings)
}

/// Fast-path breakpoints for integration: non-tangential crossing parameters
/// in `(0, t_max)`, sorted and deduplicated, appended to `out`.
pub fn crossing_breakpoints(
    pieces: &[Piece],
    x: Vec2,
    dir: Vec2,
    t_max: f64,
    out: &mut Vec<f64>,
) {
    let start = out.len();
    let mut hits = Vec::new();
    for piece in pieces {
        piece.shape.boundary_hits(x, dir, &mut hits);
    }
    for (t, tangential) in hits {
        if !tangential && t > MERGE_TOL && t < t_max - MERGE_TOL {
            out.push(t);
        }
    }
    out[start..].sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() <= MERGE_TOL);
}

/// A straight portion of an interior interface, the only geometry that can
/// shed discontinuities along a fixed direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlatSegment {
    pub piece_id: u32,
    pub start: Vec2,
    pub end: Vec2,
    /// Unit vector along the segment; the opposite orientation is implied.
    pub direction: Vec2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvexityAudit {
    /// True when no interior interface contains a straight portion, so every
    /// backward ray meets interfaces in uniformly finitely many points.
    pub satisfied: bool,
    pub flat_segments: Vec<FlatSegment>,
    /// Largest crossing count over the sampled chord budget.
    pub max_crossings: usize,
}

/// Enumerate flat interface segments and probe chords for the worst crossing
/// count. `ray_budget` chords are sampled on a deterministic lattice.
pub fn audit_convexity(
    domain: &ConvexDomain,
    pieces: &[Piece],
    ray_budget: usize,
) -> ConvexityAudit {
    let flat_segments = flat_segments(pieces);
    let side = (ray_budget as f64).sqrt().ceil().max(1.0) as usize;
    let mut max_crossings = 0usize;
    let mut scratch = Vec::new();
    for i in 0..side {
        let alpha = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / side as f64;
        let entry = domain.boundary_point(alpha);
        for j in 0..side {
            let beta = std::f64::consts::PI * (j as f64 + 0.5) / side as f64;
            // Rotate the inward normal across the half-circle of entering rays.
            let dir = (-domain.outward_normal(entry)).rotated(beta - 0.5 * std::f64::consts::PI);
            let Ok(times) = domain.chord_exit_times(entry, dir) else {
                continue;
            };
            let mid = entry + dir * (0.5 * times.forward);
            scratch.clear();
            crossing_breakpoints(pieces, mid, dir, 0.5 * times.forward, &mut scratch);
            let backward_half = scratch.len();
            scratch.clear();
            crossing_breakpoints(pieces, mid, -dir, 0.5 * times.forward, &mut scratch);
            max_crossings = max_crossings.max(backward_half + scratch.len());
        }
    }
    ConvexityAudit {
        satisfied: flat_segments.is_empty(),
        flat_segments,
        max_crossings,
    }
}

/// All polygon edges of the partition as directed flat segments.
pub fn flat_segments(pieces: &[Piece]) -> Vec<FlatSegment> {
    let mut out = Vec::new();
    for piece in pieces {
        if let Shape::Polygon { vertices } = &piece.shape {
            let n = vertices.len();
            for i in 0..n {
                let start = vertices[i];
                let end = vertices[(i + 1) % n];
                if let Some(direction) = (end - start).normalized() {
                    out.push(FlatSegment {
                        piece_id: piece.id,
                        start,
                        end,
                        direction,
                    });
                }
            }
        }
    }
    out
}
