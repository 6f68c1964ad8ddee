//! Piecewise-constant media: absorption/scattering coefficients per piece,
//! phase functions on S¹ and S², validated scene construction, the JSON scene
//! format, and backward-chord segmentation used by every path integral.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::geometry::{
    crossing_breakpoints, piece_index_at, ConvexDomain, Piece, Shape, Vec2, MERGE_TOL,
};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("cannot read scene file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scene: {field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> SceneError {
    SceneError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Absorption/scattering pair at a point. The attenuation coefficient is
/// always the freshly formed sum, so equal pieces can never drift apart.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MuSample {
    pub mu_a: f64,
    pub mu_s: f64,
}

impl MuSample {
    pub const VACUUM: MuSample = MuSample {
        mu_a: 0.0,
        mu_s: 0.0,
    };

    pub const fn new(mu_a: f64, mu_s: f64) -> Self {
        MuSample { mu_a, mu_s }
    }

    pub fn mu_t(self) -> f64 {
        self.mu_a + self.mu_s
    }
}

/// Scattering kernel: isotropic or Henyey-Greenstein with asymmetry |g| < 1,
/// normalized as a density over the unit sphere of the stated dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseFunction {
    g: f64,
    dimension: u8,
}

impl PhaseFunction {
    pub fn isotropic(dimension: u8) -> Result<Self, SceneError> {
        Self::henyey_greenstein(0.0, dimension)
    }

    pub fn henyey_greenstein(g: f64, dimension: u8) -> Result<Self, SceneError> {
        if !(dimension == 2 || dimension == 3) {
            return Err(invalid(
                "phase.dimension",
                format!("must be 2 or 3, got {dimension}"),
            ));
        }
        if !g.is_finite() || g.abs() >= 1.0 {
            return Err(invalid("phase.g", format!("must satisfy |g| < 1, got {g}")));
        }
        Ok(PhaseFunction { g, dimension })
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn dimension(&self) -> u8 {
        self.dimension
    }

    pub fn is_isotropic(&self) -> bool {
        self.g == 0.0
    }

    /// Same asymmetry on the sphere of another dimension.
    pub fn with_dimension(self, dimension: u8) -> Result<Self, SceneError> {
        Self::henyey_greenstein(self.g, dimension)
    }

    /// Density at scattering angle cosine `cos_theta`.
    pub fn eval(&self, cos_theta: f64) -> f64 {
        let c = cos_theta.clamp(-1.0, 1.0);
        let g = self.g;
        let denom = 1.0 + g * g - 2.0 * g * c;
        match self.dimension {
            2 => (1.0 - g * g) / (2.0 * std::f64::consts::PI * denom),
            _ => (1.0 - g * g) / (4.0 * std::f64::consts::PI * denom * denom.sqrt()),
        }
    }

    /// Numerical check of the unit-mass property: integrates the density over
    /// the sphere by adaptive Simpson quadrature to the requested tolerance.
    pub fn quadrature_normalization(&self, tol: f64) -> f64 {
        match self.dimension {
            2 => adaptive_simpson(&|theta: f64| self.eval(theta.cos()), 0.0, 2.0 * std::f64::consts::PI, tol),
            _ => adaptive_simpson(
                &|mu: f64| 2.0 * std::f64::consts::PI * self.eval(mu),
                -1.0,
                1.0,
                tol,
            ),
        }
    }
}

pub(crate) fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(fa, fm, fb, b - a);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// One member of the piece partition with its coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePiece {
    pub id: u32,
    pub shape: Shape,
    pub mu: MuSample,
}

/// Validated planar scene: disk domain, disjoint piece partition, phase
/// function on S¹. Immutable after construction; all queries are pure.
#[derive(Clone, Debug)]
pub struct Scene {
    domain: ConvexDomain,
    pieces: Vec<ScenePiece>,
    geo: Vec<Piece>,
    phase: PhaseFunction,
}

impl Scene {
    pub fn new(
        domain: ConvexDomain,
        pieces: Vec<ScenePiece>,
        phase: PhaseFunction,
    ) -> Result<Self, SceneError> {
        if phase.dimension() != 2 {
            return Err(invalid(
                "phase.dimension",
                "planar scenes need a phase function on S¹ (dimension 2)",
            ));
        }
        for (i, piece) in pieces.iter().enumerate() {
            validate_mu(i, piece.mu)?;
            validate_shape(i, &piece.shape)?;
            if pieces[..i].iter().any(|other| other.id == piece.id) {
                return Err(invalid(
                    format!("pieces[{i}].id"),
                    format!("duplicate piece id {}", piece.id),
                ));
            }
            if matches!(piece.shape, Shape::Background) && i + 1 != pieces.len() {
                return Err(invalid(
                    format!("pieces[{i}].shape"),
                    "a background piece must come last; later pieces would be unreachable",
                ));
            }
        }
        for i in 0..pieces.len() {
            for j in i + 1..pieces.len() {
                let (a, b) = (&pieces[i], &pieces[j]);
                if matches!(a.shape, Shape::Background) || matches!(b.shape, Shape::Background) {
                    continue;
                }
                if shapes_overlap(&a.shape, &b.shape, &domain) {
                    return Err(invalid(
                        format!("pieces[{j}].shape"),
                        format!("overlaps piece id {}", a.id),
                    ));
                }
            }
        }
        let geo = pieces
            .iter()
            .map(|p| Piece {
                id: p.id,
                shape: p.shape.clone(),
            })
            .collect();
        Ok(Scene {
            domain,
            pieces,
            geo,
            phase,
        })
    }

    /// Empty medium over the given domain.
    pub fn vacuum(domain: ConvexDomain) -> Self {
        Scene::new(domain, Vec::new(), PhaseFunction::isotropic(2).unwrap()).unwrap()
    }

    pub fn domain(&self) -> &ConvexDomain {
        &self.domain
    }

    pub fn phase(&self) -> &PhaseFunction {
        &self.phase
    }

    pub fn pieces(&self) -> &[ScenePiece] {
        &self.pieces
    }

    pub fn geometry_pieces(&self) -> &[Piece] {
        &self.geo
    }

    /// Coefficients at a point; zero outside the domain and outside every piece.
    pub fn mu_at(&self, p: Vec2) -> MuSample {
        if !self.domain.contains_closed(p) {
            return MuSample::VACUUM;
        }
        match piece_index_at(&self.geo, &self.domain, p) {
            Some(i) => self.pieces[i].mu,
            None => MuSample::VACUUM,
        }
    }

    pub fn sup_mu_t(&self) -> f64 {
        self.pieces
            .iter()
            .map(|p| p.mu.mu_t())
            .fold(0.0, f64::max)
    }

    pub fn has_scattering(&self) -> bool {
        self.pieces.iter().any(|p| p.mu.mu_s > 0.0)
    }

    /// Cut the backward ray `x - t·dir`, `t ∈ [0, min(t_max, exit)]`, into
    /// piece-constant segments. Results land in `scratch.segments`.
    pub fn backward_segments(&self, x: Vec2, dir: Vec2, t_max: f64, scratch: &mut ChordScratch) {
        scratch.hits.clear();
        scratch.segments.clear();
        let t_end = match self.domain.chord_exit_times(x, dir) {
            Ok(times) => times.backward.min(t_max),
            // Starting outside the closed domain: the backward ray may still
            // cross it, but no caller does that; contribute nothing.
            Err(_) => return,
        };
        if t_end <= MERGE_TOL {
            return;
        }
        crossing_breakpoints(&self.geo, x, dir, t_end, &mut scratch.hits);
        let mut t0 = 0.0;
        for k in 0..=scratch.hits.len() {
            let t1 = if k < scratch.hits.len() {
                scratch.hits[k]
            } else {
                t_end
            };
            if t1 > t0 {
                let mid = x - dir * (0.5 * (t0 + t1));
                scratch.segments.push(RaySegment {
                    t0,
                    t1,
                    mu: self.mu_at(mid),
                });
            }
            t0 = t1;
        }
    }
}

/// A maximal piece-constant interval of a backward ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySegment {
    pub t0: f64,
    pub t1: f64,
    pub mu: MuSample,
}

impl RaySegment {
    pub fn len(&self) -> f64 {
        self.t1 - self.t0
    }
}

/// Reusable buffers for segment queries in hot loops.
#[derive(Clone, Debug, Default)]
pub struct ChordScratch {
    hits: Vec<f64>,
    pub segments: Vec<RaySegment>,
}

fn validate_mu(i: usize, mu: MuSample) -> Result<(), SceneError> {
    if !mu.mu_a.is_finite() || mu.mu_a < 0.0 {
        return Err(invalid(
            format!("pieces[{i}].mu_a"),
            format!("must be finite and nonnegative, got {}", mu.mu_a),
        ));
    }
    if !mu.mu_s.is_finite() || mu.mu_s < 0.0 {
        return Err(invalid(
            format!("pieces[{i}].mu_s"),
            format!("must be finite and nonnegative, got {}", mu.mu_s),
        ));
    }
    Ok(())
}

/// Shapes may extend past the domain boundary; the piece is the intersection
/// of the shape with the domain, so only intrinsic shape data is validated.
fn validate_shape(i: usize, shape: &Shape) -> Result<(), SceneError> {
    let finite = |v: Vec2| v.x.is_finite() && v.y.is_finite();
    match shape {
        Shape::Circle { center, radius } => {
            if !finite(*center) {
                return Err(invalid(
                    format!("pieces[{i}].shape.center"),
                    "coordinates must be finite",
                ));
            }
            if !radius.is_finite() || *radius <= 0.0 {
                return Err(invalid(
                    format!("pieces[{i}].shape.radius"),
                    format!("must be positive and finite, got {radius}"),
                ));
            }
        }
        Shape::Annulus {
            center,
            inner_radius,
            outer_radius,
        } => {
            if !finite(*center) {
                return Err(invalid(
                    format!("pieces[{i}].shape.center"),
                    "coordinates must be finite",
                ));
            }
            if !inner_radius.is_finite() || *inner_radius <= 0.0 {
                return Err(invalid(
                    format!("pieces[{i}].shape.inner_radius"),
                    format!("must be positive and finite, got {inner_radius}"),
                ));
            }
            if !outer_radius.is_finite() || *outer_radius <= *inner_radius {
                return Err(invalid(
                    format!("pieces[{i}].shape.outer_radius"),
                    format!("must exceed inner_radius {inner_radius}, got {outer_radius}"),
                ));
            }
        }
        Shape::Polygon { vertices } => {
            if vertices.len() < 3 {
                return Err(invalid(
                    format!("pieces[{i}].shape.vertices"),
                    format!("a polygon needs at least 3 vertices, got {}", vertices.len()),
                ));
            }
            for (k, v) in vertices.iter().enumerate() {
                if !finite(*v) {
                    return Err(invalid(
                        format!("pieces[{i}].shape.vertices[{k}]"),
                        "coordinates must be finite",
                    ));
                }
            }
        }
        Shape::Background => {}
    }
    Ok(())
}

/// Interior overlap test inside the domain, probing a fixed lattice over the
/// shared bounding box. Pieces are shapes clipped by the domain, so an overlap
/// that lies entirely outside the domain does not count.
fn shapes_overlap(a: &Shape, b: &Shape, domain: &ConvexDomain) -> bool {
    let Some((lo, hi)) = intersect_bounds(shape_bounds(a, domain), shape_bounds(b, domain)) else {
        return false;
    };
    const N: usize = 256;
    for iy in 0..N {
        let y = lo.y + (hi.y - lo.y) * (iy as f64 + 0.5) / N as f64;
        for ix in 0..N {
            let x = lo.x + (hi.x - lo.x) * (ix as f64 + 0.5) / N as f64;
            let p = Vec2::new(x, y);
            if domain.contains_open(p)
                && a.contains_open(p, domain)
                && b.contains_open(p, domain)
            {
                return true;
            }
        }
    }
    false
}

fn shape_bounds(shape: &Shape, domain: &ConvexDomain) -> (Vec2, Vec2) {
    match shape {
        Shape::Circle { center, radius } => (
            Vec2::new(center.x - radius, center.y - radius),
            Vec2::new(center.x + radius, center.y + radius),
        ),
        Shape::Annulus {
            center,
            outer_radius,
            ..
        } => (
            Vec2::new(center.x - outer_radius, center.y - outer_radius),
            Vec2::new(center.x + outer_radius, center.y + outer_radius),
        ),
        Shape::Polygon { vertices } => {
            let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
            let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
            for v in vertices {
                lo = Vec2::new(lo.x.min(v.x), lo.y.min(v.y));
                hi = Vec2::new(hi.x.max(v.x), hi.y.max(v.y));
            }
            (lo, hi)
        }
        Shape::Background => {
            let r = domain.radius();
            (Vec2::new(-r, -r), Vec2::new(r, r))
        }
    }
}

fn intersect_bounds(a: (Vec2, Vec2), b: (Vec2, Vec2)) -> Option<(Vec2, Vec2)> {
    let lo = Vec2::new(a.0.x.max(b.0.x), a.0.y.max(b.0.y));
    let hi = Vec2::new(a.1.x.min(b.1.x), a.1.y.min(b.1.y));
    (lo.x < hi.x && lo.y < hi.y).then_some((lo, hi))
}

/// Spherically symmetric 3D piece shapes; slicing turns them into disks and
/// annuli.
#[derive(Clone, Debug, PartialEq)]
pub enum BallShape {
    Ball { center: [f64; 3], radius: f64 },
    Shell {
        center: [f64; 3],
        inner_radius: f64,
        outer_radius: f64,
    },
    Background,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BallPiece {
    pub id: u32,
    pub shape: BallShape,
    pub mu: MuSample,
}

/// Piecewise-constant medium on a ball, awaiting slice reduction.
#[derive(Clone, Debug)]
pub struct BallScene {
    radius: f64,
    pieces: Vec<BallPiece>,
    phase: PhaseFunction,
}

impl BallScene {
    pub fn new(
        radius: f64,
        pieces: Vec<BallPiece>,
        phase: PhaseFunction,
    ) -> Result<Self, SceneError> {
        if !radius.is_finite() || radius <= 0.0 {
            return Err(invalid(
                "domain.radius",
                format!("must be positive and finite, got {radius}"),
            ));
        }
        if phase.dimension() != 3 {
            return Err(invalid(
                "phase.dimension",
                "ball scenes need a phase function on S² (dimension 3)",
            ));
        }
        let finite3 = |c: &[f64; 3]| c.iter().all(|v| v.is_finite());
        for (i, piece) in pieces.iter().enumerate() {
            validate_mu(i, piece.mu)?;
            if pieces[..i].iter().any(|other| other.id == piece.id) {
                return Err(invalid(
                    format!("pieces[{i}].id"),
                    format!("duplicate piece id {}", piece.id),
                ));
            }
            match &piece.shape {
                BallShape::Ball { center, radius: r } => {
                    if !finite3(center) {
                        return Err(invalid(
                            format!("pieces[{i}].shape.center"),
                            "coordinates must be finite",
                        ));
                    }
                    if !r.is_finite() || *r <= 0.0 {
                        return Err(invalid(
                            format!("pieces[{i}].shape.radius"),
                            format!("must be positive and finite, got {r}"),
                        ));
                    }
                }
                BallShape::Shell {
                    center,
                    inner_radius,
                    outer_radius,
                } => {
                    if !finite3(center) {
                        return Err(invalid(
                            format!("pieces[{i}].shape.center"),
                            "coordinates must be finite",
                        ));
                    }
                    if !inner_radius.is_finite() || *inner_radius <= 0.0 {
                        return Err(invalid(
                            format!("pieces[{i}].shape.inner_radius"),
                            format!("must be positive and finite, got {inner_radius}"),
                        ));
                    }
                    if !outer_radius.is_finite() || *outer_radius <= *inner_radius {
                        return Err(invalid(
                            format!("pieces[{i}].shape.outer_radius"),
                            format!("must exceed inner_radius {inner_radius}, got {outer_radius}"),
                        ));
                    }
                }
                BallShape::Background => {
                    if i + 1 != pieces.len() {
                        return Err(invalid(
                            format!("pieces[{i}].shape"),
                            "a background piece must come last; later pieces would be unreachable",
                        ));
                    }
                }
            }
        }
        for i in 0..pieces.len() {
            for j in i + 1..pieces.len() {
                if ball_shapes_overlap(&pieces[i].shape, &pieces[j].shape) {
                    return Err(invalid(
                        format!("pieces[{j}].shape"),
                        format!("overlaps piece id {}", pieces[i].id),
                    ));
                }
            }
        }
        Ok(BallScene {
            radius,
            pieces,
            phase,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn pieces(&self) -> &[BallPiece] {
        &self.pieces
    }

    pub fn phase(&self) -> &PhaseFunction {
        &self.phase
    }
}

/// Interior overlap of two spherically symmetric shapes. Two radial bands
/// (ia, oa) and (ib, ob) with centers `d` apart intersect exactly when the
/// shapes are closer than their outer radii allow and neither fits inside the
/// other's hole; the distances from one center realized inside the other
/// shape always form a single interval, which makes this test exact.
fn ball_shapes_overlap(a: &BallShape, b: &BallShape) -> bool {
    let radial = |s: &BallShape| match s {
        BallShape::Ball { center, radius } => Some((*center, 0.0, *radius)),
        BallShape::Shell {
            center,
            inner_radius,
            outer_radius,
        } => Some((*center, *inner_radius, *outer_radius)),
        BallShape::Background => None,
    };
    let (Some((ca, ia, oa)), Some((cb, ib, ob))) = (radial(a), radial(b)) else {
        return false;
    };
    let d = {
        let dx = ca[0] - cb[0];
        let dy = ca[1] - cb[1];
        let dz = ca[2] - cb[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    };
    d < oa + ob && d + ob > ia && d + oa > ib
}

/// A parsed scene file: planar scenes run directly, ball scenes go through
/// slice reduction first.
#[derive(Clone, Debug)]
pub enum LoadedScene {
    Planar(Scene),
    Ball(BallScene),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    domain: RawDomain,
    #[serde(default)]
    pieces: Vec<RawPiece>,
    #[serde(default)]
    phase: Option<RawPhase>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDomain {
    kind: String,
    #[serde(default = "default_radius")]
    radius: f64,
}

fn default_radius() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPiece {
    id: u32,
    shape: RawShape,
    mu_a: f64,
    mu_s: f64,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum RawShape {
    Circle {
        center: [f64; 2],
        radius: f64,
    },
    Annulus {
        center: [f64; 2],
        inner_radius: f64,
        outer_radius: f64,
    },
    Polygon {
        vertices: Vec<[f64; 2]>,
    },
    Background,
    Ball {
        center: [f64; 3],
        radius: f64,
    },
    Shell {
        center: [f64; 3],
        inner_radius: f64,
        outer_radius: f64,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPhase {
    kind: String,
    #[serde(default)]
    g: Option<f64>,
    #[serde(default)]
    dimension: Option<u8>,
}

/// Load and validate a scene file.
pub fn load_scene(path: impl AsRef<Path>) -> Result<LoadedScene, SceneError> {
    parse_scene(&fs::read_to_string(path)?)
}

/// Parse and validate scene JSON.
pub fn parse_scene(text: &str) -> Result<LoadedScene, SceneError> {
    let raw: RawScene = serde_json::from_str(text)?;
    match raw.domain.kind.as_str() {
        "disk" => {
            let domain = ConvexDomain::disk(raw.domain.radius).map_err(|_| {
                invalid(
                    "domain.radius",
                    format!("must be positive and finite, got {}", raw.domain.radius),
                )
            })?;
            let phase = build_phase(raw.phase, 2)?;
            let pieces = raw
                .pieces
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    Ok(ScenePiece {
                        id: p.id,
                        shape: planar_shape(i, p.shape)?,
                        mu: MuSample::new(p.mu_a, p.mu_s),
                    })
                })
                .collect::<Result<Vec<_>, SceneError>>()?;
            Ok(LoadedScene::Planar(Scene::new(domain, pieces, phase)?))
        }
        "ball" => {
            let phase = build_phase(raw.phase, 3)?;
            let pieces = raw
                .pieces
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    Ok(BallPiece {
                        id: p.id,
                        shape: ball_shape(i, p.shape)?,
                        mu: MuSample::new(p.mu_a, p.mu_s),
                    })
                })
                .collect::<Result<Vec<_>, SceneError>>()?;
            Ok(LoadedScene::Ball(BallScene::new(
                raw.domain.radius,
                pieces,
                phase,
            )?))
        }
        other => Err(invalid(
            "domain.kind",
            format!("must be \"disk\" or \"ball\", got \"{other}\""),
        )),
    }
}

fn build_phase(raw: Option<RawPhase>, dimension: u8) -> Result<PhaseFunction, SceneError> {
    let Some(raw) = raw else {
        return PhaseFunction::isotropic(dimension);
    };
    let dim = raw.dimension.unwrap_or(dimension);
    if dim != dimension {
        return Err(invalid(
            "phase.dimension",
            format!("must be {dimension} for this domain kind, got {dim}"),
        ));
    }
    match raw.kind.as_str() {
        "isotropic" => {
            if let Some(g) = raw.g {
                if g != 0.0 {
                    return Err(invalid(
                        "phase.g",
                        format!("isotropic phase takes no asymmetry, got {g}"),
                    ));
                }
            }
            PhaseFunction::isotropic(dimension)
        }
        "henyey-greenstein" => {
            let g = raw
                .g
                .ok_or_else(|| invalid("phase.g", "henyey-greenstein needs an asymmetry g"))?;
            PhaseFunction::henyey_greenstein(g, dimension)
        }
        other => Err(invalid(
            "phase.kind",
            format!("must be \"isotropic\" or \"henyey-greenstein\", got \"{other}\""),
        )),
    }
}

fn planar_shape(i: usize, raw: RawShape) -> Result<Shape, SceneError> {
    match raw {
        RawShape::Circle { center, radius } => Ok(Shape::Circle {
            center: Vec2::new(center[0], center[1]),
            radius,
        }),
        RawShape::Annulus {
            center,
            inner_radius,
            outer_radius,
        } => Ok(Shape::Annulus {
            center: Vec2::new(center[0], center[1]),
            inner_radius,
            outer_radius,
        }),
        RawShape::Polygon { vertices } => Ok(Shape::Polygon {
            vertices: vertices.into_iter().map(|v| Vec2::new(v[0], v[1])).collect(),
        }),
        RawShape::Background => Ok(Shape::Background),
        RawShape::Ball { .. } | RawShape::Shell { .. } => Err(invalid(
            format!("pieces[{i}].shape.kind"),
            "3D shapes need a ball domain",
        )),
    }
}

fn ball_shape(i: usize, raw: RawShape) -> Result<BallShape, SceneError> {
    match raw {
        RawShape::Ball { center, radius } => Ok(BallShape::Ball { center, radius }),
        RawShape::Shell {
            center,
            inner_radius,
            outer_radius,
        } => Ok(BallShape::Shell {
            center,
            inner_radius,
            outer_radius,
        }),
        RawShape::Background => Ok(BallShape::Background),
        RawShape::Circle { .. } | RawShape::Annulus { .. } | RawShape::Polygon { .. } => {
            Err(invalid(
                format!("pieces[{i}].shape.kind"),
                "planar shapes need a disk domain",
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phantom_slice() -> Scene {
        let domain = ConvexDomain::ball_slice(0.75f64.sqrt()).unwrap();
        let pieces = vec![
            ScenePiece {
                id: 1,
                shape: Shape::Annulus {
                    center: Vec2::new(0.43, 0.0),
                    inner_radius: 0.031f64.sqrt(),
                    outer_radius: 0.13f64.sqrt(),
                },
                mu: MuSample::new(0.3, 0.3),
            },
            ScenePiece {
                id: 2,
                shape: Shape::Circle {
                    center: Vec2::new(-0.38, 0.38),
                    radius: 0.047f64.sqrt(),
                },
                mu: MuSample::new(0.2, 0.3),
            },
            ScenePiece {
                id: 3,
                shape: Shape::Background,
                mu: MuSample::new(0.1, 0.3),
            },
        ];
        Scene::new(
            domain,
            pieces,
            PhaseFunction::henyey_greenstein(0.9, 2).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn phantom_lookup_values() {
        let scene = phantom_slice();
        // Ring interior, inclusion, background, and the reset rule outside.
        assert!((scene.mu_at(Vec2::new(0.63, 0.0)).mu_t() - 0.6).abs() < 1e-15);
        assert!((scene.mu_at(Vec2::new(-0.38, 0.38)).mu_t() - 0.5).abs() < 1e-15);
        assert!((scene.mu_at(Vec2::new(0.0, 0.0)).mu_t() - 0.4).abs() < 1e-15);
        assert_eq!(scene.mu_at(Vec2::new(0.9, 0.0)), MuSample::VACUUM);
        assert!((scene.sup_mu_t() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn lookup_constant_within_piece() {
        let scene = phantom_slice();
        let a = scene.mu_at(Vec2::new(0.43, 0.25));
        let b = scene.mu_at(Vec2::new(0.63, 0.0));
        assert_eq!(a, b);
    }

    #[test]
    fn isotropic_phase_values() {
        let p2 = PhaseFunction::isotropic(2).unwrap();
        let p3 = PhaseFunction::isotropic(3).unwrap();
        for c in [-1.0, -0.3, 0.0, 0.7, 1.0] {
            assert!((p2.eval(c) - 0.5 / std::f64::consts::PI).abs() < 1e-16);
            assert!((p3.eval(c) - 0.25 / std::f64::consts::PI).abs() < 1e-16);
        }
    }

    #[test]
    fn hg_forward_peak_and_normalization() {
        let p = PhaseFunction::henyey_greenstein(0.9, 2).unwrap();
        // Forward peak of the planar kernel: (1-g²)/(2π(1-g)²).
        let expect = 0.19 / (2.0 * std::f64::consts::PI * 0.01);
        assert!((p.eval(1.0) - expect).abs() < 1e-12 * expect);
        assert!((p.quadrature_normalization(1e-12) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn phase_normalization_battery() {
        for dim in [2u8, 3u8] {
            for g in [0.0, 0.5, 0.9] {
                let p = PhaseFunction::henyey_greenstein(g, dim).unwrap();
                let mass = p.quadrature_normalization(1e-12);
                assert!(
                    (mass - 1.0).abs() <= 1e-8,
                    "dim {dim} g {g}: mass {mass}"
                );
            }
        }
    }

    #[test]
    fn asymmetry_bound_enforced() {
        assert!(matches!(
            PhaseFunction::henyey_greenstein(1.0, 2),
            Err(SceneError::Invalid { ref field, .. }) if field == "phase.g"
        ));
        assert!(PhaseFunction::henyey_greenstein(-0.999, 3).is_ok());
    }

    #[test]
    fn segments_cover_chord_exactly() {
        let scene = phantom_slice();
        let mut scratch = ChordScratch::default();
        let x = Vec2::new(0.2, 0.38);
        let dir = Vec2::new(1.0, 0.0);
        let t_end = scene.domain().chord_exit_times(x, dir).unwrap().backward;
        scene.backward_segments(x, dir, f64::INFINITY, &mut scratch);
        let total: f64 = scratch.segments.iter().map(|s| s.len()).sum();
        assert!((total - t_end).abs() < 1e-12);
        assert!(scratch
            .segments
            .windows(2)
            .all(|w| (w[0].t1 - w[1].t0).abs() < 1e-15));
    }

    #[test]
    fn segment_integral_through_inclusion() {
        let scene = phantom_slice();
        // Horizontal chord at the inclusion height, entering from the right.
        let y = 0.38f64;
        let half = (0.75 - y * y).sqrt();
        let x = Vec2::new(half, y);
        let dir = Vec2::new(1.0, 0.0);
        let mut scratch = ChordScratch::default();
        scene.backward_segments(x, dir, f64::INFINITY, &mut scratch);
        let path: f64 = scratch
            .segments
            .iter()
            .map(|s| s.mu.mu_t() * s.len())
            .sum();
        let l2 = 2.0 * 0.047f64.sqrt();
        let expect = 0.4 * (2.0 * half - l2) + 0.5 * l2;
        assert!((path - expect).abs() < 1e-12, "path {path} expect {expect}");
    }

    #[test]
    fn segments_clamp_to_requested_length() {
        let scene = phantom_slice();
        let mut scratch = ChordScratch::default();
        scene.backward_segments(Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), 0.25, &mut scratch);
        let total: f64 = scratch.segments.iter().map(|s| s.len()).sum();
        assert!((total - 0.25).abs() < 1e-15);
    }

    #[test]
    fn loads_phantom_file() {
        let text = r#"{
            "domain": {"kind": "disk", "radius": 0.8660254037844386},
            "pieces": [
                {"id": 1, "shape": {"kind": "annulus", "center": [0.43, 0.0],
                 "inner_radius": 0.1760681686165901, "outer_radius": 0.36055512754639896},
                 "mu_a": 0.3, "mu_s": 0.3},
                {"id": 2, "shape": {"kind": "circle", "center": [-0.38, 0.38],
                 "radius": 0.21679483388678799}, "mu_a": 0.2, "mu_s": 0.3},
                {"id": 3, "shape": {"kind": "background"}, "mu_a": 0.1, "mu_s": 0.3}
            ],
            "phase": {"kind": "henyey-greenstein", "g": 0.9, "dimension": 2}
        }"#;
        let LoadedScene::Planar(scene) = parse_scene(text).unwrap() else {
            panic!("expected planar scene");
        };
        assert_eq!(scene.pieces().len(), 3);
        assert!((scene.mu_at(Vec2::new(0.0, 0.0)).mu_t() - 0.4).abs() < 1e-15);
        assert!((scene.phase().g() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn empty_pieces_is_vacuum() {
        let LoadedScene::Planar(scene) =
            parse_scene(r#"{"domain": {"kind": "disk"}}"#).unwrap()
        else {
            panic!("expected planar scene");
        };
        assert_eq!(scene.mu_at(Vec2::new(0.0, 0.0)), MuSample::VACUUM);
        assert_eq!(scene.sup_mu_t(), 0.0);
    }

    #[test]
    fn negative_mu_names_field() {
        let text = r#"{
            "domain": {"kind": "disk"},
            "pieces": [{"id": 1, "shape": {"kind": "circle", "center": [0, 0],
              "radius": 0.5}, "mu_a": -0.1, "mu_s": 0.3}]
        }"#;
        match parse_scene(text) {
            Err(SceneError::Invalid { field, .. }) => assert_eq!(field, "pieces[0].mu_a"),
            other => panic!("expected invalid mu_a, got {other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_rejected() {
        let err = parse_scene(r#"{"domain": {"kind": "disk", "colour": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn overlapping_circles_rejected() {
        let text = r#"{
            "domain": {"kind": "disk"},
            "pieces": [
                {"id": 1, "shape": {"kind": "circle", "center": [0.1, 0], "radius": 0.3},
                 "mu_a": 0.1, "mu_s": 0.0},
                {"id": 2, "shape": {"kind": "circle", "center": [-0.1, 0], "radius": 0.3},
                 "mu_a": 0.2, "mu_s": 0.0}
            ]
        }"#;
        match parse_scene(text) {
            Err(SceneError::Invalid { field, reason }) => {
                assert_eq!(field, "pieces[1].shape");
                assert!(reason.contains("overlaps"), "{reason}");
            }
            other => panic!("expected overlap error, got {other:?}"),
        }
    }

    #[test]
    fn annulus_radius_order_rejected() {
        let domain = ConvexDomain::disk(1.0).unwrap();
        let err = Scene::new(
            domain,
            vec![ScenePiece {
                id: 1,
                shape: Shape::Annulus {
                    center: Vec2::new(0.0, 0.0),
                    inner_radius: 0.4,
                    outer_radius: 0.3,
                },
                mu: MuSample::new(0.1, 0.0),
            }],
            PhaseFunction::isotropic(2).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SceneError::Invalid { ref field, .. } if field == "pieces[0].shape.outer_radius"
        ));
    }

    #[test]
    fn background_must_come_last() {
        let domain = ConvexDomain::disk(1.0).unwrap();
        let err = Scene::new(
            domain,
            vec![
                ScenePiece {
                    id: 1,
                    shape: Shape::Background,
                    mu: MuSample::new(0.1, 0.0),
                },
                ScenePiece {
                    id: 2,
                    shape: Shape::Circle {
                        center: Vec2::new(0.0, 0.0),
                        radius: 0.5,
                    },
                    mu: MuSample::new(0.2, 0.0),
                },
            ],
            PhaseFunction::isotropic(2).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SceneError::Invalid { ref field, .. } if field == "pieces[0].shape"
        ));
    }

    #[test]
    fn pieces_clip_at_the_domain_boundary() {
        // A shape may poke out of the domain; the piece is the intersection.
        let domain = ConvexDomain::disk(1.0).unwrap();
        let scene = Scene::new(
            domain,
            vec![ScenePiece {
                id: 1,
                shape: Shape::Circle {
                    center: Vec2::new(0.8, 0.0),
                    radius: 0.5,
                },
                mu: MuSample::new(0.1, 0.2),
            }],
            PhaseFunction::isotropic(2).unwrap(),
        )
        .unwrap();
        assert!((scene.mu_at(Vec2::new(0.9, 0.0)).mu_t() - 0.3).abs() < 1e-15);
        assert_eq!(scene.mu_at(Vec2::new(1.1, 0.0)), MuSample::VACUUM);
    }

    #[test]
    fn ball_scene_loads_and_validates() {
        let text = r#"{
            "domain": {"kind": "ball", "radius": 1.0},
            "pieces": [
                {"id": 1, "shape": {"kind": "shell", "center": [0.43, 0.0, 0.5],
                 "inner_radius": 0.1760681686165901, "outer_radius": 0.36055512754639896},
                 "mu_a": 0.3, "mu_s": 0.3},
                {"id": 2, "shape": {"kind": "ball", "center": [-0.38, 0.38, 0.5],
                 "radius": 0.21679483388678799}, "mu_a": 0.2, "mu_s": 0.3},
                {"id": 3, "shape": {"kind": "background"}, "mu_a": 0.1, "mu_s": 0.3}
            ],
            "phase": {"kind": "henyey-greenstein", "g": 0.9, "dimension": 3}
        }"#;
        let LoadedScene::Ball(ball) = parse_scene(text).unwrap() else {
            panic!("expected ball scene");
        };
        assert_eq!(ball.pieces().len(), 3);
        assert_eq!(ball.phase().dimension(), 3);
    }

    #[test]
    fn planar_shape_in_ball_domain_rejected() {
        let text = r#"{
            "domain": {"kind": "ball"},
            "pieces": [{"id": 1, "shape": {"kind": "circle", "center": [0, 0],
              "radius": 0.5}, "mu_a": 0.1, "mu_s": 0.0}]
        }"#;
        match parse_scene(text) {
            Err(SceneError::Invalid { field, .. }) => assert_eq!(field, "pieces[0].shape.kind"),
            other => panic!("expected shape-kind error, got {other:?}"),
        }
    }

    #[test]
    fn overlapping_balls_rejected() {
        let pieces = vec![
            BallPiece {
                id: 1,
                shape: BallShape::Ball {
                    center: [0.1, 0.0, 0.0],
                    radius: 0.3,
                },
                mu: MuSample::new(0.1, 0.0),
            },
            BallPiece {
                id: 2,
                shape: BallShape::Ball {
                    center: [-0.1, 0.0, 0.0],
                    radius: 0.3,
                },
                mu: MuSample::new(0.2, 0.0),
            },
        ];
        let err = BallScene::new(1.0, pieces, PhaseFunction::isotropic(3).unwrap()).unwrap_err();
        assert!(matches!(
            err,
            SceneError::Invalid { ref field, .. } if field == "pieces[1].shape"
        ));
    }

    #[test]
    fn nested_shell_and_ball_coexist() {
        // A ball strictly inside a shell's hole does not overlap it.
        let pieces = vec![
            BallPiece {
                id: 1,
                shape: BallShape::Shell {
                    center: [0.0, 0.0, 0.0],
                    inner_radius: 0.5,
                    outer_radius: 0.7,
                },
                mu: MuSample::new(0.1, 0.0),
            },
            BallPiece {
                id: 2,
                shape: BallShape::Ball {
                    center: [0.05, 0.0, 0.0],
                    radius: 0.3,
                },
                mu: MuSample::new(0.2, 0.0),
            },
        ];
        assert!(BallScene::new(1.0, pieces, PhaseFunction::isotropic(3).unwrap()).is_ok());
    }
}
