//! Split boundary data, prediction of where the radiance jumps, and
//! measurement of those jumps from outgoing values.
//!
//! A split datum is constant on one side of a hyperplane cut and zero on the
//! other; the induced discontinuity travels along the characteristics seeded
//! at the two cut points and decays by exactly the attenuation along the
//! chord. Measuring it therefore recovers the attenuation line integral. The
//! measurement probes the outgoing trace tangentially on both sides of the
//! characteristic and removes the leading linear error with one Richardson
//! step, which the continuous part of the field admits.

use thiserror::Error;

use crate::geometry::{angle_between, flat_segments, ConvexDomain, FlatSegment, Vec2};
use crate::media::Scene;
use crate::transport::{OutgoingEvaluator, OutgoingScratch, TransportError};

#[derive(Debug, Error)]
pub enum DiscError {
    #[error("split configuration: {0}")]
    Config(String),
    #[error("probe geometry at ({0}, {1}): {2}")]
    ProbeGeometry(f64, f64, String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Which side of the cut a boundary point feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Carries the amplitude; the cut itself counts as lit.
    Lit,
    Dark,
}

/// Boundary datum equal to `amplitude` on the closed side {x·n ≥ c} and zero
/// on the open complement.
#[derive(Clone, Debug)]
pub struct SplitBoundaryData {
    normal: Vec2,
    offset: f64,
    amplitude: f64,
    cuts: [Vec2; 2],
}

impl SplitBoundaryData {
    pub fn new(
        domain: &ConvexDomain,
        normal: Vec2,
        offset: f64,
        amplitude: f64,
    ) -> Result<Self, DiscError> {
        let normal = normal
            .normalized()
            .ok_or_else(|| DiscError::Config("split normal must be a nonzero vector".into()))?;
        if !offset.is_finite() || !amplitude.is_finite() {
            return Err(DiscError::Config("split offset and amplitude must be finite".into()));
        }
        if amplitude == 0.0 {
            return Err(DiscError::Config("split amplitude must be nonzero".into()));
        }
        let r = domain.radius();
        // Transversality: the cut line must cross the interior, not graze it.
        if offset.abs() >= r * (1.0 - 1e-9) {
            return Err(DiscError::Config(format!(
                "cut x·n = {offset} misses the boundary of the disk of radius {r}"
            )));
        }
        let half = (r * r - offset * offset).sqrt();
        let tangent = normal.perp();
        let foot = normal * offset;
        Ok(SplitBoundaryData {
            normal,
            offset,
            amplitude,
            cuts: [foot + tangent * half, foot - tangent * half],
        })
    }

    pub fn normal(&self) -> Vec2 {
        self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// The two points where the cut meets the boundary circle.
    pub fn cut_points(&self) -> [Vec2; 2] {
        self.cuts
    }

    pub fn side_of(&self, p: Vec2) -> Side {
        if p.dot(self.normal) >= self.offset {
            Side::Lit
        } else {
            Side::Dark
        }
    }

    pub fn eval(&self, p: Vec2) -> f64 {
        match self.side_of(p) {
            Side::Lit => self.amplitude,
            Side::Dark => 0.0,
        }
    }
}

/// Rays along the fixed direction of a flat interface segment; jumps seeded
/// by the coefficients live on these, one family per orientation.
#[derive(Clone, Debug)]
pub struct SegmentFamily {
    pub segment: FlatSegment,
    pub direction: Vec2,
}

/// Predicted support of the radiance discontinuity.
#[derive(Clone, Debug)]
pub struct DiscSet {
    /// Fan vertices on the boundary: every chord through one of these points
    /// carries the boundary-induced jump.
    pub boundary_fans: Vec<Vec2>,
    pub segment_families: Vec<SegmentFamily>,
    /// Directions along flat interface segments, both orientations, deduped.
    pub exceptional_directions: Vec<Vec2>,
}

impl DiscSet {
    pub fn is_exceptional(&self, xi: Vec2, tol: f64) -> bool {
        self.exceptional_directions
            .iter()
            .any(|d| angle_between(*d, xi) <= tol)
    }
}

/// Where jumps can appear for this scene and split: fans at the cut points,
/// plus ray families along any flat interface segments.
pub fn predict_disc(scene: &Scene, data: &SplitBoundaryData) -> DiscSet {
    let mut segment_families = Vec::new();
    let mut exceptional_directions: Vec<Vec2> = Vec::new();
    for segment in flat_segments(scene.geometry_pieces()) {
        for direction in [segment.direction, -segment.direction] {
            if !exceptional_directions
                .iter()
                .any(|d| angle_between(*d, direction) <= 1e-9)
            {
                exceptional_directions.push(direction);
            }
            segment_families.push(SegmentFamily {
                segment: segment.clone(),
                direction,
            });
        }
    }
    DiscSet {
        boundary_fans: data.cut_points().to_vec(),
        segment_families,
        exceptional_directions,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeOptions {
    /// Tangential probe arc length; the Richardson pair uses eps and eps/2.
    /// Treated as an upper bound: probing tightens it to a fraction of the
    /// field's grid spacing, since probes farther apart than the bilinear
    /// smearing of the scattered source around the singular chord resolve its
    /// peak and break the polynomial extrapolation.
    pub eps: f64,
    /// Angular tolerance for flagging a detector direction as exceptional.
    pub direction_tol: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            eps: 1e-2,
            direction_tol: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct JumpMeasurement {
    pub point: Vec2,
    pub direction: Vec2,
    /// One-sided limits of the outgoing value on the lit and dark side.
    pub v_lit: f64,
    pub v_dark: f64,
    pub jump: f64,
    /// Jump of the scattered part alone; small when the extraction is sound.
    pub scattered_jump: f64,
    /// Detector direction lies within tolerance of a flat-segment direction,
    /// so interface-seeded jumps may contaminate this measurement.
    pub exceptional: bool,
}

struct Probe {
    side: Side,
    total: f64,
    ballistic: f64,
}

// Probe arcs must stay inside the band over which the bilinear grid smears a
// jump of the scattered source; there the sampled profile is linear and the
// two sides share it, so it cancels. 0.3 cells keeps the whole ±eps bundle
// within half a cell of the characteristic.
fn clamp_probe_arc(eps: f64, evaluator: &OutgoingEvaluator) -> f64 {
    eps.min(0.3 * evaluator.grid_spacing())
}

fn probe_at(
    evaluator: &OutgoingEvaluator,
    data: &SplitBoundaryData,
    x: Vec2,
    xi: Vec2,
    arc: f64,
    scratch: &mut OutgoingScratch,
) -> Result<Probe, DiscError> {
    let domain = evaluator.domain();
    // Rotating about the center keeps the probe exactly on the circle.
    let p = x.rotated(arc / domain.radius());
    let backstop = domain.boundary_projection(p, xi).map_err(|e| {
        DiscError::ProbeGeometry(p.x, p.y, format!("no backward projection: {e}"))
    })?;
    let value = evaluator.value(p, xi, scratch)?;
    Ok(Probe {
        side: data.side_of(backstop),
        total: value.total,
        ballistic: value.ballistic,
    })
}

/// Measure the jump of the outgoing value at `(x_star, xi_star)` by probing
/// tangentially at ±eps and ±eps/2 and extrapolating each side to the ray.
pub fn extract_jump(
    evaluator: &OutgoingEvaluator,
    data: &SplitBoundaryData,
    disc: &DiscSet,
    x_star: Vec2,
    xi_star: Vec2,
    options: &ProbeOptions,
    scratch: &mut OutgoingScratch,
) -> Result<JumpMeasurement, DiscError> {
    let domain = evaluator.domain();
    let x = domain
        .snap_to_boundary(x_star)
        .map_err(|e| DiscError::ProbeGeometry(x_star.x, x_star.y, format!("detector: {e}")))?;
    let xi = xi_star
        .normalized()
        .ok_or_else(|| DiscError::Config("detector direction must be nonzero".into()))?;
    let exceptional = disc.is_exceptional(xi, options.direction_tol);
    let eps = clamp_probe_arc(options.eps, evaluator);

    let plus = probe_at(evaluator, data, x, xi, eps, scratch)?;
    let plus_half = probe_at(evaluator, data, x, xi, 0.5 * eps, scratch)?;
    let minus = probe_at(evaluator, data, x, xi, -eps, scratch)?;
    let minus_half = probe_at(evaluator, data, x, xi, -0.5 * eps, scratch)?;

    if plus.side != plus_half.side || minus.side != minus_half.side {
        return Err(DiscError::ProbeGeometry(
            x.x,
            x.y,
            "probe pair straddles the cut; the detector sits too close to a cut point".into(),
        ));
    }
    if plus.side == minus.side {
        return Err(DiscError::ProbeGeometry(
            x.x,
            x.y,
            "both probes project to the same side of the cut; \
             the backward ray does not pass through a cut point"
                .into(),
        ));
    }
    let richardson = |half: f64, full: f64| 2.0 * half - full;
    let (lit, lit_half, dark, dark_half) = if plus.side == Side::Lit {
        (&plus, &plus_half, &minus, &minus_half)
    } else {
        (&minus, &minus_half, &plus, &plus_half)
    };
    let v_lit = richardson(lit_half.total, lit.total);
    let v_dark = richardson(dark_half.total, dark.total);
    let lit_scattered = richardson(
        lit_half.total - lit_half.ballistic,
        lit.total - lit.ballistic,
    );
    let dark_scattered = richardson(
        dark_half.total - dark_half.ballistic,
        dark.total - dark.ballistic,
    );
    Ok(JumpMeasurement {
        point: x,
        direction: xi,
        v_lit,
        v_dark,
        jump: v_lit - v_dark,
        scattered_jump: lit_scattered - dark_scattered,
        exceptional,
    })
}

/// Richardson-extrapolated difference of the outgoing value across the
/// characteristic, without side classification: (total, scattered) parts.
/// Near zero wherever the field is continuous.
pub fn probe_difference(
    evaluator: &OutgoingEvaluator,
    x_star: Vec2,
    xi_star: Vec2,
    eps: f64,
    scratch: &mut OutgoingScratch,
) -> Result<(f64, f64), DiscError> {
    let domain = evaluator.domain();
    let x = domain
        .snap_to_boundary(x_star)
        .map_err(|e| DiscError::ProbeGeometry(x_star.x, x_star.y, format!("detector: {e}")))?;
    let xi = xi_star
        .normalized()
        .ok_or_else(|| DiscError::Config("detector direction must be nonzero".into()))?;
    let eps = clamp_probe_arc(eps, evaluator);
    let eval = |arc: f64, scratch: &mut OutgoingScratch| -> Result<(f64, f64), DiscError> {
        let p = x.rotated(arc / domain.radius());
        let v = evaluator.value(p, xi, scratch)?;
        Ok((v.total, v.scattered()))
    };
    let plus = eval(eps, scratch)?;
    let plus_half = eval(0.5 * eps, scratch)?;
    let minus = eval(-eps, scratch)?;
    let minus_half = eval(-0.5 * eps, scratch)?;
    let r = |half: f64, full: f64| 2.0 * half - full;
    Ok((
        r(plus_half.0, plus.0) - r(minus_half.0, minus.0),
        r(plus_half.1, plus.1) - r(minus_half.1, minus.1),
    ))
}
