//! Attenuation tomography on top of the jump measurements: exact X-ray
//! transform of a scene, assembly of a parallel-beam sinogram from measured
//! jumps, filtered backprojection, and reduction of a ball medium to the
//! planar scene of one of its slices.
//!
//! Parallel-beam convention used throughout: a line is (φ, s) with unit
//! normal n(φ) = (cos φ, sin φ), direction ξ(φ) = (−sin φ, cos φ), and
//! signed offset s, i.e. the line {s·n(φ) + t·ξ(φ)}. Angles live in [0, π)
//! with the usual wrap g(φ+π, s) = g(φ, −s).

use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::discontinuity::{
    extract_jump, predict_disc, DiscError, ProbeOptions, SplitBoundaryData,
};
use crate::geometry::{Shape, Vec2};
use crate::media::{
    adaptive_simpson, BallScene, BallShape, Scene, SceneError, ScenePiece,
};
use crate::transport::{
    optical_path, solve, BoundaryData, FieldGeometry, OutgoingEvaluator, OutgoingScratch,
    SolveOptions, SourceMode, TransportError,
};

#[derive(Debug, Error)]
pub enum TomoError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sinogram data: {0}")]
    Data(String),
    #[error("every sinogram entry is masked; nothing to reconstruct")]
    AllMasked,
    #[error(transparent)]
    Disc(#[from] DiscError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Line direction for angle φ.
pub fn beam_direction(angle: f64) -> Vec2 {
    Vec2::new(-angle.sin(), angle.cos())
}

/// Line normal for angle φ.
pub fn beam_normal(angle: f64) -> Vec2 {
    Vec2::new(angle.cos(), angle.sin())
}

/// Exact X-ray transform of μ_t over the line (angle, offset): the sum of
/// μ_t times intersection length over the pieces the line crosses.
pub fn xray_forward(scene: &Scene, angle: f64, offset: f64) -> f64 {
    let r = scene.domain().radius();
    if offset.abs() >= r {
        return 0.0;
    }
    let xi = beam_direction(angle);
    let half = (r * r - offset * offset).sqrt();
    let exit = beam_normal(angle) * offset + xi * half;
    optical_path(scene, exit, xi, f64::INFINITY)
}

const SINOGRAM_CSV_HEADER: &str = "angle_index,offset_index,angle_rad,offset,value,masked";

/// Parallel-beam sinogram on a regular (angle, offset) lattice with a mask
/// for entries that carry no measurement.
#[derive(Clone, Debug)]
pub struct Sinogram {
    radius: f64,
    n_angles: usize,
    n_offsets: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl Sinogram {
    pub fn new(radius: f64, n_angles: usize, n_offsets: usize) -> Result<Self, TomoError> {
        if !radius.is_finite() || radius <= 0.0 {
            return Err(TomoError::Config(format!(
                "sinogram radius must be positive, got {radius}"
            )));
        }
        if n_angles < 2 || n_offsets < 2 {
            return Err(TomoError::Config(format!(
                "sinogram needs at least 2 angles and 2 offsets, got {n_angles}x{n_offsets}"
            )));
        }
        Ok(Sinogram {
            radius,
            n_angles,
            n_offsets,
            values: vec![0.0; n_angles * n_offsets],
            mask: vec![false; n_angles * n_offsets],
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_offsets(&self) -> usize {
        self.n_offsets
    }

    pub fn angle(&self, m: usize) -> f64 {
        m as f64 * std::f64::consts::PI / self.n_angles as f64
    }

    pub fn offset_step(&self) -> f64 {
        2.0 * self.radius / self.n_offsets as f64
    }

    pub fn offset(&self, l: usize) -> f64 {
        -self.radius + (l as f64 + 0.5) * self.offset_step()
    }

    pub fn value(&self, m: usize, l: usize) -> f64 {
        self.values[m * self.n_offsets + l]
    }

    pub fn set_value(&mut self, m: usize, l: usize, v: f64) {
        self.values[m * self.n_offsets + l] = v;
    }

    pub fn is_masked(&self, m: usize, l: usize) -> bool {
        self.mask[m * self.n_offsets + l]
    }

    pub fn set_masked(&mut self, m: usize, l: usize, masked: bool) {
        self.mask[m * self.n_offsets + l] = masked;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "{SINOGRAM_CSV_HEADER}")?;
        for m in 0..self.n_angles {
            let angle = self.angle(m);
            for l in 0..self.n_offsets {
                writeln!(
                    out,
                    "{},{},{:.16e},{:.16e},{:.16e},{}",
                    m,
                    l,
                    angle,
                    self.offset(l),
                    self.value(m, l),
                    u8::from(self.is_masked(m, l)),
                )?;
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is ascii")
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self, TomoError> {
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, line)) => line?,
            None => {
                return Err(TomoError::Csv {
                    line: 1,
                    reason: "empty file".into(),
                })
            }
        };
        if header.trim_end() != SINOGRAM_CSV_HEADER {
            return Err(TomoError::Csv {
                line: 1,
                reason: format!("expected header '{SINOGRAM_CSV_HEADER}'"),
            });
        }
        let mut rows = Vec::new();
        let mut max_m = 0usize;
        let mut max_l = 0usize;
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| TomoError::Csv {
                line: i + 1,
                reason: reason.into(),
            };
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            if fields.len() != 6 {
                return Err(bad("expected 6 comma-separated fields"));
            }
            let m: usize = fields[0].parse().map_err(|_| bad("bad angle_index"))?;
            let l: usize = fields[1].parse().map_err(|_| bad("bad offset_index"))?;
            let offset: f64 = fields[3].parse().map_err(|_| bad("bad offset"))?;
            let value: f64 = fields[4].parse().map_err(|_| bad("bad value"))?;
            let masked = match fields[5] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("masked flag must be 0 or 1")),
            };
            max_m = max_m.max(m);
            max_l = max_l.max(l);
            rows.push((i + 1, m, l, offset, value, masked));
        }
        let n_angles = max_m + 1;
        let n_offsets = max_l + 1;
        if rows.len() != n_angles * n_offsets {
            return Err(TomoError::Csv {
                line: rows.len() + 1,
                reason: format!(
                    "expected {} rows for a {}x{} lattice, found {}",
                    n_angles * n_offsets,
                    n_angles,
                    n_offsets,
                    rows.len()
                ),
            });
        }
        // Recover the radius from the cell-centered offset lattice.
        let (first, last) = rows.iter().fold((f64::MAX, f64::MIN), |(lo, hi), r| {
            if r.2 == 0 {
                (r.3, hi)
            } else if r.2 == n_offsets - 1 {
                (lo, r.3)
            } else {
                (lo, hi)
            }
        });
        let radius = (last - first) * n_offsets as f64 / (2.0 * (n_offsets as f64 - 1.0));
        let mut sino = Sinogram::new(radius, n_angles, n_offsets)?;
        let mut seen = vec![false; n_angles * n_offsets];
        for (line, m, l, offset, value, masked) in rows {
            let idx = m * n_offsets + l;
            if seen[idx] {
                return Err(TomoError::Csv {
                    line,
                    reason: format!("duplicate entry ({m}, {l})"),
                });
            }
            seen[idx] = true;
            if (offset - sino.offset(l)).abs() > 1e-9 * radius.max(1.0) {
                return Err(TomoError::Csv {
                    line,
                    reason: "offset does not sit on a regular cell-centered lattice".into(),
                });
            }
            sino.set_value(m, l, value);
            sino.set_masked(m, l, masked);
        }
        Ok(sino)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, TomoError> {
        Sinogram::read_csv(text.as_bytes())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SinogramOptions {
    pub n_angles: usize,
    pub n_offsets: usize,
    /// Amplitude of the lit side of each split placement.
    pub amplitude: f64,
    pub solver_nx: usize,
    pub solver_ntheta: usize,
    pub solver_h_ray: f64,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    pub probe: ProbeOptions,
    /// Jumps at or below this fraction of the amplitude are masked out.
    pub jump_floor_rel: f64,
    /// Rays with |s| above this fraction of the radius are skipped as
    /// effectively tangent.
    pub tangent_cut_rel: f64,
    /// Lattice entries farther than this fraction of the radius from any
    /// measured sample are masked. Widened automatically when few
    /// placements keep the sample spacing coarse.
    pub support_gap_rel: f64,
}

impl Default for SinogramOptions {
    fn default() -> Self {
        SinogramOptions {
            n_angles: 360,
            n_offsets: 256,
            amplitude: 1.0,
            solver_nx: 64,
            solver_ntheta: 64,
            solver_h_ray: 6e-3,
            solver_tol: 1e-6,
            solver_max_iter: 200,
            probe: ProbeOptions::default(),
            jump_floor_rel: 1e-12,
            tangent_cut_rel: 0.999,
            support_gap_rel: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SinogramReport {
    pub placements: usize,
    pub samples_collected: usize,
    pub samples_floor_masked: usize,
    pub samples_tangent_skipped: usize,
    pub samples_probe_failed: usize,
    pub masked_entries: usize,
    pub masked_angles: usize,
    pub solver_iterations_max: usize,
}

enum Harvest {
    Sample { angle: usize, s: f64, value: f64 },
    Tangent,
    Exceptional,
    Floor,
    ProbeFailed,
}

/// Measure the X-ray transform of μ_t by splitting the illumination along
/// one diameter per angle, solving the transport problem, and reading the
/// attenuation off the boundary jumps harvested from both cut points.
///
/// Each placement yields one sample per harvest angle and cut point; the
/// per-angle samples are then resampled onto the regular offset lattice.
/// Entries with no nearby sample, and whole angles along flat interface
/// directions, are masked.
pub fn sinogram_from_jumps(
    scene: &Scene,
    options: &SinogramOptions,
) -> Result<(Sinogram, SinogramReport), TomoError> {
    if options.n_angles < 2 || options.n_offsets < 2 {
        return Err(TomoError::Config(format!(
            "sinogram needs at least 2 angles and 2 offsets, got {}x{}",
            options.n_angles, options.n_offsets
        )));
    }
    if options.amplitude == 0.0 || !options.amplitude.is_finite() {
        return Err(TomoError::Config(
            "split amplitude must be finite and nonzero".into(),
        ));
    }
    let radius = scene.domain().radius();
    let n_angles = options.n_angles;
    let amplitude = options.amplitude;
    let solve_options = SolveOptions {
        h_ray: options.solver_h_ray,
        tol: options.solver_tol,
        max_iter: options.solver_max_iter,
        ..SolveOptions::default()
    };

    let mut report = SinogramReport {
        placements: n_angles,
        ..SinogramReport::default()
    };
    let mut buckets: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_angles];

    for m in 0..n_angles {
        let phi = m as f64 * std::f64::consts::PI / n_angles as f64;
        let data = SplitBoundaryData::new(scene.domain(), beam_normal(phi), 0.0, amplitude)?;
        let disc = predict_disc(scene, &data);
        let geometry = FieldGeometry::for_scene(scene, options.solver_nx, options.solver_ntheta)?;
        let (field, solve_report) = solve(
            scene,
            geometry,
            BoundaryData::Split(data.clone()),
            &solve_options,
        )?;
        report.solver_iterations_max = report.solver_iterations_max.max(solve_report.iterations);
        let evaluator =
            OutgoingEvaluator::new(scene, &field, SourceMode::AngularLerp, options.solver_h_ray);

        let jobs: Vec<(usize, usize)> = (0..n_angles)
            .flat_map(|j| [(j, 0usize), (j, 1usize)])
            .collect();
        let outcomes: Vec<Harvest> = jobs
            .par_iter()
            .map_init(OutgoingScratch::default, |scratch, &(j, cut_idx)| {
                let psi = j as f64 * std::f64::consts::PI / n_angles as f64;
                let normal = beam_normal(psi);
                let q = data.cut_points()[cut_idx];
                let s = q.dot(normal);
                if s.abs() > options.tangent_cut_rel * radius {
                    return Ok(Harvest::Tangent);
                }
                let mut xi = beam_direction(psi);
                if q.dot(xi) > 0.0 {
                    xi = -xi;
                }
                if disc.is_exceptional(xi, options.probe.direction_tol) {
                    return Ok(Harvest::Exceptional);
                }
                let exit = q - xi * (2.0 * q.dot(xi));
                let measurement = match extract_jump(
                    &evaluator,
                    &data,
                    &disc,
                    exit,
                    xi,
                    &options.probe,
                    scratch,
                ) {
                    Ok(m) => m,
                    Err(DiscError::ProbeGeometry(..)) => return Ok(Harvest::ProbeFailed),
                    Err(e) => return Err(TomoError::Disc(e)),
                };
                let ratio = measurement.jump / amplitude;
                if ratio <= 0.0 {
                    return Err(TomoError::Data(format!(
                        "non-positive jump {} at angle {} offset {:.6}; \
                         refine the solver grid or tolerances",
                        measurement.jump, j, s
                    )));
                }
                if ratio <= options.jump_floor_rel {
                    return Ok(Harvest::Floor);
                }
                Ok(Harvest::Sample {
                    angle: j,
                    s,
                    value: -ratio.ln(),
                })
            })
            .collect::<Result<Vec<_>, TomoError>>()?;
        for outcome in outcomes {
            match outcome {
                Harvest::Sample { angle, s, value } => {
                    report.samples_collected += 1;
                    buckets[angle].push((s, value));
                }
                Harvest::Tangent => report.samples_tangent_skipped += 1,
                Harvest::Floor => report.samples_floor_masked += 1,
                Harvest::ProbeFailed => report.samples_probe_failed += 1,
                Harvest::Exceptional => {}
            }
        }
    }

    let mut sino = Sinogram::new(radius, n_angles, options.n_offsets)?;
    let gap = radius
        * options
            .support_gap_rel
            .max(2.5 * std::f64::consts::PI / n_angles as f64);
    for (j, bucket) in buckets.iter_mut().enumerate() {
        if bucket.is_empty() {
            for l in 0..options.n_offsets {
                sino.set_masked(j, l, true);
            }
            report.masked_angles += 1;
            report.masked_entries += options.n_offsets;
            continue;
        }
        bucket.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Merge samples of coincident lines (e.g. the shared diameter seen
        // from both cut points).
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(bucket.len());
        for &(s, v) in bucket.iter() {
            match merged.last_mut() {
                Some(last) if (s - last.0).abs() <= 1e-9 * radius => {
                    last.1 = 0.5 * (last.1 + v);
                }
                _ => merged.push((s, v)),
            }
        }
        // Interpolation nodes with zero anchors at the tangent lines.
        let mut nodes = Vec::with_capacity(merged.len() + 2);
        nodes.push((-radius, 0.0));
        nodes.extend(merged.iter().copied());
        nodes.push((radius, 0.0));
        for l in 0..options.n_offsets {
            let s = sino.offset(l);
            let i = nodes.partition_point(|p| p.0 < s).clamp(1, nodes.len() - 1);
            let (s0, v0) = nodes[i - 1];
            let (s1, v1) = nodes[i];
            let t = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
            sino.set_value(j, l, v0 + t * (v1 - v0));
            // Mask entries out of reach of any real measurement.
            let k = merged.partition_point(|p| p.0 < s);
            let mut dist = f64::INFINITY;
            if k < merged.len() {
                dist = dist.min((merged[k].0 - s).abs());
            }
            if k > 0 {
                dist = dist.min((s - merged[k - 1].0).abs());
            }
            if dist > gap {
                sino.set_masked(j, l, true);
                report.masked_entries += 1;
            }
        }
    }
    Ok((sino, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterKind {
    RamLak,
    Cosine,
}

#[derive(Clone, Copy, Debug)]
pub struct FbpOptions {
    pub n_pixels: usize,
    pub filter: FilterKind,
}

impl Default for FbpOptions {
    fn default() -> Self {
        FbpOptions {
            n_pixels: 256,
            filter: FilterKind::RamLak,
        }
    }
}

/// Square reconstruction image on the cell-centered n×n lattice over the
/// sinogram's bounding square; pixels outside the disk stay zero.
#[derive(Clone, Debug)]
pub struct ReconImage {
    n: usize,
    radius: f64,
    values: Vec<f64>,
    inside: Vec<bool>,
}

impl ReconImage {
    fn zeros(n: usize, radius: f64) -> Self {
        let mut inside = vec![false; n * n];
        let h = 2.0 * radius / n as f64;
        for j in 0..n {
            for i in 0..n {
                let x = -radius + (i as f64 + 0.5) * h;
                let y = -radius + (j as f64 + 0.5) * h;
                inside[j * n + i] = x * x + y * y <= radius * radius;
            }
        }
        ReconImage {
            n,
            radius,
            values: vec![0.0; n * n],
            inside,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn pixel_size(&self) -> f64 {
        2.0 * self.radius / self.n as f64
    }

    pub fn center(&self, i: usize, j: usize) -> Vec2 {
        let h = self.pixel_size();
        Vec2::new(
            -self.radius + (i as f64 + 0.5) * h,
            -self.radius + (j as f64 + 0.5) * h,
        )
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.n + i]
    }

    pub fn set_value(&mut self, i: usize, j: usize, v: f64) {
        self.values[j * self.n + i] = v;
    }

    pub fn inside(&self, i: usize, j: usize) -> bool {
        self.inside[j * self.n + i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mean over inside pixels whose center satisfies the predicate.
    pub fn mean_where<F: Fn(Vec2) -> bool>(&self, pred: F) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for j in 0..self.n {
            for i in 0..self.n {
                if self.inside(i, j) && pred(self.center(i, j)) {
                    sum += self.value(i, j);
                    count += 1;
                }
            }
        }
        (count > 0).then(|| sum / count as f64)
    }

    /// Binary 16-bit PGM, values mapped linearly from [0, max] to [0, 65535].
    pub fn write_pgm16<W: Write>(&self, out: &mut W) -> io::Result<()> {
        let max = self
            .values
            .iter()
            .zip(&self.inside)
            .filter(|(_, ins)| **ins)
            .fold(0.0f64, |m, (v, _)| m.max(*v));
        writeln!(out, "P5")?;
        writeln!(out, "{} {}", self.n, self.n)?;
        writeln!(out, "65535")?;
        let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
        let mut row = Vec::with_capacity(self.n * 2);
        for j in (0..self.n).rev() {
            row.clear();
            for i in 0..self.n {
                let v = if self.inside(i, j) {
                    (self.value(i, j).max(0.0) * scale).round().min(65535.0) as u16
                } else {
                    0
                };
                row.extend_from_slice(&v.to_be_bytes());
            }
            out.write_all(&row)?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "row,col,x,y,value,inside")?;
        for j in 0..self.n {
            for i in 0..self.n {
                let c = self.center(i, j);
                writeln!(
                    out,
                    "{},{},{:.16e},{:.16e},{:.16e},{}",
                    j,
                    i,
                    c.x,
                    c.y,
                    self.value(i, j),
                    u8::from(self.inside(i, j)),
                )?;
            }
        }
        Ok(())
    }
}

/// Discrete ramp filter taps h[n] for n = 0..n_s (symmetric in n). The
/// window shapes the ramp in cyclic frequency up to the Nyquist 1/(2Δs).
fn filter_taps(kind: FilterKind, n_s: usize, ds: f64) -> Vec<f64> {
    match kind {
        FilterKind::RamLak => (0..n_s)
            .map(|n| {
                if n == 0 {
                    1.0 / (4.0 * ds * ds)
                } else if n % 2 == 1 {
                    let nf = n as f64;
                    -1.0 / (std::f64::consts::PI * std::f64::consts::PI * nf * nf * ds * ds)
                } else {
                    0.0
                }
            })
            .collect(),
        FilterKind::Cosine => {
            let nyquist = 0.5 / ds;
            (0..n_s)
                .map(|n| {
                    let t = n as f64 * ds;
                    let integrand = |f: f64| {
                        2.0 * f
                            * (std::f64::consts::PI * f / (2.0 * nyquist)).cos()
                            * (2.0 * std::f64::consts::PI * f * t).cos()
                    };
                    adaptive_simpson(&integrand, 0.0, nyquist, 1e-12 / (ds * ds))
                })
                .collect()
        }
    }
}

/// Fill masked entries: linear interpolation in offset within each angle
/// (anchored to zero at the tangent lines), and for fully masked angles a
/// linear blend of the nearest measured angles using the parallel-beam wrap
/// g(φ+π, s) = g(φ, −s).
fn fill_masked(sino: &Sinogram) -> Result<Vec<f64>, TomoError> {
    let n_a = sino.n_angles();
    let n_s = sino.n_offsets();
    let mut values: Vec<f64> = sino.values().to_vec();
    let full_row: Vec<bool> = (0..n_a)
        .map(|m| (0..n_s).all(|l| sino.is_masked(m, l)))
        .collect();
    if full_row.iter().all(|f| *f) {
        return Err(TomoError::AllMasked);
    }
    // In-offset fill for partially masked rows.
    for m in 0..n_a {
        if full_row[m] {
            continue;
        }
        let mut l = 0usize;
        while l < n_s {
            if !sino.is_masked(m, l) {
                l += 1;
                continue;
            }
            let run_start = l;
            while l < n_s && sino.is_masked(m, l) {
                l += 1;
            }
            // Anchor positions: nearest unmasked neighbors, or the tangent
            // lines at ±R where the transform vanishes.
            let (s0, v0) = if run_start > 0 {
                (sino.offset(run_start - 1), values[m * n_s + run_start - 1])
            } else {
                (-sino.radius(), 0.0)
            };
            let (s1, v1) = if l < n_s {
                (sino.offset(l), values[m * n_s + l])
            } else {
                (sino.radius(), 0.0)
            };
            for k in run_start..l {
                let s = sino.offset(k);
                let t = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
                values[m * n_s + k] = v0 + t * (v1 - v0);
            }
        }
    }
    // Cross-angle fill for fully masked rows over the wrapped angle circle.
    let fetch = |row: i64, l: usize, values: &[f64]| -> f64 {
        let wrapped = row.rem_euclid(2 * n_a as i64) as usize;
        if wrapped < n_a {
            values[wrapped * n_s + l]
        } else {
            values[(wrapped - n_a) * n_s + (n_s - 1 - l)]
        }
    };
    let row_filled = |row: i64| -> bool {
        let wrapped = row.rem_euclid(2 * n_a as i64) as usize;
        !full_row[if wrapped < n_a { wrapped } else { wrapped - n_a }]
    };
    let reference = values.clone();
    for m in 0..n_a {
        if !full_row[m] {
            continue;
        }
        let mut below = None;
        let mut above = None;
        for d in 1..=n_a as i64 {
            if below.is_none() && row_filled(m as i64 - d) {
                below = Some(d);
            }
            if above.is_none() && row_filled(m as i64 + d) {
                above = Some(d);
            }
            if below.is_some() && above.is_some() {
                break;
            }
        }
        let (db, da) = (below.expect("some row is filled"), above.expect("some row is filled"));
        let wb = da as f64 / (db + da) as f64;
        for l in 0..n_s {
            let vb = fetch(m as i64 - db, l, &reference);
            let va = fetch(m as i64 + da, l, &reference);
            values[m * n_s + l] = wb * vb + (1.0 - wb) * va;
        }
    }
    Ok(values)
}

/// Filtered backprojection of the sinogram onto an n×n pixel grid.
pub fn fbp_reconstruct(sino: &Sinogram, options: &FbpOptions) -> Result<ReconImage, TomoError> {
    if options.n_pixels < 2 {
        return Err(TomoError::Config(format!(
            "reconstruction needs at least 2 pixels per side, got {}",
            options.n_pixels
        )));
    }
    let n_a = sino.n_angles();
    let n_s = sino.n_offsets();
    let ds = sino.offset_step();
    let values = fill_masked(sino)?;
    let taps = filter_taps(options.filter, n_s, ds);

    // q = Δs · (g ∗ h), one row per angle.
    let mut filtered = vec![0.0; n_a * n_s];
    filtered
        .par_chunks_mut(n_s)
        .enumerate()
        .for_each(|(m, out)| {
            let row = &values[m * n_s..(m + 1) * n_s];
            for (l, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, g) in row.iter().enumerate() {
                    let d = l.abs_diff(k);
                    acc += g * taps[d];
                }
                *o = ds * acc;
            }
        });

    let mut image = ReconImage::zeros(options.n_pixels, sino.radius());
    let normals: Vec<Vec2> = (0..n_a).map(|m| beam_normal(sino.angle(m))).collect();
    let n = options.n_pixels;
    let radius = sino.radius();
    let weight = std::f64::consts::PI / n_a as f64;
    let inside = image.inside.clone();
    image
        .values
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(j, row)| {
            let h = 2.0 * radius / n as f64;
            let y = -radius + (j as f64 + 0.5) * h;
            for (i, pixel) in row.iter_mut().enumerate() {
                if !inside[j * n + i] {
                    continue;
                }
                let x = -radius + (i as f64 + 0.5) * h;
                let p = Vec2::new(x, y);
                let mut acc = 0.0;
                for (m, normal) in normals.iter().enumerate() {
                    let s = p.dot(*normal);
                    let u = (s + radius) / ds - 0.5;
                    let k0 = (u.floor() as isize).clamp(0, n_s as isize - 2) as usize;
                    let t = (u - k0 as f64).clamp(0.0, 1.0);
                    let q = &filtered[m * n_s..(m + 1) * n_s];
                    acc += q[k0] + t * (q[k0 + 1] - q[k0]);
                }
                *pixel = weight * acc;
            }
        });
    Ok(image)
}

/// Rasterize the exact μ_t of a scene on the reconstruction lattice, for
/// comparisons against reconstructions.
pub fn mu_t_image(scene: &Scene, n_pixels: usize) -> ReconImage {
    let mut image = ReconImage::zeros(n_pixels, scene.domain().radius());
    for j in 0..n_pixels {
        for i in 0..n_pixels {
            if image.inside(i, j) {
                let v = scene.mu_at(image.center(i, j)).mu_t();
                image.set_value(i, j, v);
            }
        }
    }
    image
}

fn slice_radius(radius: f64, d: f64) -> f64 {
    // Exact when the slice passes through the center: keep the stored radius
    // rather than round-tripping through squares.
    if d == 0.0 {
        radius
    } else {
        (radius * radius - d * d).sqrt()
    }
}

/// Restrict a ball medium to the plane {x₃ = x0}: balls and shells become
/// disks and annuli (or disks, when the plane cuts a shell outside its
/// cavity), pieces missing the plane are dropped, and the phase function
/// keeps its asymmetry in dimension two.
pub fn slice_reduce(ball: &BallScene, x0: f64) -> Result<Scene, SceneError> {
    let r3 = ball.radius();
    if !x0.is_finite() || x0.abs() >= r3 {
        return Err(SceneError::Invalid {
            field: "slice.x0".into(),
            reason: format!("plane x3 = {x0} does not cut the open ball of radius {r3}"),
        });
    }
    let domain = crate::geometry::ConvexDomain::ball_slice(slice_radius(r3, x0)).map_err(|e| {
        SceneError::Invalid {
            field: "slice.x0".into(),
            reason: e.to_string(),
        }
    })?;
    let mut pieces = Vec::new();
    for piece in ball.pieces() {
        let shape = match &piece.shape {
            BallShape::Ball { center, radius } => {
                let d = x0 - center[2];
                if d.abs() >= *radius {
                    continue;
                }
                Shape::Circle {
                    center: Vec2::new(center[0], center[1]),
                    radius: slice_radius(*radius, d),
                }
            }
            BallShape::Shell {
                center,
                inner_radius,
                outer_radius,
            } => {
                let d = x0 - center[2];
                if d.abs() >= *outer_radius {
                    continue;
                }
                let center2 = Vec2::new(center[0], center[1]);
                if d.abs() < *inner_radius {
                    Shape::Annulus {
                        center: center2,
                        inner_radius: slice_radius(*inner_radius, d),
                        outer_radius: slice_radius(*outer_radius, d),
                    }
                } else {
                    Shape::Circle {
                        center: center2,
                        radius: slice_radius(*outer_radius, d),
                    }
                }
            }
            BallShape::Background => Shape::Background,
        };
        pieces.push(ScenePiece {
            id: piece.id,
            shape,
            mu: piece.mu,
        });
    }
    Scene::new(domain, pieces, ball.phase().clone().with_dimension(2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ConvexDomain;
    use crate::media::{MuSample, PhaseFunction};

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
        Scene::new(domain, pieces, PhaseFunction::henyey_greenstein(0.9, 2).unwrap()).unwrap()
    }

    fn uniform_disk(mu_a: f64, mu_s: f64) -> Scene {
        let domain = ConvexDomain::disk(1.0).unwrap();
        Scene::new(
            domain,
            vec![ScenePiece {
                id: 1,
                shape: Shape::Background,
                mu: MuSample::new(mu_a, mu_s),
            }],
            PhaseFunction::isotropic(2).unwrap(),
        )
        .unwrap()
    }

    fn phantom_ball() -> BallScene {
        BallScene::new(
            1.0,
            vec![
                crate::media::BallPiece {
                    id: 1,
                    shape: BallShape::Shell {
                        center: [0.43, 0.0, 0.5],
                        inner_radius: 0.031f64.sqrt(),
                        outer_radius: 0.13f64.sqrt(),
                    },
                    mu: MuSample::new(0.3, 0.3),
                },
                crate::media::BallPiece {
                    id: 2,
                    shape: BallShape::Ball {
                        center: [-0.38, 0.38, 0.5],
                        radius: 0.047f64.sqrt(),
                    },
                    mu: MuSample::new(0.2, 0.3),
                },
                crate::media::BallPiece {
                    id: 3,
                    shape: BallShape::Background,
                    mu: MuSample::new(0.1, 0.3),
                },
            ],
            PhaseFunction::henyey_greenstein(0.9, 3).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn xray_uniform_disk_closed_form() {
        let scene = uniform_disk(0.25, 0.15);
        for (angle, offset) in [(0.0, 0.0), (0.7, 0.3), (2.1, -0.8), (1.2, 0.99)] {
            let expect = 0.4 * 2.0 * (1.0f64 - offset * offset).sqrt();
            let got = xray_forward(&scene, angle, offset);
            assert!((got - expect).abs() < 1e-12, "({angle}, {offset}): {got}");
        }
        assert_eq!(xray_forward(&scene, 0.3, 1.0), 0.0);
    }

    #[test]
    fn xray_decomposes_over_pieces() {
        let scene = phantom_slice();
        // Vertical line through the disk inclusion's center: background plus
        // the full chord of the small disk, annulus untouched.
        let angle = 0.0;
        let offset = -0.38;
        let half_domain = (0.75f64 - 0.38 * 0.38).sqrt();
        let r2 = 0.047f64.sqrt();
        let expect = 0.4 * (2.0 * half_domain - 2.0 * r2) + 0.5 * 2.0 * r2;
        let got = xray_forward(&scene, angle, offset);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn sinogram_csv_roundtrip_is_exact() {
        let mut sino = Sinogram::new(0.8660254037844386, 3, 5).unwrap();
        for m in 0..3 {
            for l in 0..5 {
                sino.set_value(m, l, ((m * 5 + l) as f64).sin() * 0.731);
            }
        }
        sino.set_masked(1, 2, true);
        sino.set_masked(2, 4, true);
        let text = sino.to_csv_string();
        assert!(text.starts_with("angle_index,offset_index,angle_rad,offset,value,masked\n"));
        let back = Sinogram::from_csv_str(&text).unwrap();
        assert_eq!(back.n_angles(), 3);
        assert_eq!(back.n_offsets(), 5);
        for m in 0..3 {
            for l in 0..5 {
                assert_eq!(back.value(m, l).to_bits(), sino.value(m, l).to_bits());
                assert_eq!(back.is_masked(m, l), sino.is_masked(m, l));
            }
        }
        // And the re-written text is byte-identical.
        assert_eq!(back.to_csv_string(), text);
    }

    #[test]
    fn csv_rejects_bad_header_and_gaps() {
        assert!(matches!(
            Sinogram::from_csv_str("angle,offset\n"),
            Err(TomoError::Csv { line: 1, .. })
        ));
        let mut sino = Sinogram::new(1.0, 2, 2).unwrap();
        sino.set_value(0, 0, 1.0);
        let text = sino.to_csv_string();
        let truncated: Vec<&str> = text.lines().take(4).collect();
        assert!(Sinogram::from_csv_str(&truncated.join("\n")).is_err());
    }

    #[test]
    fn ramlak_taps_match_their_spectral_integral() {
        let ds = 2.0 / 64.0;
        let closed = filter_taps(FilterKind::RamLak, 8, ds);
        let nyquist = 0.5 / ds;
        for (n, tap) in closed.iter().enumerate() {
            let t = n as f64 * ds;
            let integrand =
                |f: f64| 2.0 * f * (2.0 * std::f64::consts::PI * f * t).cos();
            let numeric = adaptive_simpson(&integrand, 0.0, nyquist, 1e-13 / (ds * ds));
            assert!(
                (tap - numeric).abs() <= 1e-7 / (ds * ds) * 1e-2,
                "tap {n}: {tap} vs {numeric}"
            );
        }
        let cosine = filter_taps(FilterKind::Cosine, 8, ds);
        let ratio = cosine[0] / closed[0];
        assert!(ratio > 0.4 && ratio < 0.5, "cosine dc ratio {ratio}");
    }

    fn analytic_disk_sinogram(c: f64, n_a: usize, n_s: usize) -> Sinogram {
        let mut sino = Sinogram::new(1.0, n_a, n_s).unwrap();
        for m in 0..n_a {
            for l in 0..n_s {
                let s = sino.offset(l);
                let v = if s.abs() < 1.0 {
                    c * 2.0 * (1.0 - s * s).sqrt()
                } else {
                    0.0
                };
                sino.set_value(m, l, v);
            }
        }
        sino
    }

    #[test]
    fn fbp_recovers_a_uniform_disk() {
        let c = 0.5;
        let sino = analytic_disk_sinogram(c, 180, 256);
        let image = fbp_reconstruct(
            &sino,
            &FbpOptions {
                n_pixels: 128,
                filter: FilterKind::RamLak,
            },
        )
        .unwrap();
        let center = image.mean_where(|p| p.norm() < 0.3).unwrap();
        assert!((center - c).abs() < 0.03 * c, "center mean {center}");
        let mut l2 = 0.0;
        let mut norm = 0.0;
        let mut count = 0usize;
        for j in 0..image.n() {
            for i in 0..image.n() {
                let p = image.center(i, j);
                if image.inside(i, j) && p.norm() < 0.8 {
                    l2 += (image.value(i, j) - c).powi(2);
                    norm += c * c;
                    count += 1;
                }
            }
        }
        assert!(count > 0);
        assert!((l2 / norm).sqrt() < 0.05, "rel l2 {}", (l2 / norm).sqrt());
    }

    #[test]
    fn fbp_is_linear_and_zero_on_zero() {
        let sino0 = analytic_disk_sinogram(0.0, 24, 32);
        let zero = fbp_reconstruct(&sino0, &FbpOptions { n_pixels: 32, filter: FilterKind::RamLak })
            .unwrap();
        assert!(zero.values().iter().all(|v| *v == 0.0));

        let a = analytic_disk_sinogram(0.4, 24, 32);
        let b = analytic_disk_sinogram(0.8, 24, 32);
        let ia = fbp_reconstruct(&a, &FbpOptions { n_pixels: 32, filter: FilterKind::RamLak })
            .unwrap();
        let ib = fbp_reconstruct(&b, &FbpOptions { n_pixels: 32, filter: FilterKind::RamLak })
            .unwrap();
        for (x, y) in ia.values().iter().zip(ib.values()) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn masked_entries_are_filled_before_filtering() {
        let c = 0.5;
        let clean = analytic_disk_sinogram(c, 60, 64);
        let mut holed = clean.clone();
        // One fully masked angle and a short masked run elsewhere.
        for l in 0..64 {
            holed.set_masked(7, l, true);
            holed.set_value(7, l, 0.0);
        }
        for l in 20..23 {
            holed.set_masked(31, l, true);
            holed.set_value(31, l, 0.0);
        }
        let opt = FbpOptions {
            n_pixels: 64,
            filter: FilterKind::RamLak,
        };
        let a = fbp_reconstruct(&clean, &opt).unwrap();
        let b = fbp_reconstruct(&holed, &opt).unwrap();
        let mut worst = 0.0f64;
        for j in 0..64 {
            for i in 0..64 {
                if a.inside(i, j) && a.center(i, j).norm() < 0.8 {
                    worst = worst.max((a.value(i, j) - b.value(i, j)).abs());
                }
            }
        }
        assert!(worst < 0.03 * c, "fill perturbed the image by {worst}");

        let mut all = clean.clone();
        for m in 0..60 {
            for l in 0..64 {
                all.set_masked(m, l, true);
            }
        }
        assert!(matches!(
            fbp_reconstruct(&all, &opt),
            Err(TomoError::AllMasked)
        ));
    }

    #[test]
    fn sinogram_from_jumps_matches_xray_on_absorbing_disk() {
        let scene = uniform_disk(0.4, 0.0);
        let options = SinogramOptions {
            n_angles: 24,
            n_offsets: 32,
            solver_nx: 32,
            solver_ntheta: 16,
            solver_h_ray: 5e-3,
            ..SinogramOptions::default()
        };
        let (sino, report) = sinogram_from_jumps(&scene, &options).unwrap();
        assert_eq!(report.placements, 24);
        assert!(report.samples_collected > 500, "{report:?}");
        let mut checked = 0usize;
        for m in 0..24 {
            for l in 0..32 {
                let s = sino.offset(l);
                if s.abs() > 0.9 || sino.is_masked(m, l) {
                    continue;
                }
                let expect = xray_forward(&scene, sino.angle(m), s);
                assert!(
                    (sino.value(m, l) - expect).abs() < 0.012,
                    "({m}, {l}): {} vs {expect}",
                    sino.value(m, l)
                );
                checked += 1;
            }
        }
        assert!(checked > 400, "only {checked} entries were comparable");
    }

    #[test]
    fn slice_through_the_phantom_equator_keeps_exact_radii() {
        let ball = phantom_ball();
        let scene = slice_reduce(&ball, 0.5).unwrap();
        assert_eq!(
            scene.domain().radius().to_bits(),
            0.75f64.sqrt().to_bits()
        );
        assert_eq!(scene.pieces().len(), 3);
        match &scene.pieces()[0].shape {
            Shape::Annulus {
                center,
                inner_radius,
                outer_radius,
            } => {
                assert_eq!(*center, Vec2::new(0.43, 0.0));
                assert_eq!(inner_radius.to_bits(), 0.031f64.sqrt().to_bits());
                assert_eq!(outer_radius.to_bits(), 0.13f64.sqrt().to_bits());
            }
            other => panic!("expected annulus, got {other:?}"),
        }
        match &scene.pieces()[1].shape {
            Shape::Circle { center, radius } => {
                assert_eq!(*center, Vec2::new(-0.38, 0.38));
                assert_eq!(radius.to_bits(), 0.047f64.sqrt().to_bits());
            }
            other => panic!("expected circle, got {other:?}"),
        }
        assert_eq!(scene.phase().dimension(), 2);
        assert_eq!(scene.phase().g(), 0.9);
    }

    #[test]
    fn slice_levels_change_the_cut() {
        let ball = phantom_ball();
        // High cut: both inclusions end below it.
        let high = slice_reduce(&ball, 0.95).unwrap();
        assert_eq!(high.pieces().len(), 1);
        assert!(matches!(high.pieces()[0].shape, Shape::Background));
        // Between the shell's inner and outer radius the cavity closes.
        let mid = slice_reduce(&ball, 0.5 + 0.25).unwrap();
        match &mid.pieces()[0].shape {
            Shape::Circle { radius, .. } => {
                let expect = (0.13f64 - 0.0625).sqrt();
                assert!((radius - expect).abs() < 1e-15);
            }
            other => panic!("expected circle, got {other:?}"),
        }
        assert!(slice_reduce(&ball, 1.0).is_err());
        assert!(slice_reduce(&ball, -1.3).is_err());
    }

    #[test]
    fn mu_t_rasterization_matches_lookup() {
        let scene = phantom_slice();
        let image = mu_t_image(&scene, 64);
        assert_eq!(image.n(), 64);
        let mut seen = std::collections::BTreeSet::new();
        for j in 0..64 {
            for i in 0..64 {
                if image.inside(i, j) {
                    seen.insert((image.value(i, j) * 10.0).round() as i64);
                }
            }
        }
        assert!(seen.contains(&4) && seen.contains(&5) && seen.contains(&6));
    }
}
