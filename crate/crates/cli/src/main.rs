//! Command-line frontend: solve a scene, measure a sinogram from boundary
//! jumps, reconstruct it, predict the discontinuity set, or validate a scene
//! file. All numeric output uses 17 significant digits and the commands are
//! deterministic: the same invocation writes byte-identical files.
//!
//! Exit codes: 0 success, 1 configuration or scene error, 2 solver
//! non-convergence, 3 sinogram data error, 4 reconstruction error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use jumpct_core::discontinuity::{predict_disc, DiscError, ProbeOptions, SplitBoundaryData};
use jumpct_core::geometry::{audit_convexity, Vec2};
use jumpct_core::media::{load_scene, LoadedScene, Scene, SceneError};
use jumpct_core::tomography::{
    fbp_reconstruct, sinogram_from_jumps, slice_reduce, FbpOptions, FilterKind, Sinogram,
    SinogramOptions, TomoError,
};
use jumpct_core::transport::{
    crude_contraction_bound, equation_residual, extend_to_outgoing, solve, BoundaryData,
    FieldGeometry, SolveOptions, SourceMode, TransportError,
};

const EXIT_CONFIG: u8 = 1;
const EXIT_SOLVER: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_RECON: u8 = 4;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: format!("scene: {e}"),
        }
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        let code = match e {
            TransportError::MaxIterations { .. } | TransportError::ContractionViolated { .. } => {
                EXIT_SOLVER
            }
            _ => EXIT_CONFIG,
        };
        CliError {
            code,
            message: format!("solver: {e}"),
        }
    }
}

impl From<DiscError> for CliError {
    fn from(e: DiscError) -> Self {
        match e {
            DiscError::Transport(t) => t.into(),
            DiscError::ProbeGeometry(..) => CliError {
                code: EXIT_DATA,
                message: format!("measurement: {e}"),
            },
            DiscError::Config(_) => CliError::config(format!("split: {e}")),
        }
    }
}

impl From<TomoError> for CliError {
    fn from(e: TomoError) -> Self {
        match e {
            TomoError::Data(_) => CliError {
                code: EXIT_DATA,
                message: format!("sinogram: {e}"),
            },
            TomoError::AllMasked => CliError {
                code: EXIT_RECON,
                message: format!("reconstruction: {e}"),
            },
            TomoError::Disc(d) => d.into(),
            TomoError::Transport(t) => t.into(),
            other => CliError::config(format!("{other}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::config(format!("io: {e}"))
    }
}

#[derive(Parser)]
#[command(
    name = "jumpct",
    about = "Transport solves, boundary-jump sinograms, and filtered backprojection on disk media",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the transport problem and write an outgoing boundary trace.
    Solve(SolveArgs),
    /// Measure a sinogram of the attenuation from boundary jumps.
    Sinogram(SinogramArgs),
    /// Reconstruct the attenuation image from a scene or a sinogram CSV.
    Reconstruct(ReconstructArgs),
    /// Predict the discontinuity set for a split illumination.
    PredictDisc(PredictDiscArgs),
    /// Parse a scene, audit its interfaces, and report solver bounds.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SceneArg {
    /// Scene JSON file.
    #[arg(long)]
    scene: PathBuf,
    /// Slice plane x3 for ball scenes; required for (and only valid with)
    /// a ball domain.
    #[arg(long)]
    slice: Option<f64>,
}

impl SceneArg {
    fn resolve(&self) -> Result<Scene, CliError> {
        match load_scene(&self.scene)? {
            LoadedScene::Planar(scene) => {
                if self.slice.is_some() {
                    return Err(CliError::config(
                        "--slice only applies to ball scenes; this scene is already planar",
                    ));
                }
                Ok(scene)
            }
            LoadedScene::Ball(ball) => {
                let x0 = self.slice.ok_or_else(|| {
                    CliError::config("ball scenes need --slice to pick the measurement plane")
                })?;
                Ok(slice_reduce(&ball, x0)?)
            }
        }
    }
}

#[derive(Args)]
struct SplitArg {
    /// Angle of the split normal, degrees.
    #[arg(long, default_value_t = 90.0)]
    split_angle_deg: f64,
    /// Offset of the split line along its normal.
    #[arg(long, default_value_t = 0.0)]
    split_offset: f64,
    /// Boundary amplitude on the lit side.
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
}

impl SplitArg {
    fn build(&self, scene: &Scene) -> Result<SplitBoundaryData, CliError> {
        let rad = self.split_angle_deg.to_radians();
        Ok(SplitBoundaryData::new(
            scene.domain(),
            Vec2::new(rad.cos(), rad.sin()),
            self.split_offset,
            self.amplitude,
        )?)
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    scene: SceneArg,
    /// Output path for the outgoing trace CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    nx: usize,
    #[arg(long, default_value_t = 128)]
    ntheta: usize,
    #[arg(long, default_value_t = 2e-3)]
    ray_step: f64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Split the illumination instead of the default uniform datum.
    #[arg(long, default_value_t = false)]
    split: bool,
    #[command(flatten)]
    split_arg: SplitArg,
    /// Number of outgoing detectors in the trace, spread over the boundary.
    #[arg(long, default_value_t = 64)]
    ndet: usize,
}

#[derive(Args)]
struct SinogramArgs {
    #[command(flatten)]
    scene: SceneArg,
    /// Output path for the sinogram CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 360)]
    nphi: usize,
    #[arg(long, default_value_t = 256)]
    ns: usize,
    #[arg(long, default_value_t = 64)]
    nx: usize,
    #[arg(long, default_value_t = 64)]
    ntheta: usize,
    #[arg(long, default_value_t = 6e-3)]
    ray_step: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    /// Tangential probe arc for the jump extraction.
    #[arg(long, default_value_t = 1e-2)]
    eps_probe: f64,
}

impl SinogramArgs {
    fn options(&self) -> Result<SinogramOptions, CliError> {
        if self.eps_probe <= 0.0 {
            return Err(CliError::config("--eps-probe must be positive"));
        }
        if self.tol <= 0.0 || self.ray_step <= 0.0 {
            return Err(CliError::config("--tol and --ray-step must be positive"));
        }
        Ok(SinogramOptions {
            n_angles: self.nphi,
            n_offsets: self.ns,
            amplitude: self.amplitude,
            solver_nx: self.nx,
            solver_ntheta: self.ntheta,
            solver_h_ray: self.ray_step,
            solver_tol: self.tol,
            probe: ProbeOptions {
                eps: self.eps_probe,
                ..ProbeOptions::default()
            },
            ..SinogramOptions::default()
        })
    }
}

#[derive(Args)]
struct ReconstructArgs {
    /// Scene JSON to measure; mutually exclusive with --sinogram.
    #[arg(long, conflicts_with = "sinogram")]
    scene: Option<PathBuf>,
    #[arg(long)]
    slice: Option<f64>,
    /// Previously measured sinogram CSV to reconstruct directly.
    #[arg(long)]
    sinogram: Option<PathBuf>,
    /// Output path for the 16-bit PGM image; a CSV with the raw values is
    /// written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    np: usize,
    #[arg(long, value_enum, default_value_t = FilterArg::Ramlak)]
    filter: FilterArg,
    #[arg(long, default_value_t = 360)]
    nphi: usize,
    #[arg(long, default_value_t = 256)]
    ns: usize,
    #[arg(long, default_value_t = 64)]
    nx: usize,
    #[arg(long, default_value_t = 64)]
    ntheta: usize,
    #[arg(long, default_value_t = 6e-3)]
    ray_step: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 1e-2)]
    eps_probe: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FilterArg {
    Ramlak,
    Cosine,
}

impl From<FilterArg> for FilterKind {
    fn from(f: FilterArg) -> FilterKind {
        match f {
            FilterArg::Ramlak => FilterKind::RamLak,
            FilterArg::Cosine => FilterKind::Cosine,
        }
    }
}

#[derive(Args)]
struct PredictDiscArgs {
    #[command(flatten)]
    scene: SceneArg,
    #[command(flatten)]
    split: SplitArg,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    scene: SceneArg,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let result = match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Sinogram(args) => cmd_sinogram(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::PredictDisc(args) => cmd_predict_disc(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn cmd_solve(args: SolveArgs) -> Result<(), CliError> {
    if args.ndet == 0 {
        return Err(CliError::config("--ndet must be at least 1"));
    }
    let scene = args.scene.resolve()?;
    let boundary = if args.split {
        BoundaryData::Split(args.split_arg.build(&scene)?)
    } else {
        if args.split_arg.amplitude == 0.0 || !args.split_arg.amplitude.is_finite() {
            return Err(CliError::config("--amplitude must be finite and nonzero"));
        }
        BoundaryData::Uniform {
            value: args.split_arg.amplitude,
        }
    };
    let geometry = FieldGeometry::for_scene(&scene, args.nx, args.ntheta)?;
    let options = SolveOptions {
        h_ray: args.ray_step,
        tol: args.tol,
        max_iter: args.max_iter,
        ..SolveOptions::default()
    };
    let (field, report) = solve(&scene, geometry, boundary, &options)?;
    let residual = equation_residual(&scene, &field, options.h_ray)?;

    let radius = scene.domain().radius();
    let detectors: Vec<(Vec2, Vec2)> = (0..args.ndet)
        .map(|i| {
            let beta = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / args.ndet as f64;
            let n = Vec2::from_angle(beta);
            (n * radius, n)
        })
        .collect();
    let trace = extend_to_outgoing(
        &scene,
        &field,
        &detectors,
        SourceMode::DirectionExact,
        options.h_ray,
    )?;
    let mut out = BufWriter::new(File::create(&args.out)?);
    writeln!(out, "index,x,y,dir_x,dir_y,value")?;
    for (i, s) in trace.samples.iter().enumerate() {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            i, s.point.x, s.point.y, s.direction.x, s.direction.y, s.value
        )?;
    }
    out.flush()?;

    println!("iterations: {}", report.iterations);
    println!("grid_contraction: {:.16e}", report.grid_contraction);
    println!("crude_contraction: {:.16e}", report.crude_contraction);
    println!("max_ratio: {:.16e}", report.max_ratio);
    println!("last_term_sup: {:.16e}", report.last_term_sup);
    println!("residual: {:.16e}", residual);
    println!("sup_boundary: {:.16e}", report.sup_boundary);
    println!("field_sup: {:.16e}", field.sup());
    println!("trace_detectors: {}", trace.samples.len());
    Ok(())
}

fn cmd_sinogram(args: SinogramArgs) -> Result<(), CliError> {
    let scene = args.scene.resolve()?;
    let options = args.options()?;
    let (sino, report) = sinogram_from_jumps(&scene, &options)?;
    let mut out = BufWriter::new(File::create(&args.out)?);
    sino.write_csv(&mut out)?;
    out.flush()?;
    print_sinogram_report(&report);
    Ok(())
}

fn print_sinogram_report(report: &jumpct_core::tomography::SinogramReport) {
    println!("placements: {}", report.placements);
    println!("samples_collected: {}", report.samples_collected);
    println!("samples_floor_masked: {}", report.samples_floor_masked);
    println!("samples_tangent_skipped: {}", report.samples_tangent_skipped);
    println!("samples_probe_failed: {}", report.samples_probe_failed);
    println!("masked_entries: {}", report.masked_entries);
    println!("masked_angles: {}", report.masked_angles);
    println!("solver_iterations_max: {}", report.solver_iterations_max);
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<(), CliError> {
    let sino = if let Some(path) = &args.sinogram {
        let file = BufReader::new(File::open(path)?);
        Sinogram::read_csv(file)?
    } else {
        let scene_path = args.scene.as_ref().ok_or_else(|| {
            CliError::config("reconstruct needs either --scene or --sinogram")
        })?;
        let scene = SceneArg {
            scene: scene_path.clone(),
            slice: args.slice,
        }
        .resolve()?;
        let options = SinogramArgs {
            scene: SceneArg {
                scene: scene_path.clone(),
                slice: args.slice,
            },
            out: PathBuf::new(),
            nphi: args.nphi,
            ns: args.ns,
            nx: args.nx,
            ntheta: args.ntheta,
            ray_step: args.ray_step,
            tol: args.tol,
            amplitude: args.amplitude,
            eps_probe: args.eps_probe,
        }
        .options()?;
        let (sino, report) = sinogram_from_jumps(&scene, &options)?;
        print_sinogram_report(&report);
        sino
    };
    let image = fbp_reconstruct(
        &sino,
        &FbpOptions {
            n_pixels: args.np,
            filter: args.filter.into(),
        },
    )?;
    let mut pgm = BufWriter::new(File::create(&args.out)?);
    image.write_pgm16(&mut pgm)?;
    pgm.flush()?;
    let csv_path: PathBuf = args.out.with_extension("csv");
    let mut csv = BufWriter::new(File::create(&csv_path)?);
    image.write_csv(&mut csv)?;
    csv.flush()?;
    println!("pixels: {}", image.n());
    println!("radius: {:.16e}", image.radius());
    println!("image: {}", display_path(&args.out));
    println!("image_csv: {}", display_path(&csv_path));
    Ok(())
}

fn display_path(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_predict_disc(args: PredictDiscArgs) -> Result<(), CliError> {
    let scene = args.scene.resolve()?;
    let data = args.split.build(&scene)?;
    let disc = predict_disc(&scene, &data);
    let audit = audit_convexity(scene.domain(), scene.geometry_pieces(), 4096);
    println!("cut_points: {}", disc.boundary_fans.len());
    for p in &disc.boundary_fans {
        println!("  ({:.16e}, {:.16e})", p.x, p.y);
    }
    println!("segment_families: {}", disc.segment_families.len());
    for family in &disc.segment_families {
        println!(
            "  piece {} segment ({:.6}, {:.6})-({:.6}, {:.6}) direction ({:.16e}, {:.16e})",
            family.segment.piece_id,
            family.segment.start.x,
            family.segment.start.y,
            family.segment.end.x,
            family.segment.end.y,
            family.direction.x,
            family.direction.y,
        );
    }
    println!(
        "exceptional_directions: {}",
        disc.exceptional_directions.len()
    );
    for d in &disc.exceptional_directions {
        println!("  ({:.16e}, {:.16e})", d.x, d.y);
    }
    println!("convexity_satisfied: {}", audit.satisfied);
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<(), CliError> {
    let scene = args.scene.resolve()?;
    let audit = audit_convexity(scene.domain(), scene.geometry_pieces(), 4096);
    let norm = scene.phase().quadrature_normalization(1e-10);
    println!("scene: ok");
    println!("pieces: {}", scene.pieces().len());
    println!("domain_radius: {:.16e}", scene.domain().radius());
    println!("sup_mu_t: {:.16e}", scene.sup_mu_t());
    println!("scattering: {}", scene.has_scattering());
    println!("crude_contraction: {:.16e}", crude_contraction_bound(&scene));
    println!("phase_normalization_error: {:.16e}", (norm - 1.0).abs());
    println!("convexity_satisfied: {}", audit.satisfied);
    println!("flat_segments: {}", audit.flat_segments.len());
    println!("max_crossings: {}", audit.max_crossings);
    Ok(())
}
