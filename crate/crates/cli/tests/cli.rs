//! Black-box tests of the binary: exit codes, output files, determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn jumpct() -> Command {
    Command::new(env!("CARGO_BIN_EXE_jumpct"))
}

fn scene(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenes")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    jumpct().args(args).output().expect("spawn jumpct")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("jumpct"));
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["solve", "--help"])), 0);
}

#[test]
fn usage_and_scene_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.csv");
    let out = out.to_str().unwrap();

    let unknown = run(&["solve", "--bogus"]);
    assert_eq!(code(&unknown), 1);

    let missing = run(&["solve", "--scene", "/nonexistent.json", "--out", out]);
    assert_eq!(code(&missing), 1);
    assert!(stderr(&missing).contains("scene"));

    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{ \"domain\": { \"kind\": \"torus\" } }").unwrap();
    let parsed = run(&["solve", "--scene", broken.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&parsed), 1);

    let ball_no_slice = run(&[
        "validate",
        "--scene",
        scene("ball_phantom.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&ball_no_slice), 1);
    assert!(stderr(&ball_no_slice).contains("--slice"));

    let planar_with_slice = run(&[
        "validate",
        "--scene",
        scene("uniform_disk.json").to_str().unwrap(),
        "--slice",
        "0.5",
    ]);
    assert_eq!(code(&planar_with_slice), 1);
}

#[test]
fn non_convergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.csv");
    let capped = run(&[
        "solve",
        "--scene",
        scene("uniform_disk.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--nx",
        "24",
        "--ntheta",
        "12",
        "--ray-step",
        "1e-2",
        "--max-iter",
        "1",
    ]);
    assert_eq!(code(&capped), 2);
    assert!(stderr(&capped).contains("solver"));
}

#[test]
fn fully_masked_sinogram_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("masked.csv");
    let mut text = String::from("angle_index,offset_index,angle_rad,offset,value,masked\n");
    for m in 0..2 {
        for l in 0..2 {
            let angle = m as f64 * std::f64::consts::FRAC_PI_2;
            let offset = -0.5 + l as f64;
            text.push_str(&format!("{m},{l},{angle:.16e},{offset:.16e},0e0,1\n"));
        }
    }
    fs::write(&csv, text).unwrap();
    let out = dir.path().join("img.pgm");
    let recon = run(&[
        "reconstruct",
        "--sinogram",
        csv.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--np",
        "16",
    ]);
    assert_eq!(code(&recon), 4);
    assert!(stderr(&recon).contains("masked"));
}

#[test]
fn solve_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "solve".to_string(),
            "--scene".into(),
            scene("phantom_slice.json").to_str().unwrap().into(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--nx".into(),
            "32".into(),
            "--ntheta".into(),
            "16".into(),
            "--ray-step".into(),
            "1e-2".into(),
            "--tol".into(),
            "1e-6".into(),
            "--ndet".into(),
            "16".into(),
            "--split".into(),
        ]
    };
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let first = jumpct().args(args(&a)).output().unwrap();
    let second = jumpct().args(args(&b)).output().unwrap();
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert_eq!(code(&second), 0);
    assert_eq!(first.stdout, second.stdout);
    let bytes_a = fs::read(&a).unwrap();
    assert!(!bytes_a.is_empty());
    assert_eq!(bytes_a, fs::read(&b).unwrap());
    let text = String::from_utf8(bytes_a).unwrap();
    assert!(text.starts_with("index,x,y,dir_x,dir_y,value\n"));
    assert_eq!(text.lines().count(), 17);
}

#[test]
fn sinogram_then_reconstruct_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let sino_path = dir.path().join("uniform.csv");
    let measured = run(&[
        "sinogram",
        "--scene",
        scene("uniform_disk.json").to_str().unwrap(),
        "--out",
        sino_path.to_str().unwrap(),
        "--nphi",
        "16",
        "--ns",
        "24",
        "--nx",
        "24",
        "--ntheta",
        "12",
        "--ray-step",
        "1e-2",
        "--tol",
        "1e-4",
    ]);
    assert_eq!(code(&measured), 0, "{}", stderr(&measured));
    let report = String::from_utf8_lossy(&measured.stdout).into_owned();
    assert!(report.contains("placements: 16"));

    let img = dir.path().join("uniform.pgm");
    let recon = run(&[
        "reconstruct",
        "--sinogram",
        sino_path.to_str().unwrap(),
        "--out",
        img.to_str().unwrap(),
        "--np",
        "32",
        "--filter",
        "cosine",
    ]);
    assert_eq!(code(&recon), 0, "{}", stderr(&recon));
    let pgm = fs::read(&img).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
    let csv = fs::read_to_string(img.with_extension("csv")).unwrap();
    assert!(csv.starts_with("row,col,x,y,value,inside\n"));
    assert_eq!(csv.lines().count(), 32 * 32 + 1);
}

#[test]
fn predict_disc_lists_the_square_directions() {
    let listed = run(&[
        "predict-disc",
        "--scene",
        scene("square_inclusion.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&listed), 0);
    let text = String::from_utf8_lossy(&listed.stdout).into_owned();
    assert!(text.contains("cut_points: 2"));
    assert!(text.contains("segment_families: 8"));
    assert!(text.contains("exceptional_directions: 4"));
    assert!(text.contains("convexity_satisfied: false"));

    let smooth = run(&[
        "predict-disc",
        "--scene",
        scene("phantom_slice.json").to_str().unwrap(),
        "--split-angle-deg",
        "25",
        "--split-offset",
        "0.2",
    ]);
    assert_eq!(code(&smooth), 0);
    let text = String::from_utf8_lossy(&smooth.stdout).into_owned();
    assert!(text.contains("segment_families: 0"));
    assert!(text.contains("convexity_satisfied: true"));
}

#[test]
fn validate_reports_the_phantom_numbers() {
    let report = run(&[
        "validate",
        "--scene",
        scene("ball_phantom.json").to_str().unwrap(),
        "--slice",
        "0.5",
    ]);
    assert_eq!(code(&report), 0);
    let text = String::from_utf8_lossy(&report.stdout).into_owned();
    assert!(text.contains("pieces: 3"));
    assert!(text.contains("sup_mu_t: 5.9999999999999998e-1"));
    assert!(text.contains("scattering: true"));
    assert!(text.contains("convexity_satisfied: true"));
}
