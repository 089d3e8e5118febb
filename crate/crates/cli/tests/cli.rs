use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use epinaf_core::field::EncodingConfig;
use epinaf_core::{ConeBeamGeometry, ExperimentSpec, FieldConfig, GridSpec, Method, TrainConfig};

fn epinaf(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epinaf"))
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_geometry() -> ConeBeamGeometry {
    let mut g = ConeBeamGeometry::desk_default(Vec::new());
    g.n_u = 16;
    g.n_v = 16;
    g.pitch_u = 21.6;
    g.pitch_v = 21.6;
    g
}

/// Experiment spec small enough for a neural cell to train in seconds.
fn small_spec() -> ExperimentSpec {
    ExperimentSpec {
        geometry: small_geometry(),
        n_views: 8,
        grid: GridSpec::cube(16, 64.0),
        sim_samples: 128,
        sart_iterations: 3,
        asd_tv_steps: 3,
        field: FieldConfig {
            encoding: EncodingConfig::Hashgrid {
                n_levels: 3,
                table_size: 4096,
                features_per_level: 2,
                coarsest: 4,
                finest: 16,
            },
            hidden: vec![16],
            bound: 112.0,
        },
        train: TrainConfig {
            n_epochs: 3,
            warmup_epochs: 1,
            rays_per_batch: 256,
            lr: 1e-2,
            n_samples: 16,
            checkpoint_every: 1,
            ..TrainConfig::default()
        },
        ..ExperimentSpec::default()
    }
}

fn write_small_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(&small_spec()).unwrap()).unwrap();
    p
}

fn write_small_geometry(dir: &Path) -> PathBuf {
    let p = dir.join("geometry.json");
    fs::write(&p, serde_json::to_string_pretty(&small_geometry()).unwrap()).unwrap();
    p
}

#[test]
fn phantom_writes_volume_and_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(epinaf(&a, &["--seed", "3", "phantom", "shepp-logan", "--dims", "24"]));
    ok(epinaf(&b, &["--seed", "3", "phantom", "shepp-logan", "--dims", "24"]));
    let raw = fs::read(a.join("phantom.raw")).unwrap();
    assert_eq!(raw.len(), 24 * 24 * 24 * 4);
    assert_eq!(raw, fs::read(b.join("phantom.raw")).unwrap());
    let side = json(&a.join("phantom.json"));
    assert_eq!(side["dims"], serde_json::json!([24, 24, 24]));
    assert_eq!(side["seed"], 3);
    assert_eq!(side["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(side["config_hash"], json(&b.join("phantom.json"))["config_hash"]);
    assert!(json(&a.join("ellipsoids.json")).as_array().unwrap().len() >= 10);

    // An ellipsoid file round-trips through --spec.
    let c = d.path().join("c");
    ok(epinaf(&c, &["phantom", "--spec", s(&a.join("ellipsoids.json")), "--dims", "24"]));
    assert_eq!(raw, fs::read(c.join("phantom.raw")).unwrap());
}

#[test]
fn bad_phantom_requests_are_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    let out = epinaf(d.path(), &["phantom", "no-such-phantom"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("shepp-logan") && err.contains("lung"), "{err}");

    let out = epinaf(d.path(), &["phantom"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn project_centres_the_arc_and_rejects_long_ranges() {
    let d = tempfile::tempdir().unwrap();
    let out = epinaf(d.path(), &["project", "--phantom", "lung", "--range", "200"]);
    assert_eq!(out.status.code(), Some(2));

    let geom = write_small_geometry(d.path());
    ok(epinaf(
        d.path(),
        &["project", "--phantom", "lung", "--range", "90", "--views", "50", "--geometry", s(&geom), "--samples", "64"],
    ));
    let side = json(&d.path().join("projections.json"));
    let angles: Vec<f64> = side["angles_deg"].as_array().unwrap().iter().map(|a| a.as_f64().unwrap()).collect();
    assert_eq!(angles.len(), 50);
    assert!(angles.iter().all(|&a| (45.0..=135.0).contains(&a)));
    assert!((angles[0] + angles[49] - 180.0).abs() < 1e-9);
    let bytes = fs::metadata(d.path().join("projections.raw")).unwrap().len();
    assert_eq!(bytes, 50 * 16 * 16 * 4);
}

#[test]
fn reconstruct_fdk_scores_against_truth() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(epinaf(p, &["phantom", "shepp-logan", "--dims", "32"]));
    ok(epinaf(p, &["project", "--phantom", "shepp-logan", "--range", "180", "--views", "100", "--samples", "256"]));
    let summary: serde_json::Value = serde_json::from_str(&ok(epinaf(
        p,
        &["reconstruct", "fdk", "--proj", s(&p.join("projections.raw")), "--truth", s(&p.join("phantom.raw")), "--dims", "32"],
    )))
    .unwrap();
    let psnr = summary["psnr"].as_f64().unwrap();
    // Pinned from a reference run (18.88 dB).
    assert!(psnr >= 18.5, "{psnr}");
    assert_eq!(json(&p.join("metrics.json"))["psnr"].as_f64().unwrap(), psnr);
    assert_eq!(json(&p.join("recon.json"))["dims"], serde_json::json!([32, 32, 32]));

    let eval: serde_json::Value = serde_json::from_str(&ok(epinaf(
        p,
        &["eval", "--recon", s(&p.join("recon.raw")), "--truth", s(&p.join("phantom.raw"))],
    )))
    .unwrap();
    // The written volume is f32, so the metric moves slightly.
    assert!((eval["psnr"].as_f64().unwrap() - psnr).abs() < 1e-3);

    let out = epinaf(p, &["reconstruct", "fbp", "--proj", s(&p.join("projections.raw"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn neural_reconstruction_picks_lambda_by_range() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let geom = write_small_geometry(p);
    let cfg = write_small_config(p);
    ok(epinaf(
        p,
        &["project", "--phantom", "lung", "--range", "90", "--views", "8", "--geometry", s(&geom), "--samples", "128"],
    ));
    let proj = p.join("projections.raw");
    let summary: serde_json::Value =
        serde_json::from_str(&ok(epinaf(p, &["reconstruct", "epinaf", "--proj", s(&proj), "--config", s(&cfg)]))).unwrap();
    assert_eq!(summary["lambda"].as_f64(), Some(1e-3));
    assert!(p.join("train").join("train_log.jsonl").exists());

    let t = p.join("naf");
    let summary: serde_json::Value = serde_json::from_str(&ok(epinaf(
        &t,
        &["--seed", "2", "train", "--proj", s(&proj), "--method", "naf", "--config", s(&cfg)],
    )))
    .unwrap();
    assert_eq!(summary["lambda"].as_f64(), Some(0.0));
    assert!(t.join("model.bin").exists() && t.join("recon.raw").exists());
    assert_eq!(json(&t.join("recon.json"))["seed"], 2);

    let out = epinaf(p, &["train", "--proj", s(&proj), "--method", "fdk"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn export_slice_windows_and_checks_bounds() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(epinaf(p, &["phantom", "shepp-logan", "--dims", "32"]));
    let vol = p.join("phantom.raw");
    let (a, b) = (p.join("a.pgm"), p.join("b.pgm"));
    ok(epinaf(p, &["export-slice", "--volume", s(&vol), "--out", s(&a)]));
    ok(epinaf(p, &["export-slice", "--volume", s(&vol), "--axis", "z", "--index", "16", "--out", s(&b)]));
    let img = fs::read(&a).unwrap();
    assert_eq!(img, fs::read(&b).unwrap());
    let header = b"P5\n32 32\n65535\n";
    assert!(img.starts_with(header));
    let pixels: Vec<u16> = img[header.len()..].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    assert_eq!(pixels.len(), 32 * 32);
    let distinct: std::collections::BTreeSet<u16> = pixels.iter().copied().collect();
    assert!(distinct.len() > 3);

    let out = epinaf(p, &["export-slice", "--volume", s(&vol), "--index", "32"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn experiment_runs_every_cell_and_resumes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let cfg = write_small_config(p);
    let run = |dir: &Path| {
        epinaf(
            dir,
            &["experiment", "--config", s(&cfg), "--ranges", "60,90", "--methods", "fdk,epinaf", "--seeds", "0"],
        )
    };
    let out_dir = p.join("exp");
    let table = ok(run(&out_dir));
    assert!(table.starts_with("phantom,method,psnr_60,ssim_60,psnr_90,ssim_90"));
    let csv = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);

    // Epi-NAF logs carry the consistency term once warm-up is over.
    let log = fs::read_to_string(out_dir.join("cells/r090_epinaf_s0/train/train_log.jsonl")).unwrap();
    let ecc: Vec<f64> = log
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["ecc_loss"].as_f64())
        .collect();
    assert!(!ecc.is_empty() && ecc.iter().all(|&e| e > 0.0));

    // Drop one finished cell and the tables, as if the run had been cut short.
    fs::remove_file(out_dir.join("cells/r090_epinaf_s0/report.json")).unwrap();
    fs::remove_file(out_dir.join("results.csv")).unwrap();
    ok(run(&out_dir));
    assert_eq!(fs::read_to_string(out_dir.join("results.csv")).unwrap(), csv);

    let out = epinaf(p, &["experiment", "--ranges", "90,190", "--methods", "fdk"]);
    assert_eq!(out.status.code(), Some(2));
    let spec: ExperimentSpec = serde_json::from_str(&fs::read_to_string(out_dir.join("experiment.json")).unwrap()).unwrap();
    assert_eq!(spec.methods, vec![Method::Fdk, Method::Epinaf]);
}
