//! End-to-end tests of the `xmt` binary: every subcommand, exit-code
//! contract, and the preprocess -> train -> translate -> evaluate flow on a
//! miniature dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xmt_core::raster::Raster;
use xmt_core::rng::RngStream;
use xmt_core::synthetic::paired_rasters;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xmt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output, context: &str) {
    assert!(
        out.status.success(),
        "{context} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn random_png(path: &Path, w: usize, h: usize, ch: usize, seed: u64) -> Raster {
    let mut rng = RngStream::new(seed);
    let data = (0..w * h * ch)
        .map(|_| (rng.next_u64() % 256) as u8)
        .collect();
    let r = Raster::new(w, h, ch, data).unwrap();
    r.save_png(path).unwrap();
    r
}

#[test]
fn unknown_command_exits_2_with_usage() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.to_lowercase().contains("usage"), "{stderr}");
}

#[test]
fn missing_required_flag_exits_2() {
    let out = run(&["downsample", "--factor", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failure_paths_exit_nonzero_with_error_prefix() {
    let out = run(&[
        "downsample",
        "--in",
        "/nonexistent.png",
        "--out",
        "/tmp/x.png",
        "--factor",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: "), "{stderr}");
    assert_eq!(
        stderr.lines().count(),
        1,
        "single-line diagnostic: {stderr}"
    );
}

#[test]
fn downsample_halves_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("big.png");
    random_png(&input, 64, 40, 1, 1);
    let output = dir.path().join("small.png");
    let out = run(&[
        "downsample",
        "--in",
        input.to_str().unwrap(),
        "--out",
        output.to_str().unwrap(),
        "--factor",
        "2",
    ]);
    assert_ok(&out, "downsample");
    let small = Raster::load_png(&output).unwrap();
    assert_eq!((small.width(), small.height()), (32, 20));
}

#[test]
fn tile_then_stitch_is_bit_exact_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("img.png");
    let original = random_png(&input, 40, 24, 3, 2);
    let tiles_dir = dir.path().join("tiles");
    let manifest = dir.path().join("manifest.json");
    let out = run(&[
        "tile",
        "--in",
        input.to_str().unwrap(),
        "--size",
        "16",
        "--pad",
        "zero",
        "--out-dir",
        tiles_dir.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert_ok(&out, "tile");
    // ceil(40/16) * ceil(24/16) = 3 * 2 tiles named by row/col.
    assert!(tiles_dir.join("img_r0_c0.png").exists());
    assert!(tiles_dir.join("img_r1_c2.png").exists());

    let restored = dir.path().join("restored.png");
    let out = run(&[
        "stitch",
        "--manifest",
        manifest.to_str().unwrap(),
        "--tiles-dir",
        tiles_dir.to_str().unwrap(),
        "--out",
        restored.to_str().unwrap(),
    ]);
    assert_ok(&out, "stitch");
    assert_eq!(Raster::load_png(&restored).unwrap(), original);
}

#[test]
fn stitch_reports_missing_tile() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("img.png");
    random_png(&input, 32, 32, 1, 3);
    let tiles_dir = dir.path().join("tiles");
    let manifest = dir.path().join("manifest.json");
    assert_ok(
        &run(&[
            "tile",
            "--in",
            input.to_str().unwrap(),
            "--size",
            "16",
            "--pad",
            "zero",
            "--out-dir",
            tiles_dir.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
        ]),
        "tile",
    );
    std::fs::remove_file(tiles_dir.join("img_r1_c0.png")).unwrap();
    let out = run(&[
        "stitch",
        "--manifest",
        manifest.to_str().unwrap(),
        "--tiles-dir",
        tiles_dir.to_str().unwrap(),
        "--out",
        dir.path().join("x.png").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("img_r1_c0"), "{stderr}");
}

#[test]
fn register_emits_transform_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let fixed_img = xmt_core::synthetic::textured_phantom(96, 7);
    let fixed = dir.path().join("fixed.png");
    fixed_img.save_png(&fixed).unwrap();
    // Shift by (4, 2): registration should report a good Dice.
    let t = xmt_core::preprocess::AffineTransform2D::new(1.0, 0.0, 4.0, 0.0, 1.0, 2.0);
    let moving_img = xmt_core::preprocess::warp(&fixed_img, &t, (96, 96)).unwrap();
    let moving = dir.path().join("moving.png");
    moving_img.save_png(&moving).unwrap();

    let transform = dir.path().join("transform.json");
    let report = dir.path().join("report.json");
    let out = run(&[
        "register",
        "--moving",
        moving.to_str().unwrap(),
        "--fixed",
        fixed.to_str().unwrap(),
        "--out-transform",
        transform.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_ok(&out, "register");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(report["dice"].as_f64().unwrap() > 0.9, "{report}");
    let transform: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&transform).unwrap()).unwrap();
    assert_eq!(transform["matrix"].as_array().unwrap().len(), 2);
}

fn write_pairs(dir: &Path, n: usize, size: usize, seed: u64) -> (PathBuf, PathBuf) {
    let a = dir.join("A");
    let b = dir.join("B");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    for (i, (x, y)) in paired_rasters(n, size, seed).into_iter().enumerate() {
        x.save_png(&a.join(format!("pair{i:02}.png"))).unwrap();
        y.save_png(&b.join(format!("pair{i:02}.png"))).unwrap();
    }
    (a, b)
}

const TINY_CONFIG: &str = r#"{
    "experiment": "custom",
    "load_size": 16,
    "objective": "lsgan",
    "lambda_L1": 50,
    "epochs_const": 2,
    "epochs_decay": 0,
    "seed": 3,
    "unet_depth": 2,
    "unet_base_filters": 4,
    "patchgan_layers": 1,
    "patchgan_base_filters": 4
}"#;

#[test]
fn train_translate_evaluate_flow() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pairs(dir.path(), 4, 16, 11);
    let config = dir.path().join("config.json");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let run_dir = dir.path().join("run");

    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data-A",
        a.to_str().unwrap(),
        "--data-B",
        b.to_str().unwrap(),
        "--out-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert_ok(&out, "train");
    let checkpoint = run_dir.join("checkpoint.xmt");
    assert!(checkpoint.exists());
    assert!(run_dir.join("checkpoint_latest.xmt").exists());
    let history = std::fs::read_to_string(run_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,step,d_loss,g_adv,g_l1,gp,g_total,lr"));
    assert_eq!(
        history.lines().count(),
        1 + 2 * 4,
        "header plus 2 epochs x 4 steps"
    );

    // Translate every input; write generated set for evaluation.
    let gen_dir = dir.path().join("generated");
    std::fs::create_dir_all(&gen_dir).unwrap();
    for i in 0..4 {
        let input = a.join(format!("pair{i:02}.png"));
        let output = gen_dir.join(format!("pair{i:02}.png"));
        let out = run(&[
            "translate",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--in",
            input.to_str().unwrap(),
            "--out",
            output.to_str().unwrap(),
        ]);
        assert_ok(&out, "translate");
        let img = Raster::load_png(&output).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (16, 16, 3));
    }

    // Tiled path keeps input dimensions.
    let tiled_out = dir.path().join("tiled.png");
    let out = run(&[
        "translate",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--in",
        a.join("pair00.png").to_str().unwrap(),
        "--out",
        tiled_out.to_str().unwrap(),
        "--tile-size",
        "16",
    ]);
    assert_ok(&out, "translate --tile-size");
    let img = Raster::load_png(&tiled_out).unwrap();
    assert_eq!((img.width(), img.height()), (16, 16));

    // Comparison figure: 3 panels + 2 gutters wide, label strip on top.
    let figure = dir.path().join("figure.png");
    let out = run(&[
        "translate",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--in",
        a.join("pair00.png").to_str().unwrap(),
        "--out",
        dir.path().join("fig_out.png").to_str().unwrap(),
        "--truth",
        b.join("pair00.png").to_str().unwrap(),
        "--figure",
        figure.to_str().unwrap(),
    ]);
    assert_ok(&out, "translate --figure");
    let fig = Raster::load_png(&figure).unwrap();
    assert_eq!(fig.width(), 3 * 16 + 2 * 4);

    // Evaluate generated against ground truth, with the MRI comparison block.
    let report_path = dir.path().join("report.json");
    let out = run(&[
        "evaluate",
        "--generated",
        gen_dir.to_str().unwrap(),
        "--reference",
        b.to_str().unwrap(),
        "--mri",
        a.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_ok(&out, "evaluate");
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let blocks = reports.as_array().unwrap();
    assert_eq!(blocks.len(), 2);
    assert_eq!(blocks[0]["comparison"], "generated-vs-real-histology");
    assert_eq!(blocks[1]["comparison"], "generated-vs-real-MRI");
    assert_eq!(blocks[0]["n_images"], 4);
    assert!(blocks[0]["notes"].as_str().unwrap().contains("proxy"));
}

#[test]
fn search_writes_two_row_best_models_report() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pairs(dir.path(), 5, 16, 23);
    let config = dir.path().join("config.json");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let space = dir.path().join("space.json");
    std::fs::write(
        &space,
        r#"{"objectives": ["lsgan", "vanilla"], "lrs": [2e-4, 2e-5], "beta1s": [0.5], "lambdas": [10.0, 100.0], "epochs_const": [1]}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("search");

    let out = run(&[
        "search",
        "--space",
        space.to_str().unwrap(),
        "--budget",
        "3",
        "--data-A",
        a.to_str().unwrap(),
        "--data-B",
        b.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out, "search");
    let leaderboard: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("leaderboard.json")).unwrap())
            .unwrap();
    assert_eq!(leaderboard.as_array().unwrap().len(), 3);
    let best: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("best_models.json")).unwrap())
            .unwrap();
    assert_eq!(best["entries"].as_array().unwrap().len(), 2);
    assert!(out_dir.join("best_models.txt").exists());
    assert!(out_dir.join("trial_000.xmt").exists());
}

#[test]
fn selftest_passes_and_prints_check_lines() {
    let out = run(&["selftest"]);
    assert_ok(&out, "selftest");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.lines().filter(|l| l.starts_with("[PASS]")).count() >= 10,
        "{stdout}"
    );
    assert!(!stdout.contains("[FAIL]"), "{stdout}");
}

#[test]
fn config_typo_is_reported_with_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pairs(dir.path(), 2, 16, 29);
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"lamda_L1": 10}"#).unwrap();
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data-A",
        a.to_str().unwrap(),
        "--data-B",
        b.to_str().unwrap(),
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lambda_L1"), "{stderr}");
}
