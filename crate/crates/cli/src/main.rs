//! `xmt`: cross-modal paired image translation at desk scale — preprocess
//! (downsample, register, tile, stitch), train, translate, evaluate, search,
//! selftest.

mod config;
mod dataset;
mod figure;
mod selftest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use xmt_core::hpo::{leaderboard_report, run_search, SearchOptions, SearchSpace};
use xmt_core::metrics::{evaluate_pairs, FeatureExtractor, MetricReport};
use xmt_core::preprocess::{
    downsample, register_affine, registration_dice, stitch, tile, PadPolicy, RegistrationConfig,
    Similarity, TileManifest,
};
use xmt_core::raster::Raster;
use xmt_core::training::{
    fit_with, history_to_csv, load_checkpoint, save_checkpoint, translate, Checkpoint, StepRecord,
};

#[derive(Parser)]
#[command(
    name = "xmt",
    version,
    about = "Paired cross-modal image translation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Box-filter downsample a PNG by a real factor >= 1.
    Downsample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        factor: f64,
    },
    /// Affine-register a moving image onto a fixed image.
    Register {
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        /// Output JSON holding the 2x3 matrix.
        #[arg(long = "out-transform")]
        out_transform: PathBuf,
        /// Output JSON holding matrix, residual, Dice and convergence info.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_parser = ["ncc", "mse"], default_value = "ncc")]
        similarity: String,
        #[arg(long, default_value_t = 250)]
        iterations: usize,
    },
    /// Cut a PNG into non-overlapping square tiles plus a manifest.
    Tile {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long, value_parser = ["reject", "zero"], default_value = "zero")]
        pad: String,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Reassemble tiles by manifest coordinates.
    Stitch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "tiles-dir")]
        tiles_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the translation model on paired directories.
    Train {
        /// JSON run config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "data-A")]
        data_a: PathBuf,
        #[arg(long = "data-B")]
        data_b: PathBuf,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Translate one input image with a trained checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tile the input and stitch per-tile translations.
        #[arg(long = "tile-size")]
        tile_size: Option<usize>,
        /// Re-enable dropout-as-noise with this seed (default: deterministic).
        #[arg(long = "noise-seed")]
        noise_seed: Option<u64>,
        /// Ground-truth PNG; together with --figure emits a comparison panel.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Output path of the comparison figure.
        #[arg(long)]
        figure: Option<PathBuf>,
    },
    /// Score generated images against references (proxy-FID / proxy-LPIPS / L1).
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Optional input-modality directory for a second comparison block.
        #[arg(long)]
        mri: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Randomized hyperparameter search over the tuning grid.
    Search {
        /// JSON search space; defaults to the full published grid.
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long)]
        budget: usize,
        #[arg(long = "data-A")]
        data_a: PathBuf,
        #[arg(long = "data-B")]
        data_b: PathBuf,
        /// Held-out pair directories; defaults to an 80/20 split of the data.
        #[arg(long = "val-A")]
        val_a: Option<PathBuf>,
        #[arg(long = "val-B")]
        val_b: Option<PathBuf>,
        /// Base run config for the non-searched fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also compute proxy-FID per trial.
        #[arg(long = "with-fid")]
        with_fid: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in gradient-check and metric verification suites.
    Selftest,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn pad_policy(s: &str) -> PadPolicy {
    match s {
        "reject" => PadPolicy::Reject,
        _ => PadPolicy::Zero,
    }
}

fn cmd_register(
    moving: &Path,
    fixed: &Path,
    out_transform: &Path,
    report: &Path,
    similarity: &str,
    iterations: usize,
) -> Result<()> {
    let moving_img = Raster::load_png(moving)?;
    let fixed_img = Raster::load_png(fixed)?;
    let cfg = RegistrationConfig {
        similarity: if similarity == "mse" {
            Similarity::Mse
        } else {
            Similarity::Ncc
        },
        iterations_per_level: iterations,
        ..RegistrationConfig::default()
    };
    let result = register_affine(&moving_img, &fixed_img, &cfg)?;
    let dice = registration_dice(&moving_img, &fixed_img, &result.transform)?;
    write_json(
        out_transform,
        &serde_json::json!({ "matrix": result.transform.matrix }),
    )?;
    write_json(
        report,
        &serde_json::json!({
            "matrix": result.transform.matrix,
            "residual": result.residual,
            "dice": dice,
            "converged": result.converged,
            "iterations": result.iterations,
            "similarity": similarity,
        }),
    )?;
    println!(
        "registered: residual {:.6}, dice {:.4}, converged {}",
        result.residual, dice, result.converged
    );
    Ok(())
}

fn cmd_tile(
    input: &Path,
    size: usize,
    pad: PadPolicy,
    out_dir: &Path,
    manifest_path: &Path,
) -> Result<()> {
    let image = Raster::load_png(input)?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| anyhow!("input {} has no usable stem", input.display()))?;
    let (tiles, manifest) = tile(&image, size, pad)?;
    std::fs::create_dir_all(out_dir)?;
    for (raster, entry) in tiles.iter().zip(&manifest.tiles) {
        let name = format!("{stem}_r{}_c{}.png", entry.row, entry.col);
        raster.save_png(&out_dir.join(name))?;
    }
    write_json(manifest_path, &manifest)?;
    println!(
        "wrote {} tiles and manifest {}",
        manifest.tiles.len(),
        manifest_path.display()
    );
    Ok(())
}

fn cmd_stitch(manifest_path: &Path, tiles_dir: &Path, out: &Path) -> Result<()> {
    let manifest: TileManifest = serde_json::from_str(
        &std::fs::read_to_string(manifest_path)
            .with_context(|| format!("reading {}", manifest_path.display()))?,
    )
    .context("parsing manifest JSON")?;

    // Recover the stem from any r0_c0 tile in the directory.
    let mut stem = None;
    for entry in std::fs::read_dir(tiles_dir)? {
        let path = entry?.path();
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            if let Some(prefix) = name.strip_suffix("_r0_c0.png") {
                if stem.replace(prefix.to_string()).is_some() {
                    bail!(
                        "multiple tile sets in {} (more than one *_r0_c0.png)",
                        tiles_dir.display()
                    );
                }
            }
        }
    }
    let stem = stem.ok_or_else(|| anyhow!("no *_r0_c0.png tile in {}", tiles_dir.display()))?;

    let mut tiles = Vec::with_capacity(manifest.tiles.len());
    for entry in &manifest.tiles {
        let path = tiles_dir.join(format!("{stem}_r{}_c{}.png", entry.row, entry.col));
        if !path.exists() {
            bail!("missing tile {}", path.display());
        }
        tiles.push((entry.id, Raster::load_png(&path)?));
    }
    let image = stitch(&tiles, &manifest)?;
    image.save_png(out)?;
    println!("stitched {} -> {}", tiles_dir.display(), out.display());
    Ok(())
}

fn cmd_train(config: Option<&Path>, data_a: &Path, data_b: &Path, out_dir: &Path) -> Result<()> {
    let run = match config {
        Some(path) => config::parse_config(path)?,
        None => config::default_config(),
    };
    let ds = dataset::load_pairs(data_a, data_b)?;
    for (stem, pair) in ds.stems.iter().zip(&ds.pairs) {
        let (_, _, h, w) = pair.x.dims4()?;
        if h != run.train.load_size || w != run.train.load_size {
            bail!(
                "pair {stem:?} is {w}x{h}, but the configured load size is {}",
                run.train.load_size
            );
        }
    }
    std::fs::create_dir_all(out_dir)?;
    println!(
        "experiment {:?}: load size {}, {} objective, {} pairs",
        run.experiment,
        run.train.load_size,
        run.train.objective.kind,
        ds.pairs.len()
    );
    let start = Checkpoint::initialize(run.train.clone(), &run.unet, &run.patchgan)?;
    let total = start.config.total_epochs();
    let latest = out_dir.join("checkpoint_latest.xmt");
    let report = fit_with(&ds.pairs, start, |ckpt, records: &[StepRecord]| {
        save_checkpoint(ckpt, &latest)?;
        if let Some(last) = records.last() {
            println!(
                "epoch {}/{}: d_loss {:.4}, g_total {:.4}, g_l1 {:.4}, lr {:.2e}",
                ckpt.epoch,
                total,
                last.losses.d_loss,
                last.losses.g_total,
                last.losses.g_l1,
                last.lr
            );
        }
        Ok(())
    })?;
    save_checkpoint(&report.checkpoint, &out_dir.join("checkpoint.xmt"))?;
    std::fs::write(out_dir.join("history.csv"), history_to_csv(&report.history))?;
    println!(
        "trained {} epochs over {} pairs; final checkpoint {}",
        report.checkpoint.epoch,
        ds.pairs.len(),
        out_dir.join("checkpoint.xmt").display()
    );
    Ok(())
}

fn cmd_translate(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    tile_size: Option<usize>,
    noise_seed: Option<u64>,
    truth: Option<&Path>,
    figure_path: Option<&Path>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let image = Raster::load_png(input)?.to_gray();
    let x = image.to_tensor();
    let y = translate(&ckpt, &x, tile_size, noise_seed)?;
    let output = Raster::from_tensor(&y)?;
    output.save_png(out)?;
    println!("translated {} -> {}", input.display(), out.display());

    match (truth, figure_path) {
        (Some(truth), Some(fig)) => {
            let truth_img = Raster::load_png(truth)?;
            figure::emit_comparison_figure(&image, &output, &truth_img, fig)?;
            println!("figure {}", fig.display());
        }
        (None, None) => {}
        _ => bail!("--truth and --figure must be given together"),
    }
    Ok(())
}

fn cmd_evaluate(generated: &Path, reference: &Path, mri: Option<&Path>, out: &Path) -> Result<()> {
    let fx = FeatureExtractor::default();
    let gen = dataset::load_set(generated)?;
    let refs = dataset::load_set(reference)?;
    let mut reports: Vec<MetricReport> = vec![evaluate_pairs(
        &gen,
        &refs,
        "generated-vs-real-histology",
        &fx,
    )?];
    if let Some(mri_dir) = mri {
        let mris = dataset::load_set(mri_dir)?;
        reports.push(evaluate_pairs(&gen, &mris, "generated-vs-real-MRI", &fx)?);
    }
    write_json(out, &reports)?;
    for r in &reports {
        println!(
            "{}: proxy-FID {:.4}, proxy-LPIPS {:.4}, L1 {:.4} over {} images",
            r.comparison, r.fid, r.lpips_mean, r.l1_mean, r.n_images
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(
    space: Option<&Path>,
    budget: usize,
    data_a: &Path,
    data_b: &Path,
    val_a: Option<&Path>,
    val_b: Option<&Path>,
    config: Option<&Path>,
    with_fid: bool,
    out: &Path,
) -> Result<()> {
    let space: SearchSpace = match space {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
            .with_context(|| format!("parsing search space {}", path.display()))?,
        None => SearchSpace::default(),
    };
    let run = match config {
        Some(path) => config::parse_config(path)?,
        None => config::default_config(),
    };

    let train_ds = dataset::load_pairs(data_a, data_b)?;
    let (train_pairs, val_pairs) = match (val_a, val_b) {
        (Some(a), Some(b)) => (train_ds.pairs, dataset::load_pairs(a, b)?.pairs),
        (None, None) => {
            // Deterministic 80/20 split over stem-sorted pairs.
            let n_val = (train_ds.pairs.len() / 5).max(1);
            if train_ds.pairs.len() <= n_val {
                bail!("dataset too small to split; provide --val-A/--val-B");
            }
            let split = train_ds.pairs.len() - n_val;
            let mut pairs = train_ds.pairs;
            let val = pairs.split_off(split);
            (pairs, val)
        }
        _ => bail!("--val-A and --val-B must be given together"),
    };

    std::fs::create_dir_all(out)?;
    let opts = SearchOptions {
        master_seed: run.train.seed,
        base: run.train.clone(),
        unet: run.unet.clone(),
        patchgan: run.patchgan.clone(),
        compute_fid: with_fid,
        out_dir: Some(out.to_path_buf()),
    };
    let outcome = run_search(&space, budget, &train_pairs, &val_pairs, &opts)?;
    let report = leaderboard_report(&outcome.leaderboard, 2)?;
    write_json(&out.join("leaderboard.json"), &outcome.leaderboard)?;
    write_json(&out.join("best_models.json"), &report)?;
    std::fs::write(out.join("best_models.txt"), report.to_text_table())?;
    if !outcome.failed.is_empty() {
        write_json(&out.join("failed_trials.json"), &outcome.failed)?;
    }
    print!("{}", report.to_text_table());
    println!(
        "{} ranked trials ({} failed); reports in {}",
        outcome.leaderboard.len(),
        outcome.failed.len(),
        out.display()
    );
    Ok(())
}

fn run() -> Result<()> {
    xmt_core::runtime::configure_threads_from_env();
    let cli = Cli::parse();
    match cli.command {
        Command::Downsample { input, out, factor } => {
            let image = Raster::load_png(&input)?;
            let small = downsample(&image, factor)?;
            small.save_png(&out)?;
            println!(
                "{}x{} -> {}x{}",
                image.width(),
                image.height(),
                small.width(),
                small.height()
            );
            Ok(())
        }
        Command::Register {
            moving,
            fixed,
            out_transform,
            report,
            similarity,
            iterations,
        } => cmd_register(
            &moving,
            &fixed,
            &out_transform,
            &report,
            &similarity,
            iterations,
        ),
        Command::Tile {
            input,
            size,
            pad,
            out_dir,
            manifest,
        } => cmd_tile(&input, size, pad_policy(&pad), &out_dir, &manifest),
        Command::Stitch {
            manifest,
            tiles_dir,
            out,
        } => cmd_stitch(&manifest, &tiles_dir, &out),
        Command::Train {
            config,
            data_a,
            data_b,
            out_dir,
        } => cmd_train(config.as_deref(), &data_a, &data_b, &out_dir),
        Command::Translate {
            checkpoint,
            input,
            out,
            tile_size,
            noise_seed,
            truth,
            figure,
        } => cmd_translate(
            &checkpoint,
            &input,
            &out,
            tile_size,
            noise_seed,
            truth.as_deref(),
            figure.as_deref(),
        ),
        Command::Evaluate {
            generated,
            reference,
            mri,
            out,
        } => cmd_evaluate(&generated, &reference, mri.as_deref(), &out),
        Command::Search {
            space,
            budget,
            data_a,
            data_b,
            val_a,
            val_b,
            config,
            with_fid,
            out,
        } => cmd_search(
            space.as_deref(),
            budget,
            &data_a,
            &data_b,
            val_a.as_deref(),
            val_b.as_deref(),
            config.as_deref(),
            with_fid,
            &out,
        ),
        Command::Selftest => {
            let failures = selftest::run();
            if failures > 0 {
                bail!("{failures} selftest check(s) failed");
            }
            println!("all selftest checks passed");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
