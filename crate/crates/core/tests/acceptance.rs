//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measured numbers (run with `--nocapture` to see them).

use std::time::Instant;

use xmt_core::hpo::{
    leaderboard_report, run_search, sample_config, SearchOptions, SearchSpace, TrialResult,
};
use xmt_core::metrics::{fid, frechet_distance, gaussian_stats, FeatureExtractor, GaussianStats};
use xmt_core::models::{
    build_patchgan, build_unet, patchgan_forward, unet_forward, PatchGANConfig, TapedModel,
    UNetConfig,
};
use xmt_core::objectives::{
    discriminator_loss, generator_adv_loss, generator_total_loss, gradient_penalty, l1_loss,
    GanKind, GanObjective,
};
use xmt_core::preprocess::{stitch, tile, tile_plan, PadPolicy};
use xmt_core::raster::Raster;
use xmt_core::rng::RngStream;
use xmt_core::synthetic::{paired_dataset, textured_phantom};
use xmt_core::tensor::{grad_check_multi, Tape, Tensor, Var};
use xmt_core::training::{
    fit, fit_with, l1_validation, load_checkpoint, resume, save_checkpoint, translate, Checkpoint,
    TrainConfig,
};
use xmt_core::Result;

const LN2: f64 = std::f64::consts::LN_2;

fn pass(criterion: &str, detail: String) {
    println!("[PASS] {criterion}: {detail}");
}

// ── Criterion 1: first-order gradient correctness ──

type TapeFn = fn(&mut Tape, &[Var]) -> Result<Var>;

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    const INSTANCES: u64 = 20;
    const TOL_PRIMITIVE: f64 = 1e-6;
    const TOL_COMPOSITE: f64 = 1e-5;

    // Every taped primitive, reduced to a scalar through mean/sum.
    let primitives: Vec<(&str, TapeFn)> = vec![
        ("add", |t, v| {
            let r = t.add(v[0], v[1])?;
            t.mean_all(r)
        }),
        ("sub", |t, v| {
            let r = t.sub(v[0], v[1])?;
            t.mean_all(r)
        }),
        ("mul", |t, v| {
            let r = t.mul(v[0], v[1])?;
            t.mean_all(r)
        }),
        ("div", |t, v| {
            let r = t.div(v[0], v[1])?;
            t.mean_all(r)
        }),
        ("scalar_broadcast", |t, v| {
            let s = t.sum_all(v[1])?;
            let r = t.mul(v[0], s)?;
            let d = t.div(r, s)?;
            t.mean_all(d)
        }),
        ("affine", |t, v| {
            let r = t.affine(v[0], 1.7, -0.3);
            t.mean_all(r)
        }),
        ("abs", |t, v| {
            let r = t.abs(v[0]);
            t.mean_all(r)
        }),
        ("relu", |t, v| {
            let r = t.relu(v[0]);
            t.mean_all(r)
        }),
        ("leaky_relu", |t, v| {
            let r = t.leaky_relu(v[0], 0.2);
            t.mean_all(r)
        }),
        ("tanh", |t, v| {
            let r = t.tanh(v[0]);
            t.mean_all(r)
        }),
        ("sigmoid", |t, v| {
            let r = t.sigmoid(v[0]);
            t.mean_all(r)
        }),
        ("softplus", |t, v| {
            let r = t.softplus(v[0]);
            t.mean_all(r)
        }),
        ("sum_all", |t, v| t.sum_all(v[0])),
        ("mean_then_broadcast", |t, v| {
            let m = t.mean_all(v[0])?;
            let b = t.broadcast_full(m, &[1, 2, 4, 4])?;
            let sq = t.square(b)?;
            t.sum_all(sq)
        }),
        ("spatial_mean", |t, v| {
            let m = t.spatial_mean(v[0])?;
            let sq = t.square(m)?;
            t.sum_all(sq)
        }),
        ("spatial_sum_broadcast", |t, v| {
            let m = t.spatial_sum(v[0])?;
            let b = t.broadcast_spatial(m, 4, 4)?;
            let r = t.mul(b, v[0])?;
            t.mean_all(r)
        }),
        ("per_sample_sum", |t, v| {
            let m = t.per_sample_sum(v[0])?;
            let b = t.broadcast_per_sample(m, 2, 4, 4)?;
            let r = t.mul(b, v[0])?;
            t.mean_all(r)
        }),
        ("concat_slice", |t, v| {
            let c = t.concat_channels(v[0], v[1])?;
            let s = t.slice_channels(c, 1, 3)?;
            let sq = t.square(s)?;
            t.mean_all(sq)
        }),
        ("channel_broadcast", |t, v| {
            let g = t.channel_reduce_sum(v[0])?;
            let b = t.channel_broadcast(g, 2, 4, 4)?;
            let r = t.mul(b, v[0])?;
            t.mean_all(r)
        }),
    ];

    let mut worst_overall: (f64, &str) = (0.0, "none");
    for (name, f) in &primitives {
        for seed in 0..INSTANCES {
            let mut rng = RngStream::derive(1000, seed);
            // Inputs bounded away from the kink/pole regions that finite
            // differences cannot probe (|x| > 0.05, divisor > 0.5).
            let make = |rng: &mut RngStream, floor: f64| {
                let mut t = Tensor::randn(&[2, 2, 4, 4], 0.0, 1.0, rng);
                for v in t.data_mut() {
                    if v.abs() < floor {
                        *v = floor * v.signum() + v.signum() * 0.1;
                    }
                }
                t
            };
            let a = make(&mut rng, 0.05);
            let mut b = make(&mut rng, 0.05);
            if *name == "div" {
                for v in b.data_mut() {
                    *v = v.abs() + 0.5;
                }
            }
            let err = grad_check_multi(*f, &[a, b], 1e-5).unwrap();
            assert!(err < TOL_PRIMITIVE, "{name} seed {seed}: rel err {err}");
            if err > worst_overall.0 {
                worst_overall = (err, name);
            }
        }
    }

    // log/sqrt on strictly positive inputs.
    let positives: Vec<(&str, TapeFn)> = vec![
        ("log", |t, v| {
            let r = t.log(v[0])?;
            t.mean_all(r)
        }),
        ("sqrt", |t, v| {
            let r = t.sqrt(v[0])?;
            t.mean_all(r)
        }),
    ];
    for (name, f) in &positives {
        for seed in 0..INSTANCES {
            let mut rng = RngStream::derive(2000, seed);
            let mut x = Tensor::randn(&[3, 5], 0.0, 1.0, &mut rng);
            for v in x.data_mut() {
                *v = v.abs() + 0.5;
            }
            let err = grad_check_multi(*f, std::slice::from_ref(&x), 1e-5).unwrap();
            assert!(err < TOL_PRIMITIVE, "{name} seed {seed}: rel err {err}");
        }
    }

    // Convolution family.
    for seed in 0..INSTANCES {
        let mut rng = RngStream::derive(3000, seed);
        let x = Tensor::randn(&[1, 2, 5, 5], 0.0, 1.0, &mut rng);
        let k = Tensor::randn(&[3, 2, 3, 3], 0.0, 0.6, &mut rng);
        let err = grad_check_multi(
            |t, v| {
                let c = t.conv2d(v[0], v[1], 2, 1)?;
                t.mean_all(c)
            },
            &[x, k.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < TOL_PRIMITIVE, "conv2d seed {seed}: {err}");

        let u = Tensor::randn(&[1, 3, 3, 3], 0.0, 1.0, &mut rng);
        let err = grad_check_multi(
            |t, v| {
                let c = t.conv_transpose2d(v[0], v[1], 2, 1)?;
                t.mean_all(c)
            },
            &[u, k],
            1e-5,
        )
        .unwrap();
        assert!(err < TOL_PRIMITIVE, "conv_transpose2d seed {seed}: {err}");
    }

    // instance_norm and dropout (fixed mask via a cloned stream).
    for seed in 0..INSTANCES {
        let mut rng = RngStream::derive(4000, seed);
        let x = Tensor::randn(&[2, 2, 4, 4], 0.5, 1.5, &mut rng);
        let gamma = Tensor::randn(&[2], 1.0, 0.1, &mut rng);
        let beta = Tensor::randn(&[2], 0.0, 0.1, &mut rng);
        let err = grad_check_multi(
            |t, v| {
                let n = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
                let sq = t.square(n)?;
                t.mean_all(sq)
            },
            &[x.clone(), gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < TOL_PRIMITIVE, "instance_norm seed {seed}: {err}");

        let mask_rng = RngStream::derive(5000, seed);
        let err = grad_check_multi(
            |t, v| {
                let mut rng = mask_rng.clone();
                let d = t.dropout(v[0], 0.4, &mut rng, true)?;
                t.mean_all(d)
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(err < TOL_PRIMITIVE, "dropout seed {seed}: {err}");
    }

    // Composite: full generator/discriminator losses, gradients checked for
    // every parameter of both networks.
    let unet_cfg = UNetConfig {
        in_channels: 1,
        out_channels: 1,
        base_filters: 2,
        depth: 2,
        dropout_p: 0.0,
        target_size: 8,
    };
    let pg_cfg = PatchGANConfig {
        in_channels: 2,
        base_filters: 2,
        n_layers: 1,
    };
    let mut worst_composite = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = RngStream::derive(6000, seed);
        let g = build_unet(&unet_cfg, &mut rng).unwrap();
        let d = build_patchgan(&pg_cfg, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 1, 8, 8], 0.0, 0.7, &mut rng);
        let y = Tensor::randn(&[1, 1, 8, 8], 0.0, 0.7, &mut rng);

        let names_g: Vec<String> = g.names().map(String::from).collect();
        let names_d: Vec<String> = d.names().map(String::from).collect();
        let mut inputs: Vec<Tensor> = Vec::new();
        for n in &names_g {
            inputs.push(g.get(n).unwrap().clone());
        }
        for n in &names_d {
            inputs.push(d.get(n).unwrap().clone());
        }

        let g_arch = g.arch().clone();
        let d_arch = d.arch().clone();
        let f = |t: &mut Tape, vars: &[Var]| -> Result<Var> {
            let gm = TapedModel {
                arch: g_arch.clone(),
                vars: names_g
                    .iter()
                    .cloned()
                    .zip(vars[..names_g.len()].iter().copied())
                    .collect(),
            };
            let dm = TapedModel {
                arch: d_arch.clone(),
                vars: names_d
                    .iter()
                    .cloned()
                    .zip(vars[names_g.len()..].iter().copied())
                    .collect(),
            };
            let xv = t.constant(x.clone());
            let yv = t.constant(y.clone());
            let mut noise = RngStream::new(0);
            let fake = unet_forward(t, &gm, xv, &mut noise, false)?;
            let logits = patchgan_forward(t, &dm, xv, fake)?;
            let obj = GanObjective::new(GanKind::Lsgan);
            let adv = generator_adv_loss(t, &obj, logits)?;
            let l1 = l1_loss(t, fake, yv)?;
            generator_total_loss(t, adv, l1, 10.0)
        };
        // Composites stack hundreds of relu/leaky/abs kinks; a step of 1e-5
        // straddles whichever pre-activation lands within it. 1e-6 keeps the
        // probe inside the locally-linear region while staying far above
        // roundoff.
        let err = grad_check_multi(f, &inputs, 1e-6).unwrap();
        assert!(err < TOL_COMPOSITE, "composite seed {seed}: rel err {err}");
        worst_composite = worst_composite.max(err);
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        elapsed < 60.0,
        "criterion 1 took {elapsed:.1} s (budget 60 s)"
    );
    pass(
        "criterion 1 (gradient correctness)",
        format!(
            "all primitives < 1e-6 (worst {:.2e} in {}), composite worst {:.2e} < 1e-5, {:.1} s",
            worst_overall.0, worst_overall.1, worst_composite, elapsed
        ),
    );
}

// ── Criterion 2: second-order WGAN-GP path ──

#[test]
fn criterion_2_second_order_penalty() {
    let start = Instant::now();
    let mut rng = RngStream::new(77);
    let y_real = Tensor::randn(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
    let y_fake = Tensor::randn(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
    let k0 = Tensor::randn(&[1, 1, 3, 3], 0.0, 0.7, &mut rng);
    let eps_base = RngStream::new(78);

    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let yr = tape.constant(y_real.clone());
        let yf = tape.constant(y_fake.clone());
        let mut eps = eps_base.clone();
        gradient_penalty(
            tape,
            |t, yhat| t.conv2d(yhat, vars[0], 1, 1),
            yr,
            yf,
            &mut eps,
        )
    };
    let err = grad_check_multi(f, std::slice::from_ref(&k0), 1e-5).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(err < 1e-5, "second-order rel err {err}");
    assert!(
        elapsed < 10.0,
        "criterion 2 took {elapsed:.1} s (budget 10 s)"
    );
    pass(
        "criterion 2 (second-order WGAN-GP)",
        format!("penalty parameter-gradient rel err {err:.2e} < 1e-5, {elapsed:.2} s"),
    );
}

// ── Criterion 3: loss closed forms ──

#[test]
fn criterion_3_loss_closed_forms() {
    // Vanilla at logit zero.
    let mut t = Tape::new();
    let zeros = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let obj = GanObjective::new(GanKind::Vanilla);
    let d = discriminator_loss(&mut t, &obj, zeros, zeros).unwrap();
    assert!((t.item(d).unwrap() - LN2).abs() <= 1e-12);
    let g = generator_adv_loss(&mut t, &obj, zeros).unwrap();
    assert!((t.item(g).unwrap() - LN2).abs() <= 1e-12);

    // LSGAN perfect discriminator.
    let ones = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let ls = GanObjective::new(GanKind::Lsgan);
    let d = discriminator_loss(&mut t, &ls, ones, zeros).unwrap();
    assert_eq!(t.item(d).unwrap(), 0.0);

    // Unit-norm linear discriminator has zero penalty.
    let mut rng = RngStream::new(31);
    let y_real = t.constant(Tensor::randn(&[2, 1, 4, 4], 0.0, 1.0, &mut rng));
    let y_fake = t.constant(Tensor::randn(&[2, 1, 4, 4], 0.0, 1.0, &mut rng));
    let mut k = Tensor::randn(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
    let norm: f64 = k.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in k.data_mut() {
        *v /= norm;
    }
    let kv = t.constant(k);
    let gp = gradient_penalty(
        &mut t,
        |tape, yhat| tape.conv2d(yhat, kv, 1, 0),
        y_real,
        y_fake,
        &mut rng,
    )
    .unwrap();
    assert!(
        t.item(gp).unwrap().abs() <= 1e-10,
        "gp {}",
        t.item(gp).unwrap()
    );

    // Decomposition identity holds exactly on every step of a real run.
    let cfg = TrainConfig {
        objective: GanObjective::new(GanKind::Wgangp),
        epochs_const: 3,
        epochs_decay: 0,
        load_size: 8,
        lambda_l1: 10.0,
        seed: 5,
        ..TrainConfig::default()
    };
    let unet = UNetConfig {
        in_channels: 1,
        out_channels: 3,
        base_filters: 2,
        depth: 2,
        dropout_p: 0.5,
        target_size: 8,
    };
    let pg = PatchGANConfig {
        in_channels: 4,
        base_filters: 2,
        n_layers: 1,
    };
    let data = paired_dataset(3, 8, 55);
    let report = fit(&data, cfg.clone(), &unet, &pg).unwrap();
    for r in &report.history {
        assert_eq!(
            r.losses.g_total,
            r.losses.g_adv + cfg.lambda_l1 * r.losses.g_l1
        );
    }
    pass(
        "criterion 3 (loss closed forms)",
        format!(
            "vanilla(0) = ln2 ± 1e-12, lsgan perfect = 0, unit-norm gp ≤ 1e-10, decomposition exact over {} steps",
            report.history.len()
        ),
    );
}

// ── Criterion 4: synthetic end-to-end translation ──

#[test]
fn criterion_4_synthetic_translation() {
    let start = Instant::now();
    let train_set = paired_dataset(64, 64, 9001);
    let test_set = paired_dataset(16, 64, 9002);

    // Best-model hyperparameters; six epochs over 64 pairs = 384 steps.
    let cfg = TrainConfig {
        objective: GanObjective::new(GanKind::Lsgan),
        lr: 2e-4,
        beta1: 0.4,
        lambda_l1: 10.0,
        epochs_const: 6,
        epochs_decay: 0,
        load_size: 64,
        seed: 2024,
        ..TrainConfig::default()
    };
    let unet = UNetConfig {
        in_channels: 1,
        out_channels: 3,
        base_filters: 16,
        depth: 4,
        dropout_p: 0.5,
        target_size: 64,
    };
    let pg = PatchGANConfig {
        in_channels: 4,
        base_filters: 16,
        n_layers: 2,
    };

    let untrained = Checkpoint::initialize(cfg.clone(), &unet, &pg).unwrap();
    let baseline_l1 = l1_validation(&untrained, &test_set).unwrap();

    let fx = FeatureExtractor::default();
    let rasterize = |ckpt: &Checkpoint| -> Vec<Raster> {
        test_set
            .iter()
            .map(|p| Raster::from_tensor(&translate(ckpt, &p.x, None, None).unwrap()).unwrap())
            .collect()
    };
    let real: Vec<Raster> = test_set
        .iter()
        .map(|p| Raster::from_tensor(&p.y).unwrap())
        .collect();
    let fid_untrained = fid(&rasterize(&untrained), &real, &fx).unwrap();

    let report = fit(&train_set, cfg, &unet, &pg).unwrap();
    let steps = report.history.len();
    assert!(steps <= 500, "{steps} steps exceed the 500-step budget");

    let trained_l1 = l1_validation(&report.checkpoint, &test_set).unwrap();
    let fid_trained = fid(&rasterize(&report.checkpoint), &real, &fx).unwrap();

    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        trained_l1 <= 0.5 * baseline_l1,
        "test L1 {trained_l1:.4} not ≤ 50% of untrained {baseline_l1:.4}"
    );
    assert!(
        fid_trained < fid_untrained,
        "proxy-FID {fid_trained:.2} not below untrained {fid_untrained:.2}"
    );
    assert!(
        elapsed < 600.0,
        "criterion 4 took {elapsed:.0} s (budget 600 s)"
    );
    pass(
        "criterion 4 (synthetic translation)",
        format!(
            "{steps} steps: test L1 {baseline_l1:.4} -> {trained_l1:.4} ({:.0}%), proxy-FID {fid_untrained:.2} -> {fid_trained:.2}, {elapsed:.0} s",
            100.0 * trained_l1 / baseline_l1
        ),
    );
}

// ── Criterion 5: registration recovers synthetic perturbations ──

#[test]
fn criterion_5_registration_dice() {
    let start = Instant::now();
    let fixed = textured_phantom(128, 42);
    let cfg = xmt_core::preprocess::RegistrationConfig::default();

    let mut successes = 0;
    let mut dices = Vec::new();
    for trial in 0..10u64 {
        let mut rng = RngStream::derive(500, trial);
        let angle = (rng.uniform() * 2.0 - 1.0) * 10f64.to_radians();
        let scale = 0.9 + rng.uniform() * 0.2;
        let tx = (rng.uniform() * 2.0 - 1.0) * 8.0;
        let ty = (rng.uniform() * 2.0 - 1.0) * 8.0;
        let c = 63.5;
        let (ca, sa) = (angle.cos() * scale, angle.sin() * scale);
        let t = xmt_core::preprocess::AffineTransform2D::new(
            ca,
            -sa,
            c - (ca * c - sa * c) + tx,
            sa,
            ca,
            c - (sa * c + ca * c) + ty,
        );
        let moving = xmt_core::preprocess::warp(&fixed, &t, (128, 128)).unwrap();
        let result = xmt_core::preprocess::register_affine(&moving, &fixed, &cfg).unwrap();
        let dice =
            xmt_core::preprocess::registration_dice(&moving, &fixed, &result.transform).unwrap();
        dices.push(dice);
        if dice >= 0.93 {
            successes += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        successes >= 9,
        "only {successes}/10 trials reached Dice ≥ 0.93: {dices:?}"
    );
    assert!(
        elapsed < 120.0,
        "criterion 5 took {elapsed:.0} s (budget 120 s)"
    );
    let min = dices.iter().cloned().fold(f64::INFINITY, f64::min);
    pass(
        "criterion 5 (registration)",
        format!("{successes}/10 trials with Dice ≥ 0.93 (min {min:.4}), {elapsed:.0} s"),
    );
}

// ── Criterion 6: tiling round trips ──

#[test]
fn criterion_6_tiling_bit_exact() {
    let plan = tile_plan(4096, 4096, 256, PadPolicy::Reject).unwrap();
    assert_eq!(plan.tiles.len(), 256, "4096/256 grid");

    let with_ids = |tiles: Vec<Raster>| -> Vec<(u32, Raster)> {
        tiles
            .into_iter()
            .enumerate()
            .map(|(i, t)| (i as u32, t))
            .collect()
    };

    let mut checked = 0;
    for seed in 0..100u64 {
        let mut rng = RngStream::derive(600, seed);
        let w = 1 + rng.next_below(300) as usize;
        let h = 1 + rng.next_below(300) as usize;
        let ch = if rng.uniform() < 0.5 { 1 } else { 3 };
        let data: Vec<u8> = (0..w * h * ch)
            .map(|_| (rng.next_u64() % 256) as u8)
            .collect();
        let img = Raster::new(w, h, ch, data).unwrap();

        for ts in [16usize, 64, 256] {
            // Zero-pad policy covers arbitrary dimensions.
            let (tiles, manifest) = tile(&img, ts, PadPolicy::Zero).unwrap();
            let mut shuffled = with_ids(tiles);
            rng.shuffle(&mut shuffled);
            assert_eq!(
                stitch(&shuffled, &manifest).unwrap(),
                img,
                "zero-pad {w}x{h} ts {ts}"
            );

            // Reject policy on matching divisible dimensions.
            let dw = ts * (1 + (seed as usize) % 2);
            let dh = ts * (1 + (seed as usize + 1) % 2);
            let data: Vec<u8> = (0..dw * dh).map(|_| (rng.next_u64() % 256) as u8).collect();
            let div_img = Raster::new(dw, dh, 1, data).unwrap();
            let (tiles, manifest) = tile(&div_img, ts, PadPolicy::Reject).unwrap();
            let mut shuffled = with_ids(tiles);
            rng.shuffle(&mut shuffled);
            assert_eq!(
                stitch(&shuffled, &manifest).unwrap(),
                div_img,
                "reject {dw}x{dh} ts {ts}"
            );
            checked += 2;
        }
    }
    pass(
        "criterion 6 (tiling)",
        format!("{checked} shuffled round trips bit-exact across tile sizes {{16, 64, 256}}, both pad policies"),
    );
}

// ── Criterion 7: Fréchet distance properties ──

#[test]
fn criterion_7_frechet_properties() {
    // Identity and symmetry on random full-rank stats.
    let mut rng = RngStream::new(700);
    for _ in 0..20 {
        let rows: Vec<Vec<f64>> = (0..24)
            .map(|_| (0..6).map(|_| rng.normal_scaled(0.0, 2.0)).collect())
            .collect();
        let other: Vec<Vec<f64>> = (0..24)
            .map(|_| (0..6).map(|_| rng.normal_scaled(0.5, 1.5)).collect())
            .collect();
        let s1 = gaussian_stats(&rows).unwrap();
        let s2 = gaussian_stats(&other).unwrap();
        assert!(frechet_distance(&s1, &s1).unwrap() <= 1e-6);
        let ab = frechet_distance(&s1, &s2).unwrap();
        let ba = frechet_distance(&s2, &s1).unwrap();
        assert!((ab - ba).abs() <= 1e-6);
        assert!(ab >= 0.0);
    }

    // One-dimensional closed forms.
    let g = |mu: f64, var: f64| GaussianStats {
        mu: vec![mu],
        sigma: vec![var],
        dim: 1,
    };
    for _ in 0..50 {
        let (m1, v1) = (rng.normal_scaled(0.0, 3.0), 0.2 + rng.uniform() * 5.0);
        let (m2, v2) = (rng.normal_scaled(0.0, 3.0), 0.2 + rng.uniform() * 5.0);
        let want = (m1 - m2).powi(2) + (v1.sqrt() - v2.sqrt()).powi(2);
        let got = frechet_distance(&g(m1, v1), &g(m2, v2)).unwrap();
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }

    // Rank-deficient covariance from three-image sets must not error.
    let fx = FeatureExtractor::default();
    let a: Vec<Raster> = xmt_core::synthetic::paired_rasters(3, 32, 71)
        .into_iter()
        .map(|(_, y)| y)
        .collect();
    let b: Vec<Raster> = xmt_core::synthetic::paired_rasters(3, 32, 72)
        .into_iter()
        .map(|(_, y)| y)
        .collect();
    let v = fid(&a, &b, &fx).unwrap();
    assert!(v.is_finite() && v >= 0.0);

    pass(
        "criterion 7 (Fréchet properties)",
        format!("identity ≤ 1e-6, symmetry ≤ 1e-6, 1-d closed forms ≤ 1e-9, 3-image rank-deficient fid = {v:.3}"),
    );
}

// ── Criterion 8: bit-level reproducibility ──

#[test]
fn criterion_8_reproducibility() {
    let cfg = TrainConfig {
        objective: GanObjective::new(GanKind::Wgangp),
        epochs_const: 2,
        epochs_decay: 0,
        load_size: 16,
        lambda_l1: 10.0,
        seed: 808,
        ..TrainConfig::default()
    };
    let unet = UNetConfig {
        in_channels: 1,
        out_channels: 3,
        base_filters: 4,
        depth: 2,
        dropout_p: 0.5,
        target_size: 16,
    };
    let pg = PatchGANConfig {
        in_channels: 4,
        base_filters: 4,
        n_layers: 1,
    };
    let data = paired_dataset(4, 16, 81);

    // Identical runs, bit-identical histories and checkpoints.
    let a = fit(&data, cfg.clone(), &unet, &pg).unwrap();
    let b = fit(&data, cfg.clone(), &unet, &pg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoint, b.checkpoint);

    // Resume from the mid-run snapshot replays the uninterrupted run.
    let start = Checkpoint::initialize(cfg.clone(), &unet, &pg).unwrap();
    let mut snapshot = None;
    let _ = fit_with(&data, start, |ckpt, _| {
        if ckpt.epoch == 1 && snapshot.is_none() {
            snapshot = Some(ckpt.clone());
        }
        Ok(())
    })
    .unwrap();
    let resumed = resume(&data, snapshot.expect("epoch-1 snapshot")).unwrap();
    assert_eq!(resumed.checkpoint, a.checkpoint);

    // Disk round trip preserves every bit.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.xmt");
    save_checkpoint(&a.checkpoint, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), a.checkpoint);

    // Leaderboards reproduce bit-for-bit (modulo wall time).
    let space = SearchSpace {
        objectives: vec![GanKind::Lsgan, GanKind::Vanilla],
        lrs: vec![2e-4, 2e-5],
        beta1s: vec![0.5],
        lambdas: vec![10.0],
        epochs_const: vec![1],
    };
    let opts = SearchOptions {
        master_seed: 99,
        base: TrainConfig {
            load_size: 16,
            epochs_decay: 0,
            ..cfg
        },
        unet,
        patchgan: pg,
        compute_fid: false,
        out_dir: None,
    };
    let val = paired_dataset(2, 16, 82);
    let strip = |mut rs: Vec<TrialResult>| {
        for r in &mut rs {
            r.wall_secs = 0.0;
        }
        rs
    };
    let s1 = run_search(&space, 3, &data, &val, &opts).unwrap();
    let s2 = run_search(&space, 3, &data, &val, &opts).unwrap();
    assert_eq!(strip(s1.leaderboard), strip(s2.leaderboard));

    pass(
        "criterion 8 (reproducibility)",
        "histories, checkpoints, resumed runs and leaderboards are bit-identical".to_string(),
    );
}

// ── Criterion 9: HPO fidelity ──

#[test]
fn criterion_9_hpo_grid_and_search() {
    let start = Instant::now();

    // Sampled configs lie exactly on the published grid.
    let space = SearchSpace::default();
    let base = TrainConfig {
        load_size: 16,
        epochs_decay: 0,
        ..TrainConfig::default()
    };
    let mut rng = RngStream::new(900);
    for _ in 0..1000 {
        let cfg = sample_config(&space, &mut rng, &base).unwrap();
        assert!([GanKind::Vanilla, GanKind::Lsgan, GanKind::Wgangp].contains(&cfg.objective.kind));
        assert!([2e-4, 2e-5].contains(&cfg.lr));
        assert!([0.4, 0.5, 0.8].contains(&cfg.beta1));
        assert!([10.0, 50.0, 100.0].contains(&cfg.lambda_l1));
    }

    // Budget-8 seeded search on the synthetic task, deterministic two-row
    // best-models report.
    let search_space = SearchSpace {
        epochs_const: vec![2],
        ..SearchSpace::default()
    };
    let train_set = paired_dataset(6, 16, 91);
    let val_set = paired_dataset(3, 16, 92);
    let unet = UNetConfig {
        in_channels: 1,
        out_channels: 3,
        base_filters: 4,
        depth: 2,
        dropout_p: 0.5,
        target_size: 16,
    };
    let pg = PatchGANConfig {
        in_channels: 4,
        base_filters: 4,
        n_layers: 1,
    };
    let opts = SearchOptions {
        master_seed: 4242,
        base,
        unet,
        patchgan: pg,
        compute_fid: false,
        out_dir: None,
    };
    let outcome = run_search(&search_space, 8, &train_set, &val_set, &opts).unwrap();
    assert_eq!(outcome.leaderboard.len() + outcome.failed.len(), 8);
    for trial in outcome.leaderboard.iter().chain(&outcome.failed) {
        assert!([2e-4, 2e-5].contains(&trial.config.lr));
        assert!([0.4, 0.5, 0.8].contains(&trial.config.beta1));
        assert!([10.0, 50.0, 100.0].contains(&trial.config.lambda_l1));
    }
    // Endpoints ranked ascending.
    let endpoints: Vec<f64> = outcome
        .leaderboard
        .iter()
        .map(|t| t.val_l1.unwrap())
        .collect();
    assert!(endpoints.windows(2).all(|w| w[0] <= w[1]));

    let report = leaderboard_report(&outcome.leaderboard, 2).unwrap();
    assert_eq!(
        report.entries.len(),
        2,
        "two best models, mirroring the published reporting"
    );

    let again = run_search(&search_space, 8, &train_set, &val_set, &opts).unwrap();
    let strip = |mut rs: Vec<TrialResult>| {
        for r in &mut rs {
            r.wall_secs = 0.0;
        }
        rs
    };
    assert_eq!(strip(outcome.leaderboard), strip(again.leaderboard));

    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        elapsed < 1800.0,
        "criterion 9 took {elapsed:.0} s (budget 1800 s)"
    );
    pass(
        "criterion 9 (HPO fidelity)",
        format!(
            "1000 samples on-grid; budget-8 search ranked {} trials deterministically in {elapsed:.0} s",
            endpoints.len()
        ),
    );
}
