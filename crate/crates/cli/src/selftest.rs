//! Built-in verification suite: gradient checks for every tape primitive, a
//! second-order penalty check, Fréchet closed forms, the conv/transpose
//! adjoint identity, and the tile/stitch round trip. Prints one line per
//! check.

use anyhow::{bail, Result};

use xmt_core::metrics::{frechet_distance, GaussianStats};
use xmt_core::objectives::gradient_penalty;
use xmt_core::preprocess::{stitch, tile, PadPolicy};
use xmt_core::raster::Raster;
use xmt_core::rng::RngStream;
use xmt_core::tensor::{grad_check_multi, Tape, Tensor, Var};

fn check(name: &str, run: impl FnOnce() -> Result<()>, failures: &mut usize) {
    match run() {
        Ok(()) => println!("[PASS] {name}"),
        Err(e) => {
            println!("[FAIL] {name}: {e}");
            *failures += 1;
        }
    }
}

fn expect_below(name: &str, value: f64, bound: f64) -> Result<()> {
    if value < bound {
        Ok(())
    } else {
        bail!("{name}: {value} >= {bound}")
    }
}

type TapeFn = fn(&mut Tape, &[Var]) -> xmt_core::Result<Var>;

fn gradient_checks(failures: &mut usize) {
    let mut rng = RngStream::new(2024);
    let x = Tensor::randn(&[1, 2, 5, 5], 0.0, 1.0, &mut rng);
    let pos = {
        let mut t = Tensor::randn(&[12], 0.0, 1.0, &mut rng);
        for v in t.data_mut() {
            *v = v.abs() + 0.5;
        }
        t
    };
    let k = Tensor::randn(&[3, 2, 3, 3], 0.0, 0.6, &mut rng);
    let y = Tensor::randn(&[1, 2, 5, 5], 0.0, 1.0, &mut rng);

    let unary: [(&str, TapeFn); 7] = [
        ("relu", |t, v| {
            let a = t.relu(v[0]);
            t.mean_all(a)
        }),
        ("leaky_relu", |t, v| {
            let a = t.leaky_relu(v[0], 0.2);
            t.mean_all(a)
        }),
        ("tanh", |t, v| {
            let a = t.tanh(v[0]);
            t.mean_all(a)
        }),
        ("sigmoid", |t, v| {
            let a = t.sigmoid(v[0]);
            t.mean_all(a)
        }),
        ("softplus", |t, v| {
            let a = t.softplus(v[0]);
            t.mean_all(a)
        }),
        ("abs", |t, v| {
            let a = t.abs(v[0]);
            t.mean_all(a)
        }),
        ("square", |t, v| {
            let a = t.square(v[0])?;
            t.sum_all(a)
        }),
    ];
    for (name, f) in unary {
        check(
            &format!("gradient: {name}"),
            || {
                let err = grad_check_multi(f, std::slice::from_ref(&x), 1e-5)?;
                expect_below(name, err, 1e-6)
            },
            failures,
        );
    }

    let positive: [(&str, TapeFn); 2] = [
        ("log", |t, v| {
            let a = t.log(v[0])?;
            t.mean_all(a)
        }),
        ("sqrt", |t, v| {
            let a = t.sqrt(v[0])?;
            t.mean_all(a)
        }),
    ];
    for (name, f) in positive {
        check(
            &format!("gradient: {name}"),
            || {
                let err = grad_check_multi(f, std::slice::from_ref(&pos), 1e-5)?;
                expect_below(name, err, 1e-6)
            },
            failures,
        );
    }

    check(
        "gradient: conv2d",
        || {
            let err = grad_check_multi(
                |t, v| {
                    let c = t.conv2d(v[0], v[1], 2, 1)?;
                    t.mean_all(c)
                },
                &[x.clone(), k.clone()],
                1e-5,
            )?;
            expect_below("conv2d", err, 1e-6)
        },
        failures,
    );

    check(
        "gradient: conv_transpose2d",
        || {
            let err = grad_check_multi(
                |t, v| {
                    let c = t.conv_transpose2d(v[0], v[1], 2, 1)?;
                    t.mean_all(c)
                },
                &[
                    Tensor::randn(&[1, 3, 3, 3], 0.0, 1.0, &mut RngStream::new(7)),
                    k.clone(),
                ],
                1e-5,
            )?;
            expect_below("conv_transpose2d", err, 1e-6)
        },
        failures,
    );

    check(
        "gradient: instance_norm",
        || {
            let err = grad_check_multi(
                |t, v| {
                    let n = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
                    let sq = t.square(n)?;
                    t.mean_all(sq)
                },
                &[
                    x.clone(),
                    Tensor::randn(&[2], 1.0, 0.1, &mut RngStream::new(8)),
                    Tensor::randn(&[2], 0.0, 0.1, &mut RngStream::new(9)),
                ],
                1e-5,
            )?;
            expect_below("instance_norm", err, 1e-6)
        },
        failures,
    );

    check(
        "gradient: concat/slice",
        || {
            let err = grad_check_multi(
                |t, v| {
                    let c = t.concat_channels(v[0], v[1])?;
                    let s = t.slice_channels(c, 1, 3)?;
                    let sq = t.square(s)?;
                    t.mean_all(sq)
                },
                &[x.clone(), y.clone()],
                1e-5,
            )?;
            expect_below("concat/slice", err, 1e-6)
        },
        failures,
    );

    check(
        "gradient: second-order penalty (one-conv critic)",
        || {
            let mut rng = RngStream::new(11);
            let y_real = Tensor::randn(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
            let y_fake = Tensor::randn(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
            let k0 = Tensor::randn(&[1, 1, 3, 3], 0.0, 0.7, &mut rng);
            let eps_base = RngStream::new(13);
            let err = grad_check_multi(
                |tape, vars| {
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
                },
                std::slice::from_ref(&k0),
                1e-5,
            )?;
            expect_below("penalty", err, 1e-5)
        },
        failures,
    );
}

/// Run the whole suite; returns the failure count.
pub fn run() -> usize {
    let mut failures = 0;

    gradient_checks(&mut failures);

    check(
        "frechet: one-dimensional closed forms",
        || {
            let g = |mu: f64, var: f64| GaussianStats {
                mu: vec![mu],
                sigma: vec![var],
                dim: 1,
            };
            let d = frechet_distance(&g(0.0, 1.0), &g(2.0, 1.0))?;
            if (d - 4.0).abs() > 1e-9 {
                bail!("mu case: {d} vs 4");
            }
            let d = frechet_distance(&g(3.0, 1.0), &g(3.0, 4.0))?;
            if (d - 1.0).abs() > 1e-9 {
                bail!("sigma case: {d} vs 1");
            }
            let d = frechet_distance(&g(1.0, 2.0), &g(1.0, 2.0))?;
            expect_below("self distance", d.abs(), 1e-9)
        },
        &mut failures,
    );

    check(
        "adjoint: conv2d vs conv_transpose2d",
        || {
            // 4x4 kernel, stride 2, pad 1: the network geometry, where the
            // transpose output lands exactly on the convolution input size.
            let mut t = Tape::new();
            let mut rng = RngStream::new(17);
            let x = t.constant(Tensor::randn(&[1, 2, 6, 6], 0.0, 1.0, &mut rng));
            let k = t.constant(Tensor::randn(&[3, 2, 4, 4], 0.0, 1.0, &mut rng));
            let cx = t.conv2d(x, k, 2, 1)?;
            let yv = t.constant(Tensor::randn(t.shape(cx), 0.0, 1.0, &mut rng));
            let cty = t.conv_transpose2d(yv, k, 2, 1)?;
            let lhs: f64 = t
                .value(cx)
                .data()
                .iter()
                .zip(t.value(yv).data())
                .map(|(a, b)| a * b)
                .sum();
            let rhs: f64 = t
                .value(x)
                .data()
                .iter()
                .zip(t.value(cty).data())
                .map(|(a, b)| a * b)
                .sum();
            expect_below("adjoint", (lhs - rhs).abs(), 1e-10 * lhs.abs().max(1.0))
        },
        &mut failures,
    );

    check(
        "tiling: stitch inverts tile",
        || {
            let mut rng = RngStream::new(19);
            let data: Vec<u8> = (0..96 * 64 * 3)
                .map(|_| (rng.next_u64() % 256) as u8)
                .collect();
            let img = Raster::new(96, 64, 3, data)?;
            let (tiles, manifest) = tile(&img, 16, PadPolicy::Zero)?;
            let with_ids: Vec<(u32, Raster)> = tiles
                .into_iter()
                .enumerate()
                .map(|(i, t)| (i as u32, t))
                .collect();
            let back = stitch(&with_ids, &manifest)?;
            if back != img {
                bail!("round trip changed pixels");
            }
            Ok(())
        },
        &mut failures,
    );

    failures
}
