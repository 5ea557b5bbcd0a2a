//! Raw numeric kernels behind the taped convolution primitives.
//!
//! Three kernels form a closed set under differentiation: the gradient of
//! each one is expressible with the other two, which is what makes the taped
//! backward pass differentiable again.

use super::Tensor;
use crate::error::{Error, Result};

/// Output spatial dim of a convolution: `floor((in + 2*pad - k) / stride) + 1`.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Natural output spatial dim of a transposed convolution:
/// `(in - 1) * stride - 2*pad + k`.
pub fn conv_transpose_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let grown = (input - 1) * stride + k;
    if grown <= 2 * pad {
        return None;
    }
    Some(grown - 2 * pad)
}

fn check_conv_args(stride: usize, pad: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::InvalidConfig("conv stride must be >= 1".into()));
    }
    let _ = pad;
    Ok(())
}

/// Direct convolution. `x: [n, ci, h, w]`, `k: [co, ci, kh, kw]`.
pub fn conv2d_raw(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    check_conv_args(stride, pad)?;
    let (n, ci, h, w) = x.dims4()?;
    let (co, kci, kh, kw) = k.dims4()?;
    if kci != ci {
        return Err(Error::shape(
            "conv2d",
            format!("kernel in_ch {ci}"),
            format!("{kci}"),
        ));
    }
    let ho = conv_out_dim(h, kh, stride, pad).ok_or_else(|| {
        Error::shape(
            "conv2d",
            "positive output height",
            format!("h={h} k={kh} pad={pad}"),
        )
    })?;
    let wo = conv_out_dim(w, kw, stride, pad).ok_or_else(|| {
        Error::shape(
            "conv2d",
            "positive output width",
            format!("w={w} k={kw} pad={pad}"),
        )
    })?;

    let xs = x.data();
    let ks = k.data();
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            let obase = (b * co + o) * ho * wo;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * w;
                let kbase = (o * ci + c) * kh * kw;
                for u in 0..kh {
                    for v in 0..kw {
                        let weight = ks[kbase + u * kw + v];
                        for oh in 0..ho {
                            let ih = (oh * stride + u) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * w;
                            let orow = obase + oh * wo;
                            for ow in 0..wo {
                                let iw = (ow * stride + v) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                out[orow + ow] += weight * xs[xrow + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out)
}

/// Transposed convolution (adjoint of `conv2d_raw` in its spatial map).
/// `x: [n, co, h, w]`, `k: [co, ci, kh, kw]` -> `[n, ci, H, W]`.
///
/// `out_hw` overrides the natural output size by appending zero rows/columns
/// (needed when it acts as the gradient of a convolution whose input size was
/// not exactly divisible); the extension must be < stride.
pub fn conv_transpose2d_raw(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
    out_hw: Option<(usize, usize)>,
) -> Result<Tensor> {
    check_conv_args(stride, pad)?;
    let (n, cx, h, w) = x.dims4()?;
    let (co, ci, kh, kw) = k.dims4()?;
    if cx != co {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input ch {co}"),
            format!("{cx}"),
        ));
    }
    let nat_h = conv_transpose_out_dim(h, kh, stride, pad).ok_or_else(|| {
        Error::shape(
            "conv_transpose2d",
            "positive output height",
            format!("h={h} k={kh} pad={pad}"),
        )
    })?;
    let nat_w = conv_transpose_out_dim(w, kw, stride, pad).ok_or_else(|| {
        Error::shape(
            "conv_transpose2d",
            "positive output width",
            format!("w={w} k={kw} pad={pad}"),
        )
    })?;
    let (oh, ow) = out_hw.unwrap_or((nat_h, nat_w));
    if oh < nat_h || ow < nat_w || oh - nat_h >= stride || ow - nat_w >= stride {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("output override within [{nat_h}, {})", nat_h + stride),
            format!("{oh}x{ow}"),
        ));
    }

    let xs = x.data();
    let ks = k.data();
    let mut out = vec![0.0; n * ci * oh * ow];
    for b in 0..n {
        for o in 0..co {
            let xbase = (b * co + o) * h * w;
            for c in 0..ci {
                let obase = (b * ci + c) * oh * ow;
                let kbase = (o * ci + c) * kh * kw;
                for ih in 0..h {
                    for iw in 0..w {
                        let val = xs[xbase + ih * w + iw];
                        if val == 0.0 {
                            continue;
                        }
                        for u in 0..kh {
                            let y = (ih * stride + u) as isize - pad as isize;
                            if y < 0 || y >= oh as isize {
                                continue;
                            }
                            let orow = obase + y as usize * ow;
                            for v in 0..kw {
                                let xcol = (iw * stride + v) as isize - pad as isize;
                                if xcol < 0 || xcol >= ow as isize {
                                    continue;
                                }
                                out[orow + xcol as usize] += val * ks[kbase + u * kw + v];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, ci, oh, ow], out)
}

/// Kernel gradient of a convolution: correlates the conv input with the
/// upstream output gradient. `x: [n, ci, h, w]`, `dy: [n, co, ho, wo]`
/// -> `[co, ci, kh, kw]`.
pub fn conv2d_weight_grad_raw(
    x: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Result<Tensor> {
    check_conv_args(stride, pad)?;
    let (n, ci, h, w) = x.dims4()?;
    let (dn, co, ho, wo) = dy.dims4()?;
    if dn != n {
        return Err(Error::shape(
            "conv2d_weight_grad",
            format!("batch {n}"),
            format!("{dn}"),
        ));
    }

    let xs = x.data();
    let ds = dy.data();
    let mut out = vec![0.0; co * ci * kh * kw];
    for b in 0..n {
        for o in 0..co {
            let dbase = (b * co + o) * ho * wo;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * w;
                let kbase = (o * ci + c) * kh * kw;
                for u in 0..kh {
                    for v in 0..kw {
                        let mut acc = 0.0;
                        for oh in 0..ho {
                            let ih = (oh * stride + u) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * w;
                            let drow = dbase + oh * wo;
                            for ow in 0..wo {
                                let iw = (ow * stride + v) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += ds[drow + ow] * xs[xrow + iw as usize];
                            }
                        }
                        out[kbase + u * kw + v] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, ci, kh, kw], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    /// Nested-loop oracle written independently of the production kernel's
    /// loop order; indexes by definition.
    fn conv2d_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, ci, h, w) = x.dims4().unwrap();
        let (co, _, kh, kw) = k.dims4().unwrap();
        let ho = conv_out_dim(h, kh, stride, pad).unwrap();
        let wo = conv_out_dim(w, kw, stride, pad).unwrap();
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let ih = (oh * stride + u) as isize - pad as isize;
                                    let iw = (ow * stride + v) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    let xi = ((b * ci + c) * h + ih as usize) * w + iw as usize;
                                    let ki = ((o * ci + c) * kh + u) * kw + v;
                                    acc += x.data()[xi] * k.data()[ki];
                                }
                            }
                        }
                        let oi = ((b * co + o) * ho + oh) * wo + ow;
                        out.data_mut()[oi] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_three_by_three_sums_to_nine() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d_raw(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = RngStream::new(1);
        let x = Tensor::randn(&[1, 1, 4, 5], 0.0, 1.0, &mut rng);
        let k = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d_raw(&x, &k, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut rng = RngStream::new(2);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = Tensor::randn(&[1, 2, 5, 5], 0.0, 1.0, &mut rng);
            let k = Tensor::randn(&[3, 2, 3, 3], 0.0, 1.0, &mut rng);
            let got = conv2d_raw(&x, &k, stride, pad).unwrap();
            let want = conv2d_oracle(&x, &k, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!(
                    (g - w).abs() < 1e-12,
                    "stride={stride} pad={pad}: {g} vs {w}"
                );
            }
        }
    }

    #[test]
    fn transpose_broadcasts_single_value() {
        let x = Tensor::full(&[1, 1, 1, 1], 3.5);
        let k = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv_transpose2d_raw(&x, &k, 1, 0, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn stride2_upsample_matches_scatter_oracle() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let y = conv_transpose2d_raw(&x, &k, 2, 0, None).unwrap();
        // No kernel overlap at stride 2 with a 2x2 kernel: each input value
        // stamps its own 2x2 block.
        let want = [
            10.0, 20.0, 20.0, 40.0, //
            30.0, 40.0, 60.0, 80.0, //
            30.0, 60.0, 40.0, 80.0, //
            90.0, 120.0, 120.0, 160.0,
        ];
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.data(), &want);
    }

    #[test]
    fn conv_and_transpose_are_adjoint() {
        let mut rng = RngStream::new(7);
        for &(stride, pad, h, w, kk) in &[
            (1usize, 0usize, 5usize, 5usize, 3usize),
            (2, 1, 6, 8, 4),
            (2, 0, 7, 5, 3),
            (3, 1, 9, 7, 4),
        ] {
            let x = Tensor::randn(&[2, 2, h, w], 0.0, 1.0, &mut rng);
            let k = Tensor::randn(&[3, 2, kk, kk], 0.0, 1.0, &mut rng);
            let cx = conv2d_raw(&x, &k, stride, pad).unwrap();
            let y = Tensor::randn(cx.shape(), 0.0, 1.0, &mut rng);
            let cty = conv_transpose2d_raw(&y, &k, stride, pad, Some((h, w))).unwrap();
            let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(cty.data()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
                "adjoint identity failed: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn weight_grad_matches_finite_difference_of_conv() {
        let mut rng = RngStream::new(11);
        let x = Tensor::randn(&[1, 2, 5, 5], 0.0, 1.0, &mut rng);
        let mut k = Tensor::randn(&[2, 2, 3, 3], 0.0, 1.0, &mut rng);
        let dy = Tensor::randn(&[1, 2, 3, 3], 0.0, 1.0, &mut rng);
        let analytic = conv2d_weight_grad_raw(&x, &dy, 1, 0, 3, 3).unwrap();
        let h = 1e-6;
        for i in 0..k.numel() {
            let orig = k.data()[i];
            k.data_mut()[i] = orig + h;
            let plus: f64 = conv2d_raw(&x, &k, 1, 0)
                .unwrap()
                .data()
                .iter()
                .zip(dy.data())
                .map(|(a, b)| a * b)
                .sum();
            k.data_mut()[i] = orig - h;
            let minus: f64 = conv2d_raw(&x, &k, 1, 0)
                .unwrap()
                .data()
                .iter()
                .zip(dy.data())
                .map(|(a, b)| a * b)
                .sum();
            k.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            assert!((analytic.data()[i] - numeric).abs() < 1e-6);
        }
    }
}
