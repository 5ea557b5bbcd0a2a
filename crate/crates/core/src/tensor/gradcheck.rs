//! Finite-difference verification of taped gradients.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Max relative error between taped gradients of a scalar-valued function and
/// central finite differences with step `h`, over every coordinate of every
/// input: `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "grad_check step h={h} must be positive"
        )));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::shape(
                "grad_check",
                "scalar function value",
                format!("{:?}", tape.shape(out)),
            ));
        }
        tape.item(out)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::shape(
            "grad_check",
            "scalar function value",
            format!("{:?}", tape.shape(out)),
        ));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match grads.wrt(v) {
            Some(g) => tape.value(g).data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for (i, &a) in analytic[ti].iter().enumerate() {
            let orig = input.data()[i];
            probe[ti].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn sum_gradient_is_exact() {
        let mut rng = RngStream::new(1);
        let x = Tensor::randn(&[3, 4], 0.0, 1.0, &mut rng);
        let err = grad_check(|t, v| t.sum_all(v), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn mean_of_squares_gradient() {
        let mut rng = RngStream::new(2);
        let x = Tensor::randn(&[10], 0.0, 1.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let sq = t.square(v)?;
                t.mean_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn conv_leaky_mean_composition_gradient() {
        let mut rng = RngStream::new(3);
        let x = Tensor::randn(&[1, 2, 6, 6], 0.0, 1.0, &mut rng);
        let k = Tensor::randn(&[3, 2, 3, 3], 0.0, 0.5, &mut rng);
        let err = grad_check_multi(
            |t, vs| {
                let y = t.conv2d(vs[0], vs[1], 2, 1)?;
                let a = t.leaky_relu(y, 0.2);
                t.mean_all(a)
            },
            &[x, k],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn rejects_non_scalar_function() {
        let x = Tensor::ones(&[4]);
        assert!(grad_check(|t, v| t.square(v), &x, 1e-5).is_err());
    }

    #[test]
    fn second_order_gradient_of_gradient_norm() {
        // f(k) = || d(mean(conv(x, k)^2)) / dx ||^2 must differentiate w.r.t.
        // k through the taped backward pass.
        let mut rng = RngStream::new(4);
        let x = Tensor::randn(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
        let k = Tensor::randn(&[1, 1, 3, 3], 0.0, 0.8, &mut rng);

        let f = |t: &mut Tape, vs: &[Var]| -> crate::error::Result<Var> {
            let x = vs[0];
            let kk = vs[1];
            let y = t.conv2d(x, kk, 1, 1)?;
            let sq = t.square(y)?;
            let m = t.mean_all(sq)?;
            let grads = t.backward(m)?;
            let gx = grads.wrt(x).expect("x reached");
            let gx2 = t.square(gx)?;
            t.sum_all(gx2)
        };
        let err = grad_check_multi(f, &[x, k], 1e-5).unwrap();
        assert!(err < 1e-5, "second-order err {err}");
    }
}
