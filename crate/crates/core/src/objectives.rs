//! Adversarial objectives, the L1 term, and the combined generator loss.
//!
//! Three discriminator/generator loss pairs are supported: `vanilla` (binary
//! cross-entropy in logit space), `lsgan` (least squares against 1/0
//! targets), and `wgangp` (Wasserstein critic with a gradient-norm penalty).
//! The vanilla generator uses the non-saturating form (maximize log D on
//! fakes) — the saturating variant stalls in practice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanKind {
    Vanilla,
    Lsgan,
    Wgangp,
}

impl std::fmt::Display for GanKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GanKind::Vanilla => write!(f, "vanilla"),
            GanKind::Lsgan => write!(f, "lsgan"),
            GanKind::Wgangp => write!(f, "wgangp"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanObjective {
    pub kind: GanKind,
    /// Penalty weight; meaningful only for `wgangp`.
    #[serde(default = "default_gp_weight")]
    pub gp_weight: f64,
}

fn default_gp_weight() -> f64 {
    10.0
}

impl GanObjective {
    pub fn new(kind: GanKind) -> Self {
        GanObjective {
            kind,
            gp_weight: default_gp_weight(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == GanKind::Wgangp && self.gp_weight <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "wgangp requires gp_weight > 0, got {}",
                self.gp_weight
            )));
        }
        Ok(())
    }
}

/// Per-step scalar losses. `g_total == g_adv + lambda_l1 * g_l1` holds
/// exactly (same-precision arithmetic, identical evaluation order).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Optimized discriminator loss (includes the weighted penalty for wgangp).
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub g_total: f64,
    /// Raw gradient penalty; 0 unless wgangp.
    pub gp: f64,
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<Var> {
    tape.value(v).validate_finite(what)?;
    Ok(v)
}

/// Mean binary cross-entropy with logits, target 1, in log-sum-exp form:
/// `mean(softplus(-z))`.
fn bce_target_one(tape: &mut Tape, logits: Var) -> Result<Var> {
    let neg = tape.neg(logits);
    let sp = tape.softplus(neg);
    tape.mean_all(sp)
}

/// Mean binary cross-entropy with logits, target 0: `mean(softplus(z))`.
fn bce_target_zero(tape: &mut Tape, logits: Var) -> Result<Var> {
    let sp = tape.softplus(logits);
    tape.mean_all(sp)
}

/// Discriminator loss over a real and a (detached) fake logit map.
///
/// vanilla: `(BCE(real, 1) + BCE(fake, 0)) / 2`;
/// lsgan: `(mean((real-1)^2) + mean(fake^2)) / 2`;
/// wgangp: `mean(fake) - mean(real)` (the penalty is added separately).
pub fn discriminator_loss(
    tape: &mut Tape,
    obj: &GanObjective,
    real_logits: Var,
    fake_logits: Var,
) -> Result<Var> {
    if tape.shape(real_logits) != tape.shape(fake_logits) {
        return Err(Error::shape(
            "discriminator_loss",
            format!("{:?}", tape.shape(real_logits)),
            format!("{:?}", tape.shape(fake_logits)),
        ));
    }
    let loss = match obj.kind {
        GanKind::Vanilla => {
            let real = bce_target_one(tape, real_logits)?;
            let fake = bce_target_zero(tape, fake_logits)?;
            let sum = tape.add(real, fake)?;
            tape.affine(sum, 0.5, 0.0)
        }
        GanKind::Lsgan => {
            let rm1 = tape.affine(real_logits, 1.0, -1.0);
            let r2 = tape.square(rm1)?;
            let real = tape.mean_all(r2)?;
            let f2 = tape.square(fake_logits)?;
            let fake = tape.mean_all(f2)?;
            let sum = tape.add(real, fake)?;
            tape.affine(sum, 0.5, 0.0)
        }
        GanKind::Wgangp => {
            let fake = tape.mean_all(fake_logits)?;
            let real = tape.mean_all(real_logits)?;
            tape.sub(fake, real)?
        }
    };
    check_finite(tape, loss, "discriminator loss")
}

/// Generator-side adversarial loss on fake logits still attached to G.
///
/// vanilla: `BCE(fake, 1)` (non-saturating); lsgan: `mean((fake-1)^2)`;
/// wgangp: `-mean(fake)`.
pub fn generator_adv_loss(tape: &mut Tape, obj: &GanObjective, fake_logits: Var) -> Result<Var> {
    let loss = match obj.kind {
        GanKind::Vanilla => bce_target_one(tape, fake_logits)?,
        GanKind::Lsgan => {
            let fm1 = tape.affine(fake_logits, 1.0, -1.0);
            let f2 = tape.square(fm1)?;
            tape.mean_all(f2)?
        }
        GanKind::Wgangp => {
            let m = tape.mean_all(fake_logits)?;
            tape.neg(m)
        }
    };
    check_finite(tape, loss, "generator adversarial loss")
}

/// Mean absolute elementwise difference.
pub fn l1_loss(tape: &mut Tape, fake: Var, real: Var) -> Result<Var> {
    if tape.shape(fake) != tape.shape(real) {
        return Err(Error::shape(
            "l1_loss",
            format!("{:?}", tape.shape(fake)),
            format!("{:?}", tape.shape(real)),
        ));
    }
    let diff = tape.sub(fake, real)?;
    let a = tape.abs(diff);
    tape.mean_all(a)
}

/// Combined generator objective: `g_adv + lambda_l1 * g_l1`.
pub fn generator_total_loss(tape: &mut Tape, g_adv: Var, g_l1: Var, lambda_l1: f64) -> Result<Var> {
    if lambda_l1 < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "lambda_L1 {lambda_l1} must be >= 0"
        )));
    }
    let weighted = tape.affine(g_l1, lambda_l1, 0.0);
    tape.add(g_adv, weighted)
}

/// Wasserstein gradient penalty `mean((||grad_yhat D(yhat)|| - 1)^2)` at
/// per-sample random interpolates `yhat = eps*y_real + (1-eps)*y_fake`.
///
/// `apply_d` maps the interpolate to a logit map; it captures the
/// discriminator's taped parameters (and the conditioning input), so the
/// returned scalar is differentiable with respect to those parameters —
/// the second-order path through the taped backward pass.
pub fn gradient_penalty<F>(
    tape: &mut Tape,
    apply_d: F,
    y_real: Var,
    y_fake: Var,
    rng: &mut RngStream,
) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let (n, c, h, w) = tape.value(y_real).dims4()?;
    if tape.shape(y_real) != tape.shape(y_fake) {
        return Err(Error::shape(
            "gradient_penalty",
            format!("{:?}", tape.shape(y_real)),
            format!("{:?}", tape.shape(y_fake)),
        ));
    }

    let real = tape.value(y_real).data();
    let fake = tape.value(y_fake).data();
    let per = c * h * w;
    let mut data = Vec::with_capacity(n * per);
    for b in 0..n {
        let eps = rng.uniform();
        for i in b * per..(b + 1) * per {
            data.push(eps * real[i] + (1.0 - eps) * fake[i]);
        }
    }
    let yhat = tape.leaf(Tensor::new(vec![n, c, h, w], data)?);

    let logits = apply_d(tape, yhat)?;
    let total = tape.sum_all(logits)?;
    let grads = tape.backward(total)?;
    let g = match grads.wrt(yhat) {
        Some(g) => g,
        // A discriminator that ignores its input has zero gradient.
        None => tape.constant(Tensor::zeros(&[n, c, h, w])),
    };
    let g2 = tape.square(g)?;
    let sq_norms = tape.per_sample_sum(g2)?;
    // Tiny floor keeps sqrt differentiable at exactly zero gradient.
    let floored = tape.affine(sq_norms, 1.0, 1e-12);
    let norms = tape.sqrt(floored)?;
    let shifted = tape.affine(norms, 1.0, -1.0);
    let penal = tape.square(shifted)?;
    let gp = tape.mean_all(penal)?;
    tape.value(gp)
        .validate_finite("gradient penalty")
        .map_err(|_| Error::NonFinite("gradient norm in penalty".into()))?;
    Ok(gp)
}
