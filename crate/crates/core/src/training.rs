//! Adam optimization, the alternating G/D loop, the learning-rate schedule,
//! checkpointing, and inference (whole-image or tiled translation).
//!
//! Reproducibility contract: on one thread, `(seed, config, data)` fully
//! determines the loss history and every checkpoint bit. The single
//! [`RngStream`] drives weight init, shuffling, dropout and penalty draws in
//! a fixed order, and its `(seed, counter)` state rides along in the
//! checkpoint so a resumed run replays the uninterrupted one exactly.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    build_patchgan, build_unet, patchgan_forward, place_on_tape, unet_forward, Arch, ModelParams,
    PatchGANConfig, TapedModel, UNetConfig,
};
use crate::objectives::{
    discriminator_loss, generator_adv_loss, generator_total_loss, gradient_penalty, l1_loss,
    GanKind, GanObjective, LossBreakdown,
};
use crate::preprocess::{tile_plan, PadPolicy};
use crate::raster::resize_bilinear_plane;
use crate::rng::RngStream;
use crate::tensor::{Gradients, Tape, Tensor};

/// All tunable training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: GanObjective,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs at the initial learning rate.
    pub epochs_const: usize,
    /// Epochs of linear decay toward zero afterwards.
    pub epochs_decay: usize,
    pub lambda_l1: f64,
    pub load_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Discriminator updates per generator update.
    pub critic_steps: usize,
    pub dropout_p: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: GanObjective::new(GanKind::Vanilla),
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            epochs_const: 100,
            epochs_decay: 100,
            lambda_l1: 100.0,
            load_size: 256,
            batch_size: 1,
            seed: 42,
            critic_steps: 1,
            dropout_p: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("lr {} must be > 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "eps {} must be > 0",
                self.eps
            )));
        }
        if self.lambda_l1 < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda_L1 {} must be >= 0",
                self.lambda_l1
            )));
        }
        if !self.load_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "load_size {} must be a power of two",
                self.load_size
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.critic_steps < 1 {
            return Err(Error::InvalidConfig("critic_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.epochs_const + self.epochs_decay == 0 {
            return Err(Error::InvalidConfig(
                "schedule needs at least one epoch".into(),
            ));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_const + self.epochs_decay
    }
}

/// Learning rate at `epoch`: constant for `epochs_const`, then linear decay
/// toward zero (the last epoch uses `lr / epochs_decay`).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs() {
        return Err(Error::InvalidConfig(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.total_epochs()
        )));
    }
    if epoch < cfg.epochs_const {
        Ok(cfg.lr)
    } else {
        let remaining = (cfg.total_epochs() - epoch) as f64;
        Ok(cfg.lr * remaining / cfg.epochs_decay as f64)
    }
}

/// One registered training pair: grayscale input `x` and RGB target `y`,
/// both `1xCxSxS` in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub x: Tensor,
    pub y: Tensor,
    pub tile_id: Option<u32>,
}

impl SamplePair {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        let (nx, _, hx, wx) = x.dims4()?;
        let (ny, _, hy, wy) = y.dims4()?;
        if nx != 1 || ny != 1 || (hx, wx) != (hy, wy) {
            return Err(Error::shape(
                "SamplePair::new",
                "matching 1xCxSxS pair",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        Ok(SamplePair {
            x,
            y,
            tile_id: None,
        })
    }
}

fn stack_batch(batch: &[&SamplePair], load_size: usize) -> Result<(Tensor, Tensor)> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let (_, cx, h, w) = batch[0].x.dims4()?;
    let (_, cy, _, _) = batch[0].y.dims4()?;
    if h != load_size || w != load_size {
        return Err(Error::shape(
            "stack_batch",
            format!("{load_size}x{load_size}"),
            format!("{h}x{w}"),
        ));
    }
    let mut xs = Vec::with_capacity(batch.len() * cx * h * w);
    let mut ys = Vec::with_capacity(batch.len() * cy * h * w);
    for pair in batch {
        if pair.x.shape() != batch[0].x.shape() || pair.y.shape() != batch[0].y.shape() {
            return Err(Error::shape(
                "stack_batch",
                format!("{:?}/{:?}", batch[0].x.shape(), batch[0].y.shape()),
                format!("{:?}/{:?}", pair.x.shape(), pair.y.shape()),
            ));
        }
        xs.extend_from_slice(pair.x.data());
        ys.extend_from_slice(pair.y.data());
    }
    Ok((
        Tensor::new(vec![batch.len(), cx, h, w], xs)?,
        Tensor::new(vec![batch.len(), cy, h, w], ys)?,
    ))
}

// ── Adam ──

/// First/second moment accumulators mirroring a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |p: &ModelParams| {
            p.tensors()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect::<IndexMap<_, _>>()
        };
        AdamState {
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update applied in place. `grads` must cover every
/// parameter with a finite tensor; `t` increments exactly once.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ModelParams,
    grads: &IndexMap<String, Tensor>,
    lr_t: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        g.validate_finite(&format!("gradient of {name}"))?;
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for name in &names {
        let g = &grads[name];
        let m = &mut state.m[name];
        for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
        }
        let v = &mut state.v[name];
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        }
        let mut p = params.get(name).expect("name enumerated above").clone();
        for ((pi, mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(state.m[name].data())
            .zip(state.v[name].data())
        {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *pi -= lr_t * mhat / (vhat.sqrt() + eps);
        }
        params.set(name, p)?;
    }
    Ok(())
}

fn collect_grads(
    tape: &Tape,
    model: &TapedModel,
    grads: &Gradients,
) -> Result<IndexMap<String, Tensor>> {
    let mut out = IndexMap::new();
    for (name, &var) in &model.vars {
        let g = grads
            .wrt(var)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        out.insert(name.clone(), tape.value(g).clone());
    }
    Ok(out)
}

// ── Checkpoint / training state ──

/// Complete training state: both networks, both optimizer states, the
/// schedule position, and the RNG stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub generator: ModelParams,
    pub discriminator: ModelParams,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub rng: RngStream,
}

impl Checkpoint {
    /// Fresh state: networks initialized from `cfg.seed`, zero moments,
    /// epoch 0.
    pub fn initialize(
        cfg: TrainConfig,
        unet: &UNetConfig,
        patchgan: &PatchGANConfig,
    ) -> Result<Checkpoint> {
        cfg.validate()?;
        if unet.target_size != cfg.load_size {
            return Err(Error::InvalidConfig(format!(
                "unet target_size {} must equal load_size {}",
                unet.target_size, cfg.load_size
            )));
        }
        if patchgan.in_channels != unet.in_channels + unet.out_channels {
            return Err(Error::InvalidConfig(format!(
                "patchgan in_channels {} must equal generator in+out {}",
                patchgan.in_channels,
                unet.in_channels + unet.out_channels
            )));
        }
        let mut unet = unet.clone();
        unet.dropout_p = cfg.dropout_p;
        let mut rng = RngStream::new(cfg.seed);
        let generator = build_unet(&unet, &mut rng)?;
        let discriminator = build_patchgan(patchgan, &mut rng)?;
        let adam_g = AdamState::new(&generator);
        let adam_d = AdamState::new(&discriminator);
        Ok(Checkpoint {
            config: cfg,
            epoch: 0,
            generator,
            discriminator,
            adam_g,
            adam_d,
            rng,
        })
    }

    fn unet_config(&self) -> Result<&UNetConfig> {
        match self.generator.arch() {
            Arch::UNet(c) => Ok(c),
            _ => Err(Error::InvalidConfig(
                "checkpoint generator is not a U-Net".into(),
            )),
        }
    }

    /// One alternating step: `critic_steps` discriminator updates (fake
    /// detached, gradient penalty added under wgangp), then one generator
    /// update. During a D update no G parameter is touched and vice versa —
    /// each phase places only its own network as differentiation targets.
    pub fn train_step(&mut self, batch: &[&SamplePair], lr_t: f64) -> Result<LossBreakdown> {
        let (x, y) = stack_batch(batch, self.config.load_size)?;
        let (mut d_loss, mut gp) = (0.0, 0.0);
        for _ in 0..self.config.critic_steps {
            (d_loss, gp) = self.d_update(&x, &y, lr_t)?;
        }
        let (g_adv, g_l1, g_total) = self.g_update(&x, &y, lr_t)?;
        Ok(LossBreakdown {
            d_loss,
            g_adv,
            g_l1,
            g_total,
            gp,
        })
    }

    fn d_update(&mut self, x: &Tensor, y: &Tensor, lr_t: f64) -> Result<(f64, f64)> {
        let cfg = &self.config;
        let mut tape = Tape::new();
        let gm = place_on_tape(&mut tape, &self.generator, false);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let fake = unet_forward(&mut tape, &gm, xv, &mut self.rng, true)?;
        let fake_det = tape.detach(fake);

        let dm = place_on_tape(&mut tape, &self.discriminator, true);
        let real_logits = patchgan_forward(&mut tape, &dm, xv, yv)?;
        let fake_logits = patchgan_forward(&mut tape, &dm, xv, fake_det)?;
        let mut loss = discriminator_loss(&mut tape, &cfg.objective, real_logits, fake_logits)?;

        let mut gp_value = 0.0;
        if cfg.objective.kind == GanKind::Wgangp {
            let pen = gradient_penalty(
                &mut tape,
                |t, yhat| patchgan_forward(t, &dm, xv, yhat),
                yv,
                fake_det,
                &mut self.rng,
            )?;
            gp_value = tape.item(pen)?;
            let weighted = tape.affine(pen, cfg.objective.gp_weight, 0.0);
            loss = tape.add(loss, weighted)?;
        }
        let loss_value = tape.item(loss)?;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss {loss_value}")));
        }
        let grads = tape.backward(loss)?;
        let gmap = collect_grads(&tape, &dm, &grads)?;
        adam_step(
            &mut self.adam_d,
            &mut self.discriminator,
            &gmap,
            lr_t,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
        )?;
        Ok((loss_value, gp_value))
    }

    fn g_update(&mut self, x: &Tensor, y: &Tensor, lr_t: f64) -> Result<(f64, f64, f64)> {
        let cfg = &self.config;
        let mut tape = Tape::new();
        let gm = place_on_tape(&mut tape, &self.generator, true);
        let dm = place_on_tape(&mut tape, &self.discriminator, false);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let fake = unet_forward(&mut tape, &gm, xv, &mut self.rng, true)?;
        let fake_logits = patchgan_forward(&mut tape, &dm, xv, fake)?;
        let g_adv = generator_adv_loss(&mut tape, &cfg.objective, fake_logits)?;
        let g_l1 = l1_loss(&mut tape, fake, yv)?;
        let g_total = generator_total_loss(&mut tape, g_adv, g_l1, cfg.lambda_l1)?;
        let total_value = tape.item(g_total)?;
        if !total_value.is_finite() {
            return Err(Error::NonFinite(format!("generator loss {total_value}")));
        }
        let grads = tape.backward(g_total)?;
        let gmap = collect_grads(&tape, &gm, &grads)?;
        adam_step(
            &mut self.adam_g,
            &mut self.generator,
            &gmap,
            lr_t,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
        )?;
        Ok((tape.item(g_adv)?, tape.item(g_l1)?, total_value))
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// Step index within its epoch.
    pub step: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
}

#[derive(Debug)]
pub struct FitReport {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
}

/// Train from `start` to the end of its schedule. `on_epoch` runs after each
/// completed epoch with the current state and that epoch's records (the hook
/// for periodic checkpointing).
pub fn fit_with<F>(dataset: &[SamplePair], start: Checkpoint, mut on_epoch: F) -> Result<FitReport>
where
    F: FnMut(&Checkpoint, &[StepRecord]) -> Result<()>,
{
    if dataset.is_empty() {
        return Err(Error::Degenerate("empty dataset".into()));
    }
    let mut ckpt = start;
    let cfg = ckpt.config.clone();
    let mut history = Vec::new();
    for epoch in ckpt.epoch..cfg.total_epochs() {
        let lr = lr_at(epoch, &cfg)?;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        ckpt.rng.shuffle(&mut order);
        let mut epoch_records = Vec::new();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SamplePair> = chunk.iter().map(|&i| &dataset[i]).collect();
            let losses = ckpt
                .train_step(&batch, lr)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch} step {step}: {e}")))?;
            epoch_records.push(StepRecord {
                epoch,
                step,
                losses,
                lr,
            });
        }
        ckpt.epoch = epoch + 1;
        on_epoch(&ckpt, &epoch_records)?;
        history.extend(epoch_records);
    }
    Ok(FitReport {
        checkpoint: ckpt,
        history,
    })
}

/// Initialize from configs and train the full schedule.
pub fn fit(
    dataset: &[SamplePair],
    cfg: TrainConfig,
    unet: &UNetConfig,
    patchgan: &PatchGANConfig,
) -> Result<FitReport> {
    let start = Checkpoint::initialize(cfg, unet, patchgan)?;
    fit_with(dataset, start, |_, _| Ok(()))
}

/// Continue a loaded checkpoint to the end of its schedule.
pub fn resume(dataset: &[SamplePair], ckpt: Checkpoint) -> Result<FitReport> {
    fit_with(dataset, ckpt, |_, _| Ok(()))
}

/// Loss history as CSV, one row per step.
pub fn history_to_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("epoch,step,d_loss,g_adv,g_l1,gp,g_total,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.step,
            r.losses.d_loss,
            r.losses.g_adv,
            r.losses.g_l1,
            r.losses.gp,
            r.losses.g_total,
            r.lr
        ));
    }
    out
}

// ── Inference ──

fn resize_tensor_bilinear(t: &Tensor, dh: usize, dw: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if (h, w) == (dh, dw) {
        return Ok(t.clone());
    }
    let mut data = Vec::with_capacity(n * c * dh * dw);
    for plane in 0..n * c {
        let src = &t.data()[plane * h * w..(plane + 1) * h * w];
        data.extend(resize_bilinear_plane(src, w, h, dw, dh));
    }
    Tensor::new(vec![n, c, dh, dw], data)
}

fn forward_at_load_size(
    ckpt: &Checkpoint,
    patch: &Tensor,
    rng: &mut RngStream,
    noise_on: bool,
) -> Result<Tensor> {
    let s = ckpt.config.load_size;
    let (_, _, h, w) = patch.dims4()?;
    let resized = resize_tensor_bilinear(patch, s, s)?;
    let mut tape = Tape::new();
    let gm = place_on_tape(&mut tape, &ckpt.generator, false);
    let xv = tape.constant(resized);
    let out = unet_forward(&mut tape, &gm, xv, rng, noise_on)?;
    let out = tape.value(out).clone();
    resize_tensor_bilinear(&out, h, w)
}

/// Translate one input image (`1xCxHxW` in `[-1, 1]`).
///
/// Whole-image path: resampled to the generator's load size and back. Tiled
/// path (`tile_size`): non-overlapping zero-padded tiles are translated
/// independently (in parallel) and stitched back by their recorded
/// coordinates. `noise_seed` re-enables dropout-as-noise; `None` keeps
/// inference deterministic.
pub fn translate(
    ckpt: &Checkpoint,
    image: &Tensor,
    tile_size: Option<usize>,
    noise_seed: Option<u64>,
) -> Result<Tensor> {
    let unet = ckpt.unet_config()?;
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != unet.in_channels {
        return Err(Error::shape(
            "translate",
            format!("1x{}xHxW", unet.in_channels),
            format!("{:?}", image.shape()),
        ));
    }
    let out_c = unet.out_channels;

    let Some(ts) = tile_size else {
        let mut rng = RngStream::new(noise_seed.unwrap_or(0));
        return forward_at_load_size(ckpt, image, &mut rng, noise_seed.is_some());
    };

    if ts == 0 || ts > h || ts > w {
        return Err(Error::InvalidConfig(format!(
            "tile size {ts} does not fit a {w}x{h} image"
        )));
    }
    let plan = tile_plan(w, h, ts, PadPolicy::Zero)?;
    let pw = plan.padded_width();
    let ph = plan.padded_height();

    let results: Vec<(usize, usize, Tensor)> = plan
        .tiles
        .par_iter()
        .map(|entry| -> Result<(usize, usize, Tensor)> {
            let x0 = entry.x0 as usize;
            let y0 = entry.y0 as usize;
            let mut patch = vec![0.0; c * ts * ts];
            for ch in 0..c {
                for ty in 0..ts {
                    let sy = y0 + ty;
                    if sy >= h {
                        continue;
                    }
                    for tx in 0..ts {
                        let sx = x0 + tx;
                        if sx >= w {
                            continue;
                        }
                        patch[(ch * ts + ty) * ts + tx] = image.data()[(ch * h + sy) * w + sx];
                    }
                }
            }
            let patch = Tensor::new(vec![1, c, ts, ts], patch)?;
            let mut rng = match noise_seed {
                Some(seed) => RngStream::derive(seed, entry.id as u64),
                None => RngStream::new(0),
            };
            let out = forward_at_load_size(ckpt, &patch, &mut rng, noise_seed.is_some())?;
            Ok((x0, y0, out))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut canvas = vec![0.0; out_c * ph * pw];
    for (x0, y0, tile) in results {
        for ch in 0..out_c {
            for ty in 0..ts {
                for tx in 0..ts {
                    canvas[(ch * ph + y0 + ty) * pw + x0 + tx] =
                        tile.data()[(ch * ts + ty) * ts + tx];
                }
            }
        }
    }
    let mut out = Vec::with_capacity(out_c * h * w);
    for ch in 0..out_c {
        for y in 0..h {
            let base = (ch * ph + y) * pw;
            out.extend_from_slice(&canvas[base..base + w]);
        }
    }
    Tensor::new(vec![1, out_c, h, w], out)
}

/// Mean L1 between noise-off translations and targets over a held-out set.
pub fn l1_validation(ckpt: &Checkpoint, pairs: &[SamplePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Degenerate("empty validation set".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        let out = translate(ckpt, &p.x, None, None)?;
        if out.shape() != p.y.shape() {
            return Err(Error::shape(
                "l1_validation",
                format!("{:?}", p.y.shape()),
                format!("{:?}", out.shape()),
            ));
        }
        let sum: f64 = out
            .data()
            .iter()
            .zip(p.y.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        total += sum / out.numel() as f64;
    }
    Ok(total / pairs.len() as f64)
}

// ── Checkpoint file format ──

const MAGIC: &[u8; 4] = b"XMT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    epoch: usize,
    rng_seed: u64,
    rng_counter: u64,
    g_arch: Arch,
    d_arch: Arch,
    g_fingerprint: u64,
    d_fingerprint: u64,
    adam_t_g: u64,
    adam_t_d: u64,
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn truncated() -> Error {
    Error::Format("truncated checkpoint file".into())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| truncated())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let name_len = read_u64(r)? as usize;
    if name_len > 4096 {
        return Err(Error::Format(format!(
            "implausible tensor name length {name_len}"
        )));
    }
    let mut name = vec![0u8; name_len];
    read_exact_or(r, &mut name)?;
    let name =
        String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let rank = read_u64(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut b = [0u8; 8];
    for _ in 0..numel {
        read_exact_or(r, &mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok((name, Tensor::new(shape, data)?))
}

/// Serialize a checkpoint: magic, version, JSON header block, then named
/// little-endian f64 tensor records. The round trip is bit-exact.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let header = CheckpointHeader {
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        rng_seed: ckpt.rng.seed(),
        rng_counter: ckpt.rng.counter(),
        g_arch: ckpt.generator.arch().clone(),
        d_arch: ckpt.discriminator.arch().clone(),
        g_fingerprint: ckpt.generator.fingerprint(),
        d_fingerprint: ckpt.discriminator.fingerprint(),
        adam_t_g: ckpt.adam_g.t,
        adam_t_d: ckpt.adam_d.t,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;

    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;

    type Section<'a> = (
        &'a str,
        Box<dyn Iterator<Item = (&'a str, &'a Tensor)> + 'a>,
    );
    let sections: [Section; 6] = [
        ("g", Box::new(ckpt.generator.tensors())),
        ("d", Box::new(ckpt.discriminator.tensors())),
        (
            "adam_g/m",
            Box::new(ckpt.adam_g.m.iter().map(|(n, t)| (n.as_str(), t))),
        ),
        (
            "adam_g/v",
            Box::new(ckpt.adam_g.v.iter().map(|(n, t)| (n.as_str(), t))),
        ),
        (
            "adam_d/m",
            Box::new(ckpt.adam_d.m.iter().map(|(n, t)| (n.as_str(), t))),
        ),
        (
            "adam_d/v",
            Box::new(ckpt.adam_d.v.iter().map(|(n, t)| (n.as_str(), t))),
        ),
    ];
    let mut records: Vec<(String, &Tensor)> = Vec::new();
    for (prefix, it) in sections {
        for (name, t) in it {
            records.push((format!("{prefix}/{name}"), t));
        }
    }
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (name, t) in records {
        write_tensor(&mut w, &name, t)?;
    }
    w.flush()?;
    Ok(())
}

fn fill_params(
    skeleton: &mut ModelParams,
    prefix: &str,
    tensors: &IndexMap<String, Tensor>,
) -> Result<()> {
    let names: Vec<String> = skeleton.names().map(String::from).collect();
    for name in names {
        let key = format!("{prefix}/{name}");
        let t = tensors
            .get(&key)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {key}")))?;
        skeleton.set(&name, t.clone())?;
    }
    Ok(())
}

fn fill_moments(
    map: &mut IndexMap<String, Tensor>,
    prefix: &str,
    tensors: &IndexMap<String, Tensor>,
) -> Result<()> {
    for (name, slot) in map.iter_mut() {
        let key = format!("{prefix}/{name}");
        let t = tensors
            .get(&key)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {key}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::shape(
                "load_checkpoint",
                format!("{:?}", slot.shape()),
                format!("{:?}", t.shape()),
            ));
        }
        *slot = t.clone();
    }
    Ok(())
}

/// Load and verify a checkpoint: magic, version, architecture fingerprints
/// (stored vs recomputed from the embedded configs), tensor completeness and
/// shapes.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected \"XMT1\""
        )));
    }
    let mut vb = [0u8; 4];
    read_exact_or(&mut r, &mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let header_len = read_u64(&mut r)? as usize;
    if header_len > 1 << 20 {
        return Err(Error::Format(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut hb = vec![0u8; header_len];
    read_exact_or(&mut r, &mut hb)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&hb).map_err(|e| Error::Format(format!("header: {e}")))?;

    for (arch, stored) in [
        (&header.g_arch, header.g_fingerprint),
        (&header.d_arch, header.d_fingerprint),
    ] {
        let expected = arch.fingerprint();
        if expected != stored {
            return Err(Error::FingerprintMismatch { stored, expected });
        }
    }

    let count = read_u64(&mut r)? as usize;
    let mut tensors = IndexMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = read_tensor(&mut r)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }

    let (Arch::UNet(unet), Arch::PatchGAN(patchgan)) = (&header.g_arch, &header.d_arch) else {
        return Err(Error::Format(
            "checkpoint architecture roles are swapped".into(),
        ));
    };
    let mut scratch = RngStream::new(0);
    let mut generator = build_unet(unet, &mut scratch)?;
    let mut discriminator = build_patchgan(patchgan, &mut scratch)?;
    fill_params(&mut generator, "g", &tensors)?;
    fill_params(&mut discriminator, "d", &tensors)?;
    let mut adam_g = AdamState::new(&generator);
    let mut adam_d = AdamState::new(&discriminator);
    fill_moments(&mut adam_g.m, "adam_g/m", &tensors)?;
    fill_moments(&mut adam_g.v, "adam_g/v", &tensors)?;
    fill_moments(&mut adam_d.m, "adam_d/m", &tensors)?;
    fill_moments(&mut adam_d.v, "adam_d/v", &tensors)?;
    adam_g.t = header.adam_t_g;
    adam_d.t = header.adam_t_d;

    header.config.validate()?;
    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        generator,
        discriminator,
        adam_g,
        adam_d,
        rng: RngStream::from_state(header.rng_seed, header.rng_counter),
    })
}
