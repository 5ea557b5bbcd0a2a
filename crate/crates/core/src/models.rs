//! U-Net generator and conditional PatchGAN discriminator.
//!
//! The generator is an encoder of stride-2 4x4 convolutions (channels
//! doubling up to a cap of 8x base) mirrored by a decoder of stride-2
//! transposed convolutions with skip concatenations and a tanh head. Noise
//! enters as decoder dropout on the innermost up blocks. The discriminator
//! is the strided-conv PatchGAN: it scores overlapping NxN receptive fields
//! of the (input, output) pair as a logit map.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Tape, Tensor, Var};

const KERNEL: usize = 4;
const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;
const WEIGHT_STD: f64 = 0.02;
/// Channel growth stops at `8 * base_filters`.
const CHANNEL_CAP: usize = 8;
/// Decoder levels (innermost first) that apply dropout when noise is on.
const DROPOUT_LEVELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_filters: usize,
    /// Number of down/up levels; input side must be divisible by `2^depth`.
    pub depth: usize,
    pub dropout_p: f64,
    /// Input spatial side (square), a power of two.
    pub target_size: usize,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.base_filters < 1 || self.in_channels < 1 || self.out_channels < 1
        {
            return Err(Error::InvalidConfig(format!(
                "unet config has a non-positive field: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!(
                "unet dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if !self.target_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "unet target_size {} is not a power of two",
                self.target_size
            )));
        }
        if self.depth >= usize::BITS as usize
            || !self.target_size.is_multiple_of(1usize << self.depth)
        {
            return Err(Error::InvalidConfig(format!(
                "unet target_size {} not divisible by 2^depth = {}",
                self.target_size,
                1u128 << self.depth
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        (self.base_filters << level).min(CHANNEL_CAP * self.base_filters)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGANConfig {
    /// Conditional input: generator input channels + output channels.
    pub in_channels: usize,
    pub base_filters: usize,
    /// Number of stride-2 blocks before the two stride-1 heads.
    pub n_layers: usize,
}

impl PatchGANConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 || self.base_filters < 1 || self.in_channels < 1 {
            return Err(Error::InvalidConfig(format!(
                "patchgan config has a non-positive field: {self:?}"
            )));
        }
        Ok(())
    }

    fn channels(&self, layer: usize) -> usize {
        (self.base_filters << layer).min(CHANNEL_CAP * self.base_filters)
    }

    /// `(kernel, stride)` chain from input to logit map.
    fn layer_geometry(&self) -> Vec<(usize, usize)> {
        let mut layers = vec![(KERNEL, 2); self.n_layers];
        layers.push((KERNEL, 1));
        layers.push((KERNEL, 1));
        layers
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Arch {
    UNet(UNetConfig),
    PatchGAN(PatchGANConfig),
}

impl Arch {
    fn canonical(&self) -> String {
        match self {
            Arch::UNet(c) => format!(
                "unet/in:{}/out:{}/base:{}/depth:{}/dropout:{}/size:{}",
                c.in_channels, c.out_channels, c.base_filters, c.depth, c.dropout_p, c.target_size
            ),
            Arch::PatchGAN(c) => format!(
                "patchgan/in:{}/base:{}/layers:{}",
                c.in_channels, c.base_filters, c.n_layers
            ),
        }
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Named parameter set of one network, tagged with its architecture and a
/// config fingerprint that checkpoint loading verifies.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Arch,
    fingerprint: u64,
    tensors: IndexMap<String, Tensor>,
}

impl ModelParams {
    fn new(arch: Arch) -> Self {
        let fingerprint = arch.fingerprint();
        ModelParams {
            arch,
            fingerprint,
            tensors: IndexMap::new(),
        }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    fn insert(&mut self, name: &str, t: Tensor) {
        debug_assert!(
            !self.tensors.contains_key(name),
            "duplicate parameter {name}"
        );
        self.tensors.insert(name.to_string(), t);
    }

    /// Replace a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            None => Err(Error::MissingGradient(name.to_string())),
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::shape(
                        "ModelParams::set",
                        format!("{:?}", slot.shape()),
                        format!("{:?}", value.shape()),
                    ));
                }
                *slot = value;
                Ok(())
            }
        }
    }
}

/// Parameters placed onto a tape for one forward/backward phase.
pub struct TapedModel {
    pub arch: Arch,
    pub vars: IndexMap<String, Var>,
}

impl TapedModel {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }
}

/// Put every parameter on the tape, as differentiation targets when
/// `trainable`, otherwise as fixed data.
pub fn place_on_tape(tape: &mut Tape, model: &ModelParams, trainable: bool) -> TapedModel {
    let mut vars = IndexMap::new();
    for (name, t) in model.tensors() {
        let v = if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        };
        vars.insert(name.to_string(), v);
    }
    TapedModel {
        arch: model.arch().clone(),
        vars,
    }
}

// ── U-Net ──

pub fn build_unet(cfg: &UNetConfig, rng: &mut RngStream) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ModelParams::new(Arch::UNet(cfg.clone()));
    let mut prev = cfg.in_channels;
    for i in 0..cfg.depth {
        let ch = cfg.channels(i);
        params.insert(
            &format!("enc{i}.w"),
            Tensor::randn(&[ch, prev, KERNEL, KERNEL], 0.0, WEIGHT_STD, rng),
        );
        if i > 0 && i + 1 < cfg.depth {
            params.insert(
                &format!("enc{i}.gamma"),
                Tensor::randn(&[ch], 1.0, WEIGHT_STD, rng),
            );
            params.insert(&format!("enc{i}.beta"), Tensor::zeros(&[ch]));
        }
        prev = ch;
    }
    for i in (1..cfg.depth).rev() {
        let ch_in = if i + 1 == cfg.depth {
            cfg.channels(i)
        } else {
            2 * cfg.channels(i)
        };
        let ch_out = cfg.channels(i - 1);
        params.insert(
            &format!("dec{i}.w"),
            Tensor::randn(&[ch_in, ch_out, KERNEL, KERNEL], 0.0, WEIGHT_STD, rng),
        );
        params.insert(
            &format!("dec{i}.gamma"),
            Tensor::randn(&[ch_out], 1.0, WEIGHT_STD, rng),
        );
        params.insert(&format!("dec{i}.beta"), Tensor::zeros(&[ch_out]));
    }
    let final_in = if cfg.depth > 1 {
        2 * cfg.channels(0)
    } else {
        cfg.channels(0)
    };
    params.insert(
        "dec0.w",
        Tensor::randn(
            &[final_in, cfg.out_channels, KERNEL, KERNEL],
            0.0,
            WEIGHT_STD,
            rng,
        ),
    );
    Ok(params)
}

/// Generator forward pass. `noise_on` enables decoder dropout (the noise
/// input z); with it off the pass is a deterministic function of `x`.
pub fn unet_forward(
    tape: &mut Tape,
    model: &TapedModel,
    x: Var,
    rng: &mut RngStream,
    noise_on: bool,
) -> Result<Var> {
    let Arch::UNet(cfg) = &model.arch else {
        return Err(Error::InvalidConfig(
            "unet_forward on non-U-Net parameters".into(),
        ));
    };
    let (_, c, h, w) = tape.value(x).dims4()?;
    if c != cfg.in_channels || h != cfg.target_size || w != cfg.target_size {
        return Err(Error::shape(
            "unet_forward",
            format!(
                "{}x{}x{} input",
                cfg.in_channels, cfg.target_size, cfg.target_size
            ),
            format!("{c}x{h}x{w}"),
        ));
    }

    let mut skips = Vec::with_capacity(cfg.depth);
    let mut y = x;
    for i in 0..cfg.depth {
        if i > 0 {
            y = tape.leaky_relu(y, LEAKY_SLOPE);
        }
        y = tape.conv2d(y, model.var(&format!("enc{i}.w")), 2, 1)?;
        if i > 0 && i + 1 < cfg.depth {
            y = tape.instance_norm(
                y,
                model.var(&format!("enc{i}.gamma")),
                model.var(&format!("enc{i}.beta")),
                NORM_EPS,
            )?;
        }
        skips.push(y);
    }

    y = skips[cfg.depth - 1];
    for i in (1..cfg.depth).rev() {
        y = tape.relu(y);
        y = tape.conv_transpose2d(y, model.var(&format!("dec{i}.w")), 2, 1)?;
        y = tape.instance_norm(
            y,
            model.var(&format!("dec{i}.gamma")),
            model.var(&format!("dec{i}.beta")),
            NORM_EPS,
        )?;
        if noise_on && (cfg.depth - 1 - i) < DROPOUT_LEVELS {
            y = tape.dropout(y, cfg.dropout_p, rng, true)?;
        }
        y = tape.concat_channels(y, skips[i - 1])?;
    }
    y = tape.relu(y);
    y = tape.conv_transpose2d(y, model.var("dec0.w"), 2, 1)?;
    Ok(tape.tanh(y))
}

// ── PatchGAN ──

pub fn build_patchgan(cfg: &PatchGANConfig, rng: &mut RngStream) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ModelParams::new(Arch::PatchGAN(cfg.clone()));
    let mut prev = cfg.in_channels;
    for l in 0..cfg.n_layers {
        let ch = cfg.channels(l);
        params.insert(
            &format!("layer{l}.w"),
            Tensor::randn(&[ch, prev, KERNEL, KERNEL], 0.0, WEIGHT_STD, rng),
        );
        if l > 0 {
            params.insert(
                &format!("layer{l}.gamma"),
                Tensor::randn(&[ch], 1.0, WEIGHT_STD, rng),
            );
            params.insert(&format!("layer{l}.beta"), Tensor::zeros(&[ch]));
        }
        prev = ch;
    }
    let ch = cfg.channels(cfg.n_layers);
    params.insert(
        "pre.w",
        Tensor::randn(&[ch, prev, KERNEL, KERNEL], 0.0, WEIGHT_STD, rng),
    );
    params.insert("pre.gamma", Tensor::randn(&[ch], 1.0, WEIGHT_STD, rng));
    params.insert("pre.beta", Tensor::zeros(&[ch]));
    params.insert(
        "out.w",
        Tensor::randn(&[1, ch, KERNEL, KERNEL], 0.0, WEIGHT_STD, rng),
    );
    Ok(params)
}

/// Conditional discriminator: concatenates `(x, y)` on channels and returns
/// the raw logit map (objectives decide what to do with it).
pub fn patchgan_forward(tape: &mut Tape, model: &TapedModel, x: Var, y: Var) -> Result<Var> {
    let Arch::PatchGAN(cfg) = &model.arch else {
        return Err(Error::InvalidConfig(
            "patchgan_forward on non-PatchGAN parameters".into(),
        ));
    };
    let pair = tape.concat_channels(x, y)?;
    let (_, c, _, _) = tape.value(pair).dims4()?;
    if c != cfg.in_channels {
        return Err(Error::shape(
            "patchgan_forward",
            format!("{} channels", cfg.in_channels),
            format!("{c}"),
        ));
    }
    let mut h = pair;
    for l in 0..cfg.n_layers {
        h = tape.conv2d(h, model.var(&format!("layer{l}.w")), 2, 1)?;
        if l > 0 {
            h = tape.instance_norm(
                h,
                model.var(&format!("layer{l}.gamma")),
                model.var(&format!("layer{l}.beta")),
                NORM_EPS,
            )?;
        }
        h = tape.leaky_relu(h, LEAKY_SLOPE);
    }
    h = tape.conv2d(h, model.var("pre.w"), 1, 1)?;
    h = tape.instance_norm(h, model.var("pre.gamma"), model.var("pre.beta"), NORM_EPS)?;
    h = tape.leaky_relu(h, LEAKY_SLOPE);
    tape.conv2d(h, model.var("out.w"), 1, 1)
}

/// Receptive field of one logit: side of the input patch it scores.
pub fn receptive_field(cfg: &PatchGANConfig) -> usize {
    receptive_field_chain(&cfg.layer_geometry())
}

/// Receptive-field recurrence `r <- r*s + (k - s)` composed from the logit
/// map back to the input, over `(kernel, stride)` pairs in network order.
pub fn receptive_field_chain(layers: &[(usize, usize)]) -> usize {
    let mut r = 1;
    for &(k, s) in layers.iter().rev() {
        r = r * s + (k - s);
    }
    r
}

/// Single-image translation on a throwaway tape: builds the graph, runs the
/// generator, returns the value.
pub fn unet_translate(
    g: &ModelParams,
    x: &Tensor,
    rng: &mut RngStream,
    noise_on: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let model = place_on_tape(&mut tape, g, false);
    let xv = tape.constant(x.clone());
    let out = unet_forward(&mut tape, &model, xv, rng, noise_on)?;
    Ok(tape.value(out).clone())
}
