//! Run configuration: JSON with strict key checking (unknown keys are
//! rejected with a nearest-key suggestion), defaults matching the published
//! tuning baseline, and experiment presets that pin the load size.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::Value;

use xmt_core::models::{PatchGANConfig, UNetConfig};
use xmt_core::objectives::{GanKind, GanObjective};
use xmt_core::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    WholeSlice,
    Patches1024,
    Patches256,
    Custom,
}

impl ExperimentKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "whole_slice" => Ok(ExperimentKind::WholeSlice),
            "patches_1024" => Ok(ExperimentKind::Patches1024),
            "patches_256" => Ok(ExperimentKind::Patches256),
            "custom" => Ok(ExperimentKind::Custom),
            other => bail!("config key \"experiment\": unknown kind {other:?} (expected whole_slice, patches_1024, patches_256 or custom)"),
        }
    }

    /// Presets pin the load size; only `custom` accepts one from the file.
    fn fixed_load_size(self) -> Option<usize> {
        match self {
            ExperimentKind::WholeSlice => Some(4096),
            ExperimentKind::Patches1024 => Some(1024),
            ExperimentKind::Patches256 => Some(256),
            ExperimentKind::Custom => None,
        }
    }
}

/// Everything a run needs: training hyperparameters plus both architectures.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    pub train: TrainConfig,
    pub unet: UNetConfig,
    pub patchgan: PatchGANConfig,
}

const KNOWN_KEYS: &[&str] = &[
    "experiment",
    "objective",
    "gp_weight",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "epochs_const",
    "epochs_decay",
    "lambda_L1",
    "load_size",
    "batch_size",
    "seed",
    "critic_steps",
    "dropout_p",
    "unet_depth",
    "unet_base_filters",
    "patchgan_layers",
    "patchgan_base_filters",
];

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn suggest(key: &str) -> Option<&'static str> {
    KNOWN_KEYS
        .iter()
        .map(|&k| (levenshtein(key, k), k))
        .min()
        .filter(|&(d, _)| d <= 3)
        .map(|(_, k)| k)
}

struct Fields<'a>(&'a serde_json::Map<String, Value>);

impl Fields<'_> {
    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| anyhow!("config key \"{key}\": expected a number, found {v}")),
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.as_u64().map(|n| n as usize).ok_or_else(|| {
                anyhow!("config key \"{key}\": expected a non-negative integer, found {v}")
            }),
        }
    }

    fn u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.as_u64().ok_or_else(|| {
                anyhow!("config key \"{key}\": expected a non-negative integer, found {v}")
            }),
        }
    }

    fn str(&self, key: &str, default: &str) -> Result<String> {
        match self.0.get(key) {
            None => Ok(default.to_string()),
            Some(v) => v
                .as_str()
                .map(String::from)
                .ok_or_else(|| anyhow!("config key \"{key}\": expected a string, found {v}")),
        }
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let root: Value = serde_json::from_str(text).context("config is not valid JSON")?;
    let map = root
        .as_object()
        .ok_or_else(|| anyhow!("config root must be a JSON object"))?;

    for key in map.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            match suggest(key) {
                Some(s) => bail!("config key \"{key}\" is unknown; did you mean \"{s}\"?"),
                None => bail!("config key \"{key}\" is unknown"),
            }
        }
    }
    let f = Fields(map);

    let experiment = ExperimentKind::parse(&f.str("experiment", "patches_256")?)?;
    let load_size = match experiment.fixed_load_size() {
        Some(fixed) => {
            if map.contains_key("load_size") {
                bail!("config key \"load_size\": fixed to {fixed} by the experiment preset; use experiment \"custom\" to override");
            }
            fixed
        }
        None => f.usize("load_size", 256)?,
    };

    let kind = match f.str("objective", "vanilla")?.as_str() {
        "vanilla" => GanKind::Vanilla,
        "lsgan" => GanKind::Lsgan,
        "wgangp" => GanKind::Wgangp,
        other => bail!("config key \"objective\": unknown objective {other:?} (expected vanilla, lsgan or wgangp)"),
    };
    let mut objective = GanObjective::new(kind);
    objective.gp_weight = f.f64("gp_weight", objective.gp_weight)?;

    let train = TrainConfig {
        objective,
        lr: f.f64("lr", 2e-4)?,
        beta1: f.f64("beta1", 0.5)?,
        beta2: f.f64("beta2", 0.999)?,
        eps: f.f64("eps", 1e-8)?,
        epochs_const: f.usize("epochs_const", 100)?,
        epochs_decay: f.usize("epochs_decay", 100)?,
        lambda_l1: f.f64("lambda_L1", 100.0)?,
        load_size,
        batch_size: f.usize("batch_size", 1)?,
        seed: f.u64("seed", 42)?,
        critic_steps: f.usize("critic_steps", 1)?,
        dropout_p: f.f64("dropout_p", 0.5)?,
    };
    train
        .validate()
        .map_err(|e| anyhow!("config key validation: {e}"))?;

    let default_depth = (load_size.trailing_zeros() as usize).min(8);
    let unet = UNetConfig {
        in_channels: 1,
        out_channels: 3,
        base_filters: f.usize("unet_base_filters", 64)?,
        depth: f.usize("unet_depth", default_depth)?,
        dropout_p: train.dropout_p,
        target_size: load_size,
    };
    unet.validate()
        .map_err(|e| anyhow!("config key \"unet_depth\": {e}"))?;

    let patchgan = PatchGANConfig {
        in_channels: unet.in_channels + unet.out_channels,
        base_filters: f.usize("patchgan_base_filters", 64)?,
        n_layers: f.usize("patchgan_layers", 3)?,
    };
    patchgan
        .validate()
        .map_err(|e| anyhow!("config key \"patchgan_layers\": {e}"))?;

    Ok(RunConfig {
        experiment,
        train,
        unet,
        patchgan,
    })
}

/// Parse a run config file; a missing `--config` flag maps to the defaults
/// via `parse_config_str("{}")`.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config_str(&text).with_context(|| format!("in config {}", path.display()))
}

pub fn default_config() -> RunConfig {
    parse_config_str("{}").expect("defaults are valid")
}
