//! Randomized hyperparameter search over the tuning grid, ranked by a
//! held-out endpoint (validation L1; adversarial losses are not comparable
//! across objectives). Trials are independent: each derives its RNG stream
//! from `(master seed, trial index)`, so parallel execution cannot change
//! any result.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{fid, FeatureExtractor};
use crate::models::{PatchGANConfig, UNetConfig};
use crate::objectives::GanKind;
use crate::raster::Raster;
use crate::rng::RngStream;
use crate::training::{fit, l1_validation, save_checkpoint, translate, SamplePair, TrainConfig};

/// The tuning grid. Defaults reproduce the published axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub objectives: Vec<GanKind>,
    pub lrs: Vec<f64>,
    pub beta1s: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Epoch counts at the initial learning rate (user-supplied axis).
    pub epochs_const: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            objectives: vec![GanKind::Vanilla, GanKind::Lsgan, GanKind::Wgangp],
            lrs: vec![2e-4, 2e-5],
            beta1s: vec![0.4, 0.5, 0.8],
            lambdas: vec![10.0, 50.0, 100.0],
            epochs_const: vec![100],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.objectives.is_empty()
            || self.lrs.is_empty()
            || self.beta1s.is_empty()
            || self.lambdas.is_empty()
            || self.epochs_const.is_empty()
        {
            return Err(Error::Search(
                "every search axis needs at least one value".into(),
            ));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.objectives.len()
            * self.lrs.len()
            * self.beta1s.len()
            * self.lambdas.len()
            * self.epochs_const.len()
    }
}

/// Uniform independent draw on each axis, applied over `base` (which carries
/// the non-searched fields: load size, batch size, schedule decay, ...).
pub fn sample_config(
    space: &SearchSpace,
    rng: &mut RngStream,
    base: &TrainConfig,
) -> Result<TrainConfig> {
    space.validate()?;
    let pick = |rng: &mut RngStream, n: usize| rng.next_below(n as u64) as usize;
    let mut cfg = base.clone();
    cfg.objective.kind = space.objectives[pick(rng, space.objectives.len())];
    cfg.lr = space.lrs[pick(rng, space.lrs.len())];
    cfg.beta1 = space.beta1s[pick(rng, space.beta1s.len())];
    cfg.lambda_l1 = space.lambdas[pick(rng, space.lambdas.len())];
    cfg.epochs_const = space.epochs_const[pick(rng, space.epochs_const.len())];
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub index: usize,
    pub config: TrainConfig,
    /// Validation endpoint (mean L1 over the held-out set); absent when the
    /// trial failed.
    pub val_l1: Option<f64>,
    /// Secondary endpoint, computed when requested.
    pub proxy_fid: Option<f64>,
    pub wall_secs: f64,
    pub checkpoint_path: Option<PathBuf>,
    /// Failure reason; failed trials are recorded but excluded from ranking.
    pub failed: Option<String>,
}

#[derive(Debug)]
pub struct SearchOutcome {
    /// Ascending by `(val_l1, lambda_l1, trial index)`.
    pub leaderboard: Vec<TrialResult>,
    pub failed: Vec<TrialResult>,
}

pub struct SearchOptions {
    pub master_seed: u64,
    pub base: TrainConfig,
    pub unet: UNetConfig,
    pub patchgan: PatchGANConfig,
    pub compute_fid: bool,
    /// When set, each trial's checkpoint is written here.
    pub out_dir: Option<PathBuf>,
}

fn dedup_key(cfg: &TrainConfig) -> (GanKind, u64, u64, u64, usize) {
    (
        cfg.objective.kind,
        cfg.lr.to_bits(),
        cfg.beta1.to_bits(),
        cfg.lambda_l1.to_bits(),
        cfg.epochs_const,
    )
}

fn run_trial(
    index: usize,
    cfg: TrainConfig,
    train: &[SamplePair],
    val: &[SamplePair],
    opts: &SearchOptions,
) -> TrialResult {
    let start = Instant::now();
    let mut result = TrialResult {
        index,
        config: cfg.clone(),
        val_l1: None,
        proxy_fid: None,
        wall_secs: 0.0,
        checkpoint_path: None,
        failed: None,
    };

    let outcome = (|| -> Result<()> {
        let report = fit(train, cfg, &opts.unet, &opts.patchgan)?;
        result.val_l1 = Some(l1_validation(&report.checkpoint, val)?);
        if opts.compute_fid {
            let generated: Vec<Raster> = val
                .iter()
                .map(|p| -> Result<Raster> {
                    let out = translate(&report.checkpoint, &p.x, None, None)?;
                    Raster::from_tensor(&out)
                })
                .collect::<Result<Vec<_>>>()?;
            let real: Vec<Raster> = val
                .iter()
                .map(|p| Raster::from_tensor(&p.y))
                .collect::<Result<Vec<_>>>()?;
            result.proxy_fid = Some(fid(&generated, &real, &FeatureExtractor::default())?);
        }
        if let Some(dir) = &opts.out_dir {
            let path = dir.join(format!("trial_{index:03}.xmt"));
            save_checkpoint(&report.checkpoint, &path)?;
            result.checkpoint_path = Some(path);
        }
        Ok(())
    })();

    if let Err(e) = outcome {
        result.failed = Some(e.to_string());
        result.val_l1 = None;
    }
    result.wall_secs = start.elapsed().as_secs_f64();
    result
}

/// Draw up to `budget` distinct configs from the grid (no config is trained
/// twice), train each on `train`, score on `val`, and rank ascending by
/// endpoint with ties broken by smaller `lambda_L1` then earlier index.
pub fn run_search(
    space: &SearchSpace,
    budget: usize,
    train: &[SamplePair],
    val: &[SamplePair],
    opts: &SearchOptions,
) -> Result<SearchOutcome> {
    if budget == 0 {
        return Err(Error::Search("budget must be >= 1".into()));
    }
    space.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Search(
            "train and validation sets must be nonempty".into(),
        ));
    }

    let mut sampler = RngStream::derive(opts.master_seed, u64::MAX);
    let mut configs = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let target = budget.min(space.grid_size());
    let mut attempts = 0usize;
    while configs.len() < target && attempts < budget * 64 + space.grid_size() * 64 {
        attempts += 1;
        let mut cfg = sample_config(space, &mut sampler, &opts.base)?;
        if seen.insert(dedup_key(&cfg)) {
            cfg.seed = RngStream::derive(opts.master_seed, configs.len() as u64).seed();
            configs.push(cfg);
        }
    }

    let results: Vec<TrialResult> = configs
        .into_par_iter()
        .enumerate()
        .map(|(i, cfg)| run_trial(i, cfg, train, val, opts))
        .collect();

    let (mut ranked, failed): (Vec<TrialResult>, Vec<TrialResult>) =
        results.into_iter().partition(|r| r.failed.is_none());
    if ranked.is_empty() {
        let reasons: Vec<String> = failed.iter().filter_map(|r| r.failed.clone()).collect();
        return Err(Error::Search(format!(
            "all {} trials failed: {}",
            failed.len(),
            reasons.join("; ")
        )));
    }
    ranked.sort_by(|a, b| {
        let ea = a.val_l1.expect("ranked trials scored");
        let eb = b.val_l1.expect("ranked trials scored");
        ea.total_cmp(&eb)
            .then(a.config.lambda_l1.total_cmp(&b.config.lambda_l1))
            .then(a.index.cmp(&b.index))
    });
    Ok(SearchOutcome {
        leaderboard: ranked,
        failed,
    })
}

/// Top-k slice of the leaderboard (default report shows the two best
/// models), serializable and printable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardReport {
    pub k: usize,
    pub entries: Vec<TrialResult>,
}

pub fn leaderboard_report(ranked: &[TrialResult], k: usize) -> Result<LeaderboardReport> {
    if ranked.is_empty() {
        return Err(Error::Search("empty leaderboard".into()));
    }
    Ok(LeaderboardReport {
        k,
        entries: ranked.iter().take(k).cloned().collect(),
    })
}

impl LeaderboardReport {
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<5} {:<9} {:<8} {:<6} {:<10} {:<7} {:<12} {:<12}\n",
            "rank", "objective", "lr", "beta1", "lambda_L1", "epochs", "val_l1", "proxy_fid"
        ));
        for (rank, e) in self.entries.iter().enumerate() {
            out.push_str(&format!(
                "{:<5} {:<9} {:<8} {:<6} {:<10} {:<7} {:<12.6} {:<12}\n",
                rank + 1,
                e.config.objective.kind.to_string(),
                e.config.lr,
                e.config.beta1,
                e.config.lambda_l1,
                e.config.epochs_const,
                e.val_l1.unwrap_or(f64::NAN),
                e.proxy_fid.map_or("-".to_string(), |v| format!("{v:.4}")),
            ));
        }
        out
    }
}
