//! Flat `key = value` config files with `[section]` headers, `#` comments
//! and bracketed comma lists for sweep grids. Unknown sections or keys are
//! errors: a typo must never silently fall back to a default.

use std::path::Path;

use anyhow::{bail, Context, Result};
use edgefuse_core::pipeline::{
    Mode, TrainCfg, DEFAULT_BATCH, DEFAULT_EPOCHS, DEFAULT_LR, DEFAULT_ROUNDS_PER_EPOCH,
};
use edgefuse_core::{ErasureChannel, PipelineCfg, ScenarioCfg};

pub const DEFAULT_PRETRAIN_EPOCHS: usize = 30;
pub const DEFAULT_PRETRAIN_LR: f64 = 1e-3;
pub const DEFAULT_PRETRAIN_FLOOR: f64 = 0.95;
pub const DEFAULT_EVAL_ROUNDS: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSection {
    pub data_per: f64,
    pub query_per: f64,
    pub tb_floats: usize,
    pub fill: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            data_per: 0.1,
            query_per: 0.0,
            tb_floats: 40,
            fill: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSection {
    pub seed: u64,
    pub split: usize,
    pub rho: f64,
    pub mode: Mode,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub rounds_per_epoch: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_floor: f64,
    pub eval_rounds: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            seed: 1,
            split: 2,
            rho: 0.0,
            mode: Mode::Semantic,
            batch: DEFAULT_BATCH,
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_LR,
            rounds_per_epoch: DEFAULT_ROUNDS_PER_EPOCH,
            pretrain_epochs: DEFAULT_PRETRAIN_EPOCHS,
            pretrain_lr: DEFAULT_PRETRAIN_LR,
            pretrain_floor: DEFAULT_PRETRAIN_FLOOR,
            eval_rounds: DEFAULT_EVAL_ROUNDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSection {
    pub splits: Vec<usize>,
    pub data_pers: Vec<f64>,
    pub query_pers: Vec<f64>,
    pub rhos: Vec<f64>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            splits: vec![2],
            data_pers: vec![0.1],
            query_pers: vec![0.0],
            rhos: vec![0.0],
            modes: vec![Mode::Semantic],
            seeds: vec![1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FileConfig {
    pub scenario: ScenarioCfg,
    pub channel: ChannelSection,
    pub training: TrainingSection,
    pub sweep: SweepSection,
}

impl FileConfig {
    /// Channel pair from the `[channel]` section.
    pub fn channels(&self) -> Result<(ErasureChannel, ErasureChannel)> {
        let data = ErasureChannel::new(
            self.channel.data_per,
            self.channel.tb_floats,
            self.channel.fill,
        )?;
        let query = ErasureChannel::new(
            self.channel.query_per,
            self.channel.tb_floats,
            self.channel.fill,
        )?;
        Ok((data, query))
    }

    /// Single-run pipeline configuration from `[channel]` + `[training]`.
    pub fn pipeline_cfg(&self) -> Result<PipelineCfg> {
        let (data, query) = self.channels()?;
        let cfg = PipelineCfg {
            split: self.training.split,
            data,
            query,
            rho: self.training.rho,
            mode: self.training.mode,
            train: TrainCfg {
                batch: self.training.batch,
                epochs: self.training.epochs,
                lr: self.training.lr,
                rounds_per_epoch: self.training.rounds_per_epoch,
            },
        };
        cfg.validate(self.scenario.n_devices)?;
        Ok(cfg)
    }
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            parse_str(&text).with_context(|| format!("config {}", p.display()))
        }
    }
}

pub fn parse_str(text: &str) -> Result<FileConfig> {
    let mut cfg = FileConfig::default();
    let mut section: Option<String> = None;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let ln = ln + 1;
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .with_context(|| format!("line {ln}: unterminated section header"))?
                .trim();
            if !matches!(name, "scenario" | "channel" | "training" | "sweep") {
                bail!("line {ln}: unknown section [{name}]");
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("line {ln}: expected `key = value`"))?;
        let key = key.trim();
        let value = value.trim();
        let sec = section
            .as_deref()
            .with_context(|| format!("line {ln}: key `{key}` outside any [section]"))?;
        apply(&mut cfg, sec, key, value).with_context(|| format!("line {ln}"))?;
    }
    Ok(cfg)
}

fn apply(cfg: &mut FileConfig, section: &str, key: &str, value: &str) -> Result<()> {
    match section {
        "scenario" => {
            let s = &mut cfg.scenario;
            match key {
                "n_devices" => s.n_devices = scalar(value)?,
                "n_groups" => s.n_groups = scalar(value)?,
                "n_classes" => s.n_classes = scalar(value)?,
                "image_side" => s.image_side = scalar(value)?,
                "p_patch" => s.p_patch = scalar(value)?,
                "patch_scale" => s.patch_scale = scalar(value)?,
                "noise_sigma" => s.noise_sigma = scalar(value)?,
                "mean_lo" => s.mean_lo = scalar(value)?,
                "mean_hi" => s.mean_hi = scalar(value)?,
                "train_samples" => s.train_samples = scalar(value)?,
                "val_samples" => s.val_samples = scalar(value)?,
                "test_samples" => s.test_samples = scalar(value)?,
                _ => bail!("unknown key `{key}` in [scenario]"),
            }
        }
        "channel" => {
            let c = &mut cfg.channel;
            match key {
                "data_per" => c.data_per = scalar(value)?,
                "query_per" => c.query_per = scalar(value)?,
                "tb_floats" => c.tb_floats = scalar(value)?,
                "fill" => c.fill = scalar(value)?,
                _ => bail!("unknown key `{key}` in [channel]"),
            }
        }
        "training" => {
            let t = &mut cfg.training;
            match key {
                "seed" => t.seed = scalar(value)?,
                "split" => t.split = scalar(value)?,
                "rho" => t.rho = scalar(value)?,
                "mode" => t.mode = Mode::parse(value)?,
                "batch" => t.batch = scalar(value)?,
                "epochs" => t.epochs = scalar(value)?,
                "lr" => t.lr = scalar(value)?,
                "rounds_per_epoch" => t.rounds_per_epoch = scalar(value)?,
                "pretrain_epochs" => t.pretrain_epochs = scalar(value)?,
                "pretrain_lr" => t.pretrain_lr = scalar(value)?,
                "pretrain_floor" => t.pretrain_floor = scalar(value)?,
                "eval_rounds" => t.eval_rounds = scalar(value)?,
                _ => bail!("unknown key `{key}` in [training]"),
            }
        }
        "sweep" => {
            let w = &mut cfg.sweep;
            match key {
                "splits" => w.splits = list(value)?,
                "data_pers" => w.data_pers = list(value)?,
                "query_pers" => w.query_pers = list(value)?,
                "rhos" => w.rhos = list(value)?,
                "modes" => {
                    w.modes = list_items(value)?
                        .iter()
                        .map(|s| Mode::parse(s).map_err(Into::into))
                        .collect::<Result<_>>()?
                }
                "seeds" => w.seeds = list(value)?,
                _ => bail!("unknown key `{key}` in [sweep]"),
            }
        }
        _ => unreachable!("section names validated at header"),
    }
    Ok(())
}

fn scalar<T: std::str::FromStr>(value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("invalid value `{value}`: {e}"))
}

fn list_items(value: &str) -> Result<Vec<String>> {
    let inner = value
        .strip_prefix('[')
        .and_then(|v| v.strip_suffix(']'))
        .with_context(|| format!("expected a bracketed list, found `{value}`"))?;
    let items: Vec<String> = inner
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        bail!("empty list `{value}`");
    }
    Ok(items)
}

fn list<T: std::str::FromStr>(value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    list_items(value)?.iter().map(|s| scalar(s)).collect()
}
