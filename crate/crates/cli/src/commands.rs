//! Subcommand implementations. Heavy artifacts (pretrained backbone,
//! trained matching modules) are checkpointed under the output directory
//! and reloaded when present, so `eval` after `train` is cheap.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use edgefuse_core::backbone::{default_layer_widths, pretrain, PretrainOpts};
use edgefuse_core::checkpoint;
use edgefuse_core::pipeline::{dataset_rng, evaluate, pretrain_rng, train_comm, Mode, TrainCfg};
use edgefuse_core::scenario::gen_dataset;
use edgefuse_core::{CommModules, Dataset, ErasureChannel, PipelineCfg, SplitModel};

use crate::config::FileConfig;
use crate::plot::{self, Metric};
use crate::results;
use crate::sweep;

fn backbone_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("backbone_seed{seed}.ck"))
}

fn comm_path(out: &Path, split: usize, data_per: f64, query_per: f64, seed: u64) -> PathBuf {
    out.join(format!(
        "comm_s{split}_d{data_per:.3}_q{query_per:.3}_seed{seed}.ck"
    ))
}

fn pretrain_fresh(cfg: &FileConfig, ds: &Dataset, seed: u64) -> Result<SplitModel> {
    let scen = &cfg.scenario;
    let opts = PretrainOpts {
        epochs: cfg.training.pretrain_epochs,
        lr: cfg.training.pretrain_lr,
        min_val_accuracy: cfg.training.pretrain_floor,
        ..PretrainOpts::default()
    };
    let widths = default_layer_widths(scen.input_dim(), scen.n_classes);
    let t0 = Instant::now();
    let (model, report) = pretrain(
        &widths,
        cfg.training.split,
        ds,
        &opts,
        &mut pretrain_rng(seed),
    )?;
    eprintln!(
        "pretrained backbone: seed={seed} val_accuracy={:.4} ({:.1}s)",
        report.val_accuracy,
        t0.elapsed().as_secs_f64()
    );
    Ok(model)
}

/// Dataset plus backbone for the configured seed, loading the backbone
/// checkpoint when one exists.
fn ensure_backbone(cfg: &FileConfig, out: &Path) -> Result<(Dataset, SplitModel)> {
    let seed = cfg.training.seed;
    let ds = gen_dataset(&cfg.scenario, &mut dataset_rng(seed))?;
    let path = backbone_path(out, seed);
    let model = if path.exists() {
        let (model, stored_seed) = checkpoint::load_backbone(&path)
            .with_context(|| format!("loading {}", path.display()))?;
        if stored_seed != seed {
            bail!(
                "checkpoint {} stores seed {stored_seed}, requested seed {seed}",
                path.display()
            );
        }
        if model.mlp().in_dim() != cfg.scenario.input_dim()
            || model.classes() != cfg.scenario.n_classes
        {
            bail!(
                "checkpoint {} does not match the configured scenario dimensions",
                path.display()
            );
        }
        eprintln!("loaded backbone checkpoint {}", path.display());
        model.with_split(cfg.training.split)?
    } else {
        let model = pretrain_fresh(cfg, &ds, seed)?;
        checkpoint::save_backbone(&path, &model, seed)?;
        eprintln!("saved backbone checkpoint {}", path.display());
        model
    };
    Ok((ds, model))
}

fn train_fresh(
    cfg: &FileConfig,
    model: &SplitModel,
    ds: &Dataset,
    data_per: f64,
    query_per: f64,
) -> Result<CommModules> {
    let seed = cfg.training.seed;
    let t = &cfg.training;
    let tcfg = PipelineCfg {
        split: t.split,
        data: ErasureChannel::new(data_per, cfg.channel.tb_floats, cfg.channel.fill)?,
        query: ErasureChannel::new(query_per, cfg.channel.tb_floats, cfg.channel.fill)?,
        rho: 0.0,
        mode: Mode::Semantic,
        train: TrainCfg {
            batch: t.batch,
            epochs: t.epochs,
            lr: t.lr,
            rounds_per_epoch: t.rounds_per_epoch,
        },
    };
    let t0 = Instant::now();
    let (modules, report) = train_comm(model, &tcfg, &cfg.scenario, &ds.train, seed)?;
    eprintln!(
        "trained matching modules: seed={seed} steps={} first_loss={:.4} final_loss={:.4} ({:.1}s)",
        report.steps,
        report.epoch_losses.first().copied().unwrap_or(f64::NAN),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        t0.elapsed().as_secs_f64()
    );
    Ok(modules)
}

/// Trained matching modules for the configured cell, loading the
/// checkpoint when one exists. The noiseless mode shares the clean-channel
/// training, so its checkpoint is named with zero PERs.
fn ensure_comm(
    cfg: &FileConfig,
    out: &Path,
    model: &SplitModel,
    ds: &Dataset,
) -> Result<CommModules> {
    let seed = cfg.training.seed;
    let (data_per, query_per) = match cfg.training.mode {
        Mode::Noiseless => (0.0, 0.0),
        _ => (cfg.channel.data_per, cfg.channel.query_per),
    };
    let path = comm_path(out, cfg.training.split, data_per, query_per, seed);
    if path.exists() {
        let (modules, stored_seed) =
            checkpoint::load_comm(&path).with_context(|| format!("loading {}", path.display()))?;
        if stored_seed != seed {
            bail!(
                "checkpoint {} stores seed {stored_seed}, requested seed {seed}",
                path.display()
            );
        }
        if modules.feature_dim() != model.feature_dim() {
            bail!(
                "checkpoint {} was trained for feature dim {}, split {} needs {}",
                path.display(),
                modules.feature_dim(),
                cfg.training.split,
                model.feature_dim()
            );
        }
        eprintln!("loaded matching-module checkpoint {}", path.display());
        Ok(modules)
    } else {
        let modules = train_fresh(cfg, model, ds, data_per, query_per)?;
        checkpoint::save_comm(&path, &modules, seed)?;
        eprintln!("saved matching-module checkpoint {}", path.display());
        Ok(modules)
    }
}

pub fn cmd_pretrain(cfg: &FileConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let seed = cfg.training.seed;
    let ds = gen_dataset(&cfg.scenario, &mut dataset_rng(seed))?;
    let model = pretrain_fresh(cfg, &ds, seed)?;
    let path = backbone_path(out, seed);
    checkpoint::save_backbone(&path, &model, seed)?;
    println!("pretrain: seed={seed} checkpoint={}", path.display());
    Ok(())
}

pub fn cmd_train(cfg: &FileConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let (ds, model) = ensure_backbone(cfg, out)?;
    let seed = cfg.training.seed;
    let (data_per, query_per) = match cfg.training.mode {
        Mode::Noiseless => (0.0, 0.0),
        _ => (cfg.channel.data_per, cfg.channel.query_per),
    };
    let modules = train_fresh(cfg, &model, &ds, data_per, query_per)?;
    let path = comm_path(out, cfg.training.split, data_per, query_per, seed);
    checkpoint::save_comm(&path, &modules, seed)?;
    println!("train: seed={seed} checkpoint={}", path.display());
    Ok(())
}

pub fn cmd_eval(cfg: &FileConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let (ds, model) = ensure_backbone(cfg, out)?;
    let pipeline = cfg.pipeline_cfg()?;
    let modules = if pipeline.mode.uses_matching() {
        Some(ensure_comm(cfg, out, &model, &ds)?)
    } else {
        None
    };
    let t0 = Instant::now();
    let m = evaluate(
        &model,
        modules.as_ref(),
        &pipeline,
        &cfg.scenario,
        &ds.test,
        cfg.training.eval_rounds,
        cfg.training.seed,
    )?;
    eprintln!("evaluated in {:.1}s", t0.elapsed().as_secs_f64());
    println!(
        "eval: mode={} split={} data_per={:.3} query_per={:.3} rho={:.3} seed={} rounds={} \
         accuracy={:.6} avg_connections={:.6} query_tbs={:.3} feature_tbs={:.3}",
        pipeline.mode,
        pipeline.split,
        cfg.channel.data_per,
        cfg.channel.query_per,
        pipeline.rho,
        cfg.training.seed,
        m.rounds,
        m.accuracy,
        m.avg_connections,
        m.query_tbs_per_round,
        m.feature_tbs_per_round
    );
    Ok(())
}

pub fn cmd_sweep(cfg: &FileConfig, out: &Path) -> Result<()> {
    let artifacts = sweep::run(cfg, out)?;
    println!(
        "sweep: rows={} csv={} accuracy_svg={} connections_svg={}",
        artifacts.rows.len(),
        artifacts.csv_path.display(),
        artifacts.accuracy_svg.display(),
        artifacts.connections_svg.display()
    );
    Ok(())
}

pub fn cmd_plot(out: &Path, csv: Option<&Path>) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let default_csv = out.join("results.csv");
    let csv_path = csv.unwrap_or(&default_csv);
    let text = std::fs::read_to_string(csv_path)
        .with_context(|| format!("reading {}", csv_path.display()))?;
    let rows = results::parse_csv(&text)?;
    let accuracy_svg = out.join("accuracy.svg");
    std::fs::write(&accuracy_svg, plot::render(&rows, Metric::Accuracy)?)?;
    let connections_svg = out.join("connections.svg");
    std::fs::write(&connections_svg, plot::render(&rows, Metric::Connections)?)?;
    println!(
        "plot: accuracy_svg={} connections_svg={}",
        accuracy_svg.display(),
        connections_svg.display()
    );
    Ok(())
}
