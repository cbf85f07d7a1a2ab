//! Grid sweeps over splits, channel PERs, pruning thresholds, modes and
//! seeds, with training reuse across cells that share a trained model.
//!
//! Matching modules depend only on (split, effective PERs, seed): pruning
//! is an inference-time knob, so cells differing only in rho share one
//! training; the noiseless mode shares the (0, 0)-PER training. Measured
//! cell times go to stderr, never into the CSV.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use edgefuse_core::backbone::{default_layer_widths, pretrain, PretrainOpts};
use edgefuse_core::pipeline::{dataset_rng, evaluate, pretrain_rng, train_comm, Mode, TrainCfg};
use edgefuse_core::scenario::gen_dataset;
use edgefuse_core::{CommModules, Dataset, ErasureChannel, PipelineCfg, ScenarioCfg, SplitModel};

use crate::config::FileConfig;
use crate::plot::{self, Metric};
use crate::results::{self, Row, WALL_TIME_PLACEHOLDER};

pub struct SweepArtifacts {
    pub csv_path: PathBuf,
    pub accuracy_svg: PathBuf,
    pub connections_svg: PathBuf,
    pub rows: Vec<Row>,
}

/// Dataset plus pretrained backbone for one seed; the backbone is trained
/// once and re-sliced per split.
struct SeedAssets {
    ds: Dataset,
    model: SplitModel,
}

fn seed_assets(cfg: &FileConfig, seed: u64) -> Result<SeedAssets> {
    let scen = &cfg.scenario;
    let ds = gen_dataset(scen, &mut dataset_rng(seed))?;
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
        &ds,
        &opts,
        &mut pretrain_rng(seed),
    )
    .with_context(|| format!("pretraining backbone for seed {seed}"))?;
    eprintln!(
        "sweep: pretrained backbone seed={seed} val_accuracy={:.4} ({:.1}s)",
        report.val_accuracy,
        t0.elapsed().as_secs_f64()
    );
    Ok(SeedAssets { ds, model })
}

/// PERs actually used for training/transmission in a cell; the noiseless
/// mode trains and runs with both channels clean.
fn effective_pers(mode: Mode, data_per: f64, query_per: f64) -> (f64, f64) {
    match mode {
        Mode::Noiseless => (0.0, 0.0),
        _ => (data_per, query_per),
    }
}

type CommKey = (usize, u64, u64, u64);

pub fn compute_rows(cfg: &FileConfig) -> Result<Vec<Row>> {
    let scen: &ScenarioCfg = &cfg.scenario;
    scen.validate()?;
    let t = &cfg.training;
    let train_tmpl = TrainCfg {
        batch: t.batch,
        epochs: t.epochs,
        lr: t.lr,
        rounds_per_epoch: t.rounds_per_epoch,
    };
    let mut assets: HashMap<u64, SeedAssets> = HashMap::new();
    let mut comms: HashMap<CommKey, CommModules> = HashMap::new();
    let mut rows = Vec::new();
    for &split in &cfg.sweep.splits {
        for &data_per in &cfg.sweep.data_pers {
            for &query_per in &cfg.sweep.query_pers {
                for &rho in &cfg.sweep.rhos {
                    for &mode in &cfg.sweep.modes {
                        for &seed in &cfg.sweep.seeds {
                            let cell = format!(
                                "split={split} data_per={data_per} query_per={query_per} \
                                 rho={rho} mode={mode} seed={seed}"
                            );
                            let t0 = Instant::now();
                            let a = match assets.entry(seed) {
                                Entry::Occupied(e) => e.into_mut(),
                                Entry::Vacant(v) => v.insert(seed_assets(cfg, seed)?),
                            };
                            let model = a.model.with_split(split).context("setting cell split")?;
                            let modules = if mode.uses_matching() {
                                let (ed, eq) = effective_pers(mode, data_per, query_per);
                                let trained =
                                    match comms.entry((split, ed.to_bits(), eq.to_bits(), seed)) {
                                        Entry::Occupied(e) => e.into_mut(),
                                        Entry::Vacant(v) => {
                                            let tcfg = PipelineCfg {
                                                split,
                                                data: ErasureChannel::new(
                                                    ed,
                                                    cfg.channel.tb_floats,
                                                    cfg.channel.fill,
                                                )?,
                                                query: ErasureChannel::new(
                                                    eq,
                                                    cfg.channel.tb_floats,
                                                    cfg.channel.fill,
                                                )?,
                                                rho: 0.0,
                                                mode: Mode::Semantic,
                                                train: train_tmpl.clone(),
                                            };
                                            let tt = Instant::now();
                                            let (m, report) =
                                                train_comm(&model, &tcfg, scen, &a.ds.train, seed)
                                                    .with_context(|| {
                                                        format!("training for cell {cell}")
                                                    })?;
                                            eprintln!(
                                                "sweep: trained split={split} data_per={ed} \
                                             query_per={eq} seed={seed} final_loss={:.4} ({:.1}s)",
                                                report
                                                    .epoch_losses
                                                    .last()
                                                    .copied()
                                                    .unwrap_or(f64::NAN),
                                                tt.elapsed().as_secs_f64()
                                            );
                                            v.insert(m)
                                        }
                                    };
                                Some(&*trained)
                            } else {
                                None
                            };
                            let cell_cfg = PipelineCfg {
                                split,
                                data: ErasureChannel::new(
                                    data_per,
                                    cfg.channel.tb_floats,
                                    cfg.channel.fill,
                                )?,
                                query: ErasureChannel::new(
                                    query_per,
                                    cfg.channel.tb_floats,
                                    cfg.channel.fill,
                                )?,
                                rho,
                                mode,
                                train: train_tmpl.clone(),
                            };
                            cell_cfg.validate(scen.n_devices)?;
                            let m = evaluate(
                                &model,
                                modules,
                                &cell_cfg,
                                scen,
                                &a.ds.test,
                                t.eval_rounds,
                                seed,
                            )
                            .with_context(|| format!("evaluating cell {cell}"))?;
                            eprintln!(
                                "sweep: {cell} accuracy={:.4} connections={:.3} ({:.1}s)",
                                m.accuracy,
                                m.avg_connections,
                                t0.elapsed().as_secs_f64()
                            );
                            rows.push(Row {
                                split,
                                data_per,
                                query_per,
                                rho,
                                mode: mode.as_str().to_string(),
                                seed,
                                accuracy: m.accuracy,
                                avg_connections: m.avg_connections,
                                query_tbs: m.query_tbs_per_round,
                                feature_tbs: m.feature_tbs_per_round,
                                wall_time_s: WALL_TIME_PLACEHOLDER.to_string(),
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn run(cfg: &FileConfig, out_dir: &Path) -> Result<SweepArtifacts> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let rows = compute_rows(cfg)?;
    let csv_path = out_dir.join("results.csv");
    std::fs::write(&csv_path, results::to_csv(&rows))
        .with_context(|| format!("writing {}", csv_path.display()))?;
    let accuracy_svg = out_dir.join("accuracy.svg");
    std::fs::write(&accuracy_svg, plot::render(&rows, Metric::Accuracy)?)?;
    let connections_svg = out_dir.join("connections.svg");
    std::fs::write(&connections_svg, plot::render(&rows, Metric::Connections)?)?;
    Ok(SweepArtifacts {
        csv_path,
        accuracy_svg,
        connections_svg,
        rows,
    })
}
