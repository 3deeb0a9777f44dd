//! Subcommand bodies. Each returns the primary stdout line.

use std::fs;
use std::path::{Path, PathBuf};

use gyromix::evaluation::{evaluate_model, overlap_report, p_profile, sweep, RetrievalMetric};
use gyromix::grad::check_head_gradient;
use gyromix::reports::{write_metadata, write_overlap, write_p_profile, write_recall, write_sweep, write_trace};
use gyromix::snapshot::Snapshot;
use gyromix::training::data::{load_features, save_features, synth_seeded};
use gyromix::training::{sample_batch, seeded_streams, train};
use gyromix::{Dataset, EncoderParams, TrainConfig};
use log::info;
use ndarray::Axis;
use serde_json::json;

use crate::config::{DataSource, RunConfig, Split};
use crate::error::CliError;
use crate::{Command, Common, ModelArgs, Report};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::Train(common) => cmd_train(&common),
        Command::Eval {
            common,
            model,
            metric,
            k,
            split,
        } => cmd_eval(&common, &model, metric, k, split),
        Command::Analyze {
            report,
            common,
            model,
            m,
            split,
        } => cmd_analyze(report, &common, &model, m, split),
        Command::Sweep(common) => cmd_sweep(&common),
        Command::GenData(common) => cmd_gen_data(&common),
    }
}

/// Config file (or defaults) with command-line overrides applied, validated.
fn resolve(common: &Common, seed_is_data: bool) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(seed) = common.seed {
        if seed_is_data {
            cfg.data.seed = seed;
        } else {
            cfg.train.seed = seed;
        }
    }
    if let Some(t) = common.tau {
        cfg.loss.tau = t;
    }
    if let Some(c) = common.c {
        cfg.ball.c = c;
    }
    if let Some(l) = common.lambda {
        cfg.loss.lambda = l;
    }
    if let Some(f) = common.format {
        cfg.data.format = f;
    }
    if let Some(d) = &common.data {
        cfg.data.source = DataSource::File;
        cfg.data.path = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::field("out", "no output directory: pass --out or set `out`"))?;
    fs::create_dir_all(&dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match cfg.data.source {
        DataSource::Synthetic => synth_seeded(&cfg.data.synthetic, cfg.data.seed)?,
        DataSource::File => {
            let path = cfg.data.path.as_deref().expect("validated");
            load_features(path, cfg.data.format).map_err(|e| match e {
                gyromix::Error::Io { .. } => CliError::input(path, "cannot read feature file"),
                e => e.into(),
            })?
        }
    };
    info!("loaded {} samples, {} classes, dim {}", ds.len(), ds.class_index().len(), ds.dim());
    Ok(ds)
}

fn pick(ds: Dataset, split: Split) -> Result<Dataset> {
    Ok(match split {
        Split::All => ds,
        Split::Train => ds.split_by_class()?.0,
        Split::Eval => ds.split_by_class()?.1,
    })
}

fn load_model(path: &Path) -> Result<Snapshot> {
    if !path.exists() {
        return Err(CliError::input(path, "model file not found"));
    }
    Snapshot::load(path).map_err(|e| match e {
        gyromix::Error::Io { .. } => CliError::input(path, "cannot read model file"),
        e => CliError::validation(format!("{}: {e}", path.display())),
    })
}

fn check_dims(params: &EncoderParams, ds: &Dataset) -> Result<()> {
    if params.input_dim() != ds.dim() {
        return Err(CliError::validation(format!(
            "data has {} features but the model expects {}",
            ds.dim(),
            params.input_dim()
        )));
    }
    Ok(())
}

fn io_err(path: &Path) -> impl Fn(gyromix::Error) -> CliError + '_ {
    move |e| CliError::runtime(format!("writing {}: {e}", path.display()))
}

fn metadata(cfg: &RunConfig, dir: &Path, command: &str, seed: u64, extra: serde_json::Value) -> Result<()> {
    if cfg.reports.metadata {
        let path = dir.join(format!("{command}.meta.json"));
        write_metadata(&path, command, seed, cfg, Some(extra)).map_err(io_err(&path))?;
    }
    Ok(())
}

fn cmd_train(common: &Common) -> Result<String> {
    let cfg = resolve(common, false)?;
    let tc = cfg.train_config();
    let ds = pick(load_data(&cfg)?, cfg.data.train_on)?;
    let dir = out_dir(&cfg)?;
    info!("training {} for {} steps", tc.loss.mode.as_str(), tc.steps);
    let outcome = train(&ds, &tc)?;
    let model_path = dir.join("model.json");
    Snapshot::new(tc.clone(), outcome.params.clone())
        .save(&model_path)
        .map_err(io_err(&model_path))?;
    if cfg.reports.trace {
        let p = dir.join("trace.csv");
        write_trace(&p, &outcome.trace).map_err(io_err(&p))?;
    }
    let window = outcome.trace.len().min(10);
    let loss_sum = outcome.tail_loss(window);
    let loss_mean = loss_sum / (2 * tc.classes_per_batch) as f64;
    metadata(
        &cfg,
        &dir,
        "train",
        tc.seed,
        json!({ "samples": ds.len(), "final_loss_sum": loss_sum, "final_loss_mean": loss_mean }),
    )?;
    Ok(format!(
        "mode={} steps={} loss_sum={loss_sum:?} loss_mean={loss_mean:?}",
        tc.loss.mode.as_str(),
        tc.steps
    ))
}

/// Snapshot config with the loss/ball flags applied on top.
fn model_config(snap: &Snapshot, common: &Common) -> Result<TrainConfig> {
    let mut tc = snap.config.clone();
    if let Some(t) = common.tau {
        tc.loss.tau = t;
    }
    if let Some(c) = common.c {
        tc.ball.c = c;
    }
    if let Some(l) = common.lambda {
        tc.loss.lambda = l;
    }
    tc.loss.validate()?;
    tc.ball.validate()?;
    Ok(tc)
}

fn cmd_eval(
    common: &Common,
    model: &ModelArgs,
    metric: Option<RetrievalMetric>,
    k: Option<Vec<usize>>,
    split: Option<Split>,
) -> Result<String> {
    let mut cfg = resolve(common, false)?;
    if let Some(k) = k {
        cfg.eval.ks = k;
        cfg.validate()?;
    }
    let model_path = model.model.as_deref().ok_or_else(|| CliError::field("model", "eval needs --model"))?;
    let snap = load_model(model_path)?;
    let tc = model_config(&snap, common)?;
    let ds = pick(load_data(&cfg)?, split.unwrap_or(cfg.eval.split))?;
    check_dims(&snap.params, &ds)?;
    let dir = out_dir(&cfg)?;
    let metric = metric.unwrap_or_else(|| RetrievalMetric::for_mode(tc.loss.mode));
    let rep = evaluate_model(&snap.params, &ds, metric, tc.loss.lambda, &tc.ball, &cfg.eval.ks)?;
    let p = dir.join("recall.csv");
    write_recall(&p, &rep).map_err(io_err(&p))?;
    metadata(&cfg, &dir, "eval", tc.seed, json!({ "model": model_path, "queries": rep.queries }))?;
    let values: Vec<String> = rep.ks.iter().zip(&rep.recall).map(|(k, r)| format!("recall@{k}={r:?}")).collect();
    Ok(format!("metric={} {}", metric.as_str(), values.join(" ")))
}

fn cmd_analyze(
    report: Report,
    common: &Common,
    model: &ModelArgs,
    m: Option<usize>,
    split: Option<Split>,
) -> Result<String> {
    let mut cfg = resolve(common, false)?;
    if let Some(m) = m {
        cfg.analyze.m = m;
        cfg.validate()?;
    }
    let ds = pick(load_data(&cfg)?, split.unwrap_or(cfg.eval.split))?;
    // a saved model, or a freshly initialized one from the config
    let (params, tc) = match &model.model {
        Some(p) => {
            let snap = load_model(p)?;
            let tc = model_config(&snap, common)?;
            (snap.params, tc)
        }
        None => {
            let tc = cfg.train_config();
            let (mut init, _) = seeded_streams(tc.seed);
            (EncoderParams::init(ds.dim(), &tc.encoder, &mut init)?, tc)
        }
    };
    check_dims(&params, &ds)?;
    let dir = out_dir(&cfg)?;
    let batch_of = || -> Result<(gyromix::HeadOutputs, gyromix::Pairing)> {
        let n = match cfg.analyze.classes_per_batch {
            0 => ds.pairable_classes().len(),
            n => n,
        };
        let (_, mut rng) = seeded_streams(tc.seed);
        let batch = sample_batch(&ds, n, &mut rng)?;
        let heads = params.encode(ds.x.select(Axis(0), &batch.rows).view())?;
        Ok((heads, batch.pairing))
    };
    let (line, extra) = match report {
        Report::PProfile => {
            let (heads, pairing) = batch_of()?;
            let prof = p_profile(&heads, &pairing, &tc.loss, &tc.ball)?;
            let p = dir.join("p_profile.csv");
            write_p_profile(&p, &prof).map_err(io_err(&p))?;
            let level = prof.uniform_level();
            let maxes: Vec<f64> = (0..pairing.len()).map(|a| prof.max_p(a)).collect();
            let peaked = maxes.iter().filter(|&&v| v >= 5.0 * level).count() as f64 / maxes.len() as f64;
            let max_p = maxes.iter().copied().fold(0.0, f64::max);
            (
                format!("anchors={} uniform={level:?} max_p={max_p:?} peaked_fraction={peaked:?}", pairing.len()),
                json!({ "report": "p-profile", "uniform": level, "max_p": max_p, "peaked_fraction": peaked }),
            )
        }
        Report::Overlap => {
            let heads = params.encode(ds.x.view())?;
            let ze = heads.euclid.clone().expect("encoder emits both heads");
            let zh = heads.ball_points(&tc.ball)?;
            let ov = overlap_report(&ze, &zh, &ds.y, cfg.analyze.m, &tc.ball).map_err(|e| match e {
                gyromix::Error::InvalidConfig { field, msg } if field == "m" => CliError::field("analyze.m", msg),
                e => e.into(),
            })?;
            let p = dir.join("overlap.csv");
            write_overlap(&p, &ov).map_err(io_err(&p))?;
            let differing = ov.anchors.iter().filter(|a| !a.only_e.is_empty() || !a.only_h.is_empty()).count();
            (
                format!("m={} mean_jaccard={:?} differing_anchors={differing}", ov.m, ov.mean_jaccard),
                json!({ "report": "overlap", "m": ov.m, "mean_jaccard": ov.mean_jaccard, "differing_anchors": differing }),
            )
        }
        Report::Gradcheck => {
            let (heads, pairing) = batch_of()?;
            let r = check_head_gradient(&heads, &pairing, &tc.loss, &tc.ball, cfg.analyze.fd_step)?;
            let threshold = cfg.analyze.threshold;
            let line = format!("max_rel_err={:?} threshold={threshold:?}", r.max_rel_err);
            if !(r.max_rel_err < threshold) {
                return Err(CliError::runtime(format!("gradient check failed: {line}")));
            }
            (line, json!({ "report": "gradcheck", "max_rel_err": r.max_rel_err, "max_abs_err": r.max_abs_err }))
        }
    };
    let name = match report {
        Report::PProfile => "p-profile",
        Report::Overlap => "overlap",
        Report::Gradcheck => "gradcheck",
    };
    metadata(&cfg, &dir, &format!("analyze-{name}"), tc.seed, extra)?;
    Ok(line)
}

fn cmd_sweep(common: &Common) -> Result<String> {
    let cfg = resolve(common, false)?;
    let grid = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::field("sweep", "grid is empty: the config has no [sweep] table"))?;
    let ds = load_data(&cfg)?;
    let dir = out_dir(&cfg)?;
    let base = cfg.train_config();
    info!("sweeping {} cells", grid.points().len());
    let rep = sweep(&ds, &base, &grid)?;
    let p = dir.join("sweep.csv");
    write_sweep(&p, &rep).map_err(io_err(&p))?;
    let failed = rep.cells.iter().filter(|c| c.status != "ok").count();
    metadata(&cfg, &dir, "sweep", base.seed, json!({ "cells": rep.cells.len(), "failed": failed }))?;
    let best = rep
        .cells
        .iter()
        .filter(|c| c.status == "ok")
        .max_by(|a, b| a.recall1.total_cmp(&b.recall1));
    Ok(match best {
        Some(b) => format!(
            "cells={} failed={failed} best_mode={} best_tau={:?} best_c={:?} best_lambda={:?} best_recall1={:?}",
            rep.cells.len(),
            b.mode.as_str(),
            b.tau,
            b.c,
            b.lambda,
            b.recall1
        ),
        None => format!("cells={} failed={failed}", rep.cells.len()),
    })
}

fn cmd_gen_data(common: &Common) -> Result<String> {
    if common.data.is_some() {
        return Err(CliError::field("data", "gen-data writes data; it does not read --data"));
    }
    let cfg = resolve(common, true)?;
    let ds = synth_seeded(&cfg.data.synthetic, cfg.data.seed)?;
    let dir = out_dir(&cfg)?;
    let ext = match cfg.data.format {
        gyromix::FeatureFormat::Csv => "csv",
        gyromix::FeatureFormat::Gmf1 => "gmf1",
    };
    let p = dir.join(format!("data.{ext}"));
    save_features(&ds, &p, cfg.data.format).map_err(io_err(&p))?;
    metadata(&cfg, &dir, "gen-data", cfg.data.seed, json!({ "path": p, "samples": ds.len() }))?;
    Ok(format!(
        "samples={} classes={} dim={} path={}",
        ds.len(),
        ds.class_index().len(),
        ds.dim(),
        p.display()
    ))
}
