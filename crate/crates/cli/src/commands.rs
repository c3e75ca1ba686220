//! Pipeline steps. Each `cmd_*` writes its artifacts, a metrics CSV where
//! training happens, the resolved config and a manifest under one output
//! directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;
use sws_core::data::Dataset;
use sws_core::expand::{assignment_report, init_descendant, report_csv, simple_lg_expand, DescendantSpec};
use sws_core::sharing::{build_aux, extract_learngene, LearngenePack, Provenance};
use sws_core::store::{
    load_checkpoint, load_logit_cache, load_pack, save_checkpoint, save_logit_cache, save_pack, write_atomic,
};
use sws_core::train::{cache_teacher_logits, evaluate, train_model, Metrics, TeacherSource, TrainConfig, EVAL_BATCH};
use sws_core::vit::{build_model, count_params, ModelParams};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::manifest::Manifest;

pub const TEACHER_FILE: &str = "teacher.sws";
pub const TEACHER_CACHE_FILE: &str = "teacher_logits.sws";
pub const AUX_FILE: &str = "aux.sws";
pub const PACK_FILE: &str = "learngene.sws";
pub const DESCENDANT_FILE: &str = "descendant.sws";
pub const FINETUNED_FILE: &str = "finetuned.sws";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const EVAL_FILE: &str = "eval.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ASSIGNMENT_FILE: &str = "assignment.csv";

/// Where the run writes: `--out` if given, else the config's `out`.
fn out_dir(cfg: Option<&ExperimentConfig>, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.map(|c| c.out.clone()))
        .ok_or_else(|| CliError::Config("no output directory (pass --out)".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_metrics(dir: &Path, metrics: &Metrics, manifest: &mut Manifest) -> Result<(), CliError> {
    write_text(&dir.join(METRICS_FILE), &metrics.to_csv())?;
    write_text(&dir.join(SUMMARY_FILE), &metrics.summary())?;
    manifest.artifact(dir, METRICS_FILE)?;
    manifest.artifact(dir, SUMMARY_FILE)
}

fn start_manifest(command: &str, cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest, CliError> {
    let text = cfg.to_toml();
    write_text(&dir.join("config.toml"), &text)?;
    let mut m = Manifest::new(command);
    m.set("seed", cfg.seed);
    m.artifact(dir, "config.toml")?;
    Ok(m)
}

/// Trains a teacher with pure classification (`train.alpha` is ignored) and
/// caches its logits over the training split.
pub fn cmd_train_teacher(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Metrics, CliError> {
    let dir = out_dir(Some(cfg), out)?;
    let (train, val) = cfg.datasets()?;
    let mut model = build_model::<f32>(&cfg.model, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let tc = TrainConfig {
        alpha: 0.0,
        ..cfg.train.clone()
    };
    let metrics = train_model(&mut model, &train, &val, &tc, None)?;
    let cache = cache_teacher_logits(&model, &train, EVAL_BATCH)?;

    let mut manifest = start_manifest("train-teacher", cfg, &dir)?;
    save_checkpoint(&model, &json!({"role": "teacher"}), dir.join(TEACHER_FILE))?;
    save_logit_cache(&cache, dir.join(TEACHER_CACHE_FILE))?;
    manifest.set("dataset_hash", format!("{:016x}", train.hash()));
    manifest.artifact(&dir, TEACHER_FILE)?;
    manifest.artifact(&dir, TEACHER_CACHE_FILE)?;
    write_metrics(&dir, &metrics, &mut manifest)?;
    manifest.write(&dir)?;
    Ok(metrics)
}

/// Trains the stage-tied model of `[plan]` (untied when no plan is given,
/// which yields a Simple-LG source) and extracts its learngene pack.
pub fn cmd_train_aux(
    cfg: &ExperimentConfig,
    teacher_cache: Option<&Path>,
    out: Option<&Path>,
) -> Result<(ModelParams<f32>, Metrics), CliError> {
    let dir = out_dir(Some(cfg), out)?;
    let (train, val) = cfg.datasets()?;
    let plan = cfg.plan()?;
    let cache = match teacher_cache {
        Some(p) => Some(load_logit_cache(p)?),
        None if cfg.train.alpha > 0.0 => {
            return Err(CliError::Config(format!(
                "train.alpha = {} needs --teacher-cache",
                cfg.train.alpha
            )))
        }
        None => None,
    };
    let mut aux = build_aux::<f32>(&cfg.model, &plan, cfg.seed)?;
    let metrics = train_model(&mut aux, &train, &val, &cfg.train, cache.as_ref().map(TeacherSource::Cache))?;
    let provenance = Provenance {
        source: if plan.stages() == plan.depth() { "vanilla" } else { "sws" }.into(),
        epochs: cfg.train.epochs,
        seed: cfg.seed,
        alpha: cfg.train.alpha,
        tau: cfg.train.tau,
        tau_square_scaling: cfg.train.tau_square_scaling,
    };
    let pack = extract_learngene(&aux, &plan, provenance)?;

    let mut manifest = start_manifest("train-aux", cfg, &dir)?;
    manifest.set("plan", format!("{:?}", plan.sizes()));
    manifest.set("dataset_hash", format!("{:016x}", train.hash()));
    if let Some(p) = teacher_cache {
        manifest.set("teacher_cache", p.display());
    }
    save_checkpoint(&aux, &json!({"role": "aux"}), dir.join(AUX_FILE))?;
    save_pack(&pack, dir.join(PACK_FILE))?;
    manifest.artifact(&dir, AUX_FILE)?;
    manifest.artifact(&dir, PACK_FILE)?;
    write_metrics(&dir, &metrics, &mut manifest)?;
    manifest.write(&dir)?;
    Ok((aux, metrics))
}

/// Expands a saved pack into an untied descendant.
pub fn cmd_init_des(pack_path: &Path, spec: &DescendantSpec, out: &Path) -> Result<ModelParams<f32>, CliError> {
    let dir = out_dir(None, Some(out))?;
    let pack = load_pack(pack_path)?;
    let des = init_descendant(&pack, spec)?;
    let report = assignment_report(&pack, spec)?;

    let mut manifest = Manifest::new("init-des");
    manifest.set("pack", pack_path.display());
    manifest.set("depth", spec.depth);
    manifest.set("strategy", spec.strategy);
    manifest.set("order", spec.order);
    manifest.set("seed", spec.seed);
    save_checkpoint(&des, &json!({"role": "descendant", "spec": spec}), dir.join(DESCENDANT_FILE))?;
    write_text(&dir.join(ASSIGNMENT_FILE), &report_csv(&report))?;
    manifest.artifact(&dir, DESCENDANT_FILE)?;
    manifest.artifact(&dir, ASSIGNMENT_FILE)?;
    manifest.write(&dir)?;
    Ok(des)
}

fn check_arch(model: &ModelParams<f32>, cfg: &ExperimentConfig, data: &Dataset) -> Result<(), CliError> {
    let m = model.config();
    if [m.channels, m.image_size, m.image_size] != data.image_shape() || m.classes < data.classes() {
        return Err(CliError::Config(format!(
            "checkpoint expects {}x{}x{} images and {} classes; data has {:?} and {}",
            m.channels,
            m.image_size,
            m.image_size,
            m.classes,
            data.image_shape(),
            data.classes()
        )));
    }
    let _ = cfg;
    Ok(())
}

/// Continues training a checkpoint (typically an untied descendant) with
/// `[train]`. Without a teacher cache, `train.alpha` must be 0.
pub fn cmd_finetune(
    checkpoint: &Path,
    cfg: &ExperimentConfig,
    teacher_cache: Option<&Path>,
    out: Option<&Path>,
) -> Result<(ModelParams<f32>, Metrics), CliError> {
    let dir = out_dir(Some(cfg), out)?;
    let (train, val) = cfg.datasets()?;
    let (mut model, _) = load_checkpoint(checkpoint)?;
    check_arch(&model, cfg, &train)?;
    let cache = teacher_cache.map(load_logit_cache).transpose()?;
    let metrics = train_model(&mut model, &train, &val, &cfg.train, cache.as_ref().map(TeacherSource::Cache))?;

    let mut manifest = start_manifest("finetune", cfg, &dir)?;
    manifest.set("checkpoint", checkpoint.display());
    save_checkpoint(&model, &json!({"role": "finetuned"}), dir.join(FINETUNED_FILE))?;
    manifest.artifact(&dir, FINETUNED_FILE)?;
    write_metrics(&dir, &metrics, &mut manifest)?;
    manifest.write(&dir)?;
    Ok((model, metrics))
}

/// Validation loss and top-1 of a checkpoint, without any training.
pub fn cmd_eval(checkpoint: &Path, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(f64, f64), CliError> {
    let dir = out_dir(Some(cfg), out)?;
    let (_, val) = cfg.datasets()?;
    let (model, _) = load_checkpoint(checkpoint)?;
    check_arch(&model, cfg, &val)?;
    let (loss, top1) = evaluate(&model, &val)?;
    write_text(&dir.join(EVAL_FILE), &format!("split,loss,top1\nval,{loss},{top1}\n"))?;
    let mut manifest = start_manifest("eval", cfg, &dir)?;
    manifest.set("checkpoint", checkpoint.display());
    manifest.artifact(&dir, EVAL_FILE)?;
    manifest.write(&dir)?;
    Ok((loss, top1))
}

/// One line of the depth sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub depth: usize,
    pub params: usize,
    pub method: &'static str,
    pub val_loss: f64,
    pub top1: f64,
}

pub const SWEEP_HEADER: &str = "depth,params,method,val_loss,top1";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.depth, r.params, r.method, r.val_loss, r.top1).unwrap();
    }
    out
}

/// No-tune evaluation of SWS and Simple-LG descendants at each depth of
/// `cfg.sweep.depths`, plus scratch models trained with `[train]` when
/// `cfg.sweep.scratch` is set. Depths run in parallel; rows come back in
/// depth order, methods in the order `sws`, `simple-lg`, `scratch`.
pub fn sweep_rows(
    pack: &LearngenePack<f32>,
    vanilla: &ModelParams<f32>,
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<Vec<SweepRow>, CliError> {
    let sweep = &cfg.sweep;
    if sweep.depths.is_empty() {
        return Err(CliError::Config("sweep.depths is empty".into()));
    }
    let per_depth = |depth: usize| -> Result<Vec<SweepRow>, CliError> {
        let spec = DescendantSpec::new(depth, sweep.strategy)
            .with_order(sweep.order)
            .with_seed(cfg.seed);
        let mut models = vec![
            ("sws", init_descendant(pack, &spec)?),
            (
                "simple-lg",
                simple_lg_expand(vanilla, depth, sweep.strategy, sweep.order, cfg.seed)?,
            ),
        ];
        if sweep.scratch {
            let mut scratch = build_model::<f32>(&cfg.model.with_depth(depth), cfg.seed)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let tc = TrainConfig {
                alpha: 0.0,
                ..cfg.train.clone()
            };
            train_model(&mut scratch, train, val, &tc, None)?;
            models.push(("scratch", scratch));
        }
        models
            .into_iter()
            .map(|(method, model)| {
                let (val_loss, top1) = evaluate(&model, val)?;
                Ok(SweepRow {
                    depth,
                    params: count_params(&model, true),
                    method,
                    val_loss,
                    top1,
                })
            })
            .collect()
    };
    let rows: Vec<Vec<SweepRow>> = sweep
        .depths
        .par_iter()
        .map(|&d| per_depth(d))
        .collect::<Result<_, _>>()?;
    Ok(rows.into_iter().flatten().collect())
}

pub fn cmd_sweep_depth(
    pack_path: &Path,
    vanilla_path: &Path,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<SweepRow>, CliError> {
    let dir = out_dir(Some(cfg), out)?;
    let (train, val) = cfg.datasets()?;
    let pack = load_pack(pack_path)?;
    let (vanilla, _) = load_checkpoint(vanilla_path)?;
    if !vanilla.is_untied() {
        return Err(CliError::Config(format!(
            "{} is stage-tied; Simple-LG needs an untied vanilla model",
            vanilla_path.display()
        )));
    }
    check_arch(&vanilla, cfg, &val)?;
    let rows = sweep_rows(&pack, &vanilla, cfg, &train, &val)?;
    write_text(&dir.join(SWEEP_FILE), &sweep_csv(&rows))?;
    let mut manifest = start_manifest("sweep-depth", cfg, &dir)?;
    manifest.set("pack", pack_path.display());
    manifest.set("vanilla", vanilla_path.display());
    manifest.artifact(&dir, SWEEP_FILE)?;
    manifest.write(&dir)?;
    Ok(rows)
}
