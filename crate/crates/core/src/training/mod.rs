//! Optimization harness: schedule, optimizer, checkpoints and the epoch loop.

pub mod checkpoint;
pub mod optim;
pub mod schedule;
pub mod sweep;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use autograd::Tape;
use serde::{Deserialize, Serialize};

use crate::backbone::import_backbone_weights;
use crate::config::RunConfig;
use crate::data::sampler::pk_batches;
use crate::data::{load_eval_images, load_train_batch, BatchPosition, Dataset};
use crate::error::{HatError, Result};
use crate::losses::{total_loss, LossReport};
use crate::metrics::{distance_matrix, evaluate, EvalResult};
use crate::model::{FeatureMode, HatModel};
use crate::nn::{apply_buffer_updates, Ctx};
use crate::params::ParamStore;
use checkpoint::{load_checkpoint, restore_params, save_checkpoint, Checkpoint};
use optim::Adam;
use schedule::{lr_at, GroupRates};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const EPOCH_LOG: &str = "epoch_log.csv";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const EVAL_REPORT: &str = "eval.json";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOG_HEADER: &str = "epoch,step,lr_base,lr_tfc,id_loss,tri_loss,aux_total,total";

/// JSON evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub cmc: Vec<f64>,
    pub num_valid_queries: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(result: &EvalResult, config_hash: &str) -> Self {
        Self {
            map: result.map,
            cmc: result.cmc.clone(),
            num_valid_queries: result.num_valid_queries,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Knobs that are not part of the reproducible configuration.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop after this epoch, as if interrupted.
    pub stop_after_epoch: Option<usize>,
    /// Skip the final query/gallery evaluation.
    pub skip_eval: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: HatModel,
    pub params: ParamStore,
    pub last_epoch: usize,
    /// One averaged report per epoch run in this call.
    pub epoch_reports: Vec<LossReport>,
    pub eval: Option<EvalResult>,
    pub output_dir: PathBuf,
    pub config_hash: String,
}

fn csv_row(epoch: usize, step: u64, rates: GroupRates, r: &LossReport) -> String {
    format!(
        "{epoch},{step},{},{},{},{},{},{}",
        rates.base,
        rates.tfc,
        r.id_loss,
        r.triplet_loss,
        r.aux_total(),
        r.total
    )
}

fn open_log(path: &Path, fresh: bool) -> Result<BufWriter<File>> {
    let exists = path.exists() && !fresh;
    let file = if fresh {
        File::create(path)?
    } else {
        OpenOptions::new().create(true).append(true).open(path)?
    };
    let mut w = BufWriter::new(file);
    if !exists {
        writeln!(w, "{LOG_HEADER}")?;
    }
    Ok(w)
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let levels = reports.first().map_or(0, |r| r.aux_losses.len());
    LossReport {
        id_loss: reports.iter().map(|r| r.id_loss).sum::<f64>() / n,
        triplet_loss: reports.iter().map(|r| r.triplet_loss).sum::<f64>() / n,
        aux_losses: (0..levels)
            .map(|i| reports.iter().map(|r| r.aux_losses[i]).sum::<f64>() / n)
            .collect(),
        lambda: reports.first().map_or(0.0, |r| r.lambda),
        total: reports.iter().map(|r| r.total).sum::<f64>() / n,
    }
}

/// Eval-mode features for every sample of `ds`.
pub fn dataset_features(
    model: &HatModel,
    params: &ParamStore,
    ds: &Dataset,
    cfg: &RunConfig,
    mode: FeatureMode,
) -> Result<ndarray::Array2<f64>> {
    let mut parts = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(cfg.eval.batch_size.max(1)) {
        let images = load_eval_images(ds, chunk, &cfg.data)?;
        parts.push(model.extract_features(params, &images, mode, chunk.len())?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| HatError::Shape(format!("cannot stack features: {e}")))
}

/// Retrieval metrics of `query` against `gallery`.
pub fn evaluate_split(
    model: &HatModel,
    params: &ParamStore,
    query: &Dataset,
    gallery: &Dataset,
    cfg: &RunConfig,
    mode: FeatureMode,
) -> Result<EvalResult> {
    if query.is_empty() || gallery.is_empty() {
        return Err(HatError::EmptyEvaluation);
    }
    let qf = dataset_features(model, params, query, cfg, mode)?;
    let gf = dataset_features(model, params, gallery, cfg, mode)?;
    let dist = distance_matrix(&qf, &gf, cfg.eval.normalize)?;
    evaluate(&dist, &query.meta(), &gallery.meta(), cfg.eval.max_rank)
}

/// Classifier weight whose width gives the number of training identities.
const CLASSIFIER_WEIGHT: &str = "heads.hat.classifier.weight";

/// Rebuilds the model described by `cfg` and fills it from the checkpoint at
/// `path`; the identity count is read from the stored classifier.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(HatModel, ParamStore, Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    let num_ids = ckpt
        .params
        .get(CLASSIFIER_WEIGHT)
        .and_then(|e| e.value.shape().get(1).copied())
        .ok_or_else(|| HatError::Checkpoint(format!("{} has no {CLASSIFIER_WEIGHT}", path.display())))?;
    let (model, mut params) = HatModel::build(cfg.model_spec(num_ids), cfg.seed)?;
    restore_params(&mut params, &ckpt.params)?;
    Ok((model, params, ckpt))
}

fn snapshot(
    epoch: usize,
    cfg: &RunConfig,
    hash: &str,
    params: &ParamStore,
    opt: &Adam,
) -> Result<Checkpoint> {
    Ok(Checkpoint {
        epoch,
        seed: cfg.seed,
        config_hash: hash.to_string(),
        config: serde_json::to_value(cfg)?,
        params: params.clone(),
        optimizer: opt.state.clone(),
    })
}

/// Trains per `cfg`, writing logs, checkpoints, a config snapshot and the
/// final evaluation under `out_dir`.
pub fn train(cfg: &RunConfig, out_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = cfg.clone().validated()?;
    let hash = cfg.hash();
    let resumed = match &opts.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config_hash != hash {
                return Err(HatError::Checkpoint(format!(
                    "{} was written by config {}, this run is {hash}",
                    path.display(),
                    ckpt.config_hash
                )));
            }
            Some(ckpt)
        }
        None => None,
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_SNAPSHOT), cfg.to_toml_string())?;

    let (splits, warnings) = cfg.data.open()?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let (labels, ids) = splits.train.class_labels()?;
    let (model, mut params) = HatModel::build(cfg.model_spec(ids.len()), cfg.seed)?;
    if let Some(w) = &cfg.backbone.weights {
        let report = import_backbone_weights(&mut params, Path::new(w))?;
        log::info!(
            "imported {} backbone arrays ({} missing, {} unused)",
            report.loaded.len(),
            report.missing.len(),
            report.unexpected.len()
        );
    }
    let mut opt = Adam::new(cfg.optim.clone());
    let mut start_epoch = 1;
    if let Some(ckpt) = resumed {
        restore_params(&mut params, &ckpt.params)?;
        opt.state = ckpt.optimizer;
        start_epoch = ckpt.epoch + 1;
    }
    let fresh = opts.resume.is_none();
    let mut step_log = open_log(&out_dir.join(TRAIN_LOG), fresh)?;
    let mut epoch_log = open_log(&out_dir.join(EPOCH_LOG), fresh)?;
    let ckpt_dir = out_dir.join("checkpoints");

    let last_epoch = opts
        .stop_after_epoch
        .map_or(cfg.schedule.total_epochs, |e| e.min(cfg.schedule.total_epochs));
    let mut epoch_reports = Vec::new();
    let mut eval = None;
    for epoch in start_epoch..=last_epoch {
        let rates = lr_at(epoch, &cfg.schedule)?;
        let batches = pk_batches(&labels, &cfg.data.sampler, cfg.seed, epoch)?;
        let mut reports = Vec::with_capacity(batches.len());
        for (b, indices) in batches.iter().enumerate() {
            let pos = BatchPosition {
                seed: cfg.seed,
                epoch,
                batch: b,
            };
            let batch = load_train_batch(&splits.train, indices, &labels, &cfg.data, pos)?;
            let tape = Tape::new();
            let ctx = Ctx::train(&tape, &params);
            let out = model.forward(&ctx, &batch.images)?;
            let (main, aux) = model.supervised_terms(&out);
            let loss = total_loss(&main, &aux, &batch.labels, &cfg.loss)?;
            let step = opt.state.step + 1;
            if !loss.report.total.is_finite() {
                drop(ctx);
                let path = ckpt_dir.join(format!("nonfinite_epoch{epoch:03}_step{step}.ckpt"));
                let snap = snapshot(epoch.saturating_sub(1), &cfg, &hash, &params, &opt);
                let saved = snap.and_then(|s| save_checkpoint(&path, &s)).is_ok();
                step_log.flush()?;
                return Err(HatError::NonFinite {
                    epoch,
                    step: step as usize,
                    snapshot: saved.then_some(path),
                });
            }
            let report = loss.report;
            let grads = tape.backward(loss.total);
            let grads = ctx.param_grads(&grads);
            let updates = ctx.take_buffer_updates();
            drop(ctx);
            opt.step(&mut params, &grads, rates);
            apply_buffer_updates(&mut params, updates);
            writeln!(step_log, "{}", csv_row(epoch, opt.state.step, rates, &report))?;
            reports.push(report);
        }
        let mean = mean_report(&reports);
        writeln!(epoch_log, "{}", csv_row(epoch, opt.state.step, rates, &mean))?;
        step_log.flush()?;
        epoch_log.flush()?;
        log::info!(
            "epoch {epoch}: total {:.4} (id {:.4}, tri {:.4}, aux {:.4})",
            mean.total,
            mean.id_loss,
            mean.triplet_loss,
            mean.aux_total()
        );
        epoch_reports.push(mean);

        let every = cfg.train.checkpoint_every;
        let is_last = epoch == last_epoch;
        if is_last || (every > 0 && epoch % every == 0) {
            let ck = snapshot(epoch, &cfg, &hash, &params, &opt)?;
            if every > 0 && epoch % every == 0 {
                save_checkpoint(&ckpt_dir.join(format!("epoch_{epoch:03}.ckpt")), &ck)?;
            }
            save_checkpoint(&out_dir.join(LAST_CHECKPOINT), &ck)?;
        }
        let ev = cfg.train.eval_every;
        let wants_eval = !opts.skip_eval
            && (epoch == cfg.schedule.total_epochs || (ev > 0 && epoch % ev == 0))
            && !splits.query.is_empty()
            && !splits.gallery.is_empty();
        if wants_eval {
            let r = evaluate_split(&model, &params, &splits.query, &splits.gallery, &cfg, cfg.eval.features)?;
            log::info!("epoch {epoch}: mAP {:.4}, Rank-1 {:.4}", r.map, r.rank(1));
            EvalReport::new(&r, &hash).write(&out_dir.join(EVAL_REPORT))?;
            eval = Some(r);
        }
    }
    Ok(TrainOutcome {
        model,
        params,
        last_epoch,
        epoch_reports,
        eval,
        output_dir: out_dir.to_path_buf(),
        config_hash: hash,
    })
}
