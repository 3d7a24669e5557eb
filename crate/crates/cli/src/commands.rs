use std::fs;
use std::path::{Path, PathBuf};

use hat::backbone::ImageBatch;
use hat::config::RunConfig;
use hat::data::augment::augment_eval;
use hat::data::synth::{synth_dataset, SynthSpec};
use hat::data::{load_eval_images, load_image};
use hat::model::FeatureMode;
use hat::training::checkpoint::load_checkpoint;
use hat::training::sweep::{format_table, plan_sweep, run_sweep};
use hat::training::{self, evaluate_split, load_model, EvalReport, TrainOptions, CONFIG_SNAPSHOT, EVAL_REPORT};
use hat::HatError;
use ndarray::{Array2, Array4, Axis};
use serde::Serialize;
use thiserror::Error;

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// Overrides the root that relative `output_dir` values resolve against.
pub const OUTPUT_ROOT_ENV: &str = "HAT_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Hat(#[from] HatError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("writing sweep table: {0}")]
    Csv(#[from] csv::Error),
    #[error("writing map image: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Hat(HatError::Config(_)) => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

/// Where a command's configuration comes from.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    pub path: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub output: Option<PathBuf>,
}

impl ConfigSource {
    /// The config file (or `fallback`, or the defaults) with overrides applied.
    fn resolve(&self, fallback: Option<RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.path, fallback) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(c)) => c,
            (None, None) => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }

    /// `--output`, else `output_dir` joined onto the output root variable
    /// when relative, else `output_dir` itself, followed by `leaf`.
    fn output_dir(&self, cfg: &RunConfig, leaf: Option<&str>) -> PathBuf {
        if let Some(p) = &self.output {
            return p.clone();
        }
        let dir = PathBuf::from(&cfg.output_dir);
        let base = match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if dir.is_relative() => Path::new(&root).join(dir),
            _ => dir,
        };
        match leaf {
            Some(l) => base.join(l),
            None => base,
        }
    }
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(format!("creating {}", dir.display())))?;
    let path = dir.join(CONFIG_SNAPSHOT);
    fs::write(&path, cfg.to_toml_string()).map_err(io(format!("writing {}", path.display())))
}

fn stored_config(checkpoint: &Path) -> Result<RunConfig> {
    let ckpt = load_checkpoint(checkpoint)?;
    serde_json::from_value(ckpt.config).map_err(|e| {
        HatError::Config(format!("{}: stored configuration is unreadable: {e}", checkpoint.display())).into()
    })
}

fn print_eval(r: &hat::metrics::EvalResult) {
    println!("mAP      {:.2}%", 100.0 * r.map);
    for k in [1, 5, 10] {
        println!("Rank-{k:<3} {:.2}%", 100.0 * r.rank(k));
    }
    println!("valid queries: {}", r.num_valid_queries);
    println!("rank  cmc");
    for (k, c) in r.cmc.iter().enumerate() {
        println!("{:>4}  {:.4}", k + 1, c);
    }
}

pub fn train(src: &ConfigSource, resume: Option<&Path>) -> Result<()> {
    let cfg = src.resolve(None)?.validated()?;
    let out = src.output_dir(&cfg, None);
    let opts = TrainOptions {
        resume: resume.map(Path::to_path_buf),
        ..Default::default()
    };
    let outcome = training::train(&cfg, &out, &opts)?;
    if let Some(last) = outcome.epoch_reports.last() {
        println!("epoch {}: loss {:.4}", outcome.last_epoch, last.total);
    }
    if let Some(r) = &outcome.eval {
        print_eval(r);
    }
    println!("outputs in {}", out.display());
    Ok(())
}

pub fn eval(src: &ConfigSource, checkpoint: &Path, features: Option<FeatureMode>) -> Result<()> {
    let fallback = if src.path.is_none() { Some(stored_config(checkpoint)?) } else { None };
    let mut cfg = src.resolve(fallback)?;
    if let Some(f) = features {
        cfg.eval.features = f;
    }
    let cfg = cfg.validated()?;
    let out = src.output_dir(&cfg, Some(&format!("eval-{}", cfg.eval.features.as_str())));
    write_snapshot(&out, &cfg)?;

    let (model, params, _) = load_model(&cfg, checkpoint)?;
    let (splits, warnings) = cfg.data.open()?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let r = evaluate_split(&model, &params, &splits.query, &splits.gallery, &cfg, cfg.eval.features)?;
    EvalReport::new(&r, &cfg.hash()).write(&out.join(EVAL_REPORT))?;
    println!("features: {}", cfg.eval.features.as_str());
    print_eval(&r);
    println!("report: {}", out.join(EVAL_REPORT).display());
    Ok(())
}

#[derive(Serialize)]
struct MapDump<'a> {
    level: usize,
    height: usize,
    width: usize,
    min: f64,
    max: f64,
    values: &'a [Vec<f64>],
}

fn input_batch(cfg: &RunConfig, input: &str, index: usize) -> Result<ImageBatch> {
    let (h, w) = (cfg.data.image_height, cfg.data.image_width);
    if input == "zeros" {
        return Ok(ImageBatch::new(Array4::zeros((1, 3, h, w)).into_dyn())?);
    }
    if let Some(spec) = SynthSpec::parse(input)? {
        let ds = synth_dataset(spec.num_ids, spec.per_id, h, w, spec.seed);
        if index >= ds.len() {
            return Err(HatError::Config(format!("--index {index} is out of range for {input} ({} samples)", ds.len())).into());
        }
        return Ok(load_eval_images(&ds, &[index], &cfg.data)?);
    }
    let img = augment_eval(&load_image(Path::new(input))?, &cfg.data.augment, h, w);
    Ok(ImageBatch::new(img.insert_axis(Axis(0)).into_dyn())?)
}

fn grayscale(map: &Array2<f64>) -> image::GrayImage {
    let (lo, hi) = map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let (rows, cols) = map.dim();
    image::GrayImage::from_fn(cols as u32, rows as u32, |x, y| {
        let v = map[[y as usize, x as usize]];
        // a constant map has no range to stretch; render it mid-gray
        let g = if span > 0.0 { (v - lo) / span * 255.0 } else { 127.5 };
        image::Luma([g.round() as u8])
    })
}

pub fn inspect(src: &ConfigSource, checkpoint: &Path, input: &str, index: usize) -> Result<()> {
    let fallback = if src.path.is_none() { Some(stored_config(checkpoint)?) } else { None };
    let cfg = src.resolve(fallback)?;
    // the dataset is not read here, so only model settings have to be valid
    let errs: Vec<String> = cfg.validate().into_iter().filter(|e| !e.starts_with("data.source")).collect();
    if !errs.is_empty() {
        return Err(HatError::Config(errs.join("\n")).into());
    }
    let out = src.output_dir(&cfg, Some("inspect"));
    write_snapshot(&out, &cfg)?;

    let (model, params, _) = load_model(&cfg, checkpoint)?;
    let images = input_batch(&cfg, input, index)?;
    for (level, maps) in model.level_maps(&params, &images)? {
        let map = maps.index_axis(Axis(0), 0).to_owned();
        let (height, width) = map.dim();
        let rows: Vec<Vec<f64>> = map.rows().into_iter().map(|r| r.to_vec()).collect();
        let dump = MapDump {
            level,
            height,
            width,
            min: map.iter().copied().fold(f64::INFINITY, f64::min),
            max: map.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            values: &rows,
        };
        let png = out.join(format!("level{level}.png"));
        grayscale(&map).save(&png)?;
        let json = out.join(format!("level{level}.json"));
        fs::write(&json, serde_json::to_string_pretty(&dump)? + "\n").map_err(io(format!("writing {}", json.display())))?;
        println!("level {level}: {height}x{width} map, range [{:.4}, {:.4}] -> {}", dump.min, dump.max, png.display());
    }
    Ok(())
}

pub fn sweep(src: &ConfigSource, axis: &str, values: &[String], jobs: usize) -> Result<()> {
    let base = src.resolve(None)?;
    let arms = plan_sweep(&base, axis, values)?;
    let out = src.output_dir(&base, Some(&format!("sweep-{axis}")));
    write_snapshot(&out, &base)?;

    let rows = run_sweep(axis, &arms, &out, jobs)?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io("writing sweep.csv"))?;
    let table = format_table(&rows);
    let txt = out.join("sweep.txt");
    fs::write(&txt, &table).map_err(io(format!("writing {}", txt.display())))?;
    print!("{table}");
    println!("tables in {}", out.display());
    Ok(())
}
