//! Samples, datasets, identity-balanced batching and augmentation.

pub mod augment;
pub mod market;
pub mod sampler;
pub mod synth;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageBatch;
use crate::error::{HatError, Result};
use augment::{augment_eval, augment_train, AugmentConfig};
use sampler::SamplerConfig;
use synth::SynthSpec;

/// Stream tag for per-sample augmentation.
pub const AUGMENT_STREAM: u64 = 2;

/// Derives an independent generator seed from a run seed and a path of
/// stream coordinates (splitmix64 chaining).
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts
        .iter()
        .fold(mix(seed), |acc, &p| mix(acc.rotate_left(23) ^ mix(p)))
}

#[derive(Debug, Clone)]
pub enum ImageSource {
    File(PathBuf),
    /// `(3, H, W)` in `[0, 1]`.
    Memory(Arc<Array3<f32>>),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub source: ImageSource,
    /// Identity label; `-1` marks junk detections.
    pub identity: i64,
    /// 0-based camera index.
    pub camera: usize,
    pub name: String,
}

impl Sample {
    /// The image as `(3, H, W)` in `[0, 1]`.
    pub fn load(&self) -> Result<Array3<f64>> {
        match &self.source {
            ImageSource::Memory(a) => Ok(a.mapv(f64::from)),
            ImageSource::File(p) => load_image(p),
        }
    }
}

pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|source| HatError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn identities(&self) -> BTreeSet<i64> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    /// Contiguous class indices (identities in ascending order) and the
    /// identity behind each class.
    pub fn class_labels(&self) -> Result<(Vec<usize>, Vec<i64>)> {
        let ids: Vec<i64> = self.identities().into_iter().collect();
        if ids.first().is_some_and(|&i| i < 0) {
            return Err(HatError::Input("training split contains junk identities".into()));
        }
        let labels = self
            .samples
            .iter()
            .map(|s| ids.binary_search(&s.identity).expect("collected above"))
            .collect();
        Ok((labels, ids))
    }

    /// `(identity, camera)` per sample.
    pub fn meta(&self) -> Vec<(i64, usize)> {
        self.samples.iter().map(|s| (s.identity, s.camera)).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
}

impl Splits {
    /// `(train, query, gallery)` sample counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.query.len(), self.gallery.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset folder or `synth://num_ids/per_id/seed`.
    pub source: String,
    pub image_height: usize,
    pub image_width: usize,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    /// Held-out synthetic queries per identity.
    pub synth_query_per_id: usize,
    /// Held-out synthetic gallery entries per identity.
    pub synth_gallery_per_id: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: String::new(),
            image_height: 256,
            image_width: 128,
            sampler: SamplerConfig::default(),
            augment: AugmentConfig::default(),
            synth_query_per_id: 2,
            synth_gallery_per_id: 4,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.source.trim().is_empty() {
            errs.push("data.source: missing dataset path (folder or synth://num_ids/per_id/seed)".into());
        } else {
            match SynthSpec::parse(&self.source) {
                Err(e) => errs.push(format!("data.source: {e}")),
                Ok(None) if !Path::new(&self.source).is_dir() => {
                    errs.push(format!("data.source: {} is not a directory", self.source))
                }
                _ => {}
            }
        }
        if self.image_height == 0 || self.image_width == 0 {
            errs.push("data.image_height/image_width: must be positive".into());
        }
        if self.synth_query_per_id == 0 || self.synth_gallery_per_id == 0 {
            errs.push("data.synth_query_per_id/synth_gallery_per_id: must be positive".into());
        }
        errs.extend(self.sampler.validate());
        errs.extend(self.augment.validate());
        errs
    }

    /// Loads or generates the splits; warnings list skipped files.
    pub fn open(&self) -> Result<(Splits, Vec<String>)> {
        match SynthSpec::parse(&self.source)? {
            Some(spec) => Ok((
                synth::synth_splits(
                    spec,
                    self.image_height,
                    self.image_width,
                    self.synth_query_per_id,
                    self.synth_gallery_per_id,
                ),
                Vec::new(),
            )),
            None => {
                let m = market::parse_market_folder(Path::new(&self.source))?;
                Ok((m.splits, m.warnings))
            }
        }
    }
}

/// Images with their labels.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: ImageBatch,
    /// Class index per sample.
    pub labels: Vec<usize>,
    pub identities: Vec<i64>,
    pub cameras: Vec<usize>,
}

/// Where a training batch sits in the run; fixes its augmentation streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPosition {
    pub seed: u64,
    pub epoch: usize,
    pub batch: usize,
}

fn stack(images: Vec<Array3<f64>>) -> Result<ImageBatch> {
    let views: Vec<_> = images.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    let pixels: Array4<f64> = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| HatError::Shape(format!("cannot stack images: {e}")))?;
    ImageBatch::new(pixels.into_dyn())
}

/// Augmented training batch; sample `k` draws from the stream
/// `(seed, epoch, batch, k)` so results do not depend on loading order.
pub fn load_train_batch(
    ds: &Dataset,
    indices: &[usize],
    labels: &[usize],
    cfg: &DataConfig,
    pos: BatchPosition,
) -> Result<LabeledBatch> {
    let mut images = Vec::with_capacity(indices.len());
    for (k, &i) in indices.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
            pos.seed,
            &[AUGMENT_STREAM, pos.epoch as u64, pos.batch as u64, k as u64],
        ));
        let img = ds.samples[i].load()?;
        images.push(augment_train(&img, &cfg.augment, cfg.image_height, cfg.image_width, &mut rng));
    }
    Ok(LabeledBatch {
        images: stack(images)?,
        labels: indices.iter().map(|&i| labels[i]).collect(),
        identities: indices.iter().map(|&i| ds.samples[i].identity).collect(),
        cameras: indices.iter().map(|&i| ds.samples[i].camera).collect(),
    })
}

/// Eval-mode images for `indices`.
pub fn load_eval_images(ds: &Dataset, indices: &[usize], cfg: &DataConfig) -> Result<ImageBatch> {
    let images = indices
        .iter()
        .map(|&i| Ok(augment_eval(&ds.samples[i].load()?, &cfg.augment, cfg.image_height, cfg.image_width)))
        .collect::<Result<Vec<_>>>()?;
    stack(images)
}
