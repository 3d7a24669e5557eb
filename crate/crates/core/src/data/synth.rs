//! Deterministic synthetic identities: each identity is a colored figure
//! with its own head, torso, leg colors and torso pattern; samples jitter
//! position, brightness and pixel noise.

use std::sync::Arc;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::data::{stream_seed, Dataset, ImageSource, Sample, Splits};
use crate::error::{HatError, Result};

const IDENTITY_STREAM: u64 = 10;
const SAMPLE_STREAM: u64 = 11;
pub const NUM_CAMERAS: usize = 6;

/// Parsed `synth://num_ids/per_id/seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub num_ids: usize,
    pub per_id: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// `Ok(None)` when `source` is not a synthetic URI.
    pub fn parse(source: &str) -> Result<Option<Self>> {
        let Some(rest) = source.strip_prefix("synth://") else {
            return Ok(None);
        };
        let parts: Vec<&str> = rest.split('/').collect();
        let bad = || HatError::Config(format!("malformed synthetic source {source:?}; expected synth://num_ids/per_id/seed"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let num_ids = parts[0].parse().map_err(|_| bad())?;
        let per_id = parts[1].parse().map_err(|_| bad())?;
        let seed = parts[2].parse().map_err(|_| bad())?;
        if num_ids < 2 || per_id < 2 {
            return Err(HatError::Config(format!(
                "synthetic source needs at least 2 identities with 2 samples each, got {num_ids}x{per_id}"
            )));
        }
        Ok(Some(Self { num_ids, per_id, seed }))
    }
}

#[derive(Debug, Clone, Copy)]
struct Signature {
    head: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
    accent: [f64; 3],
    pattern: u8,
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn signature(seed: u64, id: usize) -> Signature {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[IDENTITY_STREAM, id as u64]));
    Signature {
        head: color(&mut rng),
        torso: color(&mut rng),
        legs: color(&mut rng),
        accent: color(&mut rng),
        pattern: rng.random_range(0..3),
    }
}

/// Renders sample `index` of identity `id` as a `(3, height, width)` image
/// in `[0, 1]`.
pub fn render(seed: u64, id: usize, index: usize, height: usize, width: usize) -> Array3<f32> {
    let sig = signature(seed, id);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[SAMPLE_STREAM, id as u64, index as u64]));
    let dx = rng.random_range(-0.06..0.06);
    let dy = rng.random_range(-0.04..0.04);
    let brightness = rng.random_range(0.85..1.15);
    let background = rng.random_range(0.45..0.55);
    let noise = Normal::new(0.0, 0.03).unwrap();
    let mut img = Array3::zeros((3, height, width));
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64 - dx;
            let v = (y as f64 + 0.5) / height as f64 - dy;
            let head = ((u - 0.5) / 0.12).powi(2) + ((v - 0.12) / 0.08).powi(2) < 1.0;
            let torso = (0.25..0.75).contains(&u) && (0.22..0.55).contains(&v);
            let legs = ((0.3..0.47).contains(&u) || (0.53..0.7).contains(&u)) && (0.55..0.95).contains(&v);
            let base = if head {
                sig.head
            } else if torso {
                let stripe = match sig.pattern {
                    1 => ((v - 0.22) * 24.0).floor() as i64 % 2 == 1,
                    2 => ((u - 0.25) * 16.0).floor() as i64 % 2 == 1,
                    _ => false,
                };
                if stripe {
                    sig.accent
                } else {
                    sig.torso
                }
            } else if legs {
                sig.legs
            } else {
                [background; 3]
            };
            for c in 0..3 {
                let value = base[c] * brightness + rng.sample(noise);
                img[[c, y, x]] = value.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

fn make_sample(seed: u64, id: usize, index: usize, camera: usize, height: usize, width: usize) -> Sample {
    Sample {
        source: ImageSource::Memory(Arc::new(render(seed, id, index, height, width))),
        identity: id as i64,
        camera,
        name: format!("{id:04}_c{}_{index:03}", camera + 1),
    }
}

/// `num_ids * per_id` samples; sample `j` of each identity is on camera
/// `j % 6`.
pub fn synth_dataset(num_ids: usize, per_id: usize, height: usize, width: usize, seed: u64) -> Dataset {
    let samples = (0..num_ids)
        .flat_map(|id| (0..per_id).map(move |j| (id, j)))
        .map(|(id, j)| make_sample(seed, id, j, j % NUM_CAMERAS, height, width))
        .collect();
    Dataset { samples }
}

/// Training set plus a held-out query/gallery split of the same identities,
/// rendered from sample indices the training set never uses. Queries sit on
/// cameras 0 and 1, gallery entries on cameras 2 to 5, so no gallery entry
/// is filtered as a same-camera match.
pub fn synth_splits(
    spec: SynthSpec,
    height: usize,
    width: usize,
    query_per_id: usize,
    gallery_per_id: usize,
) -> Splits {
    let train = synth_dataset(spec.num_ids, spec.per_id, height, width, spec.seed);
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for id in 0..spec.num_ids {
        for q in 0..query_per_id {
            query.push(make_sample(spec.seed, id, spec.per_id + q, q % 2, height, width));
        }
        for g in 0..gallery_per_id {
            let index = spec.per_id + query_per_id + g;
            gallery.push(make_sample(spec.seed, id, index, 2 + g % 4, height, width));
        }
    }
    Splits {
        train,
        query: Dataset { samples: query },
        gallery: Dataset { samples: gallery },
    }
}
