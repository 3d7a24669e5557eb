//! Image augmentation on `(3, H, W)` arrays with values in `[0, 1]`.

use autograd::bilinear_matrix;
use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// How erased pixels are filled (values are in normalized space).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EraseFill {
    /// Per-channel constants from `erase_value`.
    Constant,
    /// Independent standard-normal draws.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Apply the random steps during training.
    pub enabled: bool,
    pub pad: usize,
    pub flip_prob: f64,
    pub erase_prob: f64,
    pub erase_area: [f64; 2],
    pub erase_aspect: [f64; 2],
    pub erase_attempts: usize,
    pub erase_fill: EraseFill,
    pub erase_value: [f64; 3],
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            pad: 10,
            flip_prob: 0.5,
            erase_prob: 0.5,
            erase_area: [0.02, 0.4],
            erase_aspect: [0.3, 3.33],
            erase_attempts: 100,
            erase_fill: EraseFill::Constant,
            erase_value: [0.4914, 0.4822, 0.4465],
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, p) in [
            ("data.augment.flip_prob", self.flip_prob),
            ("data.augment.erase_prob", self.erase_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("{name}: must be in [0, 1], got {p}"));
            }
        }
        let [lo, hi] = self.erase_area;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            errs.push(format!("data.augment.erase_area: need 0 < lo <= hi < 1, got {:?}", self.erase_area));
        }
        let [lo, hi] = self.erase_aspect;
        if !(0.0 < lo && lo <= hi) {
            errs.push(format!("data.augment.erase_aspect: need 0 < lo <= hi, got {:?}", self.erase_aspect));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            errs.push(format!("data.augment.std: must be positive, got {:?}", self.std));
        }
        errs
    }
}

/// Bilinear resize (half-pixel centers) to `(h, w)`; identity when the size
/// already matches.
pub fn resize(img: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, ih, iw) = img.dim();
    if (ih, iw) == (h, w) {
        return img.clone();
    }
    let mh = bilinear_matrix(ih, h);
    let mw: Array2<f64> = bilinear_matrix(iw, w).reversed_axes();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let plane = mh.dot(&img.index_axis(Axis(0), ch)).dot(&mw);
        out.index_axis_mut(Axis(0), ch).assign(&plane);
    }
    out
}

/// Zero-pads by `pad` on every side then crops a random window of the
/// original size.
pub fn pad_and_crop(img: &Array3<f64>, pad: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    if pad == 0 {
        return img.clone();
    }
    let (c, h, w) = img.dim();
    let mut padded = Array3::zeros((c, h + 2 * pad, w + 2 * pad));
    padded.slice_mut(s![.., pad..pad + h, pad..pad + w]).assign(img);
    let y = rng.random_range(0..=2 * pad);
    let x = rng.random_range(0..=2 * pad);
    padded.slice(s![.., y..y + h, x..x + w]).to_owned()
}

/// Mirrors the width axis.
pub fn hflip(img: &Array3<f64>) -> Array3<f64> {
    img.slice(s![.., .., ..;-1]).to_owned()
}

/// `(x - mean) / std` per channel.
pub fn normalize(img: &Array3<f64>, mean: &[f64; 3], std: &[f64; 3]) -> Array3<f64> {
    let mut out = img.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        plane.mapv_inplace(|v| (v - mean[c]) / std[c]);
    }
    out
}

/// Erased rectangle as `(top, left, height, width)`.
pub type EraseRect = (usize, usize, usize, usize);

/// With probability `erase_prob`, fills one random rectangle whose area
/// fraction and aspect ratio fall in the configured ranges. Returns the
/// rectangle when one was erased.
pub fn random_erase(img: &mut Array3<f64>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Option<EraseRect> {
    if rng.random::<f64>() >= cfg.erase_prob {
        return None;
    }
    let (c, h, w) = img.dim();
    let area = (h * w) as f64;
    for _ in 0..cfg.erase_attempts {
        let target = rng.random_range(cfg.erase_area[0]..=cfg.erase_area[1]) * area;
        let aspect = rng.random_range(cfg.erase_aspect[0]..=cfg.erase_aspect[1]);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        for ch in 0..c {
            let mut region = img.slice_mut(s![ch, top..top + eh, left..left + ew]);
            match cfg.erase_fill {
                EraseFill::Constant => region.fill(cfg.erase_value[ch]),
                EraseFill::Random => region.mapv_inplace(|_| rng.sample(StandardNormal)),
            }
        }
        return Some((top, left, eh, ew));
    }
    None
}

/// Training pipeline: resize, pad-crop, flip, normalize, erase.
pub fn augment_train(
    img: &Array3<f64>,
    cfg: &AugmentConfig,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    if !cfg.enabled {
        return augment_eval(img, cfg, height, width);
    }
    let mut x = resize(img, height, width);
    x = pad_and_crop(&x, cfg.pad, rng);
    if rng.random::<f64>() < cfg.flip_prob {
        x = hflip(&x);
    }
    x = normalize(&x, &cfg.mean, &cfg.std);
    random_erase(&mut x, cfg, rng);
    x
}

/// Evaluation pipeline: resize and normalize only.
pub fn augment_eval(img: &Array3<f64>, cfg: &AugmentConfig, height: usize, width: usize) -> Array3<f64> {
    normalize(&resize(img, height, width), &cfg.mean, &cfg.std)
}
