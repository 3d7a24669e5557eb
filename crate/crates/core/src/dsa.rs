//! Deeply supervised aggregation: low-to-high recursion over the active
//! levels plus per-level classifier heads.

use std::collections::BTreeMap;

use autograd::Var;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, LEVELS};
use crate::error::{HatError, Result};
use crate::nn::{BatchNorm, Ctx, Linear};
use crate::params::{Init, ParamBuilder};
use crate::tfc::{StageShape, TfcConfig, TfcOutput, TfcStage};

/// What the first active level concatenates with its own map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bootstrap {
    /// `(X, X)`: token width stays `2C` at every level.
    #[serde(rename = "self")]
    SelfPair,
    /// `X` alone: the first stage works at width `C`.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsaConfig {
    /// Encoder depth per level, lowest level first; zero skips the level.
    pub depths: Vec<usize>,
    pub use_aux_loss: bool,
    pub use_nea: bool,
    pub use_mfe_supervision: bool,
    pub bootstrap: Bootstrap,
    /// Feed the aux triplet term the neck output instead of the raw CLS.
    pub aux_triplet_on_neck: bool,
}

impl Default for DsaConfig {
    fn default() -> Self {
        Self {
            depths: vec![3, 3, 6, 0],
            use_aux_loss: true,
            use_nea: true,
            use_mfe_supervision: true,
            bootstrap: Bootstrap::SelfPair,
            aux_triplet_on_neck: false,
        }
    }
}

impl DsaConfig {
    /// `(level, depth)` for every level with non-zero depth, low to high.
    pub fn active_levels(&self) -> Vec<(usize, usize)> {
        self.depths
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0)
            .map(|(i, &d)| (i + 1, d))
            .collect()
    }

    pub fn num_active(&self) -> usize {
        self.active_levels().len()
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.depths.len() != LEVELS {
            errs.push(format!(
                "dsa.depths: expected {LEVELS} values, got {}",
                self.depths.len()
            ));
        } else if self.depths.iter().all(|&d| d == 0) {
            errs.push("dsa.depths: at least one level needs a positive depth".into());
        }
        errs
    }

    /// Geometry of each active stage given the aligned map shape.
    pub fn stage_shapes(&self, channels: usize, height: usize, width: usize) -> Vec<(usize, usize, StageShape)> {
        self.active_levels()
            .into_iter()
            .enumerate()
            .map(|(i, (level, depth))| {
                let inputs = if i == 0 && self.bootstrap == Bootstrap::Single { 1 } else { 2 };
                (
                    level,
                    depth,
                    StageShape {
                        channels,
                        inputs,
                        height,
                        width,
                    },
                )
            })
            .collect()
    }
}

/// Anything that can calibrate one level given the previous aggregate.
pub trait LevelCalibrator {
    fn calibrate<'t>(
        &self,
        ctx: &Ctx<'t>,
        level: usize,
        current: FeatureMap<'t>,
        previous: Option<FeatureMap<'t>>,
    ) -> Result<TfcOutput<'t>>;
}

/// Per-level outputs of one aggregation pass.
#[derive(Debug, Clone)]
pub struct AggregationTrace<'t> {
    /// `(level, output)`, low level first.
    pub levels: Vec<(usize, TfcOutput<'t>)>,
}

impl<'t> AggregationTrace<'t> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// CLS of the deepest active level.
    pub fn final_cls(&self) -> Var<'t> {
        self.levels.last().expect("trace is never empty").1.cls
    }
}

/// Runs the recursion `Z_s = TFC(X_s, Z_{s-1})` over active levels.
pub fn dsa_aggregate<'t, C: LevelCalibrator + ?Sized>(
    ctx: &Ctx<'t>,
    aligned: &[FeatureMap<'t>],
    cfg: &DsaConfig,
    calibrator: &C,
) -> Result<AggregationTrace<'t>> {
    let active = cfg.active_levels();
    if active.is_empty() {
        return Err(HatError::Config("all level depths are zero".into()));
    }
    let shape = aligned.first().map(|f| f.shape());
    if let Some(bad) = aligned.iter().find(|f| Some(f.shape()) != shape) {
        return Err(HatError::Aggregation(format!(
            "aligned level {} has shape {:?}, expected {:?}",
            bad.level,
            bad.shape(),
            shape.unwrap_or_default()
        )));
    }
    let mut levels: Vec<(usize, TfcOutput<'t>)> = Vec::with_capacity(active.len());
    for (level, _) in active {
        let current = *aligned
            .iter()
            .find(|f| f.level == level)
            .ok_or_else(|| HatError::Aggregation(format!("no aligned map for level {level}")))?;
        let previous = match levels.last() {
            Some((_, out)) => Some(out.feature),
            None => match cfg.bootstrap {
                Bootstrap::SelfPair => Some(current),
                Bootstrap::Single => None,
            },
        };
        let out = calibrator.calibrate(ctx, level, current, previous)?;
        levels.push((level, out));
    }
    Ok(AggregationTrace { levels })
}

/// The calibration stages of every active level.
#[derive(Debug, Clone)]
pub struct Dsa {
    pub stages: BTreeMap<usize, TfcStage>,
}

impl Dsa {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        dsa: &DsaConfig,
        tfc: &TfcConfig,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Self {
        let stages = dsa
            .stage_shapes(channels, height, width)
            .into_iter()
            .map(|(level, depth, shape)| {
                let st = TfcStage::new(&mut pb.sub(&format!("level{level}")), tfc, shape, depth, dsa.use_nea);
                (level, st)
            })
            .collect();
        Self { stages }
    }
}

impl LevelCalibrator for Dsa {
    fn calibrate<'t>(
        &self,
        ctx: &Ctx<'t>,
        level: usize,
        current: FeatureMap<'t>,
        previous: Option<FeatureMap<'t>>,
    ) -> Result<TfcOutput<'t>> {
        let stage = self
            .stages
            .get(&level)
            .ok_or_else(|| HatError::Aggregation(format!("no calibration stage at level {level}")))?;
        stage.forward(ctx, current, previous)
    }
}

/// Normalization neck followed by a bias-free identity classifier.
#[derive(Debug, Clone)]
pub struct Head {
    pub neck: BatchNorm,
    pub classifier: Linear,
}

/// One head's outputs.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput<'t> {
    /// Input embedding, `(B, D)`.
    pub embedding: Var<'t>,
    /// After the neck, `(B, D)`.
    pub neck: Var<'t>,
    /// `(B, num_ids)`.
    pub logits: Var<'t>,
}

impl Head {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize, num_ids: usize) -> Self {
        Self {
            neck: BatchNorm::new(&mut pb.sub("neck"), width),
            classifier: Linear::new(&mut pb.sub("classifier"), width, num_ids, false, Init::Normal(0.001)),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, embedding: Var<'t>) -> HeadOutput<'t> {
        let neck = self.neck.forward(ctx, embedding);
        HeadOutput {
            embedding,
            neck,
            logits: self.classifier.forward(ctx, neck),
        }
    }
}

/// One classifier head per active level.
#[derive(Debug, Clone)]
pub struct AuxHeads {
    pub heads: BTreeMap<usize, Head>,
}

impl AuxHeads {
    pub fn new(pb: &mut ParamBuilder<'_>, shapes: &[(usize, usize, StageShape)], num_ids: usize) -> Self {
        let heads = shapes
            .iter()
            .map(|(level, _, shape)| {
                (
                    *level,
                    Head::new(&mut pb.sub(&format!("level{level}")), shape.token_width(), num_ids),
                )
            })
            .collect();
        Self { heads }
    }

    /// `(level, outputs)` for every level in the trace.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        trace: &AggregationTrace<'t>,
    ) -> Result<Vec<(usize, HeadOutput<'t>)>> {
        trace
            .levels
            .iter()
            .map(|(level, out)| {
                let head = self
                    .heads
                    .get(level)
                    .ok_or_else(|| HatError::Aggregation(format!("no aux head at level {level}")))?;
                Ok((*level, head.forward(ctx, out.cls)))
            })
            .collect()
    }
}
