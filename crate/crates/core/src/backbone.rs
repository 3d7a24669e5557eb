//! Multi-scale feature extractor: a four-stage residual CNN, plus the
//! bottleneck and scaling modules that bring every stage to a common
//! `(C, H/d, W/d)` shape.

use std::path::Path;

use autograd::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{HatError, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx};
use crate::params::{Init, ParamBuilder, ParamStore};

/// Number of hierarchy levels produced by the backbone.
pub const LEVELS: usize = 4;

/// Scaling divisors the aligner accepts.
pub const SCALING_DIVISORS: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Width `C` of every aligned level.
    pub common_channels: usize,
    /// Aligned maps are `(H_img / d, W_img / d)`.
    pub scaling_divisor: usize,
    /// Residual blocks in each level's bottleneck.
    pub bottleneck_blocks: usize,
    /// Optional checkpoint whose `backbone.*` arrays replace the initial weights.
    pub weights: Option<String>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![32, 64, 128, 256],
            blocks_per_stage: vec![1, 1, 1, 1],
            common_channels: 64,
            scaling_divisor: 16,
            bottleneck_blocks: 1,
            weights: None,
        }
    }
}

impl BackboneConfig {
    /// Itemized problems with this config for the given input size.
    pub fn validate(&self, image_height: usize, image_width: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if self.stage_channels.len() != LEVELS || self.stage_channels.contains(&0) {
            errs.push(format!(
                "backbone.stage_channels: expected {LEVELS} positive values, got {:?}",
                self.stage_channels
            ));
        }
        if self.blocks_per_stage.len() != LEVELS || self.blocks_per_stage.contains(&0) {
            errs.push(format!(
                "backbone.blocks_per_stage: expected {LEVELS} positive values, got {:?}",
                self.blocks_per_stage
            ));
        }
        if self.common_channels == 0 {
            errs.push("backbone.common_channels: must be positive".into());
        }
        if self.bottleneck_blocks == 0 {
            errs.push("backbone.bottleneck_blocks: must be positive".into());
        }
        let d = self.scaling_divisor;
        if !SCALING_DIVISORS.contains(&d) {
            errs.push(format!(
                "backbone.scaling_divisor: must be one of {SCALING_DIVISORS:?}, got {d}"
            ));
        } else if !image_height.is_multiple_of(d) || !image_width.is_multiple_of(d) {
            errs.push(format!(
                "backbone.scaling_divisor: {d} does not divide input {image_height}x{image_width}"
            ));
        }
        if !image_height.is_multiple_of(32) || !image_width.is_multiple_of(32) {
            errs.push(format!(
                "data.image_height/image_width: {image_height}x{image_width} must be multiples of 32 \
                 for a stride-32 backbone"
            ));
        }
        errs
    }

    /// Spatial size of stage `level` (1-based) for the given input.
    pub fn stage_size(level: usize, image_height: usize, image_width: usize) -> (usize, usize) {
        let stride = 4 << (level - 1);
        (image_height / stride, image_width / stride)
    }

    pub fn aligned_size(&self, image_height: usize, image_width: usize) -> (usize, usize) {
        (
            image_height / self.scaling_divisor,
            image_width / self.scaling_divisor,
        )
    }
}

/// Normalized images, `(B, 3, H, W)`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Tensor,
}

impl ImageBatch {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.ndim() != 4 || pixels.shape()[1] != 3 || pixels.shape()[0] == 0 {
            return Err(HatError::Shape(format!(
                "image batch must be (B>0, 3, H, W), got {:?}",
                pixels.shape()
            )));
        }
        Ok(Self { pixels })
    }

    pub fn batch_size(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }
}

/// One hierarchy level's activations.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap<'t> {
    /// `(B, C_s, H_s, W_s)`.
    pub data: Var<'t>,
    /// 1-based hierarchy level.
    pub level: usize,
}

impl<'t> FeatureMap<'t> {
    pub fn new(data: Var<'t>, level: usize) -> Self {
        Self { data, level }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.data.shape()
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.shape();
        (s[2], s[3])
    }

    pub fn channels(&self) -> usize {
        self.shape()[1]
    }
}

/// Two 3x3 convolutions with a projection shortcut when the shape changes.
#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(pb: &mut ParamBuilder<'_>, input: usize, output: usize, stride: usize) -> Self {
        let conv1 = Conv2d::new(&mut pb.sub("conv1"), input, output, 3, stride, 1, false);
        let bn1 = BatchNorm::new(&mut pb.sub("bn1"), output);
        let conv2 = Conv2d::new(&mut pb.sub("conv2"), output, output, 3, 1, 1, false);
        let bn2 = BatchNorm::new(&mut pb.sub("bn2"), output);
        let shortcut = (stride != 1 || input != output).then(|| {
            (
                Conv2d::new(&mut pb.sub("down.conv"), input, output, 1, stride, 0, false),
                BatchNorm::new(&mut pb.sub("down.bn"), output),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let y = self.bn1.forward(ctx, self.conv1.forward(ctx, x)).relu();
        let y = self.bn2.forward(ctx, self.conv2.forward(ctx, y));
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(ctx, conv.forward(ctx, x)),
            None => x,
        };
        y.add(skip).relu()
    }
}

/// Four-stage residual network with stage strides 4, 2, 2, 2.
#[derive(Debug, Clone)]
pub struct Backbone {
    stem_conv: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Vec<BasicBlock>>,
    image_height: usize,
    image_width: usize,
    pub stage_channels: Vec<usize>,
}

impl Backbone {
    /// Registers parameters under `pb`'s prefix (normally `backbone`).
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        cfg: &BackboneConfig,
        image_height: usize,
        image_width: usize,
    ) -> Self {
        let ch = &cfg.stage_channels;
        let stem_conv = Conv2d::new(&mut pb.sub("stem.conv"), 3, ch[0], 3, 2, 1, false);
        let stem_bn = BatchNorm::new(&mut pb.sub("stem.bn"), ch[0]);
        let mut stages = Vec::with_capacity(LEVELS);
        let mut input = ch[0];
        for (s, (&output, &blocks)) in ch.iter().zip(&cfg.blocks_per_stage).enumerate() {
            let mut spb = pb.sub(&format!("stage{}", s + 1));
            let stage = (0..blocks)
                .map(|b| {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    let block_in = if b == 0 { input } else { output };
                    BasicBlock::new(&mut spb.sub(&format!("block{b}")), block_in, output, stride)
                })
                .collect();
            stages.push(stage);
            input = output;
        }
        Self {
            stem_conv,
            stem_bn,
            stages,
            image_height,
            image_width,
            stage_channels: ch.clone(),
        }
    }

    /// One feature map per stage, strictly decreasing in spatial size.
    pub fn extract_hierarchy<'t>(
        &self,
        ctx: &Ctx<'t>,
        images: &ImageBatch,
    ) -> Result<Vec<FeatureMap<'t>>> {
        if images.height() != self.image_height || images.width() != self.image_width {
            return Err(HatError::Config(format!(
                "input {}x{} does not match configured {}x{}",
                images.height(),
                images.width(),
                self.image_height,
                self.image_width
            )));
        }
        let x = ctx.constant(images.pixels.clone());
        Ok(self.extract_from(ctx, x))
    }

    /// Same as [`Backbone::extract_hierarchy`] on an already-recorded input.
    pub fn extract_from<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Vec<FeatureMap<'t>> {
        let mut h = self.stem_bn.forward(ctx, self.stem_conv.forward(ctx, x)).relu();
        h = h.max_pool2d(2, 2);
        let mut out = Vec::with_capacity(LEVELS);
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                h = block.forward(ctx, h);
            }
            out.push(FeatureMap::new(h, s + 1));
        }
        out
    }
}

/// Global average pool of a `(B, C, H, W)` map to `(B, C)`.
pub fn global_average_pool<'t>(x: Var<'t>) -> Var<'t> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]]).mean_axis(2, false)
}

/// Residual channel projection: `transform(x) + shortcut(x)`, no final
/// activation.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    blocks: Vec<BottleneckBlock>,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
struct BottleneckBlock {
    reduce: Conv2d,
    reduce_bn: BatchNorm,
    conv: Conv2d,
    bn: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl BottleneckBlock {
    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let t = self.reduce_bn.forward(ctx, self.reduce.forward(ctx, x)).relu();
        let t = self.bn.forward(ctx, self.conv.forward(ctx, t));
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(ctx, conv.forward(ctx, x)),
            None => x,
        };
        t.add(skip)
    }
}

impl Bottleneck {
    pub fn new(pb: &mut ParamBuilder<'_>, input: usize, output: usize, blocks: usize) -> Self {
        let blocks = (0..blocks.max(1))
            .map(|b| {
                let mut bpb = pb.sub(&format!("block{b}"));
                let block_in = if b == 0 { input } else { output };
                BottleneckBlock {
                    reduce: Conv2d::new(&mut bpb.sub("reduce"), block_in, output, 1, 1, 0, false),
                    reduce_bn: BatchNorm::new(&mut bpb.sub("reduce_bn"), output),
                    conv: Conv2d::new(&mut bpb.sub("conv"), output, output, 3, 1, 1, false),
                    bn: BatchNorm::new(&mut bpb.sub("bn"), output),
                    shortcut: (block_in != output).then(|| {
                        (
                            Conv2d::new(&mut bpb.sub("shortcut.conv"), block_in, output, 1, 1, 0, false),
                            BatchNorm::new(&mut bpb.sub("shortcut.bn"), output),
                        )
                    }),
                }
            })
            .collect();
        Self {
            blocks,
            out_channels: output,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: FeatureMap<'t>) -> Result<FeatureMap<'t>> {
        let mut h = x.data;
        let expected = self.blocks[0].reduce.in_channels;
        if x.channels() != expected {
            return Err(HatError::Shape(format!(
                "bottleneck at level {} expects {expected} channels, got {}",
                x.level,
                x.channels()
            )));
        }
        for block in &self.blocks {
            h = block.forward(ctx, h);
        }
        Ok(FeatureMap::new(h, x.level))
    }

    /// Names of the final normalization's scale and shift in the last block.
    pub fn final_bn_names(&self) -> (String, String) {
        let bn = &self.blocks.last().unwrap().bn;
        (bn.weight_name().to_string(), bn.bias_name().to_string())
    }

    /// Name of the first block's shortcut projection weight, if any.
    pub fn shortcut_weight_name(&self) -> Option<String> {
        self.blocks[0]
            .shortcut
            .as_ref()
            .map(|(c, _)| c.weight_name().to_string())
    }
}

/// Resizes a map to `(target_h, target_w)`: max pooling when larger,
/// bilinear interpolation when smaller, identity when equal.
pub fn rescale<'t>(x: FeatureMap<'t>, target_h: usize, target_w: usize) -> Result<FeatureMap<'t>> {
    let (h, w) = x.spatial();
    if (h, w) == (target_h, target_w) {
        return Ok(x);
    }
    if target_h == 0 || target_w == 0 {
        return Err(HatError::Config("rescale target must be non-empty".into()));
    }
    if h >= target_h && w >= target_w {
        if h % target_h != 0 || w % target_w != 0 {
            return Err(HatError::Config(format!(
                "cannot max-pool {h}x{w} to {target_h}x{target_w}: non-integer ratio"
            )));
        }
        Ok(FeatureMap::new(
            x.data.max_pool2d(h / target_h, w / target_w),
            x.level,
        ))
    } else if h <= target_h && w <= target_w {
        Ok(FeatureMap::new(x.data.resize_bilinear(target_h, target_w), x.level))
    } else {
        Err(HatError::Config(format!(
            "cannot rescale {h}x{w} to {target_h}x{target_w}: mixed up/down sampling"
        )))
    }
}

/// Bottleneck then rescale for a fixed set of levels.
#[derive(Debug, Clone)]
pub struct ScaleAligner {
    bottlenecks: Vec<(usize, Bottleneck)>,
    target: (usize, usize),
}

impl ScaleAligner {
    /// Parameters exist only for `levels` (1-based); levels outside the set
    /// are never aligned.
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        cfg: &BackboneConfig,
        levels: &[usize],
        image_height: usize,
        image_width: usize,
    ) -> Self {
        let bottlenecks = levels
            .iter()
            .map(|&l| {
                let b = Bottleneck::new(
                    &mut pb.sub(&format!("level{l}")),
                    cfg.stage_channels[l - 1],
                    cfg.common_channels,
                    cfg.bottleneck_blocks,
                );
                (l, b)
            })
            .collect();
        Self {
            bottlenecks,
            target: cfg.aligned_size(image_height, image_width),
        }
    }

    pub fn target(&self) -> (usize, usize) {
        self.target
    }

    pub fn levels(&self) -> Vec<usize> {
        self.bottlenecks.iter().map(|(l, _)| *l).collect()
    }

    pub fn bottleneck(&self, level: usize) -> Option<&Bottleneck> {
        self.bottlenecks
            .iter()
            .find(|(l, _)| *l == level)
            .map(|(_, b)| b)
    }

    /// Aligned maps for every configured level present in `hierarchy`, all
    /// shaped `(B, C, H/d, W/d)`.
    pub fn align<'t>(
        &self,
        ctx: &Ctx<'t>,
        hierarchy: &[FeatureMap<'t>],
    ) -> Result<Vec<FeatureMap<'t>>> {
        self.bottlenecks
            .iter()
            .map(|(level, bottleneck)| {
                let x = hierarchy
                    .iter()
                    .find(|f| f.level == *level)
                    .ok_or_else(|| HatError::Shape(format!("hierarchy lacks level {level}")))?;
                let y = bottleneck.forward(ctx, *x)?;
                rescale(y, self.target.0, self.target.1)
            })
            .collect()
    }
}

/// Result of importing external backbone weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImportReport {
    pub loaded: Vec<String>,
    /// Backbone keys in the model that the file did not provide.
    pub missing: Vec<String>,
    /// Backbone keys in the file the model does not have.
    pub unexpected: Vec<String>,
    /// Keys present in both with different shapes.
    pub shape_mismatch: Vec<String>,
}

/// Copies `backbone.*` arrays from a checkpoint file into `store`.
/// Mismatched shapes are an error; missing or extra keys are reported.
pub fn import_backbone_weights(store: &mut ParamStore, path: &Path) -> Result<ImportReport> {
    let arrays = crate::training::checkpoint::read_arrays(path)?;
    let mut report = ImportReport::default();
    for (name, value) in arrays.iter().filter(|(k, _)| k.starts_with("backbone.")) {
        match store.get(name) {
            None => report.unexpected.push(name.clone()),
            Some(e) if e.value.shape() != value.shape() => report.shape_mismatch.push(name.clone()),
            Some(_) => report.loaded.push(name.clone()),
        }
    }
    if !report.shape_mismatch.is_empty() {
        return Err(HatError::Checkpoint(format!(
            "backbone weight shapes differ for {:?}",
            report.shape_mismatch
        )));
    }
    for name in &report.loaded {
        store.set(name, arrays[name].clone());
    }
    report.missing = store
        .names()
        .filter(|k| k.starts_with("backbone.") && !arrays.contains_key(*k))
        .cloned()
        .collect();
    Ok(report)
}

/// Default initializer for backbone-style convolutions, exposed for tests.
pub fn conv_init(out_channels: usize, kernel: usize) -> Init {
    Init::KaimingFanOut(out_channels * kernel * kernel)
}
