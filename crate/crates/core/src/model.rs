//! The assembled network: backbone, alignment, aggregation and heads.

use autograd::{Tape, Var};
use ndarray::{s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{global_average_pool, Backbone, BackboneConfig, ImageBatch, ScaleAligner};
use crate::dsa::{dsa_aggregate, AggregationTrace, AuxHeads, Dsa, DsaConfig, Head, HeadOutput};
use crate::error::{HatError, Result};
use crate::losses::HeadTerms;
use crate::nn::Ctx;
use crate::params::{ParamBuilder, ParamGroup, ParamStore};
use crate::tfc::TfcConfig;

/// Everything that determines the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub tfc: TfcConfig,
    pub dsa: DsaConfig,
    pub num_ids: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.backbone.validate(self.image_height, self.image_width);
        errs.extend(self.dsa.validate());
        if errs.is_empty() {
            let (h, w) = self.backbone.aligned_size(self.image_height, self.image_width);
            let widths: Vec<_> = self
                .dsa
                .stage_shapes(self.backbone.common_channels, h, w)
                .iter()
                .map(|(_, _, s)| s.token_width())
                .collect();
            errs.extend(self.tfc.validate(&widths));
        }
        if self.num_ids < 2 {
            errs.push(format!("data: need at least 2 training identities, got {}", self.num_ids));
        }
        errs
    }
}

/// Which embedding to use for retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Backbone neck output followed by the aggregated CLS neck output.
    Concat,
    BackboneOnly,
    HatOnly,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Concat => "concat",
            FeatureMode::BackboneOnly => "backbone-only",
            FeatureMode::HatOnly => "hat-only",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "concat" => Ok(FeatureMode::Concat),
            "backbone-only" => Ok(FeatureMode::BackboneOnly),
            "hat-only" => Ok(FeatureMode::HatOnly),
            other => Err(format!(
                "unknown feature mode {other:?} (expected concat, backbone-only or hat-only)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HatModel {
    pub spec: ModelSpec,
    pub backbone: Backbone,
    pub backbone_head: Head,
    pub aligner: ScaleAligner,
    pub dsa: Dsa,
    pub hat_head: Head,
    pub aux_heads: AuxHeads,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput<'t> {
    /// Pooled last stage, `(B, C_4)`.
    pub backbone_global: Var<'t>,
    pub backbone_head: HeadOutput<'t>,
    pub trace: AggregationTrace<'t>,
    pub hat_head: HeadOutput<'t>,
    /// `(level, outputs)` for each active level.
    pub aux: Vec<(usize, HeadOutput<'t>)>,
}

impl HatModel {
    /// Builds the model and a freshly initialized parameter store.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<(Self, ParamStore)> {
        let errs = spec.validate();
        if !errs.is_empty() {
            return Err(HatError::Config(errs.join("; ")));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (spec.image_height, spec.image_width);
        let (ah, aw) = spec.backbone.aligned_size(h, w);
        let c = spec.backbone.common_channels;
        let shapes = spec.dsa.stage_shapes(c, ah, aw);
        let levels: Vec<usize> = shapes.iter().map(|(l, _, _)| *l).collect();
        let final_width = shapes.last().expect("validated").2.token_width();

        let mut root = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Base);
        let backbone = Backbone::new(&mut root.sub("backbone"), &spec.backbone, h, w);
        let backbone_head = Head::new(
            &mut root.sub("heads.backbone"),
            *spec.backbone.stage_channels.last().unwrap(),
            spec.num_ids,
        );
        let aligner = ScaleAligner::new(&mut root.sub("align"), &spec.backbone, &levels, h, w);
        let dsa = Dsa::new(
            &mut root.sub_group("dsa", ParamGroup::Tfc),
            &spec.dsa,
            &spec.tfc,
            c,
            ah,
            aw,
        );
        let hat_head = Head::new(&mut root.sub_group("heads.hat", ParamGroup::Tfc), final_width, spec.num_ids);
        let aux_heads = AuxHeads::new(&mut root.sub_group("heads.aux", ParamGroup::Tfc), &shapes, spec.num_ids);
        Ok((
            Self {
                spec,
                backbone,
                backbone_head,
                aligner,
                dsa,
                hat_head,
                aux_heads,
            },
            store,
        ))
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, images: &ImageBatch) -> Result<ModelOutput<'t>> {
        let hierarchy = self.backbone.extract_hierarchy(ctx, images)?;
        let backbone_global = global_average_pool(hierarchy.last().expect("four levels").data);
        let backbone_head = self.backbone_head.forward(ctx, backbone_global);
        let aligned = self.aligner.align(ctx, &hierarchy)?;
        let trace = dsa_aggregate(ctx, &aligned, &self.spec.dsa, &self.dsa)?;
        let hat_head = self.hat_head.forward(ctx, trace.final_cls());
        let aux = self.aux_heads.forward(ctx, &trace)?;
        Ok(ModelOutput {
            backbone_global,
            backbone_head,
            trace,
            hat_head,
            aux,
        })
    }

    /// Main and per-level heads as configured for the objective. Aux terms
    /// are left out when auxiliary supervision is off.
    pub fn supervised_terms<'t>(&self, out: &ModelOutput<'t>) -> (Vec<HeadTerms<'t>>, Vec<HeadTerms<'t>>) {
        let dsa = &self.spec.dsa;
        let mut main = vec![HeadTerms {
            logits: out.hat_head.logits,
            embedding: out.hat_head.embedding,
        }];
        if dsa.use_mfe_supervision {
            main.push(HeadTerms {
                logits: out.backbone_head.logits,
                embedding: out.backbone_head.embedding,
            });
        }
        let aux = if dsa.use_aux_loss {
            out.aux
                .iter()
                .map(|(_, h)| HeadTerms {
                    logits: h.logits,
                    embedding: if dsa.aux_triplet_on_neck { h.neck } else { h.embedding },
                })
                .collect()
        } else {
            Vec::new()
        };
        (main, aux)
    }

    /// Eval-mode retrieval features, `(N, D)`, computed in chunks.
    pub fn extract_features(
        &self,
        store: &ParamStore,
        images: &ImageBatch,
        mode: FeatureMode,
        chunk: usize,
    ) -> Result<Array2<f64>> {
        let n = images.batch_size();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let sub = ImageBatch::new(images.pixels.slice(s![start..end, .., .., ..]).to_owned().into_dyn())?;
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, store);
            let out = self.forward(&ctx, &sub)?;
            let bb = out.backbone_head.neck.value();
            let hat = out.hat_head.neck.value();
            let f = match mode {
                FeatureMode::Concat => test_feature(&to2(&bb), &to2(&hat))?,
                FeatureMode::BackboneOnly => to2(&bb),
                FeatureMode::HatOnly => to2(&hat),
            };
            parts.push(f);
            start = end;
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
    }

    /// Channel-averaged TFC output of each active level, `(B, h, w)` per
    /// level, in eval mode.
    pub fn level_maps(&self, store: &ParamStore, images: &ImageBatch) -> Result<Vec<(usize, Array3<f64>)>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, store);
        let out = self.forward(&ctx, images)?;
        out.trace
            .levels
            .iter()
            .map(|(level, o)| {
                let mean = o.feature.data.value().mean_axis(Axis(1)).expect("non-empty channels");
                let mean = mean
                    .into_dimensionality()
                    .map_err(|e| HatError::Shape(format!("level {level} map: {e}")))?;
                Ok((*level, mean))
            })
            .collect()
    }
}

fn to2(t: &autograd::Tensor) -> Array2<f64> {
    t.clone().into_dimensionality().expect("rank-2 features")
}

/// Channel concatenation of the backbone and aggregated features.
pub fn test_feature(backbone_global: &Array2<f64>, hat_cls: &Array2<f64>) -> Result<Array2<f64>> {
    if backbone_global.nrows() != hat_cls.nrows() {
        return Err(HatError::Shape(format!(
            "feature batches differ: {} vs {}",
            backbone_global.nrows(),
            hat_cls.nrows()
        )));
    }
    Ok(ndarray::concatenate(Axis(1), &[backbone_global.view(), hat_cls.view()]).expect("same rows"))
}
