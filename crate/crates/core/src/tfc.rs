//! Transformer-based feature calibration: tokenize an aligned level together
//! with the previous aggregate, run encoder layers with a CLS token, and map
//! the spatial tokens back to a feature map.

use autograd::Var;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{HatError, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, LayerNorm, Linear};
use crate::params::{Init, ParamBuilder};

/// Standard deviation for token embeddings and projection weights.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TfcConfig {
    pub heads: usize,
    /// FFN hidden width as a multiple of the token width.
    pub ffn_ratio: usize,
}

impl Default for TfcConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            ffn_ratio: 4,
        }
    }
}

impl TfcConfig {
    /// Itemized problems given the token widths the model will use.
    pub fn validate(&self, token_widths: &[usize]) -> Vec<String> {
        let mut errs = Vec::new();
        if self.heads == 0 {
            errs.push("tfc.heads: must be positive".into());
        }
        if self.ffn_ratio == 0 {
            errs.push("tfc.ffn_ratio: must be positive".into());
        }
        if self.heads > 0 {
            for &cp in token_widths {
                if cp % self.heads != 0 {
                    errs.push(format!(
                        "tfc.heads: {} does not divide token width {cp}",
                        self.heads
                    ));
                }
            }
        }
        errs
    }
}

/// `(B, N + 1, C_p)` tokens: CLS first, then row-major spatial positions.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence<'t> {
    pub tokens: Var<'t>,
    pub height: usize,
    pub width: usize,
}

impl<'t> TokenSequence<'t> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn width_channels(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// CLS state, `(B, C_p)`.
    pub fn cls(&self) -> Var<'t> {
        let s = self.tokens.shape();
        self.tokens.narrow(1, 0, 1).reshape(&[s[0], s[2]])
    }
}

/// Scaled dot-product attention on `(G, n, d)` inputs; returns the output and
/// the `(G, n, n)` weights.
pub fn scaled_dot_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> (Var<'t>, Var<'t>) {
    let d = q.shape()[2];
    let scores = q.bmm(k.transpose_last()).scale(1.0 / (d as f64).sqrt());
    let weights = scores.softmax();
    (weights.bmm(v), weights)
}

/// Single-head attention on `(n, d)` matrices.
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Var<'t> {
    let lift = |x: Var<'t>| {
        let s = x.shape();
        x.reshape(&[1, s[0], s[1]])
    };
    let (out, _) = scaled_dot_attention(lift(q), lift(k), lift(v));
    let s = out.shape();
    out.reshape(&[s[1], s[2]])
}

/// Splits `(B, T, C)` projections into `heads` slices of width `C / heads`,
/// attends within each slice, and concatenates the results back to
/// `(B, T, C)`. Weights are `(B, heads, T, T)`.
pub fn multi_head_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
) -> (Var<'t>, Var<'t>) {
    let s = q.shape();
    let (b, t, c) = (s[0], s[1], s[2]);
    assert!(heads > 0 && c % heads == 0, "heads must divide width");
    let dh = c / heads;
    let split = |x: Var<'t>| {
        x.reshape(&[b, t, heads, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * heads, t, dh])
    };
    let (out, weights) = scaled_dot_attention(split(q), split(k), split(v));
    let out = out
        .reshape(&[b, heads, t, dh])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, t, c]);
    (out, weights.reshape(&[b, heads, t, t]))
}

#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize, heads: usize) -> Self {
        let init = Init::TruncNormal(EMBED_INIT_STD);
        Self {
            q: Linear::new(&mut pb.sub("q"), width, width, true, init),
            k: Linear::new(&mut pb.sub("k"), width, width, true, init),
            v: Linear::new(&mut pb.sub("v"), width, width, true, init),
            out: Linear::new(&mut pb.sub("out"), width, width, true, init),
            heads,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let (y, w) = multi_head_attention(
            self.q.forward(ctx, x),
            self.k.forward(ctx, x),
            self.v.forward(ctx, x),
            self.heads,
        );
        (self.out.forward(ctx, y), w)
    }
}

/// `LayerNorm(x + MSA(x))`.
#[derive(Debug, Clone)]
pub struct MsaBlock {
    pub attn: MultiHeadSelfAttention,
    pub norm: LayerNorm,
}

impl MsaBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize, heads: usize) -> Self {
        Self {
            attn: MultiHeadSelfAttention::new(&mut pb.sub("attn"), width, heads),
            norm: LayerNorm::new(&mut pb.sub("norm"), width),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let (a, w) = self.attn.forward(ctx, x);
        (self.norm.forward(ctx, x.add(a)), w)
    }
}

/// `LayerNorm(x + W2 GELU(W1 x))`, per token.
#[derive(Debug, Clone)]
pub struct FfnBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm: LayerNorm,
}

impl FfnBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize, hidden: usize) -> Self {
        let init = Init::TruncNormal(EMBED_INIT_STD);
        Self {
            fc1: Linear::new(&mut pb.sub("fc1"), width, hidden, true, init),
            fc2: Linear::new(&mut pb.sub("fc2"), hidden, width, true, init),
            norm: LayerNorm::new(&mut pb.sub("norm"), width),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let h = self.fc2.forward(ctx, self.fc1.forward(ctx, x).gelu());
        self.norm.forward(ctx, x.add(h))
    }
}

#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub msa: MsaBlock,
    pub ffn: FfnBlock,
}

impl TransformerLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize, heads: usize, hidden: usize) -> Self {
        Self {
            msa: MsaBlock::new(&mut pb.sub("msa"), width, heads),
            ffn: FfnBlock::new(&mut pb.sub("ffn"), width, hidden),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let (y, w) = self.msa.forward(ctx, x);
        (self.ffn.forward(ctx, y), w)
    }
}

/// Channel-concatenates `current` with `previous` (if any), flattens
/// positions row-major, prepends `cls` and adds `pos` to every slot.
///
/// `cls` is `(C_p,)` and `pos` is `(N + 1, C_p)`.
pub fn tokenize<'t>(
    current: FeatureMap<'t>,
    previous: Option<FeatureMap<'t>>,
    cls: Var<'t>,
    pos: Var<'t>,
) -> Result<TokenSequence<'t>> {
    let x = match previous {
        Some(p) => {
            if p.shape() != current.shape() {
                return Err(HatError::Aggregation(format!(
                    "level {} shape {:?} does not match previous aggregate {:?}",
                    current.level,
                    current.shape(),
                    p.shape()
                )));
            }
            Var::concat(&[current.data, p.data], 1)
        }
        None => current.data,
    };
    let s = x.shape();
    let (b, cp, h, w) = (s[0], s[1], s[2], s[3]);
    let n = h * w;
    if cls.shape() != [cp] || pos.shape() != [n + 1, cp] {
        return Err(HatError::Shape(format!(
            "token embeddings {:?}/{:?} do not fit {n} tokens of width {cp}",
            cls.shape(),
            pos.shape()
        )));
    }
    let spatial = x.reshape(&[b, cp, n]).permute(&[0, 2, 1]);
    let tape = x.tape();
    let cls = tape
        .constant(ArrayD::zeros(IxDyn(&[b, 1, cp])))
        .add(cls.reshape(&[1, 1, cp]));
    let tokens = Var::concat(&[cls, spatial], 1).add(pos.reshape(&[1, n + 1, cp]));
    Ok(TokenSequence {
        tokens,
        height: h,
        width: w,
    })
}

/// Drops CLS and reshapes tokens `1..=N` to `(B, C_p, h, w)`.
pub fn tokens_to_map<'t>(seq: TokenSequence<'t>) -> Result<Var<'t>> {
    let s = seq.tokens.shape();
    let n = seq.spatial_tokens();
    if s[1] != n + 1 {
        return Err(HatError::Shape(format!(
            "{} spatial tokens cannot fill a {}x{} map",
            s[1].saturating_sub(1),
            seq.height,
            seq.width
        )));
    }
    Ok(seq
        .tokens
        .narrow(1, 1, n)
        .permute(&[0, 2, 1])
        .reshape(&[s[0], s[2], seq.height, seq.width]))
}

/// Convolutions restoring local structure after the encoder, `C_p -> C`.
#[derive(Debug, Clone)]
pub enum NeighborhoodAdjust {
    /// conv3x3 + BN + ReLU + conv3x3 + BN.
    Stack {
        conv1: Conv2d,
        bn1: BatchNorm,
        conv2: Conv2d,
        bn2: BatchNorm,
    },
    /// Ablation: a single 1x1 projection with bias.
    Projection(Conv2d),
}

impl NeighborhoodAdjust {
    pub fn new(pb: &mut ParamBuilder<'_>, input: usize, output: usize, enabled: bool) -> Self {
        if enabled {
            NeighborhoodAdjust::Stack {
                conv1: Conv2d::new(&mut pb.sub("conv1"), input, input, 3, 1, 1, false),
                bn1: BatchNorm::new(&mut pb.sub("bn1"), input),
                conv2: Conv2d::new(&mut pb.sub("conv2"), input, output, 3, 1, 1, false),
                bn2: BatchNorm::new(&mut pb.sub("bn2"), output),
            }
        } else {
            NeighborhoodAdjust::Projection(Conv2d::new(&mut pb.sub("proj"), input, output, 1, 1, 0, true))
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, seq: TokenSequence<'t>) -> Result<Var<'t>> {
        let x = tokens_to_map(seq)?;
        Ok(match self {
            NeighborhoodAdjust::Stack {
                conv1,
                bn1,
                conv2,
                bn2,
            } => {
                let y = bn1.forward(ctx, conv1.forward(ctx, x)).relu();
                bn2.forward(ctx, conv2.forward(ctx, y))
            }
            NeighborhoodAdjust::Projection(conv) => conv.forward(ctx, x),
        })
    }
}

/// Output of one calibration stage.
#[derive(Debug, Clone)]
pub struct TfcOutput<'t> {
    /// `(B, C, h, w)`, the aggregate handed to the next level.
    pub feature: FeatureMap<'t>,
    /// `(B, C_p)`.
    pub cls: Var<'t>,
    /// Attention weights of each layer, `(B, heads, N + 1, N + 1)`.
    pub attention: Vec<Var<'t>>,
}

/// Geometry of one calibration stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    /// Channels of each input map (`C`).
    pub channels: usize,
    /// Number of maps concatenated into a token (1 or 2).
    pub inputs: usize,
    pub height: usize,
    pub width: usize,
}

impl StageShape {
    pub fn token_width(&self) -> usize {
        self.channels * self.inputs
    }

    pub fn seq_len(&self) -> usize {
        self.height * self.width + 1
    }
}

/// One level's calibration: embeddings, `depth` encoder layers and NeA.
#[derive(Debug, Clone)]
pub struct TfcStage {
    cls: String,
    pos: String,
    pub layers: Vec<TransformerLayer>,
    pub nea: NeighborhoodAdjust,
    pub shape: StageShape,
}

impl TfcStage {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        cfg: &TfcConfig,
        shape: StageShape,
        depth: usize,
        use_nea: bool,
    ) -> Self {
        let cp = shape.token_width();
        let init = Init::TruncNormal(EMBED_INIT_STD);
        let cls = pb.param("cls_token", &[cp], init);
        let pos = pb.param("pos_embed", &[shape.seq_len(), cp], init);
        let layers = (0..depth)
            .map(|i| {
                TransformerLayer::new(&mut pb.sub(&format!("layer{i}")), cp, cfg.heads, cp * cfg.ffn_ratio)
            })
            .collect();
        let nea = NeighborhoodAdjust::new(&mut pb.sub("nea"), cp, shape.channels, use_nea);
        Self {
            cls,
            pos,
            layers,
            nea,
            shape,
        }
    }

    pub fn cls_name(&self) -> &str {
        &self.cls
    }

    pub fn pos_name(&self) -> &str {
        &self.pos
    }

    pub fn tokenize<'t>(
        &self,
        ctx: &Ctx<'t>,
        current: FeatureMap<'t>,
        previous: Option<FeatureMap<'t>>,
    ) -> Result<TokenSequence<'t>> {
        let expected_inputs = if previous.is_some() { 2 } else { 1 };
        if expected_inputs != self.shape.inputs {
            return Err(HatError::Aggregation(format!(
                "stage at level {} expects {} input maps, got {expected_inputs}",
                current.level, self.shape.inputs
            )));
        }
        tokenize(current, previous, ctx.param(&self.cls), ctx.param(&self.pos))
    }

    /// Runs the encoder layers, returning the final sequence and the
    /// attention weights of every layer.
    pub fn encode<'t>(
        &self,
        ctx: &Ctx<'t>,
        seq: TokenSequence<'t>,
    ) -> (TokenSequence<'t>, Vec<Var<'t>>) {
        let mut x = seq.tokens;
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, w) = layer.forward(ctx, x);
            x = y;
            weights.push(w);
        }
        (TokenSequence { tokens: x, ..seq }, weights)
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        current: FeatureMap<'t>,
        previous: Option<FeatureMap<'t>>,
    ) -> Result<TfcOutput<'t>> {
        let seq = self.tokenize(ctx, current, previous)?;
        let (seq, attention) = self.encode(ctx, seq);
        let feature = self.nea.forward(ctx, seq)?;
        Ok(TfcOutput {
            feature: FeatureMap::new(feature, current.level),
            cls: seq.cls(),
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamGroup, ParamStore};
    use autograd::{Tape, Tensor};
    use ndarray::{arr2, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn attention_examples() {
        let tape = Tape::new();
        let c = |a: Tensor| tape.constant(a);
        let one = attention(
            c(arr2(&[[2.0]]).into_dyn()),
            c(arr2(&[[2.0]]).into_dyn()),
            c(arr2(&[[5.0]]).into_dyn()),
        );
        assert_eq!(one.value()[[0, 0]], 5.0);

        let out = attention(
            c(arr2(&[[1.0], [0.0]]).into_dyn()),
            c(arr2(&[[1.0], [0.0]]).into_dyn()),
            c(arr2(&[[1.0], [2.0]]).into_dyn()),
        );
        let e = std::f64::consts::E;
        let first = (e * 1.0 + 1.0 * 2.0) / (e + 1.0);
        assert!((out.value()[[0, 0]] - first).abs() < 1e-12);
        assert!((first - 1.2689).abs() < 1e-4);
        assert!((out.value()[[1, 0]] - 1.5).abs() < 1e-12);

        let v = random(&[4, 3], 2);
        let out = attention(c(random(&[4, 3], 1)), c(ArrayD::ones(IxDyn(&[4, 3]))), c(v.clone()));
        let mean = v.mean_axis(Axis(0)).unwrap();
        for row in out.value().outer_iter() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn stage(depth: usize, use_nea: bool, heads: usize) -> (ParamStore, TfcStage) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = TfcConfig { heads, ffn_ratio: 4 };
        let shape = StageShape {
            channels: 4,
            inputs: 2,
            height: 4,
            width: 2,
        };
        let st = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Tfc);
            TfcStage::new(&mut pb.sub("tfc"), &cfg, shape, depth, use_nea)
        };
        (store, st)
    }

    #[test]
    fn tokenize_shapes_and_roundtrip() {
        let (mut store, st) = stage(0, true, 2);
        store.set(st.cls_name(), ArrayD::zeros(IxDyn(&[8])));
        store.set(st.pos_name(), ArrayD::zeros(IxDyn(&[9, 8])));
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let cur = random(&[2, 4, 4, 2], 1);
        let prev = random(&[2, 4, 4, 2], 2);
        let seq = st
            .tokenize(
                &ctx,
                FeatureMap::new(tape.constant(cur.clone()), 1),
                Some(FeatureMap::new(tape.constant(prev.clone()), 1)),
            )
            .unwrap();
        assert_eq!(seq.tokens.shape(), vec![2, 9, 8]);
        assert!(seq.cls().value().iter().all(|&v| v == 0.0));
        let back = tokens_to_map(seq).unwrap().value();
        let cat = ndarray::concatenate(Axis(1), &[cur.view(), prev.view()]).unwrap();
        assert_eq!(*back, cat);
        // token 1 + row-major index corresponds to (y, x)
        let t = seq.tokens.value();
        assert_eq!(t[[1, 1 + 3 * 2 + 1, 5]], prev[[1, 1, 3, 1]]);
    }

    #[test]
    fn zero_inputs_and_embeddings_give_zero_sequence() {
        let tape = Tape::new();
        let z = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 2, 2])));
        let seq = tokenize(
            FeatureMap::new(z, 1),
            Some(FeatureMap::new(z, 1)),
            tape.constant(ArrayD::zeros(IxDyn(&[6]))),
            tape.constant(ArrayD::zeros(IxDyn(&[5, 6]))),
        )
        .unwrap();
        assert!(seq.tokens.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_previous_is_aggregation_error() {
        let (store, st) = stage(1, true, 2);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let a = FeatureMap::new(tape.constant(ArrayD::zeros(IxDyn(&[1, 4, 4, 2]))), 2);
        let b = FeatureMap::new(tape.constant(ArrayD::zeros(IxDyn(&[1, 4, 2, 2]))), 1);
        assert!(matches!(st.forward(&ctx, a, Some(b)), Err(HatError::Aggregation(_))));
    }

    #[test]
    fn zero_projections_reduce_blocks_to_layer_norm() {
        let (mut store, st) = stage(1, true, 2);
        let layer = &st.layers[0];
        let zero_linear = |store: &mut ParamStore, l: &Linear| {
            let s = store.value(l.weight_name()).shape().to_vec();
            store.set(l.weight_name(), ArrayD::zeros(IxDyn(&s)));
            let b = l.bias_name().unwrap();
            let s = store.value(b).shape().to_vec();
            store.set(b, ArrayD::zeros(IxDyn(&s)));
        };
        zero_linear(&mut store, &layer.msa.attn.out);
        zero_linear(&mut store, &layer.ffn.fc2);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let x = tape.constant(random(&[2, 9, 8], 3).mapv(|v| 3.0 * v + 1.0));
        let (y, w) = layer.msa.forward(&ctx, x);
        let ln = x.normalize_last(crate::nn::LN_EPS);
        assert_eq!(*y.value(), *ln.value());
        // pre-affine layer norm statistics
        for row in y.value().lanes(Axis(2)) {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        for row in w.value().lanes(Axis(3)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let z = layer.ffn.forward(&ctx, x);
        assert_eq!(*z.value(), *ln.value());
    }

    #[test]
    fn gelu_asymptotics() {
        assert_eq!(autograd::gelu(0.0), 0.0);
        assert!((autograd::gelu(12.0) - 12.0).abs() < 1e-12);
        assert!(autograd::gelu(-12.0).abs() < 1e-12);
    }

    #[test]
    fn depth_zero_is_identity_on_tokens() {
        let (store, st) = stage(0, true, 2);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let x = tape.constant(random(&[2, 9, 8], 3));
        let seq = TokenSequence {
            tokens: x,
            height: 4,
            width: 2,
        };
        let (out, w) = st.encode(&ctx, seq);
        assert!(w.is_empty());
        assert_eq!(out.tokens.id(), x.id());
    }

    #[test]
    fn forward_shapes_with_and_without_nea() {
        for nea in [true, false] {
            let (store, st) = stage(2, nea, 4);
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &store);
            let cur = FeatureMap::new(tape.constant(random(&[3, 4, 4, 2], 5)), 2);
            let prev = FeatureMap::new(tape.constant(random(&[3, 4, 4, 2], 6)), 1);
            let out = st.forward(&ctx, cur, Some(prev)).unwrap();
            assert_eq!(out.feature.shape(), vec![3, 4, 4, 2]);
            assert_eq!(out.cls.shape(), vec![3, 8]);
            assert_eq!(out.attention.len(), 2);
            assert_eq!(out.attention[0].shape(), vec![3, 4, 9, 9]);
        }
    }

    #[test]
    fn identity_kernel_reproduces_delta() {
        let tape = Tape::new();
        let mut x = ArrayD::zeros(IxDyn(&[1, 1, 5, 5]));
        x[[0, 0, 2, 3]] = 1.0;
        let mut k = ArrayD::zeros(IxDyn(&[1, 1, 3, 3]));
        k[[0, 0, 1, 1]] = 1.0;
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(k), autograd::Conv2dGeometry::new(1, 1));
        assert_eq!(*y.value(), x);
    }
}
