//! Oracles, fixtures and criterion checks shared by the integration tests
//! and the acceptance runner.
#![allow(dead_code)]

use std::cell::RefCell;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use autograd::{check_gradients, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use hat::backbone::{Backbone, BackboneConfig, Bottleneck, FeatureMap, ImageBatch};
use hat::config::RunConfig;
use hat::dsa::{dsa_aggregate, Bootstrap, DsaConfig, LevelCalibrator};
use hat::losses::{id_loss, triplet_loss};
use hat::metrics::evaluate;
use hat::model::{FeatureMode, HatModel};
use hat::nn::Ctx;
use hat::params::{ParamBuilder, ParamGroup, ParamKind, ParamStore};
use hat::tfc::{multi_head_attention, StageShape, TfcConfig, TfcOutput, TfcStage};
use hat::training::schedule::{lr_at, ScheduleConfig};
use hat::training::sweep::{format_table, plan_sweep, run_sweep};
use hat::training::{evaluate_split, train, EvalReport, TrainOptions, EVAL_REPORT, TRAIN_LOG};
use hat::HatError;
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

/// Projects `y` onto a fixed random direction so every element matters.
pub fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Var<'t> {
    y.mul(tape.constant(random(&y.shape(), seed))).sum_all()
}

// ---------------------------------------------------------------- configs

/// A few-second run: 4 identities at 64x32 with a narrow backbone.
pub fn tiny_config(epochs: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_overrides(&[
        "data.source=synth://4/4/0",
        "data.image_height=64",
        "data.image_width=32",
        "data.sampler.p_ids=4",
        "data.sampler.l=2",
        "backbone.stage_channels=8,16,32,64",
        "backbone.common_channels=16",
        "tfc.heads=2",
        "schedule.warmup_epochs=1",
        "schedule.decay_every=1",
        "train.checkpoint_every=0",
    ])
    .unwrap();
    c.schedule.total_epochs = epochs;
    c.schedule.decay_start_epoch = epochs.max(2);
    c
}

/// The desk-scale overfit configuration.
pub fn desk_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_overrides(&[
        "data.source=synth://16/8/0",
        "data.image_height=64",
        "data.image_width=32",
        "data.sampler.p_ids=8",
        "data.sampler.l=4",
        "data.augment.pad=4",
        "backbone.stage_channels=16,32,64,128",
        "backbone.common_channels=32",
        "tfc.heads=4",
        "dsa.depths=3,3,6,0",
        "schedule.total_epochs=60",
        "schedule.warmup_epochs=5",
        "schedule.base_lr=1e-3",
        "schedule.warmup_start_lr=1e-5",
        "schedule.decay_start_epoch=40",
        "schedule.decay_every=10",
        "train.checkpoint_every=0",
    ])
    .unwrap();
    c
}

// ---------------------------------------------------------------- attention

/// Multi-head attention evaluated element by element from the definition:
/// per head, `softmax(q k^T / sqrt(d)) v` on that head's channel slice.
pub fn brute_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let (b, t, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dh = c / heads;
    let mut out = ArrayD::zeros(IxDyn(&[b, t, c]));
    for bi in 0..b {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let mut s = 0.0;
                        for x in 0..dh {
                            s += q[[bi, i, off + x]] * k[[bi, j, off + x]];
                        }
                        s / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for x in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += e[j] / z * v[[bi, j, off + x]];
                    }
                    out[[bi, i, off + x]] = acc;
                }
            }
        }
    }
    out
}

/// Largest deviation between the implementation and the oracle over
/// `cases` random shapes with `n <= 9`, width `<= 32`, heads in {1, 2, 4}.
pub fn attention_oracle_gap(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let c = heads * rng.random_range(1..=32 / heads);
        let n = rng.random_range(1..=9);
        let b = rng.random_range(1..=2);
        let s = seed.wrapping_mul(1000) + 3 * case as u64;
        let (q, k, v) = (random(&[b, n, c], s), random(&[b, n, c], s + 1), random(&[b, n, c], s + 2));
        let tape = Tape::new();
        let (out, _) = multi_head_attention(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), heads);
        let oracle = brute_attention(&q, &k, &v, heads);
        let gap = (&*out.value() - &oracle).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        worst = worst.max(gap);
    }
    worst
}

// ---------------------------------------------------------------- gradients

pub fn trainable_names(store: &ParamStore, prefix: &str) -> Vec<String> {
    store
        .iter()
        .filter(|(k, e)| k.starts_with(prefix) && matches!(e.kind, ParamKind::Trainable(_)))
        .map(|(k, _)| k.clone())
        .collect()
}

/// Finite-difference check of `f` with respect to the named parameters
/// followed by `inputs`.
pub fn check_with_params<F>(store: &ParamStore, train: bool, names: &[String], inputs: &[Tensor], f: F) -> GradCheckReport
where
    F: for<'t> Fn(&Ctx<'t>, &[Var<'t>]) -> Var<'t>,
{
    let mut all: Vec<Tensor> = names.iter().map(|n| store.value(n).as_ref().clone()).collect();
    all.extend(inputs.iter().cloned());
    // the checker's closure must accept any tape lifetime, which a borrowed
    // store cannot satisfy; these stores are tiny and short-lived
    let store: &'static ParamStore = Box::leak(Box::new(store.clone()));
    check_gradients(
        |tape, vars| {
            let ctx = Ctx::new(tape, store, train, false);
            for (n, v) in names.iter().zip(vars) {
                ctx.bind(n, *v);
            }
            f(&ctx, &vars[names.len()..])
        },
        &all,
        GradCheckOptions::default(),
    )
}

fn build<T>(seed: u64, group: ParamGroup, make: impl FnOnce(&mut ParamBuilder<'_>) -> T) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng, group);
    let module = make(&mut pb.sub("m"));
    (module, store)
}

/// One calibration stage (two heads, NeA on) on 2x2 maps of 4 channels,
/// differentiated through both inputs and every parameter.
pub fn grad_tfc_forward() -> GradCheckReport {
    let shape = StageShape {
        channels: 4,
        inputs: 2,
        height: 2,
        width: 2,
    };
    let cfg = TfcConfig { heads: 2, ffn_ratio: 2 };
    let (stage, mut store) = build(11, ParamGroup::Tfc, |pb| TfcStage::new(pb, &cfg, shape, 1, true));
    let names = trainable_names(&store, "m.");
    // initial embeddings and projections are near zero, which leaves the
    // key/query gradients at finite-difference noise level
    for (i, n) in names.iter().enumerate() {
        let shape = store.value(n).shape().to_vec();
        store.set(n, random(&shape, 100 + i as u64).mapv(|x| 0.7 * x));
    }
    let inputs = [random(&[2, 4, 2, 2], 12), random(&[2, 4, 2, 2], 13)];
    check_with_params(&store, true, &names, &inputs, |ctx, v| {
        let out = stage
            .forward(ctx, FeatureMap::new(v[0], 2), Some(FeatureMap::new(v[1], 2)))
            .unwrap();
        project(ctx.tape(), out.feature.data, 1).add(project(ctx.tape(), out.cls, 2))
    })
}

pub fn grad_id_loss() -> GradCheckReport {
    check_gradients(
        |_, v| id_loss(v[0], &[0, 1, 2, 3, 4, 0], 0.1).unwrap(),
        &[random(&[6, 5], 21).mapv(|x| 3.0 * x)],
        GradCheckOptions::default(),
    )
}

pub fn grad_triplet_loss() -> GradCheckReport {
    check_gradients(
        |_, v| triplet_loss(v[0], &[0, 0, 1, 1, 2, 2, 3, 3], 0.3).unwrap(),
        &[random(&[8, 4], 22)],
        GradCheckOptions::default(),
    )
}

/// The four-stage backbone with eval-mode normalization on a 3x16x16 input.
pub fn grad_tiny_backbone() -> GradCheckReport {
    let cfg = BackboneConfig {
        stage_channels: vec![4, 4, 6, 6],
        ..Default::default()
    };
    let (backbone, store) = build(31, ParamGroup::Base, |pb| Backbone::new(pb, &cfg, 16, 16));
    let names = trainable_names(&store, "m.");
    check_with_params(&store, false, &names, &[random(&[1, 3, 16, 16], 32)], |ctx, v| {
        let maps = backbone.extract_from(ctx, v[0]);
        maps.iter()
            .enumerate()
            .map(|(i, m)| project(ctx.tape(), m.data, 40 + i as u64))
            .reduce(|a, b| a.add(b))
            .unwrap()
    })
}

/// A channel-changing bottleneck in training mode.
pub fn grad_bottleneck() -> GradCheckReport {
    let (b, store) = build(41, ParamGroup::Base, |pb| Bottleneck::new(pb, 4, 6, 1));
    let names = trainable_names(&store, "m.");
    check_with_params(&store, true, &names, &[random(&[2, 4, 3, 3], 42)], |ctx, v| {
        let y = b.forward(ctx, FeatureMap::new(v[0], 1)).unwrap();
        project(ctx.tape(), y.data, 3)
    })
}

pub fn gradient_suite() -> Vec<(&'static str, GradCheckReport)> {
    vec![
        ("tfc_forward", grad_tfc_forward()),
        ("id_loss", grad_id_loss()),
        ("triplet_loss", grad_triplet_loss()),
        ("tiny_backbone", grad_tiny_backbone()),
        ("bottleneck", grad_bottleneck()),
    ]
}

// ---------------------------------------------------------------- aggregation

/// Records every call and answers with a constant map tagged `100 + level`.
#[derive(Default)]
pub struct RecordingCalibrator {
    /// `(level, tag of current, tag of previous)`.
    pub calls: RefCell<Vec<(usize, f64, Option<f64>)>>,
}

fn tag(f: &FeatureMap<'_>) -> f64 {
    let v = f.data.value();
    let first = v.iter().next().copied().unwrap();
    assert!(v.iter().all(|&x| x == first), "maps are constant by construction");
    first
}

impl LevelCalibrator for RecordingCalibrator {
    fn calibrate<'t>(
        &self,
        ctx: &Ctx<'t>,
        level: usize,
        current: FeatureMap<'t>,
        previous: Option<FeatureMap<'t>>,
    ) -> hat::Result<TfcOutput<'t>> {
        self.calls.borrow_mut().push((level, tag(&current), previous.as_ref().map(tag)));
        let shape = current.shape();
        let out = ctx.constant(ArrayD::from_elem(IxDyn(&shape), 100.0 + level as f64));
        Ok(TfcOutput {
            feature: FeatureMap::new(out, level),
            cls: ctx.constant(ArrayD::from_elem(IxDyn(&[shape[0], shape[1]]), level as f64)),
            attention: Vec::new(),
        })
    }
}

/// Calls the recursion must make: each active level sees its own map and
/// the previous level's output; the first sees itself or nothing.
pub fn expected_calls(depths: &[usize], bootstrap: Bootstrap) -> Vec<(usize, f64, Option<f64>)> {
    let mut calls = Vec::new();
    let mut prev: Option<usize> = None;
    for (i, &d) in depths.iter().enumerate() {
        if d == 0 {
            continue;
        }
        let level = i + 1;
        let previous = match prev {
            Some(p) => Some(100.0 + p as f64),
            None if bootstrap == Bootstrap::SelfPair => Some(level as f64),
            None => None,
        };
        calls.push((level, level as f64, previous));
        prev = Some(level);
    }
    calls
}

/// Runs the recursion with the recorder; aligned maps are tagged by level.
pub fn record_calls(depths: &[usize], bootstrap: Bootstrap) -> (Vec<(usize, f64, Option<f64>)>, Vec<usize>, f64) {
    let cfg = DsaConfig {
        depths: depths.to_vec(),
        bootstrap,
        ..Default::default()
    };
    let tape = Tape::new();
    let store = ParamStore::new();
    let ctx = Ctx::eval(&tape, &store);
    let aligned: Vec<FeatureMap<'_>> = (1..=4)
        .map(|l| FeatureMap::new(tape.constant(ArrayD::from_elem(IxDyn(&[1, 2, 2, 1]), l as f64)), l))
        .collect();
    let rec = RecordingCalibrator::default();
    let trace = dsa_aggregate(&ctx, &aligned, &cfg, &rec).unwrap();
    let levels = trace.levels.iter().map(|(l, _)| *l).collect();
    let final_cls = trace.final_cls().value()[[0, 0]];
    let calls = rec.calls.into_inner();
    (calls, levels, final_cls)
}

/// Trainable values attached to `level` (alignment, calibration, aux head).
pub fn level_param_count(store: &ParamStore, level: usize) -> usize {
    ["align", "dsa", "heads.aux"]
        .iter()
        .map(|p| store.trainable_count(&format!("{p}.level{level}.")))
        .sum()
}

pub fn small_model(depths: &[usize]) -> (HatModel, ParamStore) {
    let mut c = tiny_config(1);
    c.dsa.depths = depths.to_vec();
    HatModel::build(c.model_spec(4), 0).unwrap()
}

// ---------------------------------------------------------------- losses

/// Batch-hard loss by enumerating every (anchor, positive, negative) triple.
pub fn exhaustive_triplet(dist: &Array2<f64>, labels: &[usize], margin: f64) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst: Option<f64> = None;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                let v = dist[[a, p]] - dist[[a, q]];
                worst = Some(worst.map_or(v, |w: f64| w.max(v)));
            }
        }
        total += (worst.expect("positive and negative exist") + margin).max(0.0);
    }
    total / n as f64
}

/// Random PK labels with `p` identities of `k` samples, shuffled.
pub fn pk_labels(p: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..p).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    labels.shuffle(rng);
    labels
}

/// Compares the implementation with the exhaustive oracle on `cases`
/// random batches of size at most 32; returns the number of mismatches.
pub fn triplet_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for case in 0..cases {
        let p = rng.random_range(2..=8);
        let k = rng.random_range(2..=32 / p);
        let labels = pk_labels(p, k, &mut rng);
        let d = rng.random_range(1..=8);
        let emb = random(&[labels.len(), d], seed * 7919 + case as u64);
        let tape = Tape::new();
        let got = triplet_loss(tape.constant(emb.clone()), &labels, 0.3).unwrap().item();
        let dist = autograd::pairwise_euclidean_plain(&emb.into_dimensionality().unwrap());
        if got != exhaustive_triplet(&dist, &labels, 0.3) {
            bad += 1;
        }
    }
    bad
}

// ---------------------------------------------------------------- metrics

/// AP and first-hit rank of one query from the definitions: rank the
/// gallery, drop junk and same-camera true matches, then average the
/// precision at every true match.
pub fn brute_metrics(dist: &[f64], query: (i64, usize), gallery: &[(i64, usize)]) -> Option<(f64, usize)> {
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(a.cmp(&b)));
    let kept: Vec<bool> = order
        .iter()
        .map(|&g| gallery[g])
        .filter(|&(id, cam)| id != -1 && !(id == query.0 && cam == query.1))
        .map(|(id, _)| id == query.0)
        .collect();
    let total = kept.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut precisions = Vec::new();
    for r in 1..=kept.len() {
        if kept[r - 1] {
            let hits = kept[..r].iter().filter(|&&x| x).count();
            precisions.push(hits as f64 / r as f64);
        }
    }
    let first = kept.iter().position(|&r| r).unwrap() + 1;
    Some((precisions.iter().sum::<f64>() / total as f64, first))
}

/// Gallery entry for each of four roles relative to query `(1, cam 0)`:
/// valid match, same-camera match, junk, other identity.
pub fn role_entry(role: usize, j: usize) -> (i64, usize) {
    match role {
        0 => (1, 1 + j % 3),
        1 => (1, 0),
        2 => (-1, j % 2),
        _ => (2, j % 3),
    }
}

/// Every role pattern for galleries of 1..=`max` entries under a shuffled
/// ranking; returns `(patterns checked, mismatches)`.
pub fn metrics_exhaustive(max: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut bad) = (0, 0);
    for g in 1..=max {
        let mut ranks: Vec<usize> = (0..g).collect();
        ranks.shuffle(&mut rng);
        let dist: Vec<f64> = ranks.iter().map(|&r| r as f64 * 0.5 + 0.25).collect();
        let dm = Array2::from_shape_vec((1, g), dist.clone()).unwrap();
        for code in 0..4usize.pow(g as u32) {
            let gallery: Vec<(i64, usize)> = (0..g).map(|j| role_entry(code / 4usize.pow(j as u32) % 4, j)).collect();
            let want = brute_metrics(&dist, (1, 0), &gallery);
            let got = evaluate(&dm, &[(1, 0)], &gallery, g);
            let ok = match (want, got) {
                (None, Err(HatError::EmptyEvaluation)) => true,
                (Some((ap, first)), Ok(r)) => {
                    (r.map - ap).abs() < 1e-12
                        && r.cmc.iter().enumerate().all(|(i, &c)| c == if i + 1 >= first { 1.0 } else { 0.0 })
                }
                _ => false,
            };
            checked += 1;
            bad += usize::from(!ok);
        }
    }
    (checked, bad)
}

// ---------------------------------------------------------------- schedule

/// Default-schedule rates as exact decimal strings: warmup from 4e-6 rises
/// by 44e-6 per epoch to 4e-4, decay multiplies by 4/10 at 50, 70, ...,
/// and the calibration group runs at half rate.
pub fn schedule_oracle(epoch: usize) -> (f64, f64) {
    let (mantissa, exp): (u128, i32) = if epoch <= 10 {
        (4 + 44 * (epoch as u128 - 1), -6)
    } else if epoch < 50 {
        (4, -4)
    } else {
        let k = 1 + (epoch as u32 - 50) / 20;
        (4 * 4u128.pow(k), -4 - k as i32)
    };
    let base: f64 = format!("{mantissa}e{exp}").parse().unwrap();
    let tfc: f64 = format!("{}e{}", mantissa * 5, exp - 1).parse().unwrap();
    (base, tfc)
}

pub fn schedule_mismatches() -> Vec<usize> {
    let cfg = ScheduleConfig::default();
    (1..=150)
        .filter(|&e| {
            let r = lr_at(e, &cfg).unwrap();
            (r.base, r.tfc) != schedule_oracle(e)
        })
        .collect()
}

// ---------------------------------------------------------------- training

pub fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Per-criterion verdict for the acceptance runner.
pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.2}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

pub fn criterion_attention() -> Verdict {
    let start = Instant::now();
    let gap = attention_oracle_gap(200, 1);
    let (fast, time) = within(Duration::from_secs(10), start);
    Verdict::new(gap < 1e-5 && fast, format!("200 cases, max |diff| {gap:.2e}, {time}"))
}

pub fn criterion_gradients() -> Verdict {
    let start = Instant::now();
    let suite = gradient_suite();
    let (fast, time) = within(Duration::from_secs(60), start);
    let failing: Vec<&str> = suite.iter().filter(|(_, r)| !r.passes(1e-4) || r.checked == 0).map(|(n, _)| *n).collect();
    let worst = suite.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    Verdict::new(
        failing.is_empty() && fast,
        format!("{} checks, worst relative error {worst:.2e}, failing {failing:?}, {time}", suite.len()),
    )
}

pub const DSA_CONFIGS: [[usize; 4]; 4] = [[12, 0, 0, 0], [0, 0, 12, 0], [3, 3, 6, 0], [0, 4, 4, 4]];

pub fn criterion_dsa() -> Verdict {
    let mut problems = Vec::new();
    for depths in DSA_CONFIGS {
        for boot in [Bootstrap::SelfPair, Bootstrap::Single] {
            let (calls, _, _) = record_calls(&depths, boot);
            if calls != expected_calls(&depths, boot) {
                problems.push(format!("{depths:?}/{boot:?}: calls {calls:?}"));
            }
        }
        let (_, store) = small_model(&depths);
        for (i, &d) in depths.iter().enumerate() {
            let n = level_param_count(&store, i + 1);
            if (d == 0) != (n == 0) {
                problems.push(format!("{depths:?}: level {} has {n} parameters", i + 1));
            }
        }
    }
    Verdict::new(problems.is_empty(), format!("4 configs x 2 bootstraps; problems {problems:?}"))
}

pub fn criterion_losses() -> Verdict {
    let tape = Tape::new();
    let uniform_ok = (2..=6).all(|n| {
        let l = id_loss(tape.constant(ArrayD::zeros(IxDyn(&[3, n]))), &[0, 1, n - 1], 0.1).unwrap();
        l.item() == (n as f64).ln()
    });
    let logits = ndarray::arr2(&[[0.9f64.ln(), 0.1f64.ln()]]).into_dyn();
    let two = id_loss(tape.constant(logits), &[0], 0.1).unwrap().item();
    let bad = triplet_mismatches(500, 2);
    Verdict::new(
        uniform_ok && (two - 0.21522).abs() < 1e-4 && bad == 0,
        format!("uniform ln N exact: {uniform_ok}; two-class {two:.5}; triplet mismatches {bad}/500"),
    )
}

pub fn criterion_metrics() -> Verdict {
    let (checked, bad) = metrics_exhaustive(8, 3);
    let ap = hat::metrics::average_precision(&[true, false, true]).unwrap();
    let ap_ok = (ap - 5.0 / 6.0).abs() < 1e-6 && format!("{ap:.4}") == "0.8333";
    Verdict::new(
        bad == 0 && ap_ok,
        format!("{checked} relevance patterns, {bad} mismatches; AP[1,0,1] = {ap:.6}"),
    )
}

pub fn criterion_schedule() -> Verdict {
    let cfg = ScheduleConfig::default();
    let at = |e| lr_at(e, &cfg).unwrap();
    let anchors = (at(10).base, at(10).tfc, at(50).base, at(70).base) == (4e-4, 2e-4, 1.6e-4, 6.4e-5);
    let bad = schedule_mismatches();
    Verdict::new(
        anchors && bad.is_empty(),
        format!("150 epochs, mismatching epochs {bad:?}; anchors exact: {anchors}"),
    )
}

/// Sequence lengths seen by the attention layers of a real forward pass.
pub fn attention_lengths(cfg: &RunConfig) -> Vec<usize> {
    let (model, store) = HatModel::build(cfg.model_spec(4), 0).unwrap();
    let (h, w) = (cfg.data.image_height, cfg.data.image_width);
    let images = ImageBatch::new(Array4::zeros((1, 3, h, w)).into_dyn()).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &store);
    let out = model.forward(&ctx, &images).unwrap();
    out.trace
        .levels
        .iter()
        .flat_map(|(_, o)| o.attention.iter().map(|a| a.shape()[2]))
        .collect()
}

pub fn criterion_shapes() -> Verdict {
    let full = RunConfig::default();
    let desk = desk_config();
    let full_lens = attention_lengths(&full);
    let desk_lens = attention_lengths(&desk);
    let declared = |c: &RunConfig| {
        let (ah, aw) = c.backbone.aligned_size(c.data.image_height, c.data.image_width);
        c.dsa.stage_shapes(c.backbone.common_channels, ah, aw).iter().map(|s| s.2.seq_len()).collect::<Vec<_>>()
    };
    let ok = !full_lens.is_empty()
        && full_lens.iter().all(|&n| n == 129)
        && desk_lens.iter().all(|&n| n == 9)
        && declared(&full).iter().all(|&n| n == 129)
        && declared(&desk).iter().all(|&n| n == 9);
    Verdict::new(
        ok,
        format!("256x128: {} layers at length {:?}; 64x32: length {:?}", full_lens.len(), full_lens.first(), desk_lens.first()),
    )
}

pub fn criterion_overfit(dir: &Path) -> Verdict {
    let start = Instant::now();
    let cfg = desk_config();
    let out = match train(&cfg, dir, &TrainOptions::default()) {
        Ok(o) => o,
        Err(e) => return Verdict::new(false, format!("training failed: {e}")),
    };
    let (splits, _) = cfg.data.open().unwrap();
    let tr = evaluate_split(&out.model, &out.params, &splits.train, &splits.train, &cfg, FeatureMode::Concat).unwrap();
    let held = out.eval.clone().expect("held-out split is evaluated");
    let (fast, time) = within(Duration::from_secs(600), start);
    Verdict::new(
        tr.rank(1) == 1.0 && held.map >= 0.95 && out.last_epoch <= 60 && fast,
        format!(
            "{} epochs, train Rank-1 {:.4}, held-out mAP {:.4} (Rank-1 {:.4}), {time}",
            out.last_epoch,
            tr.rank(1),
            held.map,
            held.rank(1)
        ),
    )
}

/// Checks one sweep's rows, per-arm reports and table.
fn sweep_integrity(axis: &str, values: &[&str], dir: &Path) -> Result<usize, String> {
    let base = tiny_config(2);
    let arms = plan_sweep(&base, axis, values).map_err(|e| e.to_string())?;
    let rows = run_sweep(axis, &arms, &dir.join(axis), 1).map_err(|e| e.to_string())?;
    if rows.len() != values.len() {
        return Err(format!("{axis}: {} rows for {} values", rows.len(), values.len()));
    }
    for ((row, arm), v) in rows.iter().zip(&arms).zip(values) {
        let report: EvalReport = serde_json::from_str(&read(&row.output_dir.join(EVAL_REPORT))).map_err(|e| e.to_string())?;
        let cmc_ok = report.cmc.windows(2).all(|w| w[0] <= w[1]) && report.cmc.iter().all(|c| (0.0..=1.0).contains(c));
        let ok = row.value == *v
            && row.config_hash == arm.config.hash()
            && report.config_hash == row.config_hash
            && row.map == Some(report.map)
            && (0.0..=1.0).contains(&report.map)
            && cmc_ok
            && row.final_loss.is_finite()
            && row.epochs == 2;
        if !ok {
            return Err(format!("{axis}={v}: inconsistent row {row:?}"));
        }
    }
    let table = format_table(&rows);
    if table.lines().count() != rows.len() + 2 || !table.starts_with(axis) {
        return Err(format!("{axis}: malformed table\n{table}"));
    }
    Ok(rows.len())
}

pub const ABLATIONS: [(&str, &[&str]); 5] = [
    ("dsa.use_mfe_supervision", &["true", "false"]),
    ("dsa.use_aux_loss", &["true", "false"]),
    ("dsa.use_nea", &["true", "false"]),
    ("backbone.scaling_divisor", &["8", "16", "32"]),
    ("loss.lambda", &["0", "0.1", "0.3", "0.5", "0.8", "1.0"]),
];

pub fn criterion_ablations(dir: &Path) -> Verdict {
    let mut arms = 0;
    let mut problems = Vec::new();
    for (axis, values) in ABLATIONS {
        match sweep_integrity(axis, values, dir) {
            Ok(n) => arms += n,
            Err(e) => problems.push(e),
        }
    }
    Verdict::new(problems.is_empty(), format!("{arms} arms over {} sweeps; problems {problems:?}", ABLATIONS.len()))
}

pub fn params_equal(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|((ka, ea), (kb, eb))| ka == kb && ea.value == eb.value)
}

pub fn criterion_reproducibility(dir: &Path) -> Verdict {
    let cfg = tiny_config(3);
    let run = |name: &str, opts: TrainOptions| train(&cfg, &dir.join(name), &opts).unwrap();
    let a = run("a", TrainOptions::default());
    let b = run("b", TrainOptions::default());
    let same_logs = read(&dir.join("a").join(TRAIN_LOG)) == read(&dir.join("b").join(TRAIN_LOG));
    run(
        "c",
        TrainOptions {
            stop_after_epoch: Some(1),
            ..Default::default()
        },
    );
    let c = run(
        "c",
        TrainOptions {
            resume: Some(dir.join("c").join(hat::training::LAST_CHECKPOINT)),
            ..Default::default()
        },
    );
    let resumed_logs = read(&dir.join("a").join(TRAIN_LOG)) == read(&dir.join("c").join(TRAIN_LOG));
    let resumed_params = params_equal(&a.params, &c.params);
    let same_eval = a.eval == b.eval && a.eval == c.eval;
    Verdict::new(
        same_logs && resumed_logs && resumed_params && same_eval,
        format!(
            "identical logs {same_logs}; resumed logs {resumed_logs}; resumed params {resumed_params}; evals {same_eval}"
        ),
    )
}
