mod common;

use hat::model::FeatureMode;
use hat::training::checkpoint::load_checkpoint;
use hat::training::{dataset_features, train, TrainOptions, EPOCH_LOG, LAST_CHECKPOINT, TRAIN_LOG};
use hat::HatError;

#[test]
fn identical_runs_and_resumed_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let v = common::criterion_reproducibility(dir.path());
    assert!(v.passed, "{}", v.detail);
    assert_eq!(
        common::read(&dir.path().join("a").join(EPOCH_LOG)),
        common::read(&dir.path().join("c").join(EPOCH_LOG))
    );
}

#[test]
fn interrupted_run_leaves_a_resumable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(3);
    let opts = TrainOptions {
        stop_after_epoch: Some(2),
        skip_eval: true,
        ..Default::default()
    };
    let out = train(&cfg, dir.path(), &opts).unwrap();
    assert_eq!(out.last_epoch, 2);
    let ckpt = load_checkpoint(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!((ckpt.epoch, ckpt.config_hash.as_str()), (2, cfg.hash().as_str()));
    assert!(common::params_equal(&ckpt.params, &out.params));

    let mut other = cfg.clone();
    other.loss.lambda = 0.9;
    let resume = TrainOptions {
        resume: Some(dir.path().join(LAST_CHECKPOINT)),
        ..Default::default()
    };
    assert!(matches!(train(&other, dir.path(), &resume), Err(HatError::Checkpoint(_))));
}

#[test]
fn diverging_run_stops_with_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(3);
    cfg.schedule.base_lr = 1e300;
    cfg.schedule.warmup_start_lr = 1e300;
    let err = train(&cfg, dir.path(), &TrainOptions::default()).unwrap_err();
    let HatError::NonFinite { snapshot, .. } = err else {
        panic!("expected a non-finite abort, got {err}");
    };
    let snapshot = snapshot.expect("snapshot written");
    assert!(load_checkpoint(&snapshot).is_ok());
    assert!(common::read(&dir.path().join(TRAIN_LOG)).lines().count() >= 1);
}

#[test]
fn feature_modes_rank_the_gallery_differently() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(2);
    let out = train(&cfg, dir.path(), &TrainOptions { skip_eval: true, ..Default::default() }).unwrap();
    let (splits, _) = cfg.data.open().unwrap();
    let ranking = |mode| {
        let q = dataset_features(&out.model, &out.params, &splits.query, &cfg, mode).unwrap();
        let g = dataset_features(&out.model, &out.params, &splits.gallery, &cfg, mode).unwrap();
        let d = hat::metrics::distance_matrix(&q, &g, cfg.eval.normalize).unwrap();
        d.rows()
            .into_iter()
            .map(|r| {
                let mut idx: Vec<usize> = (0..r.len()).collect();
                idx.sort_by(|&a, &b| r[a].total_cmp(&r[b]).then(a.cmp(&b)));
                idx
            })
            .collect::<Vec<_>>()
    };
    let concat = ranking(FeatureMode::Concat);
    assert_eq!(concat.len(), splits.query.len());
    assert_ne!(concat, ranking(FeatureMode::BackboneOnly));
}
