mod common;

use common::tiny_setup;
use mtcmtm::checkpoint::Checkpoint;
use mtcmtm::config::Strategy;
use mtcmtm::contrastive::{ContrastiveKind, MultiTaskMode};
use mtcmtm::data::SplitTag;
use mtcmtm::encoders::{DownstreamModel, PretrainModel};
use mtcmtm::layers::{init_params, Forward, Mode};
use mtcmtm::metrics::{regression_metrics, Metrics};
use mtcmtm::mtm::EmpiricalMarginals;
use mtcmtm::train::*;
use mtcmtm::{Error, Tape};

#[test]
fn mask_pretraining_reduces_mask_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = tiny_setup(dir.path(), 500, "schema_regression.txt");
    cfg.pretrain.strategy = Strategy::MtmMask;
    cfg.pretrain.epochs = 6;
    let out = pretrain::<f64>(&cfg, &data, 0).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|e| e.mask_loss.unwrap()).collect();
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
    assert!(out.log.iter().all(|e| e.contrastive_loss.is_none() && e.s_c.is_none()));
}

#[test]
fn identical_samples_give_uniform_contrastive_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path(), 200, "schema_regression.txt");
    let model = PretrainModel::new(&cfg.model.encoder()).unwrap();
    let store = init_params::<f64>(&model.specs(), 3);
    let train = data.indices(SplitTag::Train);
    let rows: Vec<&[f64]> = train.iter().map(|&i| data.features(i)).collect();
    let marginals = EmpiricalMarginals::fit(&rows).unwrap();
    for (step, &row) in train.iter().take(4).enumerate() {
        let n = 6;
        let batch = pretrain_batch::<f64>(&cfg, Strategy::MtCmtm, &data, &marginals, &vec![row; n], 0, step).unwrap();
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, Mode::Train);
        let losses = pretrain_objective(&cfg, Strategy::MtCmtm, &model, &f, &batch).unwrap();
        let l_c = losses.contrastive.unwrap().item().unwrap();
        assert!((l_c - (n as f64).ln()).abs() < 1e-10, "step {step}: {l_c}");
    }
}

#[test]
fn every_strategy_and_loss_trains() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = tiny_setup(dir.path(), 150, "schema_regression.txt");
    cfg.pretrain.epochs = 1;
    for strategy in [Strategy::MtmMask, Strategy::MtmFeature, Strategy::Mmcl, Strategy::MtCmtm] {
        cfg.pretrain.strategy = strategy;
        let out = pretrain::<f32>(&cfg, &data, 1).unwrap();
        assert!(out.log[0].loss.is_finite(), "{strategy:?}");
    }
    cfg.pretrain.strategy = Strategy::MtCmtm;
    for kind in [ContrastiveKind::Clip, ContrastiveKind::Simsiam, ContrastiveKind::BarlowTwins] {
        for mode in [MultiTaskMode::Fixed, MultiTaskMode::Uncertainty] {
            cfg.pretrain.contrastive = kind;
            cfg.pretrain.multitask = mode;
            let out = pretrain::<f64>(&cfg, &data, 2).unwrap();
            let e = &out.log[0];
            assert!(e.loss.is_finite() && e.mask_loss.is_some() && e.contrastive_loss.is_some());
            assert_eq!(e.s_c.is_some(), mode == MultiTaskMode::Uncertainty);
        }
    }
}

#[test]
fn pretraining_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path(), 150, "schema_regression.txt");
    let a = pretrain::<f32>(&cfg, &data, 5).unwrap();
    let b = pretrain::<f32>(&cfg, &data, 5).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.log, b.log);
    let c = pretrain::<f32>(&cfg, &data, 6).unwrap();
    assert_ne!(a.checkpoint.to_bytes(), c.checkpoint.to_bytes());
}

#[test]
fn fresh_finetune_beats_constant_predictor() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = tiny_setup(dir.path(), 2000, "schema_regression.txt");
    cfg.finetune.epochs = 8;
    let out = finetune::<f32>(&cfg, Init::Fresh, &data, 0).unwrap();
    let (val_rows, _) = data.eval_indices();
    let truth: Vec<Vec<f64>> = val_rows.iter().map(|&i| data.regression_target(i).unwrap().to_vec()).collect();
    let dim = truth[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|d| truth.iter().map(|r| r[d]).sum::<f64>() / truth.len() as f64)
        .collect();
    let constant = regression_metrics(&vec![mean; truth.len()], &truth).unwrap();
    assert!(out.val.mse().unwrap() < constant.mse().unwrap(), "{:?} vs {constant:?}", out.val);
    assert_eq!(out.val_history.len(), 8);
    assert_eq!(out.val, out.val_history[out.best_epoch]);
}

#[test]
fn saved_model_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path(), 200, "schema_classification.txt");
    let out = finetune::<f32>(&cfg, Init::Fresh, &data, 3).unwrap();
    let path = dir.path().join("m.ckpt");
    out.checkpoint(&cfg, 3).save(&path).unwrap();
    let (model, params) = load_downstream::<f32>(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(model, out.model);
    let (_, test) = data.eval_indices();
    assert_eq!(evaluate(&model, &params, &data, &test).unwrap(), out.test);
    assert!(matches!(out.test, Metrics::Classification { .. }));
}

#[test]
fn pretrained_weights_are_loaded() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path(), 150, "schema_regression.txt");
    let pre = pretrain::<f32>(&cfg, &data, 0).unwrap();
    let model = DownstreamModel::new(&cfg.model.tabular, data.task()).unwrap();
    let fresh = downstream_init::<f32>(&cfg, &model, Init::Fresh, 0).unwrap();
    let loaded = downstream_init::<f32>(&cfg, &model, Init::Pretrained(&pre.checkpoint), 0).unwrap();
    assert_eq!(loaded.get("tab.stem.w").unwrap(), pre.params.get("tab.stem.w").unwrap());
    let rows = data.indices(SplitTag::Val);
    let a = predict(&model, &fresh, &data, &rows).unwrap();
    let b = predict(&model, &loaded, &data, &rows).unwrap();
    assert_ne!(a, b);
}

#[test]
fn mismatched_encoder_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path(), 150, "schema_regression.txt");
    let pre = pretrain::<f32>(&cfg, &data, 0).unwrap();
    let mut other = cfg.clone();
    other.model.tabular.n_blocks = 3;
    let err = finetune::<f32>(&other, Init::Pretrained(&pre.checkpoint), &data, 0).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    assert!(load_downstream::<f32>(&pre.checkpoint).is_err());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_setup(dir.path(), 150, "schema_regression.txt");
    let ck = pretrain::<f32>(&cfg, &data, 0).unwrap().checkpoint;
    let bytes = ck.to_bytes();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 1;
    assert!(Checkpoint::from_bytes(&flipped).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..3]).is_err());
}

#[test]
fn wrong_input_width_or_missing_images_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = tiny_setup(dir.path(), 150, "schema_regression.txt");
    cfg.model.tabular.input_len = 11;
    assert!(matches!(pretrain::<f32>(&cfg, &data, 0), Err(Error::Config(_))));
    assert!(matches!(finetune::<f32>(&cfg, Init::Fresh, &data, 0), Err(Error::Config(_))));
}

#[test]
fn classification_finetune_with_every_loss() {
    use mtcmtm::contrastive::DownstreamLoss;
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, data) = tiny_setup(dir.path(), 150, "schema_classification.txt");
    cfg.finetune.epochs = 1;
    for loss in [DownstreamLoss::Ce, DownstreamLoss::BalancedCe, DownstreamLoss::Focal] {
        cfg.finetune.loss = Some(loss);
        let out = finetune::<f64>(&cfg, Init::Fresh, &data, 0).unwrap();
        assert!(out.test.primary().is_finite());
    }
    cfg.finetune.loss = Some(DownstreamLoss::Mse);
    assert!(finetune::<f64>(&cfg, Init::Fresh, &data, 0).is_err());
}
