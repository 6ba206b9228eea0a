//! Pre-training, fine-tuning and evaluation loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{config_hash, Checkpoint, RngState};
use crate::config::{RunConfig, Schedule, Strategy};
use crate::contrastive::{
    balanced_class_weights, barlow_twins, clip, combine_multitask, downstream_loss, info_nce, simsiam,
    ContrastiveKind, DownstreamLoss, MultiTaskMode, MultiTaskWeights, Target,
};
use crate::data::{Phase, PairedDataset, SplitTag};
use crate::encoders::{DownstreamModel, PretrainModel, Task, CLIP_TEMPERATURE_PARAM, UNCERTAINTY_PARAMS};
use crate::error::{Error, Result};
use crate::layers::{init_params, Forward, Mode};
use crate::metrics::{argmax, classification_metrics, regression_metrics, Metrics};
use crate::mtm::{mask_loss, reconstruction_loss, EmpiricalMarginals, MaskRecord};
use crate::optim::{onecycle_lr, Adam};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SHUFFLE_TAG: u64 = 0x5348_5546;
const CROP_TAG: u64 = 0x4352_4f50;
const FINETUNE_TAG: u64 = 0x4649_4e45;
const EVAL_BATCH: usize = 256;

fn epoch_rng(seed: u64, tag: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    rng.set_stream(epoch as u64);
    rng
}

/// Shuffled mini-batches for one epoch. A trailing batch with a single
/// row is dropped since batch statistics and in-batch negatives need two.
pub fn epoch_batches(rows: &[usize], batch: usize, seed: u64, tag: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = rows.to_vec();
    order.shuffle(&mut epoch_rng(seed, tag, epoch));
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn steps_per_epoch(rows: usize, batch: usize) -> usize {
    rows / batch + usize::from(rows % batch >= 2)
}

fn learning_rate(cfg: &RunConfig, step: usize, total: usize) -> Result<f64> {
    match cfg.optim.schedule {
        Schedule::OneCycle => onecycle_lr(step, total, cfg.optim.lr, cfg.optim.onecycle()),
        Schedule::Constant => Ok(cfg.optim.lr),
    }
}

fn matrix<T: Scalar>(rows: &[&[f64]]) -> Result<Tensor<T>> {
    let width = rows.first().map_or(0, |r| r.len());
    let data: Vec<T> = rows.iter().flat_map(|r| r.iter().map(|&v| T::from_f64(v))).collect();
    Tensor::new(vec![rows.len(), width], data)
}

fn slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Loads and stacks images into `[batch, H, W, C]`.
fn image_batch<T: Scalar>(
    data: &PairedDataset,
    rows: &[usize],
    crop_seed: Option<(u64, usize)>,
) -> Result<Tensor<T>> {
    let mut pixels = Vec::new();
    let mut dims = None;
    for &i in rows {
        let img = match crop_seed {
            Some((seed, epoch)) => {
                let mut rng = crate::mtm::sample_rng(seed ^ CROP_TAG, epoch as u64, i as u64);
                data.image(i, Some(&mut rng))?
            }
            None => data.image(i, None)?,
        };
        let d = (img.height, img.width, img.channels);
        if *dims.get_or_insert(d) != d {
            return Err(Error::Data(format!("image {i} has size {d:?}, expected {:?}", dims.unwrap())));
        }
        pixels.extend(img.data.iter().map(|&v| T::from_f64(v)));
    }
    let (h, w, c) = dims.ok_or_else(|| Error::Data("empty image batch".into()))?;
    Tensor::new(vec![rows.len(), h, w, c], pixels)
}

fn check_input_len(cfg: &RunConfig, data: &PairedDataset) -> Result<()> {
    if cfg.model.tabular.input_len != data.input_len() {
        return Err(Error::Config(format!(
            "model.tabular.input_len = {} but the dataset has {} input features",
            cfg.model.tabular.input_len,
            data.input_len()
        )));
    }
    Ok(())
}

/// Per-epoch means of the loss components.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mask_loss: Option<f64>,
    pub reconstruction_loss: Option<f64>,
    pub contrastive_loss: Option<f64>,
    pub s_c: Option<f64>,
    pub s_m: Option<f64>,
}

/// Loss components of one pre-training step.
pub struct StepLosses<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub mask: Option<Var<'t, T>>,
    pub reconstruction: Option<Var<'t, T>>,
    pub contrastive: Option<Var<'t, T>>,
}

/// Inputs of one pre-training step.
pub struct PretrainBatch<T> {
    /// Original standardized rows `[B, L]`.
    pub x: Tensor<T>,
    /// Corrupted rows, shared by every branch.
    pub x_tilde: Tensor<T>,
    pub mask: Tensor<T>,
    pub images: Option<Tensor<T>>,
}

/// The pre-training objective for `strategy` on one batch.
pub fn pretrain_objective<'t, T: Scalar>(
    cfg: &RunConfig,
    strategy: Strategy,
    model: &PretrainModel,
    f: &Forward<'t, '_, T>,
    batch: &PretrainBatch<T>,
) -> Result<StepLosses<'t, T>> {
    let v_t = model.tab.forward(f, f.constant(batch.x_tilde.clone()))?;
    let mask = match strategy {
        Strategy::MtmMask | Strategy::MtCmtm => {
            let m_hat = model.mask_head.forward(f, v_t)?;
            Some(mask_loss(f.constant(batch.mask.clone()), m_hat)?)
        }
        _ => None,
    };
    let reconstruction = match strategy {
        Strategy::MtmFeature => {
            let x_hat = model.recon_head.forward(f, v_t)?;
            Some(reconstruction_loss(f.constant(batch.x.clone()), x_hat)?)
        }
        _ => None,
    };
    let contrastive = if strategy.uses_images() {
        let images = batch
            .images
            .as_ref()
            .ok_or_else(|| Error::Data(format!("strategy {} needs images", strategy.key())))?;
        let v_i = model.img.forward(f, f.constant(images.clone()))?;
        Some(contrastive_loss(cfg, model, f, v_i, v_t)?)
    } else {
        None
    };
    let total = match strategy {
        Strategy::MtmMask => mask.expect("mask branch"),
        Strategy::MtmFeature => reconstruction.expect("reconstruction branch"),
        Strategy::Mmcl => contrastive.expect("contrastive branch"),
        Strategy::MtCmtm => {
            let mut l_c = contrastive.expect("contrastive branch");
            if cfg.pretrain.contrastive == ContrastiveKind::Simsiam {
                // shift into [0, 2] so the uncertainty weighting stays bounded below
                l_c = l_c.add_scalar(1.0)?;
            }
            let weights = match cfg.pretrain.multitask {
                MultiTaskMode::Fixed => MultiTaskWeights::Fixed {
                    lambda_c: cfg.pretrain.lambda_c,
                    lambda_m: cfg.pretrain.lambda_m,
                },
                MultiTaskMode::Uncertainty => MultiTaskWeights::Uncertainty {
                    s_c: f.param(UNCERTAINTY_PARAMS[0])?,
                    s_m: f.param(UNCERTAINTY_PARAMS[1])?,
                },
            };
            combine_multitask(l_c, mask.expect("mask branch"), weights)?
        }
    };
    Ok(StepLosses {
        total,
        mask,
        reconstruction,
        contrastive,
    })
}

fn contrastive_loss<'t, T: Scalar>(
    cfg: &RunConfig,
    model: &PretrainModel,
    f: &Forward<'t, '_, T>,
    v_i: Var<'t, T>,
    v_t: Var<'t, T>,
) -> Result<Var<'t, T>> {
    match cfg.pretrain.contrastive {
        ContrastiveKind::InfoNce => {
            let z_i = model.proj_i.forward(f, v_i)?;
            let z_t = model.proj_t.forward(f, v_t)?;
            info_nce(z_i, z_t, cfg.model.temperature)
        }
        ContrastiveKind::Clip => {
            let z_i = model.proj_i.forward(f, v_i)?;
            let z_t = model.proj_t.forward(f, v_t)?;
            clip(z_i, z_t, f.param(CLIP_TEMPERATURE_PARAM)?)
        }
        ContrastiveKind::Simsiam => {
            let z_i = model.proj_i.forward_raw(f, v_i)?;
            let z_t = model.proj_t.forward_raw(f, v_t)?;
            let p_i = model.simsiam_pred.forward_raw(f, z_i)?;
            let p_t = model.simsiam_pred.forward_raw(f, z_t)?;
            simsiam(p_i, p_t, z_i, z_t)
        }
        ContrastiveKind::BarlowTwins => {
            let z_i = model.proj_i.forward_raw(f, v_i)?;
            let z_t = model.proj_t.forward_raw(f, v_t)?;
            barlow_twins(z_i, z_t, cfg.pretrain.barlow_lambda)
        }
    }
}

/// Builds the batch for `rows` in `epoch`, corrupting each row with its
/// own `(seed, epoch, row)` stream.
pub fn pretrain_batch<T: Scalar>(
    cfg: &RunConfig,
    strategy: Strategy,
    data: &PairedDataset,
    marginals: &EmpiricalMarginals,
    rows: &[usize],
    seed: u64,
    epoch: usize,
) -> Result<PretrainBatch<T>> {
    let mut x = Vec::with_capacity(rows.len());
    let mut x_tilde = Vec::with_capacity(rows.len());
    let mut mask = Vec::with_capacity(rows.len());
    for &i in rows {
        let row = data.features(i);
        let rec = MaskRecord::generate(row, marginals, cfg.model.mask_prob, seed, epoch as u64, i as u64)?;
        x.push(row);
        x_tilde.push(rec.corrupted);
        mask.push(rec.m);
    }
    Ok(PretrainBatch {
        x: matrix(&x)?,
        x_tilde: matrix(&slices(&x_tilde))?,
        mask: matrix(&slices(&mask))?,
        images: if strategy.uses_images() {
            Some(image_batch(data, rows, Some((seed, epoch)))?)
        } else {
            None
        },
    })
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<T> {
    pub model: PretrainModel,
    pub params: ParamStore<T>,
    pub log: Vec<EpochLog>,
    pub checkpoint: Checkpoint,
}

/// Trains the pre-training model on the training split only.
pub fn pretrain<T: Scalar>(cfg: &RunConfig, data: &PairedDataset, seed: u64) -> Result<PretrainOutcome<T>> {
    let strategy = cfg.pretrain.strategy;
    check_input_len(cfg, data)?;
    if strategy.uses_images() && !data.has_images() {
        return Err(Error::Data(format!(
            "strategy {} needs images but the dataset has no image column",
            strategy.key()
        )));
    }
    let model = PretrainModel::new(&cfg.model.encoder())?;
    let mut store: ParamStore<T> = init_params(&model.specs(), seed);
    let mut adam = Adam::new(cfg.optim.adam());
    if let Some(l) = data.log() {
        l.set_phase(Phase::Pretrain);
    }
    let train = data.indices(SplitTag::Train);
    let rows: Vec<&[f64]> = train.iter().map(|&i| data.features(i)).collect();
    let marginals = EmpiricalMarginals::fit(&rows)?;
    let per_epoch = steps_per_epoch(train.len(), cfg.optim.batch_size);
    if per_epoch == 0 {
        return Err(Error::Data("training split too small for one batch".into()));
    }
    let total = per_epoch * cfg.pretrain.epochs;
    let mut step = 0;
    let mut log = Vec::new();
    for epoch in 0..cfg.pretrain.epochs {
        let mut sums = [0.0f64; 4];
        let mut seen = [0usize; 4];
        for rows in epoch_batches(&train, cfg.optim.batch_size, seed, SHUFFLE_TAG, epoch) {
            let batch = pretrain_batch::<T>(cfg, strategy, data, &marginals, &rows, seed, epoch)?;
            let tape = Tape::new();
            let f = Forward::new(&tape, &store, Mode::Train);
            let losses = pretrain_objective(cfg, strategy, &model, &f, &batch)?;
            for (k, v) in [Some(losses.total), losses.mask, losses.reconstruction, losses.contrastive]
                .into_iter()
                .enumerate()
            {
                if let Some(v) = v {
                    sums[k] += v.item()?.as_f64();
                    seen[k] += 1;
                }
            }
            let grads = tape.backward(losses.total)?.into_param_map();
            let updates = f.into_updates();
            let lr = learning_rate(cfg, step, total)?;
            adam.step(&mut store, &grads, lr)?;
            store.apply_updates(updates)?;
            step += 1;
        }
        let avg = |k: usize| (seen[k] > 0).then(|| sums[k] / seen[k] as f64);
        let scalar = |name: &str| store.get(name).ok().and_then(|t| t.item().ok()).map(Scalar::as_f64);
        let uncertainty = strategy == Strategy::MtCmtm && cfg.pretrain.multitask == MultiTaskMode::Uncertainty;
        let entry = EpochLog {
            epoch,
            loss: avg(0).unwrap_or(f64::NAN),
            mask_loss: avg(1),
            reconstruction_loss: avg(2),
            contrastive_loss: avg(3),
            s_c: uncertainty.then(|| scalar(UNCERTAINTY_PARAMS[0])).flatten(),
            s_m: uncertainty.then(|| scalar(UNCERTAINTY_PARAMS[1])).flatten(),
        };
        log::info!("pretrain {} epoch {epoch}: loss {:.5}", strategy.key(), entry.loss);
        log.push(entry);
    }
    let checkpoint = Checkpoint::new(
        &store,
        config_hash(cfg),
        config_hash(&cfg.model.tabular),
        RngState {
            seed,
            epoch: cfg.pretrain.epochs as u64,
        },
        json!({
            "kind": "pretrain",
            "strategy": strategy,
            "encoder": cfg.model.encoder(),
        }),
    );
    Ok(PretrainOutcome {
        model,
        params: store,
        log,
        checkpoint,
    })
}

/// Where the downstream encoder weights come from.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    Fresh,
    Pretrained(&'a Checkpoint),
}

pub fn default_loss(task: Task) -> DownstreamLoss {
    match task {
        Task::Regression { .. } => DownstreamLoss::L1,
        Task::Classification { .. } => DownstreamLoss::Ce,
    }
}

/// Downstream parameters before any fine-tuning update.
pub fn downstream_init<T: Scalar>(
    cfg: &RunConfig,
    model: &DownstreamModel,
    init: Init<'_>,
    seed: u64,
) -> Result<ParamStore<T>> {
    let specs = model.specs();
    let mut store: ParamStore<T> = init_params(&specs, seed ^ FINETUNE_TAG);
    if let Init::Pretrained(ck) = init {
        let expected = config_hash(&cfg.model.tabular);
        if ck.manifest.encoder_hash != expected {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint encoder {} vs model {}",
                ck.manifest.encoder_hash, expected
            )));
        }
        let tab: Vec<_> = specs.into_iter().filter(|s| s.name.starts_with("tab.")).collect();
        store.merge(&ck.params_for::<T>(&tab)?)?;
    }
    Ok(store)
}

/// Raw model outputs (regression values or logits) for `rows`, eval mode.
pub fn predict<T: Scalar>(
    model: &DownstreamModel,
    store: &ParamStore<T>,
    data: &PairedDataset,
    rows: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_BATCH) {
        let feats: Vec<&[f64]> = chunk.iter().map(|&i| data.features(i)).collect();
        let tape = Tape::new();
        let f = Forward::new(&tape, store, Mode::Eval);
        let y = model.forward(&f, f.constant(matrix(&feats)?))?.value();
        let width = y.shape()[1];
        out.extend(y.data().chunks(width).map(|r| r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(
    model: &DownstreamModel,
    store: &ParamStore<T>,
    data: &PairedDataset,
    rows: &[usize],
) -> Result<Metrics> {
    if rows.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let pred = predict(model, store, data, rows)?;
    match model.task() {
        Task::Regression { .. } => {
            let truth: Vec<Vec<f64>> = rows
                .iter()
                .map(|&i| data.regression_target(i).map(<[f64]>::to_vec))
                .collect::<Result<_>>()?;
            regression_metrics(&pred, &truth)
        }
        Task::Classification { classes } => {
            let truth: Vec<usize> = rows.iter().map(|&i| data.class(i)).collect::<Result<_>>()?;
            let labels: Vec<usize> = pred.iter().map(|r| argmax(r)).collect();
            classification_metrics(&labels, &truth, classes)
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T> {
    pub model: DownstreamModel,
    /// Parameters of the best validation epoch.
    pub params: ParamStore<T>,
    pub val_history: Vec<Metrics>,
    pub best_epoch: usize,
    pub val: Metrics,
    pub test: Metrics,
}

impl<T: Scalar> FinetuneOutcome<T> {
    pub fn checkpoint(&self, cfg: &RunConfig, seed: u64) -> Checkpoint {
        Checkpoint::new(
            &self.params,
            config_hash(cfg),
            config_hash(&cfg.model.tabular),
            RngState {
                seed,
                epoch: self.best_epoch as u64 + 1,
            },
            json!({
                "kind": "downstream",
                "tabular": self.model.cfg,
                "task": self.model.task(),
                "test": self.test,
            }),
        )
    }
}

/// Rebuilds a fine-tuned model from its checkpoint.
pub fn load_downstream<T: Scalar>(ck: &Checkpoint) -> Result<(DownstreamModel, ParamStore<T>)> {
    let meta = &ck.manifest.meta;
    if meta["kind"] != "downstream" {
        return Err(Error::Checkpoint("not a fine-tuned model checkpoint".into()));
    }
    let tab = serde_json::from_value(meta["tabular"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let task = serde_json::from_value(meta["task"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let model = DownstreamModel::new(&tab, task)?;
    let params = ck.params_for(&model.specs())?;
    Ok((model, params))
}

fn targets_for<T: Scalar>(data: &PairedDataset, rows: &[usize]) -> Result<(Option<Tensor<T>>, Vec<usize>)> {
    match data.task() {
        Task::Regression { .. } => {
            let y: Vec<&[f64]> = rows.iter().map(|&i| data.regression_target(i)).collect::<Result<_>>()?;
            Ok((Some(matrix(&y)?), vec![]))
        }
        Task::Classification { .. } => Ok((None, rows.iter().map(|&i| data.class(i)).collect::<Result<_>>()?)),
    }
}

/// Trains a downstream model, selects the epoch with the best validation
/// score and reports that model on the test split.
pub fn finetune<T: Scalar>(
    cfg: &RunConfig,
    init: Init<'_>,
    data: &PairedDataset,
    seed: u64,
) -> Result<FinetuneOutcome<T>> {
    check_input_len(cfg, data)?;
    let task = data.task();
    let loss_kind = cfg.finetune.loss.unwrap_or_else(|| default_loss(task));
    if loss_kind.is_classification() != matches!(task, Task::Classification { .. }) {
        return Err(Error::Config(format!("loss {loss_kind:?} does not fit task {task:?}")));
    }
    let model = DownstreamModel::new(&cfg.model.tabular, task)?;
    let mut store: ParamStore<T> = downstream_init(cfg, &model, init, seed)?;
    if let Some(l) = data.log() {
        l.set_phase(Phase::Finetune);
    }
    let train = data.indices(SplitTag::Train);
    let (val_rows, test_rows) = data.eval_indices();
    let class_weights = match (loss_kind, task) {
        (DownstreamLoss::BalancedCe, Task::Classification { classes }) => {
            let y: Vec<usize> = train.iter().map(|&i| data.class(i)).collect::<Result<_>>()?;
            Some(balanced_class_weights(&y, classes)?)
        }
        _ => None,
    };
    let per_epoch = steps_per_epoch(train.len(), cfg.optim.batch_size);
    if per_epoch == 0 {
        return Err(Error::Data("training split too small for one batch".into()));
    }
    let total = per_epoch * cfg.finetune.epochs;
    let mut adam = Adam::new(cfg.optim.adam());
    let mut step = 0;
    let mut best: Option<(Metrics, ParamStore<T>, usize)> = None;
    let mut history = Vec::new();
    for epoch in 0..cfg.finetune.epochs {
        for rows in epoch_batches(&train, cfg.optim.batch_size, seed, FINETUNE_TAG, epoch) {
            let feats: Vec<&[f64]> = rows.iter().map(|&i| data.features(i)).collect();
            let (y, classes) = targets_for::<T>(data, &rows)?;
            let tape = Tape::new();
            let f = Forward::new(&tape, &store, Mode::Train);
            let pred = model.forward(&f, f.constant(matrix(&feats)?))?;
            let target = match &y {
                Some(y) => Target::Regression(y),
                None => Target::Classes(&classes),
            };
            let loss = downstream_loss(loss_kind, pred, target, class_weights.as_deref())?;
            let grads = tape.backward(loss)?.into_param_map();
            let updates = f.into_updates();
            adam.step(&mut store, &grads, learning_rate(cfg, step, total)?)?;
            store.apply_updates(updates)?;
            step += 1;
        }
        let m = evaluate(&model, &store, data, &val_rows)?;
        log::info!("finetune epoch {epoch}: val {:.5}", m.primary());
        if best.as_ref().map_or(true, |(b, _, _)| m.better_than(b)) {
            best = Some((m, store.clone(), epoch));
        }
        history.push(m);
    }
    let (val, params, best_epoch) = best.expect("at least one epoch");
    if let Some(l) = data.log() {
        l.set_phase(Phase::Evaluate);
    }
    let test = evaluate(&model, &params, data, &test_rows)?;
    Ok(FinetuneOutcome {
        model,
        params,
        val_history: history,
        best_epoch,
        val,
        test,
    })
}
