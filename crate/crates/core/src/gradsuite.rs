//! Finite-difference gradient suite over every primitive, layer, loss and
//! the composed pre-training objective, at 64-bit with randomized shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_params, Tape, Var};
use crate::config::{RunConfig, Strategy};
use crate::contrastive::{
    balanced_class_weights, barlow_twins, clip, combine_multitask, downstream_loss, info_nce, simsiam,
    uncertainty_term, ContrastiveKind, DownstreamLoss, MultiTaskMode, MultiTaskWeights, Target,
};
use crate::encoders::{
    DownstreamModel, ImageConfig, ImageEncoder, ImageKind, MaskEstimator, PredictorHead, PretrainModel,
    ProjectionHead, TabularConfig, TabularEncoder, Task, UNCERTAINTY_PARAMS,
};
use crate::error::Result;
use crate::layers::{
    init_params, BatchNorm1d, Cbam1d, CbamConfig, Conv1d, Conv2d, Dense, Forward, Mode, ParamSpec,
    ResidualBlock,
};
use crate::mtm::{mask_loss, reconstruction_loss};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{pretrain_objective, PretrainBatch};

pub const SUITE_TOLERANCE: f64 = 1e-5;
const EPS: f64 = 1e-6;
const MAX_COORDS: usize = 6;

type Rng8 = ChaCha8Rng;

pub struct GradCase {
    pub name: &'static str,
    run: fn(&mut Rng8) -> Result<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<CaseResult>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn failures(&self) -> Vec<&CaseResult> {
        self.results
            .iter()
            .filter(|r| !(r.max_rel_error < self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.results
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Runs every case `repeats` times, each with its own seed derived from `seed`.
pub fn run_suite(seed: u64, repeats: usize) -> Result<SuiteReport> {
    let mut results = Vec::new();
    for (ci, case) in cases().iter().enumerate() {
        for r in 0..repeats {
            let s = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((ci as u64) << 20 | r as u64);
            let mut rng = Rng8::seed_from_u64(s);
            let err = (case.run)(&mut rng)?;
            results.push(CaseResult {
                name: case.name,
                seed: s,
                max_rel_error: err,
            });
        }
    }
    Ok(SuiteReport {
        results,
        tolerance: SUITE_TOLERANCE,
    })
}

macro_rules! case {
    ($name:literal, $f:expr) => {
        GradCase { name: $name, run: $f }
    };
}

pub fn cases() -> Vec<GradCase> {
    vec![
        case!("add", |r| binary(r, Op::Add)),
        case!("sub", |r| binary(r, Op::Sub)),
        case!("mul", |r| binary(r, Op::Mul)),
        case!("div", |r| binary(r, Op::Div)),
        case!("matmul", matmul_case),
        case!("conv1d", conv1d_case),
        case!("conv2d", conv2d_case),
        case!("sum", |r| reduce(r, 0)),
        case!("mean", |r| reduce(r, 1)),
        case!("max", |r| reduce(r, 2)),
        case!("sum_all", |r| unary(r, Dom::Any, |v| v.sum_all())),
        case!("mean_all", |r| unary(r, Dom::Any, |v| v.mean_all())),
        case!("relu", |r| unary(r, Dom::AwayFromZero, |v| weighted(v.relu()?))),
        case!("sigmoid", |r| unary(r, Dom::Any, |v| weighted(v.sigmoid()?))),
        case!("tanh", |r| unary(r, Dom::Any, |v| weighted(v.tanh()?))),
        case!("exp", |r| unary(r, Dom::Any, |v| weighted(v.exp()?))),
        case!("log", |r| unary(r, Dom::Positive, |v| weighted(v.ln()?))),
        case!("abs", |r| unary(r, Dom::AwayFromZero, |v| weighted(v.abs()?))),
        case!("neg", |r| unary(r, Dom::Any, |v| weighted(v.neg()?))),
        case!("sqrt", |r| unary(r, Dom::Positive, |v| weighted(v.sqrt()?))),
        case!("power", power_case),
        case!("scale", |r| unary(r, Dom::Any, |v| weighted(v.scale(-1.7)?))),
        case!("add_scalar", |r| unary(r, Dom::Any, |v| weighted(v.add_scalar(0.3)?.powf(2.0)?))),
        case!("huber", |r| unary(r, Dom::AwayFromOne, |v| weighted(v.huber(1.0)?))),
        case!("softmax", |r| along_axis(r, |v, a| weighted(v.softmax(a)?))),
        case!("log_sum_exp", |r| along_axis(r, |v, a| weighted(v.log_sum_exp(a)?))),
        case!("l2_normalize", |r| along_axis(r, |v, a| weighted(v.l2_normalize(a, 1e-12)?))),
        case!("concat", concat_case),
        case!("reshape", reshape_case),
        case!("transpose", transpose_case),
        case!("slice", slice_case),
        case!("expand", expand_case),
        case!("detach", detach_case),
        case!("dense", dense_case),
        case!("conv1d_layer", conv1d_layer_case),
        case!("conv2d_layer", conv2d_layer_case),
        case!("batchnorm1d", batchnorm_case),
        case!("cbam1d", cbam_case),
        case!("residual_block", residual_case),
        case!("tabular_encoder", tabular_case),
        case!("image_encoder_mlp", |r| image_case(r, ImageKind::Mlp)),
        case!("image_encoder_cnn", |r| image_case(r, ImageKind::SmallCnn)),
        case!("projection_head", projection_case),
        case!("mask_estimator", mask_estimator_case),
        case!("predictor_head", predictor_case),
        case!("mask_loss", mask_loss_case),
        case!("reconstruction_loss", reconstruction_case),
        case!("info_nce", info_nce_case),
        case!("clip", clip_case),
        case!("simsiam", simsiam_case),
        case!("barlow_twins", barlow_case),
        case!("loss_mse", |r| regression_loss(r, DownstreamLoss::Mse)),
        case!("loss_l1", |r| regression_loss(r, DownstreamLoss::L1)),
        case!("loss_huber", |r| regression_loss(r, DownstreamLoss::Huber)),
        case!("loss_ce", |r| class_loss(r, DownstreamLoss::Ce)),
        case!("loss_balanced_ce", |r| class_loss(r, DownstreamLoss::BalancedCe)),
        case!("loss_focal", |r| class_loss(r, DownstreamLoss::Focal)),
        case!("uncertainty_weighting", uncertainty_case),
        case!("fixed_weighting", fixed_weighting_case),
        case!("downstream_model", downstream_case),
        case!("mt_cmtm_objective", objective_case),
    ]
}

// --- inputs --------------------------------------------------------------

#[derive(Clone, Copy)]
enum Dom {
    Any,
    Positive,
    AwayFromZero,
    AwayFromOne,
}

fn draw(rng: &mut Rng8, dom: Dom) -> f64 {
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    match dom {
        Dom::Any => rng.gen_range(-1.5..1.5),
        Dom::Positive => rng.gen_range(0.2..2.0),
        Dom::AwayFromZero => sign * rng.gen_range(0.05..1.5),
        Dom::AwayFromOne => {
            let m = if rng.gen::<bool>() {
                rng.gen_range(0.05..0.9)
            } else {
                rng.gen_range(1.1..2.0)
            };
            sign * m
        }
    }
}

fn tensor(rng: &mut Rng8, shape: &[usize], dom: Dom) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| draw(rng, dom)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn any(rng: &mut Rng8, shape: &[usize]) -> Tensor<f64> {
    tensor(rng, shape, Dom::Any)
}

fn dims(rng: &mut Rng8, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

/// Fixed pseudo-random weighting to reduce any output to a scalar without
/// symmetric cancellations.
fn weighted<'t>(v: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| ((i as f64 + 1.0) * 0.754_877_666_2).fract() * 2.0 - 0.9)
        .collect();
    let w = v.tape().constant(Tensor::new(shape, w)?);
    v.mul(w)?.sum_all()
}

// --- primitives ----------------------------------------------------------

#[derive(Clone, Copy)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

fn apply<'t>(op: Op, a: Var<'t, f64>, b: Var<'t, f64>) -> Result<Var<'t, f64>> {
    match op {
        Op::Add => a.add(b),
        Op::Sub => a.sub(b),
        Op::Mul => a.mul(b),
        Op::Div => a.div(b),
    }
}

/// Both operands, under equal shapes, a suffix broadcast and a one-element
/// broadcast.
fn binary(rng: &mut Rng8, op: Op) -> Result<f64> {
    let full = dims(rng, 3);
    let small = match rng.gen_range(0..3) {
        0 => full.clone(),
        1 => full[1..].to_vec(),
        _ => vec![1],
    };
    let b_dom = if matches!(op, Op::Div) { Dom::AwayFromZero } else { Dom::Any };
    let a = any(rng, &full);
    let b = tensor(rng, &small, b_dom);
    let b = b.map(|v| if matches!(op, Op::Div) { v.signum() * (v.abs() + 0.5) } else { v });
    let ea = grad_check(|t, v| weighted(apply(op, v, t.constant(b.clone()))?), &a, EPS)?;
    let eb = grad_check(|t, v| weighted(apply(op, t.constant(a.clone()), v)?), &b, EPS)?;
    // operand order swapped: the broadcast one first
    let ec = grad_check(|t, v| weighted(apply(op, v, t.constant(a.clone()))?), &b, EPS);
    let ec = match op {
        Op::Div => 0.0,
        _ => ec?,
    };
    Ok(ea.max(eb).max(ec))
}

fn matmul_case(rng: &mut Rng8) -> Result<f64> {
    let d = dims(rng, 3);
    let a = any(rng, &[d[0], d[1]]);
    let b = any(rng, &[d[1], d[2]]);
    let ea = grad_check(|t, v| weighted(v.matmul(t.constant(b.clone()))?), &a, EPS)?;
    let eb = grad_check(|t, v| weighted(t.constant(a.clone()).matmul(v)?), &b, EPS)?;
    Ok(ea.max(eb))
}

fn conv_geometry(rng: &mut Rng8) -> (usize, usize, usize, usize) {
    let k = rng.gen_range(1..=4);
    let len = rng.gen_range(k..k + 5);
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=k / 2);
    (k, len, stride, pad)
}

fn conv1d_case(rng: &mut Rng8) -> Result<f64> {
    let (b, cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let (k, len, stride, pad) = conv_geometry(rng);
    let x = any(rng, &[b, cin, len]);
    let w = any(rng, &[cout, cin, k]);
    let bias = any(rng, &[cout]);
    let ex = grad_check(
        |t, v| weighted(v.conv1d(t.constant(w.clone()), Some(t.constant(bias.clone())), stride, pad)?),
        &x,
        EPS,
    )?;
    let ew = grad_check(
        |t, v| weighted(t.constant(x.clone()).conv1d(v, Some(t.constant(bias.clone())), stride, pad)?),
        &w,
        EPS,
    )?;
    let eb = grad_check(
        |t, v| weighted(t.constant(x.clone()).conv1d(t.constant(w.clone()), Some(v), stride, pad)?),
        &bias,
        EPS,
    )?;
    Ok(ex.max(ew).max(eb))
}

fn conv2d_case(rng: &mut Rng8) -> Result<f64> {
    let (b, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=3));
    let (k, h, stride, pad) = conv_geometry(rng);
    let w_len = rng.gen_range(k..k + 4);
    let x = any(rng, &[b, cin, h, w_len]);
    let w = any(rng, &[cout, cin, k, k]);
    let bias = any(rng, &[cout]);
    let ex = grad_check(
        |t, v| weighted(v.conv2d(t.constant(w.clone()), Some(t.constant(bias.clone())), stride, pad)?),
        &x,
        EPS,
    )?;
    let ew = grad_check(
        |t, v| weighted(t.constant(x.clone()).conv2d(v, Some(t.constant(bias.clone())), stride, pad)?),
        &w,
        EPS,
    )?;
    let eb = grad_check(
        |t, v| weighted(t.constant(x.clone()).conv2d(t.constant(w.clone()), Some(v), stride, pad)?),
        &bias,
        EPS,
    )?;
    Ok(ex.max(ew).max(eb))
}

fn reduce(rng: &mut Rng8, which: u8) -> Result<f64> {
    let shape = dims(rng, 3);
    let axis = rng.gen_range(0..3);
    let x = any(rng, &shape);
    grad_check(
        |_, v| {
            let r = match which {
                0 => v.sum(axis)?,
                1 => v.mean(axis)?,
                _ => v.max(axis)?,
            };
            weighted(r)
        },
        &x,
        EPS,
    )
}

fn unary(rng: &mut Rng8, dom: Dom, f: for<'t> fn(Var<'t, f64>) -> Result<Var<'t, f64>>) -> Result<f64> {
    let shape = dims(rng, 2);
    let x = tensor(rng, &shape, dom);
    grad_check(|_, v| f(v), &x, EPS)
}

fn power_case(rng: &mut Rng8) -> Result<f64> {
    let e = [2.0, 3.0, 0.5, -1.0, 1.5][rng.gen_range(0..5)];
    let shape = dims(rng, 2);
    let x = tensor(rng, &shape, Dom::Positive);
    grad_check(|_, v| weighted(v.powf(e)?), &x, EPS)
}

fn along_axis(rng: &mut Rng8, f: for<'t> fn(Var<'t, f64>, usize) -> Result<Var<'t, f64>>) -> Result<f64> {
    let shape = dims(rng, 3);
    let axis = rng.gen_range(0..3);
    let x = any(rng, &shape);
    grad_check(|_, v| f(v, axis), &x, EPS)
}

fn concat_case(rng: &mut Rng8) -> Result<f64> {
    let shape = dims(rng, 3);
    let axis = rng.gen_range(0..3);
    let mut other_shape = shape.clone();
    other_shape[axis] = rng.gen_range(1..=3);
    let x = any(rng, &shape);
    let o = any(rng, &other_shape);
    let first = rng.gen::<bool>();
    grad_check(
        |t, v| {
            let o = t.constant(o.clone());
            let parts = if first { [v, o] } else { [o, v] };
            weighted(t.concat(&parts, axis)?)
        },
        &x,
        EPS,
    )
}

fn reshape_case(rng: &mut Rng8) -> Result<f64> {
    let shape = dims(rng, 3);
    let x = any(rng, &shape);
    let target = [shape[0] * shape[1], shape[2]];
    grad_check(|_, v| weighted(v.reshape(&target)?.tanh()?), &x, EPS)
}

fn transpose_case(rng: &mut Rng8) -> Result<f64> {
    let shape = dims(rng, 3);
    let a0 = rng.gen_range(0..3);
    let a1 = rng.gen_range(0..3);
    let x = any(rng, &shape);
    grad_check(|_, v| weighted(v.transpose(a0, a1)?), &x, EPS)
}

fn slice_case(rng: &mut Rng8) -> Result<f64> {
    let mut shape = dims(rng, 3);
    let axis = rng.gen_range(0..3);
    shape[axis] += 2;
    let start = rng.gen_range(0..shape[axis] - 1);
    let end = rng.gen_range(start + 1..=shape[axis]);
    let x = any(rng, &shape);
    grad_check(|_, v| weighted(v.slice(axis, start, end)?), &x, EPS)
}

fn expand_case(rng: &mut Rng8) -> Result<f64> {
    let target: Vec<usize> = dims(rng, 3).iter().map(|d| d + 1).collect();
    let shape: Vec<usize> = target
        .iter()
        .map(|&d| if rng.gen::<bool>() { 1 } else { d })
        .collect();
    let x = any(rng, &shape);
    grad_check(|_, v| weighted(v.expand(&target)?), &x, EPS)
}

/// `detach(x) * c + x`: only the second path carries gradient, and the
/// numeric check sees both, so `c` must multiply a constant copy.
fn detach_case(rng: &mut Rng8) -> Result<f64> {
    let shape = dims(rng, 2);
    let x = any(rng, &shape);
    let err = grad_check(
        |t, v| {
            let d = v.detach()?;
            let g = t.backward(weighted(d)?)?.wrt(v);
            // the detached branch must contribute nothing
            if g.data().iter().any(|&x| x != 0.0) {
                return Err(crate::error::Error::Invalid("detach leaked a gradient".into()));
            }
            weighted(v.powf(2.0)?)
        },
        &x,
        EPS,
    )?;
    Ok(err)
}

// --- layers --------------------------------------------------------------

/// Initialized parameters moved off the init point (zero biases, unit
/// gammas), where dead units and zero vectors make losses non-smooth.
fn generic_params(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    let mut store: ParamStore<f64> = init_params(specs, seed);
    let mut rng = Rng8::seed_from_u64(seed ^ 0x6a09_e667);
    let names: Vec<String> = store.iter().filter(|(_, p)| p.trainable).map(|(k, _)| k.clone()).collect();
    for name in names {
        let v = store.get(&name).expect("listed above");
        let jittered: Vec<f64> = v.data().iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect();
        let v = Tensor::new(v.shape().to_vec(), jittered).expect("same shape");
        store.set(&name, v).expect("same shape");
    }
    store
}

fn layer_check<F>(specs: &[ParamSpec], seed: u64, x: &Tensor<f64>, fwd: F) -> Result<f64>
where
    F: for<'t, 'p> Fn(&Forward<'t, 'p, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let store = generic_params(specs, seed);
    let ep = grad_check_params(
        |tape, s| {
            let f = Forward::new(tape, s, Mode::Train);
            let out = fwd(&f, f.constant(x.clone()))?;
            weighted(out)
        },
        &store,
        EPS,
        Some(MAX_COORDS),
        seed,
    )?
    .max_rel_error;
    let ex = grad_check(
        |tape, v| {
            let f = Forward::new(tape, &store, Mode::Train);
            weighted(fwd(&f, v)?)
        },
        x,
        EPS,
    )?;
    Ok(ep.max(ex))
}

fn dense_case(rng: &mut Rng8) -> Result<f64> {
    let d = dims(rng, 3);
    let layer = Dense::new("d", d[1], d[2]);
    let x = any(rng, &[d[0], d[1]]);
    layer_check(&layer.specs(), rng.gen(), &x, |f, v| layer.forward(f, v))
}

fn conv1d_layer_case(rng: &mut Rng8) -> Result<f64> {
    let (k, len, stride, pad) = conv_geometry(rng);
    let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let layer = Conv1d::new("c", cin, cout, k, stride, pad);
    let x = any(rng, &[2, cin, len]);
    layer_check(&layer.specs(), rng.gen(), &x, |f, v| layer.forward(f, v))
}

fn conv2d_layer_case(rng: &mut Rng8) -> Result<f64> {
    let (k, h, stride, pad) = conv_geometry(rng);
    let (cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let layer = Conv2d::new("c", cin, cout, k, stride, pad);
    let x = any(rng, &[2, cin, h, h]);
    layer_check(&layer.specs(), rng.gen(), &x, |f, v| layer.forward(f, v))
}

fn batchnorm_case(rng: &mut Rng8) -> Result<f64> {
    let c = rng.gen_range(1..=3);
    let layer = BatchNorm1d::new("bn", c);
    let (b, len) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
    let x = any(rng, &[b, c, len]);
    layer_check(&layer.specs(), rng.gen(), &x, |f, v| layer.forward(f, v))
}

fn cbam_case(rng: &mut Rng8) -> Result<f64> {
    let reduction = rng.gen_range(1..=2);
    let channels = reduction * rng.gen_range(1..=3);
    let layer = Cbam1d::new(
        "cbam",
        CbamConfig {
            channels,
            reduction,
            spatial_kernel: [1, 3, 5][rng.gen_range(0..3)],
        },
    )?;
    let len = rng.gen_range(2..=5);
    let x = any(rng, &[2, channels, len]);
    layer_check(&layer.specs(), rng.gen(), &x, |f, v| layer.forward(f, v))
}

fn residual_case(rng: &mut Rng8) -> Result<f64> {
    let cin = 2 * rng.gen_range(1..=2);
    let (cout, stride) = if rng.gen::<bool>() { (cin, 1) } else { (cin * 2, 2) };
    let layer = ResidualBlock::new("blk", cin, cout, stride, 2, 3)?;
    let (b, len) = (rng.gen_range(2..=3), rng.gen_range(2..=5));
    let x = any(rng, &[b, cin, len]);
    layer_check(&layer.specs(), rng.gen(), &x, |f, v| layer.forward(f, v))
}

fn small_tabular(rng: &mut Rng8) -> TabularConfig {
    TabularConfig {
        input_len: rng.gen_range(2..=5),
        stem_channels: 4,
        stem_len: rng.gen_range(2..=4),
        n_blocks: rng.gen_range(1..=2),
        cbam_reduction: 2,
        cbam_kernel: 3,
    }
}

fn tabular_case(rng: &mut Rng8) -> Result<f64> {
    let cfg = small_tabular(rng);
    let enc = TabularEncoder::new(&cfg)?;
    let x = any(rng, &[3, cfg.input_len]);
    layer_check(&enc.specs(), rng.gen(), &x, |f, v| enc.forward(f, v))
}

fn small_image(rng: &mut Rng8, kind: ImageKind) -> ImageConfig {
    ImageConfig {
        kind,
        height: rng.gen_range(2..=4),
        width: rng.gen_range(2..=4),
        channels: rng.gen_range(1..=2),
        feature_dim: 4,
        hidden: 8,
        cnn_channels: [4, 4],
    }
}

fn image_case(rng: &mut Rng8, kind: ImageKind) -> Result<f64> {
    let cfg = small_image(rng, kind);
    let enc = ImageEncoder::new(&cfg);
    let x = tensor(rng, &[2, cfg.height, cfg.width, cfg.channels], Dom::Positive);
    layer_check(&enc.specs(), rng.gen(), &x, |f, v| enc.forward(f, v))
}

fn projection_case(rng: &mut Rng8) -> Result<f64> {
    let d = dims(rng, 3);
    let head = ProjectionHead::new("p", d[1], d[2] + 1);
    let x = any(rng, &[d[0], d[1]]);
    layer_check(&head.specs(), rng.gen(), &x, |f, v| head.forward(f, v))
}

fn mask_estimator_case(rng: &mut Rng8) -> Result<f64> {
    let d = dims(rng, 3);
    let head = MaskEstimator::new(d[1], d[2]);
    let x = any(rng, &[d[0], d[1]]);
    layer_check(&head.specs(), rng.gen(), &x, |f, v| head.forward(f, v))
}

fn predictor_case(rng: &mut Rng8) -> Result<f64> {
    let d = dims(rng, 3);
    let task = if rng.gen::<bool>() {
        Task::Regression { dim: d[2] }
    } else {
        Task::Classification { classes: d[2] + 1 }
    };
    let head = PredictorHead::new("head", d[1], task);
    let x = any(rng, &[d[0], d[1]]);
    layer_check(&head.specs(), rng.gen(), &x, |f, v| head.forward(f, v))
}

// --- losses --------------------------------------------------------------

fn mask_loss_case(rng: &mut Rng8) -> Result<f64> {
    let shape = [rng.gen_range(1..=4), rng.gen_range(1..=5)];
    let n = shape[0] * shape[1];
    let m = Tensor::new(shape.to_vec(), (0..n).map(|_| f64::from(rng.gen::<bool>() as u8)).collect::<Vec<f64>>())?;
    let m_hat = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.05..0.95)).collect::<Vec<f64>>())?;
    grad_check(|t, v| mask_loss(t.constant(m.clone()), v), &m_hat, EPS)
}

fn reconstruction_case(rng: &mut Rng8) -> Result<f64> {
    let shape = [rng.gen_range(1..=4), rng.gen_range(1..=5)];
    let x = any(rng, &shape);
    let x_hat = any(rng, &shape);
    let a = grad_check(|t, v| reconstruction_loss(t.constant(x.clone()), v), &x_hat, EPS)?;
    let b = grad_check(|t, v| reconstruction_loss(v, t.constant(x_hat.clone())), &x, EPS)?;
    Ok(a.max(b))
}

fn pair(rng: &mut Rng8) -> (Tensor<f64>, Tensor<f64>) {
    let n = [2, 4, 8][rng.gen_range(0..3)];
    let p = rng.gen_range(2..=5);
    (any(rng, &[n, p]), any(rng, &[n, p]))
}

fn info_nce_case(rng: &mut Rng8) -> Result<f64> {
    let (a, b) = pair(rng);
    let tau = rng.gen_range(0.2..1.0);
    let unit = rng.gen::<bool>();
    fn unit_rows(v: Var<'_, f64>, on: bool) -> Result<Var<'_, f64>> {
        if on {
            v.l2_normalize(1, 1e-12)
        } else {
            Ok(v)
        }
    }
    let ea = grad_check(|t, v| info_nce(unit_rows(v, unit)?, unit_rows(t.constant(b.clone()), unit)?, tau), &a, EPS)?;
    let eb = grad_check(|t, v| info_nce(unit_rows(t.constant(a.clone()), unit)?, unit_rows(v, unit)?, tau), &b, EPS)?;
    Ok(ea.max(eb))
}

fn clip_case(rng: &mut Rng8) -> Result<f64> {
    let (a, b) = pair(rng);
    let temp = Tensor::scalar(rng.gen_range(-0.5..1.5));
    let ea = grad_check(
        |t, v| clip(v, t.constant(b.clone()), t.constant(temp.clone())),
        &a,
        EPS,
    )?;
    let eb = grad_check(
        |t, v| clip(t.constant(a.clone()), v, t.constant(temp.clone())),
        &b,
        EPS,
    )?;
    let et = grad_check(|t, v| clip(t.constant(a.clone()), t.constant(b.clone()), v), &temp, EPS)?;
    Ok(ea.max(eb).max(et))
}

/// The targets are stop-gradient, so only the predictor outputs are checked.
fn simsiam_case(rng: &mut Rng8) -> Result<f64> {
    let (p_i, p_t) = pair(rng);
    let z_i = any(rng, p_i.shape());
    let z_t = any(rng, p_i.shape());
    fn c<'t>(t: &'t Tape<f64>, x: &Tensor<f64>) -> Var<'t, f64> {
        t.constant(x.clone())
    }
    let ea = grad_check(|t, v| simsiam(v, c(t, &p_t), c(t, &z_i), c(t, &z_t)), &p_i, EPS)?;
    let eb = grad_check(|t, v| simsiam(c(t, &p_i), v, c(t, &z_i), c(t, &z_t)), &p_t, EPS)?;
    Ok(ea.max(eb))
}

fn barlow_case(rng: &mut Rng8) -> Result<f64> {
    let n = rng.gen_range(3..=8);
    let p = rng.gen_range(2..=4);
    let a = any(rng, &[n, p]);
    let b = any(rng, &[n, p]);
    let lambda = rng.gen_range(1e-3..0.5);
    let ea = grad_check(|t, v| barlow_twins(v, t.constant(b.clone()), lambda), &a, EPS)?;
    let eb = grad_check(|t, v| barlow_twins(t.constant(a.clone()), v, lambda), &b, EPS)?;
    Ok(ea.max(eb))
}

fn regression_loss(rng: &mut Rng8, kind: DownstreamLoss) -> Result<f64> {
    let shape = [rng.gen_range(1..=4), rng.gen_range(1..=4)];
    let pred = any(rng, &shape);
    // residuals kept away from the kinks of l1 (0) and huber (+-1)
    let resid = tensor(rng, &shape, Dom::AwayFromOne);
    let y = Tensor::new(
        shape.to_vec(),
        pred.data().iter().zip(resid.data()).map(|(p, r)| p - r).collect::<Vec<f64>>(),
    )?;
    grad_check(|_, v| downstream_loss(kind, v, Target::Regression(&y), None), &pred, EPS)
}

fn class_loss(rng: &mut Rng8, kind: DownstreamLoss) -> Result<f64> {
    let n = rng.gen_range(1..=6);
    let k = rng.gen_range(2..=4);
    let logits = tensor(rng, &[n, k], Dom::Any).map(|v| v * 2.0);
    let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let weights = match kind {
        DownstreamLoss::BalancedCe => Some(balanced_class_weights(&y, k)?),
        _ => None,
    };
    grad_check(
        |_, v| downstream_loss(kind, v, Target::Classes(&y), weights.as_deref()),
        &logits,
        EPS,
    )
}

fn uncertainty_case(rng: &mut Rng8) -> Result<f64> {
    let s = Tensor::from_f64(vec![2], &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])?;
    let l = Tensor::from_f64(vec![2], &[rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0)])?;
    fn split(v: Var<'_, f64>) -> Result<(Var<'_, f64>, Var<'_, f64>)> {
        Ok((v.slice(0, 0, 1)?.sum_all()?, v.slice(0, 1, 2)?.sum_all()?))
    }
    let es = grad_check(
        |t, v| {
            let (s_c, s_m) = split(v)?;
            let (l_c, l_m) = split(t.constant(l.clone()))?;
            combine_multitask(l_c, l_m, MultiTaskWeights::Uncertainty { s_c, s_m })
        },
        &s,
        EPS,
    )?;
    let el = grad_check(
        |t, v| {
            let (s_c, s_m) = split(t.constant(s.clone()))?;
            let (l_c, l_m) = split(v)?;
            combine_multitask(l_c, l_m, MultiTaskWeights::Uncertainty { s_c, s_m })
        },
        &l,
        EPS,
    )?;
    let et = grad_check(
        |t, v| uncertainty_term(t.constant(Tensor::scalar(l.data()[0])), v),
        &Tensor::scalar(s.data()[0]),
        EPS,
    )?;
    Ok(es.max(el).max(et))
}

fn fixed_weighting_case(rng: &mut Rng8) -> Result<f64> {
    let l = Tensor::from_f64(vec![2], &[rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0)])?;
    let (lc, lm) = (rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0));
    grad_check(
        |_, v| {
            let l_c = v.slice(0, 0, 1)?.sum_all()?;
            let l_m = v.slice(0, 1, 2)?.sum_all()?;
            combine_multitask(l_c, l_m, MultiTaskWeights::Fixed { lambda_c: lc, lambda_m: lm })
        },
        &l,
        EPS,
    )
}

// --- composed ------------------------------------------------------------

fn downstream_case(rng: &mut Rng8) -> Result<f64> {
    let cfg = small_tabular(rng);
    let n = 4;
    let (task, kind) = if rng.gen::<bool>() {
        (Task::Regression { dim: 2 }, DownstreamLoss::Mse)
    } else {
        (Task::Classification { classes: 3 }, DownstreamLoss::Ce)
    };
    let model = DownstreamModel::new(&cfg, task)?;
    let store = generic_params(&model.specs(), rng.gen());
    let x = any(rng, &[n, cfg.input_len]);
    let y = any(rng, &[n, 2]);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let report = grad_check_params(
        |tape, s| {
            let f = Forward::new(tape, s, Mode::Train);
            let pred = model.forward(&f, f.constant(x.clone()))?;
            let target = match task {
                Task::Regression { .. } => Target::Regression(&y),
                Task::Classification { .. } => Target::Classes(&labels),
            };
            downstream_loss(kind, pred, target, None)
        },
        &store,
        EPS,
        Some(MAX_COORDS),
        rng.gen(),
    )?;
    Ok(report.max_rel_error)
}

/// The full pre-training loss through every encoder and head. SimSiam is
/// left out: its stop-gradient makes the numeric derivative differ by
/// design.
fn objective_case(rng: &mut Rng8) -> Result<f64> {
    let mut cfg = RunConfig::default();
    cfg.model.tabular = small_tabular(rng);
    let kind = if rng.gen::<bool>() { ImageKind::Mlp } else { ImageKind::SmallCnn };
    cfg.model.image = small_image(rng, kind);
    cfg.model.projection_dim = 3;
    cfg.pretrain.contrastive =
        [ContrastiveKind::InfoNce, ContrastiveKind::Clip, ContrastiveKind::BarlowTwins][rng.gen_range(0..3)];
    cfg.pretrain.multitask = if rng.gen::<bool>() {
        MultiTaskMode::Uncertainty
    } else {
        MultiTaskMode::Fixed
    };
    let model = PretrainModel::new(&cfg.model.encoder())?;
    let b = 6;
    let l = cfg.model.tabular.input_len;
    let img = &cfg.model.image;
    let x = any(rng, &[b, l]);
    let mask = Tensor::new(vec![b, l], (0..b * l).map(|_| f64::from(rng.gen::<bool>() as u8)).collect::<Vec<f64>>())?;
    let noise = any(rng, &[b, l]);
    let x_tilde = Tensor::new(
        vec![b, l],
        (0..b * l)
            .map(|i| if mask.data()[i] == 1.0 { noise.data()[i] } else { x.data()[i] })
            .collect::<Vec<f64>>(),
    )?;
    let batch = PretrainBatch {
        x,
        x_tilde,
        mask,
        images: Some(tensor(rng, &[b, img.height, img.width, img.channels], Dom::Positive)),
    };
    let objective = |tape: &Tape<f64>, s: &ParamStore<f64>| -> Result<f64> {
        let f = Forward::new(tape, s, Mode::Train);
        pretrain_objective(&cfg, Strategy::MtCmtm, &model, &f, &batch)?.total.item()
    };
    // tiny random nets occasionally give a constant embedding dimension,
    // which barlow twins rejects; redraw until the start point is usable
    let mut store = generic_params(&model.specs(), rng.gen());
    for _ in 0..20 {
        if objective(&Tape::new(), &store).is_ok() {
            break;
        }
        store = generic_params(&model.specs(), rng.gen());
    }
    for name in UNCERTAINTY_PARAMS {
        store.set(name, Tensor::scalar(rng.gen_range(-0.5..0.5)))?;
    }
    let report = grad_check_params(
        |tape, s| {
            let f = Forward::new(tape, s, Mode::Train);
            Ok(pretrain_objective(&cfg, Strategy::MtCmtm, &model, &f, &batch)?.total)
        },
        &store,
        EPS,
        Some(MAX_COORDS),
        rng.gen(),
    )?;
    Ok(report.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_once() {
        let report = run_suite(7, 1).unwrap();
        assert_eq!(report.results.len(), cases().len());
        assert!(report.passed(), "{:?}", report.failures());
    }

    #[test]
    fn case_names_are_unique() {
        let mut names: Vec<&str> = cases().iter().map(|c| c.name).collect();
        names.sort_unstable();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
