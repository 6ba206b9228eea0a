//! Contrastive objectives, downstream task losses and multi-task weighting.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const BARLOW_LAMBDA_OFF: f64 = 5e-3;
pub const BARLOW_STD_EPS: f64 = 1e-9;
pub const HUBER_DELTA: f64 = 1.0;
pub const FOCAL_GAMMA: f64 = 2.0;

fn pair_shapes<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<usize> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    if sa[0] < 2 {
        return Err(Error::Invalid(format!("{op} needs at least 2 pairs, got {}", sa[0])));
    }
    Ok(sa[0])
}

/// Symmetric cross-entropy over a logit matrix whose diagonal holds the
/// positive pairs.
fn symmetric_ce<'t, T: Scalar>(s: Var<'t, T>, diag: Var<'t, T>) -> Result<Var<'t, T>> {
    let rows = s.log_sum_exp(1)?.mean_all()?;
    let cols = s.log_sum_exp(0)?.mean_all()?;
    rows.add(cols)?.scale(0.5)?.sub(diag.mean_all()?)
}

/// InfoNCE between paired image and tabular embeddings `[N, P]`; row k of
/// each is a positive pair, the other rows of the opposite modality are
/// negatives.
pub fn info_nce<'t, T: Scalar>(z_i: Var<'t, T>, z_t: Var<'t, T>, tau: f64) -> Result<Var<'t, T>> {
    pair_shapes("info_nce", &z_i, &z_t)?;
    if !(tau > 0.0) {
        return Err(Error::Domain {
            op: "info_nce",
            detail: format!("temperature must be > 0, got {tau}"),
        });
    }
    let s = z_i.matmul(z_t.transpose(0, 1)?)?.scale(1.0 / tau)?;
    let diag = z_i.mul(z_t)?.sum(1)?.scale(1.0 / tau)?;
    symmetric_ce(s, diag)
}

/// InfoNCE with a learnable log inverse temperature `t` (scale `exp(t)`).
pub fn clip<'t, T: Scalar>(z_i: Var<'t, T>, z_t: Var<'t, T>, t: Var<'t, T>) -> Result<Var<'t, T>> {
    pair_shapes("clip", &z_i, &z_t)?;
    let scale = t.exp()?;
    let s = z_i.matmul(z_t.transpose(0, 1)?)?.mul(scale)?;
    let diag = z_i.mul(z_t)?.sum(1)?.mul(scale)?;
    symmetric_ce(s, diag)
}

fn row_cosine<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    a.l2_normalize(1, 1e-12)?
        .mul(b.l2_normalize(1, 1e-12)?)?
        .sum(1)?
        .mean_all()
}

/// Negative symmetric cosine between predictions and stop-gradient targets.
pub fn simsiam<'t, T: Scalar>(
    p_i: Var<'t, T>,
    p_t: Var<'t, T>,
    z_i: Var<'t, T>,
    z_t: Var<'t, T>,
) -> Result<Var<'t, T>> {
    pair_shapes("simsiam", &p_i, &z_t)?;
    pair_shapes("simsiam", &p_t, &z_i)?;
    let a = row_cosine(p_i, z_t.detach()?)?;
    let b = row_cosine(p_t, z_i.detach()?)?;
    a.add(b)?.scale(-0.5)
}

fn batch_standardize<'t, T: Scalar>(z: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = z.shape()[0];
    let centered = z.sub(z.mean(0)?)?;
    let var = centered.powf(2.0)?.mean(0)?;
    let std = var.sqrt()?;
    if let Some((d, s)) = std
        .value()
        .data()
        .iter()
        .enumerate()
        .find(|(_, s)| s.as_f64() < BARLOW_STD_EPS)
    {
        return Err(Error::Domain {
            op: "barlow_twins",
            detail: format!("dimension {d} has std {s} over a batch of {n}"),
        });
    }
    centered.div(std)
}

/// `sum_d (C_dd - 1)^2 + lambda_off sum_{d != d'} C_dd'^2` over the
/// cross-correlation of the batch-standardized embeddings.
pub fn barlow_twins<'t, T: Scalar>(z_a: Var<'t, T>, z_b: Var<'t, T>, lambda_off: f64) -> Result<Var<'t, T>> {
    let n = pair_shapes("barlow_twins", &z_a, &z_b)?;
    let p = z_a.shape()[1];
    let tape = z_a.tape();
    let a = batch_standardize(z_a)?;
    let b = batch_standardize(z_b)?;
    let c = a.transpose(0, 1)?.matmul(b)?.scale(1.0 / n as f64)?;
    let eye = tape.constant(Tensor::eye(p));
    let mut w = vec![T::from_f64(lambda_off); p * p];
    for d in 0..p {
        w[d * p + d] = T::one();
    }
    let w = tape.constant(Tensor::new(vec![p, p], w)?);
    c.sub(eye)?.powf(2.0)?.mul(w)?.sum_all()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveKind {
    InfoNce,
    Clip,
    Simsiam,
    BarlowTwins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownstreamLoss {
    Mse,
    L1,
    Huber,
    Ce,
    BalancedCe,
    Focal,
}

impl DownstreamLoss {
    pub fn is_classification(self) -> bool {
        matches!(self, DownstreamLoss::Ce | DownstreamLoss::BalancedCe | DownstreamLoss::Focal)
    }
}

/// Downstream supervision for a batch.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a, T> {
    /// `[batch, dim]`
    Regression(&'a Tensor<T>),
    Classes(&'a [usize]),
}

/// Inverse training-frequency class weights, normalized to mean 1 over the
/// classes that occur. Absent classes get weight 0.
pub fn balanced_class_weights(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::Data(format!("class id {y} outside 0..{classes}")))? += 1;
    }
    let inv: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
        .collect();
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present == 0 {
        return Err(Error::Data("no labels to weight".into()));
    }
    let mean = inv.iter().sum::<f64>() / present as f64;
    Ok(inv.iter().map(|w| w / mean).collect())
}

/// Per-sample cross-entropy `[batch]` from logits `[batch, K]`.
fn per_sample_ce<'t, T: Scalar>(logits: Var<'t, T>, y: &[usize]) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != y.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {shape:?} vs {} labels", y.len()),
        ));
    }
    let k = shape[1];
    let mut onehot = vec![T::zero(); y.len() * k];
    for (i, &c) in y.iter().enumerate() {
        if c >= k {
            return Err(Error::Data(format!("class id {c} outside 0..{k}")));
        }
        onehot[i * k + c] = T::one();
    }
    let onehot = logits.tape().constant(Tensor::new(vec![y.len(), k], onehot)?);
    let picked = logits.mul(onehot)?.sum(1)?;
    logits.log_sum_exp(1)?.sub(picked)
}

pub fn downstream_loss<'t, T: Scalar>(
    kind: DownstreamLoss,
    pred: Var<'t, T>,
    target: Target<'_, T>,
    class_weights: Option<&[f64]>,
) -> Result<Var<'t, T>> {
    match (kind, target) {
        (DownstreamLoss::Mse | DownstreamLoss::L1 | DownstreamLoss::Huber, Target::Regression(y)) => {
            if pred.shape() != y.shape() {
                return Err(Error::shape(
                    "downstream_loss",
                    format!("pred {:?} vs target {:?}", pred.shape(), y.shape()),
                ));
            }
            let d = pred.sub(pred.tape().constant(y.clone()))?;
            match kind {
                DownstreamLoss::Mse => d.powf(2.0)?.mean_all(),
                DownstreamLoss::L1 => d.abs()?.mean_all(),
                _ => d.huber(HUBER_DELTA)?.mean_all(),
            }
        }
        (DownstreamLoss::Ce, Target::Classes(y)) => per_sample_ce(pred, y)?.mean_all(),
        (DownstreamLoss::BalancedCe, Target::Classes(y)) => {
            let k = pred.shape().get(1).copied().unwrap_or(0);
            let owned;
            let w = match class_weights {
                Some(w) => w,
                None => {
                    owned = balanced_class_weights(y, k)?;
                    &owned
                }
            };
            if w.len() != k {
                return Err(Error::shape("balanced_ce", format!("{} weights for {k} classes", w.len())));
            }
            let ws: Vec<T> = y.iter().map(|&c| lit(w[c.min(k - 1)])).collect();
            let ce = per_sample_ce(pred, y)?;
            let ws = pred.tape().constant(Tensor::new(vec![y.len()], ws)?);
            ce.mul(ws)?.mean_all()
        }
        (DownstreamLoss::Focal, Target::Classes(y)) => {
            let ce = per_sample_ce(pred, y)?;
            let p_true = ce.neg()?.exp()?;
            let modulator = p_true.neg()?.add_scalar(1.0)?.relu()?.powf(FOCAL_GAMMA)?;
            modulator.mul(ce)?.mean_all()
        }
        (kind, _) => Err(Error::Invalid(format!(
            "loss {kind:?} does not match the target type"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiTaskMode {
    Fixed,
    #[default]
    Uncertainty,
}

/// How the contrastive and mask losses are combined in one step.
#[derive(Debug, Clone, Copy)]
pub enum MultiTaskWeights<'t, T: Scalar> {
    Fixed { lambda_c: f64, lambda_m: f64 },
    /// Learnable log-variances.
    Uncertainty { s_c: Var<'t, T>, s_m: Var<'t, T> },
}

fn check_finite<T: Scalar>(op: &'static str, v: &Var<'_, T>) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// `exp(-s) * loss + s`
pub fn uncertainty_term<'t, T: Scalar>(loss: Var<'t, T>, s: Var<'t, T>) -> Result<Var<'t, T>> {
    s.neg()?.exp()?.mul(loss)?.add(s)
}

pub fn combine_multitask<'t, T: Scalar>(
    l_c: Var<'t, T>,
    l_m: Var<'t, T>,
    weights: MultiTaskWeights<'t, T>,
) -> Result<Var<'t, T>> {
    check_finite("combine_multitask(L_c)", &l_c)?;
    check_finite("combine_multitask(L_m)", &l_m)?;
    match weights {
        MultiTaskWeights::Fixed { lambda_c, lambda_m } => {
            if !(lambda_c > 0.0 && lambda_m > 0.0) {
                return Err(Error::Config(format!(
                    "fixed multi-task weights must be positive, got ({lambda_c}, {lambda_m})"
                )));
            }
            l_c.scale(lambda_c)?.add(l_m.scale(lambda_m)?)
        }
        MultiTaskWeights::Uncertainty { s_c, s_m } => {
            uncertainty_term(l_c, s_c)?.add(uncertainty_term(l_m, s_m)?)
        }
    }
}
