//! Masked tabular modeling: empirical marginals, Bernoulli masks, feature
//! corruption and the pretext losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_MASK_PROB: f64 = 0.3;

/// Observed values of every training column, kept sorted with multiplicity.
/// Sampling picks a stored value uniformly, which is a draw from the
/// column's empirical distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMarginals {
    columns: Vec<Vec<f64>>,
}

impl EmpiricalMarginals {
    /// Fits from training rows. Every row must have the same length.
    pub fn fit<R: AsRef<[f64]>>(train_rows: &[R]) -> Result<Self> {
        let first = train_rows
            .first()
            .ok_or_else(|| Error::Data("cannot fit marginals on an empty matrix".into()))?;
        let l = first.as_ref().len();
        if l == 0 {
            return Err(Error::Data("cannot fit marginals on zero columns".into()));
        }
        let mut columns = vec![Vec::with_capacity(train_rows.len()); l];
        for (i, row) in train_rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != l {
                return Err(Error::Data(format!("row {i} has {} values, expected {l}", row.len())));
            }
            for (col, &v) in columns.iter_mut().zip(row) {
                if !v.is_finite() {
                    return Err(Error::Data(format!("non-finite value in row {i}")));
                }
                col.push(v);
            }
        }
        for col in &mut columns {
            col.sort_by(f64::total_cmp);
        }
        Ok(EmpiricalMarginals { columns })
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Sorted observed values of column `j`, with repeats.
    pub fn values(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    /// Relative frequency of `v` in column `j`.
    pub fn probability(&self, j: usize, v: f64) -> f64 {
        let col = &self.columns[j];
        let lo = col.partition_point(|&x| x < v);
        let hi = col.partition_point(|&x| x <= v);
        (hi - lo) as f64 / col.len() as f64
    }

    pub fn contains(&self, j: usize, v: f64) -> bool {
        self.columns[j].binary_search_by(|x| x.total_cmp(&v)).is_ok()
    }

    pub fn sample(&self, j: usize, rng: &mut impl Rng) -> f64 {
        let col = &self.columns[j];
        col[rng.gen_range(0..col.len())]
    }
}

fn check_prob(p_m: f64) -> Result<()> {
    if p_m > 0.0 && p_m < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            op: "sample_mask",
            detail: format!("p_m must lie in (0, 1), got {p_m}"),
        })
    }
}

/// Independent Bernoulli(`p_m`) entries as 0.0 / 1.0.
pub fn sample_mask(len: usize, p_m: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    check_prob(p_m)?;
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < p_m { 1.0 } else { 0.0 })
        .collect())
}

/// `m * x_bar + (1 - m) * x` where `x_bar[j]` is drawn from the marginal of
/// column `j`. A draw is made for every coordinate, masked or not, so the
/// random stream does not depend on the mask.
pub fn corrupt(x: &[f64], m: &[f64], marginals: &EmpiricalMarginals, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if x.len() != m.len() || x.len() != marginals.len() {
        return Err(Error::shape(
            "corrupt",
            format!("x {}, m {}, marginals {}", x.len(), m.len(), marginals.len()),
        ));
    }
    Ok(x.iter()
        .zip(m)
        .enumerate()
        .map(|(j, (&xj, &mj))| {
            let draw = marginals.sample(j, rng);
            if mj != 0.0 {
                draw
            } else {
                xj
            }
        })
        .collect())
}

/// Generator for one sample in one epoch. Distinct `(seed, epoch, index)`
/// triples give independent streams.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"mtm-mask");
    ChaCha8Rng::from_seed(key)
}

/// A mask together with what is needed to regenerate it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub m: Vec<f64>,
    pub corrupted: Vec<f64>,
    pub p_m: f64,
    pub seed: u64,
    pub epoch: u64,
    pub index: u64,
}

impl MaskRecord {
    pub fn generate(
        x: &[f64],
        marginals: &EmpiricalMarginals,
        p_m: f64,
        seed: u64,
        epoch: u64,
        index: u64,
    ) -> Result<Self> {
        let mut rng = sample_rng(seed, epoch, index);
        let m = sample_mask(x.len(), p_m, &mut rng)?;
        let corrupted = corrupt(x, &m, marginals, &mut rng)?;
        Ok(MaskRecord {
            m,
            corrupted,
            p_m,
            seed,
            epoch,
            index,
        })
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean over the batch of `(1/L) sum_j |m_j - m_hat_j|`.
pub fn mask_loss<'t, T: Scalar>(m: Var<'t, T>, m_hat: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("mask_loss", &m, &m_hat)?;
    m.sub(m_hat)?.abs()?.mean_all()
}

/// Mean squared error over batch and features.
pub fn reconstruction_loss<'t, T: Scalar>(x: Var<'t, T>, x_hat: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("reconstruction_loss", &x, &x_hat)?;
    x_hat.sub(x)?.powf(2.0)?.mean_all()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_multiplicity() {
        let m = EmpiricalMarginals::fit(&[[1.0], [1.0], [2.0]]).unwrap();
        assert!((m.probability(0, 1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.probability(0, 2.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.probability(0, 3.0), 0.0);
    }

    #[test]
    fn constant_column_always_sampled() {
        let m = EmpiricalMarginals::fit(&[[4.5], [4.5], [4.5]]).unwrap();
        let mut rng = sample_rng(1, 0, 0);
        assert!((0..100).all(|_| m.sample(0, &mut rng) == 4.5));
    }

    #[test]
    fn empty_fit_fails() {
        let rows: Vec<Vec<f64>> = vec![];
        assert!(EmpiricalMarginals::fit(&rows).is_err());
    }

    #[test]
    fn mask_prob_range() {
        let mut rng = sample_rng(0, 0, 0);
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(sample_mask(3, p, &mut rng).is_err());
        }
        let m = sample_mask(50, 0.5, &mut rng).unwrap();
        assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn zero_mask_is_identity() {
        let marg = EmpiricalMarginals::fit(&[[0.0, 1.0], [5.0, 6.0]]).unwrap();
        let mut rng = sample_rng(3, 1, 2);
        let x = [0.123, -7.5];
        assert_eq!(corrupt(&x, &[0.0, 0.0], &marg, &mut rng).unwrap(), x.to_vec());
    }

    #[test]
    fn record_is_regenerable() {
        let marg = EmpiricalMarginals::fit(&[[0.0, 1.0, 2.0], [5.0, 6.0, 7.0]]).unwrap();
        let a = MaskRecord::generate(&[1.0, 2.0, 3.0], &marg, 0.5, 9, 2, 11).unwrap();
        let b = MaskRecord::generate(&[1.0, 2.0, 3.0], &marg, 0.5, 9, 2, 11).unwrap();
        assert_eq!(a, b);
    }
}
