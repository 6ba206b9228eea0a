//! Deterministic train/validation/test assignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    /// Dropped by training-set subsampling.
    Unused,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitSpec {
    Ratios { train: f64, val: f64, test: f64 },
    /// Fold `fold` is the validation split; there is no separate test split.
    Kfold { k: usize, fold: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratios {
            train: 0.64,
            val: 0.16,
            test: 0.20,
        }
    }
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Tags for `n` rows: a seeded shuffle followed by contiguous partitioning.
/// Ratio sizes are `round(train * n)` and `round(val * n)`, test takes the
/// rest.
pub fn split(n: usize, spec: SplitSpec, seed: u64) -> Result<Vec<SplitTag>> {
    let perm = permutation(n, seed);
    let mut tags = vec![SplitTag::Train; n];
    match spec {
        SplitSpec::Ratios { train, val, test } => {
            if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r))
                || (train + val + test - 1.0).abs() > 1e-9
            {
                return Err(Error::Config(format!(
                    "split ratios ({train}, {val}, {test}) must be in [0, 1] and sum to 1"
                )));
            }
            let n_train = (train * n as f64).round() as usize;
            let n_val = (val * n as f64).round() as usize;
            if n_train == 0 || n_val == 0 || n_train + n_val >= n {
                return Err(Error::Data(format!(
                    "ratios ({train}, {val}, {test}) leave an empty split of {n} rows"
                )));
            }
            for &i in &perm[n_train..n_train + n_val] {
                tags[i] = SplitTag::Val;
            }
            for &i in &perm[n_train + n_val..] {
                tags[i] = SplitTag::Test;
            }
        }
        SplitSpec::Kfold { k, fold } => {
            if k < 2 || fold >= k {
                return Err(Error::Config(format!("kfold needs k >= 2 and fold < k, got k={k} fold={fold}")));
            }
            let (lo, hi) = (fold * n / k, (fold + 1) * n / k);
            if lo == hi || hi - lo == n {
                return Err(Error::Data(format!("fold {fold} of {k} over {n} rows is empty")));
            }
            for &i in &perm[lo..hi] {
                tags[i] = SplitTag::Val;
            }
        }
    }
    Ok(tags)
}

/// Keeps a seeded `fraction` of the training rows (at least one) and marks
/// the others unused.
pub fn subsample_train(tags: &mut [SplitTag], fraction: f64, seed: u64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0, 1], got {fraction}")));
    }
    let train: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == SplitTag::Train).collect();
    let keep = ((fraction * train.len() as f64).round() as usize).max(1);
    let perm = permutation(train.len(), seed ^ 0x5eed_f00d);
    for &p in &perm[keep..] {
        tags[train[p]] = SplitTag::Unused;
    }
    Ok(())
}

pub fn indices(tags: &[SplitTag], tag: SplitTag) -> Vec<usize> {
    (0..tags.len()).filter(|&i| tags[i] == tag).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_sizes() {
        let tags = split(100, SplitSpec::default(), 3).unwrap();
        let count = |t| tags.iter().filter(|&&x| x == t).count();
        assert_eq!((count(SplitTag::Train), count(SplitTag::Val), count(SplitTag::Test)), (64, 16, 20));
        assert_eq!(tags, split(100, SplitSpec::default(), 3).unwrap());
    }

    #[test]
    fn folds_partition() {
        let mut seen = vec![0; 23];
        for fold in 0..5 {
            let tags = split(23, SplitSpec::Kfold { k: 5, fold }, 1).unwrap();
            for i in indices(&tags, SplitTag::Val) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn bad_specs() {
        let r = |train, val, test| SplitSpec::Ratios { train, val, test };
        assert!(split(100, r(0.5, 0.5, 0.5), 0).is_err());
        assert!(split(3, r(0.9, 0.05, 0.05), 0).is_err());
        assert!(split(10, SplitSpec::Kfold { k: 1, fold: 0 }, 0).is_err());
    }

    #[test]
    fn subsample_keeps_fraction() {
        let mut tags = split(100, SplitSpec::default(), 0).unwrap();
        subsample_train(&mut tags, 0.25, 0).unwrap();
        assert_eq!(indices(&tags, SplitTag::Train).len(), 16);
        assert_eq!(indices(&tags, SplitTag::Test).len(), 20);
    }
}
