//! K-fold train/val/test assignment with disjoint test sets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.10,
            test: 0.20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// `(train, val, test)` sizes for `n` samples: test and val are rounded to
/// the nearest integer, train takes the rest.
pub fn split_sizes(n: usize, ratios: SplitRatios) -> (usize, usize, usize) {
    let test = (n as f64 * ratios.test).round() as usize;
    let val = (n as f64 * ratios.val).round() as usize;
    (n - test - val, val, test)
}

/// Assigns every id to train/val/test in each of `k` folds. Test sets are
/// consecutive disjoint slices of one seeded permutation; the remaining ids
/// of a fold are reshuffled (seeded per fold) and split into val and train.
pub fn kfold_split(ids: &[String], k: usize, ratios: SplitRatios, seed: u64) -> Result<Vec<FoldAssignment>> {
    let n = ids.len();
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::Data(format!("{n} samples cannot be split into {k} folds")));
    }
    let sum = ratios.train + ratios.val + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || ratios.train < 0.0 || ratios.val < 0.0 || ratios.test <= 0.0 {
        return Err(Error::Config(format!("split ratios must be non-negative and sum to 1, got {sum}")));
    }
    if k as f64 * ratios.test > 1.0 + 1e-9 {
        return Err(Error::Config(format!(
            "{k} disjoint test sets of fraction {} exceed the dataset",
            ratios.test
        )));
    }
    let (_, val_n, mut test_n) = split_sizes(n, ratios);
    test_n = test_n.min(n / k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = ids.to_vec();
    perm.shuffle(&mut rng);

    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let test: Vec<String> = perm[fold * test_n..(fold + 1) * test_n].to_vec();
        let mut rest: Vec<String> = perm[..fold * test_n]
            .iter()
            .chain(&perm[(fold + 1) * test_n..])
            .cloned()
            .collect();
        let mut frng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 + fold as u64));
        rest.shuffle(&mut frng);
        let val = rest[..val_n.min(rest.len())].to_vec();
        let train = rest[val.len()..].to_vec();
        folds.push(FoldAssignment { fold, train, val, test });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i:04}")).collect()
    }

    #[test]
    fn twenty_samples() {
        let folds = kfold_split(&ids(20), 4, SplitRatios::default(), 42).unwrap();
        assert_eq!(folds.len(), 4);
        for f in &folds {
            assert_eq!((f.train.len(), f.val.len(), f.test.len()), (14, 2, 4));
        }
    }

    #[test]
    fn too_small_or_bad_ratios() {
        assert!(kfold_split(&ids(3), 4, SplitRatios::default(), 0).is_err());
        let r = SplitRatios {
            train: 0.5,
            val: 0.1,
            test: 0.3,
        };
        assert!(kfold_split(&ids(40), 4, r, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn coverage_disjointness_and_sizes(n in 8usize..=500, seed in any::<u64>()) {
            let all = ids(n);
            let r = SplitRatios::default();
            let folds = kfold_split(&all, 4, r, seed).unwrap();
            let mut tests = BTreeSet::new();
            for f in &folds {
                for id in &f.test {
                    prop_assert!(tests.insert(id.clone()), "test sets overlap");
                }
                let mut union: BTreeSet<_> = f.train.iter().cloned().collect();
                let before = union.len();
                union.extend(f.val.iter().cloned());
                union.extend(f.test.iter().cloned());
                prop_assert_eq!(union.len(), before + f.val.len() + f.test.len());
                prop_assert_eq!(union.len(), n);
                prop_assert!((f.train.len() as f64 - 0.7 * n as f64).abs() <= 1.0);
                prop_assert!((f.val.len() as f64 - 0.1 * n as f64).abs() <= 1.0);
                prop_assert!((f.test.len() as f64 - 0.2 * n as f64).abs() <= 1.0);
            }
            prop_assert_eq!(folds, kfold_split(&all, 4, r, seed).unwrap());
        }
    }
}
