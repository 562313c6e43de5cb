use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Contents of `split.json`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train_val: f64,
    pub test: f64,
    pub val_of_trainval: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train_val: 0.8,
            test: 0.2,
            val_of_trainval: 0.1,
        }
    }
}

pub const MIN_SPLIT_IDS: usize = 10;

/// Integer sizes summing to `n`, by the largest-remainder method.
pub fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    // Largest fractional part first; earlier bucket wins ties.
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Seeded shuffle into disjoint train / val / test lists.
pub fn split_dataset(ids: &[String], ratios: SplitRatios, seed: u64) -> Result<Split> {
    if ids.len() < MIN_SPLIT_IDS {
        return Err(Error::Invalid(format!(
            "need at least {MIN_SPLIT_IDS} ids to split, got {}",
            ids.len()
        )));
    }
    let total = ratios.train_val + ratios.test;
    if ratios.train_val < 0.0 || ratios.test < 0.0 || total <= 0.0 {
        return Err(Error::config("split", "ratios must be nonnegative with a positive sum"));
    }
    if !(0.0..=1.0).contains(&ratios.val_of_trainval) {
        return Err(Error::config("split.val_of_trainval", "must lie in [0, 1]"));
    }
    let tv = ratios.train_val / total;
    let sizes = largest_remainder(
        ids.len(),
        &[
            tv * (1.0 - ratios.val_of_trainval),
            tv * ratios.val_of_trainval,
            ratios.test / total,
        ],
    );
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng_from_seed(seed));
    let test = shuffled.split_off(sizes[0] + sizes[1]);
    let val = shuffled.split_off(sizes[0]);
    Ok(Split {
        train: shuffled,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i:04}")).collect()
    }

    #[test]
    fn default_ratios_on_round_sizes() {
        let s = split_dataset(&ids(100), SplitRatios::default(), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (72, 8, 20));
        let s = split_dataset(&ids(10), SplitRatios::default(), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
    }

    #[test]
    fn seeded_and_rejects_small_inputs() {
        let a = split_dataset(&ids(40), SplitRatios::default(), 5).unwrap();
        assert_eq!(a, split_dataset(&ids(40), SplitRatios::default(), 5).unwrap());
        assert_ne!(a, split_dataset(&ids(40), SplitRatios::default(), 6).unwrap());
        assert!(split_dataset(&ids(9), SplitRatios::default(), 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_and_exhaustive(n in 10usize..400, seed in any::<u64>()) {
            let input = ids(n);
            let s = split_dataset(&input, SplitRatios::default(), seed).unwrap();
            let all: Vec<&String> = s.all_ids().collect();
            prop_assert_eq!(all.len(), n);
            let set: HashSet<&String> = all.into_iter().collect();
            prop_assert_eq!(set.len(), n);
            prop_assert!(input.iter().all(|i| set.contains(i)));
            // Each bucket is within one of its exact quota.
            let q = [0.72 * n as f64, 0.08 * n as f64, 0.2 * n as f64];
            for (len, quota) in [s.train.len(), s.val.len(), s.test.len()].into_iter().zip(q) {
                prop_assert!((len as f64 - quota).abs() < 1.0 + 1e-9);
            }
        }
    }
}
