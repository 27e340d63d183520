use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Assignment of image ids to `k` cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

/// Splits `ids` into `k` folds: sort, shuffle with a seeded ChaCha stream,
/// then deal round-robin. The plan depends only on the id set and the seed,
/// so every preprocessing and resolution variant of a dataset shares it.
pub fn make_folds<S: AsRef<str>>(ids: &[S], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be at least 2, got {k}")));
    }
    let mut sorted: Vec<&str> = ids.iter().map(|s| s.as_ref()).collect();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateId(w[0].to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let assignments = sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldPlan { seed, k, assignments })
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Ids in `fold`, sorted.
    pub fn test_ids(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Ids outside `fold`, sorted.
    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.assignments.keys().map(String::as_str).collect()
    }

    /// The same assignment restricted to a subset of ids (for example a
    /// subtlety category). Folds keep their indices.
    pub fn restrict<'a>(&self, keep: impl IntoIterator<Item = &'a str>) -> FoldPlan {
        let keep: BTreeSet<&str> = keep.into_iter().collect();
        FoldPlan {
            seed: self.seed,
            k: self.k,
            assignments: self
                .assignments
                .iter()
                .filter(|(id, _)| keep.contains(id.as_str()))
                .map(|(id, &f)| (id.clone(), f))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("IMG{i:04}")).collect()
    }

    #[test]
    fn hundred_forty_ids_give_ten_folds_of_fourteen() {
        let plan = make_folds(&ids(140), 10, 7).unwrap();
        assert_eq!(plan.sizes(), vec![14; 10]);
    }

    #[test]
    fn ten_ids_one_per_fold() {
        let plan = make_folds(&ids(10), 10, 1).unwrap();
        assert_eq!(plan.sizes(), vec![1; 10]);
    }

    #[test]
    fn same_seed_same_plan_regardless_of_input_order() {
        let a = make_folds(&ids(57), 10, 99).unwrap();
        let mut reversed = ids(57);
        reversed.reverse();
        let b = make_folds(&reversed, 10, 99).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        let c = make_folds(&ids(57), 10, 100).unwrap();
        assert_ne!(a.assignments, c.assignments);
    }

    #[test]
    fn duplicates_rejected() {
        let err = make_folds(&["a", "b", "a"], 2, 0).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(ref id) if id == "a"));
    }

    proptest! {
        #[test]
        fn partition_and_balance(n in 0usize..300, k in 2usize..15, seed in any::<u64>()) {
            let all = ids(n);
            let plan = make_folds(&all, k, seed).unwrap();
            prop_assert_eq!(plan.assignments.len(), n);
            let sizes = plan.sizes();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            for f in 0..k {
                let test: BTreeSet<_> = plan.test_ids(f).into_iter().collect();
                let train: BTreeSet<_> = plan.train_ids(f).into_iter().collect();
                prop_assert!(test.is_disjoint(&train));
                prop_assert_eq!(test.len() + train.len(), n);
            }
        }
    }
}
