use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, LabelTable, NUM_MODES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub test_fraction: f64,
    pub seed: u64,
    /// Preserve class shares in both sides (requires labels).
    #[serde(default)]
    pub stratified: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            test_fraction: 0.2,
            seed: 42,
            stratified: false,
        }
    }
}

/// Result of a train/test split. Test records are only exposed masked; their
/// labels live in `truth`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test_queries: Dataset,
    pub truth: LabelTable,
}

fn test_size(n: usize, fraction: f64) -> usize {
    // tolerate representation error such as 10 * 0.3 = 2.9999999999999996
    (n as f64 * fraction + 1e-9).floor() as usize
}

/// Largest-remainder allocation of `total` slots across class sizes.
fn stratified_quotas(sizes: &[usize; NUM_MODES], total: usize) -> [usize; NUM_MODES] {
    let n: usize = sizes.iter().sum();
    let mut quotas = [0usize; NUM_MODES];
    let mut remainders = Vec::with_capacity(NUM_MODES);
    for (i, &s) in sizes.iter().enumerate() {
        let exact = total as f64 * s as f64 / n as f64;
        quotas[i] = (exact.floor() as usize).min(s);
        remainders.push((exact - exact.floor(), i));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - quotas.iter().sum::<usize>();
    for &(_, i) in remainders.iter().cycle().take(NUM_MODES * 2) {
        if left == 0 {
            break;
        }
        if quotas[i] < sizes[i] {
            quotas[i] += 1;
            left -= 1;
        }
    }
    quotas
}

/// Random train/test partition with `floor(n * test_fraction)` test records.
///
/// Deterministic for a given seed; both sides keep the dataset's record order.
pub fn split(dataset: &Dataset, options: &SplitOptions) -> Result<Split, DataError> {
    let n = dataset.len();
    let n_test = test_size(n, options.test_fraction);
    if !(options.test_fraction > 0.0 && options.test_fraction < 1.0) || n_test == 0 || n_test >= n
    {
        return Err(DataError::DegenerateSplit {
            n,
            fraction: options.test_fraction,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut is_test = vec![false; n];
    if options.stratified {
        dataset.require_labels()?;
        let mut groups: [Vec<usize>; NUM_MODES] = Default::default();
        for (i, r) in dataset.records().iter().enumerate() {
            groups[r.mode.expect("checked").index()].push(i);
        }
        let sizes = groups.each_ref().map(Vec::len);
        let quotas = stratified_quotas(&sizes, n_test);
        for (group, quota) in groups.iter_mut().zip(quotas) {
            group.shuffle(&mut rng);
            for &i in &group[..quota] {
                is_test[i] = true;
            }
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
    }

    let (mut train, mut test) = (Vec::with_capacity(n - n_test), Vec::with_capacity(n_test));
    for (r, &t) in dataset.records().iter().zip(&is_test) {
        if t {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    let truth = LabelTable::from_records(&test);
    let test_queries = test.iter().map(|r| r.masked()).collect();
    Ok(Split {
        train: Dataset::new(format!("{}-train", dataset.name), &dataset.source, train)?,
        test_queries: Dataset::new(format!("{}-test", dataset.name), &dataset.source, test_queries)?,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trip_data::{generate_synthetic, Profile};
    use std::collections::HashSet;

    fn opts(fraction: f64, seed: u64) -> SplitOptions {
        SplitOptions {
            test_fraction: fraction,
            seed,
            stratified: false,
        }
    }

    #[test]
    fn paper_scale_split_sizes() {
        let ds = generate_synthetic(2847, Profile::Marginal, 1).unwrap();
        let s = split(&ds, &opts(0.2, 7)).unwrap();
        assert_eq!(s.train.len(), 2278);
        assert_eq!(s.test_queries.len(), 569);
        assert_eq!(s.truth.len(), 569);
    }

    #[test]
    fn split_is_a_partition_with_masked_queries() {
        let ds = generate_synthetic(137, Profile::Marginal, 3).unwrap();
        let s = split(&ds, &opts(0.3, 11)).unwrap();
        assert_eq!(s.train.len() + s.test_queries.len(), ds.len());
        assert!(s.train.ids().is_disjoint(&s.test_queries.ids()));
        assert!(s.test_queries.records().iter().all(|r| r.mode.is_none()));
        for r in s.test_queries.records() {
            let original = ds.records().iter().find(|o| o.record_id == r.record_id).unwrap();
            assert_eq!(s.truth.get(r.record_id), original.mode);
        }
    }

    #[test]
    fn same_seed_same_partition() {
        let ds = generate_synthetic(10, Profile::Marginal, 5).unwrap();
        assert_eq!(split(&ds, &opts(0.2, 1)).unwrap(), split(&ds, &opts(0.2, 1)).unwrap());
    }

    #[test]
    fn different_seeds_change_partitions() {
        let ds = generate_synthetic(10, Profile::Marginal, 5).unwrap();
        let reference: Vec<u64> = {
            let mut v: Vec<_> = split(&ds, &opts(0.2, 1)).unwrap().test_queries.ids().into_iter().collect();
            v.sort();
            v
        };
        let mut distinct = HashSet::new();
        let mut differing = 0;
        for seed in 2..102 {
            let mut ids: Vec<u64> = split(&ds, &opts(0.2, seed)).unwrap().test_queries.ids().into_iter().collect();
            ids.sort();
            if ids != reference {
                differing += 1;
            }
            distinct.insert(ids);
        }
        // 45 possible 2-of-10 test sets; a fixed one recurs ~2 times in 100 draws
        assert!(differing >= 90, "only {differing} of 100 seeds differ");
        assert!(distinct.len() > 20);
    }

    #[test]
    fn degenerate_fractions_rejected() {
        let ds = generate_synthetic(10, Profile::Marginal, 5).unwrap();
        assert!(split(&ds, &opts(0.05, 1)).is_err());
        assert!(split(&ds, &opts(0.0, 1)).is_err());
        assert!(split(&ds, &opts(1.0, 1)).is_err());
    }

    #[test]
    fn stratified_keeps_class_shares() {
        let ds = generate_synthetic(1000, Profile::Marginal, 5).unwrap();
        let s = split(
            &ds,
            &SplitOptions {
                test_fraction: 0.2,
                seed: 3,
                stratified: true,
            },
        )
        .unwrap();
        assert_eq!(s.test_queries.len(), 200);
        let full = ds.class_histogram();
        let mut test = [0usize; NUM_MODES];
        for (_, m) in s.truth.iter() {
            test[m.index()] += 1;
        }
        for i in 0..NUM_MODES {
            let expected = full[i] as f64 * 0.2;
            assert!((test[i] as f64 - expected).abs() <= 1.0, "{test:?} vs {full:?}");
        }
    }

    #[test]
    fn quotas_sum_to_total() {
        assert_eq!(stratified_quotas(&[5, 3, 1, 1], 3).iter().sum::<usize>(), 3);
        assert_eq!(stratified_quotas(&[1271, 1031, 379, 166], 569).iter().sum::<usize>(), 569);
    }
}
