//! Seeded train/validation/test assignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, ManifestRecord};

/// How many of `n` items each split receives when `before` items of earlier
/// groups were already assigned. Rounding happens on cumulative totals, so
/// group counts add up to the exact global allocation.
pub fn split_counts(fractions: &[f64], before: usize, n: usize) -> Vec<usize> {
    let bound = |total: usize, k: usize| -> usize {
        if k + 1 == fractions.len() {
            return total;
        }
        let cum: f64 = fractions[..=k].iter().sum();
        ((cum * total as f64).round() as usize).min(total)
    };
    let mut counts = Vec::with_capacity(fractions.len());
    let mut prev = 0;
    for k in 0..fractions.len() {
        let c = (bound(before + n, k) - bound(before, k)).clamp(prev, n);
        counts.push(c - prev);
        prev = c;
    }
    counts
}

/// Rewrites each record's `split` tag. Records with a cluster id are split
/// per cluster so every split sees every cluster in proportion.
pub fn split(records: &mut [ManifestRecord], fractions: &[(&str, f64)], seed: u64) -> Result<(), DataError> {
    if fractions.is_empty() {
        return Err(DataError::Split("no splits given".into()));
    }
    let sum: f64 = fractions.iter().map(|f| f.1).sum();
    if fractions.iter().any(|f| !(f.1 >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!("fractions must be nonnegative and sum to 1, got {sum}")));
    }
    let mut groups: BTreeMap<Option<u32>, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.cluster).or_default().push(i);
    }
    let fr: Vec<f64> = fractions.iter().map(|f| f.1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned = 0;
    let mut totals = vec![0usize; fractions.len()];
    let mut tags: Vec<usize> = vec![0; records.len()];
    for members in groups.values_mut() {
        members.sort_by(|&a, &b| records[a].id.cmp(&records[b].id));
        members.shuffle(&mut rng);
        let counts = split_counts(&fr, assigned, members.len());
        let mut at = 0;
        for (k, &c) in counts.iter().enumerate() {
            for &i in &members[at..at + c] {
                tags[i] = k;
            }
            at += c;
            totals[k] += c;
        }
        assigned += members.len();
    }
    if let Some(k) = totals.iter().position(|&t| t == 0) {
        return Err(DataError::Split(format!("split {:?} would be empty", fractions[k].0)));
    }
    for (r, k) in records.iter_mut().zip(tags) {
        r.split = fractions[k].0.to_string();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{RgbBlobRef, SegBlobRef};
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn records(n: usize, clusters: Option<u32>) -> Vec<ManifestRecord> {
        (0..n)
            .map(|i| ManifestRecord {
                id: format!("r{i:05}"),
                lat: 0.0,
                lon: 0.0,
                rgb_blob: RgbBlobRef {
                    file: "a".into(),
                    offset: 0,
                    rows: 2,
                    cols: 2,
                },
                seg_blob: SegBlobRef {
                    file: "b".into(),
                    offset: 0,
                    h: 1,
                    w: 1,
                },
                split: String::new(),
                cluster: clusters.map(|c| i as u32 % c),
            })
            .collect()
    }

    fn tally(r: &[ManifestRecord]) -> HashMap<String, usize> {
        let mut m = HashMap::new();
        for x in r {
            *m.entry(x.split.clone()).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn default_fractions() {
        let mut r = records(1000, None);
        split(&mut r, &[("train", 0.99), ("val", 0.01)], 0).unwrap();
        let t = tally(&r);
        assert_eq!((t["train"], t["val"]), (990, 10));
    }

    #[test]
    fn stratified_by_cluster() {
        let mut r = records(10_000, Some(50));
        split(&mut r, &[("train", 0.8), ("val", 0.1), ("test", 0.1)], 5).unwrap();
        for c in 0..50 {
            let n = r.iter().filter(|x| x.cluster == Some(c) && x.split == "test").count();
            assert_eq!(n, 20);
        }
        let mut again = records(10_000, Some(50));
        split(&mut again, &[("train", 0.8), ("val", 0.1), ("test", 0.1)], 5).unwrap();
        assert_eq!(again, r);
        let mut other = records(10_000, Some(50));
        split(&mut other, &[("train", 0.8), ("val", 0.1), ("test", 0.1)], 6).unwrap();
        assert_ne!(other, r);
    }

    #[test]
    fn small_groups_still_fill_small_splits() {
        let mut r = records(300, Some(100));
        split(&mut r, &[("train", 0.99), ("val", 0.01)], 1).unwrap();
        assert_eq!(tally(&r)["val"], 3);
    }

    #[test]
    fn rejects_degenerate() {
        let mut r = records(10, None);
        assert!(matches!(split(&mut r, &[("train", 0.99), ("val", 0.01)], 0), Err(DataError::Split(_))));
        assert!(matches!(split(&mut r, &[("train", 0.5), ("val", 0.4)], 0), Err(DataError::Split(_))));
        assert!(matches!(split(&mut r, &[], 0), Err(DataError::Split(_))));
    }

    proptest! {
        #[test]
        fn counts_partition_each_group(a in 0.0f64..1.0, b in 0.0f64..1.0, before in 0usize..1000, n in 0usize..500) {
            let fr = [a * (1.0 - b), a * b, 1.0 - a];
            let c = split_counts(&fr, before, n);
            prop_assert_eq!(c.iter().sum::<usize>(), n);
        }

        #[test]
        fn union_and_intersection(n in 3usize..400, clusters in proptest::option::of(1u32..20), seed in any::<u64>()) {
            let mut r = records(n, clusters);
            let fr = [("train", 0.6), ("val", 0.2), ("test", 0.2)];
            if split(&mut r, &fr, seed).is_ok() {
                let t = tally(&r);
                prop_assert_eq!(t.values().sum::<usize>(), n);
                prop_assert!(r.iter().all(|x| ["train", "val", "test"].contains(&x.split.as_str())));
                // Exact global allocation from cumulative rounding.
                prop_assert_eq!(t["train"], (0.6 * n as f64).round() as usize);
            }
        }
    }
}
