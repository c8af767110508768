use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;

use super::{DataError, Dataset};

/// Seeded shuffle, then the first `floor(n * ratio)` rows train and the
/// rest test.
pub fn split(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::InvalidArgument(format!("split ratio {ratio} not in (0, 1)")));
    }
    let n = ds.len();
    if n < 2 {
        return Err(DataError::TooSmall(format!("cannot split {n} rows")));
    }
    let cut = (n as f64 * ratio).floor() as usize;
    if cut == 0 || cut == n {
        return Err(DataError::TooSmall(format!(
            "ratio {ratio} leaves one side of a {n}-row split empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((ds.subset(&order[..cut]), ds.subset(&order[cut..])))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionMode {
    Iid,
    /// Per-class device shares drawn from a symmetric Dirichlet(alpha).
    LabelSkew { alpha: f64 },
}

/// Splits `ds` into `k` disjoint, exhaustive device datasets.
///
/// `Iid` shuffles and deals rows round-robin. `LabelSkew` walks the classes
/// in index order; for each class it shuffles that class's rows, draws
/// Dirichlet shares (normalized Gamma(alpha, 1) variates, one per device)
/// from the same stream, and hands device `i` the rows between cumulative
/// cut points `floor(n_c * (p_0 + .. + p_{i-1}))` and
/// `floor(n_c * (p_0 + .. + p_i))`, the last device taking the remainder.
pub fn partition(
    ds: &Dataset,
    k: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<Vec<Dataset>, DataError> {
    if k == 0 {
        return Err(DataError::InvalidArgument("need at least one partition".into()));
    }
    if k > ds.len() {
        return Err(DataError::TooSmall(format!("{k} partitions of {} rows", ds.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); k];
    match mode {
        PartitionMode::Iid => {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut rng);
            for (j, r) in order.into_iter().enumerate() {
                rows[j % k].push(r);
            }
        }
        PartitionMode::LabelSkew { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(DataError::InvalidArgument(format!("alpha {alpha} must be positive")));
            }
            let hist = ds.class_histogram();
            if let Some(c) = hist.iter().position(|&h| h == 0) {
                return Err(DataError::TooSmall(format!("class {c} has no rows")));
            }
            for c in 0..ds.class_count() {
                let mut members: Vec<usize> =
                    (0..ds.len()).filter(|&i| ds.labels()[i] == c).collect();
                members.shuffle(&mut rng);
                let shares = dirichlet(k, alpha, &mut rng);
                let n_c = members.len();
                let mut start = 0;
                let mut cum = 0.0;
                for (i, share) in shares.iter().enumerate() {
                    cum += share;
                    let end = if i + 1 == k { n_c } else { ((cum * n_c as f64).floor() as usize).min(n_c) };
                    let end = end.max(start);
                    rows[i].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
        }
    }
    Ok(rows.iter().map(|r| ds.subset(r)).collect())
}

/// Symmetric Dirichlet sample via normalized Gamma variates.
pub(crate) fn dirichlet<R: Rng>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| rng.sample(gamma)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        let mut shares = vec![0.0; k];
        shares[0] = 1.0;
        shares
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn numbered(n: usize, classes: usize) -> Dataset {
        let features = (0..n).map(|i| i as f64).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::new(features, 1, labels, classes).unwrap()
    }

    fn sorted_ids(parts: &[&Dataset]) -> Vec<u64> {
        let mut ids: Vec<u64> =
            parts.iter().flat_map(|p| p.features().iter().map(|&v| v as u64)).collect();
        ids.sort_unstable();
        ids
    }

    #[test]
    fn eighty_twenty() {
        let (train, test) = split(&numbered(10, 2), 0.8, 3).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let (again, _) = split(&numbered(10, 2), 0.8, 3).unwrap();
        assert_eq!(train, again);
    }

    #[test]
    fn split_rejects_tiny_inputs() {
        assert!(split(&numbered(1, 1), 0.5, 0).is_err());
        assert!(split(&numbered(10, 2), 1.0, 0).is_err());
        assert!(split(&numbered(3, 1), 0.1, 0).is_err());
    }

    #[test]
    fn iid_single_partition_is_shuffled_source() {
        let ds = numbered(20, 2);
        let parts = partition(&ds, 1, PartitionMode::Iid, 9).unwrap();
        let mut order: Vec<usize> = (0..20).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(parts[0], ds.subset(&order));
    }

    #[test]
    fn iid_sizes_are_even() {
        let parts = partition(&numbered(1000, 5), 5, PartitionMode::Iid, 1).unwrap();
        assert!(parts.iter().all(|p| p.len() == 200));
    }

    #[test]
    fn too_many_partitions() {
        assert!(partition(&numbered(3, 1), 4, PartitionMode::Iid, 1).is_err());
    }

    #[test]
    fn label_skew_matches_dirichlet_replay() {
        let ds = numbered(300, 3);
        let parts = partition(&ds, 3, PartitionMode::LabelSkew { alpha: 0.5 }, 17).unwrap();

        // Replay the stream independently: per class, a shuffle of n_c items
        // then k Gamma draws, cut by floored cumulative shares.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let gamma = Gamma::new(0.5, 1.0).unwrap();
        let mut expected = vec![vec![0usize; 3]; 3];
        for c in 0..3 {
            let mut dummy: Vec<usize> = (0..100).collect();
            dummy.shuffle(&mut rng);
            let g: Vec<f64> = (0..3).map(|_| rng.sample(gamma)).collect();
            let total: f64 = g.iter().sum();
            let c1 = (g[0] / total * 100.0).floor() as usize;
            let c2 = (((g[0] + g[1]) / total) * 100.0).floor() as usize;
            expected[0][c] = c1;
            expected[1][c] = c2 - c1;
            expected[2][c] = 100 - c2;
        }
        for (i, p) in parts.iter().enumerate() {
            assert_eq!(p.class_histogram(), expected[i], "device {i}");
        }
        assert_eq!(sorted_ids(&parts.iter().collect::<Vec<_>>()), (0..300).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn splits_and_partitions_are_exhaustive(
            n in 2usize..200,
            k in 1usize..8,
            ratio in 0.05f64..0.95,
            seed in any::<u64>(),
            skew in any::<bool>(),
        ) {
            let ds = numbered(n, 3.min(n));
            if let Ok((a, b)) = split(&ds, ratio, seed) {
                prop_assert_eq!(sorted_ids(&[&a, &b]), (0..n as u64).collect::<Vec<_>>());
            }
            let mode = if skew { PartitionMode::LabelSkew { alpha: 0.3 } } else { PartitionMode::Iid };
            if k <= n {
                let parts = partition(&ds, k, mode, seed).unwrap();
                prop_assert_eq!(parts.len(), k);
                prop_assert_eq!(sorted_ids(&parts.iter().collect::<Vec<_>>()), (0..n as u64).collect::<Vec<_>>());
            }
        }
    }
}
