use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DataError, Dataset};

/// Unit-variance Gaussian blobs, `per_class` rows per class, rows grouped by
/// class.
///
/// Centers sit on a `sep`-spaced integer lattice (class `c` gets a seeded
/// lattice code), so any two centers are at least `sep` standard deviations
/// apart. A seeded offset shifts the whole lattice.
pub fn synth_generate(
    classes: usize,
    per_class: usize,
    dim: usize,
    sep: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(DataError::InvalidArgument("classes, per_class and dim must be >= 1".into()));
    }
    if !(sep > 0.0 && sep.is_finite()) {
        return Err(DataError::InvalidArgument(format!("separation {sep} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Smallest lattice side m with m^dim >= classes.
    let mut side = 1usize;
    while (side as f64).powi(dim.min(64) as i32) < classes as f64 {
        side += 1;
    }
    let mut codes: Vec<usize> = (0..classes).collect();
    codes.shuffle(&mut rng);
    let offset: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let centers: Vec<Vec<f64>> = codes
        .iter()
        .map(|&code| {
            let mut rest = code;
            (0..dim)
                .map(|j| {
                    let digit = if side > 1 { rest % side } else { 0 };
                    rest = if side > 1 { rest / side } else { 0 };
                    offset[j] + sep * digit as f64
                })
                .collect()
        })
        .collect();

    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            features.extend(center.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    Dataset::new(features, dim, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::split;
    use crate::nn::{accuracy_score, fit, init_mlp, Hyperparams};

    /// Class means of the training rows, then nearest-mean prediction.
    fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
        let c = train.class_count();
        let d = train.dim();
        let mut sums = vec![vec![0.0; d]; c];
        let mut counts = vec![0usize; c];
        for i in 0..train.len() {
            let l = train.labels()[i];
            counts[l] += 1;
            for j in 0..d {
                sums[l][j] += train.row(i)[j];
            }
        }
        let means: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| s.iter().map(|v| v / n.max(1) as f64).collect())
            .collect();
        let correct = (0..test.len())
            .filter(|&i| {
                let x = test.row(i);
                let best = (0..c)
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(&means[a]).map(|(u, v)| (u - v).powi(2)).sum();
                        let db: f64 = x.iter().zip(&means[b]).map(|(u, v)| (u - v).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == test.labels()[i]
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_generate(3, 10, 4, 5.0, 1), synth_generate(3, 10, 4, 5.0, 1));
        assert_ne!(synth_generate(3, 10, 4, 5.0, 1), synth_generate(3, 10, 4, 5.0, 2));
    }

    #[test]
    fn centers_respect_separation() {
        for (classes, dim) in [(6, 2), (6, 8), (5, 1), (9, 3)] {
            // Large per-class count so sample means sit near the centers.
            let ds = synth_generate(classes, 2000, dim, 4.0, 3).unwrap();
            let means: Vec<Vec<f64>> = (0..classes)
                .map(|c| {
                    let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == c).collect();
                    (0..dim)
                        .map(|j| rows.iter().map(|&i| ds.row(i)[j]).sum::<f64>() / rows.len() as f64)
                        .collect()
                })
                .collect();
            for a in 0..classes {
                for b in a + 1..classes {
                    let dist: f64 =
                        means[a].iter().zip(&means[b]).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
                    assert!(dist > 4.0 - 0.2, "{classes}x{dim}: classes {a},{b} at {dist}");
                }
            }
        }
    }

    #[test]
    fn well_separated_blobs_are_learnable() {
        let ds = synth_generate(2, 200, 4, 8.0, 5).unwrap();
        let (train, test) = split(&ds, 0.8, 5).unwrap();
        assert!(nearest_centroid_accuracy(&train, &test) >= 0.99);
        let hp = Hyperparams {
            layer_sizes: vec![4, 16, 2],
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
            seed: 5,
        };
        let out = fit(&init_mlp(&hp).unwrap(), &train, &hp).unwrap();
        assert!(accuracy_score(&out.weights, &test).unwrap() >= 0.99);
    }

    #[test]
    fn overlapping_blobs_sit_at_chance() {
        let ds = synth_generate(4, 500, 3, 1e-9, 8).unwrap();
        let (train, test) = split(&ds, 0.8, 8).unwrap();
        let acc = nearest_centroid_accuracy(&train, &test);
        assert!((acc - 0.25).abs() <= 0.05, "{acc}");
    }
}
