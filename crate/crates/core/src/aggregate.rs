//! Uniform model averaging and the average-then-fine-tune update step.

use thiserror::Error;

use crate::datasets::Dataset;
use crate::nn::{fit, FitOutcome, Hyperparams, Layer, ModelWeights, NnError};
use crate::DeviceId;

/// A model as received from one device.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub source: DeviceId,
    pub weights: ModelWeights,
    pub round: u32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error("no models to aggregate")]
    Empty,
    #[error("model from {device} does not match the expected layer shapes")]
    ShapeMismatch { device: DeviceId },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Element-wise arithmetic mean of the bundles' parameters.
///
/// Sums run in `f64` in the given bundle order and are rounded to `f32`
/// once, so a fixed order gives a bit-reproducible result.
pub fn average_weights(bundles: &[ModelBundle]) -> Result<ModelWeights, AggregateError> {
    let first = bundles.first().ok_or(AggregateError::Empty)?;
    if let Some(b) = bundles.iter().find(|b| !b.weights.same_shape(&first.weights)) {
        return Err(AggregateError::ShapeMismatch { device: b.source });
    }
    let count = bundles.len() as f64;
    let layers = first
        .weights
        .layers
        .iter()
        .enumerate()
        .map(|(k, proto)| {
            let mut w = vec![0.0f64; proto.weights.len()];
            let mut b = vec![0.0f64; proto.biases.len()];
            for bundle in bundles {
                let layer = &bundle.weights.layers[k];
                w.iter_mut().zip(&layer.weights).for_each(|(acc, &v)| *acc += v as f64);
                b.iter_mut().zip(&layer.biases).for_each(|(acc, &v)| *acc += v as f64);
            }
            Layer {
                rows: proto.rows,
                cols: proto.cols,
                weights: w.into_iter().map(|s| (s / count) as f32).collect(),
                biases: b.into_iter().map(|s| (s / count) as f32).collect(),
                activation: proto.activation,
            }
        })
        .collect();
    Ok(ModelWeights { layers })
}

/// Installs the average of `bundles` in place of `local` and fine-tunes it
/// on `train`. `local` only fixes the expected architecture; its own
/// parameters do not enter the average.
pub fn update_model(
    local: &ModelWeights,
    bundles: &[ModelBundle],
    train: &Dataset,
    hp: &Hyperparams,
) -> Result<FitOutcome, AggregateError> {
    if let Some(b) = bundles.iter().find(|b| !b.weights.same_shape(local)) {
        return Err(AggregateError::ShapeMismatch { device: b.source });
    }
    let averaged = average_weights(bundles)?;
    Ok(fit(&averaged, train, hp)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{partition, split, synth_generate, PartitionMode};
    use crate::nn::{accuracy_score, init_mlp};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hp(sizes: &[usize], seed: u64) -> Hyperparams {
        Hyperparams {
            layer_sizes: sizes.to_vec(),
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.01,
            seed,
        }
    }

    fn random_model(sizes: &[usize], seed: u64) -> ModelWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_mlp(&hp(sizes, seed)).unwrap().map_params(|_| rng.random_range(-3.0f32..3.0))
    }

    fn bundle(id: u32, weights: ModelWeights) -> ModelBundle {
        ModelBundle { source: DeviceId(id), weights, round: 0 }
    }

    #[test]
    fn identical_models_average_to_themselves() {
        let w = random_model(&[5, 7, 3], 1);
        let bundles: Vec<_> = (0..6).map(|i| bundle(i, w.clone())).collect();
        assert_eq!(average_weights(&bundles).unwrap(), w);
    }

    #[test]
    fn opposite_models_cancel() {
        let w = random_model(&[5, 7, 3], 2);
        let neg = w.map_params(|v| -v);
        let avg = average_weights(&[bundle(1, w), bundle(2, neg)]).unwrap();
        assert!(avg.flat_params().all(|v| v == 0.0));
    }

    #[test]
    fn matches_f64_per_coordinate_mean() {
        let models: Vec<_> = (0..5).map(|i| random_model(&[4, 6, 3], 10 + i)).collect();
        let bundles: Vec<_> = models.iter().cloned().enumerate().map(|(i, w)| bundle(i as u32, w)).collect();
        let avg = average_weights(&bundles).unwrap();
        let flats: Vec<Vec<f32>> = models.iter().map(|m| m.flat_params().collect()).collect();
        for (j, got) in avg.flat_params().enumerate() {
            let oracle: f64 = flats.iter().map(|f| f[j] as f64).sum::<f64>() / 5.0;
            assert!((got as f64 - oracle).abs() <= 1e-6 * oracle.abs().max(1e-30) + 1e-12);
        }
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert_eq!(average_weights(&[]), Err(AggregateError::Empty));
        let a = bundle(1, random_model(&[4, 3], 1));
        let b = bundle(7, random_model(&[4, 2], 1));
        assert_eq!(average_weights(&[a, b]), Err(AggregateError::ShapeMismatch { device: DeviceId(7) }));
    }

    #[test]
    fn update_with_copies_of_local_and_zero_rate_returns_local() {
        let local = random_model(&[3, 4, 2], 5);
        let bundles: Vec<_> = (0..3).map(|i| bundle(i, local.clone())).collect();
        let ds = synth_generate(2, 10, 3, 4.0, 1).unwrap();
        let mut h = hp(&[3, 4, 2], 1);
        h.learning_rate = 0.0;
        assert_eq!(update_model(&local, &bundles, &ds, &h).unwrap().weights, local);
    }

    #[test]
    fn single_bundle_update_is_plain_fit() {
        let local = random_model(&[3, 4, 2], 5);
        let other = random_model(&[3, 4, 2], 6);
        let ds = synth_generate(2, 10, 3, 4.0, 1).unwrap();
        let h = hp(&[3, 4, 2], 2);
        let via_update = update_model(&local, &[bundle(3, other.clone())], &ds, &h).unwrap();
        let direct = fit(&other, &ds, &h).unwrap();
        assert_eq!(via_update.weights, direct.weights);
    }

    #[test]
    fn fine_tuning_does_not_hurt_the_raw_average() {
        let sizes = [4, 16, 4];
        let mut wins = 0;
        for seed in 0..20u64 {
            let ds = synth_generate(4, 150, 4, 8.0, seed).unwrap();
            let parts = partition(&ds, 4, PartitionMode::Iid, seed).unwrap();
            let common = init_mlp(&hp(&sizes, seed)).unwrap();
            let bundles: Vec<_> = (1..4)
                .map(|i| bundle(i as u32, fit(&common, &parts[i], &hp(&sizes, seed + i as u64)).unwrap().weights))
                .collect();
            let (train, test) = split(&parts[0], 0.8, seed).unwrap();
            let raw = accuracy_score(&average_weights(&bundles).unwrap(), &test).unwrap();
            let tuned = update_model(&common, &bundles, &train, &hp(&sizes, seed)).unwrap();
            if accuracy_score(&tuned.weights, &test).unwrap() >= raw {
                wins += 1;
            }
        }
        assert!(wins >= 18, "{wins}/20");
    }

    proptest! {
        #[test]
        fn bundle_order_barely_matters(seed in any::<u64>(), n in 2usize..6) {
            let models: Vec<_> = (0..n).map(|i| random_model(&[3, 5, 4], seed.wrapping_add(i as u64))).collect();
            let fwd: Vec<_> = models.iter().cloned().enumerate().map(|(i, w)| bundle(i as u32, w)).collect();
            let mut rev = fwd.clone();
            rev.reverse();
            let a = average_weights(&fwd).unwrap();
            let b = average_weights(&rev).unwrap();
            prop_assert_eq!(a.shape(), b.shape());
            let probe = synth_generate(4, 8, 3, 2.0, seed).unwrap();
            prop_assert_eq!(crate::nn::predict(&a, &probe).unwrap(), crate::nn::predict(&b, &probe).unwrap());
            for (x, y) in a.flat_params().zip(b.flat_params()) {
                prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(f32::MIN_POSITIVE));
            }
        }
    }
}
