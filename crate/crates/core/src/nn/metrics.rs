use super::{forward, ModelWeights, NnError};
use crate::datasets::Dataset;

/// Index of the largest entry; ties resolve to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class for every row of `data`.
pub fn predict(w: &ModelWeights, data: &Dataset) -> Result<Vec<usize>, NnError> {
    Ok(forward(w, data.features(), data.dim())?.iter().map(|r| argmax(r)).collect())
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy_score(w: &ModelWeights, test: &Dataset) -> Result<f64, NnError> {
    if test.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let predicted = predict(w, test)?;
    let correct = predicted.iter().zip(test.labels()).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy plus macro-averaged precision, recall and F1.
///
/// Classes that neither occur in the labels nor get predicted are left out
/// of the macro average; an undefined per-class ratio counts as 0.
pub fn classification_report(w: &ModelWeights, test: &Dataset) -> Result<ClassificationReport, NnError> {
    if test.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let predicted = predict(w, test)?;
    Ok(report_from_predictions(&predicted, test.labels(), test.class_count().max(w.output_size())))
}

pub(crate) fn report_from_predictions(
    predicted: &[usize],
    labels: &[usize],
    classes: usize,
) -> ClassificationReport {
    let mut tp = vec![0usize; classes];
    let mut pred_count = vec![0usize; classes];
    let mut true_count = vec![0usize; classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        pred_count[p] += 1;
        true_count[y] += 1;
        if p == y {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut p_sum, mut r_sum, mut f_sum, mut k) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..classes {
        if true_count[c] == 0 && pred_count[c] == 0 {
            continue;
        }
        let p = ratio(tp[c], pred_count[c]);
        let r = ratio(tp[c], true_count[c]);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        p_sum += p;
        r_sum += r;
        f_sum += f;
        k += 1;
    }
    let k = k.max(1) as f64;
    let correct = tp.iter().sum::<usize>();
    ClassificationReport {
        accuracy: ratio(correct, labels.len()),
        precision: p_sum / k,
        recall: r_sum / k,
        f1: f_sum / k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_mlp, Hyperparams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.2, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }

    #[test]
    fn uniform_model_scores_class_zero_frequency() {
        let hp = Hyperparams {
            layer_sizes: vec![2, 5],
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.0,
            seed: 0,
        };
        let w = init_mlp(&hp).unwrap().zeros_like();
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let ds = Dataset::new(vec![0.3; 100], 2, labels, 5).unwrap();
        assert_eq!(accuracy_score(&w, &ds).unwrap(), 0.2);
    }

    #[test]
    fn perfect_predictions_score_one() {
        // Single layer with one-hot weights reproduces the one-hot inputs.
        let hp = Hyperparams {
            layer_sizes: vec![3, 3],
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.0,
            seed: 0,
        };
        let mut w = init_mlp(&hp).unwrap().zeros_like();
        for i in 0..3 {
            w.layers[0].weights[i * 3 + i] = 10.0;
        }
        let features = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let ds = Dataset::new(features, 3, vec![0, 1, 2], 3).unwrap();
        assert_eq!(accuracy_score(&w, &ds).unwrap(), 1.0);
        let rep = classification_report(&w, &ds).unwrap();
        assert_eq!((rep.precision, rep.recall, rep.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn accuracy_matches_row_by_row_count() {
        let hp = Hyperparams {
            layer_sizes: vec![4, 7, 3],
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.0,
            seed: 21,
        };
        let w = init_mlp(&hp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x: Vec<f64> = (0..400).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<usize> = (0..100).map(|_| rng.random_range(0..3)).collect();
        let ds = Dataset::new(x, 4, y, 3).unwrap();

        // Oracle: evaluate each row on its own and take the argmax by hand.
        let mut correct = 0;
        for i in 0..ds.len() {
            let probs = forward(&w, ds.row(i), 4).unwrap().remove(0);
            let mut best = 0;
            for c in 1..probs.len() {
                if probs[c] > probs[best] {
                    best = c;
                }
            }
            correct += usize::from(best == ds.labels()[i]);
        }
        assert_eq!(accuracy_score(&w, &ds).unwrap(), correct as f64 / 100.0);
    }

    #[test]
    fn empty_test_set_is_rejected() {
        let hp = Hyperparams {
            layer_sizes: vec![2, 2],
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.0,
            seed: 0,
        };
        let w = init_mlp(&hp).unwrap();
        let ds = Dataset::new(vec![], 2, vec![], 2).unwrap();
        assert_eq!(accuracy_score(&w, &ds), Err(NnError::EmptyDataset));
    }

    #[test]
    fn macro_scores_by_hand() {
        // class 0: tp 1, fp 1, fn 1 -> p 0.5 r 0.5; class 1: tp 1, fp 1, fn 0 -> p 0.5 r 1;
        // class 2: tp 0, fp 0, fn 1 -> p 0 r 0.
        let rep = report_from_predictions(&[0, 1, 0, 1], &[0, 1, 2, 0], 3);
        assert!((rep.precision - (0.5 + 0.5 + 0.0) / 3.0).abs() < 1e-12);
        assert!((rep.recall - (0.5 + 1.0 + 0.0) / 3.0).abs() < 1e-12);
        let f1 = (0.5 + 2.0 * 0.5 / 1.5 + 0.0) / 3.0;
        assert!((rep.f1 - f1).abs() < 1e-12);
        assert_eq!(rep.accuracy, 0.5);
    }
}
