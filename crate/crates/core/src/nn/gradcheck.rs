use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{loss64, loss_and_gradient64, Params64};
use super::{init_mlp, Hyperparams, ModelWeights, NnError};

const STEP: f64 = 1e-4;
/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged by absolute error.
const REL_FLOOR: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared, per layer.
    pub checked: Vec<usize>,
    /// Coordinates re-drawn because the step crossed a ReLU kink.
    pub skipped_kinks: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn param_mut(p: &mut Params64, layer: usize, idx: usize) -> &mut f64 {
    let l = &mut p.layers[layer];
    let n_w = l.w.len();
    if idx < n_w {
        &mut l.w[idx]
    } else {
        &mut l.b[idx - n_w]
    }
}

fn relu_pattern(p: &Params64, x: &[f64], n: usize) -> Vec<bool> {
    let mut pattern = Vec::new();
    let mut a = x.to_vec();
    for layer in &p.layers[..p.layers.len() - 1] {
        let mut z = vec![0.0; n * layer.rows];
        for i in 0..n {
            for r in 0..layer.rows {
                let wr = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                let xi = &a[i * layer.cols..(i + 1) * layer.cols];
                z[i * layer.rows + r] =
                    layer.b[r] + wr.iter().zip(xi).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        pattern.extend(z.iter().map(|&v| v > 0.0));
        a = z.into_iter().map(|v| v.max(0.0)).collect();
    }
    pattern
}

/// Compares the analytic gradient against central differences on
/// `coords_per_layer` random coordinates of every layer, all in `f64`.
///
/// `corrupt` scales one analytic entry per layer by 1.01; it exists so the
/// check itself can be shown to fail.
pub fn gradient_check(
    w: &ModelWeights,
    features: &[f64],
    cols: usize,
    labels: &[usize],
    coords_per_layer: usize,
    seed: u64,
    corrupt: bool,
) -> Result<GradcheckReport, NnError> {
    // Shape validation and the public analytic path.
    super::gradient(w, features, cols, labels)?;
    let base = Params64::from_weights(w);
    let n = labels.len();
    let (_, mut analytic) = loss_and_gradient64(&base, features, labels);
    if corrupt {
        for g in &mut analytic.layers {
            g.weights[0] = g.weights[0] * 1.01 + 1e-3;
        }
    }
    let base_pattern = relu_pattern(&base, features, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport { max_rel_error: 0.0, checked: Vec::new(), skipped_kinks: 0 };

    for k in 0..base.layers.len() {
        let n_w = base.layers[k].w.len();
        let total = n_w + base.layers[k].b.len();
        let mut done = 0;
        let mut attempts = 0;
        // Corrupted runs always probe the corrupted coordinate first.
        let mut forced = corrupt.then_some(0usize);
        while done < coords_per_layer && attempts < coords_per_layer * 50 {
            attempts += 1;
            let idx = forced.take().unwrap_or_else(|| rng.random_range(0..total));
            let mut plus = base.clone();
            let mut minus = base.clone();
            *param_mut(&mut plus, k, idx) += STEP;
            *param_mut(&mut minus, k, idx) -= STEP;
            if relu_pattern(&plus, features, n) != base_pattern
                || relu_pattern(&minus, features, n) != base_pattern
            {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (loss64(&plus, features, labels) - loss64(&minus, features, labels))
                / (2.0 * STEP);
            let g = &analytic.layers[k];
            let exact = if idx < n_w { g.weights[idx] } else { g.biases[idx - n_w] };
            let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_rel_error = report.max_rel_error.max(rel);
            done += 1;
        }
        report.checked.push(done);
    }
    Ok(report)
}

/// The standard suite: four architectures including the (64, 32) hidden
/// layout, 20 coordinates per layer on a fixed random batch.
pub fn run_gradcheck_suite(corrupt: bool) -> Result<Vec<(Vec<usize>, GradcheckReport)>, NnError> {
    let archs: [&[usize]; 4] = [&[5, 3], &[6, 10, 4], &[12, 64, 32, 6], &[8, 16, 12, 8, 5]];
    let mut out = Vec::new();
    for (i, arch) in archs.iter().enumerate() {
        let hp = Hyperparams {
            layer_sizes: arch.to_vec(),
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.0,
            seed: 100 + i as u64,
        };
        let mut w = init_mlp(&hp)?;
        let mut rng = ChaCha8Rng::seed_from_u64(200 + i as u64);
        // Non-zero biases so bias gradients are exercised away from init.
        w = ModelWeights {
            layers: w
                .layers
                .into_iter()
                .map(|mut l| {
                    l.biases.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
                    l
                })
                .collect(),
        };
        let rows = 8;
        let x: Vec<f64> = (0..rows * arch[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let classes = *arch.last().unwrap();
        let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let report = gradient_check(&w, &x, arch[0], &y, 20, 300 + i as u64, corrupt)?;
        out.push((arch.to_vec(), report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for (arch, rep) in run_gradcheck_suite(false).unwrap() {
            assert!(rep.passed(), "{arch:?}: {rep:?}");
            assert!(rep.checked.iter().all(|&c| c == 20), "{arch:?}: {rep:?}");
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let results = run_gradcheck_suite(true).unwrap();
        assert!(results.iter().all(|(_, rep)| !rep.passed()));
    }
}
