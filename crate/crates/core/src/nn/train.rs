use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Activation, Hyperparams, Layer, ModelWeights, NnError};
use crate::datasets::Dataset;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Gradient of one layer, congruent with [`Layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub weights: ModelWeights,
    /// Mean cross-entropy seen during each epoch.
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Dense64 {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// `f64` working copy of a model.
#[derive(Debug, Clone)]
pub(crate) struct Params64 {
    pub layers: Vec<Dense64>,
}

impl Params64 {
    pub fn from_weights(w: &ModelWeights) -> Self {
        Self {
            layers: w
                .layers
                .iter()
                .map(|l| Dense64 {
                    rows: l.rows,
                    cols: l.cols,
                    w: l.weights.iter().map(|&v| v as f64).collect(),
                    b: l.biases.iter().map(|&v| v as f64).collect(),
                })
                .collect(),
        }
    }

    pub fn to_weights(&self) -> ModelWeights {
        let n = self.layers.len();
        ModelWeights {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(k, l)| Layer {
                    rows: l.rows,
                    cols: l.cols,
                    weights: l.w.iter().map(|&v| v as f32).collect(),
                    biases: l.b.iter().map(|&v| v as f32).collect(),
                    activation: if k + 1 == n { Activation::Softmax } else { Activation::Relu },
                })
                .collect(),
        }
    }

    fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }
}

/// Pre-activations and activations of every layer for one batch.
struct Cache {
    /// `acts[0]` is the input, `acts[k]` the output of layer `k - 1`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn run_forward(p: &Params64, x: &[f64], n: usize) -> Cache {
    let last = p.layers.len() - 1;
    let mut acts = Vec::with_capacity(p.layers.len() + 1);
    let mut pre = Vec::with_capacity(p.layers.len());
    acts.push(x.to_vec());
    for (k, layer) in p.layers.iter().enumerate() {
        let input = &acts[k];
        let mut z = vec![0.0; n * layer.rows];
        for i in 0..n {
            let xi = &input[i * layer.cols..(i + 1) * layer.cols];
            let zi = &mut z[i * layer.rows..(i + 1) * layer.rows];
            for (r, out) in zi.iter_mut().enumerate() {
                let wr = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                *out = layer.b[r] + wr.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let a = if k == last {
            let mut a = z.clone();
            for row in a.chunks_mut(layer.rows) {
                softmax_in_place(row);
            }
            a
        } else {
            z.iter().map(|&v| v.max(0.0)).collect()
        };
        pre.push(z);
        acts.push(a);
    }
    Cache { acts, pre }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean cross-entropy from output logits, via log-sum-exp.
fn cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = &logits[i * classes..(i + 1) * classes];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - z[y];
    }
    total / n as f64
}

pub(crate) fn loss64(p: &Params64, x: &[f64], labels: &[usize]) -> f64 {
    let cache = run_forward(p, x, labels.len());
    cross_entropy(cache.pre.last().unwrap(), p.output_size(), labels)
}

/// Loss and analytic gradient of the mean cross-entropy.
pub(crate) fn loss_and_gradient64(p: &Params64, x: &[f64], labels: &[usize]) -> (f64, Gradients) {
    let n = labels.len();
    let cache = run_forward(p, x, n);
    let classes = p.output_size();
    let loss = cross_entropy(cache.pre.last().unwrap(), classes, labels);

    let mut grads: Vec<LayerGradient> = p
        .layers
        .iter()
        .map(|l| LayerGradient { weights: vec![0.0; l.rows * l.cols], biases: vec![0.0; l.rows] })
        .collect();

    let inv_n = 1.0 / n as f64;
    let mut dz = cache.acts.last().unwrap().clone();
    for (i, &y) in labels.iter().enumerate() {
        dz[i * classes + y] -= 1.0;
    }
    dz.iter_mut().for_each(|v| *v *= inv_n);

    for k in (0..p.layers.len()).rev() {
        let layer = &p.layers[k];
        let input = &cache.acts[k];
        let g = &mut grads[k];
        for i in 0..n {
            let dzi = &dz[i * layer.rows..(i + 1) * layer.rows];
            let xi = &input[i * layer.cols..(i + 1) * layer.cols];
            for (r, &d) in dzi.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.biases[r] += d;
                let gw = &mut g.weights[r * layer.cols..(r + 1) * layer.cols];
                for (gwc, &xc) in gw.iter_mut().zip(xi) {
                    *gwc += d * xc;
                }
            }
        }
        if k == 0 {
            break;
        }
        let below = &cache.pre[k - 1];
        let mut next = vec![0.0; n * layer.cols];
        for i in 0..n {
            let dzi = &dz[i * layer.rows..(i + 1) * layer.rows];
            let out = &mut next[i * layer.cols..(i + 1) * layer.cols];
            for (r, &d) in dzi.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let wr = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                for (o, &w) in out.iter_mut().zip(wr) {
                    *o += d * w;
                }
            }
            let zi = &below[i * layer.cols..(i + 1) * layer.cols];
            for (o, &z) in out.iter_mut().zip(zi) {
                if z <= 0.0 {
                    *o = 0.0;
                }
            }
        }
        dz = next;
    }
    (loss, Gradients { layers: grads })
}

fn check_batch(w: &ModelWeights, features: &[f64], cols: usize) -> Result<usize, NnError> {
    if cols != w.input_size() {
        return Err(NnError::DimensionMismatch { expected: w.input_size(), got: cols });
    }
    if features.len() % cols != 0 {
        return Err(NnError::DimensionMismatch { expected: cols, got: features.len() % cols });
    }
    Ok(features.len() / cols)
}

fn check_labels(w: &ModelWeights, labels: &[usize]) -> Result<(), NnError> {
    let classes = w.output_size();
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(NnError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Class probabilities for each row of a row-major batch with `cols` columns.
pub fn forward(w: &ModelWeights, features: &[f64], cols: usize) -> Result<Vec<Vec<f64>>, NnError> {
    w.validate()?;
    let n = check_batch(w, features, cols)?;
    let p = Params64::from_weights(w);
    let cache = run_forward(&p, features, n);
    Ok(cache.acts.last().unwrap().chunks(w.output_size()).map(<[f64]>::to_vec).collect())
}

/// Gradient of the batch-mean cross-entropy with respect to every parameter.
pub fn gradient(
    w: &ModelWeights,
    features: &[f64],
    cols: usize,
    labels: &[usize],
) -> Result<Gradients, NnError> {
    w.validate()?;
    let n = check_batch(w, features, cols)?;
    if n != labels.len() {
        return Err(NnError::DimensionMismatch { expected: n, got: labels.len() });
    }
    if n == 0 {
        return Err(NnError::EmptyDataset);
    }
    check_labels(w, labels)?;
    Ok(loss_and_gradient64(&Params64::from_weights(w), features, labels).1)
}

/// Mean cross-entropy of `w` over a whole dataset.
pub fn mean_loss(w: &ModelWeights, data: &Dataset) -> Result<f64, NnError> {
    w.validate()?;
    check_batch(w, data.features(), data.dim())?;
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    check_labels(w, data.labels())?;
    Ok(loss64(&Params64::from_weights(w), data.features(), data.labels()))
}

struct Adam {
    step: i32,
    m: Vec<Dense64>,
    v: Vec<Dense64>,
}

impl Adam {
    fn new(p: &Params64) -> Self {
        let zeros = |p: &Params64| {
            p.layers
                .iter()
                .map(|l| Dense64 {
                    rows: l.rows,
                    cols: l.cols,
                    w: vec![0.0; l.w.len()],
                    b: vec![0.0; l.b.len()],
                })
                .collect::<Vec<_>>()
        };
        Self { step: 0, m: zeros(p), v: zeros(p) }
    }

    fn apply(&mut self, p: &mut Params64, g: &Gradients, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        let update = |param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..param.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        };
        for (k, layer) in p.layers.iter_mut().enumerate() {
            update(&mut layer.w, &g.layers[k].weights, &mut self.m[k].w, &mut self.v[k].w);
            update(&mut layer.b, &g.layers[k].biases, &mut self.m[k].b, &mut self.v[k].b);
        }
    }
}

/// Mini-batch Adam over `train` for `hp.epochs` epochs.
///
/// Epoch `e` visits rows in a permutation drawn from ChaCha stream `e` keyed
/// by `hp.seed`, so the result is a pure function of its inputs.
pub fn fit(w: &ModelWeights, train: &Dataset, hp: &Hyperparams) -> Result<FitOutcome, NnError> {
    hp.validate()?;
    w.validate()?;
    if train.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    check_batch(w, train.features(), train.dim())?;
    check_labels(w, train.labels())?;

    let n = train.len();
    let dim = train.dim();
    let batch = hp.batch_size.min(n);
    let mut params = Params64::from_weights(w);
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut xb = Vec::with_capacity(batch * dim);
    let mut yb = Vec::with_capacity(batch);
    let mut trace = Vec::with_capacity(hp.epochs);

    for epoch in 0..hp.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            xb.clear();
            yb.clear();
            for &r in chunk {
                xb.extend_from_slice(train.row(r));
                yb.push(train.labels()[r]);
            }
            let (loss, grads) = loss_and_gradient64(&params, &xb, &yb);
            if !loss.is_finite() {
                return Err(NnError::Diverged { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.apply(&mut params, &grads, hp.learning_rate);
        }
        let epoch_loss = epoch_loss / n as f64;
        if !epoch_loss.is_finite() {
            return Err(NnError::Diverged { epoch });
        }
        trace.push(epoch_loss);
    }

    let weights = params.to_weights();
    if weights.flat_params().any(|v| !v.is_finite()) {
        return Err(NnError::Diverged { epoch: hp.epochs - 1 });
    }
    Ok(FitOutcome { weights, loss_trace: trace })
}
