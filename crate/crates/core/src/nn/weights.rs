use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Hyperparams, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 1,
            Activation::Softmax => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Activation::Relu),
            2 => Some(Activation::Softmax),
            _ => None,
        }
    }
}

/// Dense layer `y = act(W x + b)` with `W` stored row-major as `rows x cols`
/// (rows = outputs, cols = inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize, activation: Activation) -> Self {
        Self { rows, cols, weights: vec![0.0; rows * cols], biases: vec![0.0; rows], activation }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Ordered dense layers: the unit that is exchanged and averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub layers: Vec<Layer>,
}

impl ModelWeights {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        let w = Self { layers };
        w.validate()?;
        Ok(w)
    }

    /// Checks chaining, buffer sizes, activation layout and finiteness.
    pub fn validate(&self) -> Result<(), NnError> {
        let n = self.layers.len();
        if n == 0 {
            return Err(NnError::InvalidModel("no layers".into()));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.rows == 0 || layer.cols == 0 {
                return Err(NnError::InvalidModel(format!("layer {k} has a zero dimension")));
            }
            if layer.weights.len() != layer.rows * layer.cols || layer.biases.len() != layer.rows
            {
                return Err(NnError::InvalidModel(format!("layer {k} buffers do not match shape")));
            }
            if k > 0 && layer.cols != self.layers[k - 1].rows {
                return Err(NnError::InvalidModel(format!(
                    "layer {k} expects {} inputs but layer {} has {} outputs",
                    layer.cols,
                    k - 1,
                    self.layers[k - 1].rows
                )));
            }
            let expected = if k + 1 == n { Activation::Softmax } else { Activation::Relu };
            if layer.activation != expected {
                return Err(NnError::InvalidModel(format!(
                    "layer {k} must use {expected:?}, found {:?}",
                    layer.activation
                )));
            }
            if layer.weights.iter().chain(&layer.biases).any(|v| !v.is_finite()) {
                return Err(NnError::InvalidModel(format!("layer {k} has non-finite values")));
            }
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// `(rows, cols)` of every layer.
    pub fn shape(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.rows, l.cols)).collect()
    }

    pub fn same_shape(&self, other: &ModelWeights) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols && a.activation == b.activation)
    }

    /// Same architecture, all parameters zero.
    pub fn zeros_like(&self) -> ModelWeights {
        ModelWeights {
            layers: self.layers.iter().map(|l| Layer::zeros(l.rows, l.cols, l.activation)).collect(),
        }
    }

    /// Every parameter in layer order, weights before biases.
    pub fn flat_params(&self) -> impl Iterator<Item = f32> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases).copied())
    }

    pub fn map_params(&self, mut f: impl FnMut(f32) -> f32) -> ModelWeights {
        ModelWeights {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    rows: l.rows,
                    cols: l.cols,
                    weights: l.weights.iter().map(|&v| f(v)).collect(),
                    biases: l.biases.iter().map(|&v| f(v)).collect(),
                    activation: l.activation,
                })
                .collect(),
        }
    }
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_mlp(hp: &Hyperparams) -> Result<ModelWeights, NnError> {
    hp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let n = hp.layer_sizes.len() - 1;
    let layers = hp
        .layer_sizes
        .windows(2)
        .enumerate()
        .map(|(k, pair)| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights =
                (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit) as f32).collect();
            let activation = if k + 1 == n { Activation::Softmax } else { Activation::Relu };
            Layer { rows: fan_out, cols: fan_in, weights, biases: vec![0.0; fan_out], activation }
        })
        .collect();
    ModelWeights::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(sizes: &[usize], seed: u64) -> Hyperparams {
        Hyperparams {
            layer_sizes: sizes.to_vec(),
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.01,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_mlp(&hp(&[2, 2], 7)).unwrap();
        let b = init_mlp(&hp(&[2, 2], 7)).unwrap();
        let bits = |w: &ModelWeights| w.flat_params().map(f32::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&init_mlp(&hp(&[2, 2], 8)).unwrap()));
    }

    #[test]
    fn init_shapes_chain() {
        let w = init_mlp(&hp(&[4, 3, 2], 1)).unwrap();
        assert_eq!(w.shape(), vec![(3, 4), (2, 3)]);
        assert_eq!(w.layers[0].biases.len(), 3);
        assert_eq!(w.layers[1].biases.len(), 2);
        assert_eq!(w.layers[0].activation, Activation::Relu);
        assert_eq!(w.layers[1].activation, Activation::Softmax);
        assert!(w.flat_params().skip(12).take(3).all(|b| b == 0.0));
    }

    #[test]
    fn init_rejects_zero_width() {
        assert!(matches!(init_mlp(&hp(&[4, 0, 2], 1)), Err(NnError::InvalidHyperparams(_))));
    }

    #[test]
    fn glorot_sample_mean_is_centered() {
        // 64x64 layer sampled three times gives > 10k draws.
        let mut values = Vec::new();
        for seed in 0..3 {
            let w = init_mlp(&hp(&[64, 64], seed)).unwrap();
            values.extend(w.layers[0].weights.iter().map(|&v| v as f64));
        }
        let values = &values[..10_000];
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        let limit = (6.0f64 / 128.0).sqrt();
        assert!(values.iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn validate_catches_broken_chain() {
        let mut w = init_mlp(&hp(&[4, 3, 2], 1)).unwrap();
        w.layers[1] = Layer::zeros(2, 5, Activation::Softmax);
        assert!(w.validate().is_err());
    }
}
