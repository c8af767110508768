use super::{Cursor, WireError};
use crate::nn::{Activation, Layer, ModelWeights};

const MAGIC: &[u8; 4] = b"ENFD";
const VERSION: u8 = 1;

/// Encoded size: `7 + sum(9 + 4 * rows * (cols + 1))`.
pub fn blob_len(w: &ModelWeights) -> usize {
    7 + w.layers.iter().map(|l| 9 + 4 * l.rows * (l.cols + 1)).sum::<usize>()
}

pub fn encode_model(w: &ModelWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(blob_len(w));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(w.layers.len() as u16).to_be_bytes());
    for layer in &w.layers {
        out.extend_from_slice(&(layer.rows as u32).to_be_bytes());
        out.extend_from_slice(&(layer.cols as u32).to_be_bytes());
        out.push(layer.activation.tag());
        for v in layer.weights.iter().chain(&layer.biases) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes a blob that must span `bytes` exactly. Never yields a partially
/// filled model.
pub fn decode_model(bytes: &[u8]) -> Result<ModelWeights, WireError> {
    let mut cur = Cursor::new(bytes);
    let model = read_model(&mut cur)?;
    cur.finish()?;
    Ok(model)
}

pub(crate) fn read_model(cur: &mut Cursor<'_>) -> Result<ModelWeights, WireError> {
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let version = cur.u8()?;
    if version != VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let count = cur.u16()? as usize;
    if count == 0 {
        return Err(WireError::ShapeMismatch("model has no layers".into()));
    }
    let mut layers: Vec<Layer> = Vec::with_capacity(count.min(64));
    for k in 0..count {
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let tag = cur.u8()?;
        let activation = Activation::from_tag(tag).ok_or(WireError::BadActivation(tag))?;
        if rows == 0 || cols == 0 {
            return Err(WireError::ShapeMismatch(format!("layer {k} is {rows}x{cols}")));
        }
        if let Some(prev) = layers.last() {
            if prev.rows != cols {
                return Err(WireError::ShapeMismatch(format!(
                    "layer {k} takes {cols} inputs, previous layer emits {}",
                    prev.rows
                )));
            }
        }
        let expected = if k + 1 == count { Activation::Softmax } else { Activation::Relu };
        if activation != expected {
            return Err(WireError::ShapeMismatch(format!(
                "layer {k} has activation {activation:?}, expected {expected:?}"
            )));
        }
        let n_w = rows.checked_mul(cols).ok_or(WireError::Truncated { needed: usize::MAX })?;
        let bytes_needed = n_w
            .checked_add(rows)
            .and_then(|n| n.checked_mul(4))
            .ok_or(WireError::Truncated { needed: usize::MAX })?;
        let raw = cur.take(bytes_needed)?;
        let mut values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let weights: Vec<f32> = values.by_ref().take(n_w).collect();
        let biases: Vec<f32> = values.collect();
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(WireError::NonFinite);
        }
        layers.push(Layer { rows, cols, weights, biases, activation });
    }
    Ok(ModelWeights { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_mlp, Hyperparams};

    fn model(sizes: &[usize], seed: u64) -> ModelWeights {
        init_mlp(&Hyperparams {
            layer_sizes: sizes.to_vec(),
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let w = model(&[7, 5, 4, 3], 3);
        let decoded = decode_model(&encode_model(&w)).unwrap();
        let bits = |m: &ModelWeights| m.flat_params().map(f32::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&decoded), bits(&w));
        assert_eq!(decoded.shape(), w.shape());
    }

    #[test]
    fn size_formula() {
        for sizes in [&[2usize, 2][..], &[7, 5, 4, 3], &[12, 64, 32, 6]] {
            let w = model(sizes, 1);
            let oracle: usize =
                7 + sizes.windows(2).map(|p| 9 + 4 * p[1] * (p[0] + 1)).sum::<usize>();
            assert_eq!(encode_model(&w).len(), oracle);
            assert_eq!(blob_len(&w), oracle);
        }
    }

    #[test]
    fn classified_errors() {
        let good = encode_model(&model(&[3, 4, 2], 1));

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert_eq!(decode_model(&bad), Err(WireError::BadMagic(*b"XXXX")));

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(decode_model(&bad), Err(WireError::UnsupportedVersion(2)));

        assert!(matches!(decode_model(&good[..good.len() - 1]), Err(WireError::Truncated { needed: 1 })));

        // Second layer claims 5 inputs while the first emits 4.
        let mut bad = good.clone();
        let second = 7 + 9 + 4 * 4 * 4;
        bad[second + 4..second + 8].copy_from_slice(&5u32.to_be_bytes());
        assert!(matches!(decode_model(&bad), Err(WireError::ShapeMismatch(_))));

        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(decode_model(&bad), Err(WireError::TrailingBytes(1)));

        let mut bad = good;
        bad[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(decode_model(&bad), Err(WireError::NonFinite));
    }
}
