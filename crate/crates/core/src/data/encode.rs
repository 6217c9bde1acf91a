use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::engine::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    AsGiven,
    Shuffled,
}

/// Label indices must be unique and below `n`.
pub fn validate_labels(labels: &[usize], n: usize) -> Result<(), DataError> {
    let mut seen = vec![false; n];
    for &l in labels {
        if l >= n {
            return Err(DataError::InvalidLabels(format!(
                "label {l} out of range {n}"
            )));
        }
        if std::mem::replace(&mut seen[l], true) {
            return Err(DataError::InvalidLabels(format!("duplicate label {l}")));
        }
    }
    Ok(())
}

/// Multi-hot vector of length `n`.
pub fn encode_binary(labels: &[usize], n: usize) -> Result<Vec<f32>, DataError> {
    validate_labels(labels, n)?;
    let mut s = vec![0.0; n];
    for &l in labels {
        s[l] = 1.0;
    }
    Ok(s)
}

/// Token sequence for auto-regressive targets: the labels followed by the
/// end-of-sequence token, which has index `n_labels`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceTarget {
    pub tokens: Vec<usize>,
    pub n_labels: usize,
}

impl SequenceTarget {
    pub fn eos(&self) -> usize {
        self.n_labels
    }

    /// Number of labels before the end token.
    pub fn cardinality(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn labels(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// One-hot `(K + 1) x (N + 1)` matrix; the last row selects column `N`.
    pub fn matrix(&self) -> Tensor {
        let cols = self.n_labels + 1;
        let mut data = vec![0.0; self.tokens.len() * cols];
        for (r, &t) in self.tokens.iter().enumerate() {
            data[r * cols + t] = 1.0;
        }
        Tensor::new(vec![self.tokens.len(), cols], data).expect("non-empty one-hot matrix")
    }
}

pub fn encode_sequence<R: Rng>(
    labels: &[usize],
    n: usize,
    policy: OrderPolicy,
    rng: &mut R,
) -> Result<SequenceTarget, DataError> {
    validate_labels(labels, n)?;
    let mut tokens = labels.to_vec();
    if policy == OrderPolicy::Shuffled {
        tokens.shuffle(rng);
    }
    tokens.push(n);
    Ok(SequenceTarget {
        tokens,
        n_labels: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binary_encoding() {
        assert_eq!(encode_binary(&[0, 2], 3).unwrap(), [1.0, 0.0, 1.0]);
        assert_eq!(encode_binary(&[], 3).unwrap(), [0.0; 3]);
        assert_eq!(encode_binary(&[2, 0, 1], 3).unwrap(), [1.0; 3]);
        assert!(encode_binary(&[1, 1], 3).is_err());
        assert!(encode_binary(&[3], 3).is_err());
    }

    #[test]
    fn sequence_rows_end_with_eos() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = encode_sequence(&[3, 1], 4, OrderPolicy::AsGiven, &mut rng).unwrap();
        assert_eq!(s.tokens, [3, 1, 4]);
        let m = s.matrix();
        assert_eq!(m.shape(), [3, 5]);
        assert_eq!(m.data()[3], 1.0);
        assert_eq!(m.data()[5 + 1], 1.0);
        assert_eq!(m.data()[10 + 4], 1.0);
        assert_eq!(m.data().iter().sum::<f32>(), 3.0);

        let empty = encode_sequence(&[], 4, OrderPolicy::AsGiven, &mut rng).unwrap();
        assert_eq!(empty.tokens, [4]);
        assert_eq!(empty.cardinality(), 0);
    }

    #[test]
    fn shuffled_pairs_occur_in_both_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let mut forward = 0;
        for _ in 0..draws {
            let s = encode_sequence(&[0, 1], 2, OrderPolicy::Shuffled, &mut rng).unwrap();
            if s.tokens[0] == 0 {
                forward += 1;
            }
        }
        let frac = forward as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 0.05, "fraction {frac}");
    }
}
