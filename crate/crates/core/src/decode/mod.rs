//! Turning model outputs into discrete label sets.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Mode, Tape, Tensor, MASK_SENTINEL};
use crate::predictors::{Model, PredictorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("invalid decode rule: {0}")]
    InvalidRule(String),
    #[error(
        "decoder step returned {got} rows of width {width}, expected {want} x {expected_width}"
    )]
    StepShape {
        got: usize,
        width: usize,
        want: usize,
        expected_width: usize,
    },
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeKind {
    Threshold,
    TopkFromCardinality,
    Cumulative,
    Autoregressive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Greedy,
    Stochastic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRule {
    pub kind: DecodeKind,
    pub threshold: f32,
    /// Auto-regressive step limit; `None` means `N + 1`, which always suffices.
    pub max_steps: Option<usize>,
    pub sampling: Sampling,
}

impl DecodeRule {
    pub fn new(kind: DecodeKind) -> Self {
        Self {
            kind,
            threshold: 0.5,
            max_steps: None,
            sampling: Sampling::Greedy,
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(DecodeError::InvalidRule(format!(
                "threshold {} not in (0, 1)",
                self.threshold
            )));
        }
        if self.max_steps == Some(0) {
            return Err(DecodeError::InvalidRule(
                "max_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// `{i : p_i >= t}` in ascending order.
pub fn threshold_decode(probs: &[f32], t: f32) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= t)
        .map(|(i, _)| i)
        .collect()
}

/// Indices by descending score; ties keep ascending index order.
pub fn ranked(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The `K_hat` highest-scoring labels, `K_hat` being the most likely
/// cardinality class (for concentrations, the largest `alpha`).
/// Returned in ascending label order.
pub fn topk_decode(probs: &[f32], cardinality: &[f32]) -> Vec<usize> {
    let k = argmax(cardinality).min(probs.len());
    let mut out: Vec<usize> = ranked(probs).into_iter().take(k).collect();
    out.sort_unstable();
    out
}

/// Shortest prefix of the descending sort whose mass strictly exceeds 0.5.
/// Never empty. Returned in ascending label order.
pub fn cumulative_decode(probs: &[f32]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut mass = 0.0f64;
    for i in ranked(probs) {
        out.push(i);
        mass += probs[i] as f64;
        if mass > 0.5 {
            break;
        }
    }
    out.sort_unstable();
    out
}

/// Result of decoding one sample auto-regressively.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArDecoded {
    /// Labels in emission order.
    pub labels: Vec<usize>,
    /// Decoding steps taken, including the eos step.
    pub steps: usize,
    /// True when `max_steps` ran out before eos.
    pub truncated: bool,
}

fn sample_index<R: Rng>(logits: &[f32], rng: &mut R) -> usize {
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let w: Vec<f64> = logits.iter().map(|&l| ((l - mx) as f64).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &x) in w.iter().enumerate() {
        if u < x {
            return i;
        }
        u -= x;
    }
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Generic batched decoding loop over `n_labels + 1` tokens (eos = `n_labels`).
///
/// `step(prev, masks)` returns one logit row per sample; the loop itself
/// also masks already-emitted labels, so duplicates are impossible whatever
/// the rows contain. Finished samples keep receiving eos as input.
pub fn decode_steps<R, F>(
    batch: usize,
    n_labels: usize,
    max_steps: usize,
    sampling: Sampling,
    rng: &mut R,
    mut step: F,
) -> Result<Vec<ArDecoded>, DecodeError>
where
    R: Rng,
    F: FnMut(&[usize], &[Vec<usize>]) -> Result<Vec<Vec<f32>>, DecodeError>,
{
    let eos = n_labels;
    let mut out: Vec<ArDecoded> = (0..batch)
        .map(|_| ArDecoded {
            labels: Vec::new(),
            steps: 0,
            truncated: true,
        })
        .collect();
    let mut done = vec![false; batch];
    let mut prev = vec![eos; batch];
    for _ in 0..max_steps {
        if done.iter().all(|&d| d) {
            break;
        }
        let masks: Vec<Vec<usize>> = out.iter().map(|o| o.labels.clone()).collect();
        let rows = step(&prev, &masks)?;
        if rows.len() != batch || rows.iter().any(|r| r.len() != n_labels + 1) {
            return Err(DecodeError::StepShape {
                got: rows.len(),
                width: rows.first().map_or(0, Vec::len),
                want: batch,
                expected_width: n_labels + 1,
            });
        }
        for (i, mut row) in rows.into_iter().enumerate() {
            if done[i] {
                continue;
            }
            for &l in &out[i].labels {
                row[l] = MASK_SENTINEL;
            }
            let tok = match sampling {
                Sampling::Greedy => argmax(&row),
                Sampling::Stochastic => sample_index(&row, rng),
            };
            out[i].steps += 1;
            prev[i] = tok;
            if tok == eos {
                done[i] = true;
                out[i].truncated = false;
            } else {
                out[i].labels.push(tok);
            }
        }
    }
    Ok(out)
}

/// Decodes a batch of feature grids `[B, w, h, d]` with an auto-regressive model.
pub fn autoregressive_decode<R: Rng>(
    model: &Model,
    features: &Tensor,
    rule: &DecodeRule,
    rng: &mut R,
) -> Result<Vec<ArDecoded>, DecodeError> {
    rule.validate()?;
    let n = model.n_labels;
    let batch = features.shape().first().copied().unwrap_or(0);
    let max_steps = rule.max_steps.unwrap_or(n + 1).min(n + 1);
    let mut tape = Tape::new();
    let mut state = model.ar_begin(&mut tape, features)?;
    decode_steps(batch, n, max_steps, rule.sampling, rng, |prev, masks| {
        // eval mode never draws from the dropout generator
        let mut no_dropout = rand::rngs::mock::StepRng::new(0, 0);
        let logits = model.ar_step(
            &mut tape,
            &mut state,
            prev,
            masks,
            Mode::Eval,
            &mut no_dropout,
        )?;
        Ok(tape
            .data(logits)
            .chunks(n + 1)
            .map(<[f32]>::to_vec)
            .collect())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_decode(&[0.7, 0.4], 0.5), [0]);
        assert!(threshold_decode(&[0.1, 0.4], 0.5).is_empty());
        assert_eq!(threshold_decode(&[0.5, 0.49], 0.5), [0]);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_decode(&[0.9, 0.1, 0.5], &[0.1, 0.2, 0.7]), [0, 2]);
        assert!(topk_decode(&[0.9, 0.1, 0.5], &[0.8, 0.1, 0.1]).is_empty());
        assert_eq!(topk_decode(&[0.5, 0.5, 0.1], &[0.0, 1.0]), [0]);
    }

    #[test]
    fn cumulative_examples() {
        assert_eq!(cumulative_decode(&[0.4, 0.3, 0.2, 0.1]), [0, 1]);
        assert_eq!(cumulative_decode(&[0.6, 0.4]), [0]);
        assert_eq!(cumulative_decode(&[0.5, 0.5]), [0, 1]);
        assert_eq!(cumulative_decode(&[0.1, 0.2, 0.7]), [2]);
    }

    #[test]
    fn eos_first_decodes_to_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = decode_steps(1, 3, 4, Sampling::Greedy, &mut rng, |_, _| {
            Ok(vec![vec![0.0, 0.0, 0.0, 5.0]])
        })
        .unwrap();
        assert_eq!(out[0].labels, Vec::<usize>::new());
        assert_eq!(out[0].steps, 1);
        assert!(!out[0].truncated);
    }

    #[test]
    fn constant_logits_cannot_repeat_and_stop_by_n_plus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // label 1 always best, eos always worst
        let out = decode_steps(1, 3, 4, Sampling::Greedy, &mut rng, |_, _| {
            Ok(vec![vec![1.0, 9.0, 2.0, -50.0]])
        })
        .unwrap();
        assert_eq!(out[0].labels, [1, 2, 0]);
        assert_eq!(out[0].steps, 4);
        assert!(!out[0].truncated);

        let out = decode_steps(1, 3, 2, Sampling::Greedy, &mut rng, |_, _| {
            Ok(vec![vec![1.0, 9.0, 2.0, -50.0]])
        })
        .unwrap();
        assert!(out[0].truncated);
        assert_eq!(out[0].labels.len(), 2);
    }

    #[test]
    fn stochastic_sampling_respects_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let out = decode_steps(2, 4, 5, Sampling::Stochastic, &mut rng, |_, _| {
                Ok(vec![vec![0.0; 5], vec![1.0, 0.0, 1.0, 0.0, -1.0]])
            })
            .unwrap();
            for o in out {
                let mut l = o.labels.clone();
                l.sort_unstable();
                l.dedup();
                assert_eq!(l.len(), o.labels.len());
                assert!(o.steps <= 5);
            }
        }
    }

    #[test]
    fn rule_validation() {
        let mut r = DecodeRule::new(DecodeKind::Threshold);
        assert!(r.validate().is_ok());
        r.threshold = 1.0;
        assert!(r.validate().is_err());
        let mut r = DecodeRule::new(DecodeKind::Autoregressive);
        r.max_steps = Some(0);
        assert!(r.validate().is_err());
    }
}
