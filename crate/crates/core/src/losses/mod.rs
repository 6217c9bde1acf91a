//! Training criteria for every predictor family.
//!
//! Each loss takes a batch on the tape (`[B, ..]`, or a single unbatched
//! row) and returns a scalar node averaged over the batch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Tape, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f32 = 1e-7;
pub const SIOU_EPS: f32 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target distribution undefined for an empty set (sample {0})")]
    EmptyTarget(usize),
    #[error("cardinality {k} exceeds the head's maximum {k_max}")]
    CardinalityOutOfRange { k: usize, k_max: usize },
    #[error("concentration parameters must be strictly positive")]
    NonPositiveAlpha,
    #[error("missing loss component: {0}")]
    MissingComponent(&'static str),
    #[error("invalid loss spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimaryLoss {
    Bce,
    #[serde(rename = "siou")]
    SIoU,
    Td,
    CeSteps,
    PooledBce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CardinalityLoss {
    None,
    CategoricalCe,
    DirichletCategoricalNll,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub primary: PrimaryLoss,
    pub lambda_c: f64,
    pub lambda_eos: f64,
    pub cardinality: CardinalityLoss,
}

impl LossSpec {
    pub fn new(primary: PrimaryLoss) -> Self {
        Self {
            primary,
            lambda_c: 0.0,
            lambda_eos: 0.0,
            cardinality: CardinalityLoss::None,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_eos", self.lambda_eos)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidSpec(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Already-computed pieces of a training objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossComponents {
    pub primary: Option<Var>,
    pub cardinality: Option<Var>,
    pub eos: Option<Var>,
}

/// `primary + lambda_C * cardinality + lambda_eos * eos`.
///
/// The cardinality term is used iff `spec.cardinality` is set. The
/// eos term is added whenever supplied and is required for set-pooled training.
pub fn total_loss(
    tape: &mut Tape,
    spec: &LossSpec,
    parts: LossComponents,
) -> Result<Var, LossError> {
    spec.validate()?;
    let mut total = parts
        .primary
        .ok_or(LossError::MissingComponent("primary"))?;
    if spec.cardinality != CardinalityLoss::None {
        let c = parts
            .cardinality
            .ok_or(LossError::MissingComponent("cardinality"))?;
        let c = tape.scale(c, spec.lambda_c as f32)?;
        total = tape.add(total, c)?;
    }
    if spec.primary == PrimaryLoss::PooledBce && parts.eos.is_none() {
        return Err(LossError::MissingComponent("eos"));
    }
    if let Some(e) = parts.eos {
        let e = tape.scale(e, spec.lambda_eos as f32)?;
        total = tape.add(total, e)?;
    }
    Ok(total)
}

/// Rows and columns of a `[B, N]` or `[N]` node.
fn rows_cols(tape: &Tape, x: Var) -> Result<(usize, usize), LossError> {
    match *tape.shape(x) {
        [n] => Ok((1, n)),
        [b, n] => Ok((b, n)),
        ref s => Err(LossError::Shape(format!(
            "expected [B, N] or [N], got {s:?}"
        ))),
    }
}

fn check_target(tape: &Tape, x: Var, target: &Tensor) -> Result<(usize, usize), LossError> {
    if tape.shape(x) != target.shape() {
        return Err(LossError::Shape(format!(
            "prediction {:?} vs target {:?}",
            tape.shape(x),
            target.shape()
        )));
    }
    rows_cols(tape, x)
}

/// `sum(x * w)` for a constant weight tensor of the same shape.
fn weighted_sum(tape: &mut Tape, x: Var, w: Tensor) -> Result<Var, LossError> {
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p)?)
}

/// Element-wise binary cross-entropy terms, before any reduction.
fn bce_terms(tape: &mut Tape, p: Var, s: &Tensor) -> Result<Var, LossError> {
    let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = tape.log(p)?;
    let q = tape.scale(p, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let log_q = tape.log(q)?;
    let st = tape.constant(s.clone());
    let inv: Vec<f32> = s.data().iter().map(|v| 1.0 - v).collect();
    let it = tape.constant(Tensor::new(s.shape().to_vec(), inv).map_err(LossError::Engine)?);
    let a = tape.mul(st, log_p)?;
    let b = tape.mul(it, log_q)?;
    let ab = tape.add(a, b)?;
    Ok(tape.scale(ab, -1.0)?)
}

/// Mean binary cross-entropy over all labels and samples.
pub fn bce(tape: &mut Tape, probs: Var, target: &Tensor) -> Result<Var, LossError> {
    check_target(tape, probs, target)?;
    let t = bce_terms(tape, probs, target)?;
    Ok(tape.mean(t)?)
}

/// Soft Jaccard loss `1 - <s,p> / (sum s + sum p - <s,p> + eps)`, averaged
/// over samples. A row whose target and prediction are both exactly zero
/// contributes 0 (empty matches empty).
pub fn siou(tape: &mut Tape, probs: Var, target: &Tensor) -> Result<Var, LossError> {
    let (b, n) = check_target(tape, probs, target)?;
    let p = tape.reshape(probs, &[b, n])?;
    let s = tape.constant(
        target
            .clone()
            .reshaped(vec![b, n])
            .map_err(LossError::Engine)?,
    );
    let sp = tape.mul(s, p)?;
    let inter = tape.sum_axis(sp, 1)?;
    let sum_p = tape.sum_axis(p, 1)?;
    let sum_s: Vec<f32> = target.data().chunks(n).map(|r| r.iter().sum()).collect();
    let sum_s_t = tape.constant(Tensor::vector(sum_s.clone()));
    let union = tape.add(sum_s_t, sum_p)?;
    let union = tape.sub(union, inter)?;
    let union = tape.add_scalar(union, SIOU_EPS)?;
    let ratio = tape.div(inter, union)?;
    let per = tape.scale(ratio, -1.0)?;
    let per = tape.add_scalar(per, 1.0)?;
    let pd = tape.data(p);
    let weights: Vec<f32> = (0..b)
        .map(|r| {
            let both_empty = sum_s[r] == 0.0 && pd[r * n..(r + 1) * n].iter().all(|&v| v == 0.0);
            if both_empty {
                0.0
            } else {
                1.0 / b as f32
            }
        })
        .collect();
    weighted_sum(tape, per, Tensor::vector(weights))
}

/// Cross-entropy between `s / sum(s)` and a softmax output, averaged over samples.
pub fn td(tape: &mut Tape, probs: Var, target: &Tensor) -> Result<Var, LossError> {
    let (b, n) = check_target(tape, probs, target)?;
    let mut w = Vec::with_capacity(b * n);
    for (r, row) in target.data().chunks(n).enumerate() {
        let total: f32 = row.iter().sum();
        if total <= 0.0 {
            return Err(LossError::EmptyTarget(r));
        }
        w.extend(row.iter().map(|v| -v / total / b as f32));
    }
    let p = tape.clamp(probs, PROB_CLAMP, 1.0)?;
    let lp = tape.log(p)?;
    weighted_sum(
        tape,
        lp,
        Tensor::new(target.shape().to_vec(), w).map_err(LossError::Engine)?,
    )
}

/// Token ids per sample, one per decoding step.
fn step_layout(
    tape: &Tape,
    logits: Var,
    steps: &[Vec<usize>],
) -> Result<(usize, usize, usize), LossError> {
    let (b, t, v) = match *tape.shape(logits) {
        [t, v] => (1, t, v),
        [b, t, v] => (b, t, v),
        ref s => {
            return Err(LossError::Shape(format!(
                "expected [B, T, V] or [T, V], got {s:?}"
            )))
        }
    };
    if steps.len() != b {
        return Err(LossError::Shape(format!(
            "{} targets for a batch of {b}",
            steps.len()
        )));
    }
    for (i, s) in steps.iter().enumerate() {
        if s.is_empty() || s.len() > t {
            return Err(LossError::Shape(format!(
                "sample {i} has {} steps, logits hold {t}",
                s.len()
            )));
        }
        if let Some(&bad) = s.iter().find(|&&tok| tok >= v) {
            return Err(LossError::Shape(format!("token {bad} out of range {v}")));
        }
    }
    Ok((b, t, v))
}

/// Mean over steps of `-log softmax(logits)[token]`, averaged over samples.
///
/// `tokens[i]` is the target sequence of sample `i` (labels then eos);
/// logits beyond its length are padding and ignored.
pub fn ce_steps(tape: &mut Tape, logits: Var, tokens: &[Vec<usize>]) -> Result<Var, LossError> {
    let (b, t, v) = step_layout(tape, logits, tokens)?;
    let flat = tape.reshape(logits, &[b * t, v])?;
    let lsm = tape.log_softmax(flat, 1)?;
    let mut idx = vec![0usize; b * t];
    let mut w = vec![0.0f32; b * t];
    for (i, seq) in tokens.iter().enumerate() {
        for (s, &tok) in seq.iter().enumerate() {
            idx[i * t + s] = tok;
            w[i * t + s] = -1.0 / (seq.len() * b) as f32;
        }
    }
    let picked = tape.pick(lsm, &idx)?;
    weighted_sum(tape, picked, Tensor::vector(w))
}

/// BCE between the per-label maximum over valid steps and the binary target.
///
/// `step_probs: [B, T, N]` (or `[T, N]`), `lengths[i]` valid steps of sample `i`.
pub fn pooled_bce(
    tape: &mut Tape,
    step_probs: Var,
    lengths: &[usize],
    target: &Tensor,
) -> Result<Var, LossError> {
    let (b, t, n) = match *tape.shape(step_probs) {
        [t, n] => (1, t, n),
        [b, t, n] => (b, t, n),
        ref s => return Err(LossError::Shape(format!("expected [B, T, N], got {s:?}"))),
    };
    if lengths.len() != b || lengths.iter().any(|&l| l == 0 || l > t) {
        return Err(LossError::Shape(format!(
            "step lengths {lengths:?} for {b}x{t}"
        )));
    }
    if target.numel() != b * n {
        return Err(LossError::Shape(format!(
            "target {:?} for {b} samples of {n} labels",
            target.shape()
        )));
    }
    let x = tape.reshape(step_probs, &[b, t, n])?;
    let x = if lengths.iter().all(|&l| l == t) {
        x
    } else {
        // Probabilities are non-negative, so zeroed padding never wins the max.
        let mut m = vec![0.0f32; b * t * n];
        for (i, &l) in lengths.iter().enumerate() {
            m[i * t * n..(i * t + l) * n].fill(1.0);
        }
        let m = tape.constant(Tensor::new(vec![b, t, n], m)?);
        tape.mul(x, m)?
    };
    let pooled = tape.max_axis(x, 1)?;
    bce(tape, pooled, &target.clone().reshaped(vec![b, n])?)
}

/// BCE of per-step eos probabilities against `[0, .., 0, 1]` (1 at step K),
/// averaged over each sample's K + 1 steps, then over samples.
///
/// `eos_probs: [B, T]` or `[T]`; steps beyond `K_i + 1` are ignored.
pub fn eos_bce(tape: &mut Tape, eos_probs: Var, ks: &[usize]) -> Result<Var, LossError> {
    let (b, t) = rows_cols(tape, eos_probs)?;
    if ks.len() != b {
        return Err(LossError::Shape(format!(
            "{} cardinalities for batch {b}",
            ks.len()
        )));
    }
    if b == 1 && tape.shape(eos_probs).len() == 1 && t != ks[0] + 1 {
        return Err(LossError::Shape(format!("{t} eos steps for K = {}", ks[0])));
    }
    let mut target = vec![0.0f32; b * t];
    let mut w = vec![0.0f32; b * t];
    for (i, &k) in ks.iter().enumerate() {
        if k + 1 > t {
            return Err(LossError::Shape(format!("{t} eos steps for K = {k}")));
        }
        target[i * t + k] = 1.0;
        w[i * t..=i * t + k].fill(1.0 / ((k + 1) * b) as f32);
    }
    let shape = tape.shape(eos_probs).to_vec();
    let terms = bce_terms(tape, eos_probs, &Tensor::new(shape.clone(), target)?)?;
    weighted_sum(tape, terms, Tensor::new(shape, w)?)
}

fn check_cardinalities(tape: &Tape, x: Var, ks: &[usize]) -> Result<(usize, usize), LossError> {
    let (b, c) = rows_cols(tape, x)?;
    if ks.len() != b {
        return Err(LossError::Shape(format!(
            "{} cardinalities for batch {b}",
            ks.len()
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k >= c) {
        return Err(LossError::CardinalityOutOfRange { k, k_max: c - 1 });
    }
    Ok((b, c))
}

/// `-log p[K]` for a categorical cardinality head, averaged over samples.
pub fn cardinality_ce(tape: &mut Tape, card_probs: Var, ks: &[usize]) -> Result<Var, LossError> {
    let (b, c) = check_cardinalities(tape, card_probs, ks)?;
    let p = tape.reshape(card_probs, &[b, c])?;
    let p = tape.pick(p, ks)?;
    let p = tape.clamp(p, PROB_CLAMP, 1.0)?;
    let lp = tape.log(p)?;
    let m = tape.mean(lp)?;
    Ok(tape.scale(m, -1.0)?)
}

/// `-log(alpha[K] / sum(alpha))`: negative log of the single-draw
/// Dirichlet-Categorical marginal, averaged over samples.
pub fn cardinality_dc(tape: &mut Tape, alpha: Var, ks: &[usize]) -> Result<Var, LossError> {
    let (b, c) = check_cardinalities(tape, alpha, ks)?;
    if tape.data(alpha).iter().any(|&a| a <= 0.0) {
        return Err(LossError::NonPositiveAlpha);
    }
    let a = tape.reshape(alpha, &[b, c])?;
    let total = tape.sum_axis(a, 1)?;
    let log_total = tape.log(total)?;
    let ak = tape.pick(a, ks)?;
    let log_ak = tape.log(ak)?;
    let nll = tape.sub(log_total, log_ak)?;
    Ok(tape.mean(nll)?)
}
