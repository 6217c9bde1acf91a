//! Feed-forward and auto-regressive set predictors over feature grids.
//!
//! Every model starts with a per-cell linear adapter (the only parameters in
//! [`ParamGroup::Adapter`]), standing in for a finetunable backbone.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SequenceTarget;
use crate::engine::{
    global_avg_pool, linear, lstm_step, multi_head_attention, AdditiveAttention,
    AttentionProjections, EngineError, LstmWeights, Mode, ParamGroup, ParameterSet, RunningStats,
    Tape, Tensor, Var, MASK_SENTINEL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("invalid predictor config: {0}")]
    InvalidConfig(String),
    #[error("operation needs a {expected} model, this one is {actual:?}")]
    VariantMismatch {
        expected: &'static str,
        actual: Variant,
    },
    #[error("malformed target: {0}")]
    MalformedTarget(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ff,
    Lstm,
    Tf,
}

impl Variant {
    pub fn is_autoregressive(self) -> bool {
        self != Variant::Ff
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CardinalityHead {
    None,
    Categorical,
    DirichletCategorical,
}

/// Output non-linearity of a feed-forward classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfActivation {
    Sigmoid,
    Softmax,
}

/// Order in which teacher-forced targets present a sample's labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetOrder {
    Dataset,
    Shuffle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub variant: Variant,
    pub embedding_size: usize,
    /// Hidden blocks of a feed-forward head (0..=3).
    pub l_f: usize,
    /// Transformer decoder layers (1..=3).
    pub l_t: usize,
    /// Attention heads of the transformer.
    pub n_att: usize,
    pub dropout: f32,
    pub cardinality_head: CardinalityHead,
    pub set_pooled: bool,
    pub label_order: TargetOrder,
    /// Largest cardinality class of the cardinality head.
    pub k_max: usize,
    pub ff_activation: FfActivation,
}

impl PredictorConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            embedding_size: 128,
            l_f: 1,
            l_t: 1,
            n_att: 4,
            dropout: 0.1,
            cardinality_head: CardinalityHead::None,
            set_pooled: false,
            label_order: TargetOrder::Dataset,
            k_max: 0,
            ff_activation: FfActivation::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<(), PredictorError> {
        let bad = |m: String| Err(PredictorError::InvalidConfig(m));
        if self.embedding_size == 0 {
            return bad("embedding_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.l_f > 3 {
            return bad(format!("l_f = {} outside 0..=3", self.l_f));
        }
        if self.variant == Variant::Tf {
            if !(1..=3).contains(&self.l_t) {
                return bad(format!("l_t = {} outside 1..=3", self.l_t));
            }
            if self.n_att == 0 || !self.embedding_size.is_multiple_of(self.n_att) {
                return bad(format!(
                    "n_att = {} does not divide embedding_size {}",
                    self.n_att, self.embedding_size
                ));
            }
        }
        if self.set_pooled && self.variant == Variant::Ff {
            return bad("set pooling needs an auto-regressive variant".into());
        }
        if self.cardinality_head != CardinalityHead::None && self.variant != Variant::Ff {
            return bad("cardinality heads are feed-forward only".into());
        }
        Ok(())
    }
}

/// Outputs of a feed-forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FfOutput {
    /// `[B, N]` label probabilities.
    pub label_probs: Var,
    /// `[B, K_max + 1]`: probabilities (categorical) or concentrations (Dirichlet).
    pub cardinality: Option<Var>,
}

/// Teacher-forced auto-regressive outputs.
#[derive(Clone, Debug)]
pub struct ArOutput {
    /// `[B, T, N + 1]` masked logits; rows past `lengths[i]` are padding.
    pub logits: Var,
    /// `K_i + 1` valid steps per sample.
    pub lengths: Vec<usize>,
}

/// Incremental decoding state for one batch.
pub struct ArState {
    batch: usize,
    cells: Var,
    keys: Option<Var>,
    hidden: Option<(Var, Var)>,
    /// Input tokens fed so far (transformer re-reads the whole prefix).
    inputs: Vec<Vec<usize>>,
}

/// Pre-exponent clamp of the Dirichlet link, keeps `alpha` finite.
const ALPHA_LOGIT_BOUND: f32 = 30.0;

pub struct Model {
    pub config: PredictorConfig,
    pub n_labels: usize,
    pub d_in: usize,
    pub params: ParameterSet,
    /// Running statistics of each feed-forward batch-norm block.
    pub bn_stats: Vec<RunningStats>,
}

impl Model {
    pub fn build<R: Rng>(
        config: PredictorConfig,
        n_labels: usize,
        d_in: usize,
        rng: &mut R,
    ) -> Result<Self, PredictorError> {
        config.validate()?;
        if n_labels == 0 || d_in == 0 {
            return Err(PredictorError::InvalidConfig(format!(
                "N = {n_labels}, d = {d_in}"
            )));
        }
        let e = config.embedding_size;
        let n = n_labels;
        let mut p = ParameterSet::new();
        let head = ParamGroup::Head;
        p.insert_uniform("adapter.w", ParamGroup::Adapter, &[d_in, e], d_in, rng)?;
        p.insert_uniform("adapter.b", ParamGroup::Adapter, &[e], d_in, rng)?;
        let mut bn_stats = Vec::new();
        match config.variant {
            Variant::Ff => {
                for l in 0..config.l_f {
                    p.insert_uniform(&format!("ff.{l}.w"), head, &[e, e], e, rng)?;
                    p.insert_uniform(&format!("ff.{l}.b"), head, &[e], e, rng)?;
                    p.insert_constant(&format!("ff.{l}.gamma"), head, &[e], 1.0)?;
                    p.insert_constant(&format!("ff.{l}.beta"), head, &[e], 0.0)?;
                    bn_stats.push(RunningStats::new(e));
                }
                p.insert_uniform("out.w", head, &[e, n], e, rng)?;
                p.insert_uniform("out.b", head, &[n], e, rng)?;
                if config.cardinality_head != CardinalityHead::None {
                    let c = config.k_max + 1;
                    p.insert_uniform("card.w", head, &[e, c], e, rng)?;
                    p.insert_uniform("card.b", head, &[c], e, rng)?;
                }
            }
            Variant::Lstm => {
                p.insert_uniform("embed", head, &[n + 1, e], e, rng)?;
                p.insert_uniform("att.w_query", head, &[e, e], e, rng)?;
                p.insert_uniform("att.w_key", head, &[e, e], e, rng)?;
                p.insert_uniform("att.v", head, &[e, 1], e, rng)?;
                p.insert_uniform("lstm.w_x", head, &[2 * e, 4 * e], e, rng)?;
                p.insert_uniform("lstm.w_h", head, &[e, 4 * e], e, rng)?;
                p.insert_uniform("lstm.b", head, &[4 * e], e, rng)?;
                p.insert_uniform("out.w", head, &[2 * e, n + 1], 2 * e, rng)?;
                p.insert_uniform("out.b", head, &[n + 1], 2 * e, rng)?;
            }
            Variant::Tf => {
                p.insert_uniform("embed", head, &[n + 1, e], e, rng)?;
                p.insert_uniform("pos", head, &[n + 1, e], e, rng)?;
                for l in 0..config.l_t {
                    for att in ["self", "cross"] {
                        for m in ["q", "k", "v", "o"] {
                            p.insert_uniform(
                                &format!("tf.{l}.{att}.w_{m}"),
                                head,
                                &[e, e],
                                e,
                                rng,
                            )?;
                            p.insert_uniform(&format!("tf.{l}.{att}.b_{m}"), head, &[e], e, rng)?;
                        }
                    }
                    p.insert_uniform(&format!("tf.{l}.ff1.w"), head, &[e, 2 * e], e, rng)?;
                    p.insert_uniform(&format!("tf.{l}.ff1.b"), head, &[2 * e], e, rng)?;
                    p.insert_uniform(&format!("tf.{l}.ff2.w"), head, &[2 * e, e], 2 * e, rng)?;
                    p.insert_uniform(&format!("tf.{l}.ff2.b"), head, &[e], 2 * e, rng)?;
                    for ln in 0..3 {
                        p.insert_constant(&format!("tf.{l}.ln{ln}.gamma"), head, &[e], 1.0)?;
                        p.insert_constant(&format!("tf.{l}.ln{ln}.beta"), head, &[e], 0.0)?;
                    }
                }
                p.insert_uniform("out.w", head, &[e, n + 1], e, rng)?;
                p.insert_uniform("out.b", head, &[n + 1], e, rng)?;
            }
        }
        Ok(Self {
            config,
            n_labels,
            d_in,
            params: p,
            bn_stats,
        })
    }

    /// Index of the end-of-sequence token (also the start token's embedding row).
    pub fn eos(&self) -> usize {
        self.n_labels
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Result<Var, PredictorError> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| PredictorError::MissingParameter(name.to_string()))?;
        Ok(tape.param(&self.params, id))
    }

    fn check_features(&self, features: &Tensor) -> Result<(usize, usize), PredictorError> {
        match *features.shape() {
            [b, w, h, d] if d == self.d_in => Ok((b, w * h)),
            ref s => Err(PredictorError::Engine(EngineError::Shape(format!(
                "features must be [B, w, h, {}], got {s:?}",
                self.d_in
            )))),
        }
    }

    /// Adapter output per grid cell, `[B, cells, E]`.
    fn adapt(&self, tape: &mut Tape, features: &Tensor) -> Result<Var, PredictorError> {
        let (b, cells) = self.check_features(features)?;
        let x = tape.constant(features.clone());
        let w = self.p(tape, "adapter.w")?;
        let bias = self.p(tape, "adapter.b")?;
        let a = linear(tape, x, w, bias)?;
        Ok(tape.reshape(a, &[b, cells, self.config.embedding_size])?)
    }

    /// Feed-forward pass on a batch of feature grids `[B, w, h, d]`.
    pub fn ff_forward<R: Rng>(
        &mut self,
        tape: &mut Tape,
        features: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<FfOutput, PredictorError> {
        if self.config.variant != Variant::Ff {
            return Err(PredictorError::VariantMismatch {
                expected: "feed-forward",
                actual: self.config.variant,
            });
        }
        let cells = self.adapt(tape, features)?;
        // [B, C, E] pooled over C; reshape so the grid axes come last but one.
        let (b, c, e) = {
            let s = tape.shape(cells);
            (s[0], s[1], s[2])
        };
        let grid = tape.reshape(cells, &[b, c, 1, e])?;
        let mut h = global_avg_pool(tape, grid)?;
        for l in 0..self.config.l_f {
            let w = self.p(tape, &format!("ff.{l}.w"))?;
            let bias = self.p(tape, &format!("ff.{l}.b"))?;
            let gamma = self.p(tape, &format!("ff.{l}.gamma"))?;
            let beta = self.p(tape, &format!("ff.{l}.beta"))?;
            let z = linear(tape, h, w, bias)?;
            let z = tape.dropout(z, self.config.dropout, mode, rng)?;
            let z = tape.batch_norm(z, gamma, beta, &mut self.bn_stats[l], mode)?;
            h = tape.relu(z)?;
        }
        let w = self.p(tape, "out.w")?;
        let bias = self.p(tape, "out.b")?;
        let logits = linear(tape, h, w, bias)?;
        let label_probs = match self.config.ff_activation {
            FfActivation::Sigmoid => tape.sigmoid(logits)?,
            FfActivation::Softmax => tape.softmax(logits, 1)?,
        };
        let cardinality = match self.config.cardinality_head {
            CardinalityHead::None => None,
            head => {
                let w = self.p(tape, "card.w")?;
                let bias = self.p(tape, "card.b")?;
                let z = linear(tape, h, w, bias)?;
                Some(match head {
                    CardinalityHead::Categorical => tape.softmax(z, 1)?,
                    _ => {
                        let z = tape.clamp(z, -ALPHA_LOGIT_BOUND, ALPHA_LOGIT_BOUND)?;
                        tape.exp(z)?
                    }
                })
            }
        };
        Ok(FfOutput {
            label_probs,
            cardinality,
        })
    }

    fn require_ar(&self) -> Result<(), PredictorError> {
        if !self.config.variant.is_autoregressive() {
            return Err(PredictorError::VariantMismatch {
                expected: "auto-regressive",
                actual: self.config.variant,
            });
        }
        Ok(())
    }

    /// Starts decoding a batch: adapts the grid and zeroes recurrent state.
    pub fn ar_begin(&self, tape: &mut Tape, features: &Tensor) -> Result<ArState, PredictorError> {
        self.require_ar()?;
        let cells = self.adapt(tape, features)?;
        let b = tape.shape(cells)[0];
        let e = self.config.embedding_size;
        let (keys, hidden) = if self.config.variant == Variant::Lstm {
            let att = self.attention(tape)?;
            let keys = att.keys(tape, cells)?;
            let h = tape.constant(Tensor::zeros(&[b, e]));
            let c = tape.constant(Tensor::zeros(&[b, e]));
            (Some(keys), Some((h, c)))
        } else {
            (None, None)
        };
        Ok(ArState {
            batch: b,
            cells,
            keys,
            hidden,
            inputs: vec![Vec::new(); b],
        })
    }

    fn attention(&self, tape: &mut Tape) -> Result<AdditiveAttention, PredictorError> {
        Ok(AdditiveAttention {
            w_query: self.p(tape, "att.w_query")?,
            w_key: self.p(tape, "att.w_key")?,
            v: self.p(tape, "att.v")?,
        })
    }

    /// One decoding step. `prev[i]` is the previous token of sample `i` (the
    /// eos index doubles as the start token) and `masks[i]` the labels already
    /// emitted, whose logits are forced to the mask sentinel.
    pub fn ar_step<R: Rng>(
        &self,
        tape: &mut Tape,
        state: &mut ArState,
        prev: &[usize],
        masks: &[Vec<usize>],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, PredictorError> {
        self.require_ar()?;
        if prev.len() != state.batch || masks.len() != state.batch {
            return Err(PredictorError::MalformedTarget(format!(
                "step inputs for {} samples, batch is {}",
                prev.len(),
                state.batch
            )));
        }
        if let Some(&bad) = prev.iter().find(|&&t| t > self.n_labels) {
            return Err(PredictorError::MalformedTarget(format!(
                "token {bad} out of range"
            )));
        }
        let logits = match self.config.variant {
            Variant::Lstm => self.lstm_step(tape, state, prev, mode, rng)?,
            _ => {
                for (seq, &t) in state.inputs.iter_mut().zip(prev) {
                    seq.push(t);
                }
                let t = state.inputs[0].len();
                if t > self.n_labels + 1 {
                    return Err(PredictorError::MalformedTarget(format!(
                        "{t} steps exceed the {} positions",
                        self.n_labels + 1
                    )));
                }
                let all = self.tf_stack(tape, state.cells, &state.inputs, mode, rng)?;
                let v = self.n_labels + 1;
                let flat = tape.reshape(all, &[state.batch * t, v])?;
                let last: Vec<usize> = (0..state.batch).map(|i| i * t + t - 1).collect();
                tape.gather_rows(flat, &last)?
            }
        };
        Ok(tape.masked_fill(logits, masks, MASK_SENTINEL)?)
    }

    fn lstm_step<R: Rng>(
        &self,
        tape: &mut Tape,
        state: &mut ArState,
        prev: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, PredictorError> {
        let att = self.attention(tape)?;
        let weights = LstmWeights {
            w_x: self.p(tape, "lstm.w_x")?,
            w_h: self.p(tape, "lstm.w_h")?,
            bias: self.p(tape, "lstm.b")?,
        };
        let embed = self.p(tape, "embed")?;
        let (h, c) = state.hidden.expect("lstm state");
        let keys = state.keys.expect("lstm keys");
        let emb = tape.gather_rows(embed, prev)?;
        let (ctx, _) = att.attend(tape, h, keys, state.cells)?;
        let x = tape.concat(&[emb, ctx])?;
        let (h, c) = lstm_step(tape, x, h, c, &weights)?;
        state.hidden = Some((h, c));
        let h_out = tape.dropout(h, self.config.dropout, mode, rng)?;
        let joint = tape.concat(&[h_out, ctx])?;
        let w = self.p(tape, "out.w")?;
        let b = self.p(tape, "out.b")?;
        Ok(linear(tape, joint, w, b)?)
    }

    /// Transformer decoder over input token sequences of equal length,
    /// returning unmasked logits `[B, T, N + 1]`.
    fn tf_stack<R: Rng>(
        &self,
        tape: &mut Tape,
        memory: Var,
        inputs: &[Vec<usize>],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, PredictorError> {
        let b = inputs.len();
        let t = inputs[0].len();
        let e = self.config.embedding_size;
        let heads = self.config.n_att;
        let flat: Vec<usize> = inputs.iter().flatten().copied().collect();
        let embed = self.p(tape, "embed")?;
        let pos = self.p(tape, "pos")?;
        let x = tape.gather_rows(embed, &flat)?;
        let x = tape.reshape(x, &[b, t, e])?;
        let positions: Vec<usize> = (0..t).collect();
        let pe = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(x, pe)?;
        let mut causal = vec![0.0f32; t * t];
        for q in 0..t {
            causal[q * t + q + 1..(q + 1) * t].fill(MASK_SENTINEL);
        }
        let causal = tape.constant(Tensor::new(vec![t, t], causal)?);
        for l in 0..self.config.l_t {
            let sa = self.projections(tape, l, "self")?;
            let ca = self.projections(tape, l, "cross")?;
            let y = multi_head_attention(tape, x, x, x, heads, &sa, Some(causal))?;
            x = self.residual(tape, x, y, l, 0, mode, rng)?;
            let y = multi_head_attention(tape, x, memory, memory, heads, &ca, None)?;
            x = self.residual(tape, x, y, l, 1, mode, rng)?;
            let w1 = self.p(tape, &format!("tf.{l}.ff1.w"))?;
            let b1 = self.p(tape, &format!("tf.{l}.ff1.b"))?;
            let w2 = self.p(tape, &format!("tf.{l}.ff2.w"))?;
            let b2 = self.p(tape, &format!("tf.{l}.ff2.b"))?;
            let y = linear(tape, x, w1, b1)?;
            let y = tape.relu(y)?;
            let y = linear(tape, y, w2, b2)?;
            x = self.residual(tape, x, y, l, 2, mode, rng)?;
        }
        let w = self.p(tape, "out.w")?;
        let bias = self.p(tape, "out.b")?;
        Ok(linear(tape, x, w, bias)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn residual<R: Rng>(
        &self,
        tape: &mut Tape,
        x: Var,
        y: Var,
        layer: usize,
        ln: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, PredictorError> {
        let y = tape.dropout(y, self.config.dropout, mode, rng)?;
        let s = tape.add(x, y)?;
        let g = self.p(tape, &format!("tf.{layer}.ln{ln}.gamma"))?;
        let b = self.p(tape, &format!("tf.{layer}.ln{ln}.beta"))?;
        Ok(tape.layer_norm(s, g, b)?)
    }

    fn projections(
        &self,
        tape: &mut Tape,
        layer: usize,
        kind: &str,
    ) -> Result<AttentionProjections, PredictorError> {
        let mut get = |m: &str| self.p(tape, &format!("tf.{layer}.{kind}.{m}"));
        Ok(AttentionProjections {
            w_q: get("w_q")?,
            b_q: get("b_q")?,
            w_k: get("w_k")?,
            b_k: get("b_k")?,
            w_v: get("w_v")?,
            b_v: get("b_v")?,
            w_o: get("w_o")?,
            b_o: get("b_o")?,
        })
    }

    /// Teacher-forced pass: step `t` of sample `i` sees the ground-truth
    /// prefix `S_i[..t]`, and labels in that prefix are masked.
    pub fn autoregressive_forward<R: Rng>(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        targets: &[SequenceTarget],
        mode: Mode,
        rng: &mut R,
    ) -> Result<ArOutput, PredictorError> {
        self.require_ar()?;
        let (b, _) = self.check_features(features)?;
        if targets.len() != b {
            return Err(PredictorError::MalformedTarget(format!(
                "{} targets for a batch of {b}",
                targets.len()
            )));
        }
        let eos = self.eos();
        for (i, s) in targets.iter().enumerate() {
            let well_formed = s.n_labels == self.n_labels
                && s.tokens.last() == Some(&eos)
                && crate::data::validate_labels(s.labels(), self.n_labels).is_ok();
            if !well_formed {
                return Err(PredictorError::MalformedTarget(format!(
                    "sample {i}: {:?}",
                    s.tokens
                )));
            }
        }
        let lengths: Vec<usize> = targets.iter().map(|s| s.tokens.len()).collect();
        let t = *lengths.iter().max().unwrap_or(&1);
        // Input at step s is the token emitted at s - 1; padding repeats eos.
        let inputs: Vec<Vec<usize>> = targets
            .iter()
            .map(|s| {
                (0..t)
                    .map(|step| {
                        if step == 0 {
                            eos
                        } else {
                            *s.tokens.get(step - 1).unwrap_or(&eos)
                        }
                    })
                    .collect()
            })
            .collect();
        let masks_at = |step: usize| -> Vec<Vec<usize>> {
            targets
                .iter()
                .map(|s| s.labels()[..step.min(s.cardinality())].to_vec())
                .collect()
        };
        let v = self.n_labels + 1;
        let logits = match self.config.variant {
            Variant::Lstm => {
                let mut state = self.ar_begin(tape, features)?;
                let mut steps = Vec::with_capacity(t);
                for step in 0..t {
                    let prev: Vec<usize> = inputs.iter().map(|s| s[step]).collect();
                    steps.push(self.ar_step(
                        tape,
                        &mut state,
                        &prev,
                        &masks_at(step),
                        mode,
                        rng,
                    )?);
                }
                let joined = tape.concat(&steps)?;
                tape.reshape(joined, &[b, t, v])?
            }
            _ => {
                let memory = self.adapt(tape, features)?;
                let all = self.tf_stack(tape, memory, &inputs, mode, rng)?;
                let mut masks = Vec::with_capacity(b * t);
                for s in targets {
                    for step in 0..t {
                        masks.push(s.labels()[..step.min(s.cardinality())].to_vec());
                    }
                }
                tape.masked_fill(all, &masks, MASK_SENTINEL)?
            }
        };
        Ok(ArOutput { logits, lengths })
    }
}
