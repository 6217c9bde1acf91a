//! Mini-batch training with Adam, early stopping on validation O-F1 and
//! exact checkpoint/resume.

mod adam;
mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{encode_binary, encode_sequence, DataError, Dataset, OrderPolicy, Split};
use crate::decode::{
    autoregressive_decode, cumulative_decode, threshold_decode, topk_decode, DecodeError,
    DecodeKind, DecodeRule,
};
use crate::engine::{EngineError, Mode, RunningStats, Tape, Tensor, Var};
use crate::losses::{
    bce, cardinality_ce, cardinality_dc, ce_steps, eos_bce, pooled_bce, siou, td, total_loss,
    CardinalityLoss, LossComponents, LossError, LossSpec, PrimaryLoss,
};
use crate::metrics::{f1_report, F1Report, MetricsError};
use crate::predictors::{Model, PredictorConfig, PredictorError, TargetOrder, Variant};

pub use adam::{adam_step, AdamHyper, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplies `lr` for the adapter group; 0 freezes the adapter.
    pub adapter_lr_scale: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epoch budget used when no explicit budget is given.
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Generator stream; independent trials of one sweep use distinct streams.
    pub stream: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            adapter_lr_scale: 1.0,
            weight_decay: 0.0,
            batch_size: 32,
            max_epochs: 30,
            patience: 10,
            seed: 0,
            stream: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr = {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.adapter_lr_scale) {
            return bad(format!(
                "adapter_lr_scale = {} not in [0, 1]",
                self.adapter_lr_scale
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay = {}", self.weight_decay));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.patience == 0 || self.eval_every == 0 {
            return bad("patience and eval_every must be at least 1".into());
        }
        Ok(())
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr_head: self.lr,
            lr_adapter: self.lr * self.adapter_lr_scale,
            weight_decay: self.weight_decay,
        }
    }
}

/// Everything that defines one training run apart from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub predictor: PredictorConfig,
    pub loss: LossSpec,
    pub decode: DecodeRule,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum TrainStatus {
    /// Still within budget (or finished it) without triggering early stopping.
    Running,
    EarlyStopped,
    Diverged(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    pub val_o_f1: Option<f64>,
}

/// Parameter values and batch-norm statistics at the best validation score.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub params: Vec<(String, Tensor)>,
    pub bn_stats: Vec<RunningStats>,
}

impl Snapshot {
    fn of(model: &Model) -> Self {
        Self {
            params: model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            bn_stats: model.bn_stats.clone(),
        }
    }

    fn apply(&self, model: &mut Model) {
        for ((_, value), p) in self.params.iter().zip(model.params.iter_mut()) {
            p.value = value.clone();
        }
        model.bn_stats = self.bn_stats.clone();
    }
}

/// Complete training state. Resuming from it reproduces exactly what an
/// uninterrupted run would have done.
pub struct Checkpoint {
    pub setup: TrainSetup,
    pub model: Model,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub evals_since_best: usize,
    pub status: TrainStatus,
    pub best: Option<Snapshot>,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    /// Fresh state: the model is initialised from the run's generator, which
    /// then continues to drive shuffling and dropout.
    pub fn new(mut setup: TrainSetup, dataset: &Dataset) -> Result<Self, TrainError> {
        setup.train.validate()?;
        setup.loss.validate()?;
        setup.decode.validate()?;
        if setup.loss.primary == PrimaryLoss::Td && dataset.has_empty_sets(None) {
            return Err(TrainError::InvalidConfig(format!(
                "target-distribution loss is undefined for empty sets, and dataset `{}` contains some",
                dataset.name
            )));
        }
        if setup.predictor.cardinality_head != crate::predictors::CardinalityHead::None
            && setup.predictor.k_max == 0
        {
            setup.predictor.k_max = default_k_max(dataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(setup.train.seed);
        rng.set_stream(setup.train.stream);
        let model = Model::build(
            setup.predictor.clone(),
            dataset.n_labels(),
            dataset.grid.d,
            &mut rng,
        )?;
        let adam = AdamState::new(&model.params);
        Ok(Self {
            setup,
            model,
            adam,
            rng,
            epoch: 0,
            best_val: None,
            best_epoch: None,
            evals_since_best: 0,
            status: TrainStatus::Running,
            best: None,
            history: Vec::new(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.status != TrainStatus::Running
    }

    /// The model with its best-validation parameters (current ones if never evaluated).
    pub fn best_model(&self) -> Result<Model, TrainError> {
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::build(
            self.model.config.clone(),
            self.model.n_labels,
            self.model.d_in,
            &mut scratch,
        )?;
        match &self.best {
            Some(b) => b.apply(&mut m),
            None => Snapshot::of(&self.model).apply(&mut m),
        }
        Ok(m)
    }

    pub fn last_train_loss(&self) -> Option<f64> {
        self.history.last().map(|h| h.train_loss)
    }
}

/// Largest training cardinality plus a margin of two.
pub fn default_k_max(dataset: &Dataset) -> usize {
    dataset.max_cardinality(Split::Train) + 2
}

/// Stacks sample grids into one `[B, w, h, d]` tensor.
pub fn batch_features(dataset: &Dataset, idx: &[usize]) -> Result<Tensor, TrainError> {
    let g = dataset.grid;
    let mut data = Vec::with_capacity(idx.len() * g.numel());
    for &i in idx {
        data.extend_from_slice(dataset.samples[i].features.data());
    }
    Ok(Tensor::new(vec![idx.len(), g.w, g.h, g.d], data)?)
}

/// Splits a shuffled index list into batches, folding a trailing single
/// sample into the previous batch (batch norm needs two rows).
pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Training objective of one batch.
pub fn batch_loss(
    model: &mut Model,
    tape: &mut Tape,
    loss: &LossSpec,
    dataset: &Dataset,
    idx: &[usize],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Var, TrainError> {
    let n = dataset.n_labels();
    let features = batch_features(dataset, idx)?;
    let labels: Vec<&[usize]> = idx
        .iter()
        .map(|&i| dataset.samples[i].labels.as_slice())
        .collect();
    let ks: Vec<usize> = labels.iter().map(|l| l.len()).collect();
    let mut multi_hot = Vec::with_capacity(idx.len() * n);
    for l in &labels {
        multi_hot.extend(encode_binary(l, n)?);
    }
    let s = Tensor::new(vec![idx.len(), n], multi_hot)?;
    let mut parts = LossComponents::default();
    if model.config.variant == Variant::Ff {
        let out = model.ff_forward(tape, &features, mode, rng)?;
        parts.primary = Some(match loss.primary {
            PrimaryLoss::Bce => bce(tape, out.label_probs, &s)?,
            PrimaryLoss::SIoU => siou(tape, out.label_probs, &s)?,
            PrimaryLoss::Td => td(tape, out.label_probs, &s)?,
            other => {
                return Err(TrainError::InvalidConfig(format!(
                    "{other:?} loss needs an auto-regressive model"
                )))
            }
        });
        if let Some(card) = out.cardinality {
            parts.cardinality = Some(match loss.cardinality {
                CardinalityLoss::DirichletCategoricalNll => cardinality_dc(tape, card, &ks)?,
                _ => cardinality_ce(tape, card, &ks)?,
            });
        }
    } else {
        let policy = match model.config.label_order {
            TargetOrder::Dataset => OrderPolicy::AsGiven,
            TargetOrder::Shuffle => OrderPolicy::Shuffled,
        };
        let targets = labels
            .iter()
            .map(|l| encode_sequence(l, n, policy, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let out = model.autoregressive_forward(tape, &features, &targets, mode, rng)?;
        match loss.primary {
            PrimaryLoss::CeSteps => {
                let tokens: Vec<Vec<usize>> = targets.into_iter().map(|t| t.tokens).collect();
                parts.primary = Some(ce_steps(tape, out.logits, &tokens)?);
            }
            PrimaryLoss::PooledBce => {
                let b = idx.len();
                let t = tape.shape(out.logits)[1];
                let probs = tape.softmax(out.logits, 2)?;
                let label_probs = tape.narrow(probs, 0, n)?;
                let eos = tape.narrow(probs, n, 1)?;
                let eos = tape.reshape(eos, &[b, t])?;
                parts.primary = Some(pooled_bce(tape, label_probs, &out.lengths, &s)?);
                parts.eos = Some(eos_bce(tape, eos, &ks)?);
            }
            other => {
                return Err(TrainError::InvalidConfig(format!(
                    "{other:?} loss needs a feed-forward model"
                )))
            }
        }
    }
    Ok(total_loss(tape, loss, parts)?)
}

/// Decodes a batch with the given rule.
pub fn predict_batch(
    model: &mut Model,
    features: &Tensor,
    rule: &DecodeRule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>, TrainError> {
    if model.config.variant.is_autoregressive() {
        return Ok(autoregressive_decode(model, features, rule, rng)?
            .into_iter()
            .map(|d| d.labels)
            .collect());
    }
    let mut tape = Tape::new();
    let out = model.ff_forward(&mut tape, features, Mode::Eval, rng)?;
    let n = model.n_labels;
    let probs = tape.data(out.label_probs);
    let card = out.cardinality.map(|c| (tape.data(c), tape.shape(c)[1]));
    let mut sets = Vec::with_capacity(probs.len() / n);
    for (i, row) in probs.chunks(n).enumerate() {
        sets.push(match rule.kind {
            DecodeKind::Threshold => threshold_decode(row, rule.threshold),
            DecodeKind::Cumulative => cumulative_decode(row),
            DecodeKind::TopkFromCardinality => {
                let (c, w) = card.ok_or_else(|| {
                    TrainError::InvalidConfig("top-K decoding needs a cardinality head".into())
                })?;
                topk_decode(row, &c[i * w..(i + 1) * w])
            }
            DecodeKind::Autoregressive => {
                return Err(TrainError::InvalidConfig(
                    "auto-regressive decoding needs an auto-regressive model".into(),
                ))
            }
        });
    }
    Ok(sets)
}

const EVAL_BATCH: usize = 128;
/// Offset separating the evaluation generator from the training one.
const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

/// Predicted sets for the given samples, in order.
pub fn predict(
    model: &mut Model,
    dataset: &Dataset,
    idx: &[usize],
    rule: &DecodeRule,
    seed: u64,
) -> Result<Vec<Vec<usize>>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SEED_SALT);
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let f = batch_features(dataset, chunk)?;
        out.extend(predict_batch(model, &f, rule, &mut rng)?);
    }
    Ok(out)
}

/// Decodes every sample of `split` and scores it.
pub fn evaluate(
    model: &mut Model,
    dataset: &Dataset,
    split: Split,
    rule: &DecodeRule,
    seed: u64,
) -> Result<F1Report, TrainError> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let pred = predict(model, dataset, &idx, rule, seed)?;
    let gt: Vec<Vec<usize>> = idx
        .iter()
        .map(|&i| dataset.samples[i].labels.clone())
        .collect();
    Ok(f1_report(&gt, &pred, dataset.n_labels())?)
}

fn diverged(e: &TrainError) -> Option<String> {
    match e {
        TrainError::Engine(EngineError::NonFinite(m))
        | TrainError::Predictor(PredictorError::Engine(EngineError::NonFinite(m)))
        | TrainError::Loss(LossError::Engine(EngineError::NonFinite(m))) => Some(m.clone()),
        _ => None,
    }
}

/// Trains until `budget_epochs` completed epochs in total, early stopping,
/// or divergence. A non-finite loss marks the run diverged instead of
/// returning an error.
pub fn train(
    ckpt: &mut Checkpoint,
    dataset: &Dataset,
    budget_epochs: usize,
) -> Result<(), TrainError> {
    if budget_epochs == 0 {
        return Err(TrainError::InvalidConfig(
            "budget must be at least one epoch".into(),
        ));
    }
    let train_idx = dataset.indices(Split::Train);
    if train_idx.len() < 2 {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if dataset.indices(Split::Val).is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }
    let cfg = ckpt.setup.train.clone();
    let hyper = cfg.adam();
    while ckpt.epoch < budget_epochs && !ckpt.is_finished() {
        let mut order = train_idx.clone();
        order.shuffle(&mut ckpt.rng);
        let mut loss_sum = 0.0f64;
        let batches = make_batches(&order, cfg.batch_size);
        for batch in &batches {
            let mut tape = Tape::new();
            let step = batch_loss(
                &mut ckpt.model,
                &mut tape,
                &ckpt.setup.loss,
                dataset,
                batch,
                Mode::Train,
                &mut ckpt.rng,
            )
            .and_then(|l| {
                let v = tape.value(l).item().unwrap_or(f32::NAN);
                if !v.is_finite() {
                    return Err(TrainError::Engine(EngineError::NonFinite("loss".into())));
                }
                ckpt.model.params.zero_grad();
                tape.backward_into(l, &mut ckpt.model.params)?;
                Ok(v)
            });
            match step {
                Ok(v) => loss_sum += v as f64,
                Err(e) => match diverged(&e) {
                    Some(m) => {
                        ckpt.status =
                            TrainStatus::Diverged(format!("epoch {}: {m}", ckpt.epoch + 1));
                        return Ok(());
                    }
                    None => return Err(e),
                },
            }
            adam_step(&mut ckpt.model.params, &mut ckpt.adam, &hyper);
        }
        ckpt.epoch += 1;
        let mut record = EpochRecord {
            epoch: ckpt.epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_o_f1: None,
        };
        if ckpt.epoch.is_multiple_of(cfg.eval_every) {
            let report = evaluate(
                &mut ckpt.model,
                dataset,
                Split::Val,
                &ckpt.setup.decode,
                cfg.seed,
            )?;
            record.val_o_f1 = Some(report.o_f1);
            if ckpt.best_val.is_none_or(|b| report.o_f1 > b) {
                ckpt.best_val = Some(report.o_f1);
                ckpt.best_epoch = Some(ckpt.epoch);
                ckpt.best = Some(Snapshot::of(&ckpt.model));
                ckpt.evals_since_best = 0;
            } else {
                ckpt.evals_since_best += 1;
                if ckpt.evals_since_best >= cfg.patience {
                    ckpt.status = TrainStatus::EarlyStopped;
                }
            }
        }
        ckpt.history.push(record);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::decode::DecodeKind;

    fn tiny() -> Dataset {
        generate_synthetic(
            &SyntheticSpec {
                n_labels: 5,
                feature_dim: 6,
                grid_w: 2,
                grid_h: 2,
                max_cardinality: 3,
                n_train: 40,
                n_val: 10,
                n_test: 10,
                ..Default::default()
            },
            1,
        )
        .unwrap()
    }

    fn setup(variant: Variant) -> TrainSetup {
        let mut predictor = PredictorConfig::new(variant);
        predictor.embedding_size = 8;
        predictor.n_att = 2;
        let (loss, decode) = match variant {
            Variant::Ff => (
                LossSpec::new(PrimaryLoss::Bce),
                DecodeRule::new(DecodeKind::Threshold),
            ),
            _ => (
                LossSpec::new(PrimaryLoss::CeSteps),
                DecodeRule::new(DecodeKind::Autoregressive),
            ),
        };
        TrainSetup {
            predictor,
            loss,
            decode,
            train: TrainConfig {
                batch_size: 8,
                ..Default::default()
            },
        }
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let b = make_batches(&[0, 1, 2, 3, 4], 2);
        assert_eq!(b, vec![vec![0, 1], vec![2, 3, 4]]);
        assert_eq!(make_batches(&[0, 1, 2, 3], 2).len(), 2);
    }

    #[test]
    fn one_epoch_budget_runs_one_pass_and_one_eval() {
        let ds = tiny();
        for v in [Variant::Ff, Variant::Lstm, Variant::Tf] {
            let mut c = Checkpoint::new(setup(v), &ds).unwrap();
            train(&mut c, &ds, 1).unwrap();
            assert_eq!(c.epoch, 1);
            assert_eq!(c.history.len(), 1);
            assert!(c.history[0].val_o_f1.is_some());
        }
    }

    #[test]
    fn checkpoint_round_trips_bytes() {
        let ds = tiny();
        let mut c = Checkpoint::new(setup(Variant::Ff), &ds).unwrap();
        train(&mut c, &ds, 2).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = tiny();
        for v in [Variant::Ff, Variant::Lstm] {
            let mut straight = Checkpoint::new(setup(v), &ds).unwrap();
            train(&mut straight, &ds, 3).unwrap();

            let mut first = Checkpoint::new(setup(v), &ds).unwrap();
            train(&mut first, &ds, 1).unwrap();
            let mut resumed = Checkpoint::from_bytes(&first.to_bytes().unwrap()).unwrap();
            train(&mut resumed, &ds, 3).unwrap();

            assert_eq!(straight.to_bytes().unwrap(), resumed.to_bytes().unwrap());
        }
    }

    #[test]
    fn zero_adapter_scale_freezes_adapter() {
        let ds = tiny();
        let mut s = setup(Variant::Ff);
        s.train.adapter_lr_scale = 0.0;
        s.train.weight_decay = 1e-4;
        let mut c = Checkpoint::new(s, &ds).unwrap();
        let before = c.model.params.by_name("adapter.w").unwrap().value.clone();
        let head_before = c.model.params.by_name("out.w").unwrap().value.clone();
        train(&mut c, &ds, 2).unwrap();
        assert_eq!(c.model.params.by_name("adapter.w").unwrap().value, before);
        assert_ne!(c.model.params.by_name("out.w").unwrap().value, head_before);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ds = tiny();
        let mut s = setup(Variant::Ff);
        s.train.lr = 0.0;
        assert!(matches!(
            Checkpoint::new(s, &ds),
            Err(TrainError::InvalidConfig(_))
        ));
        let mut s = setup(Variant::Ff);
        s.train.patience = 0;
        assert!(Checkpoint::new(s, &ds).is_err());
    }

    #[test]
    fn huge_learning_rate_diverges_without_error() {
        let ds = tiny();
        let mut s = setup(Variant::Ff);
        s.train.lr = 1e30;
        s.predictor.l_f = 0;
        let mut c = Checkpoint::new(s, &ds).unwrap();
        train(&mut c, &ds, 20).unwrap();
        assert!(
            matches!(c.status, TrainStatus::Diverged(_)),
            "{:?}",
            c.status
        );
    }
}
