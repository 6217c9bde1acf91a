//! The thirteen model families and their hyperparameters.

use crate::data::Dataset;
use crate::decode::{DecodeKind, DecodeRule};
use crate::hyperband::{Config, SearchSpace};
use crate::losses::{CardinalityLoss, LossSpec, PrimaryLoss};
use crate::predictors::{CardinalityHead, FfActivation, PredictorConfig, TargetOrder, Variant};
use crate::trainer::{TrainConfig, TrainSetup};

/// A (predictor, loss, decode rule) combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Family {
    pub name: &'static str,
    pub variant: Variant,
    pub primary: PrimaryLoss,
    pub head: CardinalityHead,
    pub set_pooled: bool,
    pub order: TargetOrder,
    pub decode: DecodeKind,
    pub activation: FfActivation,
}

const fn ff(name: &'static str, primary: PrimaryLoss, head: CardinalityHead) -> Family {
    let activation = match primary {
        PrimaryLoss::Td => FfActivation::Softmax,
        _ => FfActivation::Sigmoid,
    };
    let decode = match (head, primary) {
        (CardinalityHead::None, PrimaryLoss::Td) => DecodeKind::Cumulative,
        (CardinalityHead::None, _) => DecodeKind::Threshold,
        _ => DecodeKind::TopkFromCardinality,
    };
    Family {
        name,
        variant: Variant::Ff,
        primary,
        head,
        set_pooled: false,
        order: TargetOrder::Dataset,
        decode,
        activation,
    }
}

const fn ar(name: &'static str, variant: Variant, order: TargetOrder, set_pooled: bool) -> Family {
    Family {
        name,
        variant,
        primary: if set_pooled {
            PrimaryLoss::PooledBce
        } else {
            PrimaryLoss::CeSteps
        },
        head: CardinalityHead::None,
        set_pooled,
        order,
        decode: DecodeKind::Autoregressive,
        activation: FfActivation::Sigmoid,
    }
}

pub const FAMILIES: [Family; 13] = [
    ff("FF_BCE", PrimaryLoss::Bce, CardinalityHead::None),
    ff("FF_sIoU", PrimaryLoss::SIoU, CardinalityHead::None),
    ff("FF_TD", PrimaryLoss::Td, CardinalityHead::None),
    ff("FF_BCE,C", PrimaryLoss::Bce, CardinalityHead::Categorical),
    ff(
        "FF_BCE,DC",
        PrimaryLoss::Bce,
        CardinalityHead::DirichletCategorical,
    ),
    ff("FF_sIoU,C", PrimaryLoss::SIoU, CardinalityHead::Categorical),
    ff("FF_TD,C", PrimaryLoss::Td, CardinalityHead::Categorical),
    ar("LSTM", Variant::Lstm, TargetOrder::Dataset, false),
    ar("LSTM_shuffle", Variant::Lstm, TargetOrder::Shuffle, false),
    ar("LSTM_set", Variant::Lstm, TargetOrder::Dataset, true),
    ar("TF", Variant::Tf, TargetOrder::Dataset, false),
    ar("TF_shuffle", Variant::Tf, TargetOrder::Shuffle, false),
    ar("TF_set", Variant::Tf, TargetOrder::Dataset, true),
];

/// Looks a family up by its exact name.
pub fn family(name: &str) -> Option<&'static Family> {
    FAMILIES.iter().find(|f| f.name == name)
}

/// Values of `lambda_C` and `lambda_eos` explored by the tuner.
const LAMBDAS: [f64; 7] = [1e-3, 1e-2, 1e-1, 0.5, 1.0, 10.0, 100.0];

/// Hyperparameter names accepted in configs, with what they control.
pub const HYPER_KEYS: [&str; 14] = [
    "embedding_size",
    "lr",
    "adapter_lr_scale",
    "dropout",
    "weight_decay",
    "l_f",
    "l_t",
    "n_att",
    "lambda_c",
    "lambda_eos",
    "batch_size",
    "patience",
    "eval_every",
    "threshold",
];

impl Family {
    pub fn cardinality_loss(&self) -> CardinalityLoss {
        match self.head {
            CardinalityHead::None => CardinalityLoss::None,
            CardinalityHead::Categorical => CardinalityLoss::CategoricalCe,
            CardinalityHead::DirichletCategorical => CardinalityLoss::DirichletCategoricalNll,
        }
    }

    /// Losses built on a target distribution are undefined for empty sets.
    pub fn handles_empty_sets(&self) -> bool {
        self.primary != PrimaryLoss::Td
    }

    pub fn check_dataset(&self, ds: &Dataset) -> Result<(), String> {
        if !self.handles_empty_sets() && ds.has_empty_sets(None) {
            return Err(format!(
                "{} cannot handle empty sets, and dataset `{}` contains some",
                self.name, ds.name
            ));
        }
        Ok(())
    }

    /// Default hyperparameters for single runs.
    pub fn defaults(&self) -> Config {
        let mut c = Config::new();
        c.insert("embedding_size".into(), 128.0);
        c.insert("lr".into(), 1e-3);
        c.insert("adapter_lr_scale".into(), 1.0);
        c.insert("dropout".into(), 0.1);
        c.insert("weight_decay".into(), 0.0);
        c.insert("batch_size".into(), 32.0);
        c.insert("patience".into(), 10.0);
        c.insert("eval_every".into(), 1.0);
        c.insert("threshold".into(), 0.5);
        match self.variant {
            Variant::Ff => {
                c.insert("l_f".into(), 1.0);
            }
            Variant::Tf => {
                c.insert("l_t".into(), 1.0);
                c.insert("n_att".into(), 4.0);
            }
            Variant::Lstm => {}
        }
        if self.head != CardinalityHead::None {
            c.insert("lambda_c".into(), 1.0);
        }
        if self.set_pooled {
            c.insert("lambda_eos".into(), 1.0);
        }
        c
    }

    /// The tuner's categorical search space.
    pub fn search_space(&self) -> SearchSpace {
        let mut s = SearchSpace::default()
            .with("embedding_size", &[256.0, 512.0, 1024.0, 2048.0])
            .with("lr", &[1e-4, 1e-3, 1e-2])
            .with("adapter_lr_scale", &[1e-2, 1e-1])
            .with("dropout", &[0.0, 0.1, 0.3, 0.5])
            .with("weight_decay", &[0.0, 1e-4]);
        match self.variant {
            Variant::Ff => s = s.with("l_f", &[0.0, 1.0, 2.0, 3.0]),
            Variant::Tf => {
                s = s
                    .with("l_t", &[1.0, 2.0, 3.0])
                    .with("n_att", &[2.0, 4.0, 8.0])
            }
            Variant::Lstm => {}
        }
        match self.head {
            CardinalityHead::None => {}
            CardinalityHead::Categorical => s = s.with("lambda_c", &LAMBDAS),
            CardinalityHead::DirichletCategorical => s = s.with("lambda_c", &[1.0]),
        }
        if self.set_pooled {
            s = s.with("lambda_eos", &LAMBDAS);
        }
        s
    }

    /// Full training setup from hyperparameters; missing keys take defaults.
    pub fn setup(&self, hyper: &Config, seed: u64, stream: u64) -> Result<TrainSetup, String> {
        for key in hyper.keys() {
            if !HYPER_KEYS.contains(&key.as_str()) {
                return Err(format!("unknown hyperparameter `{key}`"));
            }
        }
        let mut h = self.defaults();
        h.extend(hyper.iter().map(|(k, v)| (k.clone(), *v)));
        let count = |key: &str| -> Result<usize, String> {
            let v = h.get(key).copied().unwrap_or(0.0);
            if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
                return Err(format!("`{key}` must be a non-negative integer, got {v}"));
            }
            Ok(v as usize)
        };
        let mut p = PredictorConfig::new(self.variant);
        p.embedding_size = count("embedding_size")?;
        p.dropout = h["dropout"] as f32;
        p.cardinality_head = self.head;
        p.set_pooled = self.set_pooled;
        p.label_order = self.order;
        p.ff_activation = self.activation;
        if self.variant == Variant::Ff {
            p.l_f = count("l_f")?;
        }
        if self.variant == Variant::Tf {
            p.l_t = count("l_t")?;
            p.n_att = count("n_att")?;
        }
        p.validate().map_err(|e| e.to_string())?;

        let mut loss = LossSpec::new(self.primary);
        loss.cardinality = self.cardinality_loss();
        loss.lambda_c = h.get("lambda_c").copied().unwrap_or(0.0);
        loss.lambda_eos = h.get("lambda_eos").copied().unwrap_or(0.0);
        loss.validate().map_err(|e| e.to_string())?;

        let mut decode = DecodeRule::new(self.decode);
        decode.threshold = h["threshold"] as f32;
        decode.validate().map_err(|e| e.to_string())?;

        let train = TrainConfig {
            lr: h["lr"],
            adapter_lr_scale: h["adapter_lr_scale"],
            weight_decay: h["weight_decay"],
            batch_size: count("batch_size")?,
            max_epochs: 0,
            patience: count("patience")?,
            seed,
            stream,
            eval_every: count("eval_every")?,
        };
        train.validate().map_err(|e| e.to_string())?;
        Ok(TrainSetup {
            predictor: p,
            loss,
            decode,
            train,
        })
    }
}

/// File-name-safe form of a family name.
pub fn slug(name: &str) -> String {
    name.replace(',', "_")
}
