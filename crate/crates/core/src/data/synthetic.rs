use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Dictionary, GridShape, Sample, Split};
use crate::engine::Tensor;

/// How labels are ordered inside each generated sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelOrder {
    /// Ascending label index.
    Canonical,
    /// Uniformly shuffled per sample.
    Random,
}

/// Parameters of the synthetic feature-grid generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_labels: usize,
    pub feature_dim: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Mean of the Poisson cardinality distribution before truncation.
    pub mean_cardinality: f64,
    pub max_cardinality: usize,
    pub p_empty: f64,
    /// Zipf exponent of label popularity; 0 gives uniform popularity.
    pub zipf_exponent: f64,
    pub noise_sigma: f64,
    pub order: LabelOrder,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SyntheticSpec {
    /// The standard desk-scale preset.
    fn default() -> Self {
        Self {
            n_labels: 20,
            feature_dim: 32,
            grid_w: 4,
            grid_h: 4,
            mean_cardinality: 3.0,
            max_cardinality: 8,
            p_empty: 0.05,
            zipf_exponent: 1.0,
            noise_sigma: 0.3,
            order: LabelOrder::Canonical,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> DataError {
    DataError::InvalidSpec {
        field,
        reason: reason.into(),
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_labels == 0 {
            return Err(invalid("n_labels", "must be at least 1"));
        }
        if self.feature_dim == 0 {
            return Err(invalid("feature_dim", "must be at least 1"));
        }
        if self.grid_w == 0 {
            return Err(invalid("grid_w", "must be at least 1"));
        }
        if self.grid_h == 0 {
            return Err(invalid("grid_h", "must be at least 1"));
        }
        if !(self.mean_cardinality.is_finite() && self.mean_cardinality > 0.0) {
            return Err(invalid("mean_cardinality", "must be positive"));
        }
        if self.max_cardinality == 0 || self.max_cardinality > self.n_labels {
            return Err(invalid(
                "max_cardinality",
                format!("must be in 1..={}", self.n_labels),
            ));
        }
        if !(0.0..1.0).contains(&self.p_empty) {
            return Err(invalid("p_empty", "must be in [0, 1)"));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(invalid("zipf_exponent", "must be non-negative"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(invalid("noise_sigma", "must be non-negative"));
        }
        if self.n_train + self.n_val + self.n_test == 0 {
            return Err(invalid("n_train", "dataset would be empty"));
        }
        Ok(())
    }

    /// Probabilities of K = 1..=max_cardinality under the truncated Poisson.
    fn cardinality_pmf(&self) -> Vec<f64> {
        let ln_mu = self.mean_cardinality.ln();
        let mut ln_fact = 0.0;
        let mut logs = Vec::with_capacity(self.max_cardinality);
        for k in 1..=self.max_cardinality {
            ln_fact += (k as f64).ln();
            logs.push(k as f64 * ln_mu - ln_fact);
        }
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }
}

fn draw_index<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // rounding left us past the end: last positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Generates a dataset as a pure function of `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n_labels;
    let d = spec.feature_dim;
    let grid = GridShape {
        w: spec.grid_w,
        h: spec.grid_h,
        d,
    };

    let prototypes: Vec<f32> = (0..n * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let popularity: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((i + 1) as f64).powf(spec.zipf_exponent))
        .collect();
    let pmf = spec.cardinality_pmf();
    let sigma = spec.noise_sigma as f32;

    let total = spec.n_train + spec.n_val + spec.n_test;
    let mut samples = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    for i in 0..total {
        let labels = if rng.gen::<f64>() < spec.p_empty {
            Vec::new()
        } else {
            let k = 1 + draw_index(&pmf, &mut rng);
            let mut weights = popularity.clone();
            let mut chosen = Vec::with_capacity(k);
            for _ in 0..k {
                let l = draw_index(&weights, &mut rng);
                weights[l] = 0.0;
                chosen.push(l);
            }
            match spec.order {
                LabelOrder::Canonical => chosen.sort_unstable(),
                LabelOrder::Random => rand::seq::SliceRandom::shuffle(&mut chosen[..], &mut rng),
            }
            chosen
        };

        let mut features = Vec::with_capacity(grid.numel());
        for _ in 0..grid.cells() {
            let owner = if labels.is_empty() {
                None
            } else {
                Some(labels[rng.gen_range(0..labels.len())])
            };
            for c in 0..d {
                let base = owner.map_or(0.0, |l| prototypes[l * d + c]);
                let noise: f32 = StandardNormal.sample(&mut rng);
                features.push(base + sigma * noise);
            }
        }
        samples.push(Sample {
            features: Tensor::new(vec![grid.w, grid.h, d], features)
                .map_err(|e| DataError::Inconsistent(e.to_string()))?,
            labels,
        });
        splits.push(if i < spec.n_train {
            Split::Train
        } else if i < spec.n_train + spec.n_val {
            Split::Val
        } else {
            Split::Test
        });
    }

    let mut ds = Dataset::new(
        format!("synthetic-{seed}"),
        Dictionary::numbered(n)?,
        grid,
        samples,
        splits,
    )?;
    ds.seed = seed;
    ds.spec = Some(spec.clone());
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_labels: 5,
            feature_dim: 4,
            grid_w: 2,
            grid_h: 2,
            max_cardinality: 3,
            n_train: 30,
            n_val: 5,
            n_test: 5,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_synthetic(&small(), 9).unwrap();
        let b = generate_synthetic(&small(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(), 10).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn all_empty_when_p_empty_near_one() {
        // p_empty must stay below 1; with a draw below 0.999999 always empty in practice
        let spec = SyntheticSpec {
            p_empty: 0.999_999_999,
            ..small()
        };
        let ds = generate_synthetic(&spec, 1).unwrap();
        assert!(ds.samples.iter().all(|s| s.labels.is_empty()));
    }

    #[test]
    fn cardinalities_respect_bounds() {
        let ds = generate_synthetic(&small(), 2).unwrap();
        for s in &ds.samples {
            assert!(s.labels.len() <= 3);
        }
        assert_eq!(ds.indices(Split::Train).len(), 30);
        assert_eq!(ds.indices(Split::Val).len(), 5);
        assert_eq!(ds.indices(Split::Test).len(), 5);
    }

    #[test]
    fn canonical_order_is_ascending() {
        let ds = generate_synthetic(&small(), 3).unwrap();
        for s in &ds.samples {
            assert!(s.labels.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn invalid_fields_are_named() {
        let bad = SyntheticSpec {
            p_empty: 1.0,
            ..small()
        };
        match generate_synthetic(&bad, 0) {
            Err(DataError::InvalidSpec { field, .. }) => assert_eq!(field, "p_empty"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = SyntheticSpec {
            max_cardinality: 6,
            ..small()
        };
        assert!(matches!(
            bad.validate(),
            Err(DataError::InvalidSpec {
                field: "max_cardinality",
                ..
            })
        ));
    }

    #[test]
    fn pmf_is_normalised_over_support() {
        let pmf = small().cardinality_pmf();
        assert_eq!(pmf.len(), 3);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
