use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Split};

/// Summary statistics of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_labels: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub mean_cardinality: f64,
    /// Population standard deviation of K.
    pub std_cardinality: f64,
    /// `histogram[k]` = number of samples with K = k.
    pub histogram: Vec<usize>,
    pub empty_sets: usize,
}

pub fn dataset_stats(ds: &Dataset) -> Result<DatasetStats, DataError> {
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let ks: Vec<usize> = ds.samples.iter().map(|s| s.labels.len()).collect();
    let n = ks.len() as f64;
    let mean = ks.iter().sum::<usize>() as f64 / n;
    let var = ks.iter().map(|&k| (k as f64 - mean).powi(2)).sum::<f64>() / n;
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut histogram = vec![0; max_k + 1];
    for &k in &ks {
        histogram[k] += 1;
    }
    Ok(DatasetStats {
        n_labels: ds.n_labels(),
        n_train: ds.indices(Split::Train).len(),
        n_val: ds.indices(Split::Val).len(),
        n_test: ds.indices(Split::Test).len(),
        mean_cardinality: mean,
        std_cardinality: var.sqrt(),
        histogram: histogram.clone(),
        empty_sets: histogram[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dictionary, GridShape, Sample};
    use crate::engine::Tensor;

    fn with_cardinalities(ks: &[usize]) -> Dataset {
        let grid = GridShape { w: 1, h: 1, d: 1 };
        let samples = ks
            .iter()
            .map(|&k| Sample {
                features: Tensor::zeros(&[1, 1, 1]),
                labels: (0..k).collect(),
            })
            .collect();
        Dataset::new(
            "t",
            Dictionary::numbered(4).unwrap(),
            grid,
            samples,
            vec![Split::Train; ks.len()],
        )
        .unwrap()
    }

    #[test]
    fn constant_cardinality_has_zero_spread() {
        let s = dataset_stats(&with_cardinalities(&[2, 2, 2])).unwrap();
        assert_eq!(s.mean_cardinality, 2.0);
        assert_eq!(s.std_cardinality, 0.0);
    }

    #[test]
    fn one_and_three_give_mean_two_std_one() {
        let s = dataset_stats(&with_cardinalities(&[1, 3, 1, 3])).unwrap();
        assert_eq!(s.mean_cardinality, 2.0);
        assert_eq!(s.std_cardinality, 1.0);
        assert_eq!(s.histogram.iter().sum::<usize>(), 4);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(
            dataset_stats(&with_cardinalities(&[])),
            Err(DataError::Empty)
        ));
    }
}
