//! Datasets of feature grids paired with ordered label lists.

mod encode;
mod fset;
mod stats;
mod synthetic;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Tensor;

pub use encode::{encode_binary, encode_sequence, validate_labels, OrderPolicy, SequenceTarget};
pub use fset::{manifest_path, read_features, write_features, Manifest, FSET_MAGIC, FSET_VERSION};
pub use stats::{dataset_stats, DatasetStats};
pub use synthetic::{generate_synthetic, LabelOrder, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic: expected \"FSET\"")]
    BadMagic,
    #[error("unsupported FSET version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("dimension inconsistency: {0}")]
    Inconsistent(String),
    #[error("invalid synthetic spec field `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("invalid labels: {0}")]
    InvalidLabels(String),
    #[error("invalid dictionary: {0}")]
    InvalidDictionary(String),
    #[error("empty dataset")]
    Empty,
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered list of unique label names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Dictionary {
    labels: Vec<String>,
}

impl Dictionary {
    pub fn new(labels: Vec<String>) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::InvalidDictionary(
                "needs at least one label".into(),
            ));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(DataError::InvalidDictionary(format!(
                    "duplicate label `{l}`"
                )));
            }
        }
        Ok(Self { labels })
    }

    /// `label_00`, `label_01`, ...
    pub fn numbered(n: usize) -> Result<Self, DataError> {
        let width = n.saturating_sub(1).to_string().len().max(2);
        Self::new((0..n).map(|i| format!("label_{i:0width$}")).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

impl TryFrom<Vec<String>> for Dictionary {
    type Error = DataError;

    fn try_from(labels: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(labels)
    }
}

impl From<Dictionary> for Vec<String> {
    fn from(d: Dictionary) -> Self {
        d.labels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// A feature grid `[w, h, d]` and its ordered labels (empty = empty set).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Spatial grid geometry shared by every sample of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub w: usize,
    pub h: usize,
    pub d: usize,
}

impl GridShape {
    pub fn cells(&self) -> usize {
        self.w * self.h
    }

    pub fn numel(&self) -> usize {
        self.w * self.h * self.d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub dictionary: Dictionary,
    pub grid: GridShape,
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
    pub spec: Option<SyntheticSpec>,
}

impl Dataset {
    /// Assembles a dataset, checking every sample against the dictionary and grid.
    pub fn new(
        name: impl Into<String>,
        dictionary: Dictionary,
        grid: GridShape,
        samples: Vec<Sample>,
        splits: Vec<Split>,
    ) -> Result<Self, DataError> {
        if samples.len() != splits.len() {
            return Err(DataError::Inconsistent(format!(
                "{} samples but {} split tags",
                samples.len(),
                splits.len()
            )));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.shape() != [grid.w, grid.h, grid.d] {
                return Err(DataError::Inconsistent(format!(
                    "sample {i} has features {:?}, expected [{}, {}, {}]",
                    s.features.shape(),
                    grid.w,
                    grid.h,
                    grid.d
                )));
            }
            validate_labels(&s.labels, dictionary.len())?;
        }
        Ok(Self {
            name: name.into(),
            seed: 0,
            dictionary,
            grid,
            samples,
            splits,
            spec: None,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.dictionary.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of the samples assigned to `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_empty_sets(&self, split: Option<Split>) -> bool {
        self.samples
            .iter()
            .zip(&self.splits)
            .any(|(s, &sp)| s.labels.is_empty() && split.is_none_or(|want| want == sp))
    }

    pub fn max_cardinality(&self, split: Split) -> usize {
        self.indices(split)
            .into_iter()
            .map(|i| self.samples[i].labels.len())
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dictionary_rejects_duplicates_and_empty() {
        assert!(Dictionary::new(vec![]).is_err());
        assert!(Dictionary::new(vec!["a".into(), "a".into()]).is_err());
        assert_eq!(Dictionary::numbered(3).unwrap().name(2), Some("label_02"));
    }

    #[test]
    fn split_tags_round_trip() {
        for s in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(Split::from_tag(s.tag()), Some(s));
        }
        assert_eq!(Split::from_tag(3), None);
    }
}
