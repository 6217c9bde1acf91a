//! Set-prediction metrics: O-F1, C-F1, I-F1, cardinality error, label-order
//! statistics and the normalized leaderboard ranking.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{gt} ground-truth sets but {pred} predictions")]
    LengthMismatch { gt: usize, pred: usize },
    #[error("label {label} out of range {n}")]
    LabelOutOfRange { label: usize, n: usize },
    #[error("empty score table")]
    EmptyScores,
    #[error("prediction file line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub o_f1: f64,
    pub c_f1: f64,
    pub i_f1: f64,
    /// Mean absolute cardinality difference per image.
    pub cardinality_error: f64,
    /// Half-width of its 95% confidence interval.
    pub cardinality_ci: f64,
    pub per_class: Vec<ClassCounts>,
}

/// `2 TP / (2 TP + FP + FN)`; `None` when all three are zero.
fn f1_of(tp: u64, fp: u64, fn_: u64) -> Option<f64> {
    let denom = 2 * tp + fp + fn_;
    (denom > 0).then(|| (2 * tp) as f64 / denom as f64)
}

fn as_set(labels: &[usize], n: usize) -> Result<BTreeSet<usize>, MetricsError> {
    labels
        .iter()
        .map(|&l| {
            if l < n {
                Ok(l)
            } else {
                Err(MetricsError::LabelOutOfRange { label: l, n })
            }
        })
        .collect()
}

fn check_lengths(gt: usize, pred: usize) -> Result<(), MetricsError> {
    if gt != pred {
        return Err(MetricsError::LengthMismatch { gt, pred });
    }
    Ok(())
}

/// O-F1 (micro), C-F1 (macro over classes seen in ground truth or
/// predictions) and I-F1 (mean per image; both empty scores 1, exactly one
/// empty scores 0). When nothing at all is present anywhere, O-F1 and C-F1
/// are 1.
pub fn f1_report(
    gt: &[Vec<usize>],
    pred: &[Vec<usize>],
    n_labels: usize,
) -> Result<F1Report, MetricsError> {
    check_lengths(gt.len(), pred.len())?;
    let mut per_class = vec![ClassCounts::default(); n_labels];
    let mut image_sum = 0.0f64;
    for (g, p) in gt.iter().zip(pred) {
        let g = as_set(g, n_labels)?;
        let p = as_set(p, n_labels)?;
        let tp = g.intersection(&p).count();
        for &l in &g {
            if p.contains(&l) {
                per_class[l].tp += 1;
            } else {
                per_class[l].fn_ += 1;
            }
        }
        for &l in p.difference(&g) {
            per_class[l].fp += 1;
        }
        image_sum += match (g.is_empty(), p.is_empty()) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => (2 * tp) as f64 / (g.len() + p.len()) as f64,
        };
    }
    let (tp, fp, fn_) = per_class.iter().fold((0, 0, 0), |acc, c| {
        (acc.0 + c.tp, acc.1 + c.fp, acc.2 + c.fn_)
    });
    let o_f1 = f1_of(tp, fp, fn_).unwrap_or(1.0);
    let class_f1: Vec<f64> = per_class
        .iter()
        .filter_map(|c| f1_of(c.tp, c.fp, c.fn_))
        .collect();
    let c_f1 = if class_f1.is_empty() {
        1.0
    } else {
        class_f1.iter().sum::<f64>() / class_f1.len() as f64
    };
    let i_f1 = if gt.is_empty() {
        1.0
    } else {
        image_sum / gt.len() as f64
    };
    let (cardinality_error, cardinality_ci) = cardinality_error(gt, pred)?;
    Ok(F1Report {
        o_f1,
        c_f1,
        i_f1,
        cardinality_error,
        cardinality_ci,
        per_class,
    })
}

/// Mean `|K_hat - K|` and the 95% half-width `1.96 s / sqrt(n)`, with `s`
/// the sample standard deviation (0 for fewer than two images).
pub fn cardinality_error(
    gt: &[Vec<usize>],
    pred: &[Vec<usize>],
) -> Result<(f64, f64), MetricsError> {
    check_lengths(gt.len(), pred.len())?;
    if gt.is_empty() {
        return Ok((0.0, 0.0));
    }
    let errs: Vec<f64> = gt
        .iter()
        .zip(pred)
        .map(|(g, p)| (g.len() as f64 - p.len() as f64).abs())
        .collect();
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    if errs.len() < 2 {
        return Ok((mean, 0.0));
    }
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * var.sqrt() / n.sqrt()))
}

/// Precedence counts of one label pair, `first < second` by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderPair {
    pub first: usize,
    pub second: usize,
    /// Times `first` appeared before `second`.
    pub a: u64,
    /// Times `second` appeared before `first`.
    pub b: u64,
    /// `max(a, b) / (a + b)`.
    pub order: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OrderTable {
    pub pairs: Vec<OrderPair>,
}

impl OrderTable {
    pub fn get(&self, first: usize, second: usize) -> Option<&OrderPair> {
        let (x, y) = (first.min(second), first.max(second));
        self.pairs.iter().find(|p| p.first == x && p.second == y)
    }
}

/// Pairwise precedence statistics over ordered label lists.
pub fn order_table<'a, I>(lists: I) -> OrderTable
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let mut counts: BTreeMap<(usize, usize), (u64, u64)> = BTreeMap::new();
    for list in lists {
        for i in 0..list.len() {
            for j in i + 1..list.len() {
                let (x, y) = (list[i], list[j]);
                if x == y {
                    continue;
                }
                let e = counts.entry((x.min(y), x.max(y))).or_default();
                if x < y {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
            }
        }
    }
    let pairs = counts
        .into_iter()
        .map(|((first, second), (a, b))| OrderPair {
            first,
            second,
            a,
            b,
            order: a.max(b) as f64 / (a + b) as f64,
        })
        .collect();
    OrderTable { pairs }
}

/// Order statistics of every sample's label list.
pub fn order_statistics(ds: &Dataset) -> OrderTable {
    order_table(ds.samples.iter().map(|s| s.labels.as_slice()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub model: String,
    pub mean_normalized: f64,
    pub datasets: usize,
}

/// Ranks models by their mean O-F1 normalized by each dataset's best score.
///
/// `scores[model][dataset]`. Models are averaged over the datasets they
/// have; a dataset whose best score is 0 normalizes everyone to 0. Ties go
/// to the lexicographically smaller model name.
pub fn normalized_ranking(
    scores: &BTreeMap<String, BTreeMap<String, f64>>,
) -> Result<Vec<RankedModel>, MetricsError> {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for per_ds in scores.values() {
        for (ds, &s) in per_ds {
            let b = best.entry(ds.as_str()).or_insert(f64::NEG_INFINITY);
            *b = b.max(s);
        }
    }
    if best.is_empty() {
        return Err(MetricsError::EmptyScores);
    }
    let mut out: Vec<RankedModel> = scores
        .iter()
        .filter(|(_, per_ds)| !per_ds.is_empty())
        .map(|(model, per_ds)| {
            let total: f64 = per_ds
                .iter()
                .map(|(ds, &s)| {
                    let b = best[ds.as_str()];
                    if b > 0.0 {
                        s / b
                    } else {
                        0.0
                    }
                })
                .sum();
            RankedModel {
                model: model.clone(),
                mean_normalized: total / per_ds.len() as f64,
                datasets: per_ds.len(),
            }
        })
        .collect();
    out.sort_by(|x, y| {
        y.mean_normalized
            .total_cmp(&x.mean_normalized)
            .then_with(|| x.model.cmp(&y.model))
    });
    Ok(out)
}

/// One line of a prediction file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: usize,
    pub gt: Vec<usize>,
    pub pred: Vec<usize>,
}

pub fn write_predictions<W: Write>(
    mut w: W,
    records: &[PredictionRecord],
) -> Result<(), MetricsError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads JSON-lines predictions; blank lines are skipped.
pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<PredictionRecord>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| MetricsError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

/// Ground truth and predictions of a record list, in record order.
pub fn split_records(records: &[PredictionRecord]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    records
        .iter()
        .map(|r| (r.gt.clone(), r.pred.clone()))
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_image_example_gives_two_thirds_everywhere() {
        let gt = vec![vec![0], vec![0, 1]];
        let pred = vec![vec![0, 1], vec![1]];
        let r = f1_report(&gt, &pred, 2).unwrap();
        for v in [r.o_f1, r.c_f1, r.i_f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gt = vec![vec![0, 2], vec![1]];
        let r = f1_report(&gt, &gt, 3).unwrap();
        assert_eq!((r.o_f1, r.c_f1, r.i_f1), (1.0, 1.0, 1.0));
        assert_eq!(r.cardinality_error, 0.0);

        let r = f1_report(&gt, &[vec![], vec![]], 3).unwrap();
        assert_eq!((r.o_f1, r.c_f1, r.i_f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_set_conventions_per_image() {
        let r = f1_report(&[vec![], vec![1]], &[vec![], vec![]], 2).unwrap();
        assert_eq!(r.i_f1, 0.5);
        assert!(f1_report(&[vec![]], &[vec![]], 2).unwrap().i_f1 == 1.0);
    }

    #[test]
    fn cardinality_error_examples() {
        let (m, ci) =
            cardinality_error(&[vec![0], vec![0, 1, 2]], &[vec![0, 1], vec![0, 1]]).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(ci, 0.0);
        assert!(cardinality_error(&[vec![]], &[]).is_err());
    }

    #[test]
    fn order_values() {
        let lists: Vec<Vec<usize>> = vec![vec![0, 1]; 4];
        let t = order_table(lists.iter().map(Vec::as_slice));
        assert_eq!(t.get(0, 1).unwrap().order, 1.0);

        let mut lists = vec![vec![0, 1]; 3];
        lists.push(vec![1, 0]);
        let t = order_table(lists.iter().map(Vec::as_slice));
        let p = t.get(1, 0).unwrap();
        assert_eq!((p.a, p.b, p.order), (3, 1, 0.75));

        let lists = [vec![2, 5], vec![5, 2]];
        let t = order_table(lists.iter().map(Vec::as_slice));
        assert_eq!(t.get(2, 5).unwrap().order, 0.5);
        assert!(t.get(0, 1).is_none());
    }

    fn table(rows: &[(&str, &[(&str, f64)])]) -> BTreeMap<String, BTreeMap<String, f64>> {
        rows.iter()
            .map(|(m, s)| {
                (
                    m.to_string(),
                    s.iter().map(|(d, v)| (d.to_string(), *v)).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn ranking_examples() {
        let one = table(&[("b", &[("x", 0.4)]), ("a", &[("x", 0.8)])]);
        let r = normalized_ranking(&one).unwrap();
        assert_eq!(r[0].model, "a");
        assert_eq!(r[0].mean_normalized, 1.0);

        let two = table(&[
            ("m2", &[("x", 0.4), ("y", 0.8)]),
            ("m1", &[("x", 0.8), ("y", 0.4)]),
        ]);
        let r = normalized_ranking(&two).unwrap();
        assert_eq!(r[0].mean_normalized, 0.75);
        assert_eq!(r[1].mean_normalized, 0.75);
        assert_eq!(r[0].model, "m1");

        // a model missing a dataset is averaged over the ones it has
        let partial = table(&[("td", &[("x", 0.5)]), ("bce", &[("x", 1.0), ("y", 0.9)])]);
        let r = normalized_ranking(&partial).unwrap();
        assert_eq!(r[1].model, "td");
        assert_eq!(r[1].datasets, 1);

        assert!(normalized_ranking(&BTreeMap::new()).is_err());
    }

    #[test]
    fn prediction_file_round_trip() {
        let recs = vec![
            PredictionRecord {
                id: 0,
                gt: vec![1, 2],
                pred: vec![2],
            },
            PredictionRecord {
                id: 1,
                gt: vec![],
                pred: vec![],
            },
        ];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"id":0,"gt":[1,2],"pred":[2]}"#
        );
        assert_eq!(read_predictions(&buf[..]).unwrap(), recs);
    }
}
