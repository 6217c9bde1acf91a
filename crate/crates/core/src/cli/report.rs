//! Result files written by `train` and the tables built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hyperband::Config;
use crate::metrics::{normalized_ranking, F1Report, OrderPair};

pub const RESULT_SUFFIX: &str = ".result.json";
pub const ORDER_SUFFIX: &str = ".order.json";

/// Scalar test metrics of one run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub o_f1: f64,
    pub c_f1: f64,
    pub i_f1: f64,
    pub cardinality_error: f64,
    pub cardinality_ci: f64,
}

impl From<&F1Report> for MetricSummary {
    fn from(r: &F1Report) -> Self {
        Self {
            o_f1: r.o_f1,
            c_f1: r.c_f1,
            i_f1: r.i_f1,
            cardinality_error: r.cardinality_error,
            cardinality_ci: r.cardinality_ci,
        }
    }
}

impl MetricSummary {
    fn fields(&self) -> [f64; 5] {
        [
            self.o_f1,
            self.c_f1,
            self.i_f1,
            self.cardinality_error,
            self.cardinality_ci,
        ]
    }

    fn from_fields(f: [f64; 5]) -> Self {
        Self {
            o_f1: f[0],
            c_f1: f[1],
            i_f1: f[2],
            cardinality_error: f[3],
            cardinality_ci: f[4],
        }
    }
}

/// Mean and population standard deviation of each metric; `None` when empty.
pub fn mean_std(items: &[MetricSummary]) -> Option<(MetricSummary, MetricSummary)> {
    if items.is_empty() {
        return None;
    }
    let n = items.len() as f64;
    let mut mean = [0.0; 5];
    for it in items {
        for (m, v) in mean.iter_mut().zip(it.fields()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 5];
    for it in items {
        for ((s, v), m) in var.iter_mut().zip(it.fields()).zip(mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    Some((
        MetricSummary::from_fields(mean),
        MetricSummary::from_fields(var.map(f64::sqrt)),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_o_f1: Option<f64>,
    pub status: String,
    /// Missing when the run diverged before any evaluation.
    pub test: Option<MetricSummary>,
}

/// Everything `train` reports for one (dataset, family) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub dataset: String,
    pub family: String,
    pub hyper: Config,
    pub runs: Vec<RunResult>,
    pub mean: Option<MetricSummary>,
    pub std: Option<MetricSummary>,
}

impl ResultFile {
    pub fn new(dataset: String, family: String, hyper: Config, runs: Vec<RunResult>) -> Self {
        let tests: Vec<MetricSummary> = runs.iter().filter_map(|r| r.test).collect();
        let (mean, std) = match mean_std(&tests) {
            Some((m, s)) => (Some(m), Some(s)),
            None => (None, None),
        };
        Self {
            dataset,
            family,
            hyper,
            runs,
            mean,
            std,
        }
    }

    pub fn scored_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.test.is_some()).count()
    }
}

/// Label-pair order statistics of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderFile {
    pub dataset: String,
    pub labels: Vec<String>,
    pub pairs: Vec<OrderPair>,
}

pub const ORDER_CSV_HEADER: &str = "dataset,first,second,first_label,second_label,a,b,order";

impl OrderFile {
    pub fn csv_rows(&self, out: &mut String) {
        for p in &self.pairs {
            let name = |i: usize| self.labels.get(i).map_or(String::new(), |s| csv_field(s));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                csv_field(&self.dataset),
                p.first,
                p.second,
                name(p.first),
                name(p.second),
                p.a,
                p.b,
                p.order
            );
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Every result and order file directly inside `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<(Vec<ResultFile>, Vec<OrderFile>), String> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .collect();
    entries.sort();
    let mut results = Vec::new();
    let mut orders = Vec::new();
    for path in entries {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        let read = || fs::read(&path).map_err(|e| format!("{}: {e}", path.display()));
        if name.ends_with(RESULT_SUFFIX) {
            results.push(
                serde_json::from_slice(&read()?).map_err(|e| format!("{}: {e}", path.display()))?,
            );
        } else if name.ends_with(ORDER_SUFFIX) {
            orders.push(
                serde_json::from_slice(&read()?).map_err(|e| format!("{}: {e}", path.display()))?,
            );
        }
    }
    Ok((results, orders))
}

/// Rendered report files.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub markdown: String,
    pub leaderboard_csv: String,
    pub cardinality_csv: String,
    pub order_csv: String,
}

pub const LEADERBOARD_CSV_HEADER: &str =
    "rank,model,mean_normalized_o_f1,dataset,seeds,o_f1_mean,o_f1_std,c_f1_mean,c_f1_std,i_f1_mean,i_f1_std";
pub const CARDINALITY_CSV_HEADER: &str =
    "model,dataset,seeds,cardinality_error_mean,cardinality_error_std,cardinality_ci_mean";

fn pct(mean: f64, std: f64) -> String {
    format!("{:.1} ({:.1})", 100.0 * mean, 100.0 * std)
}

/// Leaderboard rows are models ordered by mean normalized O-F1; columns are
/// datasets times O-F1, C-F1 and I-F1 as `mean (std)` in percent.
pub fn build_report(results: &[ResultFile], orders: &[OrderFile]) -> Result<Report, String> {
    // latest file wins when a (model, dataset) pair appears twice
    let mut cells: BTreeMap<(String, String), &ResultFile> = BTreeMap::new();
    for r in results.iter().filter(|r| r.mean.is_some()) {
        cells.insert((r.family.clone(), r.dataset.clone()), r);
    }
    if cells.is_empty() {
        return Err("no result with a scored run".into());
    }
    let mut scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for ((model, ds), r) in &cells {
        scores
            .entry(model.clone())
            .or_default()
            .insert(ds.clone(), r.mean.expect("filtered").o_f1);
    }
    let ranking = normalized_ranking(&scores).map_err(|e| e.to_string())?;
    let datasets: Vec<String> = cells
        .keys()
        .map(|(_, d)| d.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut md = String::from("| Rank | Model | Norm. O-F1 |");
    let mut rule = String::from("|---:|---|---:|");
    for d in &datasets {
        let _ = write!(md, " {d} O-F1 | {d} C-F1 | {d} I-F1 |");
        rule.push_str("---:|---:|---:|");
    }
    md.push('\n');
    md.push_str(&rule);
    md.push('\n');
    let mut board = format!("{LEADERBOARD_CSV_HEADER}\n");
    let mut card = format!("{CARDINALITY_CSV_HEADER}\n");
    for (rank, m) in ranking.iter().enumerate() {
        let _ = write!(
            md,
            "| {} | {} | {:.3} |",
            rank + 1,
            m.model,
            m.mean_normalized
        );
        for d in &datasets {
            match cells.get(&(m.model.clone(), d.clone())) {
                Some(r) => {
                    let (mean, std) = (r.mean.expect("filtered"), r.std.expect("filtered"));
                    let _ = write!(
                        md,
                        " {} | {} | {} |",
                        pct(mean.o_f1, std.o_f1),
                        pct(mean.c_f1, std.c_f1),
                        pct(mean.i_f1, std.i_f1)
                    );
                    let _ = writeln!(
                        board,
                        "{},{},{},{},{},{},{},{},{},{},{}",
                        rank + 1,
                        csv_field(&m.model),
                        m.mean_normalized,
                        csv_field(d),
                        r.scored_runs(),
                        mean.o_f1,
                        std.o_f1,
                        mean.c_f1,
                        std.c_f1,
                        mean.i_f1,
                        std.i_f1
                    );
                    let _ = writeln!(
                        card,
                        "{},{},{},{},{},{}",
                        csv_field(&m.model),
                        csv_field(d),
                        r.scored_runs(),
                        mean.cardinality_error,
                        std.cardinality_error,
                        mean.cardinality_ci
                    );
                }
                None => md.push_str(" - | - | - |"),
            }
        }
        md.push('\n');
    }
    let mut order_csv = format!("{ORDER_CSV_HEADER}\n");
    for o in orders {
        o.csv_rows(&mut order_csv);
    }
    Ok(Report {
        markdown: md,
        leaderboard_csv: board,
        cardinality_csv: card,
        order_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(o: f64) -> MetricSummary {
        MetricSummary {
            o_f1: o,
            c_f1: o / 2.0,
            i_f1: o,
            cardinality_error: 0.5,
            cardinality_ci: 0.1,
        }
    }

    fn result(family: &str, dataset: &str, scores: &[f64]) -> ResultFile {
        let runs = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| RunResult {
                seed: i as u64,
                epochs: 1,
                best_epoch: Some(1),
                best_val_o_f1: Some(s),
                status: "completed".into(),
                test: Some(summary(s)),
            })
            .collect();
        ResultFile::new(dataset.into(), family.into(), Config::new(), runs)
    }

    #[test]
    fn single_seed_has_zero_std() {
        let r = result("FF_BCE", "d", &[0.7]);
        assert_eq!(r.std.unwrap().o_f1, 0.0);
        let r = result("FF_BCE", "d", &[0.6, 0.8]);
        assert!((r.mean.unwrap().o_f1 - 0.7).abs() < 1e-12);
        assert!((r.std.unwrap().o_f1 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn one_result_gives_one_row() {
        let rep = build_report(&[result("FF_BCE", "d", &[0.5])], &[]).unwrap();
        let rows: Vec<_> = rep.markdown.lines().collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[2].starts_with("| 1 | FF_BCE | 1.000 | 50.0 (0.0) | 25.0 (0.0) |"));
        assert_eq!(rep.leaderboard_csv.lines().count(), 2);
        assert_eq!(
            rep.leaderboard_csv.lines().next(),
            Some(LEADERBOARD_CSV_HEADER)
        );
    }

    #[test]
    fn rows_follow_normalized_ranking() {
        let results = [
            result("A", "x", &[0.4]),
            result("B", "x", &[0.8]),
            result("A", "y", &[0.9]),
            result("B", "y", &[0.3]),
        ];
        let rep = build_report(&results, &[]).unwrap();
        // A: (0.5 + 1) / 2 = 0.75, B: (1 + 1/3) / 2 = 0.667
        let models: Vec<&str> = rep
            .markdown
            .lines()
            .skip(2)
            .map(|l| l.split('|').nth(2).unwrap().trim())
            .collect();
        assert_eq!(models, ["A", "B"]);
        assert!(!rep.leaderboard_csv.contains("\"B\""));
    }

    #[test]
    fn family_names_with_commas_are_quoted() {
        let rep = build_report(&[result("FF_BCE,C", "d", &[0.5])], &[]).unwrap();
        assert!(rep.leaderboard_csv.contains("\"FF_BCE,C\""));
        assert!(rep.cardinality_csv.contains("\"FF_BCE,C\",d,1,0.5,0,0.1"));
    }

    #[test]
    fn no_scored_result_is_an_error() {
        let mut r = result("A", "x", &[0.5]);
        r.runs[0].test = None;
        let r = ResultFile::new(r.dataset, r.family, r.hyper, r.runs);
        assert!(build_report(&[r], &[]).is_err());
    }
}
