//! Hyperband over categorical search spaces.
//!
//! Brackets of successive halving run rung by rung. Survivors resume from
//! their checkpoints, so a trial promoted from `r_i` to `r_{i+1}` units
//! only trains the difference.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HyperbandError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("trial {id}: {message}")]
    Trial { id: usize, message: String },
    #[error("all {0} trials diverged")]
    AllDiverged(usize),
    #[error("sweep log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One successive-halving step: `n` configurations trained to `r` units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rung {
    pub n: usize,
    pub r: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: u32,
    pub rungs: Vec<Rung>,
}

impl Bracket {
    pub fn initial(&self) -> Rung {
        self.rungs[0]
    }

    /// Units actually trained: each configuration stops at the last rung it reaches.
    pub fn consumed_units(&self) -> u64 {
        let mut total = 0;
        for (i, rung) in self.rungs.iter().enumerate() {
            let next = self.rungs.get(i + 1).map_or(0, |r| r.n);
            total += (rung.n - next) as u64 * rung.r;
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperbandPlan {
    pub eta: u64,
    pub big_r: u64,
    pub s_max: u32,
    /// Per-bracket budget `(s_max + 1) * R`.
    pub budget: u64,
    /// From most exploratory (`s = s_max`) to plain training (`s = 0`).
    pub brackets: Vec<Bracket>,
}

/// Epochs for a resource amount, rounded up.
pub fn units_to_epochs(units: u64, epochs_per_unit: f64) -> usize {
    // the epsilon absorbs binary noise such as 600 * 0.15 = 90.00000000000001
    ((units as f64 * epochs_per_unit) - 1e-9).ceil().max(1.0) as usize
}

impl HyperbandPlan {
    pub fn total_configs(&self) -> usize {
        self.brackets.iter().map(|b| b.initial().n).sum()
    }

    pub fn max_resource(&self) -> u64 {
        self.brackets
            .iter()
            .flat_map(|b| b.rungs.iter().map(|r| r.r))
            .max()
            .unwrap_or(0)
    }

    /// `(s_max + 1) * B` units expressed in epochs: the budget Hyperband is
    /// designed to spend.
    pub fn nominal_budget_epochs(&self, epochs_per_unit: f64) -> f64 {
        (self.s_max as u64 + 1) as f64 * self.budget as f64 * epochs_per_unit
    }

    /// Epochs the schedule actually trains, with per-trial rounding.
    pub fn scheduled_epochs(&self, epochs_per_unit: f64) -> usize {
        self.brackets
            .iter()
            .flat_map(|b| {
                b.rungs.iter().enumerate().map(move |(i, rung)| {
                    let next = b.rungs.get(i + 1).map_or(0, |r| r.n);
                    (rung.n - next) * units_to_epochs(rung.r, epochs_per_unit)
                })
            })
            .sum()
    }
}

/// Builds the full bracket and rung schedule.
pub fn plan(eta: u64, big_r: u64) -> Result<HyperbandPlan, HyperbandError> {
    if eta < 2 {
        return Err(HyperbandError::InvalidPlan(format!(
            "eta = {eta}, need at least 2"
        )));
    }
    if big_r < eta {
        return Err(HyperbandError::InvalidPlan(format!(
            "R = {big_r} is smaller than eta = {eta}"
        )));
    }
    // largest s with eta^s <= R, without floating-point logarithms
    let mut s_max = 0u32;
    let mut p = eta;
    while p <= big_r {
        s_max += 1;
        p = match p.checked_mul(eta) {
            Some(v) => v,
            None => break,
        };
    }
    let budget = (s_max as u64 + 1) * big_r;
    let mut brackets = Vec::new();
    for s in (0..=s_max).rev() {
        let pow = eta.pow(s);
        // ceil((B / R) * eta^s / (s + 1)) with B / R = s_max + 1
        let n0 = ((s_max as u64 + 1) * pow).div_ceil(s as u64 + 1) as usize;
        let mut rungs = Vec::with_capacity(s as usize + 1);
        let mut n = n0;
        for i in 0..=s {
            let r = (big_r / eta.pow(s - i)).max(1);
            rungs.push(Rung { n, r });
            n = n.div_ceil(eta as usize);
        }
        brackets.push(Bracket { s, rungs });
    }
    Ok(HyperbandPlan {
        eta,
        big_r,
        s_max,
        budget,
        brackets,
    })
}

/// A sampled hyperparameter assignment.
pub type Config = BTreeMap<String, f64>;

/// Independent categorical value lists, sampled uniformly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: BTreeMap<String, Vec<f64>>,
}

impl SearchSpace {
    pub fn with(mut self, name: &str, values: &[f64]) -> Self {
        self.dims.insert(name.to_string(), values.to_vec());
        self
    }

    pub fn validate(&self) -> Result<(), HyperbandError> {
        for (name, values) in &self.dims {
            if values.is_empty() {
                return Err(HyperbandError::InvalidSpace(format!(
                    "`{name}` has no values"
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(HyperbandError::InvalidSpace(format!(
                    "`{name}` has a non-finite value"
                )));
            }
        }
        Ok(())
    }

    /// Number of distinct assignments.
    pub fn size(&self) -> usize {
        self.dims.values().map(Vec::len).product()
    }
}

/// One uniform draw per dimension, in name order.
pub fn sample_config<R: Rng>(space: &SearchSpace, rng: &mut R) -> Config {
    space
        .dims
        .iter()
        .map(|(name, values)| (name.clone(), values[rng.gen_range(0..values.len())]))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    EarlyStopped,
    Diverged,
}

/// Identity of a trial as handed to the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub id: usize,
    pub bracket: u32,
    pub config: Config,
    pub master_seed: u64,
}

/// What one training call reports back.
#[derive(Clone, Debug)]
pub struct TrialOutcome {
    /// Best validation O-F1 so far, `None` if never evaluated.
    pub val_o_f1: Option<f64>,
    pub status: TrialStatus,
    /// Opaque state for resuming.
    pub checkpoint: Vec<u8>,
}

/// Trains a trial to a cumulative epoch count. `resume` is the checkpoint
/// from the trial's previous rung; `None` means start from scratch.
/// Implementations must be deterministic in `(trial, epochs)`.
pub trait Objective: Sync {
    fn train(
        &self,
        trial: &Trial,
        epochs: usize,
        resume: Option<&[u8]>,
    ) -> Result<TrialOutcome, String>;
}

/// One line of the sweep log: a trial's state after a rung.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub bracket: u32,
    pub rung: usize,
    pub config: Config,
    /// Cumulative units trained.
    pub units: u64,
    pub epochs: usize,
    pub val_o_f1: Option<f64>,
    pub status: TrialStatus,
    pub checkpoint: String,
}

impl TrialResult {
    /// Promotion score: diverged or never-evaluated trials rank below every finite one.
    pub fn score(&self) -> f64 {
        match (self.status, self.val_o_f1) {
            (TrialStatus::Diverged, _) | (_, None) => f64::NEG_INFINITY,
            (_, Some(v)) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LogHeader {
    eta: u64,
    big_r: u64,
    epochs_per_unit: f64,
    master_seed: u64,
    space: SearchSpace,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub eta: u64,
    pub big_r: u64,
    pub epochs_per_unit: f64,
    pub master_seed: u64,
    /// Worker threads; 0 lets rayon decide.
    pub workers: usize,
    /// JSON-lines sweep log; an existing log is resumed.
    pub log: Option<PathBuf>,
    /// Where checkpoints live; in memory when `None`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl RunOptions {
    pub fn new(eta: u64, big_r: u64, epochs_per_unit: f64, master_seed: u64) -> Self {
        Self {
            eta,
            big_r,
            epochs_per_unit,
            master_seed,
            workers: 0,
            log: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub plan: HyperbandPlan,
    pub best: TrialResult,
    /// Final record of every trial, by trial id.
    pub trials: Vec<TrialResult>,
    /// Every rung record in log order.
    pub records: Vec<TrialResult>,
}

enum Store {
    Memory(Mutex<HashMap<(usize, usize), Vec<u8>>>),
    Dir(PathBuf),
}

impl Store {
    fn path(dir: &Path, id: usize, rung: usize) -> PathBuf {
        dir.join(format!("trial-{id:05}-rung{rung}.ckpt"))
    }

    fn get(&self, id: usize, rung: usize) -> Option<Vec<u8>> {
        match self {
            Store::Memory(m) => m.lock().unwrap().get(&(id, rung)).cloned(),
            Store::Dir(d) => fs::read(Self::path(d, id, rung)).ok(),
        }
    }

    /// Checkpoints are kept per rung so a resumed sweep never starts from a
    /// state that is ahead of its log.
    fn put(&self, id: usize, rung: usize, bytes: Vec<u8>) -> std::io::Result<String> {
        match self {
            Store::Memory(m) => {
                let mut m = m.lock().unwrap();
                // nothing reads an older rung back within one process
                if let Some(prev) = rung.checked_sub(1) {
                    m.remove(&(id, prev));
                }
                m.insert((id, rung), bytes);
                Ok(format!("memory:{id}:{rung}"))
            }
            Store::Dir(d) => {
                let path = Self::path(d, id, rung);
                let tmp = path.with_extension("ckpt.tmp");
                fs::write(&tmp, bytes)?;
                fs::rename(&tmp, &path)?;
                Ok(path.display().to_string())
            }
        }
    }
}

fn read_log(
    path: &Path,
    header: &LogHeader,
) -> Result<HashMap<(usize, usize), TrialResult>, HyperbandError> {
    let mut done = HashMap::new();
    if !path.exists() {
        return Ok(done);
    }
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| HyperbandError::Log {
            line: i + 1,
            message,
        };
        if i == 0 {
            let found: LogHeader = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            if &found != header {
                return Err(err("log was written by a different sweep".into()));
            }
            continue;
        }
        let r: TrialResult = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        done.insert((r.trial, r.rung), r);
    }
    Ok(done)
}

/// Runs every bracket. Within a rung trials run in parallel; promotion keeps
/// the best `ceil(n / eta)` by validation O-F1, lower trial id first on ties.
pub fn run(
    space: &SearchSpace,
    objective: &dyn Objective,
    opts: &RunOptions,
) -> Result<SweepOutcome, HyperbandError> {
    space.validate()?;
    if !(opts.epochs_per_unit.is_finite() && opts.epochs_per_unit > 0.0) {
        return Err(HyperbandError::InvalidPlan(format!(
            "epochs per unit = {}",
            opts.epochs_per_unit
        )));
    }
    let plan = plan(opts.eta, opts.big_r)?;
    let header = LogHeader {
        eta: opts.eta,
        big_r: opts.big_r,
        epochs_per_unit: opts.epochs_per_unit,
        master_seed: opts.master_seed,
        space: space.clone(),
    };
    let mut logged = match &opts.log {
        Some(p) => read_log(p, &header)?,
        None => HashMap::new(),
    };
    let mut log = match &opts.log {
        Some(p) => {
            let fresh = !p.exists() || fs::metadata(p)?.len() == 0;
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            if fresh {
                writeln!(
                    f,
                    "{}",
                    serde_json::to_string(&header).expect("header serializes")
                )?;
            }
            Some(f)
        }
        None => None,
    };
    let store = match &opts.checkpoint_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Store::Dir(d.clone())
        }
        None => Store::Memory(Mutex::new(HashMap::new())),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| HyperbandError::InvalidPlan(e.to_string()))?;

    // Configurations depend only on the master seed, never on scheduling.
    let mut sampler = ChaCha8Rng::seed_from_u64(opts.master_seed);
    let mut records = Vec::new();
    let mut finals: BTreeMap<usize, TrialResult> = BTreeMap::new();
    let mut next_id = 0usize;
    for bracket in &plan.brackets {
        let mut survivors: Vec<Trial> = (0..bracket.initial().n)
            .map(|k| Trial {
                id: next_id + k,
                bracket: bracket.s,
                config: sample_config(space, &mut sampler),
                master_seed: opts.master_seed,
            })
            .collect();
        next_id += survivors.len();
        for (rung_idx, rung) in bracket.rungs.iter().enumerate() {
            debug_assert_eq!(survivors.len(), rung.n);
            let epochs = units_to_epochs(rung.r, opts.epochs_per_unit);
            let results: Vec<Result<TrialResult, HyperbandError>> = pool.install(|| {
                survivors
                    .par_iter()
                    .map(|t| {
                        if let Some(prev) = logged.get(&(t.id, rung_idx)) {
                            if prev.config != t.config {
                                return Err(HyperbandError::Log {
                                    line: 0,
                                    message: format!("trial {} config differs from the log", t.id),
                                });
                            }
                            return Ok(prev.clone());
                        }
                        // a lost checkpoint is rebuilt by training from scratch,
                        // which lands on the same state
                        let resume = rung_idx
                            .checked_sub(1)
                            .and_then(|prev| store.get(t.id, prev));
                        let out = objective
                            .train(t, epochs, resume.as_deref())
                            .map_err(|message| HyperbandError::Trial { id: t.id, message })?;
                        let checkpoint = store.put(t.id, rung_idx, out.checkpoint)?;
                        Ok(TrialResult {
                            trial: t.id,
                            bracket: bracket.s,
                            rung: rung_idx,
                            config: t.config.clone(),
                            units: rung.r,
                            epochs,
                            val_o_f1: out.val_o_f1,
                            status: out.status,
                            checkpoint,
                        })
                    })
                    .collect()
            });
            let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
            for r in &results {
                let fresh = logged.remove(&(r.trial, rung_idx)).is_none();
                if let (true, Some(f)) = (fresh, log.as_mut()) {
                    writeln!(
                        f,
                        "{}",
                        serde_json::to_string(r).expect("record serializes")
                    )?;
                }
                finals.insert(r.trial, r.clone());
            }
            if let Some(f) = log.as_mut() {
                f.flush()?;
            }
            records.extend(results.iter().cloned());
            if let Some(next) = bracket.rungs.get(rung_idx + 1) {
                let mut order: Vec<usize> = (0..results.len()).collect();
                order.sort_by(|&a, &b| {
                    results[b]
                        .score()
                        .total_cmp(&results[a].score())
                        .then(results[a].trial.cmp(&results[b].trial))
                });
                let keep: Vec<usize> = order.into_iter().take(next.n).collect();
                survivors = survivors
                    .into_iter()
                    .enumerate()
                    .filter(|(i, _)| keep.contains(i))
                    .map(|(_, t)| t)
                    .collect();
            }
        }
    }
    let trials: Vec<TrialResult> = finals.into_values().collect();
    let best = trials
        .iter()
        .filter(|t| t.score() > f64::NEG_INFINITY)
        .max_by(|a, b| a.score().total_cmp(&b.score()).then(b.trial.cmp(&a.trial)))
        .cloned()
        .ok_or(HyperbandError::AllDiverged(trials.len()))?;
    Ok(SweepOutcome {
        plan,
        best,
        trials,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_counts() {
        let p = plan(3, 600).unwrap();
        assert_eq!(p.s_max, 5);
        assert_eq!(p.budget, 3600);
        let n: Vec<usize> = p.brackets.iter().map(|b| b.initial().n).collect();
        assert_eq!(n, [243, 98, 41, 18, 9, 6]);
        assert_eq!(p.total_configs(), 415);
        assert_eq!(p.max_resource(), 600);
        assert_eq!(units_to_epochs(600, 0.15), 90);
    }

    #[test]
    fn smoke_plan() {
        let p = plan(3, 9).unwrap();
        let n: Vec<usize> = p.brackets.iter().map(|b| b.initial().n).collect();
        let r: Vec<u64> = p.brackets.iter().map(|b| b.initial().r).collect();
        assert_eq!(n, [9, 5, 3]);
        assert_eq!(r, [1, 3, 9]);
        assert_eq!(
            p.brackets[0].rungs.iter().map(|r| r.n).collect::<Vec<_>>(),
            [9, 3, 1]
        );
    }

    #[test]
    fn ceil_promotion_overshoot_is_small() {
        let p = plan(5, 25).unwrap();
        let b = &p.brackets[1];
        assert_eq!(b.rungs.iter().map(|r| r.n).collect::<Vec<_>>(), [8, 2]);
        assert_eq!(b.consumed_units(), 80);
        assert_eq!(p.budget, 75);
    }

    #[test]
    fn invalid_plans() {
        assert!(plan(1, 10).is_err());
        assert!(plan(3, 2).is_err());
    }

    #[test]
    fn rungs_are_monotone_and_within_budget() {
        // with eta = 5 the rounded-up promotions can overshoot B by a few percent
        for eta in 2..5 {
            for big_r in eta..400 {
                let p = plan(eta, big_r).unwrap();
                for b in &p.brackets {
                    for w in b.rungs.windows(2) {
                        assert!(w[0].n >= w[1].n && w[0].r <= w[1].r);
                    }
                    assert_eq!(b.rungs.last().unwrap().r, big_r);
                    assert!(
                        b.consumed_units() <= p.budget,
                        "eta {eta} R {big_r} s {}",
                        b.s
                    );
                }
            }
        }
    }

    #[test]
    fn singleton_space_yields_its_only_config() {
        let space = SearchSpace::default().with("a", &[2.0]).with("b", &[7.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = sample_config(&space, &mut rng);
        assert_eq!(c["a"], 2.0);
        assert_eq!(c["b"], 7.0);
        assert!(SearchSpace::default().with("x", &[]).validate().is_err());
    }
}
