//! Derivative-free hyperparameter search: a classification-based region
//! sampler (RACOS) and uniform random search, with median early stopping,
//! cooperative per-trial deadlines and a worker pool.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamKind {
    Categorical { values: Vec<Value> },
    Uniform { low: f64, high: f64 },
    LogUniform { low: f64, high: f64 },
    IntRange { low: i64, high: i64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
}

/// One value per parameter, keyed by name.
pub type Config = IndexMap<String, Value>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpaceSpec {
    pub params: Vec<ParamSpec>,
}

impl SearchSpaceSpec {
    /// Learning rate, profile MLP widths, encoder depth and head MLP widths
    /// for the pre-designed heavy model.
    pub fn default_space() -> Self {
        let dims = |v: &[&[u64]]| ParamKind::Categorical {
            values: v.iter().map(|d| Value::from(d.to_vec())).collect(),
        };
        Self {
            params: vec![
                ParamSpec {
                    name: "learning_rate".into(),
                    kind: ParamKind::LogUniform {
                        low: 3e-4,
                        high: 1e-2,
                    },
                },
                ParamSpec {
                    name: "profile_mlp_dims".into(),
                    kind: dims(&[&[32], &[32, 32], &[64, 32]]),
                },
                ParamSpec {
                    name: "n_encoder_layers".into(),
                    kind: ParamKind::IntRange { low: 2, high: 6 },
                },
                ParamSpec {
                    name: "head_mlp_dims".into(),
                    kind: dims(&[&[32], &[32, 32], &[64, 32]]),
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::Config("search space has no parameters".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.params {
            if !seen.insert(&p.name) {
                return Err(Error::Config(format!("duplicate parameter `{}`", p.name)));
            }
            let ok = match &p.kind {
                ParamKind::Categorical { values } => !values.is_empty(),
                ParamKind::Uniform { low, high } => {
                    low.is_finite() && high.is_finite() && low < high
                }
                ParamKind::LogUniform { low, high } => *low > 0.0 && high.is_finite() && low < high,
                ParamKind::IntRange { low, high } => low <= high,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "parameter `{}` has an empty or invalid domain",
                    p.name
                )));
            }
        }
        Ok(())
    }

    /// Whether every parameter of `cfg` lies in its domain.
    pub fn contains(&self, cfg: &Config) -> bool {
        cfg.len() == self.params.len()
            && self.params.iter().all(|p| {
                let Some(v) = cfg.get(&p.name) else {
                    return false;
                };
                match &p.kind {
                    ParamKind::Categorical { values } => values.contains(v),
                    ParamKind::Uniform { low, high } | ParamKind::LogUniform { low, high } => {
                        v.as_f64().is_some_and(|x| x >= *low && x <= *high)
                    }
                    ParamKind::IntRange { low, high } => {
                        v.as_i64().is_some_and(|x| x >= *low && x <= *high)
                    }
                }
            })
    }

    /// Uniform sample from the full space (log-uniform for log domains).
    pub fn sample(&self, rng: &mut Rng) -> Config {
        let full: Vec<Dim> = self.params.iter().map(Dim::full).collect();
        sample_region(&self.params, &full, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Done,
    EarlyStopped,
    TimedOut,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub config: Config,
    /// Present exactly for done and early-stopped trials.
    pub metric: Option<f64>,
    pub status: TrialStatus,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub intermediate: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialBudget {
    pub max_trials: usize,
    pub max_total_seconds: f64,
    pub per_trial_seconds: f64,
}

impl Default for TrialBudget {
    fn default() -> Self {
        Self {
            max_trials: 20,
            max_total_seconds: 600.0,
            per_trial_seconds: 120.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Racos,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoOptions {
    pub method: Method,
    /// Share of completed trials treated as positive.
    pub positive_frac: f64,
    /// Probability of sampling the full space instead of the region.
    pub epsilon: f64,
    pub workers: usize,
    pub early_stopping: bool,
    /// Completed trials needed at a step before the median rule applies.
    pub min_trials_for_median: usize,
    pub seed: u64,
    #[serde(skip)]
    pub history_path: Option<PathBuf>,
}

impl Default for HpoOptions {
    fn default() -> Self {
        Self {
            method: Method::Racos,
            positive_frac: 0.2,
            epsilon: 0.1,
            workers: 1,
            early_stopping: true,
            min_trials_for_median: 3,
            seed: 0,
            history_path: None,
        }
    }
}

/// Per-dimension region state.
#[derive(Clone, Debug)]
enum Dim {
    Set(Vec<usize>),
    Real { low: f64, high: f64 },
    Int { low: i64, high: i64 },
}

impl Dim {
    fn full(p: &ParamSpec) -> Dim {
        match &p.kind {
            ParamKind::Categorical { values } => Dim::Set((0..values.len()).collect()),
            ParamKind::Uniform { low, high } => Dim::Real {
                low: *low,
                high: *high,
            },
            ParamKind::LogUniform { low, high } => Dim::Real {
                low: low.ln(),
                high: high.ln(),
            },
            ParamKind::IntRange { low, high } => Dim::Int {
                low: *low,
                high: *high,
            },
        }
    }
}

/// A config mapped into region coordinates (log space for log domains,
/// value index for categoricals).
#[derive(Clone, Debug, PartialEq)]
enum Coord {
    Index(usize),
    Real(f64),
    Int(i64),
}

fn coords(space: &[ParamSpec], cfg: &Config) -> Option<Vec<Coord>> {
    space
        .iter()
        .map(|p| {
            let v = cfg.get(&p.name)?;
            Some(match &p.kind {
                ParamKind::Categorical { values } => {
                    Coord::Index(values.iter().position(|x| x == v)?)
                }
                ParamKind::Uniform { .. } => Coord::Real(v.as_f64()?),
                ParamKind::LogUniform { .. } => Coord::Real(v.as_f64()?.ln()),
                ParamKind::IntRange { .. } => Coord::Int(v.as_i64()?),
            })
        })
        .collect()
}

fn inside(region: &[Dim], c: &[Coord]) -> bool {
    region.iter().zip(c).all(|(d, c)| match (d, c) {
        (Dim::Set(s), Coord::Index(i)) => s.contains(i),
        (Dim::Real { low, high }, Coord::Real(x)) => x >= low && x <= high,
        (Dim::Int { low, high }, Coord::Int(x)) => x >= low && x <= high,
        _ => false,
    })
}

/// Squared distance with every dimension scaled to unit width.
fn gap(full: &[Dim], a: &[Coord], b: &[Coord]) -> f64 {
    full.iter()
        .zip(a.iter().zip(b))
        .map(|(d, pair)| match (d, pair) {
            (Dim::Real { low, high }, (Coord::Real(x), Coord::Real(y))) => {
                ((x - y) / (high - low)).powi(2)
            }
            (Dim::Int { low, high }, (Coord::Int(x), Coord::Int(y))) => {
                ((x - y) as f64 / (high - low).max(1) as f64).powi(2)
            }
            (_, (x, y)) => f64::from(u8::from(x != y)),
        })
        .sum()
}

fn sample_region(space: &[ParamSpec], region: &[Dim], rng: &mut Rng) -> Config {
    space
        .iter()
        .zip(region)
        .map(|(p, d)| {
            let v = match (&p.kind, d) {
                (ParamKind::Categorical { values }, Dim::Set(s)) => {
                    values[s[rng.random_range(0..s.len())]].clone()
                }
                (ParamKind::Uniform { low, high }, Dim::Real { low: a, high: b }) => {
                    Value::from(uniform(rng, *a, *b).clamp(*low, *high))
                }
                (ParamKind::LogUniform { low, high }, Dim::Real { low: a, high: b }) => {
                    Value::from(uniform(rng, *a, *b).exp().clamp(*low, *high))
                }
                (ParamKind::IntRange { .. }, Dim::Int { low, high }) => {
                    Value::from(rng.random_range(*low..=*high))
                }
                _ => unreachable!("region matches the space"),
            };
            (p.name.clone(), v)
        })
        .collect()
}

fn uniform(rng: &mut Rng, a: f64, b: f64) -> f64 {
    if a < b {
        rng.random_range(a..=b)
    } else {
        a
    }
}

/// Shrinks `region` along one coordinate so that `neg` falls outside while
/// `anchor` stays inside. Returns false if `d` cannot separate them.
fn shrink(region: &mut [Dim], d: usize, anchor: &[Coord], neg: &[Coord], rng: &mut Rng) -> bool {
    match (&mut region[d], &anchor[d], &neg[d]) {
        (Dim::Set(s), Coord::Index(a), Coord::Index(n)) if a != n => {
            s.retain(|i| i != n);
            true
        }
        (Dim::Real { low, high }, Coord::Real(a), Coord::Real(n)) if a != n => {
            if n < a {
                *low = uniform(rng, n.max(*low), *a);
                if *low <= *n {
                    *low = *a;
                }
            } else {
                *high = uniform(rng, *a, n.min(*high));
                if *high >= *n {
                    *high = *a;
                }
            }
            true
        }
        (Dim::Int { low, high }, Coord::Int(a), Coord::Int(n)) if a != n => {
            if n < a {
                *low = rng.random_range((*n + 1).max(*low)..=*a);
            } else {
                *high = rng.random_range(*a..=(*n - 1).min(*high));
            }
            true
        }
        _ => false,
    }
}

/// Proposes the next configuration from the completed trials in `history`.
///
/// The top `positive_frac` of completed trials are positives, the rest
/// negatives. Starting from the full space with categorical dimensions
/// restricted to values seen among positives, random dimensions are shrunk
/// until every negative is excluded while the best trial stays inside. The sample is uniform in that region with probability
/// `1 - epsilon` and uniform in the full space otherwise.
pub fn racos_suggest(
    history: &[TrialRecord],
    space: &SearchSpaceSpec,
    rng: &mut Rng,
    positive_frac: f64,
    epsilon: f64,
) -> Config {
    let p = &space.params;
    let mut done: Vec<(f64, Vec<Coord>)> = history
        .iter()
        .filter_map(|r| Some((r.metric?, coords(p, &r.config)?)))
        .collect();
    let explore = rng.random::<f64>() < epsilon;
    if explore || done.len() < 2 {
        return space.sample(rng);
    }
    done.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = ((done.len() as f64 * positive_frac).round() as usize).clamp(1, done.len() - 1);
    let (pos, neg) = done.split_at(n_pos);
    let mut region: Vec<Dim> = p.iter().map(Dim::full).collect();
    for (d, dim) in region.iter_mut().enumerate() {
        if let Dim::Set(s) = dim {
            s.retain(|i| pos.iter().any(|(_, c)| c[d] == Coord::Index(*i)));
        }
    }
    // the incumbent anchors the region
    let anchor = &pos[0].1;
    // nearest negatives first, so the early cuts are the tight ones
    let full: Vec<Dim> = p.iter().map(Dim::full).collect();
    let mut neg: Vec<&Vec<Coord>> = neg.iter().map(|(_, c)| c).collect();
    neg.sort_by(|a, b| gap(&full, anchor, a).total_cmp(&gap(&full, anchor, b)));
    for n in neg {
        let mut tries = 0;
        while inside(&region, n) && tries < 4 * p.len() {
            let d = rng.random_range(0..p.len());
            shrink(&mut region, d, anchor, n, rng);
            tries += 1;
        }
        if inside(&region, n) {
            // separate on the first dimension that differs, if any
            for d in 0..p.len() {
                if shrink(&mut region, d, anchor, n, rng) {
                    break;
                }
            }
        }
    }
    let degenerate = region
        .iter()
        .any(|d| matches!(d, Dim::Set(s) if s.is_empty()));
    if degenerate {
        return space.sample(rng);
    }
    sample_region(p, &region, rng)
}

/// Intermediate metrics of finished trials, per reporting step.
#[derive(Default)]
struct MedianBoard {
    steps: Vec<Vec<f64>>,
}

impl MedianBoard {
    fn median(&self, step: usize, min: usize) -> Option<f64> {
        let v = self.steps.get(step)?;
        if v.len() < min {
            return None;
        }
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        Some(if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        })
    }

    fn add(&mut self, curve: &[f64]) {
        for (i, &m) in curve.iter().enumerate() {
            if self.steps.len() <= i {
                self.steps.push(Vec::new());
            }
            self.steps[i].push(m);
        }
    }
}

/// Handle passed to the objective: deadline checks and intermediate
/// reports for the median stopping rule.
pub struct TrialContext<'a> {
    deadline: Instant,
    board: Option<(&'a Mutex<MedianBoard>, usize)>,
    curve: Vec<f64>,
    stopped: bool,
}

impl TrialContext<'_> {
    /// A context with no early stopping, for calling objectives directly.
    pub fn unbounded() -> TrialContext<'static> {
        TrialContext {
            deadline: Instant::now() + Duration::from_secs(86_400 * 365),
            board: None,
            curve: Vec::new(),
            stopped: false,
        }
    }

    pub fn deadline_passed(&self) -> bool {
        Instant::now() >= self.deadline
    }

    /// Records the metric after the next step. Returns false when the
    /// trial should stop, either because it trails the median of earlier
    /// trials at this step or because its deadline passed.
    pub fn report(&mut self, metric: f64) -> bool {
        let step = self.curve.len();
        self.curve.push(metric);
        if self.deadline_passed() {
            return false;
        }
        if let Some((board, min)) = self.board {
            let median = board.lock().expect("median board").median(step, min);
            if median.is_some_and(|m| metric < m) {
                self.stopped = true;
                return false;
            }
        }
        true
    }
}

/// Objective: returns the final validation metric (higher is better) or a
/// failure message.
pub trait Objective: Sync {
    fn evaluate(&self, cfg: &Config, ctx: &mut TrialContext) -> std::result::Result<f64, String>;
}

impl<F> Objective for F
where
    F: Fn(&Config, &mut TrialContext) -> std::result::Result<f64, String> + Sync,
{
    fn evaluate(&self, cfg: &Config, ctx: &mut TrialContext) -> std::result::Result<f64, String> {
        self(cfg, ctx)
    }
}

fn run_trial(
    objective: &dyn Objective,
    trial_id: usize,
    config: Config,
    per_trial: Duration,
    board: Option<(&Mutex<MedianBoard>, usize)>,
) -> TrialRecord {
    let start = Instant::now();
    let mut ctx = TrialContext {
        deadline: start + per_trial,
        board,
        curve: Vec::new(),
        stopped: false,
    };
    let outcome = objective.evaluate(&config, &mut ctx);
    let wall_time = start.elapsed().as_secs_f64();
    let timed_out = wall_time > per_trial.as_secs_f64();
    let (metric, status, error) = match outcome {
        Err(e) => (None, TrialStatus::Failed, Some(e)),
        Ok(m) if !m.is_finite() => (
            None,
            TrialStatus::Failed,
            Some(format!("non-finite metric {m}")),
        ),
        Ok(_) if timed_out => (None, TrialStatus::TimedOut, None),
        Ok(m) if ctx.stopped => (Some(m), TrialStatus::EarlyStopped, None),
        Ok(m) => (Some(m), TrialStatus::Done, None),
    };
    TrialRecord {
        trial_id,
        config,
        metric,
        status,
        wall_time,
        intermediate: ctx.curve,
        error,
    }
}

/// Best completed trial: highest metric, earliest on ties.
pub fn best_trial(history: &[TrialRecord]) -> Option<&TrialRecord> {
    history
        .iter()
        .filter(|r| r.metric.is_some())
        .fold(None, |best: Option<&TrialRecord>, r| match best {
            Some(b) if b.metric >= r.metric => Some(b),
            _ => Some(r),
        })
}

/// Runs trials until `max_trials` or `max_total_seconds` is reached.
/// Suggestions are made in rounds of `workers`; each round is evaluated in
/// parallel and committed in trial order, so the trial sequence depends
/// only on the seed and the objective values.
pub fn optimize(
    objective: &dyn Objective,
    space: &SearchSpaceSpec,
    budget: &TrialBudget,
    opts: &HpoOptions,
) -> Result<(TrialRecord, Vec<TrialRecord>)> {
    space.validate()?;
    if budget.max_trials == 0 {
        return Err(Error::Config("max_trials must be >= 1".into()));
    }
    let start = Instant::now();
    let per_trial = Duration::from_secs_f64(budget.per_trial_seconds.max(0.0));
    let board = Mutex::new(MedianBoard::default());
    let mut history: Vec<TrialRecord> = Vec::new();
    let workers = opts.workers.max(1);
    while history.len() < budget.max_trials
        && start.elapsed().as_secs_f64() < budget.max_total_seconds
    {
        let round = workers.min(budget.max_trials - history.len());
        let configs: Vec<(usize, Config)> = (0..round)
            .map(|k| {
                let id = history.len() + k;
                let mut rng = rng_for(opts.seed, &[0x49, id as u64]);
                let cfg = match opts.method {
                    Method::Racos => {
                        racos_suggest(&history, space, &mut rng, opts.positive_frac, opts.epsilon)
                    }
                    Method::Random => space.sample(&mut rng),
                };
                (id, cfg)
            })
            .collect();
        let median = opts
            .early_stopping
            .then_some((&board, opts.min_trials_for_median));
        let mut records: Vec<TrialRecord> = if round == 1 {
            configs
                .into_iter()
                .map(|(id, c)| run_trial(objective, id, c, per_trial, median))
                .collect()
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = configs
                    .into_iter()
                    .map(|(id, c)| s.spawn(move || run_trial(objective, id, c, per_trial, median)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("trial thread panicked"))
                    .collect()
            })
        };
        records.sort_by_key(|r| r.trial_id);
        for r in records {
            if r.status == TrialStatus::Done {
                board.lock().expect("median board").add(&r.intermediate);
            }
            if let Some(path) = &opts.history_path {
                append_record(path, &r)?;
            }
            log::debug!(
                "trial {} {:?} metric {:?} in {:.2}s",
                r.trial_id,
                r.status,
                r.metric,
                r.wall_time
            );
            history.push(r);
        }
    }
    let best = best_trial(&history)
        .cloned()
        .ok_or(Error::AllTrialsFailed(history.len()))?;
    Ok((best, history))
}

/// Appends one JSON line to the history file.
pub fn append_record(path: &std::path::Path, record: &TrialRecord) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Reads a history file written by [`optimize`].
pub fn read_history(path: &std::path::Path) -> Result<Vec<TrialRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> SearchSpaceSpec {
        SearchSpaceSpec {
            params: vec![
                ParamSpec {
                    name: "x".into(),
                    kind: ParamKind::Uniform {
                        low: -1.0,
                        high: 1.0,
                    },
                },
                ParamSpec {
                    name: "y".into(),
                    kind: ParamKind::Uniform {
                        low: -1.0,
                        high: 1.0,
                    },
                },
            ],
        }
    }

    #[test]
    fn single_trial_is_best() {
        let f = |c: &Config, _: &mut TrialContext| Ok(-c["x"].as_f64().unwrap().powi(2));
        let budget = TrialBudget {
            max_trials: 1,
            ..TrialBudget::default()
        };
        let (best, hist) = optimize(&f, &quad(), &budget, &HpoOptions::default()).unwrap();
        assert_eq!(hist.len(), 1);
        assert_eq!(best, hist[0]);
    }

    #[test]
    fn failures_are_recorded_and_all_failed_is_an_error() {
        let f = |_: &Config, _: &mut TrialContext| Err("boom".to_string());
        let budget = TrialBudget {
            max_trials: 3,
            ..TrialBudget::default()
        };
        match optimize(&f, &quad(), &budget, &HpoOptions::default()) {
            Err(Error::AllTrialsFailed(3)) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_history_samples_inside_space() {
        let s = SearchSpaceSpec::default_space();
        let mut rng = rng_for(1, &[]);
        for _ in 0..50 {
            let c = racos_suggest(&[], &s, &mut rng, 0.2, 0.1);
            assert!(s.contains(&c), "{c:?}");
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = quad();
        s.params[1].name = "x".into();
        assert!(s.validate().is_err());
    }
}
