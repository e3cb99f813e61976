//! Families of related synthetic scenarios.
//!
//! Every scenario shares one "universe": a random labeling function
//! `f_shared` and a base Markov chain over behavior events. Each scenario
//! adds its own labeling function `f_scenario`, a shifted profile
//! distribution and a tilted transition matrix. Labels are drawn from
//!
//! ```text
//! p(y = 1 | x) = sigmoid(k * standardize(s * f_shared(z) + (1 - s) * f_scenario(z)))
//! ```
//!
//! where `z` concatenates the profile vector with a centered bag-of-events
//! summary of the sequence, `s` is `shared_strength` and `k` is
//! `label_sharpness`; labels are then flipped with probability `noise_rate`.

mod persist;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};
use crate::tensor::Matrix;

pub use persist::{load_dataset, load_universe, save_dataset, save_universe, DatasetManifest};

/// Smallest scenario the partition invariants can be met for.
pub const MIN_SCENARIO_SIZE: usize = 20;

/// Default support fraction of a scenario's train partition.
pub const DEFAULT_SUPPORT_FRAC: f64 = 0.8;

const SPLIT_RETRIES: u64 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniverseConfig {
    pub profile_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Shortest generated sequence; lengths are uniform in `[min, max]`.
    pub min_seq_len: usize,
    pub n_scenarios: usize,
    pub shared_strength: f64,
    pub noise_rate: f64,
    pub size_profile: Vec<usize>,
    /// Fraction of each scenario held out as its test partition.
    pub test_frac: f64,
    /// Slope applied to the standardized planted logit.
    pub label_sharpness: f64,
    /// Scale of the per-scenario profile mean shift.
    pub profile_shift: f64,
    /// Scale of the per-scenario Markov transition tilt.
    pub transition_tilt: f64,
    /// Hidden width of the random labeling maps.
    pub map_width: usize,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        let sizes = vec![
            3000, 2400, 2000, 1700, 1400, 1200, 1000, 900, 800, 700, 650, 600, 560, 530, 510, 500,
            500, 500,
        ];
        Self {
            profile_dim: 16,
            vocab_size: 20,
            max_seq_len: 32,
            min_seq_len: 8,
            n_scenarios: sizes.len(),
            shared_strength: 0.9,
            noise_rate: 0.0,
            size_profile: sizes,
            test_frac: 0.2,
            label_sharpness: 6.0,
            profile_shift: 0.3,
            transition_tilt: 0.5,
            map_width: 16,
        }
    }
}

impl UniverseConfig {
    /// Config with `n` scenarios of `size` samples each.
    pub fn uniform(n: usize, size: usize) -> Self {
        Self {
            n_scenarios: n,
            size_profile: vec![size; n],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("profile_dim", self.profile_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("min_seq_len", self.min_seq_len),
            ("n_scenarios", self.n_scenarios),
            ("map_width", self.map_width),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.min_seq_len > self.max_seq_len {
            return Err(Error::Config(format!(
                "min_seq_len {} exceeds max_seq_len {}",
                self.min_seq_len, self.max_seq_len
            )));
        }
        if !(0.0..=1.0).contains(&self.shared_strength) {
            return Err(Error::Config(format!(
                "shared_strength {} outside [0, 1]",
                self.shared_strength
            )));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise_rate {} outside [0, 1)",
                self.noise_rate
            )));
        }
        if !(self.test_frac > 0.0 && self.test_frac < 1.0) {
            return Err(Error::Config(format!(
                "test_frac {} outside (0, 1)",
                self.test_frac
            )));
        }
        if self.size_profile.len() != self.n_scenarios {
            return Err(Error::Config(format!(
                "size_profile has {} entries but n_scenarios is {}",
                self.size_profile.len(),
                self.n_scenarios
            )));
        }
        if let Some((i, &m)) = self
            .size_profile
            .iter()
            .enumerate()
            .find(|(_, &m)| m < MIN_SCENARIO_SIZE)
        {
            return Err(Error::Config(format!(
                "size_profile[{i}] = {m} is below the minimum of {MIN_SCENARIO_SIZE}"
            )));
        }
        if !(self.label_sharpness.is_finite() && self.label_sharpness > 0.0) {
            return Err(Error::Config("label_sharpness must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Partition {
    /// Training row not yet assigned to support or query.
    Train = 0,
    Test = 1,
    Support = 2,
    Query = 3,
}

impl Partition {
    pub fn is_train(self) -> bool {
        !matches!(self, Partition::Test)
    }

    pub(crate) fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Partition::Train),
            1 => Some(Partition::Test),
            2 => Some(Partition::Support),
            3 => Some(Partition::Query),
            _ => None,
        }
    }
}

/// Which rows of a dataset to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowSet {
    /// Support, query and unassigned training rows.
    Train,
    Test,
    Support,
    Query,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioDataset {
    pub scenario_id: usize,
    pub vocab_size: usize,
    /// `[M, profile_dim]`
    pub profiles: Matrix,
    /// `[M * max_seq_len]`, row-major by sample; 0 is padding.
    pub sequences: Vec<u32>,
    /// `[M * max_seq_len]`, 1 exactly where the event id is non-zero.
    pub seq_mask: Vec<u8>,
    pub labels: Vec<u8>,
    pub partition: Vec<Partition>,
    pub max_seq_len: usize,
    /// Seed the dataset was generated from.
    pub seed: u64,
}

impl ScenarioDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn profile_dim(&self) -> usize {
        self.profiles.cols()
    }

    pub fn events(&self, row: usize) -> &[u32] {
        &self.sequences[row * self.max_seq_len..(row + 1) * self.max_seq_len]
    }

    pub fn mask(&self, row: usize) -> &[u8] {
        &self.seq_mask[row * self.max_seq_len..(row + 1) * self.max_seq_len]
    }

    pub fn rows(&self, set: RowSet) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                let p = self.partition[i];
                match set {
                    RowSet::Train => p.is_train(),
                    RowSet::Test => p == Partition::Test,
                    RowSet::Support => p == Partition::Support,
                    RowSet::Query => p == Partition::Query,
                    RowSet::All => true,
                }
            })
            .collect()
    }

    pub fn labels_f64(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&r| self.labels[r] as f64).collect()
    }

    pub fn has_support_query(&self) -> bool {
        self.partition.contains(&Partition::Support) && self.partition.contains(&Partition::Query)
    }

    /// Checks the structural invariants of a dataset.
    pub fn validate(&self) -> Result<()> {
        let m = self.len();
        let t = self.max_seq_len;
        if self.profiles.rows() != m
            || self.sequences.len() != m * t
            || self.seq_mask.len() != m * t
            || self.partition.len() != m
        {
            return Err(Error::Data(format!(
                "scenario {}: inconsistent array lengths for {m} rows",
                self.scenario_id
            )));
        }
        for row in 0..m {
            let ev = self.events(row);
            let mk = self.mask(row);
            if ev.iter().zip(mk).any(|(&e, &k)| (e != 0) != (k == 1)) {
                return Err(Error::Data(format!(
                    "scenario {}: row {row} mask disagrees with event ids",
                    self.scenario_id
                )));
            }
            if ev.iter().any(|&e| e as usize > self.vocab_size) {
                return Err(Error::Data(format!(
                    "scenario {}: row {row} has an event id above vocab size {}",
                    self.scenario_id, self.vocab_size
                )));
            }
            if !mk.contains(&1) {
                return Err(Error::Data(format!(
                    "scenario {}: row {row} has no events",
                    self.scenario_id
                )));
            }
            if self.labels[row] > 1 {
                return Err(Error::Data(format!(
                    "scenario {}: row {row} label {} is not binary",
                    self.scenario_id, self.labels[row]
                )));
            }
        }
        for set in [RowSet::Train, RowSet::Test] {
            let rows = self.rows(set);
            if !both_classes(&self.labels, &rows) {
                return Err(Error::Data(format!(
                    "scenario {}: {set:?} partition lacks one class",
                    self.scenario_id
                )));
            }
        }
        Ok(())
    }
}

fn both_classes(labels: &[u8], rows: &[usize]) -> bool {
    let pos = rows.iter().filter(|&&r| labels[r] == 1).count();
    pos > 0 && pos < rows.len()
}

/// Two-layer random map `v . tanh(W z + b)`.
struct RandomMap {
    w: Matrix,
    b: Vec<f64>,
    v: Vec<f64>,
}

impl RandomMap {
    fn new(rng: &mut Rng, input: usize, width: usize) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        let w = Matrix::from_vec(
            width,
            input,
            (0..width * input).map(|_| normal(rng) * scale).collect(),
        );
        let b = (0..width).map(|_| 0.5 * normal(rng)).collect();
        let vs = 1.0 / (width as f64).sqrt();
        let v = (0..width).map(|_| normal(rng) * vs).collect();
        Self { w, b, v }
    }

    fn eval(&self, z: &[f64]) -> f64 {
        (0..self.w.rows())
            .map(|k| {
                let pre: f64 = self.w.row(k).iter().zip(z).map(|(a, b)| a * b).sum();
                self.v[k] * (pre + self.b[k]).tanh()
            })
            .sum()
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Row-stochastic transition table stored as cumulative distributions.
struct MarkovChain {
    init: Vec<f64>,
    trans: Vec<Vec<f64>>,
}

fn cumulative_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut acc = 0.0;
    exps.iter()
        .map(|e| {
            acc += e / total;
            acc
        })
        .collect()
}

fn draw(cdf: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

impl MarkovChain {
    fn tilted(base_init: &[f64], base_trans: &Matrix, tilt: f64, rng: &mut Rng) -> Self {
        let v = base_init.len();
        let init_logits: Vec<f64> = base_init.iter().map(|l| l + tilt * normal(rng)).collect();
        let trans = (0..v)
            .map(|i| {
                let row: Vec<f64> = base_trans
                    .row(i)
                    .iter()
                    .map(|l| l + tilt * normal(rng))
                    .collect();
                cumulative_softmax(&row)
            })
            .collect();
        Self {
            init: cumulative_softmax(&init_logits),
            trans,
        }
    }

    /// Event indices in `0..vocab`.
    fn sample(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut cur = draw(&self.init, rng);
        out.push(cur);
        while out.len() < len {
            cur = draw(&self.trans[cur], rng);
            out.push(cur);
        }
        out
    }
}

const TAG_UNIVERSE: u64 = 0x11;
const TAG_SCENARIO: u64 = 0x12;
const TAG_SPLIT: u64 = 0x13;

/// Generates `cfg.n_scenarios` datasets. Deterministic in `(cfg, seed)`.
pub fn generate_scenarios(cfg: &UniverseConfig, seed: u64) -> Result<Vec<ScenarioDataset>> {
    cfg.validate()?;
    let vocab = cfg.vocab_size;
    let input = cfg.profile_dim + vocab;
    let mut urng = rng_for(seed, &[TAG_UNIVERSE]);
    let shared = RandomMap::new(&mut urng, input, cfg.map_width);
    let base_init: Vec<f64> = (0..vocab).map(|_| normal(&mut urng)).collect();
    let base_trans = Matrix::from_vec(
        vocab,
        vocab,
        (0..vocab * vocab)
            .map(|_| 1.5 * normal(&mut urng))
            .collect(),
    );
    (0..cfg.n_scenarios)
        .map(|s| generate_one(cfg, seed, s, &shared, &base_init, &base_trans))
        .collect()
}

fn generate_one(
    cfg: &UniverseConfig,
    seed: u64,
    scenario: usize,
    shared: &RandomMap,
    base_init: &[f64],
    base_trans: &Matrix,
) -> Result<ScenarioDataset> {
    let mut rng = rng_for(seed, &[TAG_SCENARIO, scenario as u64]);
    let (p, vocab, t) = (cfg.profile_dim, cfg.vocab_size, cfg.max_seq_len);
    let own = RandomMap::new(&mut rng, p + vocab, cfg.map_width);
    let shift: Vec<f64> = (0..p)
        .map(|_| cfg.profile_shift * normal(&mut rng))
        .collect();
    let chain = MarkovChain::tilted(base_init, base_trans, cfg.transition_tilt, &mut rng);
    let m = cfg.size_profile[scenario];

    let mut profiles = Matrix::zeros(m, p);
    let mut sequences = vec![0u32; m * t];
    let mut seq_mask = vec![0u8; m * t];
    let mut raw = Vec::with_capacity(m);
    let mut z = vec![0.0; p + vocab];
    for row in 0..m {
        for (j, mu) in shift.iter().enumerate() {
            let x = mu + normal(&mut rng);
            profiles.set(row, j, x);
            z[j] = x;
        }
        let len = rng.random_range(cfg.min_seq_len..=cfg.max_seq_len);
        let events = chain.sample(len, &mut rng);
        z[p..].iter_mut().for_each(|v| *v = 0.0);
        for (pos, &e) in events.iter().enumerate() {
            sequences[row * t + pos] = e as u32 + 1;
            seq_mask[row * t + pos] = 1;
            z[p + e] += vocab as f64 / len as f64;
        }
        z[p..].iter_mut().for_each(|v| *v -= 1.0);
        let s = cfg.shared_strength;
        raw.push(s * shared.eval(&z) + (1.0 - s) * own.eval(&z));
    }

    let mean = raw.iter().sum::<f64>() / m as f64;
    let sd = (raw.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / m as f64)
        .sqrt()
        .max(1e-12);
    let labels: Vec<u8> = raw
        .iter()
        .map(|r| {
            let prob = 1.0 / (1.0 + (-cfg.label_sharpness * (r - mean) / sd).exp());
            let mut y = rng.random::<f64>() < prob;
            if rng.random::<f64>() < cfg.noise_rate {
                y = !y;
            }
            y as u8
        })
        .collect();

    let partition = stratified_test_split(&labels, cfg.test_frac, &mut rng).ok_or_else(|| {
        Error::Data(format!(
            "scenario {scenario}: cannot place both classes in train and test"
        ))
    })?;
    let ds = ScenarioDataset {
        scenario_id: scenario,
        vocab_size: vocab,
        profiles,
        sequences,
        seq_mask,
        labels,
        partition,
        max_seq_len: t,
        seed,
    };
    ds.validate()?;
    Ok(ds)
}

fn stratified_test_split(labels: &[u8], test_frac: f64, rng: &mut Rng) -> Option<Vec<Partition>> {
    let mut partition = vec![Partition::Train; labels.len()];
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < 2 {
            return None;
        }
        idx.shuffle(rng);
        let n_test = ((idx.len() as f64 * test_frac).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..n_test] {
            partition[i] = Partition::Test;
        }
    }
    Some(partition)
}

/// Tags the train rows of `ds` as support or query.
///
/// Exactly `round(support_frac * |train|)` rows become support. A split
/// where either part misses a class is redrawn with a new internal seed, at
/// most ten times.
pub fn split_support_query(
    ds: &ScenarioDataset,
    support_frac: f64,
    seed: u64,
) -> Result<ScenarioDataset> {
    if !(support_frac > 0.0 && support_frac < 1.0) {
        return Err(Error::Config(format!(
            "support_frac {support_frac} outside (0, 1)"
        )));
    }
    let train = ds.rows(RowSet::Train);
    let n_support = (support_frac * train.len() as f64).round() as usize;
    if n_support == 0 || n_support >= train.len() {
        return Err(Error::Data(format!(
            "scenario {}: support fraction {support_frac} of {} train rows leaves an empty part",
            ds.scenario_id,
            train.len()
        )));
    }
    for attempt in 0..SPLIT_RETRIES {
        let mut rng = rng_for(seed, &[TAG_SPLIT, ds.scenario_id as u64, attempt]);
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let (support, query) = order.split_at(n_support);
        if both_classes(&ds.labels, support) && both_classes(&ds.labels, query) {
            let mut out = ds.clone();
            for &r in support {
                out.partition[r] = Partition::Support;
            }
            for &r in query {
                out.partition[r] = Partition::Query;
            }
            return Ok(out);
        }
    }
    Err(Error::Data(format!(
        "scenario {}: no support/query split with both classes after {SPLIT_RETRIES} attempts",
        ds.scenario_id
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> UniverseConfig {
        UniverseConfig {
            size_profile: vec![120, 60, 40],
            n_scenarios: 3,
            ..UniverseConfig::default()
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate_scenarios(&small(), 5).unwrap();
        let b = generate_scenarios(&small(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(a[1].len(), 60);
        for ds in &a {
            ds.validate().unwrap();
        }
        let c = generate_scenarios(&small(), 6).unwrap();
        assert_ne!(a[0].labels, c[0].labels);
    }

    #[test]
    fn rejects_tiny_scenarios() {
        let cfg = UniverseConfig {
            size_profile: vec![120, 19, 40],
            ..small()
        };
        let err = generate_scenarios(&cfg, 1).unwrap_err().to_string();
        assert!(err.contains("size_profile[1]"), "{err}");
    }

    #[test]
    fn support_query_counts() {
        let cfg = UniverseConfig {
            size_profile: vec![125],
            n_scenarios: 1,
            test_frac: 0.2,
            ..UniverseConfig::default()
        };
        let ds = generate_scenarios(&cfg, 3).unwrap().remove(0);
        assert_eq!(ds.rows(RowSet::Train).len(), 100);
        let split = split_support_query(&ds, 0.8, 9).unwrap();
        assert_eq!(split.rows(RowSet::Support).len(), 80);
        assert_eq!(split.rows(RowSet::Query).len(), 20);
        assert_eq!(split, split_support_query(&ds, 0.8, 9).unwrap());
        assert_eq!(split.rows(RowSet::Test), ds.rows(RowSet::Test));
    }

    #[test]
    fn single_class_train_cannot_split() {
        let cfg = UniverseConfig {
            size_profile: vec![40],
            n_scenarios: 1,
            ..UniverseConfig::default()
        };
        let mut ds = generate_scenarios(&cfg, 3).unwrap().remove(0);
        for r in ds.rows(RowSet::Train) {
            ds.labels[r] = 1;
        }
        assert!(split_support_query(&ds, 0.8, 1).is_err());
    }
}
