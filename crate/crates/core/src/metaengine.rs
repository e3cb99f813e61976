//! Scenario-agnostic heavy model lifecycle: initialization by comparing
//! candidate pipelines on pooled data, per-scenario fine-tuning from a
//! shared snapshot, query-set feedback, aggregated meta updates and
//! periodic refresh over archived scenario data.

use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arch::OpSpec;
use crate::budgetnas::{derive_genotype, search_on, searched_spec, NasConfig, SpaceSpec, Supernet};
use crate::error::{Error, Result};
use crate::flopsmeter::{model_flops, space_max_flops};
use crate::hpo::{optimize, Config, HpoOptions, SearchSpaceSpec, TrialBudget, TrialContext};
use crate::io::{read_json, write_json};
use crate::nets::optim::sgd_step;
use crate::nets::{
    auc, build_model, loss_and_grads, predict, train_model, train_model_with, ArchConfig,
    Architecture, Batch, InputShape, LossSpec, ModelArtifact, ModelSpec, ParamStore, Provenance,
    TrainConfig, TrainingSet,
};
use crate::rng::{derive_seed, rng_for};
use crate::synthgen::{RowSet, ScenarioDataset};

pub const META_FORMAT_VERSION: u32 = 1;

/// Rows used to fit and score initial candidates are split per scenario.
const INIT_TAG: u64 = 0x1a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner (fine-tuning) SGD rate.
    pub gamma: f64,
    /// Outer rate; `None` means `0.1 * gamma`.
    pub eta: Option<f64>,
    /// Passes over the support set during fine-tuning.
    pub inner_steps: usize,
    pub inner_batch_size: usize,
    /// Packets whose base lags the current version by more are dropped.
    pub staleness_bound: u64,
    /// Differentiate through the inner steps (finite-difference
    /// Hessian-vector products); meant for tiny models.
    pub second_order: bool,
    /// Schedule for periodic refresh over the archive.
    pub refresh: TrainConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            eta: None,
            inner_steps: 1,
            inner_batch_size: 32,
            staleness_bound: 4,
            second_order: false,
            refresh: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
        }
    }
}

impl MetaConfig {
    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(0.1 * self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        let eta = self.eta();
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(eta >= 0.0 && eta <= self.gamma) {
            return Err(Error::Config(format!(
                "eta {eta} must lie in [0, gamma = {}]",
                self.gamma
            )));
        }
        if self.inner_batch_size == 0 {
            return Err(Error::Config("inner_batch_size must be >= 1".into()));
        }
        self.refresh.validate()
    }
}

/// Training rows of one scenario kept for periodic refresh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub scenario_id: usize,
    pub rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    /// θ₀
    pub agnostic: ModelArtifact,
    pub gamma: f64,
    pub eta: f64,
    pub inner_steps: usize,
    pub inner_batch_size: usize,
    pub staleness_bound: u64,
    pub second_order: bool,
    pub refresh: TrainConfig,
    pub version: u64,
    pub archive: Vec<ArchiveEntry>,
}

impl MetaState {
    pub fn new(agnostic: ModelArtifact, cfg: &MetaConfig) -> Result<Self> {
        cfg.validate()?;
        agnostic.validate()?;
        Ok(Self {
            agnostic,
            gamma: cfg.gamma,
            eta: cfg.eta(),
            inner_steps: cfg.inner_steps,
            inner_batch_size: cfg.inner_batch_size,
            staleness_bound: cfg.staleness_bound,
            second_order: cfg.second_order,
            refresh: cfg.refresh.clone(),
            version: 0,
            archive: Vec::new(),
        })
    }

    /// Adds (or replaces) the archived training rows of a scenario.
    pub fn archive_scenario(&mut self, ds: &ScenarioDataset) {
        let entry = ArchiveEntry {
            scenario_id: ds.scenario_id,
            rows: ds.rows(RowSet::Train),
        };
        match self
            .archive
            .iter_mut()
            .find(|e| e.scenario_id == ds.scenario_id)
        {
            Some(e) => *e = entry,
            None => self.archive.push(entry),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackPacket {
    pub scenario_id: usize,
    pub query_gradient: ParamStore,
    pub query_loss: f64,
    pub base_version: u64,
}

/// Mean cross-entropy and its gradient over `rows`, in chunks.
fn mean_loss_and_grads(
    spec: &ModelSpec,
    params: &ParamStore,
    ds: &ScenarioDataset,
    rows: &[usize],
) -> Result<(f64, ParamStore)> {
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for part in rows.chunks(512) {
        let batch = Batch::from_rows(ds, part);
        let (l, g) = loss_and_grads(spec, params, &batch, LossSpec::Ce)?;
        let w = part.len() as f64 / rows.len() as f64;
        total += l * w;
        grads.axpy(w, &g)?;
    }
    Ok((total, grads))
}

/// Central-difference Hessian-vector product of the batch loss.
fn hessian_vector(
    spec: &ModelSpec,
    params: &ParamStore,
    batch: &Batch,
    v: &ParamStore,
) -> Result<ParamStore> {
    let norm = v.flatten().iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(v.zeros_like());
    }
    let scale = params.flatten().iter().map(|x| x * x).sum::<f64>().sqrt();
    let eps = 1e-5 * (1.0 + scale) / norm;
    let mut plus = params.clone();
    plus.axpy(eps, v)?;
    let mut minus = params.clone();
    minus.axpy(-eps, v)?;
    let (_, gp) = loss_and_grads(spec, &plus, batch, LossSpec::Ce)?;
    let (_, gm) = loss_and_grads(spec, &minus, batch, LossSpec::Ce)?;
    let mut out = gp;
    out.axpy(-1.0, &gm)?;
    for (_, m) in out.iter_mut() {
        for x in m.data_mut() {
            *x /= 2.0 * eps;
        }
    }
    Ok(out)
}

/// Adapts a copy of θ₀ to `ds` with plain SGD at rate γ over the support
/// rows, then measures the query loss and its gradient at the adapted
/// parameters. θ₀ is never modified.
pub fn fine_tune(
    state: &MetaState,
    ds: &ScenarioDataset,
) -> Result<(ModelArtifact, FeedbackPacket)> {
    let support = ds.rows(RowSet::Support);
    let query = ds.rows(RowSet::Query);
    if support.is_empty() || query.is_empty() {
        return Err(Error::Data(format!(
            "scenario {}: fine-tuning needs support and query rows",
            ds.scenario_id
        )));
    }
    let spec = &state.agnostic.spec;
    let mut params = state.agnostic.params.clone();
    // (parameters before the step, batch) for differentiating through steps
    let mut trace: Vec<(ParamStore, Batch)> = Vec::new();
    if state.gamma > 0.0 {
        for pass in 0..state.inner_steps {
            let mut order = support.clone();
            order.shuffle(&mut rng_for(
                ds.seed,
                &[0x4d, ds.scenario_id as u64, pass as u64],
            ));
            for (i, part) in order.chunks(state.inner_batch_size).enumerate() {
                let batch = Batch::from_rows(ds, part);
                let (l, g) = loss_and_grads(spec, &params, &batch, LossSpec::Ce)?;
                if !l.is_finite() || !g.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        batch: i,
                        loss: l,
                        context: format!(" while fine-tuning scenario {}", ds.scenario_id),
                    });
                }
                if state.second_order {
                    trace.push((params.clone(), batch));
                }
                sgd_step(&mut params, &g, state.gamma)?;
            }
        }
    }
    let (query_loss, mut grad) = mean_loss_and_grads(spec, &params, ds, &query)?;
    if !query_loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch: 0,
            loss: query_loss,
            context: format!(" on the query set of scenario {}", ds.scenario_id),
        });
    }
    // d θᵤ / d θ₀ = Π (I - γ H_t); apply its transpose right to left
    for (p, batch) in trace.iter().rev() {
        let hv = hessian_vector(spec, p, batch, &grad)?;
        grad.axpy(-state.gamma, &hv)?;
    }
    let mut provenance = state.agnostic.provenance.clone();
    provenance.strategy = "fine-tuned".into();
    provenance.scenario = ds.scenario_id.to_string();
    let theta_u = ModelArtifact {
        spec: spec.clone(),
        params,
        provenance,
    };
    let packet = FeedbackPacket {
        scenario_id: ds.scenario_id,
        query_gradient: grad,
        query_loss,
        base_version: state.version,
    };
    Ok((theta_u, packet))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub applied: Vec<usize>,
    /// Scenario ids of packets dropped for staleness.
    pub dropped: Vec<usize>,
    pub version: u64,
}

/// θ₀ ← θ₀ − η Σ g over the fresh packets; the version goes up by one.
/// When every packet is stale the state is returned unchanged.
pub fn meta_update(
    state: &MetaState,
    packets: &[FeedbackPacket],
) -> Result<(MetaState, UpdateReport)> {
    if packets.is_empty() {
        return Err(Error::Config(
            "meta update needs at least one packet".into(),
        ));
    }
    let theta = &state.agnostic.params;
    let mut report = UpdateReport::default();
    let mut sum = theta.zeros_like();
    for p in packets {
        if !p.query_gradient.same_layout(theta) {
            return Err(Error::Shape(format!(
                "feedback from scenario {} does not match the agnostic model layout",
                p.scenario_id
            )));
        }
        if !p.query_gradient.is_finite() {
            return Err(Error::Data(format!(
                "feedback from scenario {} has non-finite gradients",
                p.scenario_id
            )));
        }
        if p.base_version > state.version {
            return Err(Error::Data(format!(
                "feedback from scenario {} claims future version {} (current {})",
                p.scenario_id, p.base_version, state.version
            )));
        }
        if state.version - p.base_version > state.staleness_bound {
            report.dropped.push(p.scenario_id);
            continue;
        }
        sum.axpy(1.0, &p.query_gradient)?;
        report.applied.push(p.scenario_id);
    }
    if report.applied.is_empty() {
        log::warn!(
            "all {} feedback packets are stale at version {}; nothing applied",
            packets.len(),
            state.version
        );
        report.version = state.version;
        return Ok((state.clone(), report));
    }
    if !report.dropped.is_empty() {
        log::warn!("dropped stale feedback from scenarios {:?}", report.dropped);
    }
    let mut next = state.clone();
    next.agnostic.params.axpy(-state.eta, &sum)?;
    next.version += 1;
    report.version = next.version;
    Ok((next, report))
}

/// Retrains θ₀ over the union of archived scenario training rows using the
/// state's refresh schedule. `data` must hold every archived scenario.
pub fn periodic_refresh(state: &MetaState, data: &[ScenarioDataset]) -> Result<MetaState> {
    if state.archive.is_empty() {
        log::warn!("refresh requested with an empty archive; nothing done");
        return Ok(state.clone());
    }
    if state.refresh.epochs == 0 {
        return Ok(state.clone());
    }
    let set = archive_set(state, data)?;
    let (trained, _) = train_model(&state.agnostic, &set, &state.refresh, LossSpec::Ce)?;
    let mut next = state.clone();
    next.agnostic.params = trained.params;
    next.version += 1;
    Ok(next)
}

/// Pooled training set over the archive, in archive order.
pub fn archive_set<'a>(state: &MetaState, data: &'a [ScenarioDataset]) -> Result<TrainingSet<'a>> {
    let parts = state
        .archive
        .iter()
        .map(|e| {
            let ds = data
                .iter()
                .find(|d| d.scenario_id == e.scenario_id)
                .ok_or_else(|| {
                    Error::Data(format!("archived scenario {} not supplied", e.scenario_id))
                })?;
            Ok((ds, e.rows.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet::pooled(&parts))
}

/// Meta state shared between concurrent fine-tunes and a single writer.
/// Readers take an immutable snapshot; commits are serialized and swap in
/// a complete new state.
pub struct SharedMeta {
    current: RwLock<Arc<MetaState>>,
    writer: Mutex<()>,
}

impl SharedMeta {
    pub fn new(state: MetaState) -> Self {
        Self {
            current: RwLock::new(Arc::new(state)),
            writer: Mutex::new(()),
        }
    }

    pub fn snapshot(&self) -> Arc<MetaState> {
        self.current.read().expect("meta lock").clone()
    }

    pub fn commit(&self, packets: &[FeedbackPacket]) -> Result<UpdateReport> {
        let _w = self.writer.lock().expect("meta writer");
        let base = self.snapshot();
        let (next, report) = meta_update(&base, packets)?;
        *self.current.write().expect("meta lock") = Arc::new(next);
        Ok(report)
    }

    /// Applies `f` to the current state under the writer lock.
    pub fn modify(&self, f: impl FnOnce(&MetaState) -> Result<MetaState>) -> Result<()> {
        let _w = self.writer.lock().expect("meta writer");
        let next = f(&self.snapshot())?;
        *self.current.write().expect("meta lock") = Arc::new(next);
        Ok(())
    }

    pub fn into_inner(self) -> MetaState {
        let arc = self.current.into_inner().expect("meta lock");
        Arc::try_unwrap(arc).unwrap_or_else(|a| (*a).clone())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaRecord {
    format_version: u32,
    gamma: f64,
    eta: f64,
    inner_steps: usize,
    inner_batch_size: usize,
    staleness_bound: u64,
    second_order: bool,
    refresh: TrainConfig,
    version: u64,
    archive: Vec<ArchiveEntry>,
}

/// Writes `dir/agnostic/` (model artifact) and `dir/meta.json`.
pub fn save_meta(state: &MetaState, dir: &Path) -> Result<()> {
    crate::pipeline::save_artifact(&state.agnostic, &dir.join("agnostic"))?;
    let rec = MetaRecord {
        format_version: META_FORMAT_VERSION,
        gamma: state.gamma,
        eta: state.eta,
        inner_steps: state.inner_steps,
        inner_batch_size: state.inner_batch_size,
        staleness_bound: state.staleness_bound,
        second_order: state.second_order,
        refresh: state.refresh.clone(),
        version: state.version,
        archive: state.archive.clone(),
    };
    write_json(&dir.join("meta.json"), &rec)
}

pub fn load_meta(dir: &Path) -> Result<MetaState> {
    let path = dir.join("meta.json");
    let rec: MetaRecord = read_json(&path)?;
    if rec.format_version != META_FORMAT_VERSION {
        return Err(Error::Version {
            path,
            expected: META_FORMAT_VERSION,
            found: rec.format_version,
        });
    }
    let agnostic = crate::pipeline::load_artifact(&dir.join("agnostic"))?;
    Ok(MetaState {
        agnostic,
        gamma: rec.gamma,
        eta: rec.eta,
        inner_steps: rec.inner_steps,
        inner_batch_size: rec.inner_batch_size,
        staleness_bound: rec.staleness_bound,
        second_order: rec.second_order,
        refresh: rec.refresh,
        version: rec.version,
        archive: rec.archive,
    })
}

// ---------------------------------------------------------------------------
// initialization

/// Pre-designed heavy candidate, optionally tuned first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredesignedCandidate {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Tune learning rate and layer sizes before the final fit.
    pub tune: Option<TuneConfig>,
}

impl Default for PredesignedCandidate {
    fn default() -> Self {
        Self {
            arch: ArchConfig::heavy(crate::nets::EncoderKind::Recurrent),
            train: TrainConfig::default(),
            tune: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub space: SearchSpaceSpec,
    pub budget: TrialBudget,
    pub options: HpoOptions,
    /// Share of fit rows each trial validates on.
    pub val_frac: f64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            space: SearchSpaceSpec::default_space(),
            budget: TrialBudget {
                max_trials: 6,
                ..TrialBudget::default()
            },
            options: HpoOptions::default(),
            val_frac: 0.2,
        }
    }
}

/// Searched heavy candidate: supernet search on pooled data without a
/// teacher, derivation under `flops_budget` (the space maximum when
/// unset), then training from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchedCandidate {
    pub nas: NasConfig,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub profile_mlp_dims: Vec<usize>,
    pub head_mlp_dims: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for SearchedCandidate {
    fn default() -> Self {
        let heavy = ArchConfig::heavy(crate::nets::EncoderKind::Recurrent);
        Self {
            nas: NasConfig {
                n_layers: 6,
                delta: 0.0,
                ..NasConfig::default()
            },
            hidden_dim: heavy.hidden_dim,
            n_heads: heavy.n_heads,
            embed_dim: heavy.embed_dim,
            profile_mlp_dims: heavy.profile_mlp_dims,
            head_mlp_dims: heavy.head_mlp_dims,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub predesigned: Option<PredesignedCandidate>,
    pub searched: Option<SearchedCandidate>,
    /// Share of each pooled scenario's train rows held out for selection.
    pub val_frac: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            predesigned: Some(PredesignedCandidate::default()),
            searched: None,
            val_frac: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub name: String,
    pub val_auc: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub candidates: Vec<CandidateScore>,
    pub selected: usize,
}

/// AUC values closer than this count as a tie.
pub const AUC_TIE: f64 = 1e-6;

/// Highest validation AUC; ties within [`AUC_TIE`] go to fewer FLOPs, then
/// to the earlier candidate.
pub fn select_candidate(scores: &[CandidateScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in scores.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &scores[b];
                let better = if (c.val_auc - cur.val_auc).abs() <= AUC_TIE {
                    c.flops < cur.flops
                } else {
                    c.val_auc > cur.val_auc
                };
                Some(if better { i } else { b })
            }
        };
    }
    best
}

fn score(model: &ModelArtifact, val: &[(&ScenarioDataset, Vec<usize>)]) -> Result<f64> {
    let mut s = Vec::new();
    let mut y = Vec::new();
    for (ds, rows) in val {
        s.extend(predict(model, ds, rows, 512)?);
        y.extend(ds.labels_f64(rows));
    }
    auc(&s, &y)
}

fn apply_tuned(base: &PredesignedCandidate, cfg: &Config) -> Result<(ArchConfig, TrainConfig)> {
    let mut arch = base.arch.clone();
    let mut train = base.train.clone();
    let dims = |v: &serde_json::Value| -> Result<Vec<usize>> {
        serde_json::from_value(v.clone())
            .map_err(|e| Error::Config(format!("layer widths {v}: {e}")))
    };
    for (k, v) in cfg {
        match k.as_str() {
            "learning_rate" => {
                train.learning_rate = v
                    .as_f64()
                    .ok_or_else(|| Error::Config(format!("learning_rate {v}")))?
            }
            "profile_mlp_dims" => arch.profile_mlp_dims = dims(v)?,
            "head_mlp_dims" => arch.head_mlp_dims = dims(v)?,
            "n_encoder_layers" => {
                arch.n_encoder_layers = v
                    .as_u64()
                    .ok_or_else(|| Error::Config(format!("n_encoder_layers {v}")))?
                    as usize
            }
            "hidden_dim" => {
                arch.hidden_dim = v
                    .as_u64()
                    .ok_or_else(|| Error::Config(format!("hidden_dim {v}")))?
                    as usize
            }
            other => {
                return Err(Error::Config(format!(
                    "tuned parameter `{other}` does not map onto the heavy model"
                )))
            }
        }
    }
    Ok((arch, train))
}

type Parts<'a> = Vec<(&'a ScenarioDataset, Vec<usize>)>;

fn split_parts<'a>(
    parts: &[(&'a ScenarioDataset, Vec<usize>)],
    frac: f64,
    seed: u64,
) -> (Parts<'a>, Parts<'a>) {
    let mut fit = Vec::new();
    let mut val = Vec::new();
    for (ds, rows) in parts {
        let mut rows = rows.clone();
        rows.shuffle(&mut rng_for(seed, &[INIT_TAG, ds.scenario_id as u64]));
        let n_val = ((rows.len() as f64 * frac).round() as usize)
            .clamp(1, rows.len().saturating_sub(1).max(1));
        let (v, f) = rows.split_at(n_val);
        val.push((*ds, v.to_vec()));
        fit.push((*ds, f.to_vec()));
    }
    (fit, val)
}

fn fit_predesigned(
    cand: &PredesignedCandidate,
    input: InputShape,
    fit: &[(&ScenarioDataset, Vec<usize>)],
    seed: u64,
) -> Result<ModelArtifact> {
    let (arch, mut train) = match &cand.tune {
        None => (cand.arch.clone(), cand.train.clone()),
        Some(t) => {
            let (inner_fit, inner_val) = split_parts(fit, t.val_frac, derive_seed(seed, &[1]));
            let set = TrainingSet::pooled(&inner_fit);
            let objective =
                |c: &Config, ctx: &mut TrialContext| -> std::result::Result<f64, String> {
                    let (arch, mut train) = apply_tuned(cand, c).map_err(|e| e.to_string())?;
                    train.seed = seed;
                    let spec = ModelSpec::new(input, Architecture::Predesigned(arch));
                    let model = build_model(&spec, seed, Provenance::new("tune", "pooled", seed))
                        .map_err(|e| e.to_string())?;
                    let mut last = f64::NAN;
                    train_model_with(&model, &set, &train, LossSpec::Ce, &mut |_, m| {
                        last = score(m, &inner_val)?;
                        Ok(ctx.report(last))
                    })
                    .map_err(|e| e.to_string())?;
                    Ok(last)
                };
            let mut opts = t.options.clone();
            opts.seed = derive_seed(seed, &[2]);
            let (best, _) = optimize(&objective, &t.space, &t.budget, &opts)?;
            log::info!(
                "tuned heavy config {:?} (val auc {:?})",
                best.config,
                best.metric
            );
            apply_tuned(cand, &best.config)?
        }
    };
    train.seed = seed;
    let spec = ModelSpec::new(input, Architecture::Predesigned(arch));
    let model = build_model(&spec, seed, Provenance::new("agnostic", "pooled", seed))?;
    let (model, _) = train_model(&model, &TrainingSet::pooled(fit), &train, LossSpec::Ce)?;
    Ok(model)
}

fn fit_searched(
    cand: &SearchedCandidate,
    input: InputShape,
    fit: &[(&ScenarioDataset, Vec<usize>)],
    seed: u64,
) -> Result<ModelArtifact> {
    let ops: Vec<OpSpec> = SpaceSpec::default_candidates(cand.hidden_dim, cand.n_heads);
    let space = SpaceSpec::new(cand.nas.n_layers, ops)?;
    let mut net = Supernet::new(
        space.clone(),
        input,
        cand.profile_mlp_dims.clone(),
        cand.head_mlp_dims.clone(),
        seed,
    )?;
    // search weights on one half, architecture on the other
    let (a, b) = split_parts(fit, cand.nas.val_frac, derive_seed(seed, &[3]));
    let (train_set, val_set) = (TrainingSet::pooled(&b), TrainingSet::pooled(&a));
    let mut nas = cand.nas.clone();
    nas.delta = 0.0;
    net.arch.tau = nas.tau_start;
    let (net, _) = search_on(net, &train_set, &val_set, &nas, seed)?;
    let shape = net.shape();
    let budget = match nas.flops_budget {
        Some(b) => b,
        None => space_max_flops(space.n_layers, &space.ops, shape)?,
    };
    let genotype = derive_genotype(&net.arch, &space, budget, shape)?;
    let spec = searched_spec(
        input,
        &space,
        genotype,
        cand.profile_mlp_dims.clone(),
        cand.head_mlp_dims.clone(),
    );
    let mut train = cand.train.clone();
    train.seed = seed;
    let model = build_model(&spec, seed, Provenance::new("agnostic", "pooled", seed))?;
    let (model, _) = train_model(&model, &TrainingSet::pooled(fit), &train, LossSpec::Ce)?;
    Ok(model)
}

/// Builds θ₀ from the pooled train rows of `pooled`: every enabled
/// candidate is fit on the same rows and scored by AUC on a held-out
/// share; the best (see [`select_candidate`]) becomes the agnostic model.
/// The pooled train rows are archived for refresh.
pub fn init_agnostic(
    pooled: &[ScenarioDataset],
    init: &InitConfig,
    meta: &MetaConfig,
    seed: u64,
) -> Result<(MetaState, InitReport)> {
    if pooled.is_empty() {
        return Err(Error::Data("no pooled scenarios to initialize from".into()));
    }
    if init.predesigned.is_none() && init.searched.is_none() {
        return Err(Error::Config(
            "both agnostic-model candidate pipelines are disabled".into(),
        ));
    }
    if !(init.val_frac > 0.0 && init.val_frac < 1.0) {
        return Err(Error::Config(format!(
            "val_frac {} outside (0, 1)",
            init.val_frac
        )));
    }
    meta.validate()?;
    let input = InputShape::of(&pooled[0]);
    if pooled.iter().any(|d| InputShape::of(d) != input) {
        return Err(Error::Data(
            "pooled scenarios disagree on input shape".into(),
        ));
    }
    let parts: Vec<(&ScenarioDataset, Vec<usize>)> =
        pooled.iter().map(|d| (d, d.rows(RowSet::Train))).collect();
    let (fit, val) = split_parts(&parts, init.val_frac, seed);

    let mut models = Vec::new();
    let mut names = Vec::new();
    if let Some(c) = &init.predesigned {
        models.push(fit_predesigned(c, input, &fit, derive_seed(seed, &[0x70]))?);
        names.push("predesigned");
    }
    if let Some(c) = &init.searched {
        models.push(fit_searched(c, input, &fit, derive_seed(seed, &[0x73]))?);
        names.push("searched");
    }
    let candidates = models
        .iter()
        .zip(&names)
        .map(|(m, n)| {
            Ok(CandidateScore {
                name: (*n).into(),
                val_auc: score(m, &val)?,
                flops: model_flops(&m.spec)?.total,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let selected = select_candidate(&candidates).expect("at least one candidate");
    log::info!(
        "agnostic model: {} (val auc {:.4})",
        candidates[selected].name,
        candidates[selected].val_auc
    );
    let agnostic = models.swap_remove(selected);
    let mut state = MetaState::new(agnostic, meta)?;
    for d in pooled {
        state.archive_scenario(d);
    }
    Ok((
        state,
        InitReport {
            candidates,
            selected,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(auc: f64, flops: u64) -> CandidateScore {
        CandidateScore {
            name: String::new(),
            val_auc: auc,
            flops,
        }
    }

    #[test]
    fn higher_auc_wins() {
        assert_eq!(select_candidate(&[c(0.75, 10), c(0.77, 99)]), Some(1));
    }

    #[test]
    fn tie_goes_to_fewer_flops() {
        assert_eq!(select_candidate(&[c(0.77, 10), c(0.7700005, 5)]), Some(1));
        assert_eq!(select_candidate(&[c(0.77, 5), c(0.7700005, 10)]), Some(0));
    }

    #[test]
    fn single_candidate_selected() {
        assert_eq!(select_candidate(&[c(0.5, 1)]), Some(0));
        assert_eq!(select_candidate(&[]), None);
    }

    #[test]
    fn eta_defaults_to_a_tenth_of_gamma() {
        let m = MetaConfig {
            gamma: 0.2,
            ..MetaConfig::default()
        };
        assert!((m.eta() - 0.02).abs() < 1e-15);
        let bad = MetaConfig {
            eta: Some(0.3),
            ..m
        };
        assert!(bad.validate().is_err());
    }
}
