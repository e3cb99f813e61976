//! The four strategies run over every scenario of a generated universe.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::artifact::save_artifact;
use super::config::{ExperimentConfig, Strategy};
use super::report::{Failure, ReportRow, StrategyReport};
use super::serve::{request_batch, serve_batch};
use crate::arch::Genotype;
use crate::budgetnas::{search_light, searched_spec, train_light, SpaceSpec};
use crate::error::{Error, Result};
use crate::flopsmeter::{genotype_budget, model_flops};
use crate::metaengine::{
    fine_tune, init_agnostic, periodic_refresh, save_meta, InitReport, MetaState, SharedMeta,
};
use crate::nets::{
    auc, build_model, predict, train_model, InputShape, LossSpec, ModelArtifact, Provenance,
    TrainConfig, TrainingSet,
};
use crate::rng::{derive_seed, rng_for};
use crate::synthgen::{generate_scenarios, split_support_query, RowSet, ScenarioDataset};

const TAG_INITIAL: u64 = 0x1b;
const TAG_SINH: u64 = 0x51;
const TAG_MEL: u64 = 0x4c;
const TAG_OURS: u64 = 0x4f;
const TAG_META: u64 = 0x4d;

/// Generates the universe for `seed` and tags support/query rows. A
/// scenario whose split fails is returned as an error in its slot.
pub fn prepare_scenarios(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<Result<ScenarioDataset>>> {
    let raw = generate_scenarios(&cfg.universe, seed)?;
    Ok(raw
        .iter()
        .map(|ds| split_support_query(ds, cfg.support_frac, seed))
        .collect())
}

/// Random choice of `k` scenario indices out of `n`, sorted.
pub fn initial_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, &[TAG_INITIAL]));
    let mut out: Vec<usize> = idx.into_iter().take(k).collect();
    out.sort_unstable();
    out
}

/// Initializes the agnostic model from the initial scenarios of `scenarios`.
pub fn init_meta(
    cfg: &ExperimentConfig,
    scenarios: &[ScenarioDataset],
    seed: u64,
) -> Result<(MetaState, InitReport)> {
    let idx = initial_indices(scenarios.len(), cfg.n_initial_scenarios, seed);
    let pooled: Vec<ScenarioDataset> = idx.iter().map(|&i| scenarios[i].clone()).collect();
    let mut init = cfg.init.clone();
    if let Some(p) = init.predesigned.as_mut() {
        p.arch = cfg.heavy.clone();
    }
    init_agnostic(&pooled, &init, &cfg.meta, derive_seed(seed, &[TAG_META]))
}

/// Genotype-level budget matching `total` whole-model FLOPs for searched
/// models built with the light model's profile and head widths.
pub fn light_genotype_budget(cfg: &ExperimentConfig, space: &SpaceSpec, total: u64) -> Result<u64> {
    let n = space.decision_sizes().len();
    let template: Genotype = space.genotype_from_choices(&vec![0; n]);
    let spec = searched_spec(
        cfg.input_shape(),
        space,
        template,
        cfg.light.profile_mlp_dims.clone(),
        cfg.light.head_mlp_dims.clone(),
    );
    genotype_budget(total, &spec)
}

fn seeded(train: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..train.clone()
    }
}

/// Test AUC, FLOPs, size and serving latency of one model on one scenario.
pub fn evaluate_row(
    cfg: &ExperimentConfig,
    model: &ModelArtifact,
    ds: &ScenarioDataset,
    seed: u64,
    strategy: Strategy,
) -> Result<ReportRow> {
    let test = ds.rows(RowSet::Test);
    let scores = predict(model, ds, &test, 512)?;
    let auc = auc(&scores, &ds.labels_f64(&test))?;
    let batch = request_batch(ds, &test, cfg.serve.batch_size)?;
    let (_, lat) = serve_batch(model, &batch, cfg.serve.reps)?;
    Ok(ReportRow {
        seed,
        scenario_id: ds.scenario_id,
        strategy,
        auc,
        flops: model_flops(&model.spec)?.total,
        param_count: model.param_count(),
        latency_mean_ms: lat.mean_ms,
        latency_p95_ms: lat.p95_ms,
        genotype: match &model.spec.arch {
            crate::nets::Architecture::Searched(s) => Some(s.genotype.describe(&s.ops)),
            _ => None,
        },
    })
}

/// SinH: the heavy model trained on the scenario's train rows alone.
pub fn train_single_heavy(
    cfg: &ExperimentConfig,
    ds: &ScenarioDataset,
    seed: u64,
) -> Result<ModelArtifact> {
    let s = derive_seed(seed, &[TAG_SINH, ds.scenario_id as u64]);
    let spec = cfg.heavy_spec();
    let model = build_model(&spec, s, Provenance::new("SinH", ds.scenario_id, seed))?;
    let set = TrainingSet::from_rows(ds, &ds.rows(RowSet::Train));
    let (model, _) = train_model(&model, &set, &seeded(&cfg.heavy_train, s), LossSpec::Ce)?;
    Ok(model)
}

/// MeL: the pre-designed light model distilled from `teacher`.
pub fn train_meta_light(
    cfg: &ExperimentConfig,
    ds: &ScenarioDataset,
    teacher: &ModelArtifact,
    seed: u64,
) -> Result<ModelArtifact> {
    let s = derive_seed(seed, &[TAG_MEL, ds.scenario_id as u64]);
    train_light(
        &cfg.light_spec(),
        ds,
        teacher,
        &seeded(&cfg.light_train, s),
        cfg.delta,
        Provenance::new("MeL", ds.scenario_id, seed),
    )
}

/// Ours: search under the light model's FLOPs, then distill from `teacher`.
pub fn train_searched_light(
    cfg: &ExperimentConfig,
    ds: &ScenarioDataset,
    teacher: &ModelArtifact,
    seed: u64,
) -> Result<ModelArtifact> {
    let s = derive_seed(seed, &[TAG_OURS, ds.scenario_id as u64]);
    let space = cfg.search_space()?;
    let total = cfg.flops_budget()?;
    let budget = light_genotype_budget(cfg, &space, total)?;
    let mut nas = cfg.nas.clone();
    nas.delta = cfg.delta;
    let found = search_light(
        ds,
        teacher,
        &space,
        cfg.light.profile_mlp_dims.clone(),
        cfg.light.head_mlp_dims.clone(),
        budget,
        &nas,
        &seeded(&cfg.light_train, s),
        Provenance::new("Ours", ds.scenario_id, seed),
    )?;
    let flops = model_flops(&found.model.spec)?.total;
    if flops > total {
        return Err(Error::InfeasibleBudget {
            budget: total,
            minimum: flops,
        });
    }
    log::info!(
        "scenario {}: searched {} ({flops} FLOPs, budget {total})",
        ds.scenario_id,
        found.genotype.describe(&space.ops)
    );
    Ok(found.model)
}

fn model_dir(out: &Path, seed: u64, scenario: usize, s: Strategy) -> PathBuf {
    out.join("models")
        .join(format!("seed-{seed}"))
        .join(format!("scenario-{scenario}"))
        .join(s.name())
}

struct SeedRun {
    rows: Vec<ReportRow>,
    failures: Vec<Failure>,
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let prepared = prepare_scenarios(cfg, seed)?;
    let mut scenarios = Vec::new();
    for (i, p) in prepared.into_iter().enumerate() {
        match p {
            Ok(ds) => scenarios.push(ds),
            Err(e) => failures.push(Failure {
                seed,
                scenario_id: i,
                strategy: None,
                error: e.to_string(),
            }),
        }
    }
    if scenarios.is_empty() {
        return Ok(SeedRun { rows, failures });
    }
    let input = InputShape::of(&scenarios[0]);
    if input != cfg.input_shape() {
        return Err(Error::Data(format!(
            "generated input shape {input:?} differs from the configured {:?}",
            cfg.input_shape()
        )));
    }
    let meta = if cfg.uses_meta() {
        let (state, report) = init_meta(cfg, &scenarios, seed)?;
        log::info!(
            "seed {seed}: agnostic model candidates {:?}",
            report.candidates
        );
        Some(SharedMeta::new(state))
    } else {
        None
    };
    let wants = |s: Strategy| cfg.strategies.contains(&s);
    let mut done_since_refresh = 0;
    for ds in &scenarios {
        let id = ds.scenario_id;
        let mut record = |strategy: Strategy, model: Result<ModelArtifact>| {
            let row = model.and_then(|m| {
                if cfg.save_models {
                    save_artifact(&m, &model_dir(&cfg.out_dir, seed, id, strategy))?;
                }
                evaluate_row(cfg, &m, ds, seed, strategy)
            });
            match row {
                Ok(r) => {
                    log::info!("seed {seed} scenario {id} {strategy}: auc {:.4}", r.auc);
                    rows.push(r);
                }
                Err(e) => {
                    log::warn!("seed {seed} scenario {id} {strategy} failed: {e}");
                    failures.push(Failure {
                        seed,
                        scenario_id: id,
                        strategy: Some(strategy),
                        error: e.to_string(),
                    });
                }
            }
        };
        if wants(Strategy::SinH) {
            record(Strategy::SinH, train_single_heavy(cfg, ds, seed));
        }
        let Some(shared) = &meta else { continue };
        let snapshot = shared.snapshot();
        let tuned = fine_tune(&snapshot, ds).and_then(|(theta_u, packet)| {
            shared.commit(&[packet])?;
            shared.modify(|s| {
                let mut next = s.clone();
                next.archive_scenario(ds);
                Ok(next)
            })?;
            Ok(theta_u)
        });
        let teacher = match tuned {
            Ok(t) => t,
            Err(e) => {
                let msg = e.to_string();
                for s in [Strategy::MeH, Strategy::MeL, Strategy::Ours] {
                    if wants(s) {
                        failures.push(Failure {
                            seed,
                            scenario_id: id,
                            strategy: Some(s),
                            error: format!("fine-tuning failed: {msg}"),
                        });
                    }
                }
                continue;
            }
        };
        if wants(Strategy::MeH) {
            record(Strategy::MeH, Ok(teacher.clone()));
        }
        if wants(Strategy::MeL) {
            record(Strategy::MeL, train_meta_light(cfg, ds, &teacher, seed));
        }
        if wants(Strategy::Ours) {
            record(
                Strategy::Ours,
                train_searched_light(cfg, ds, &teacher, seed),
            );
        }
        done_since_refresh += 1;
        if cfg.refresh_every.is_some_and(|k| done_since_refresh >= k) {
            done_since_refresh = 0;
            shared.modify(|s| periodic_refresh(s, &scenarios))?;
        }
    }
    if let Some(shared) = meta {
        save_meta(
            &shared.into_inner(),
            &cfg.out_dir.join("meta").join(format!("seed-{seed}")),
        )?;
    }
    Ok(SeedRun { rows, failures })
}

/// Runs every configured strategy for every seed and writes the report
/// (`rows.jsonl`, `summary.md`, the resolved `config.toml`) to `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<StrategyReport> {
    cfg.validate()?;
    let budget = if cfg.strategies.contains(&Strategy::Ours) {
        Some(cfg.flops_budget()?)
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, seed)?;
        rows.extend(run.rows);
        failures.extend(run.failures);
    }
    if let Some(b) = budget {
        // by construction; a violation is a bug, not a scenario failure
        for r in rows.iter().filter(|r| r.strategy == Strategy::Ours) {
            assert!(
                r.flops <= b,
                "searched model over budget: {} > {b}",
                r.flops
            );
        }
    }
    let report = StrategyReport::new(rows, failures, budget);
    report.write(&cfg.out_dir)?;
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    crate::io::write_bytes(&cfg.out_dir.join("config.toml"), text.as_bytes())?;
    Ok(report)
}
