use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use longtail::flopsmeter::model_flops;
use longtail::metaengine::save_meta;
use longtail::nets::{auc, predict, Architecture};
use longtail::pipeline::{
    init_meta, load_artifact, load_config, prepare_scenarios, request_batch, run_experiment,
    save_artifact, serve_batch, train_searched_light, train_single_heavy, ExperimentConfig,
    StrategyReport,
};
use longtail::synthgen::{
    generate_scenarios, load_universe, save_universe, split_support_query, RowSet, ScenarioDataset,
};
use serde_json::json;

/// Many-scenario modeling: meta-learned heavy models and FLOPs-budgeted
/// light models on synthetic scenario families.
#[derive(Parser)]
#[command(name = "longtail", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Seed; replaces the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DataSource {
    /// Universe directory written by `datagen`; generated from the config
    /// and seed when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Scenario index.
    #[arg(long, default_value_t = 0)]
    scenario: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a scenario universe and write it to disk.
    Datagen(Common),
    /// Fit the scenario-agnostic model on the initial scenarios.
    InitAgnostic(Common),
    /// Run every configured strategy on every scenario and write the report.
    Run(Common),
    /// Search and train a light model for one scenario under a FLOPs budget.
    SearchLight {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        scenario: usize,
        /// Whole-model FLOPs budget; defaults to the pre-defined light model.
        #[arg(long)]
        flops_budget: Option<u64>,
        /// Teacher artifact; a single-scenario heavy model is trained when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Test AUC, FLOPs and size of a saved model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: DataSource,
        #[arg(long)]
        model: PathBuf,
    },
    /// Time batched inference of a saved model.
    Serve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: DataSource,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Render the summary of a finished run.
    Report(Common),
}

/// Config problems exit with status 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// A run that finished with some failed rows exits with status 1.
#[derive(Debug)]
struct Partial(usize);

impl std::fmt::Display for Partial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "partial run: {} failures", self.0)
    }
}

impl std::error::Error for Partial {}

fn config_err(e: longtail::Error) -> anyhow::Error {
    match e {
        longtail::Error::Config(m) => ConfigError(m).into(),
        other => other.into(),
    }
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        // an unreadable config file is a config error too
        Some(p) => load_config(p).map_err(|e| match e {
            longtail::Error::Io { path, source } => {
                ConfigError(format!("cannot read {}: {source}", path.display())).into()
            }
            other => config_err(other),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn write_json(path: &Path, v: &serde_json::Value) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn seed_of(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds.first().copied().unwrap_or(0)
}

fn scenario(cfg: &ExperimentConfig, source: &DataSource) -> anyhow::Result<ScenarioDataset> {
    let data = match &source.data {
        Some(dir) => load_universe(dir)?.2,
        None => generate_scenarios(&cfg.universe, seed_of(cfg))?,
    };
    let n = data.len();
    data.into_iter().nth(source.scenario).ok_or_else(|| {
        ConfigError(format!(
            "scenario {} out of range ({n} scenarios)",
            source.scenario
        ))
        .into()
    })
}

fn datagen(common: &Common) -> anyhow::Result<()> {
    let cfg = load(common)?;
    let seed = seed_of(&cfg);
    let data = generate_scenarios(&cfg.universe, seed).map_err(config_err)?;
    save_universe(&data, &cfg.universe, seed, &cfg.out_dir)?;
    println!(
        "wrote {} scenarios ({} rows) to {}",
        data.len(),
        data.iter().map(|d| d.len()).sum::<usize>(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn init_agnostic(common: &Common) -> anyhow::Result<()> {
    let cfg = load(common)?;
    let seed = seed_of(&cfg);
    let scenarios: Vec<ScenarioDataset> = prepare_scenarios(&cfg, seed)?
        .into_iter()
        .collect::<Result<_, _>>()?;
    let (state, report) = init_meta(&cfg, &scenarios, seed)?;
    save_meta(&state, &cfg.out_dir)?;
    write_json(
        &cfg.out_dir.join("init_report.json"),
        &serde_json::to_value(&report)?,
    )?;
    for c in &report.candidates {
        println!("{}: val AUC {:.4}, {} FLOPs", c.name, c.val_auc, c.flops);
    }
    println!(
        "selected {} -> {}",
        report.candidates[report.selected].name,
        cfg.out_dir.display()
    );
    Ok(())
}

fn run(common: &Common) -> anyhow::Result<()> {
    let cfg = load(common)?;
    let report = run_experiment(&cfg).map_err(config_err)?;
    print!("{}", report.render());
    if report.is_partial() {
        return Err(Partial(report.failures.len()).into());
    }
    Ok(())
}

fn search_light(
    common: &Common,
    idx: usize,
    budget: Option<u64>,
    teacher: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = load(common)?;
    if budget.is_some() {
        cfg.nas.flops_budget = budget;
    }
    let seed = seed_of(&cfg);
    let source = DataSource {
        data: None,
        scenario: idx,
    };
    let ds = split_support_query(&scenario(&cfg, &source)?, cfg.support_frac, seed)?;
    let teacher = match teacher {
        Some(p) => load_artifact(p)?,
        None => train_single_heavy(&cfg, &ds, seed)?,
    };
    let model = train_searched_light(&cfg, &ds, &teacher, seed)?;
    let Architecture::Searched(arch) = &model.spec.arch else {
        bail!("search returned a non-searched model");
    };
    let flops = model_flops(&model.spec)?;
    let test = ds.rows(RowSet::Test);
    let a = auc(&predict(&model, &ds, &test, 512)?, &ds.labels_f64(&test))?;
    save_artifact(&model, &cfg.out_dir.join("model"))?;
    let description = arch.genotype.describe(&arch.ops);
    std::fs::write(cfg.out_dir.join("genotype.txt"), &description)?;
    write_json(
        &cfg.out_dir.join("search.json"),
        &json!({
            "scenario": idx,
            "seed": seed,
            "flops_budget": cfg.flops_budget()?,
            "flops": flops.total,
            "test_auc": a,
            "genotype": arch.genotype,
        }),
    )?;
    println!("{description}");
    println!(
        "FLOPs {} (budget {}), test AUC {a:.4}",
        flops.total,
        cfg.flops_budget()?
    );
    Ok(())
}

fn evaluate(common: &Common, source: &DataSource, model: &Path) -> anyhow::Result<()> {
    let cfg = load(common)?;
    let m = load_artifact(model)?;
    let ds = scenario(&cfg, source)?;
    let test = ds.rows(RowSet::Test);
    let a = auc(&predict(&m, &ds, &test, 512)?, &ds.labels_f64(&test))?;
    let flops = model_flops(&m.spec)?.total;
    let v = json!({
        "model": model,
        "scenario": source.scenario,
        "test_rows": test.len(),
        "auc": a,
        "flops": flops,
        "param_count": m.param_count(),
    });
    if let Some(out) = &common.out {
        write_json(&out.join("evaluation.json"), &v)?;
    }
    println!("AUC {a:.4}, {flops} FLOPs, {} parameters", m.param_count());
    Ok(())
}

fn serve(
    common: &Common,
    source: &DataSource,
    model: &Path,
    batch_size: Option<usize>,
    reps: Option<usize>,
) -> anyhow::Result<()> {
    let cfg = load(common)?;
    let m = load_artifact(model)?;
    let ds = scenario(&cfg, source)?;
    let size = batch_size.unwrap_or(cfg.serve.batch_size);
    let reps = reps.unwrap_or(cfg.serve.reps);
    let batch = request_batch(&ds, &ds.rows(RowSet::Test), size)?;
    let (_, lat) = serve_batch(&m, &batch, reps).map_err(config_err)?;
    if let Some(out) = &common.out {
        write_json(
            &out.join("latency.json"),
            &json!({ "model": model, "batch_size": size, "latency": lat }),
        )?;
    }
    println!(
        "batch {size}: mean {:.3} ms, p95 {:.3} ms over {reps} reps",
        lat.mean_ms, lat.p95_ms
    );
    Ok(())
}

fn report(common: &Common) -> anyhow::Result<()> {
    let Some(dir) = &common.out else {
        return Err(ConfigError("report needs --out <run directory>".into()).into());
    };
    let mut r = StrategyReport::read(dir)?;
    if let Some(s) = common.seed {
        let rows = r.rows.into_iter().filter(|x| x.seed == s).collect();
        let failures = r.failures.into_iter().filter(|x| x.seed == s).collect();
        r = StrategyReport::new(rows, failures, r.flops_budget);
    }
    print!("{}", r.render());
    if r.is_partial() {
        return Err(Partial(r.failures.len()).into());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Datagen(c) => datagen(c),
        Cmd::InitAgnostic(c) => init_agnostic(c),
        Cmd::Run(c) => run(c),
        Cmd::SearchLight {
            common,
            scenario,
            flops_budget,
            teacher,
        } => search_light(common, *scenario, *flops_budget, teacher.as_deref()),
        Cmd::Evaluate {
            common,
            source,
            model,
        } => evaluate(common, source, model),
        Cmd::Serve {
            common,
            source,
            model,
            batch_size,
            reps,
        } => serve(common, source, model, *batch_size, *reps),
        Cmd::Report(c) => report(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Partial>() => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e) if e.is::<ConfigError>() => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
