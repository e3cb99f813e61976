mod common;

use common::*;
use longtail::nets::{build_model, predict, Batch, EncoderKind, Provenance};
use longtail::pipeline::{
    averages, load_artifact, parse_config, percentile, run_experiment, save_artifact, serve_batch,
    ExperimentConfig, ReportRow, Strategy, StrategyReport,
};
use longtail::synthgen::RowSet;
use longtail::Error;
use proptest::prelude::*;

fn model() -> longtail::nets::ModelArtifact {
    build_model(
        &tiny_predesigned(EncoderKind::Attention),
        4,
        Provenance::new("test", 1, 4),
    )
    .unwrap()
}

#[test]
fn artifact_round_trip_is_bit_exact_and_idempotent() {
    let m = model();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    save_artifact(&m, &a).unwrap();
    let back = load_artifact(&a).unwrap();
    assert_eq!(back, m);
    save_artifact(&back, &b).unwrap();
    for f in ["manifest.json", "params.bin"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs after re-save"
        );
    }
    let ds = tiny_dataset(1);
    let rows = ds.rows(RowSet::All);
    assert_eq!(
        predict(&m, &ds, &rows, 7).unwrap(),
        predict(&back, &ds, &rows, 7).unwrap()
    );
}

#[test]
fn truncated_blob_fails_checksum() {
    let dir = tempfile::tempdir().unwrap();
    save_artifact(&model(), dir.path()).unwrap();
    let blob = dir.path().join("params.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(
        load_artifact(dir.path()),
        Err(Error::Checksum { .. })
    ));
}

#[test]
fn version_mismatch_is_explicit() {
    let dir = tempfile::tempdir().unwrap();
    save_artifact(&model(), dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(
        &path,
        text.replace("\"format_version\": 1", "\"format_version\": 7"),
    )
    .unwrap();
    match load_artifact(dir.path()) {
        Err(Error::Version {
            expected: 1,
            found: 7,
            ..
        }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn serving_matches_direct_prediction() {
    let m = model();
    let ds = tiny_dataset(2);
    let rows: Vec<usize> = (0..40).collect();
    let batch = Batch::from_rows(&ds, &rows);
    let (preds, lat) = serve_batch(&m, &batch, 3).unwrap();
    assert_eq!(lat.samples_ms.len(), 3);
    assert!(lat.p95_ms >= lat.mean_ms.min(lat.p95_ms));
    assert_eq!(preds, predict(&m, &ds, &rows, 40).unwrap());
    assert!(serve_batch(&m, &batch, 2).is_err());
}

#[test]
fn config_errors_carry_paths() {
    let e = parse_config("[universe]\nvocab_sise = 3\n").unwrap_err();
    assert!(e.to_string().contains("universe"), "{e}");
    let e = parse_config("[heavy_train]\nepochs = \"five\"\n").unwrap_err();
    assert!(e.to_string().contains("heavy_train.epochs"), "{e}");
    let e = parse_config("strategies = []\n").unwrap_err();
    assert!(e.to_string().contains("strategies"), "{e}");
    let e = parse_config("[nas]\nflops_budget = 5\n").unwrap_err();
    assert!(e.to_string().contains("nas.flops_budget"), "{e}");
    assert!(parse_config("").is_ok());
}

#[test]
fn checked_in_configs_parse() {
    for f in ["pattern.toml", "quick.toml", "desk.toml"] {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../configs")
            .join(f);
        longtail::pipeline::load_config(&path).unwrap_or_else(|e| panic!("{f}: {e}"));
    }
}

fn tiny_config(strategies: Vec<Strategy>, out: &std::path::Path) -> ExperimentConfig {
    let text = format!(
        r#"
seeds = [3]
n_initial_scenarios = 1
strategies = [{}]
save_models = true
out_dir = "{}"

[universe]
profile_dim = 3
vocab_size = 5
max_seq_len = 6
min_seq_len = 2
n_scenarios = 2
map_width = 4
size_profile = [60, 50]

[heavy]
encoder_kind = "recurrent"
n_encoder_layers = 2
hidden_dim = 4
intermediate_dim = 4
n_heads = 2
profile_mlp_dims = [4]
head_mlp_dims = [4]
embed_dim = 4

[light]
encoder_kind = "recurrent"
n_encoder_layers = 1
hidden_dim = 4
intermediate_dim = 4
n_heads = 2
profile_mlp_dims = [4]
head_mlp_dims = [4]
embed_dim = 4

[heavy_train]
epochs = 1
batch_size = 16

[light_train]
epochs = 1
batch_size = 16

[init.predesigned.train]
epochs = 1
batch_size = 16

[nas]
n_layers = 1
epochs = 1
batch_size = 16

[serve]
batch_size = 8
reps = 3
"#,
        strategies
            .iter()
            .map(|s| format!("\"{s}\""))
            .collect::<Vec<_>>()
            .join(", "),
        out.display()
    );
    parse_config(&text).unwrap()
}

#[test]
fn single_heavy_only_run_has_no_meta_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(vec![Strategy::SinH], dir.path());
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert!(!r.is_partial());
    assert!(!dir.path().join("meta").exists());
    assert!(dir.path().join("rows.jsonl").exists());
    assert!(dir.path().join("summary.md").exists());
}

#[test]
fn full_run_is_deterministic_and_within_budget() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = run_experiment(&tiny_config(Strategy::ALL.to_vec(), d1.path())).unwrap();
    let b = run_experiment(&tiny_config(Strategy::ALL.to_vec(), d2.path())).unwrap();
    assert_eq!(a.rows.len(), 8, "{:?}", a.failures);
    let aucs = |r: &StrategyReport| {
        r.rows
            .iter()
            .map(|x| (x.strategy, x.scenario_id, x.auc))
            .collect::<Vec<_>>()
    };
    assert_eq!(aucs(&a), aucs(&b));
    let budget = a.flops_budget.unwrap();
    let heavy = a.average(Strategy::MeH).unwrap().flops;
    for r in a.rows.iter().filter(|r| r.strategy == Strategy::Ours) {
        assert!(r.flops <= budget);
        assert!((r.flops as f64) < heavy);
    }
    // saved models reload and the report reloads from disk
    let m = load_artifact(&d1.path().join("models/seed-3/scenario-0/Ours")).unwrap();
    assert!(matches!(
        m.spec.arch,
        longtail::nets::Architecture::Searched(_)
    ));
    let back = StrategyReport::read(d1.path()).unwrap();
    assert_eq!(back.rows, a.rows);
    assert!(d1.path().join("meta/seed-3/meta.json").exists());
}

fn row(strategy: Strategy, auc: f64, flops: u64) -> ReportRow {
    ReportRow {
        seed: 0,
        scenario_id: 0,
        strategy,
        auc,
        flops,
        param_count: 10,
        latency_mean_ms: auc,
        latency_p95_ms: 2.0 * auc,
        genotype: None,
    }
}

proptest! {
    #[test]
    fn averages_are_row_means(xs in prop::collection::vec((0usize..4, 0.0f64..1.0, 0u64..1000), 1..30)) {
        let rows: Vec<ReportRow> = xs.iter().map(|&(s, a, f)| row(Strategy::ALL[s], a, f)).collect();
        for avg in averages(&rows) {
            let sel: Vec<&ReportRow> = rows.iter().filter(|r| r.strategy == avg.strategy).collect();
            let mean = sel.iter().map(|r| r.auc).sum::<f64>() / sel.len() as f64;
            prop_assert!((avg.auc - mean).abs() < 1e-9);
            prop_assert_eq!(avg.rows, sel.len());
        }
    }

    #[test]
    fn p95_is_an_observed_upper_value(v in prop::collection::vec(0.0f64..100.0, 1..50)) {
        let p = percentile(&v, 0.95);
        prop_assert!(v.contains(&p));
        let below = v.iter().filter(|&&x| x <= p).count();
        prop_assert!(below as f64 >= 0.95 * v.len() as f64);
    }
}
