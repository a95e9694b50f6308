use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use syncurate::catalog::EntityCatalog;
use syncurate::config::{ClockMode, RunConfig};
use syncurate::fixtures::synthetic_catalog;
use syncurate::image::ImageGenParams;
use syncurate::pipeline::{build_providers, corpus_stats, generate, GenerateOptions, Hooks, PipelineError};
use syncurate::providers::{ImageGenerator, ProviderError};
use syncurate::store::{read_manifest_entries, recount, LedgerCheckpoint, StoreError, LEDGER_FILE, MANIFEST_FILE};

fn setup(dir: &Path, sizes: [usize; 5], n: u64) -> (RunConfig, Arc<EntityCatalog>) {
    let catalog = Arc::new(synthetic_catalog(sizes));
    let path = dir.join("catalog.tsv");
    fs::write(&path, catalog.to_tsv()).unwrap();
    let mut cfg = RunConfig {
        catalog: path,
        n_target: n,
        output_dir: dir.join("run"),
        clock: ClockMode::Logical,
        checkpoint_every: 7,
        ..RunConfig::default()
    };
    cfg.sampler.seed = 7;
    cfg.screen.embedding_dim = 16;
    cfg.providers.mock.embedding_dim = 16;
    (cfg, catalog)
}

fn run(
    cfg: &RunConfig,
    catalog: &Arc<EntityCatalog>,
    opts: &GenerateOptions,
) -> Result<syncurate::pipeline::RunSummary, PipelineError> {
    let providers = build_providers(cfg, catalog.clone()).unwrap();
    generate(cfg, catalog, &providers, opts)
}

fn manifest(cfg: &RunConfig) -> Vec<u8> {
    fs::read(cfg.output_dir.join(MANIFEST_FILE)).unwrap()
}

#[test]
fn mock_run_reaches_target_within_cap() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, catalog) = setup(dir.path(), [40, 30, 20, 20, 30], 60);
    let summary = run(&cfg, &catalog, &GenerateOptions::default()).unwrap();
    assert!(summary.complete);
    assert_eq!(summary.counters.accepted, 60);
    let (entries, _) = read_manifest_entries(&cfg.output_dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(entries.len(), 60);
    for e in &entries {
        assert_eq!(e.entity_ids.len(), 12);
        assert_eq!(e.entity_ids.iter().collect::<HashSet<_>>().len(), 12);
    }
    assert!(recount(&entries).values().all(|&c| c <= 15));
    let stats = corpus_stats(&cfg.output_dir).unwrap();
    assert_eq!(stats.records, 60);
    assert!(stats.max_count <= 15);
    assert_eq!(stats.records_with_duplicates, 0);
}

#[test]
fn identical_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, cat) = setup(a.path(), [30, 30, 30, 30, 30], 40);
    let (cb, _) = setup(b.path(), [30, 30, 30, 30, 30], 40);
    run(&ca, &cat, &GenerateOptions::default()).unwrap();
    run(&cb, &cat, &GenerateOptions::default()).unwrap();
    assert_eq!(manifest(&ca), manifest(&cb));
}

#[test]
fn rerun_of_finished_run_is_a_noop() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, catalog) = setup(dir.path(), [30, 30, 30, 30, 30], 20);
    run(&cfg, &catalog, &GenerateOptions::default()).unwrap();
    let before = manifest(&cfg);
    let again = run(&cfg, &catalog, &GenerateOptions::default()).unwrap();
    assert!(again.complete);
    assert_eq!(manifest(&cfg), before);
}

#[test]
fn kill_and_resume_matches_uninterrupted() {
    let whole = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let (cw, cat) = setup(whole.path(), [30, 30, 30, 30, 30], 50);
    let (cs, _) = setup(split.path(), [30, 30, 30, 30, 30], 50);
    run(&cw, &cat, &GenerateOptions::default()).unwrap();
    let killed = GenerateOptions {
        hooks: Hooks {
            stop_after: Some(25),
            kill: true,
            ..Hooks::default()
        },
        ..GenerateOptions::default()
    };
    let partial = run(&cs, &cat, &killed).unwrap();
    assert!(!partial.complete);
    let resumed = run(&cs, &cat, &GenerateOptions::default()).unwrap();
    assert!(resumed.rolled_forward > 0);
    assert_eq!(manifest(&cw), manifest(&cs));
}

#[test]
fn failed_append_leaves_record_and_ledger_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, catalog) = setup(dir.path(), [30, 30, 30, 30, 30], 20);
    let opts = GenerateOptions {
        hooks: Hooks {
            fail_append_at: Some(6),
            ..Hooks::default()
        },
        ..GenerateOptions::default()
    };
    let err = run(&cfg, &catalog, &opts).unwrap_err();
    assert_eq!(err.exit_code(), 6);
    let (entries, _) = read_manifest_entries(&cfg.output_dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(entries.len(), 5);
    let ledger: LedgerCheckpoint =
        serde_json::from_str(&fs::read_to_string(cfg.output_dir.join(LEDGER_FILE)).unwrap()).unwrap();
    assert_eq!(ledger.records, 5);
    assert_eq!(ledger.counts, recount(&entries));
    // The run continues cleanly afterwards.
    assert!(run(&cfg, &catalog, &GenerateOptions::default()).unwrap().complete);
}

#[test]
fn tampered_ledger_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, catalog) = setup(dir.path(), [30, 30, 30, 30, 30], 10);
    run(&cfg, &catalog, &GenerateOptions::default()).unwrap();
    let path = cfg.output_dir.join(LEDGER_FILE);
    let mut ledger: LedgerCheckpoint = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let first = *ledger.counts.keys().next().unwrap();
    *ledger.counts.get_mut(&first).unwrap() -= 1;
    fs::write(&path, serde_json::to_string(&ledger).unwrap()).unwrap();
    let mut more = cfg.clone();
    more.n_target = 20;
    let err = run(&more, &catalog, &GenerateOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::Store(StoreError::CorruptCheckpoint(_))));
    assert_eq!(err.exit_code(), 6);
}

#[test]
fn changed_k_is_a_config_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, catalog) = setup(dir.path(), [30, 30, 30, 30, 30], 10);
    run(&cfg, &catalog, &GenerateOptions::default()).unwrap();
    let mut changed = cfg.clone();
    changed.sampler.k = 8;
    let err = run(&changed, &catalog, &GenerateOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::Store(StoreError::ConfigMismatch { .. })));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn resume_after_clean_stop_extends_without_cap_violations() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, catalog) = setup(dir.path(), [15, 15, 15, 15, 15], 30);
    run(&cfg, &catalog, &GenerateOptions::default()).unwrap();
    cfg.n_target = 50;
    assert!(run(&cfg, &catalog, &GenerateOptions::default()).unwrap().complete);
    let (entries, _) = read_manifest_entries(&cfg.output_dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(entries.len(), 50);
    assert!(recount(&entries).values().all(|&c| c <= 15));
}

#[test]
fn infeasible_target_halts_before_any_provider_call() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, catalog) = setup(dir.path(), [30, 30, 30, 30, 10], 51);
    let err = run(&cfg, &catalog, &GenerateOptions::default()).unwrap_err();
    match &err {
        PipelineError::Capacity { report } => {
            let anatomy = report.pool(syncurate::sampler::Pool::Anatomy);
            assert_eq!((anatomy.demand, anatomy.capacity), (153, 150));
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(err.exit_code(), 3);
    assert!(!cfg.output_dir.join(MANIFEST_FILE).exists() || manifest(&cfg).is_empty());
}

#[test]
fn relax_cap_raises_tau_to_finish() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, catalog) = setup(dir.path(), [30, 30, 30, 30, 10], 51);
    let opts = GenerateOptions {
        relax_cap: true,
        ..GenerateOptions::default()
    };
    let summary = run(&cfg, &catalog, &opts).unwrap();
    assert!(summary.complete);
    assert!(summary.effective_tau_max > 15);
}

#[test]
fn concurrent_workers_respect_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, catalog) = setup(dir.path(), [20, 20, 20, 20, 24], 60);
    cfg.workers = 4;
    cfg.sampler.tau_max = 10;
    let summary = run(&cfg, &catalog, &GenerateOptions::default()).unwrap();
    assert!(summary.complete);
    let (entries, _) = read_manifest_entries(&cfg.output_dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(entries.len(), 60);
    let counts = recount(&entries);
    assert!(counts.values().all(|&c| c <= 10), "max {:?}", counts.values().max());
}

#[test]
fn provider_failure_exits_with_provider_class() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, catalog) = setup(dir.path(), [30, 30, 30, 30, 30], 10);
    cfg.providers.mock.failure_prob.image_gen = 1.0;
    let err = run(&cfg, &catalog, &GenerateOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn unrecoverable_drift_exhausts_retries() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, catalog) = setup(dir.path(), [30, 30, 30, 30, 30], 10);
    cfg.providers.mock.extra_entity_prob = 1.0;
    cfg.max_consecutive_failures = 5;
    cfg.report.findings_max_retries = 2;
    let err = run(&cfg, &catalog, &GenerateOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::RetriesExhausted(5)));
    assert_eq!(err.exit_code(), 5);
}

struct Rejecting;

impl ImageGenerator for Rejecting {
    fn generate(&self, _: &str, _: &ImageGenParams) -> Result<Vec<u8>, ProviderError> {
        Err(ProviderError::RejectedPrompt("policy".into()))
    }
}

#[test]
fn rejected_prompts_abandon_draws_instead_of_halting() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, catalog) = setup(dir.path(), [30, 30, 30, 30, 30], 10);
    cfg.max_consecutive_failures = 3;
    let mut providers = build_providers(&cfg, catalog.clone()).unwrap();
    providers.image = Arc::new(Rejecting);
    let err = generate(&cfg, &catalog, &providers, &GenerateOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::RetriesExhausted(3)), "{err}");
    assert_eq!(err.exit_code(), 5);
}
