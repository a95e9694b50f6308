use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use syncurate::audit::{audit_corpus, entity_distribution, read_manifest, AuditError, RemovalStage};
use syncurate::catalog::{load_catalog, EntityCatalog};
use syncurate::config::{ClockMode, ConfigError, RunConfig};
use syncurate::pipeline::{build_providers, corpus_stats, generate, GenerateOptions, Hooks, PipelineError};
use syncurate::sampler::{BalancedSampler, FrequencyLedger};
use syncurate::store::{export, read_checkpoint, StoreError, MANIFEST_FILE};

#[derive(Parser)]
#[command(
    name = "syncurate",
    version,
    about = "Balanced synthetic image-text corpus generation and curation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Judge, screen and profile an existing image-text corpus.
    Audit {
        /// JSONL manifest of `{id, image_path, report_path}` lines.
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate (or resume) a synthetic corpus.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        /// Raise the frequency cap instead of halting when a pool runs dry.
        #[arg(long)]
        relax_cap: bool,
        /// Stop after this many accepted records; resume later with the same config.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Entity frequency distribution and capacity of a run.
    Stats {
        /// Run directory, or its manifest.
        run: PathBuf,
    },
    /// Copy a run into a flat `{images, reports, manifest.jsonl}` layout.
    Export { run: PathBuf, dest: PathBuf },
    /// Capacity pre-flight for a target size, without calling any provider.
    Capacity {
        #[command(flatten)]
        run: RunArgs,
    },
}

/// Config file plus per-field overrides. Flags win over the file.
#[derive(Args, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the deterministic mock for every provider and a logical clock.
    #[arg(long)]
    mock: bool,
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Target record count.
    #[arg(long = "n")]
    n_target: Option<u64>,
    /// Seeds the sampler and the mock providers.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    tau_max: Option<u32>,
    #[arg(long)]
    entity_ratio: Option<f64>,
    /// Removal policy for `audit`.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if self.mock {
            cfg.providers.all_mock();
            cfg.clock = ClockMode::Logical;
        }
        if let Some(v) = &self.catalog {
            cfg.catalog = v.clone();
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.n_target {
            cfg.n_target = v;
        }
        if let Some(v) = self.seed {
            cfg.sampler.seed = v;
            cfg.providers.mock.seed = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = self.k {
            cfg.sampler.k = v;
        }
        if let Some(v) = self.m {
            cfg.sampler.m = v;
        }
        if let Some(v) = self.tau_max {
            cfg.sampler.tau_max = v;
        }
        if let Some(v) = self.entity_ratio {
            cfg.sampler.entity_ratio = v;
        }
        if let Some(v) = &self.policy {
            cfg.policy = v.clone();
        }
        if let Some(v) = self.delta {
            cfg.screen.delta = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// An error with the exit code of its class.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            error: e.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<AuditError> for Failure {
    fn from(e: AuditError) -> Self {
        let code = match e {
            AuditError::Provider(_) => 4,
            AuditError::Io(_) => 6,
            _ => 2,
        };
        Failure { code, error: e.into() }
    }
}

fn storage(error: anyhow::Error) -> Failure {
    Failure { code: 6, error }
}

fn config(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn load(cfg: &RunConfig) -> Result<Arc<EntityCatalog>, Failure> {
    let loaded = load_catalog(&cfg.catalog)
        .with_context(|| format!("loading catalog {}", cfg.catalog.display()))
        .map_err(config)?;
    if loaded.duplicates > 0 {
        eprintln!("warning: {} duplicate catalog rows ignored", loaded.duplicates);
    }
    Ok(Arc::new(loaded.catalog))
}

fn print_json(value: serde_json::Value) {
    println!("{value:#}");
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(storage)
}

fn cmd_generate(run: &RunArgs, relax_cap: bool, stop_after: Option<u64>) -> Result<(), Failure> {
    let cfg = run.resolve()?;
    let catalog = load(&cfg)?;
    let providers = build_providers(&cfg, catalog.clone())?;
    let opts = GenerateOptions {
        relax_cap,
        hooks: Hooks {
            stop_after,
            ..Hooks::default()
        },
    };
    let summary = generate(&cfg, &catalog, &providers, &opts)?;
    print_json(serde_json::to_value(&summary).expect("serializes"));
    Ok(())
}

fn cmd_capacity(run: &RunArgs) -> Result<(), Failure> {
    let cfg = run.resolve()?;
    let catalog = load(&cfg)?;
    let sampler = BalancedSampler::new(&catalog, cfg.sampler.clone()).map_err(|e| config(e.into()))?;
    let ledger = match read_checkpoint(&cfg.output_dir)? {
        Some((cp, _)) => FrequencyLedger::from_counts(cp.tau_max, cp.records, cp.counts)
            .ok_or_else(|| Failure::from(StoreError::CorruptCheckpoint("ledger exceeds its cap".into())))?,
        None => FrequencyLedger::new(cfg.sampler.tau_max),
    };
    let report = sampler.capacity_report(&ledger, cfg.n_target);
    eprint!("{report}");
    print_json(serde_json::to_value(&report).expect("serializes"));
    if report.feasible {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            error: anyhow!("capacity exhausted for {} records", cfg.n_target),
        })
    }
}

fn cmd_stats(run: &Path) -> Result<(), Failure> {
    let dir = if run.is_file() {
        run.parent().unwrap_or(Path::new("."))
    } else {
        run
    };
    let stats = corpus_stats(dir)?;
    print_json(serde_json::to_value(&stats).expect("serializes"));
    Ok(())
}

fn cmd_export(run: &Path, dest: &Path) -> Result<(), Failure> {
    if !run.join(MANIFEST_FILE).is_file() {
        return Err(config(anyhow!("{} has no {MANIFEST_FILE}", run.display())));
    }
    let meta = export(run, dest)?;
    print_json(serde_json::to_value(&meta).expect("serializes"));
    Ok(())
}

fn cmd_audit(manifest: &Path, run: &RunArgs) -> Result<(), Failure> {
    let cfg = run.resolve()?;
    let catalog = load(&cfg)?;
    let providers = build_providers(&cfg, catalog)?;
    let items = read_manifest(manifest)?;
    let policy = cfg.removal_policy()?;
    let outcome = audit_corpus(
        &items,
        providers.judge.as_ref(),
        providers.embedder.as_ref(),
        policy.as_ref(),
        cfg.screen.delta,
        cfg.screen.embedding_dim,
    )?;
    let report = &outcome.report;
    debug_assert!(report.identity_holds());

    // The entity distribution describes what survives curation.
    let dropped: std::collections::HashSet<&str> = report
        .removed_ids
        .iter()
        .map(|r| r.id.as_str())
        .chain(report.errors.iter().map(|e| e.id.as_str()))
        .collect();
    let mut texts = Vec::new();
    for item in items.iter().filter(|i| !dropped.contains(i.id.as_str())) {
        if let Some(path) = &item.report {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading report {}", path.display()))
                .map_err(storage)?;
            texts.push(text);
        }
    }

    let out = &cfg.output_dir;
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(storage)?;
    write(&out.join("audit_report.json"), report.to_json())?;
    write(&out.join("removed_ids.txt"), report.removed_id_list())?;
    outcome
        .bad_bank
        .save(out.join("bad_bank.bin"))
        .map_err(AuditError::from)?;
    write(
        &out.join("verdicts.json"),
        serde_json::to_string_pretty(&outcome.verdicts).expect("verdicts serialize"),
    )?;
    if !texts.is_empty() {
        let distribution = entity_distribution(&texts, providers.extractor.as_ref())?;
        write(&out.join("entity_distribution.json"), distribution.to_json())?;
    }

    let by_stage = |stage| report.removed_ids.iter().filter(|r| r.stage == stage).count();
    eprintln!(
        "audit: {} in, {} removed by judge, {} by similarity, {} skipped, {} remaining",
        report.total_in,
        by_stage(RemovalStage::Judge),
        by_stage(RemovalStage::Similarity),
        report.skipped,
        report.remaining
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Audit { manifest, run } => cmd_audit(manifest, run),
        Command::Generate {
            run,
            relax_cap,
            stop_after,
        } => cmd_generate(run, *relax_cap, *stop_after),
        Command::Stats { run } => cmd_stats(run),
        Command::Export { run, dest } => cmd_export(run, dest),
        Command::Capacity { run } => cmd_capacity(run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
