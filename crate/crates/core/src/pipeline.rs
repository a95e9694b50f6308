//! Generation orchestrator: sample, synthesize and verify the report,
//! generate and curate the image, then commit the record and the ledger
//! together through a single writer.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::catalog::{load_catalog, EntityCatalog};
use crate::config::{ClockMode, ConfigError, RunConfig};
use crate::curation::JudgeError;
use crate::distribution::{distribution_report, DistributionReport};
use crate::entity::EntityId;
use crate::image::{generate_curated_image, ImageCuration, ImageError};
use crate::providers::{ProviderError, Providers};
use crate::report::{synthesize_report, SynthError, SyntheticReport};
use crate::rng::{derive_seed, stream, tag, StreamRng};
use crate::sampler::{BalancedSampler, CapacityReport, EntitySet, FrequencyLedger, SampleError};
use crate::similarity::{EmbeddingBank, SimilarityError};
use crate::store::{
    read_checkpoint, read_manifest_entries, recount, resume, Attempts, Counters, LedgerCheckpoint, ManifestEntry,
    RunState, RunStore, StoreError, Timestamps, CONFIG_FILE, MANIFEST_FILE,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("capacity exhausted:\n{report}")]
    Capacity { report: CapacityReport },
    #[error("provider failure: {0}")]
    Provider(String),
    #[error("{0} consecutive draws abandoned after exhausting their retries")]
    RetriesExhausted(u32),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl PipelineError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Store(StoreError::ConfigMismatch { .. }) => 2,
            PipelineError::Capacity { .. } => 3,
            PipelineError::Provider(_) => 4,
            PipelineError::RetriesExhausted(_) => 5,
            PipelineError::Store(_) => 6,
        }
    }
}

impl From<ProviderError> for PipelineError {
    fn from(e: ProviderError) -> Self {
        PipelineError::Provider(e.to_string())
    }
}

/// Fault-injection and early-stop points, used by tests and operators.
#[derive(Debug, Clone, Default)]
pub struct Hooks {
    /// Stop once this many records are accepted in total.
    pub stop_after: Option<u64>,
    /// Skip the final checkpoint, as if the process were killed.
    pub kill: bool,
    /// Fail the append of the n-th accepted record (1-based, across the run's
    /// lifetime) after verification, before anything is written.
    pub fail_append_at: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    /// Raise the cap by one whenever a pool is exhausted, instead of halting.
    pub relax_cap: bool,
    pub hooks: Hooks,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_hash: String,
    pub n_target: u64,
    pub counters: Counters,
    pub effective_tau_max: u32,
    pub rolled_forward: usize,
    pub complete: bool,
}

const LOGICAL_EPOCH: &str = "2025-01-01T00:00:00Z";

fn timestamp(mode: ClockMode, worker: u32, draw: u64, workers: usize, offset: i64) -> String {
    match mode {
        ClockMode::System => Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        ClockMode::Logical => {
            let epoch: DateTime<Utc> = LOGICAL_EPOCH.parse().expect("valid epoch");
            let tick = draw as i64 * workers as i64 + worker as i64;
            (epoch + Duration::seconds(2 * tick + offset)).to_rfc3339_opts(SecondsFormat::Secs, true)
        }
    }
}

pub fn record_id(worker: u32, draw: u64) -> String {
    format!("syn-{worker:02}-{draw:09}")
}

struct Shared {
    ledger: FrequencyLedger,
    store: RunStore,
    state: RunState,
    config_hash: String,
    since_checkpoint: u64,
    in_flight: u64,
    consecutive_failures: u32,
    stop: bool,
    halt: Option<PipelineError>,
}

impl Shared {
    fn checkpoint(&mut self) -> Result<(), StoreError> {
        self.state.counters.accepted = self.store.len() as u64;
        self.state.effective_tau_max = self.ledger.tau_max();
        self.store
            .write_checkpoint(&LedgerCheckpoint::of(&self.ledger, &self.config_hash), &self.state)?;
        self.since_checkpoint = 0;
        Ok(())
    }

    fn halt(&mut self, e: PipelineError) {
        self.stop = true;
        if self.halt.is_none() {
            self.halt = Some(e);
        }
    }
}

struct Context<'a> {
    cfg: &'a RunConfig,
    opts: &'a GenerateOptions,
    sampler: BalancedSampler,
    providers: &'a Providers,
    bank: EmbeddingBank,
    dir: PathBuf,
    shared: Mutex<Shared>,
}

enum Outcome {
    Accepted,
    AbandonedReport,
    AbandonedImage,
    Halted,
}

fn synth_error(e: SynthError) -> Result<(), PipelineError> {
    match e {
        SynthError::RetriesExhausted { .. } | SynthError::Provider(ProviderError::RejectedPrompt(_)) => Ok(()),
        SynthError::Provider(p) => Err(p.into()),
        other => Err(PipelineError::Provider(other.to_string())),
    }
}

fn image_error(e: ImageError) -> Result<(), PipelineError> {
    match e {
        ImageError::RetriesExhausted { .. } | ImageError::Provider(ProviderError::RejectedPrompt(_)) => Ok(()),
        ImageError::Provider(p) | ImageError::Judge(JudgeError::Provider(p)) => Err(p.into()),
        ImageError::Similarity(SimilarityError::DimensionMismatch { expected, got }) => {
            Err(ProviderError::DimensionMismatch { expected, got }.into())
        }
        other => Err(PipelineError::Provider(other.to_string())),
    }
}

/// Samples under the lock, relaxing the cap if allowed.
fn sample_locked(
    ctx: &Context,
    shared: &mut Shared,
    rng: &mut StreamRng,
    previous: Option<(&EntitySet, &[EntityId])>,
) -> Result<EntitySet, PipelineError> {
    loop {
        let drawn = match previous {
            Some((set, offending)) => ctx.sampler.resample_members(set, offending, &shared.ledger, rng),
            None => ctx.sampler.sample(&shared.ledger, rng),
        };
        match drawn {
            Ok(set) => return Ok(set),
            Err(SampleError::CapacityExhausted(_)) if ctx.opts.relax_cap => {
                let raised = shared.ledger.tau_max() + 1;
                shared.ledger.relax_cap(raised);
                shared.state.effective_tau_max = raised;
            }
            Err(SampleError::CapacityExhausted(_)) => {
                return Err(PipelineError::Capacity {
                    report: ctx.sampler.capacity_report(&shared.ledger, ctx.cfg.n_target),
                })
            }
        }
    }
}

fn process_draw(ctx: &Context, worker: u32, draw: u64, mut set: EntitySet, rng: &mut StreamRng) -> Outcome {
    let record_seed = derive_seed(ctx.cfg.sampler.seed, &[tag::DRAW, worker as u64, draw]);
    let id = record_id(worker, draw);
    let started = timestamp(ctx.cfg.clock, worker, draw, ctx.cfg.workers, 0);
    let gate = ctx.cfg.image_gate().expect("validated");
    let p = ctx.providers;
    loop {
        let report: SyntheticReport = match synthesize_report(
            &set,
            p.text.as_ref(),
            p.extractor.as_ref(),
            &ctx.cfg.report,
            record_seed,
        ) {
            Ok(r) => r,
            Err(e) => {
                return match synth_error(e) {
                    Ok(()) => Outcome::AbandonedReport,
                    Err(e) => {
                        ctx.shared.lock().unwrap().halt(e);
                        Outcome::Halted
                    }
                }
            }
        };
        let curation = ImageCuration {
            generator: p.image.as_ref(),
            judge: p.judge.as_ref(),
            embedder: p.embedder.as_ref(),
            bank: &ctx.bank,
            delta: ctx.cfg.screen.delta,
            policy: gate.as_ref(),
            max_retries: ctx.cfg.image_max_retries,
        };
        let (image, blob) = match generate_curated_image(&report.impression, &curation, &ctx.cfg.image, record_seed) {
            Ok(r) => r,
            Err(e) => {
                return match image_error(e) {
                    Ok(()) => Outcome::AbandonedImage,
                    Err(e) => {
                        ctx.shared.lock().unwrap().halt(e);
                        Outcome::Halted
                    }
                }
            }
        };
        let written = RunStore::put_blob(&ctx.dir, &blob)
            .and_then(|_| RunStore::write_report(&ctx.dir, &id, &report.findings, &report.impression));
        let (findings_path, impression_path) = match written {
            Ok(paths) => paths,
            Err(e) => {
                ctx.shared.lock().unwrap().halt(e.into());
                return Outcome::Halted;
            }
        };

        let mut shared = ctx.shared.lock().unwrap();
        let ids: Vec<EntityId> = set.ids().collect();
        let capped = shared.ledger.capped_members(&ids);
        if !capped.is_empty() {
            // Another worker committed first; redraw only the offending members.
            match sample_locked(ctx, &mut shared, rng, Some((&set, &capped))) {
                Ok(fresh) => {
                    set = fresh;
                    continue;
                }
                Err(e) => {
                    shared.halt(e);
                    return Outcome::Halted;
                }
            }
        }
        let entry = ManifestEntry {
            record_id: id.clone(),
            worker,
            draw,
            entity_ids: ids,
            findings_path,
            impression_path,
            image_blob: image.blob_ref,
            image_params: image.params,
            attempts: Attempts {
                findings: report.findings_attempts,
                impression: report.impression_attempts,
                image: image.attempts,
            },
            verdict: image.verdict,
            max_bad_similarity: image.max_bad_similarity,
            timestamps: Timestamps {
                started,
                finished: timestamp(ctx.cfg.clock, worker, draw, ctx.cfg.workers, 1),
            },
        };
        let ordinal = shared.store.len() as u64 + 1;
        let appended = if ctx.opts.hooks.fail_append_at == Some(ordinal) {
            Err(StoreError::Storage {
                path: ctx.dir.join(MANIFEST_FILE),
                source: std::io::Error::other("injected failure before append"),
            })
        } else {
            shared.store.append_record(&entry)
        };
        if let Err(e) = appended {
            shared.halt(e.into());
            return Outcome::Halted;
        }
        shared
            .ledger
            .commit_ids(&entry.entity_ids)
            .expect("cap checked under the same lock");
        shared.since_checkpoint += 1;
        if shared.since_checkpoint >= ctx.cfg.checkpoint_every {
            if let Err(e) = shared.checkpoint() {
                shared.halt(e.into());
                return Outcome::Halted;
            }
        }
        if ctx
            .opts
            .hooks
            .stop_after
            .is_some_and(|n| shared.store.len() as u64 >= n)
        {
            shared.stop = true;
        }
        return Outcome::Accepted;
    }
}

fn worker_loop(ctx: &Context, worker: u32) {
    loop {
        let (draw, set, mut rng) = {
            let mut shared = ctx.shared.lock().unwrap();
            let accepted = shared.store.len() as u64;
            if shared.stop || accepted + shared.in_flight >= ctx.cfg.n_target {
                return;
            }
            let draw = shared.state.next_draw[worker as usize];
            shared.state.next_draw[worker as usize] += 1;
            let mut rng = stream(ctx.cfg.sampler.seed, &[tag::DRAW, worker as u64, draw]);
            match sample_locked(ctx, &mut shared, &mut rng, None) {
                Ok(set) => {
                    shared.in_flight += 1;
                    (draw, set, rng)
                }
                Err(e) => {
                    shared.halt(e);
                    return;
                }
            }
        };
        let outcome = process_draw(ctx, worker, draw, set, &mut rng);
        let mut shared = ctx.shared.lock().unwrap();
        shared.in_flight -= 1;
        match outcome {
            Outcome::Accepted => shared.consecutive_failures = 0,
            Outcome::AbandonedReport | Outcome::AbandonedImage => {
                if matches!(outcome, Outcome::AbandonedReport) {
                    shared.state.counters.abandoned_reports += 1;
                } else {
                    shared.state.counters.abandoned_images += 1;
                }
                shared.consecutive_failures += 1;
                if shared.consecutive_failures >= ctx.cfg.max_consecutive_failures {
                    let n = shared.consecutive_failures;
                    shared.halt(PipelineError::RetriesExhausted(n));
                }
            }
            Outcome::Halted => return,
        }
    }
}

/// Loads the bad-sample bank named by the config, checking its dimension.
pub fn load_bank(cfg: &RunConfig) -> Result<EmbeddingBank, PipelineError> {
    let bank = match &cfg.screen.bad_bank {
        None => EmbeddingBank::empty(cfg.screen.embedding_dim),
        Some(path) => {
            EmbeddingBank::load(path).map_err(|e| ConfigError::Invalid(format!("bad bank {}: {e}", path.display())))?
        }
    };
    if bank.dim() != cfg.screen.embedding_dim {
        return Err(ConfigError::Invalid(format!(
            "bad bank dimension {} differs from screen.embedding_dim {}",
            bank.dim(),
            cfg.screen.embedding_dim
        ))
        .into());
    }
    Ok(bank)
}

/// Runs (or resumes) generation in `cfg.output_dir` until `cfg.n_target`
/// records are accepted. Re-running a finished run is a no-op.
pub fn generate(
    cfg: &RunConfig,
    catalog: &EntityCatalog,
    providers: &Providers,
    opts: &GenerateOptions,
) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let sampler =
        BalancedSampler::new(catalog, cfg.sampler.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let bank = load_bank(cfg)?;
    let config_hash = cfg.config_hash(catalog);
    let dir = cfg.output_dir.clone();

    let (store, entries) = RunStore::open(&dir)?;
    let (ledger, state, rolled_forward) = match read_checkpoint(&dir)? {
        Some((checkpoint, state)) => {
            let r = resume(checkpoint, state, &entries, &config_hash)?;
            (r.ledger, r.state, r.rolled_forward)
        }
        None if !entries.is_empty() => {
            return Err(StoreError::CorruptCheckpoint("manifest present without a checkpoint".into()).into())
        }
        None => {
            let state = RunState {
                run_id: format!("run-{}", &config_hash[..12]),
                config_hash: config_hash.clone(),
                counters: Counters::default(),
                next_draw: vec![0; cfg.workers],
                effective_tau_max: cfg.sampler.tau_max,
            };
            (FrequencyLedger::new(cfg.sampler.tau_max), state, 0)
        }
    };
    let mut state = state;
    state.next_draw.resize(cfg.workers, 0);

    let capacity = sampler.capacity_report(&ledger, cfg.n_target);
    if !capacity.feasible && !opts.relax_cap {
        return Err(PipelineError::Capacity { report: capacity });
    }

    let mut stored = cfg.clone();
    stored.catalog = fs::canonicalize(&cfg.catalog).unwrap_or_else(|_| cfg.catalog.clone());
    if let Some(bank) = &cfg.screen.bad_bank {
        stored.screen.bad_bank = Some(fs::canonicalize(bank).unwrap_or_else(|_| bank.clone()));
    }
    store.write_config(&stored.to_toml())?;

    let shared = Shared {
        ledger,
        store,
        state,
        config_hash: config_hash.clone(),
        since_checkpoint: 0,
        in_flight: 0,
        consecutive_failures: 0,
        stop: false,
        halt: None,
    };
    let ctx = Context {
        cfg,
        opts,
        sampler,
        providers,
        bank,
        dir,
        shared: Mutex::new(shared),
    };
    {
        let mut shared = ctx.shared.lock().unwrap();
        if opts.hooks.stop_after.is_some_and(|n| shared.store.len() as u64 >= n) {
            shared.stop = true;
        }
        shared.checkpoint()?;
    }

    thread::scope(|scope| {
        for w in 0..cfg.workers {
            let ctx = &ctx;
            scope.spawn(move || worker_loop(ctx, w as u32));
        }
    });

    let mut shared = ctx.shared.into_inner().unwrap();
    if !opts.hooks.kill {
        if let Err(e) = shared.checkpoint() {
            shared.halt(e.into());
        }
    }
    if let Some(e) = shared.halt {
        return Err(e);
    }
    let accepted = shared.store.len() as u64;
    Ok(RunSummary {
        run_id: shared.state.run_id.clone(),
        config_hash,
        n_target: cfg.n_target,
        counters: Counters {
            accepted,
            ..shared.state.counters
        },
        effective_tau_max: shared.ledger.tau_max(),
        rolled_forward,
        complete: accepted >= cfg.n_target,
    })
}

/// Builds the providers named by the config through the default registry.
pub fn build_providers(cfg: &RunConfig, catalog: Arc<EntityCatalog>) -> Result<Providers, PipelineError> {
    crate::providers::ProviderRegistry::default()
        .build(&cfg.providers, catalog)
        .map_err(|e| PipelineError::Provider(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: u64,
    pub tau_max: u32,
    pub max_count: u32,
    /// Records listing the same entity twice.
    pub records_with_duplicates: u64,
    /// Over every entity eligible under the run's sampler config, zeros
    /// included. `None` while the manifest is empty.
    pub distribution: Option<DistributionReport>,
    pub capacity: CapacityReport,
}

/// Entity statistics of a run directory, from its stored config and manifest.
pub fn corpus_stats(run_dir: &Path) -> Result<CorpusStats, PipelineError> {
    let cfg = RunConfig::load(run_dir.join(CONFIG_FILE))?;
    let catalog = load_catalog(&cfg.catalog)
        .map_err(|e| ConfigError::Invalid(format!("catalog {}: {e}", cfg.catalog.display())))?
        .catalog;
    let (entries, _) = read_manifest_entries(&run_dir.join(MANIFEST_FILE))?;
    let counts = recount(&entries);
    let tau_max = read_checkpoint(run_dir)?
        .map(|(_, s)| s.effective_tau_max)
        .unwrap_or(cfg.sampler.tau_max);
    let sampler =
        BalancedSampler::new(&catalog, cfg.sampler.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let max_count = counts.values().copied().max().unwrap_or(0);
    let ledger = FrequencyLedger::from_counts(tau_max.max(max_count), entries.len() as u64, counts.clone())
        .expect("cap covers every count");
    let records_with_duplicates = entries
        .iter()
        .filter(|e| e.entity_ids.iter().collect::<HashSet<_>>().len() != e.entity_ids.len())
        .count() as u64;
    let eligible = sampler
        .pool(crate::sampler::Pool::NonAnatomy)
        .iter()
        .chain(sampler.pool(crate::sampler::Pool::Anatomy));
    let distribution = distribution_report(eligible.map(|e| (e, *counts.get(&e.id).unwrap_or(&0) as u64))).ok();
    Ok(CorpusStats {
        records: entries.len() as u64,
        tau_max,
        max_count,
        records_with_duplicates,
        distribution,
        capacity: sampler.capacity_report(&ledger, cfg.n_target),
    })
}
