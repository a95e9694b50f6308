//! Run directory: append-only JSONL manifest, content-addressed blobs,
//! ledger and state checkpoints, resume and export.
//!
//! Layout under the run directory:
//!
//! ```text
//! config.toml          resolved configuration
//! manifest.jsonl       one ManifestEntry per accepted record
//! ledger.json          {config_hash, tau_max, records, counts}
//! state.json           run id, counters, per-worker next draw
//! reports/<id>/        findings.txt, impression.txt
//! blobs/ab/cd/<hash>   image payloads
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::curation::CurationVerdict;
use crate::entity::EntityId;
use crate::image::{content_hash, ImageGenParams};
use crate::sampler::FrequencyLedger;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LEDGER_FILE: &str = "ledger.json";
pub const STATE_FILE: &str = "state.json";
pub const CONFIG_FILE: &str = "config.toml";

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("record id `{0}` already in the manifest")]
    DuplicateRecordId(String),
    #[error("storage failure at {path}: {source}")]
    Storage { path: PathBuf, source: io::Error },
    #[error("run was created with a different configuration (stored {stored}, current {current})")]
    ConfigMismatch { stored: String, current: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

fn storage(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Storage {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Attempts {
    pub findings: u32,
    pub impression: u32,
    pub image: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started: String,
    pub finished: String,
}

/// One accepted record. Paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record_id: String,
    pub worker: u32,
    pub draw: u64,
    /// S1 members followed by S2 members.
    pub entity_ids: Vec<EntityId>,
    pub findings_path: String,
    pub impression_path: String,
    pub image_blob: String,
    pub image_params: ImageGenParams,
    pub attempts: Attempts,
    pub verdict: CurationVerdict,
    pub max_bad_similarity: Option<f64>,
    pub timestamps: Timestamps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub accepted: u64,
    pub abandoned_reports: u64,
    pub abandoned_images: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub config_hash: String,
    pub counters: Counters,
    /// Next draw index per worker.
    pub next_draw: Vec<u64>,
    pub effective_tau_max: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerCheckpoint {
    pub config_hash: String,
    pub tau_max: u32,
    pub records: u64,
    pub counts: BTreeMap<EntityId, u32>,
}

impl LedgerCheckpoint {
    pub fn of(ledger: &FrequencyLedger, config_hash: &str) -> Self {
        LedgerCheckpoint {
            config_hash: config_hash.to_string(),
            tau_max: ledger.tau_max(),
            records: ledger.records(),
            counts: ledger.to_sorted(),
        }
    }
}

/// Handle on a run directory. Only one writer may hold it.
pub struct RunStore {
    dir: PathBuf,
    manifest: File,
    ids: HashSet<String>,
}

/// Writes through a temporary file and renames, so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(storage(&tmp))?;
    f.write_all(bytes).map_err(storage(&tmp))?;
    f.sync_all().map_err(storage(&tmp))?;
    fs::rename(&tmp, path).map_err(storage(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(storage(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::CorruptCheckpoint(format!("{}: {e}", path.display())))
}

/// Entries of a manifest file plus the byte length of its intact prefix.
/// A final line without a newline is a torn write and is not returned.
pub fn read_manifest_entries(path: &Path) -> Result<(Vec<ManifestEntry>, u64), StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((vec![], 0)),
        Err(e) => return Err(storage(path)(e)),
    };
    let mut reader = io::BufReader::new(file);
    let mut entries = Vec::new();
    let mut good = 0u64;
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(storage(path))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        if !line.ends_with('\n') {
            break;
        }
        let entry: ManifestEntry = serde_json::from_str(line.trim_end())
            .map_err(|e| StoreError::CorruptCheckpoint(format!("manifest line {lineno}: {e}")))?;
        entries.push(entry);
        good += n as u64;
    }
    Ok((entries, good))
}

impl RunStore {
    /// Opens or creates the run directory. Any torn trailing manifest line is cut off.
    pub fn open(dir: impl Into<PathBuf>) -> Result<(Self, Vec<ManifestEntry>), StoreError> {
        let dir = dir.into();
        for sub in ["reports", "blobs"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(storage(&p))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let (entries, good) = read_manifest_entries(&path)?;
        let manifest = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(storage(&path))?;
        if manifest.metadata().map_err(storage(&path))?.len() != good {
            manifest.set_len(good).map_err(storage(&path))?;
        }
        let mut ids = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !ids.insert(e.record_id.clone()) {
                return Err(StoreError::CorruptCheckpoint(format!(
                    "record id `{}` appears twice",
                    e.record_id
                )));
            }
        }
        Ok((RunStore { dir, manifest, ids }, entries))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, record_id: &str) -> bool {
        self.ids.contains(record_id)
    }

    pub fn blob_path(dir: &Path, hash: &str) -> PathBuf {
        dir.join("blobs").join(&hash[0..2]).join(&hash[2..4]).join(hash)
    }

    /// Stores a payload under its content hash. Safe to call concurrently.
    pub fn put_blob(dir: &Path, bytes: &[u8]) -> Result<String, StoreError> {
        let hash = content_hash(bytes);
        let path = Self::blob_path(dir, &hash);
        if path.exists() {
            return Ok(hash);
        }
        let parent = path.parent().expect("blob path has a parent");
        fs::create_dir_all(parent).map_err(storage(parent))?;
        let unique = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = parent.join(format!("{hash}.{}.{unique}.tmp", std::process::id()));
        {
            let mut f = File::create(&tmp).map_err(storage(&tmp))?;
            f.write_all(bytes).map_err(storage(&tmp))?;
            f.sync_all().map_err(storage(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(storage(&path))?;
        Ok(hash)
    }

    /// Writes both report sections; returns their run-relative paths.
    pub fn write_report(
        dir: &Path,
        record_id: &str,
        findings: &str,
        impression: &str,
    ) -> Result<(String, String), StoreError> {
        let rel = format!("reports/{record_id}");
        let rdir = dir.join(&rel);
        fs::create_dir_all(&rdir).map_err(storage(&rdir))?;
        for (name, text) in [("findings.txt", findings), ("impression.txt", impression)] {
            let p = rdir.join(name);
            fs::write(&p, text).map_err(storage(&p))?;
        }
        Ok((format!("{rel}/findings.txt"), format!("{rel}/impression.txt")))
    }

    /// Appends one entry and syncs it to disk before returning.
    pub fn append_record(&mut self, entry: &ManifestEntry) -> Result<(), StoreError> {
        if self.ids.contains(&entry.record_id) {
            return Err(StoreError::DuplicateRecordId(entry.record_id.clone()));
        }
        let mut line = serde_json::to_string(entry).expect("entry serializes");
        line.push('\n');
        let path = self.dir.join(MANIFEST_FILE);
        self.manifest.write_all(line.as_bytes()).map_err(storage(&path))?;
        self.manifest.sync_data().map_err(storage(&path))?;
        self.ids.insert(entry.record_id.clone());
        Ok(())
    }

    pub fn write_checkpoint(&self, ledger: &LedgerCheckpoint, state: &RunState) -> Result<(), StoreError> {
        write_atomic(
            &self.dir.join(LEDGER_FILE),
            serde_json::to_string_pretty(ledger)
                .expect("ledger serializes")
                .as_bytes(),
        )?;
        write_atomic(
            &self.dir.join(STATE_FILE),
            serde_json::to_string_pretty(state)
                .expect("state serializes")
                .as_bytes(),
        )
    }

    pub fn write_config(&self, toml: &str) -> Result<(), StoreError> {
        write_atomic(&self.dir.join(CONFIG_FILE), toml.as_bytes())
    }
}

/// Checkpoint files of a run directory, if any.
pub fn read_checkpoint(dir: &Path) -> Result<Option<(LedgerCheckpoint, RunState)>, StoreError> {
    let (lp, sp) = (dir.join(LEDGER_FILE), dir.join(STATE_FILE));
    match (lp.exists(), sp.exists()) {
        (false, false) => Ok(None),
        (true, true) => Ok(Some((read_json(&lp)?, read_json(&sp)?))),
        _ => Err(StoreError::CorruptCheckpoint(
            "ledger and state files must both exist".into(),
        )),
    }
}

/// Per-entity occurrence counts over manifest entries.
pub fn recount(entries: &[ManifestEntry]) -> BTreeMap<EntityId, u32> {
    let mut counts = BTreeMap::new();
    for e in entries {
        for id in &e.entity_ids {
            *counts.entry(*id).or_insert(0) += 1;
        }
    }
    counts
}

pub struct Resumed {
    pub ledger: FrequencyLedger,
    pub state: RunState,
    /// Manifest entries found beyond the last checkpoint and folded in.
    pub rolled_forward: usize,
}

/// Restores the ledger and state from a checkpoint and the manifest.
///
/// The checkpoint covers the first `records` entries and must match their
/// recount exactly. Entries appended after the checkpoint are rolled forward.
pub fn resume(
    checkpoint: LedgerCheckpoint,
    mut state: RunState,
    entries: &[ManifestEntry],
    config_hash: &str,
) -> Result<Resumed, StoreError> {
    for stored in [&checkpoint.config_hash, &state.config_hash] {
        if stored != config_hash {
            return Err(StoreError::ConfigMismatch {
                stored: stored.clone(),
                current: config_hash.to_string(),
            });
        }
    }
    let covered = checkpoint.records as usize;
    if covered > entries.len() {
        return Err(StoreError::CorruptCheckpoint(format!(
            "ledger covers {covered} records but the manifest holds {}",
            entries.len()
        )));
    }
    let expected = recount(&entries[..covered]);
    if expected != checkpoint.counts {
        let differing = expected
            .keys()
            .chain(checkpoint.counts.keys())
            .find(|id| expected.get(id) != checkpoint.counts.get(id))
            .copied()
            .expect("maps differ");
        return Err(StoreError::CorruptCheckpoint(format!(
            "ledger count for {differing} is {:?}, manifest recount gives {:?}",
            checkpoint.counts.get(&differing),
            expected.get(&differing)
        )));
    }
    let tau = checkpoint.tau_max.max(state.effective_tau_max);
    let mut ledger = FrequencyLedger::from_counts(tau, checkpoint.records, checkpoint.counts)
        .ok_or_else(|| StoreError::CorruptCheckpoint("ledger count exceeds tau_max".into()))?;
    for entry in &entries[covered..] {
        ledger
            .commit_ids(&entry.entity_ids)
            .map_err(|e| StoreError::CorruptCheckpoint(format!("rolling forward {}: {e}", entry.record_id)))?;
        let w = entry.worker as usize;
        if w >= state.next_draw.len() {
            state.next_draw.resize(w + 1, 0);
        }
        state.next_draw[w] = state.next_draw[w].max(entry.draw + 1);
    }
    state.counters.accepted = entries.len() as u64;
    state.effective_tau_max = tau;
    Ok(Resumed {
        ledger,
        state,
        rolled_forward: entries.len() - covered,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportLine {
    pub id: String,
    pub image_path: String,
    pub report_path: String,
    pub entity_ids: Vec<EntityId>,
    pub image_blob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMetadata {
    pub run_id: Option<String>,
    pub config_hash: Option<String>,
    pub records: u64,
    pub counters: Option<Counters>,
}

fn image_extension(blob: &[u8]) -> &'static str {
    if blob.starts_with(b"\x89PNG\r\n\x1a\n") {
        "png"
    } else if blob.starts_with(&[0xff, 0xd8, 0xff]) {
        "jpg"
    } else {
        "bin"
    }
}

/// Writes `{metadata.json, reports/, images/, manifest.jsonl}` under `dest`,
/// ordered by record id. The exported manifest is directly auditable.
pub fn export(run_dir: &Path, dest: &Path) -> Result<ExportMetadata, StoreError> {
    let (mut entries, _) = read_manifest_entries(&run_dir.join(MANIFEST_FILE))?;
    entries.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    for sub in ["reports", "images"] {
        let p = dest.join(sub);
        fs::create_dir_all(&p).map_err(storage(&p))?;
    }
    let mut manifest = String::new();
    for e in &entries {
        let read = |rel: &str| {
            let p = run_dir.join(rel);
            fs::read_to_string(&p).map_err(storage(&p))
        };
        let report = format!(
            "FINDINGS:\n{}\n\nIMPRESSION:\n{}\n",
            read(&e.findings_path)?,
            read(&e.impression_path)?
        );
        let report_path = format!("reports/{}.txt", e.record_id);
        let p = dest.join(&report_path);
        fs::write(&p, report).map_err(storage(&p))?;

        let src = RunStore::blob_path(run_dir, &e.image_blob);
        let blob = fs::read(&src).map_err(storage(&src))?;
        let image_path = format!("images/{}.{}", e.record_id, image_extension(&blob));
        let p = dest.join(&image_path);
        fs::write(&p, &blob).map_err(storage(&p))?;

        let line = ExportLine {
            id: e.record_id.clone(),
            image_path,
            report_path,
            entity_ids: e.entity_ids.clone(),
            image_blob: e.image_blob.clone(),
        };
        manifest.push_str(&serde_json::to_string(&line).expect("line serializes"));
        manifest.push('\n');
    }
    let p = dest.join(MANIFEST_FILE);
    fs::write(&p, manifest).map_err(storage(&p))?;

    let state = read_checkpoint(run_dir)?.map(|(_, s)| s);
    let meta = ExportMetadata {
        run_id: state.as_ref().map(|s| s.run_id.clone()),
        config_hash: state.as_ref().map(|s| s.config_hash.clone()),
        records: entries.len() as u64,
        counters: state.map(|s| Counters {
            accepted: entries.len() as u64,
            ..s.counters
        }),
    };
    let p = dest.join("metadata.json");
    fs::write(&p, serde_json::to_string_pretty(&meta).expect("metadata serializes")).map_err(storage(&p))?;
    Ok(meta)
}
