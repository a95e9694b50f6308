//! Corpus audit: judge-based removal, similarity propagation from the
//! judge-removed samples, and entity-level distribution analysis.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::{judge_image, CurationVerdict, RemovalPolicy};
use crate::distribution::{distribution_report, DistributionError, DistributionReport};
use crate::entity::{Entity, EntityId};
use crate::providers::{EntityExtractor, ImageEmbedder, ProviderError, QualityJudge};
use crate::similarity::{check_unit, propagate_bad, EmbeddingBank, SimilarityError};

/// One line of the input manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub id: String,
    pub image_path: PathBuf,
    pub report_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    File(PathBuf),
    Inline(Vec<u8>),
}

impl ImageSource {
    fn load(&self) -> io::Result<Vec<u8>> {
        match self {
            ImageSource::File(p) => fs::read(p),
            ImageSource::Inline(b) => Ok(b.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditItem {
    pub id: String,
    pub image: ImageSource,
    pub report: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
    #[error("duplicate id `{0}` in manifest")]
    DuplicateId(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

/// Reads a JSONL manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<AuditItem>, AuditError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let file = io::BufReader::new(fs::File::open(path)?);
    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| AuditError::BadManifest {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if !seen.insert(parsed.id.clone()) {
            return Err(AuditError::DuplicateId(parsed.id));
        }
        items.push(AuditItem {
            id: parsed.id,
            image: ImageSource::File(base.join(parsed.image_path)),
            report: Some(base.join(parsed.report_path)),
        });
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemovalStage {
    Judge,
    Similarity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovedItem {
    pub id: String,
    pub stage: RemovalStage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemError {
    pub id: String,
    pub error: String,
}

/// Bookkeeping for one audit. `remaining = total_in − removed_by_judge −
/// removed_by_similarity − skipped`; skipped items are those a provider
/// could not process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub total_in: u64,
    pub removed_by_judge: u64,
    pub removed_by_similarity: u64,
    pub skipped: u64,
    pub remaining: u64,
    pub policy: String,
    pub delta: f64,
    /// Judge removals first, then similarity removals; each sorted by id.
    pub removed_ids: Vec<RemovedItem>,
    pub errors: Vec<ItemError>,
}

impl AuditReport {
    pub fn identity_holds(&self) -> bool {
        self.total_in == self.removed_by_judge + self.removed_by_similarity + self.skipped + self.remaining
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Newline-delimited removed ids.
    pub fn removed_id_list(&self) -> String {
        let mut out = String::new();
        for r in &self.removed_ids {
            out.push_str(&r.id);
            out.push('\n');
        }
        out
    }
}

pub struct AuditOutcome {
    pub report: AuditReport,
    /// Embeddings of the judge-removed samples, usable as a bad-sample bank.
    pub bad_bank: EmbeddingBank,
    pub verdicts: BTreeMap<String, CurationVerdict>,
}

enum Judged {
    Kept(Vec<f32>, CurationVerdict),
    Removed(Option<Vec<f32>>, CurationVerdict),
    Skipped(String),
}

fn judge_one(
    item: &AuditItem,
    judge: &dyn QualityJudge,
    embedder: &dyn ImageEmbedder,
    policy: &dyn RemovalPolicy,
    dim: usize,
) -> Judged {
    let blob = match item.image.load() {
        Ok(b) => b,
        Err(e) => return Judged::Skipped(format!("reading image: {e}")),
    };
    let verdict = match judge_image(&blob, judge, policy) {
        Ok(v) => v,
        Err(e) => return Judged::Skipped(e.to_string()),
    };
    let embedding = embedder.embed(&blob).map_err(|e| e.to_string()).and_then(|v| {
        if v.len() != dim {
            return Err(ProviderError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            }
            .to_string());
        }
        check_unit(&item.id, &v).map_err(|e| e.to_string())?;
        Ok(v)
    });
    match (verdict.passes, embedding) {
        (true, Ok(v)) => Judged::Kept(v, verdict),
        (true, Err(e)) => Judged::Skipped(e),
        (false, v) => Judged::Removed(v.ok(), verdict),
    }
}

/// Two-stage audit: the judge removes per `policy`, then every kept item
/// whose similarity to some judge-removed item exceeds `delta` is removed.
pub fn audit_corpus(
    items: &[AuditItem],
    judge: &dyn QualityJudge,
    embedder: &dyn ImageEmbedder,
    policy: &dyn RemovalPolicy,
    delta: f64,
    embedding_dim: usize,
) -> Result<AuditOutcome, AuditError> {
    let judged: Vec<Judged> = items
        .par_iter()
        .map(|item| judge_one(item, judge, embedder, policy, embedding_dim))
        .collect();

    let mut embeddings: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut seeds = Vec::new();
    let mut judge_removed = Vec::new();
    let mut errors = Vec::new();
    let mut verdicts = BTreeMap::new();
    let mut bad_bank = EmbeddingBank::empty(embedding_dim);
    for (item, outcome) in items.iter().zip(judged) {
        match outcome {
            Judged::Kept(v, verdict) => {
                embeddings.insert(item.id.clone(), v);
                verdicts.insert(item.id.clone(), verdict);
            }
            Judged::Removed(v, verdict) => {
                judge_removed.push(item.id.clone());
                verdicts.insert(item.id.clone(), verdict);
                if let Some(v) = v {
                    bad_bank.push(item.id.clone(), &v)?;
                    seeds.push(item.id.clone());
                    embeddings.insert(item.id.clone(), v);
                }
            }
            Judged::Skipped(error) => errors.push(ItemError {
                id: item.id.clone(),
                error,
            }),
        }
    }
    let similar = propagate_bad(&embeddings, &seeds, delta)?;

    judge_removed.sort();
    let mut removed_ids: Vec<RemovedItem> = judge_removed
        .iter()
        .map(|id| RemovedItem {
            id: id.clone(),
            stage: RemovalStage::Judge,
        })
        .collect();
    removed_ids.extend(similar.iter().map(|id| RemovedItem {
        id: id.clone(),
        stage: RemovalStage::Similarity,
    }));

    let total_in = items.len() as u64;
    let removed_by_judge = judge_removed.len() as u64;
    let removed_by_similarity = similar.len() as u64;
    let skipped = errors.len() as u64;
    let report = AuditReport {
        total_in,
        removed_by_judge,
        removed_by_similarity,
        skipped,
        remaining: total_in - removed_by_judge - removed_by_similarity - skipped,
        policy: policy.name(),
        delta,
        removed_ids,
        errors,
    };
    Ok(AuditOutcome {
        report,
        bad_bank,
        verdicts,
    })
}

/// Entity frequencies over a report corpus. A report contributes at most one
/// count per entity, however often it mentions it.
pub fn entity_distribution<S: AsRef<str> + Sync>(
    reports: &[S],
    extractor: &dyn EntityExtractor,
) -> Result<DistributionReport, AuditError> {
    let per_report: Vec<Result<Vec<Entity>, ProviderError>> = reports
        .par_iter()
        .map(|text| {
            let mut unique: BTreeMap<EntityId, Entity> = BTreeMap::new();
            for (raw, category) in extractor.extract(text.as_ref())? {
                if let Ok(e) = Entity::new(&raw, category) {
                    unique.insert(e.id, e);
                }
            }
            Ok(unique.into_values().collect())
        })
        .collect();
    let mut counts: HashMap<EntityId, (Entity, u64)> = HashMap::new();
    for entities in per_report {
        for e in entities? {
            counts.entry(e.id).or_insert_with(|| (e, 0)).1 += 1;
        }
    }
    Ok(distribution_report(counts.values().map(|(e, c)| (e, *c)))?)
}
