//! Cosine screening against a bank of known-bad image embeddings.
//!
//! All vectors are unit-norm, so cosine similarity is a plain dot product.
//! An image fails the screen only when its similarity to some bank vector is
//! strictly greater than `delta`; equality passes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Allowed deviation of `‖v‖` from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreenConfig {
    pub delta: f64,
    /// Bank file written by `audit`; `None` screens against an empty bank.
    pub bad_bank: Option<PathBuf>,
    pub embedding_dim: usize,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        ScreenConfig {
            delta: 0.5,
            bad_bank: None,
            embedding_dim: 768,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimilarityError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector `{id}` has norm {norm}, expected 1")]
    NotUnitNorm { id: String, norm: f64 },
    #[error("delta must be in (0, 1], got {0}")]
    BadDelta(f64),
    #[error("seed `{0}` has no embedding")]
    UnknownSeed(String),
    #[error("corrupt bank file: {0}")]
    CorruptBank(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ScreenConfig {
    pub fn validate(&self) -> Result<(), SimilarityError> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(SimilarityError::BadDelta(self.delta));
        }
        Ok(())
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn check_unit(id: &str, v: &[f32]) -> Result<(), SimilarityError> {
    let norm = dot(v, v).sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(SimilarityError::NotUnitNorm {
            id: id.to_string(),
            norm,
        });
    }
    Ok(())
}

/// Row-major bank of unit vectors with their source ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
}

impl EmbeddingBank {
    pub fn empty(dim: usize) -> Self {
        EmbeddingBank {
            dim,
            data: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, v: &[f32]) -> Result<(), SimilarityError> {
        let id = id.into();
        if v.len() != self.dim {
            return Err(SimilarityError::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        check_unit(&id, v)?;
        self.data.extend_from_slice(v);
        self.ids.push(id);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Largest cosine similarity to any bank vector; `None` for an empty bank.
    pub fn max_similarity(&self, v: &[f32]) -> Option<f64> {
        self.rows().map(|row| dot(v, row)).reduce(f64::max)
    }

    /// True as soon as some bank vector is strictly more similar than `delta`.
    fn exceeds(&self, v: &[f32], delta: f64) -> bool {
        self.rows().any(|row| dot(v, row) > delta)
    }

    fn ids_path(path: &Path) -> PathBuf {
        path.with_extension("ids.json")
    }

    /// Writes `{dim: u32 LE, count: u32 LE, count·dim f32 LE}` plus the id sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimilarityError> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(8 + self.data.len() * 4);
        bytes.extend((self.dim as u32).to_le_bytes());
        bytes.extend((self.len() as u32).to_le_bytes());
        for x in &self.data {
            bytes.extend(x.to_le_bytes());
        }
        fs::write(path, bytes)?;
        fs::write(
            Self::ids_path(path),
            serde_json::to_string_pretty(&self.ids).expect("ids serialize"),
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimilarityError> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        if bytes.len() < 8 {
            return Err(SimilarityError::CorruptBank("truncated header".into()));
        }
        let dim = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != dim * count * 4 {
            return Err(SimilarityError::CorruptBank(format!(
                "expected {} payload bytes, found {}",
                dim * count * 4,
                body.len()
            )));
        }
        let data: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ids_path = Self::ids_path(path);
        let ids: Vec<String> = if ids_path.exists() {
            serde_json::from_str(&fs::read_to_string(&ids_path)?)
                .map_err(|e| SimilarityError::CorruptBank(format!("id sidecar: {e}")))?
        } else {
            (0..count).map(|i| format!("bank-{i}")).collect()
        };
        if ids.len() != count {
            return Err(SimilarityError::CorruptBank(format!(
                "sidecar lists {} ids for {count} vectors",
                ids.len()
            )));
        }
        let mut bank = EmbeddingBank::empty(dim);
        for (id, row) in ids.into_iter().zip(data.chunks_exact(dim.max(1))) {
            bank.push(id, row)?;
        }
        Ok(bank)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenOutcome {
    pub passes: bool,
    pub max_similarity: Option<f64>,
}

/// Screens one embedding against the bank.
pub fn similarity_screen(
    embedding: &[f32],
    bank: &EmbeddingBank,
    delta: f64,
) -> Result<ScreenOutcome, SimilarityError> {
    if embedding.len() != bank.dim() {
        return Err(SimilarityError::DimensionMismatch {
            expected: bank.dim(),
            got: embedding.len(),
        });
    }
    check_unit("candidate", embedding)?;
    let max_similarity = bank.max_similarity(embedding);
    Ok(ScreenOutcome {
        passes: max_similarity.is_none_or(|s| s <= delta),
        max_similarity,
    })
}

/// Ids (other than the seeds) whose similarity to any seed exceeds `delta`.
pub fn propagate_bad(
    embeddings: &BTreeMap<String, Vec<f32>>,
    seed_ids: &[String],
    delta: f64,
) -> Result<BTreeSet<String>, SimilarityError> {
    let Some(dim) = embeddings.values().next().map(Vec::len) else {
        return Ok(BTreeSet::new());
    };
    let mut bank = EmbeddingBank::empty(dim);
    let seeds: BTreeSet<&String> = seed_ids.iter().collect();
    for id in &seeds {
        let v = embeddings
            .get(*id)
            .ok_or_else(|| SimilarityError::UnknownSeed((*id).clone()))?;
        bank.push((*id).clone(), v)?;
    }
    for (id, v) in embeddings {
        if v.len() != dim {
            return Err(SimilarityError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        check_unit(id, v)?;
    }
    Ok(embeddings
        .par_iter()
        .filter(|(id, v)| !seeds.contains(id) && bank.exceeds(v, delta))
        .map(|(id, _)| id.clone())
        .collect())
}
