//! Image generation from the IMPRESSION text, gated by the judge and the
//! bad-bank similarity screen.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curation::{judge_image, CurationVerdict, JudgeError, RemovalPolicy};
use crate::providers::{ImageEmbedder, ImageGenerator, ProviderError, QualityJudge};
use crate::rng::{derive_seed, tag};
use crate::similarity::{similarity_screen, EmbeddingBank, SimilarityError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageGenParams {
    /// Classifier-free guidance scale.
    pub guidance_scale: f64,
    /// Denoising steps.
    pub steps: u32,
    pub seed: u64,
}

impl Default for ImageGenParams {
    fn default() -> Self {
        ImageGenParams {
            guidance_scale: 4.0,
            steps: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("impression is empty")]
    EmptyPrompt,
    #[error("guidance_scale must be positive and steps at least 1")]
    BadParams,
    #[error("max_retries must be at least 1")]
    ZeroRetries,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("image failed curation {attempts} times")]
    RetriesExhausted { attempts: u32 },
}

impl ImageGenParams {
    pub fn validate(&self) -> Result<(), ImageError> {
        if self.guidance_scale.is_nan() || self.guidance_scale <= 0.0 || self.steps == 0 {
            return Err(ImageError::BadParams);
        }
        Ok(())
    }
}

pub fn content_hash(blob: &[u8]) -> String {
    hex::encode(Sha256::digest(blob))
}

/// Requests one image for the impression. The payload is returned unchanged.
pub fn generate_image(
    impression: &str,
    gen: &dyn ImageGenerator,
    params: &ImageGenParams,
) -> Result<Vec<u8>, ImageError> {
    if impression.trim().is_empty() {
        return Err(ImageError::EmptyPrompt);
    }
    params.validate()?;
    Ok(gen.generate(impression, params)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Content hash of the accepted payload.
    pub blob_ref: String,
    pub params: ImageGenParams,
    pub verdict: CurationVerdict,
    /// `None` when the bank is empty.
    pub max_bad_similarity: Option<f64>,
    pub attempts: u32,
}

/// Providers and settings for the curated image loop.
pub struct ImageCuration<'a> {
    pub generator: &'a dyn ImageGenerator,
    pub judge: &'a dyn QualityJudge,
    pub embedder: &'a dyn ImageEmbedder,
    pub bank: &'a EmbeddingBank,
    pub delta: f64,
    pub policy: &'a dyn RemovalPolicy,
    pub max_retries: u32,
}

/// Regenerates with the same prompt and a fresh seed until an image passes
/// the judge and then the similarity screen. The embedder is only called for
/// images the judge accepted.
pub fn generate_curated_image(
    impression: &str,
    curation: &ImageCuration<'_>,
    base: &ImageGenParams,
    record_seed: u64,
) -> Result<(ImageRecord, Vec<u8>), ImageError> {
    if curation.max_retries == 0 {
        return Err(ImageError::ZeroRetries);
    }
    for attempt in 1..=curation.max_retries {
        let params = ImageGenParams {
            seed: derive_seed(record_seed, &[tag::IMAGE, attempt as u64]),
            ..*base
        };
        let blob = generate_image(impression, curation.generator, &params)?;
        let verdict = judge_image(&blob, curation.judge, curation.policy)?;
        if !verdict.passes {
            continue;
        }
        let embedding = curation.embedder.embed(&blob)?;
        let screen = similarity_screen(&embedding, curation.bank, curation.delta)?;
        if !screen.passes {
            continue;
        }
        let record = ImageRecord {
            blob_ref: content_hash(&blob),
            params,
            verdict,
            max_bad_similarity: screen.max_similarity,
            attempts: attempt,
        };
        return Ok((record, blob));
    }
    Err(ImageError::RetriesExhausted {
        attempts: curation.max_retries,
    })
}
