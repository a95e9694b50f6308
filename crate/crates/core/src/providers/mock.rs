//! Deterministic, seedable stand-ins for every provider role.
//!
//! Each mock is a pure function of its inputs and the policy seed, so a full
//! pipeline run under mocks is byte-reproducible.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    EntityExtractor, EntityMatcher, ImageEmbedder, ImageGenerator, ProviderError, QualityJudge, Role, TextGenerator,
    TextParams,
};
use crate::catalog::EntityCatalog;
use crate::curation::QUALITY_QUERIES;
use crate::entity::{Category, Entity};
use crate::image::ImageGenParams;
use crate::report::PAYLOAD_MARKER;
use crate::rng::{stream, unit_from_bytes};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoleProbabilities {
    pub text_gen: f64,
    pub entity_extract: f64,
    pub image_gen: f64,
    pub quality_judge: f64,
    pub image_embed: f64,
}

impl RoleProbabilities {
    pub fn get(&self, role: Role) -> f64 {
        match role {
            Role::TextGen => self.text_gen,
            Role::EntityExtract => self.entity_extract,
            Role::ImageGen => self.image_gen,
            Role::QualityJudge => self.quality_judge,
            Role::ImageEmbed => self.image_embed,
        }
    }
}

/// Behaviour knobs for the mock backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockPolicy {
    pub seed: u64,
    /// Probability that a request fails with `ProviderUnavailable`.
    pub failure_prob: RoleProbabilities,
    /// Probability that a generated text mentions one extra catalog entity.
    pub extra_entity_prob: f64,
    /// Probability that a generated text omits one requested entity.
    pub drop_entity_prob: f64,
    /// Probability that the judge answers NO to every query for an unplanted image.
    pub bad_image_prob: f64,
    pub embedding_dim: usize,
}

impl Default for MockPolicy {
    fn default() -> Self {
        MockPolicy {
            seed: 0,
            failure_prob: RoleProbabilities::default(),
            extra_entity_prob: 0.0,
            drop_entity_prob: 0.0,
            bad_image_prob: 0.0,
            embedding_dim: 768,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("mock probability `{0}` must be in [0, 1]")]
pub struct BadProbability(pub &'static str);

impl MockPolicy {
    pub fn validate(&self) -> Result<(), BadProbability> {
        let fp = &self.failure_prob;
        let checks: [(&'static str, f64); 8] = [
            ("failure_prob.text_gen", fp.text_gen),
            ("failure_prob.entity_extract", fp.entity_extract),
            ("failure_prob.image_gen", fp.image_gen),
            ("failure_prob.quality_judge", fp.quality_judge),
            ("failure_prob.image_embed", fp.image_embed),
            ("extra_entity_prob", self.extra_entity_prob),
            ("drop_entity_prob", self.drop_entity_prob),
            ("bad_image_prob", self.bad_image_prob),
        ];
        for (name, p) in checks {
            if !(0.0..=1.0).contains(&p) {
                return Err(BadProbability(name));
            }
        }
        Ok(())
    }

    fn maybe_fail(&self, role: Role, request: &[u8]) -> Result<(), ProviderError> {
        let p = self.failure_prob.get(role);
        if p > 0.0 && unit_from_bytes(self.seed, role.key(), request) < p {
            return Err(ProviderError::Unavailable(format!("mock {role} failure")));
        }
        Ok(())
    }
}

const MOCK_MAGIC: &[u8] = b"MOCKIMG1\n";

/// Payload format of mock images. Fixtures may plant judge answers and
/// embeddings; generated images record only the request that made them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MockImage {
    pub label: String,
    /// One raw answer per quality query, in query order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guidance_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl MockImage {
    pub fn planted(label: &str, answers: [bool; 6], embedding: Option<Vec<f32>>) -> Self {
        MockImage {
            label: label.to_string(),
            answers: Some(
                answers
                    .iter()
                    .map(|&a| if a { "YES" } else { "NO" }.to_string())
                    .collect(),
            ),
            embedding,
            ..MockImage::default()
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MOCK_MAGIC.to_vec();
        out.extend(serde_json::to_vec(self).expect("mock image serializes"));
        out
    }

    pub fn decode(blob: &[u8]) -> Option<MockImage> {
        blob.strip_prefix(MOCK_MAGIC)
            .and_then(|body| serde_json::from_slice(body).ok())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Echoes the entities named in the prompt payload, then perturbs per policy.
///
/// Payload is the text after the last [`PAYLOAD_MARKER`] line. Lines of the
/// form `CATEGORY: a; b` are read as an entity list; otherwise the payload is
/// scanned against the catalog (the summarization case).
pub struct MockTextGenerator {
    policy: MockPolicy,
    catalog: Arc<EntityCatalog>,
    matcher: Arc<EntityMatcher>,
}

impl MockTextGenerator {
    pub fn new(policy: MockPolicy, catalog: Arc<EntityCatalog>, matcher: Arc<EntityMatcher>) -> Self {
        MockTextGenerator {
            policy,
            catalog,
            matcher,
        }
    }

    fn requested(&self, prompt: &str) -> Vec<Entity> {
        let payload = prompt.rsplit_once(PAYLOAD_MARKER).map_or(prompt, |(_, tail)| tail);
        let mut listed = Vec::new();
        let mut saw_labels = false;
        for line in payload.lines() {
            let Some((label, rest)) = line.split_once(':') else {
                continue;
            };
            let Ok(category) = label.parse::<Category>() else {
                continue;
            };
            saw_labels = true;
            for item in rest.split(';') {
                let item = item.trim();
                if item.is_empty() || item.eq_ignore_ascii_case("none") {
                    continue;
                }
                if let Ok(e) = Entity::new(item, category) {
                    listed.push(e);
                }
            }
        }
        let mut entities = if saw_labels { listed } else { self.matcher.scan(payload) };
        let mut seen = std::collections::HashSet::new();
        entities.retain(|e| seen.insert(e.id));
        entities
    }
}

impl TextGenerator for MockTextGenerator {
    fn generate(&self, prompt: &str, params: &TextParams) -> Result<String, ProviderError> {
        let mut request = prompt.as_bytes().to_vec();
        request.extend(params.seed.to_le_bytes());
        self.policy.maybe_fail(Role::TextGen, &request)?;

        let prompt_hash = u64::from_le_bytes(Sha256::digest(prompt.as_bytes())[..8].try_into().unwrap());
        let mut rng = stream(self.policy.seed, &[prompt_hash, params.seed]);
        let mut entities = self.requested(prompt);
        let requested = entities.len();

        if rng.gen::<f64>() < self.policy.extra_entity_prob {
            let all = self.catalog.entities();
            for _ in 0..64 {
                let candidate = all.choose(&mut rng).expect("catalog is non-empty");
                if entities.iter().all(|e| e.text != candidate.text) {
                    entities.push(candidate.clone());
                    break;
                }
            }
        }
        // Drops only touch requested entities, so both faults stay independent.
        if rng.gen::<f64>() < self.policy.drop_entity_prob && requested > 0 {
            let idx = rng.gen_range(0..requested);
            entities.remove(idx);
        }
        if entities.is_empty() {
            return Ok("No reportable observations.".to_string());
        }
        let mentions: Vec<&str> = entities.iter().map(|e| e.text.as_str()).collect();
        Ok(format!("Observed: {}.", mentions.join(", ")))
    }
}

/// Exact catalog-string NER.
pub struct MockEntityExtractor {
    policy: MockPolicy,
    matcher: Arc<EntityMatcher>,
}

impl MockEntityExtractor {
    pub fn new(policy: MockPolicy, matcher: Arc<EntityMatcher>) -> Self {
        MockEntityExtractor { policy, matcher }
    }
}

impl EntityExtractor for MockEntityExtractor {
    fn extract(&self, text: &str) -> Result<Vec<(String, Category)>, ProviderError> {
        self.policy.maybe_fail(Role::EntityExtract, text.as_bytes())?;
        Ok(self
            .matcher
            .scan(text)
            .into_iter()
            .map(|e| (e.text, e.category))
            .collect())
    }
}

pub struct MockImageGenerator {
    policy: MockPolicy,
}

impl MockImageGenerator {
    pub fn new(policy: MockPolicy) -> Self {
        MockImageGenerator { policy }
    }
}

impl ImageGenerator for MockImageGenerator {
    fn generate(&self, prompt: &str, params: &ImageGenParams) -> Result<Vec<u8>, ProviderError> {
        if prompt.trim().is_empty() {
            return Err(ProviderError::RejectedPrompt("empty prompt".into()));
        }
        let mut request = prompt.as_bytes().to_vec();
        request.extend(params.seed.to_le_bytes());
        self.policy.maybe_fail(Role::ImageGen, &request)?;
        Ok(MockImage {
            label: "generated".into(),
            prompt_sha256: Some(sha256_hex(prompt.as_bytes())),
            guidance_scale: Some(params.guidance_scale),
            steps: Some(params.steps),
            seed: Some(params.seed),
            ..MockImage::default()
        }
        .encode())
    }
}

/// Answers from planted metadata when present; otherwise an image is "bad"
/// (NO to everything) with probability `bad_image_prob`, decided by hash.
pub struct MockQualityJudge {
    policy: MockPolicy,
}

impl MockQualityJudge {
    pub fn new(policy: MockPolicy) -> Self {
        MockQualityJudge { policy }
    }
}

impl QualityJudge for MockQualityJudge {
    fn answer(&self, image: &[u8], query: &str) -> Result<String, ProviderError> {
        let mut request = image.to_vec();
        request.extend(query.as_bytes());
        self.policy.maybe_fail(Role::QualityJudge, &request)?;
        if let Some(answers) = MockImage::decode(image).and_then(|m| m.answers) {
            if let Some(idx) = QUALITY_QUERIES.iter().position(|q| q.text == query) {
                if let Some(a) = answers.get(idx) {
                    return Ok(a.clone());
                }
            }
        }
        let bad = unit_from_bytes(self.policy.seed, "bad_image", image) < self.policy.bad_image_prob;
        Ok(if bad { "NO" } else { "YES" }.to_string())
    }
}

/// Planted embedding when present, else a hash-seeded isotropic unit vector.
pub struct MockImageEmbedder {
    policy: MockPolicy,
}

impl MockImageEmbedder {
    pub fn new(policy: MockPolicy) -> Self {
        MockImageEmbedder { policy }
    }
}

impl ImageEmbedder for MockImageEmbedder {
    fn embed(&self, image: &[u8]) -> Result<Vec<f32>, ProviderError> {
        self.policy.maybe_fail(Role::ImageEmbed, image)?;
        let dim = self.policy.embedding_dim;
        let raw: Vec<f64> = match MockImage::decode(image).and_then(|m| m.embedding) {
            Some(v) => {
                if v.len() != dim {
                    return Err(ProviderError::DimensionMismatch {
                        expected: dim,
                        got: v.len(),
                    });
                }
                v.into_iter().map(f64::from).collect()
            }
            None => {
                let digest = Sha256::digest(image);
                let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
                let mut rng = stream(self.policy.seed, &[seed]);
                (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            }
        };
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(ProviderError::Protocol("zero embedding".into()));
        }
        Ok(raw.into_iter().map(|x| (x / norm) as f32).collect())
    }
}
