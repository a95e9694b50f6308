//! FINDINGS / IMPRESSION synthesis with entity-set verification.
//!
//! Both sections are regenerated until the entities extracted from them are
//! exactly the sampled set: nothing missing, nothing extra.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::entity::{Category, Entity, EntityId};
use crate::providers::{EntityExtractor, ProviderError, TextGenerator, TextParams};
use crate::rng::{derive_seed, tag};
use crate::sampler::EntitySet;

/// Separates prompt instructions from the payload (entity list or findings).
pub const PAYLOAD_MARKER: &str = "\n---\n";

pub const DEFAULT_FINDINGS_TEMPLATE: &str = "You are an experienced radiologist. Write the FINDINGS section of a chest X-ray report.\n\
The report must describe every entity listed below, in the role given by its category label, and must not mention any other clinical entity.\n\
---\n\
ABNORMALITY: {ABNORMALITY}\n\
NON-ABNORMALITY: {NON-ABNORMALITY}\n\
DISEASE: {DISEASE}\n\
NON-DISEASE: {NON-DISEASE}\n\
ANATOMY: {ANATOMY}\n";

pub const DEFAULT_IMPRESSION_TEMPLATE: &str =
    "Summarize the FINDINGS section below into the IMPRESSION section of the same chest X-ray report.\n\
Keep every clinical entity mentioned in the findings and do not introduce any new one.\n\
---\n\
{FINDINGS}\n";

pub const FINDINGS_PLACEHOLDER: &str = "FINDINGS";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("template is missing the {{{0}}} placeholder")]
pub struct TemplateMissingPlaceholder(pub String);

/// Replaces `{NAME}` occurrences in a single pass, so substituted text is never rescanned.
fn render(template: &str, values: &BTreeMap<&str, String>) -> Result<String, TemplateMissingPlaceholder> {
    for name in values.keys() {
        if !template.contains(&format!("{{{name}}}")) {
            return Err(TemplateMissingPlaceholder(name.to_string()));
        }
    }
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}').map(|close| (&after[..close], close)) {
            Some((name, close)) if values.contains_key(name) => {
                out.push_str(&values[name]);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Prompt listing every entity of the set under its category label.
pub fn build_findings_prompt(set: &EntitySet, template: &str) -> Result<String, TemplateMissingPlaceholder> {
    let mut values: BTreeMap<&str, String> = BTreeMap::new();
    for category in Category::ALL {
        let names: Vec<&str> = set
            .iter()
            .filter(|e| e.category == category)
            .map(|e| e.text.as_str())
            .collect();
        let rendered = if names.is_empty() {
            "none".to_string()
        } else {
            names.join("; ")
        };
        values.insert(category.label(), rendered);
    }
    render(template, &values)
}

/// Prompt embedding the verified findings verbatim.
pub fn build_impression_prompt(findings: &str, template: &str) -> Result<String, TemplateMissingPlaceholder> {
    let values = BTreeMap::from([(FINDINGS_PLACEHOLDER, findings.to_string())]);
    render(template, &values)
}

/// Extracted entities compared against the sampled set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub entities: Vec<Entity>,
    pub missing: Vec<Entity>,
    pub extra: Vec<Entity>,
}

impl ExtractionResult {
    pub fn is_equal(&self) -> bool {
        self.missing.is_empty() && self.extra.is_empty()
    }
}

/// Extracts entities from `text` and compares them to `set` as sets of
/// normalized `(text, category)` pairs. Multiplicity is ignored.
pub fn verify_entity_coverage(
    text: &str,
    set: &EntitySet,
    extractor: &dyn EntityExtractor,
) -> Result<ExtractionResult, ProviderError> {
    let mut found: BTreeMap<EntityId, Entity> = BTreeMap::new();
    for (raw, category) in extractor.extract(text)? {
        if let Ok(e) = Entity::new(&raw, category) {
            found.insert(e.id, e);
        }
    }
    let wanted: BTreeMap<EntityId, &Entity> = set.iter().map(|e| (e.id, e)).collect();
    let missing = wanted
        .iter()
        .filter(|(id, _)| !found.contains_key(id))
        .map(|(_, e)| (*e).clone())
        .collect();
    let extra = found
        .iter()
        .filter(|(id, _)| !wanted.contains_key(id))
        .map(|(_, e)| e.clone())
        .collect();
    Ok(ExtractionResult {
        entities: found.into_values().collect(),
        missing,
        extra,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Findings,
    Impression,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("{section:?} still mismatched after {attempts} attempts ({} missing, {} extra)", last.missing.len(), last.extra.len())]
    RetriesExhausted {
        section: Section,
        attempts: u32,
        last: ExtractionResult,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Template(#[from] TemplateMissingPlaceholder),
    #[error("max_retries must be at least 1")]
    ZeroRetries,
}

/// Prompt templates, sampling parameters and loop bounds for report synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    pub findings_template: String,
    pub impression_template: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub findings_max_retries: u32,
    pub impression_max_retries: u32,
}

impl Default for ReportSettings {
    fn default() -> Self {
        ReportSettings {
            findings_template: DEFAULT_FINDINGS_TEMPLATE.into(),
            impression_template: DEFAULT_IMPRESSION_TEMPLATE.into(),
            temperature: 0.7,
            max_tokens: 512,
            findings_max_retries: 10,
            impression_max_retries: 10,
        }
    }
}

impl ReportSettings {
    /// Checks templates up front so a bad template fails before any provider call.
    pub fn validate(&self) -> Result<(), SynthError> {
        let probe = EntitySet { s1: vec![], s2: vec![] };
        build_findings_prompt(&probe, &self.findings_template)?;
        build_impression_prompt("", &self.impression_template)?;
        if self.findings_max_retries == 0 || self.impression_max_retries == 0 {
            return Err(SynthError::ZeroRetries);
        }
        Ok(())
    }

    fn params(&self, seed: u64) -> TextParams {
        TextParams {
            temperature: self.temperature,
            seed,
            max_tokens: self.max_tokens,
        }
    }
}

fn regenerate_until_equal(
    section: Section,
    prompt: &str,
    set: &EntitySet,
    gen: &dyn TextGenerator,
    extractor: &dyn EntityExtractor,
    settings: &ReportSettings,
    record_seed: u64,
) -> Result<(String, u32), SynthError> {
    let (stream_tag, max_retries) = match section {
        Section::Findings => (tag::FINDINGS, settings.findings_max_retries),
        Section::Impression => (tag::IMPRESSION, settings.impression_max_retries),
    };
    if max_retries == 0 {
        return Err(SynthError::ZeroRetries);
    }
    let mut last = None;
    for attempt in 1..=max_retries {
        let seed = derive_seed(record_seed, &[stream_tag, attempt as u64]);
        let text = gen.generate(prompt, &settings.params(seed))?;
        let check = verify_entity_coverage(&text, set, extractor)?;
        if check.is_equal() {
            return Ok((text, attempt));
        }
        last = Some(check);
    }
    Err(SynthError::RetriesExhausted {
        section,
        attempts: max_retries,
        last: last.expect("at least one attempt"),
    })
}

/// Generates FINDINGS whose extracted entities equal `set`.
pub fn generate_findings(
    set: &EntitySet,
    gen: &dyn TextGenerator,
    extractor: &dyn EntityExtractor,
    settings: &ReportSettings,
    record_seed: u64,
) -> Result<(String, u32), SynthError> {
    let prompt = build_findings_prompt(set, &settings.findings_template)?;
    regenerate_until_equal(Section::Findings, &prompt, set, gen, extractor, settings, record_seed)
}

/// Summarizes verified findings into an IMPRESSION whose entities equal `set`.
pub fn generate_impression(
    findings: &str,
    set: &EntitySet,
    gen: &dyn TextGenerator,
    extractor: &dyn EntityExtractor,
    settings: &ReportSettings,
    record_seed: u64,
) -> Result<(String, u32), SynthError> {
    let prompt = build_impression_prompt(findings, &settings.impression_template)?;
    regenerate_until_equal(Section::Impression, &prompt, set, gen, extractor, settings, record_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticReport {
    pub findings: String,
    pub impression: String,
    pub entity_set: EntitySet,
    pub findings_attempts: u32,
    pub impression_attempts: u32,
}

pub fn synthesize_report(
    set: &EntitySet,
    gen: &dyn TextGenerator,
    extractor: &dyn EntityExtractor,
    settings: &ReportSettings,
    record_seed: u64,
) -> Result<SyntheticReport, SynthError> {
    let (findings, findings_attempts) = generate_findings(set, gen, extractor, settings, record_seed)?;
    let (impression, impression_attempts) = generate_impression(&findings, set, gen, extractor, settings, record_seed)?;
    Ok(SyntheticReport {
        findings,
        impression,
        entity_set: set.clone(),
        findings_attempts,
        impression_attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn set() -> EntitySet {
        EntitySet {
            s1: vec![Entity::new("edema", Category::Abnormality).unwrap()],
            s2: vec![Entity::new("left lung", Category::Anatomy).unwrap()],
        }
    }

    /// Returns a fixed list of pairs regardless of input.
    struct FixedExtractor(Vec<(&'static str, Category)>);

    impl EntityExtractor for FixedExtractor {
        fn extract(&self, _text: &str) -> Result<Vec<(String, Category)>, ProviderError> {
            Ok(self.0.iter().map(|(t, c)| (t.to_string(), *c)).collect())
        }
    }

    struct Echo(AtomicU32);

    impl TextGenerator for Echo {
        fn generate(&self, _prompt: &str, _params: &TextParams) -> Result<String, ProviderError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok("text".into())
        }
    }

    #[test]
    fn findings_prompt_lists_entities_by_label() {
        let prompt = build_findings_prompt(&set(), DEFAULT_FINDINGS_TEMPLATE).unwrap();
        assert!(prompt.contains("\nABNORMALITY: edema\n"));
        assert!(prompt.contains("\nANATOMY: left lung\n"));
        assert!(prompt.contains("\nDISEASE: none\n"));
        assert_eq!(
            prompt,
            build_findings_prompt(&set(), DEFAULT_FINDINGS_TEMPLATE).unwrap()
        );
    }

    #[test]
    fn missing_placeholder_rejected() {
        let template = DEFAULT_FINDINGS_TEMPLATE.replace("{ANATOMY}", "");
        assert_eq!(
            build_findings_prompt(&set(), &template),
            Err(TemplateMissingPlaceholder("ANATOMY".into()))
        );
        assert!(build_impression_prompt("x", "no slot").is_err());
    }

    #[test]
    fn substituted_text_not_rescanned() {
        let out = build_impression_prompt("{ANATOMY} {FINDINGS}", "A {FINDINGS} B {other}").unwrap();
        assert_eq!(out, "A {ANATOMY} {FINDINGS} B {other}");
    }

    #[test]
    fn exact_match_is_equal() {
        let ex = FixedExtractor(vec![
            ("Edema", Category::Abnormality),
            ("left  lung", Category::Anatomy),
        ]);
        let r = verify_entity_coverage("", &set(), &ex).unwrap();
        assert!(r.is_equal());
    }

    #[test]
    fn missing_entity_reported() {
        let ex = FixedExtractor(vec![("edema", Category::Abnormality)]);
        let r = verify_entity_coverage("", &set(), &ex).unwrap();
        assert!(!r.is_equal());
        assert_eq!(r.missing[0].text, "left lung");
        assert!(r.extra.is_empty());
    }

    #[test]
    fn extra_entity_reported() {
        let ex = FixedExtractor(vec![
            ("edema", Category::Abnormality),
            ("left lung", Category::Anatomy),
            ("pneumonia", Category::Disease),
        ]);
        let r = verify_entity_coverage("", &set(), &ex).unwrap();
        assert!(!r.is_equal());
        assert_eq!(r.extra[0].text, "pneumonia");
    }

    #[test]
    fn multiplicity_ignored() {
        let ex = FixedExtractor(vec![
            ("edema", Category::Abnormality),
            ("edema", Category::Abnormality),
            ("left lung", Category::Anatomy),
        ]);
        assert!(verify_entity_coverage("", &set(), &ex).unwrap().is_equal());
    }

    #[test]
    fn exhausts_after_cap() {
        let gen = Echo(AtomicU32::new(0));
        let ex = FixedExtractor(vec![
            ("edema", Category::Abnormality),
            ("left lung", Category::Anatomy),
            ("pneumonia", Category::Disease),
        ]);
        let settings = ReportSettings {
            findings_max_retries: 5,
            ..ReportSettings::default()
        };
        let err = generate_findings(&set(), &gen, &ex, &settings, 1).unwrap_err();
        assert!(matches!(
            err,
            SynthError::RetriesExhausted {
                section: Section::Findings,
                attempts: 5,
                ..
            }
        ));
        assert_eq!(gen.0.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn first_attempt_success() {
        let gen = Echo(AtomicU32::new(0));
        let ex = FixedExtractor(vec![("edema", Category::Abnormality), ("left lung", Category::Anatomy)]);
        let report = synthesize_report(&set(), &gen, &ex, &ReportSettings::default(), 3).unwrap();
        assert_eq!((report.findings_attempts, report.impression_attempts), (1, 1));
    }

    #[test]
    fn settings_validation() {
        ReportSettings::default().validate().unwrap();
        let bad = ReportSettings {
            impression_template: "summarize".into(),
            ..ReportSettings::default()
        };
        assert!(matches!(bad.validate(), Err(SynthError::Template(_))));
        let zero = ReportSettings {
            findings_max_retries: 0,
            ..ReportSettings::default()
        };
        assert_eq!(zero.validate(), Err(SynthError::ZeroRetries));
    }
}
