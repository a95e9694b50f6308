//! Wire protocol v1: JSON over HTTP, one POST endpoint per role.
//!
//! The field tables here are the normative schema; the JSON Schema documents
//! under `crates/core/schemas/v1/` mirror them for services written in other languages.
//! See `docs/protocol.md` for the field-by-field description.

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Role;
use crate::curation::parse_answer;
use crate::entity::Category;

pub const PROTOCOL_VERSION: &str = "v1";

/// Tolerance on `‖embedding‖ = 1` for responses from remote embedders.
pub const WIRE_UNIT_NORM_TOL: f64 = 1e-4;

pub fn b64_encode(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn b64_decode(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    base64::engine::general_purpose::STANDARD.decode(text)
}

fn v1() -> String {
    PROTOCOL_VERSION.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRequest {
    pub protocol_version: String,
    pub prompt: String,
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextResponse {
    pub protocol_version: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractRequest {
    pub protocol_version: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEntity {
    pub text: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractResponse {
    pub protocol_version: String,
    pub entities: Vec<WireEntity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRequest {
    pub protocol_version: String,
    pub prompt: String,
    pub guidance_scale: f64,
    pub steps: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResponse {
    pub protocol_version: String,
    pub image_base64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub protocol_version: String,
    pub image_base64: String,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub protocol_version: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub protocol_version: String,
    pub image_base64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub protocol_version: String,
    pub embedding: Vec<f32>,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub retryable: bool,
}

impl TextRequest {
    pub fn new(prompt: &str, temperature: f64, seed: u64, max_tokens: u32) -> Self {
        TextRequest {
            protocol_version: v1(),
            prompt: prompt.into(),
            temperature,
            seed,
            max_tokens,
        }
    }
}

impl ExtractRequest {
    pub fn new(text: &str) -> Self {
        ExtractRequest {
            protocol_version: v1(),
            text: text.into(),
        }
    }
}

impl ImageRequest {
    pub fn new(prompt: &str, guidance_scale: f64, steps: u32, seed: u64) -> Self {
        ImageRequest {
            protocol_version: v1(),
            prompt: prompt.into(),
            guidance_scale,
            steps,
            seed,
        }
    }
}

impl JudgeRequest {
    pub fn new(image: &[u8], query: &str) -> Self {
        JudgeRequest {
            protocol_version: v1(),
            image_base64: b64_encode(image),
            query: query.into(),
        }
    }
}

impl EmbedRequest {
    pub fn new(image: &[u8]) -> Self {
        EmbedRequest {
            protocol_version: v1(),
            image_base64: b64_encode(image),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Request,
    Response,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldType {
    String,
    Number,
    Integer,
    Base64,
    Entities,
    Vector,
}

/// Required fields (and their types) for a message. No other fields are allowed.
pub fn fields(role: Role, kind: Kind) -> &'static [(&'static str, FieldType)] {
    use FieldType::*;
    match (role, kind) {
        (Role::TextGen, Kind::Request) => &[
            ("protocol_version", String),
            ("prompt", String),
            ("temperature", Number),
            ("seed", Integer),
            ("max_tokens", Integer),
        ],
        (Role::TextGen, Kind::Response) => &[("protocol_version", String), ("text", String)],
        (Role::EntityExtract, Kind::Request) => &[("protocol_version", String), ("text", String)],
        (Role::EntityExtract, Kind::Response) => &[("protocol_version", String), ("entities", Entities)],
        (Role::ImageGen, Kind::Request) => &[
            ("protocol_version", String),
            ("prompt", String),
            ("guidance_scale", Number),
            ("steps", Integer),
            ("seed", Integer),
        ],
        (Role::ImageGen, Kind::Response) => &[("protocol_version", String), ("image_base64", Base64)],
        (Role::QualityJudge, Kind::Request) => &[
            ("protocol_version", String),
            ("image_base64", Base64),
            ("query", String),
        ],
        (Role::QualityJudge, Kind::Response) => &[("protocol_version", String), ("answer", String)],
        (Role::ImageEmbed, Kind::Request) => &[("protocol_version", String), ("image_base64", Base64)],
        (Role::ImageEmbed, Kind::Response) => &[("protocol_version", String), ("embedding", Vector)],
    }
}

/// The shipped JSON Schema document for a message.
pub fn json_schema(role: Role, kind: Kind) -> &'static str {
    match (role, kind) {
        (Role::TextGen, Kind::Request) => include_str!("../../schemas/v1/generate_text.request.json"),
        (Role::TextGen, Kind::Response) => include_str!("../../schemas/v1/generate_text.response.json"),
        (Role::EntityExtract, Kind::Request) => include_str!("../../schemas/v1/extract_entities.request.json"),
        (Role::EntityExtract, Kind::Response) => include_str!("../../schemas/v1/extract_entities.response.json"),
        (Role::ImageGen, Kind::Request) => include_str!("../../schemas/v1/generate_image.request.json"),
        (Role::ImageGen, Kind::Response) => include_str!("../../schemas/v1/generate_image.response.json"),
        (Role::QualityJudge, Kind::Request) => include_str!("../../schemas/v1/judge.request.json"),
        (Role::QualityJudge, Kind::Response) => include_str!("../../schemas/v1/judge.response.json"),
        (Role::ImageEmbed, Kind::Request) => include_str!("../../schemas/v1/embed.request.json"),
        (Role::ImageEmbed, Kind::Response) => include_str!("../../schemas/v1/embed.response.json"),
    }
}

pub const ERROR_SCHEMA: &str = include_str!("../../schemas/v1/error.json");

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{role} {kind:?}: {reason}")]
pub struct SchemaViolation {
    pub role: Role,
    pub kind: Kind,
    pub reason: String,
}

/// Checks a message against the v1 schema, including the semantic contracts:
/// unit-norm embeddings and YES/NO judge answers.
pub fn validate(role: Role, kind: Kind, message: &Value) -> Result<(), SchemaViolation> {
    let fail = |reason: String| SchemaViolation { role, kind, reason };
    let obj = message
        .as_object()
        .ok_or_else(|| fail("message is not a JSON object".into()))?;
    let table = fields(role, kind);
    for key in obj.keys() {
        if !table.iter().any(|(name, _)| name == key) {
            return Err(fail(format!("unexpected field `{key}`")));
        }
    }
    for (name, ty) in table {
        let value = obj.get(*name).ok_or_else(|| fail(format!("missing field `{name}`")))?;
        check_type(value, *ty).map_err(|r| fail(format!("field `{name}`: {r}")))?;
    }
    if obj["protocol_version"] != PROTOCOL_VERSION {
        return Err(fail(format!(
            "protocol_version {} is not {PROTOCOL_VERSION}",
            obj["protocol_version"]
        )));
    }
    match (role, kind) {
        (Role::ImageEmbed, Kind::Response) => {
            let norm = obj["embedding"]
                .as_array()
                .expect("type checked")
                .iter()
                .map(|x| x.as_f64().expect("type checked").powi(2))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > WIRE_UNIT_NORM_TOL {
                return Err(fail(format!(
                    "embedding norm {norm} is not 1 within {WIRE_UNIT_NORM_TOL}"
                )));
            }
        }
        (Role::QualityJudge, Kind::Response) => {
            let answer = obj["answer"].as_str().expect("type checked");
            parse_answer(answer).map_err(|e| fail(e.to_string()))?;
        }
        _ => {}
    }
    Ok(())
}

fn check_type(value: &Value, ty: FieldType) -> Result<(), String> {
    match ty {
        FieldType::String => value.as_str().map(|_| ()).ok_or("expected string".into()),
        FieldType::Number => match value.as_f64() {
            Some(x) if x.is_finite() => Ok(()),
            _ => Err("expected finite number".into()),
        },
        FieldType::Integer => value.as_u64().map(|_| ()).ok_or("expected unsigned integer".into()),
        FieldType::Base64 => {
            let s = value.as_str().ok_or("expected base64 string")?;
            b64_decode(s).map(|_| ()).map_err(|e| format!("invalid base64: {e}"))
        }
        FieldType::Entities => {
            let items = value.as_array().ok_or("expected array")?;
            for item in items {
                let parsed: WireEntity =
                    serde_json::from_value(item.clone()).map_err(|e| format!("bad entity: {e}"))?;
                if item.as_object().map_or(0, |o| o.len()) != 2 {
                    return Err(format!("entity `{}` has extra fields", parsed.text));
                }
            }
            Ok(())
        }
        FieldType::Vector => {
            let items = value.as_array().ok_or("expected array")?;
            if items.is_empty() {
                return Err("empty vector".into());
            }
            if items.iter().all(|x| x.as_f64().is_some_and(f64::is_finite)) {
                Ok(())
            } else {
                Err("vector must contain finite numbers".into())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn typed_messages_validate() {
        let cases = [
            (
                Role::TextGen,
                Kind::Request,
                serde_json::to_value(TextRequest::new("p", 0.7, 1, 10)).unwrap(),
            ),
            (
                Role::EntityExtract,
                Kind::Request,
                serde_json::to_value(ExtractRequest::new("t")).unwrap(),
            ),
            (
                Role::ImageGen,
                Kind::Request,
                serde_json::to_value(ImageRequest::new("p", 4.0, 50, 3)).unwrap(),
            ),
            (
                Role::QualityJudge,
                Kind::Request,
                serde_json::to_value(JudgeRequest::new(b"x", "q")).unwrap(),
            ),
            (
                Role::ImageEmbed,
                Kind::Request,
                serde_json::to_value(EmbedRequest::new(b"x")).unwrap(),
            ),
        ];
        for (role, kind, v) in cases {
            validate(role, kind, &v).unwrap();
        }
    }

    #[test]
    fn rejects_wrong_version_and_unknown_fields() {
        let bad = json!({"protocol_version": "v2", "text": "x"});
        assert!(validate(Role::TextGen, Kind::Response, &bad).is_err());
        let extra = json!({"protocol_version": "v1", "text": "x", "debug": 1});
        assert!(validate(Role::TextGen, Kind::Response, &extra).is_err());
    }

    #[test]
    fn embedding_norm_enforced() {
        let ok = json!({"protocol_version": "v1", "embedding": [0.6, 0.8]});
        validate(Role::ImageEmbed, Kind::Response, &ok).unwrap();
        let long = json!({"protocol_version": "v1", "embedding": [1.0, 1.0]});
        assert!(validate(Role::ImageEmbed, Kind::Response, &long).is_err());
    }

    #[test]
    fn judge_answer_contract() {
        let ok = json!({"protocol_version": "v1", "answer": "yes."});
        validate(Role::QualityJudge, Kind::Response, &ok).unwrap();
        let bad = json!({"protocol_version": "v1", "answer": "maybe"});
        assert!(validate(Role::QualityJudge, Kind::Response, &bad).is_err());
    }

    #[test]
    fn entity_category_checked() {
        let bad = json!({"protocol_version": "v1", "entities": [{"text": "x", "category": "ORGAN"}]});
        assert!(validate(Role::EntityExtract, Kind::Response, &bad).is_err());
    }

    #[test]
    fn shipped_schemas_match_field_tables() {
        for role in Role::ALL {
            for kind in [Kind::Request, Kind::Response] {
                let schema: Value = serde_json::from_str(json_schema(role, kind)).unwrap();
                let mut required: Vec<&str> = schema["required"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|v| v.as_str().unwrap())
                    .collect();
                let mut expected: Vec<&str> = fields(role, kind).iter().map(|(n, _)| *n).collect();
                required.sort();
                expected.sort();
                assert_eq!(required, expected, "{role} {kind:?}");
                assert_eq!(schema["additionalProperties"], json!(false));
            }
        }
        let err: Value = serde_json::from_str(ERROR_SCHEMA).unwrap();
        assert_eq!(err["required"], json!(["code", "message", "retryable"]));
    }
}
