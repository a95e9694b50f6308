//! Six-query image quality judgment and the removal policies applied to it.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::providers::{ProviderError, QualityJudge};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QualityQuery {
    pub name: &'static str,
    pub text: &'static str,
}

/// The six quality queries, in answer order. Each is sent with the image attached.
pub const QUALITY_QUERIES: [QualityQuery; 6] = [
    QualityQuery {
        name: "non_cxr",
        text: "Please check if the given image is a chest X-ray scan. If it is a chest X-ray, return 'YES'. Otherwise, return 'NO'.",
    },
    QualityQuery {
        name: "non_human",
        text: "Please verify if the given image is a human chest X-ray scan. If it is a chest X-ray, return 'YES'. Otherwise, return 'NO'.",
    },
    QualityQuery {
        name: "wrong_view",
        text: "Please check if the given image is a frontal chest X-ray view. If it is a frontal view, return 'YES'. If it is a lateral view or any other view, return 'NO'.",
    },
    QualityQuery {
        name: "quality",
        text: "Please analyze the provided chest X-ray (CXR) image and respond with 'NO' if the image quality is poor, such as being blurry, containing artifacts, or having poor contrast. Respond with 'YES' if the image quality is acceptable.",
    },
    QualityQuery {
        name: "artifacts",
        text: "Please analyze the following chest X-ray image. Respond with 'YES' if the image is clear, correctly oriented, and free of artifacts or imperfections that could affect its diagnostic quality. Respond with 'NO' if the image is blurry, incorrectly oriented, contains artifacts, or has imperfections that make it unsuitable for further analysis.",
    },
    QualityQuery {
        name: "fidelity",
        text: "Please check if the given image is a high-fidelity human chest X-ray scan. If it is a high-fidelity chest X-ray, return 'YES'. Otherwise, return 'NO'.",
    },
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("answer `{0}` is neither YES nor NO")]
pub struct NonBooleanAnswer(pub String);

/// Case-insensitive match of the leading token against YES/NO.
pub fn parse_answer(raw: &str) -> Result<bool, NonBooleanAnswer> {
    let token: String = raw
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect();
    match token.to_ascii_uppercase().as_str() {
        "YES" => Ok(true),
        "NO" => Ok(false),
        _ => Err(NonBooleanAnswer(raw.to_string())),
    }
}

/// Decides from the six answers (YES = true) whether an image is removed.
pub trait RemovalPolicy: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn removes(&self, answers: &[bool; 6]) -> bool;
}

/// Remove when at least `min_no` answers are NO. `6` is ALL_NO, `1` is ANY_NO.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoQuorum {
    pub min_no: usize,
}

impl RemovalPolicy for NoQuorum {
    fn name(&self) -> String {
        match self.min_no {
            6 => "all_no".into(),
            1 => "any_no".into(),
            q => format!("quorum:{q}"),
        }
    }

    fn removes(&self, answers: &[bool; 6]) -> bool {
        answers.iter().filter(|&&a| !a).count() >= self.min_no
    }
}

pub fn all_no() -> Arc<dyn RemovalPolicy> {
    Arc::new(NoQuorum { min_no: 6 })
}

/// Acceptance requires all six YES, i.e. removal on any NO.
pub fn all_yes_acceptance() -> Arc<dyn RemovalPolicy> {
    Arc::new(NoQuorum { min_no: 1 })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown removal policy `{0}` (expected all_no, any_no, all_yes or quorum:1..6)")]
pub struct UnknownPolicy(pub String);

/// Resolves a policy by its configuration name.
pub fn policy_by_name(name: &str) -> Result<Arc<dyn RemovalPolicy>, UnknownPolicy> {
    let lowered = name.trim().to_ascii_lowercase();
    let min_no = match lowered.as_str() {
        "all_no" => 6,
        "any_no" | "all_yes" => 1,
        other => other
            .strip_prefix("quorum:")
            .and_then(|q| q.parse::<usize>().ok())
            .filter(|q| (1..=6).contains(q))
            .ok_or_else(|| UnknownPolicy(name.to_string()))?,
    };
    Ok(Arc::new(NoQuorum { min_no }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationVerdict {
    /// YES = true, in [`QUALITY_QUERIES`] order.
    pub answers: [bool; 6],
    pub policy: String,
    /// True when the active policy keeps the image.
    pub passes: bool,
}

impl CurationVerdict {
    pub fn new(answers: [bool; 6], policy: &dyn RemovalPolicy) -> Self {
        CurationVerdict {
            answers,
            policy: policy.name(),
            passes: !policy.removes(&answers),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JudgeError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("query {query}: {source}")]
    NonBooleanAnswer {
        query: &'static str,
        source: NonBooleanAnswer,
    },
}

/// Asks the six queries independently and applies `policy`.
pub fn judge_image(
    image: &[u8],
    judge: &dyn QualityJudge,
    policy: &dyn RemovalPolicy,
) -> Result<CurationVerdict, JudgeError> {
    let mut answers = [false; 6];
    for (slot, query) in answers.iter_mut().zip(QUALITY_QUERIES.iter()) {
        let raw = judge.answer(image, query.text)?;
        *slot = parse_answer(&raw).map_err(|source| JudgeError::NonBooleanAnswer {
            query: query.name,
            source,
        })?;
    }
    Ok(CurationVerdict::new(answers, policy))
}
