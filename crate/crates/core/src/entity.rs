//! Clinical entities and their five-way categorization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// Entity category as produced by the radiology NER model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Abnormality,
    NonAbnormality,
    Disease,
    NonDisease,
    Anatomy,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Abnormality,
        Category::NonAbnormality,
        Category::Disease,
        Category::NonDisease,
        Category::Anatomy,
    ];

    /// The four categories that feed the non-anatomy half of an entity set.
    pub const NON_ANATOMY: [Category; 4] = [
        Category::Abnormality,
        Category::NonAbnormality,
        Category::Disease,
        Category::NonDisease,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::Abnormality => "ABNORMALITY",
            Category::NonAbnormality => "NON-ABNORMALITY",
            Category::Disease => "DISEASE",
            Category::NonDisease => "NON-DISEASE",
            Category::Anatomy => "ANATOMY",
        }
    }

    pub fn is_anatomy(self) -> bool {
        self == Category::Anatomy
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown entity category `{0}`")]
pub struct UnknownCategory(pub String);

impl FromStr for Category {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase().replace('_', "-");
        Category::ALL
            .into_iter()
            .find(|c| c.label() == upper)
            .ok_or_else(|| UnknownCategory(s.to_string()))
    }
}

impl Serialize for Category {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Lowercase and collapse runs of whitespace to a single space.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Stable 64-bit identifier derived from `(text, category)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub u64);

impl EntityId {
    pub fn of(text: &str, category: Category) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(category.label().as_bytes());
        hasher.update([0u8]);
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        EntityId(u64::from_be_bytes(word))
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for EntityId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u64::from_str_radix(s, 16).map(EntityId)
    }
}

impl Serialize for EntityId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EntityId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("entity text is empty after normalization")]
pub struct EmptyEntityText;

/// A normalized clinical term. Identity is the `(text, category)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub text: String,
    pub category: Category,
}

impl Entity {
    pub fn new(raw_text: &str, category: Category) -> Result<Self, EmptyEntityText> {
        let text = normalize(raw_text);
        if text.is_empty() {
            return Err(EmptyEntityText);
        }
        Ok(Entity {
            id: EntityId::of(&text, category),
            text,
            category,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_collapses_case_and_whitespace() {
        assert_eq!(normalize("  Pleural \t Effusion\n"), "pleural effusion");
        assert_eq!(normalize("   "), "");
    }

    #[test]
    fn identity_is_text_and_category() {
        let a = Entity::new("heart", Category::Anatomy).unwrap();
        let b = Entity::new("Heart ", Category::Anatomy).unwrap();
        let c = Entity::new("heart", Category::Disease).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.id, c.id);
    }

    #[test]
    fn category_labels_round_trip() {
        for c in Category::ALL {
            assert_eq!(c.label().parse::<Category>().unwrap(), c);
        }
        assert_eq!("non_disease".parse::<Category>().unwrap(), Category::NonDisease);
        assert!("finding".parse::<Category>().is_err());
    }

    #[test]
    fn entity_id_hex_round_trip() {
        let id = EntityId::of("edema", Category::Abnormality);
        assert_eq!(id.to_string().parse::<EntityId>().unwrap(), id);
        assert_eq!(id.to_string().len(), 16);
    }

    #[test]
    fn empty_text_rejected() {
        assert!(Entity::new(" \t", Category::Anatomy).is_err());
    }
}
