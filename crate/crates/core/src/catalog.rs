//! The entity universe: loading, validation, serialization and census.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entity::{Category, Entity, EntityId};

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("failed to read catalog: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse serialized catalog: {0}")]
    Json(#[from] serde_json::Error),
}

/// Immutable set of entities with a per-category index.
///
/// Entity order is the order of first appearance in the source file and is
/// preserved through serialization, which keeps seeded sampling reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityCatalog {
    entities: Vec<Entity>,
    by_id: HashMap<EntityId, usize>,
    per_category: BTreeMap<Category, Vec<EntityId>>,
}

/// Result of [`load_catalog`]: the catalog plus the number of collapsed duplicates.
#[derive(Debug, Clone)]
pub struct LoadedCatalog {
    pub catalog: EntityCatalog,
    pub duplicates: usize,
}

#[derive(Serialize, Deserialize)]
struct SerializedCatalog {
    entities: Vec<Entity>,
}

impl EntityCatalog {
    /// Builds a catalog, dropping repeated `(text, category)` pairs.
    /// Returns the catalog and the number of duplicates dropped.
    pub fn from_entities<I>(entities: I) -> Result<(Self, usize), CatalogError>
    where
        I: IntoIterator<Item = Entity>,
    {
        let mut catalog = EntityCatalog {
            entities: Vec::new(),
            by_id: HashMap::new(),
            per_category: Category::ALL.iter().map(|c| (*c, Vec::new())).collect(),
        };
        let mut duplicates = 0;
        for entity in entities {
            if catalog.by_id.contains_key(&entity.id) {
                duplicates += 1;
                continue;
            }
            catalog.by_id.insert(entity.id, catalog.entities.len());
            catalog
                .per_category
                .get_mut(&entity.category)
                .expect("all categories indexed")
                .push(entity.id);
            catalog.entities.push(entity);
        }
        if catalog.entities.is_empty() {
            return Err(CatalogError::EmptyCatalog);
        }
        Ok((catalog, duplicates))
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn get(&self, id: EntityId) -> Option<&Entity> {
        self.by_id.get(&id).map(|&i| &self.entities[i])
    }

    pub fn ids_in(&self, category: Category) -> &[EntityId] {
        self.per_category.get(&category).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Number of entities per category; the values sum to [`len`](Self::len).
    pub fn category_counts(&self) -> BTreeMap<Category, usize> {
        self.per_category.iter().map(|(c, ids)| (*c, ids.len())).collect()
    }

    /// Line-delimited `text<TAB>category` form accepted by [`load_catalog`].
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entities {
            out.push_str(&e.text);
            out.push('\t');
            out.push_str(e.category.label());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SerializedCatalog {
            entities: self.entities.clone(),
        })
        .expect("catalog serializes")
    }

    /// Parses either the TSV or the JSON form.
    pub fn parse(source: &str) -> Result<LoadedCatalog, CatalogError> {
        if source.trim_start().starts_with('{') {
            return parse_json(source);
        }
        let mut entities = Vec::new();
        for (idx, raw) in source.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let (text, label) = raw.rsplit_once('\t').ok_or_else(|| CatalogError::MalformedRecord {
                line,
                reason: "expected `text<TAB>category`".into(),
            })?;
            let category: Category =
                label
                    .parse()
                    .map_err(|e: crate::entity::UnknownCategory| CatalogError::MalformedRecord {
                        line,
                        reason: e.to_string(),
                    })?;
            let entity = Entity::new(text, category).map_err(|e| CatalogError::MalformedRecord {
                line,
                reason: e.to_string(),
            })?;
            entities.push(entity);
        }
        let (catalog, duplicates) = EntityCatalog::from_entities(entities)?;
        Ok(LoadedCatalog { catalog, duplicates })
    }
}

fn parse_json(source: &str) -> Result<LoadedCatalog, CatalogError> {
    let parsed: SerializedCatalog = serde_json::from_str(source)?;
    let mut entities = Vec::with_capacity(parsed.entities.len());
    for (idx, e) in parsed.entities.into_iter().enumerate() {
        let rebuilt = Entity::new(&e.text, e.category).map_err(|err| CatalogError::MalformedRecord {
            line: idx + 1,
            reason: err.to_string(),
        })?;
        if rebuilt.id != e.id {
            return Err(CatalogError::MalformedRecord {
                line: idx + 1,
                reason: format!("id {} does not match (text, category)", e.id),
            });
        }
        entities.push(rebuilt);
    }
    let (catalog, duplicates) = EntityCatalog::from_entities(entities)?;
    Ok(LoadedCatalog { catalog, duplicates })
}

/// Loads an entity file (`text<TAB>category` per line, or a serialized JSON catalog).
pub fn load_catalog(path: impl AsRef<Path>) -> Result<LoadedCatalog, CatalogError> {
    let source = fs::read_to_string(path)?;
    EntityCatalog::parse(&source)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_variants_collapse() {
        let loaded = EntityCatalog::parse("Pleural Effusion\tABNORMALITY\npleural effusion\tABNORMALITY\n").unwrap();
        assert_eq!(loaded.catalog.len(), 1);
        assert_eq!(loaded.duplicates, 1);
    }

    #[test]
    fn same_text_different_category_is_two_entities() {
        let loaded = EntityCatalog::parse("heart\tANATOMY\nheart\tDISEASE\n").unwrap();
        assert_eq!(loaded.catalog.len(), 2);
        assert_eq!(loaded.duplicates, 0);
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(EntityCatalog::parse(""), Err(CatalogError::EmptyCatalog)));
        assert!(matches!(
            EntityCatalog::parse("\n# comment\n"),
            Err(CatalogError::EmptyCatalog)
        ));
    }

    #[test]
    fn bad_label_reports_line() {
        let err = EntityCatalog::parse("edema\tABNORMALITY\nlung\tORGAN\n").unwrap_err();
        assert!(matches!(err, CatalogError::MalformedRecord { line: 2, .. }));
        let err = EntityCatalog::parse("no tab here\n").unwrap_err();
        assert!(matches!(err, CatalogError::MalformedRecord { line: 1, .. }));
        let err = EntityCatalog::parse("  \tANATOMY\n").unwrap_err();
        assert!(matches!(err, CatalogError::MalformedRecord { line: 1, .. }));
    }

    #[test]
    fn two_entities_one_category() {
        let loaded = EntityCatalog::parse("edema\tABNORMALITY\nopacity\tABNORMALITY\n").unwrap();
        let counts = loaded.catalog.category_counts();
        assert_eq!(counts[&Category::Abnormality], 2);
        for c in Category::ALL.into_iter().filter(|c| *c != Category::Abnormality) {
            assert_eq!(counts[&c], 0);
        }
    }

    #[test]
    fn json_rejects_forged_id() {
        let cat = EntityCatalog::parse("edema\tABNORMALITY\n").unwrap().catalog;
        let forged = cat
            .to_json()
            .replace(&cat.entities()[0].id.to_string(), "0000000000000001");
        assert!(matches!(
            EntityCatalog::parse(&forged),
            Err(CatalogError::MalformedRecord { .. })
        ));
    }
}
