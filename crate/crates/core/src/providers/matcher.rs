//! Dictionary matcher used by the mock NER and mock text generator.

use std::collections::HashMap;

use crate::catalog::EntityCatalog;
use crate::entity::{normalize, Entity};

/// Leftmost-longest, word-bounded exact match of catalog strings.
///
/// A string shared by two categories yields both entities.
#[derive(Debug, Clone)]
pub struct EntityMatcher {
    by_text: HashMap<String, Vec<Entity>>,
    max_len: usize,
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric()
}

impl EntityMatcher {
    pub fn new(catalog: &EntityCatalog) -> Self {
        let mut by_text: HashMap<String, Vec<Entity>> = HashMap::new();
        let mut max_len = 0;
        for e in catalog.entities() {
            max_len = max_len.max(e.text.len());
            by_text.entry(e.text.clone()).or_default().push(e.clone());
        }
        EntityMatcher { by_text, max_len }
    }

    pub fn scan(&self, text: &str) -> Vec<Entity> {
        let text = normalize(text);
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let start = chars[i].0;
            let at_boundary = i == 0 || !is_word(chars[i - 1].1) || !is_word(chars[i].1);
            let mut best: Option<usize> = None;
            if at_boundary {
                for j in i + 1..=chars.len() {
                    let end = chars.get(j).map_or(text.len(), |c| c.0);
                    if end - start > self.max_len {
                        break;
                    }
                    let end_ok = j == chars.len() || !is_word(chars[j].1) || !is_word(chars[j - 1].1);
                    if end_ok && self.by_text.contains_key(&text[start..end]) {
                        best = Some(j);
                    }
                }
            }
            match best {
                Some(j) => {
                    let end = chars.get(j).map_or(text.len(), |c| c.0);
                    out.extend(self.by_text[&text[start..end]].iter().cloned());
                    i = j;
                }
                None => i += 1,
            }
        }
        out
    }
}
