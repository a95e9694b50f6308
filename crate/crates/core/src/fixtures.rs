//! Synthetic catalogs and count vectors for tests, benchmarks and dry runs.

use crate::catalog::EntityCatalog;
use crate::entity::{Category, Entity};

/// Unique entities per category in the reference corpus, in [`Category::ALL`] order.
pub const REFERENCE_CENSUS: [usize; 5] = [55_047, 36_365, 23_017, 22_103, 40_517];

/// Census divided by `divisor`, rounded, at least one per category.
pub fn scaled_census(divisor: usize) -> [usize; 5] {
    REFERENCE_CENSUS.map(|n| ((n as f64 / divisor as f64).round() as usize).max(1))
}

fn stem(category: Category) -> &'static str {
    match category {
        Category::Abnormality => "abnormality",
        Category::NonAbnormality => "nonabnormality",
        Category::Disease => "disease",
        Category::NonDisease => "nondisease",
        Category::Anatomy => "anatomy",
    }
}

/// Catalog with `sizes[i]` entities named `<category> entity <n>` per category.
/// Names never contain one another at word boundaries, so the mock matcher
/// recognizes each exactly.
pub fn synthetic_catalog(sizes: [usize; 5]) -> EntityCatalog {
    let entities = Category::ALL.iter().zip(sizes).flat_map(|(cat, n)| {
        (0..n).map(move |i| Entity::new(&format!("{} entity {i:06}", stem(*cat)), *cat).expect("non-empty"))
    });
    EntityCatalog::from_entities(entities).expect("fixture is valid").0
}

/// Integer counts over `n` ranks following `1/r^s`, scaled to sum to `total`.
pub fn zipf_counts(n: usize, s: f64, total: u64) -> Vec<u64> {
    let weights: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let z: f64 = weights.iter().sum();
    let mut counts: Vec<u64> = weights.iter().map(|w| (w / z * total as f64).floor() as u64).collect();
    let mut short = total - counts.iter().sum::<u64>();
    for c in counts.iter_mut() {
        if short == 0 {
            break;
        }
        *c += 1;
        short -= 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::EntityMatcher;

    #[test]
    fn census_sums() {
        assert_eq!(REFERENCE_CENSUS.iter().sum::<usize>(), 177_049);
        assert_eq!(scaled_census(100), [550, 364, 230, 221, 405]);
    }

    #[test]
    fn catalog_names_scan_unambiguously() {
        let cat = synthetic_catalog([3, 3, 3, 3, 3]);
        assert_eq!(cat.len(), 15);
        let matcher = EntityMatcher::new(&cat);
        let found = matcher.scan("Observed: nonabnormality entity 000001, abnormality entity 000002.");
        let names: Vec<_> = found.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(names, ["nonabnormality entity 000001", "abnormality entity 000002"]);
    }

    #[test]
    fn zipf_mass_is_exact() {
        let c = zipf_counts(1000, 1.1, 24_000);
        assert_eq!(c.iter().sum::<u64>(), 24_000);
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
    }
}
