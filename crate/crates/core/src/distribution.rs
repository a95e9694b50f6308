//! Frequency-distribution diagnostics: Gini coefficient and top-k mass share.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::entity::{Category, Entity, EntityId};

/// k values reported by [`distribution_report`].
pub const REPORTED_TOP_K: [usize; 4] = [1, 10, 50, 100];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DistributionError {
    #[error("all counts are zero; distribution is undefined")]
    AllZero,
}

/// Gini coefficient `Σᵢⱼ|xᵢ−xⱼ| / (2n²μ)`, evaluated in O(n log n) from the
/// ascending sort: `Σᵢⱼ|xᵢ−xⱼ| = 2 Σᵢ (2i − n + 1)·x₍ᵢ₎` for zero-based `i`.
pub fn gini(counts: &[u64]) -> Result<f64, DistributionError> {
    let n = counts.len();
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return Err(DistributionError::AllZero);
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let mut weighted: i128 = 0;
    for (i, &x) in sorted.iter().enumerate() {
        weighted += (2 * i as i128 - n as i128 + 1) * x as i128;
    }
    // 2·weighted / (2·n²·μ) with μ = total / n
    Ok(weighted as f64 / (n as f64 * total as f64))
}

/// Fraction of the total mass held by the `k` largest counts.
pub fn top_k_share(counts: &[u64], k: usize) -> Result<f64, DistributionError> {
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return Err(DistributionError::AllZero);
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let top: u128 = sorted.iter().take(k).map(|&c| c as u128).sum();
    Ok(top as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramEntry {
    pub id: EntityId,
    pub text: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryDistribution {
    /// Entities in the histogram, including zero-count ones.
    pub entity_count: usize,
    /// Entities with a nonzero count.
    pub unique_count: usize,
    pub total: u64,
    /// `None` when the category carries no mass.
    pub gini: Option<f64>,
    pub top_k_share: BTreeMap<usize, f64>,
    /// Sorted by count descending, then entity id.
    pub histogram: Vec<HistogramEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub per_category: BTreeMap<Category, CategoryDistribution>,
    pub overall_gini: f64,
    pub overall_total: u64,
    pub overall_unique: usize,
}

impl DistributionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn max_category_gini(&self) -> Option<f64> {
        self.per_category
            .values()
            .filter_map(|c| c.gini)
            .fold(None, |acc, g| Some(acc.map_or(g, |a: f64| a.max(g))))
    }
}

fn summarize(mut entries: Vec<HistogramEntry>) -> CategoryDistribution {
    entries.sort_by(|a, b| b.count.cmp(&a.count).then(a.id.cmp(&b.id)));
    let counts: Vec<u64> = entries.iter().map(|e| e.count).collect();
    let total = counts.iter().sum();
    let gini = gini(&counts).ok();
    let top_k_share = REPORTED_TOP_K
        .iter()
        .filter_map(|&k| top_k_share(&counts, k).ok().map(|s| (k, s)))
        .collect();
    CategoryDistribution {
        entity_count: entries.len(),
        unique_count: counts.iter().filter(|&&c| c > 0).count(),
        total,
        gini,
        top_k_share,
        histogram: entries,
    }
}

/// Builds per-category and overall diagnostics from entity counts.
///
/// Zero counts are kept: an entity present in the universe but never used
/// pulls the Gini coefficient up.
pub fn distribution_report<'a, I>(counts: I) -> Result<DistributionReport, DistributionError>
where
    I: IntoIterator<Item = (&'a Entity, u64)>,
{
    let mut grouped: BTreeMap<Category, Vec<HistogramEntry>> = BTreeMap::new();
    for (entity, count) in counts {
        grouped.entry(entity.category).or_default().push(HistogramEntry {
            id: entity.id,
            text: entity.text.clone(),
            count,
        });
    }
    let all_counts: Vec<u64> = grouped.values().flat_map(|v| v.iter().map(|e| e.count)).collect();
    let overall_gini = gini(&all_counts)?;
    let overall_total = all_counts.iter().sum();
    let overall_unique = all_counts.iter().filter(|&&c| c > 0).count();
    let per_category = grouped
        .into_iter()
        .map(|(c, entries)| (c, summarize(entries)))
        .collect();
    Ok(DistributionReport {
        per_category,
        overall_gini,
        overall_total,
        overall_unique,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_gini(xs: &[u64]) -> f64 {
        let n = xs.len() as f64;
        let mu = xs.iter().sum::<u64>() as f64 / n;
        let mut acc = 0.0;
        for &a in xs {
            for &b in xs {
                acc += (a as f64 - b as f64).abs();
            }
        }
        acc / (2.0 * n * n * mu)
    }

    #[test]
    fn uniform_counts_have_zero_gini() {
        assert_eq!(gini(&[5, 5, 5, 5]).unwrap(), 0.0);
    }

    #[test]
    fn single_mass_point() {
        // 60 / (2 * 16 * 2.5)
        assert!((pairwise_gini(&[0, 0, 0, 10]) - 0.75).abs() < 1e-12);
        assert!((gini(&[0, 0, 0, 10]).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(top_k_share(&[0, 0, 0, 10], 1).unwrap(), 1.0);
    }

    #[test]
    fn all_zero_is_an_error() {
        assert_eq!(gini(&[0, 0]), Err(DistributionError::AllZero));
        assert_eq!(gini(&[]), Err(DistributionError::AllZero));
        assert_eq!(top_k_share(&[0], 1), Err(DistributionError::AllZero));
    }

    proptest! {
        #[test]
        fn matches_pairwise_formula(xs in prop::collection::vec(0u64..1000, 1..60)) {
            prop_assume!(xs.iter().any(|&x| x > 0));
            let fast = gini(&xs).unwrap();
            prop_assert!((fast - pairwise_gini(&xs)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&fast));
        }

        #[test]
        fn scale_invariant(xs in prop::collection::vec(0u64..1000, 1..60), c in 1u64..50) {
            prop_assume!(xs.iter().any(|&x| x > 0));
            let scaled: Vec<u64> = xs.iter().map(|x| x * c).collect();
            prop_assert!((gini(&xs).unwrap() - gini(&scaled).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn zero_iff_nonzero_equal(v in 1u64..100, n in 1usize..30) {
            prop_assert_eq!(gini(&vec![v; n]).unwrap(), 0.0);
        }

        #[test]
        fn top_k_monotone(xs in prop::collection::vec(0u64..1000, 1..60)) {
            prop_assume!(xs.iter().any(|&x| x > 0));
            let mut prev = 0.0;
            for k in 0..=xs.len() + 1 {
                let s = top_k_share(&xs, k).unwrap();
                prop_assert!(s >= prev);
                prev = s;
            }
            prop_assert!((prev - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn report_groups_by_category() {
        let a = Entity::new("edema", Category::Abnormality).unwrap();
        let b = Entity::new("opacity", Category::Abnormality).unwrap();
        let c = Entity::new("left lung", Category::Anatomy).unwrap();
        let report = distribution_report([(&a, 3), (&b, 1), (&c, 0)]).unwrap();
        let abn = &report.per_category[&Category::Abnormality];
        assert_eq!(abn.total, 4);
        assert_eq!(abn.histogram[0].text, "edema");
        assert_eq!(abn.top_k_share[&1], 0.75);
        let anat = &report.per_category[&Category::Anatomy];
        assert_eq!(anat.gini, None);
        assert_eq!(anat.unique_count, 0);
        assert_eq!(report.overall_unique, 2);
    }
}
