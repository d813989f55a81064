//! Long-tailed split construction, synthetic complements, augmentation and
//! paired batch assembly.

pub mod augment;
pub mod batch;
pub mod io;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub use augment::{augment, augment_with, hflip, AugmentParams, Policy};
pub use batch::{make_batch_pairs, Batch1Item, Batch2Item, BatchPair, BatchPairs, ViewTriple};

/// One training or test record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub is_synthetic: bool,
    /// Relevance score in `[0, 1]`; real samples carry 1.
    pub quality: f64,
    pub features: Tensor,
}

impl Sample {
    pub fn real(id: u64, label: usize, features: Tensor) -> Self {
        Self {
            id,
            label,
            is_synthetic: false,
            quality: 1.0,
            features,
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.label >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: self.label,
                n_classes,
            });
        }
        if !(0.0..=1.0).contains(&self.quality) {
            return Err(Error::InvalidConfig(format!(
                "sample {} has quality {} outside [0, 1]",
                self.id, self.quality
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sample {} has non-finite features",
                self.id
            )));
        }
        Ok(())
    }
}

/// Long-tailed profile: `n_classes` classes decaying from `n0` samples at
/// class 0 to `n0 / imbalance_factor` at the last class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtSpec {
    pub n_classes: usize,
    pub n0: usize,
    pub imbalance_factor: f64,
    pub seed: u64,
}

impl LtSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n0 == 0 {
            return Err(Error::InvalidConfig(
                "n_classes and n0 must be positive".into(),
            ));
        }
        if !(self.imbalance_factor >= 1.0) || !self.imbalance_factor.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "imbalance factor must be >= 1, got {}",
                self.imbalance_factor
            )));
        }
        Ok(())
    }
}

/// Per-class sample counts following `n0 * IF^(-i / (n - 1))`.
pub fn long_tailed_counts(spec: &LtSpec) -> Vec<usize> {
    let n = spec.n_classes;
    if n <= 1 {
        return vec![spec.n0; n];
    }
    (0..n)
        .map(|i| {
            let scaled = if i == n - 1 {
                spec.n0 as f64 / spec.imbalance_factor
            } else {
                let exponent = -(i as f64) / (n as f64 - 1.0);
                spec.n0 as f64 * spec.imbalance_factor.powf(exponent)
            };
            scaled.round() as usize
        })
        .collect()
}

/// Counts samples per class; labels must be below `n_classes`.
pub fn class_counts(samples: &[Sample], n_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; n_classes];
    for s in samples {
        *counts.get_mut(s.label).ok_or(Error::LabelOutOfRange {
            label: s.label,
            n_classes,
        })? += 1;
    }
    Ok(counts)
}

/// Draws exactly `counts[i]` samples of class `i` without replacement.
///
/// The output is class-major and keeps the input order within each class.
pub fn build_lt_split(full: &[Sample], counts: &[usize], seed: u64) -> Result<Vec<Sample>> {
    let n_classes = counts.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (idx, s) in full.iter().enumerate() {
        by_class
            .get_mut(s.label)
            .ok_or(Error::LabelOutOfRange {
                label: s.label,
                n_classes,
            })?
            .push(idx);
    }
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (class, (pool, &needed)) in by_class.iter().zip(counts).enumerate() {
        if pool.len() < needed {
            return Err(Error::InsufficientClassSamples {
                class,
                needed,
                available: pool.len(),
            });
        }
        let mut rng = rng::stream(seed, Purpose::Split, 0, 0, class as u64);
        let mut chosen: Vec<usize> = pool.choose_multiple(&mut rng, needed).copied().collect();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|i| {
            let mut s = full[i].clone();
            s.is_synthetic = false;
            s
        }));
    }
    Ok(out)
}

/// Number of synthetic samples each class needs to reach `target`.
pub fn complement_counts(real_counts: &[usize], target: usize) -> Result<Vec<usize>> {
    real_counts
        .iter()
        .enumerate()
        .map(|(class, &count)| {
            target
                .checked_sub(count)
                .ok_or(Error::TargetBelowCount {
                    class,
                    count,
                    target,
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, n0: usize, imbalance: f64) -> LtSpec {
        LtSpec {
            n_classes: n,
            n0,
            imbalance_factor: imbalance,
            seed: 0,
        }
    }

    fn pool(per_class: &[usize]) -> Vec<Sample> {
        let mut id = 0;
        let mut out = Vec::new();
        for (label, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                out.push(Sample::real(id, label, Tensor::from_vec(vec![id as f32])));
                id += 1;
            }
        }
        out
    }

    #[test]
    fn counts_endpoints() {
        let c = long_tailed_counts(&spec(10, 5000, 100.0));
        assert_eq!(c.len(), 10);
        assert_eq!(c[0], 5000);
        assert_eq!(c[9], 50);
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn counts_balanced_and_two_class() {
        assert_eq!(long_tailed_counts(&spec(10, 5000, 1.0)), vec![5000; 10]);
        assert_eq!(long_tailed_counts(&spec(2, 100, 100.0)), vec![100, 1]);
        assert_eq!(long_tailed_counts(&spec(1, 42, 100.0)), vec![42]);
    }

    #[test]
    fn counts_match_closed_form() {
        // 500 * 100^(-i/9), evaluated by hand
        let c = long_tailed_counts(&spec(10, 500, 100.0));
        assert_eq!(c, vec![500, 300, 180, 108, 65, 39, 23, 14, 8, 5]);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(spec(0, 10, 2.0).validate().is_err());
        assert!(spec(3, 10, 0.5).validate().is_err());
        assert!(spec(3, 10, f64::NAN).validate().is_err());
        assert!(spec(3, 10, 1.0).validate().is_ok());
    }

    #[test]
    fn split_identity_when_counts_equal_availability() {
        let full = pool(&[3, 2]);
        let split = build_lt_split(&full, &[3, 2], 9).unwrap();
        assert_eq!(split, full);
    }

    #[test]
    fn split_zero_count_drops_class() {
        let full = pool(&[3, 2, 4]);
        let split = build_lt_split(&full, &[2, 0, 1], 9).unwrap();
        assert_eq!(class_counts(&split, 3).unwrap(), vec![2, 0, 1]);
        assert!(split.iter().all(|s| !s.is_synthetic));
    }

    #[test]
    fn split_is_deterministic() {
        let full = pool(&[50, 50]);
        let ids = |seed| -> Vec<u64> {
            build_lt_split(&full, &[10, 5], seed)
                .unwrap()
                .iter()
                .map(|s| s.id)
                .collect()
        };
        assert_eq!(ids(3), ids(3));
        assert_ne!(ids(3), ids(4));
    }

    #[test]
    fn split_reports_short_class() {
        let full = pool(&[3, 1]);
        match build_lt_split(&full, &[3, 2], 0) {
            Err(Error::InsufficientClassSamples { class: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn complement_examples() {
        assert_eq!(complement_counts(&[5000, 50], 5000).unwrap(), vec![0, 4950]);
        assert_eq!(complement_counts(&[7, 7, 7], 7).unwrap(), vec![0, 0, 0]);
        assert_eq!(complement_counts(&[100, 10, 1], 100).unwrap(), vec![0, 90, 99]);
        match complement_counts(&[10, 20], 15) {
            Err(Error::TargetBelowCount { class: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn complement_restores_constant_total(
            real in proptest::collection::vec(0usize..500, 1..20),
            extra in 0usize..100,
        ) {
            let target = real.iter().copied().max().unwrap() + extra;
            let syn = complement_counts(&real, target).unwrap();
            for (r, s) in real.iter().zip(&syn) {
                proptest::prop_assert_eq!(r + s, target);
            }
        }

        #[test]
        fn counts_non_increasing(n in 2usize..50, n0 in 1usize..10_000, imbalance in 1.0f64..500.0) {
            let c = long_tailed_counts(&spec(n, n0, imbalance));
            proptest::prop_assert_eq!(c[0], n0);
            proptest::prop_assert!(c.windows(2).all(|w| w[0] >= w[1]));
            proptest::prop_assert_eq!(c[n - 1], (n0 as f64 / imbalance).round() as usize);
        }
    }
}
