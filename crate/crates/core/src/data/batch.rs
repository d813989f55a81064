use rand::seq::SliceRandom;

use super::augment::{augment, Policy};
use super::Sample;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Three views of one sample: `v1` for the classification branch, `v2` and
/// `v3` for the contrastive branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTriple {
    pub v1: Tensor,
    pub v2: Tensor,
    pub v3: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch1Item {
    pub views: ViewTriple,
    pub label: usize,
    pub is_synthetic: bool,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch2Item {
    pub view: Tensor,
    pub label: usize,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPair {
    pub batch1: Vec<Batch1Item>,
    pub batch2: Vec<Batch2Item>,
}

impl BatchPair {
    pub fn len(&self) -> usize {
        self.batch1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch1.is_empty()
    }
}

/// Lazily materialises the batch pairs of one epoch.
#[derive(Debug)]
pub struct BatchPairs<'a> {
    split: &'a [Sample],
    first: Vec<usize>,
    second: Vec<usize>,
    bounds: Vec<(usize, usize)>,
    next: usize,
    epoch: u64,
    seed: u64,
}

/// Two independently seeded shuffles of `split`, consumed in lockstep.
///
/// Batches hold `batch_size` samples except the last, which keeps the
/// remainder; a remainder of one sample is folded into the previous batch so
/// every batch has at least two elements when `batch_size >= 2`.
pub fn make_batch_pairs(
    split: &[Sample],
    batch_size: usize,
    epoch: u64,
    seed: u64,
) -> Result<BatchPairs<'_>> {
    if split.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if batch_size == 0 || batch_size > split.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {batch_size} must be in 1..={}",
            split.len()
        )));
    }
    let mut first: Vec<usize> = (0..split.len()).collect();
    let mut second = first.clone();
    first.shuffle(&mut rng::stream(seed, Purpose::ShuffleFirst, epoch, 0, 0));
    second.shuffle(&mut rng::stream(seed, Purpose::ShuffleSecond, epoch, 0, 0));

    let mut bounds: Vec<(usize, usize)> = (0..split.len())
        .step_by(batch_size)
        .map(|start| (start, (start + batch_size).min(split.len())))
        .collect();
    if bounds.len() > 1 && batch_size > 1 {
        let (start, end) = *bounds.last().unwrap();
        if end - start == 1 {
            bounds.pop();
            bounds.last_mut().unwrap().1 = end;
        }
    }
    Ok(BatchPairs {
        split,
        first,
        second,
        bounds,
        next: 0,
        epoch,
        seed,
    })
}

impl BatchPairs<'_> {
    pub fn steps(&self) -> usize {
        self.bounds.len()
    }

    fn build(&self, step: usize) -> BatchPair {
        let (start, end) = self.bounds[step];
        let (epoch, seed, step) = (self.epoch, self.seed, step as u64);
        let batch1 = self.first[start..end]
            .iter()
            .map(|&i| {
                let s = &self.split[i];
                let view = |purpose, policy| {
                    augment(
                        &s.features,
                        policy,
                        &mut rng::stream(seed, purpose, epoch, step, s.id),
                    )
                };
                Batch1Item {
                    views: ViewTriple {
                        v1: view(Purpose::ClassifyView, Policy::Classification),
                        v2: view(Purpose::ContrastViewA, Policy::Contrastive),
                        v3: view(Purpose::ContrastViewB, Policy::Contrastive),
                    },
                    label: s.label,
                    is_synthetic: s.is_synthetic,
                    id: s.id,
                }
            })
            .collect();
        let batch2 = self.second[start..end]
            .iter()
            .map(|&i| {
                let s = &self.split[i];
                Batch2Item {
                    view: augment(
                        &s.features,
                        Policy::Classification,
                        &mut rng::stream(seed, Purpose::PairView, epoch, step, s.id),
                    ),
                    label: s.label,
                    id: s.id,
                }
            })
            .collect();
        BatchPair { batch1, batch2 }
    }
}

impl Iterator for BatchPairs<'_> {
    type Item = BatchPair;

    fn next(&mut self) -> Option<BatchPair> {
        if self.next >= self.bounds.len() {
            return None;
        }
        let pair = self.build(self.next);
        self.next += 1;
        Some(pair)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.bounds.len() - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchPairs<'_> {}
