//! Nearest-neighbour label correction.

use std::collections::{BinaryHeap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Plurality label of the `min(k, |ref|)` nearest reference rows, or `None`
/// when the top count is shared. Equal distances go to the lower index.
pub fn knn_correct(z_syn: &Matrix, z_ref: &Matrix, y_ref: &[i64], k: usize) -> Result<Vec<Option<i64>>> {
    if z_ref.rows() == 0 {
        return Err(Error::EmptyReference);
    }
    if y_ref.len() != z_ref.rows() {
        return Err(Error::ShapeMismatch {
            left: vec![z_ref.rows()],
            right: vec![y_ref.len()],
        });
    }
    if z_syn.rows() > 0 && z_syn.cols() != z_ref.cols() {
        return Err(Error::ShapeMismatch {
            left: vec![z_syn.rows(), z_syn.cols()],
            right: vec![z_ref.rows(), z_ref.cols()],
        });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let keep = k.min(z_ref.rows());
    let mut heap = BinaryHeap::with_capacity(keep + 1);
    let mut out = Vec::with_capacity(z_syn.rows());
    for q in z_syn.iter_rows() {
        heap.clear();
        for (index, r) in z_ref.iter_rows().enumerate() {
            let c = Candidate { dist: sq_dist(q, r), index };
            if heap.len() < keep {
                heap.push(c);
            } else if c < *heap.peek().expect("non-empty") {
                heap.pop();
                heap.push(c);
            }
        }
        let labels = heap.iter().map(|c| y_ref[c.index]);
        out.push(majority(labels));
    }
    Ok(out)
}

/// Plurality winner; a shared top count yields `None`.
pub fn majority(labels: impl IntoIterator<Item = i64>) -> Option<i64> {
    let mut votes: HashMap<i64, usize> = HashMap::new();
    for l in labels {
        *votes.entry(l).or_default() += 1;
    }
    let top = *votes.values().max()?;
    let mut winners = votes.iter().filter(|(_, &c)| c == top);
    let first = winners.next().map(|(&l, _)| l);
    if winners.next().is_some() {
        None
    } else {
        first
    }
}

/// Outcome of relabelling a batch of synthetic samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectionResult {
    /// One label per sample, shared by both of its views.
    pub y_new: Vec<i64>,
    pub noise_count: usize,
    /// Next free noise id (always negative).
    pub next_noise_id: i64,
}

/// Keeps the original label only when both views agree with it; otherwise the
/// sample gets a fresh negative label.
pub fn relabel(y_org: &[i64], y_view2: &[Option<i64>], y_view3: &[Option<i64>], next_noise_id: i64) -> Result<CorrectionResult> {
    if y_org.len() != y_view2.len() || y_org.len() != y_view3.len() {
        return Err(Error::ShapeMismatch {
            left: vec![y_org.len()],
            right: vec![y_view2.len(), y_view3.len()],
        });
    }
    let mut next = next_noise_id.min(-1);
    let mut noise_count = 0;
    let y_new = y_org
        .iter()
        .zip(y_view2.iter().zip(y_view3))
        .map(|(&y, (&a, &b))| {
            if a == Some(y) && b == Some(y) {
                y
            } else {
                noise_count += 1;
                let id = next;
                next -= 1;
                id
            }
        })
        .collect();
    Ok(CorrectionResult {
        y_new,
        noise_count,
        next_noise_id: next,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_reference_any_k() {
        let r = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let q = Matrix::new(2, 2, vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        for k in [1, 3, 10] {
            assert_eq!(knn_correct(&q, &r, &[7], k).unwrap(), vec![Some(7), Some(7)]);
        }
    }

    #[test]
    fn exact_copy_k1() {
        let r = Matrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let q = Matrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(knn_correct(&q, &r, &[0, 1, 2], 1).unwrap(), vec![Some(1)]);
    }

    #[test]
    fn tied_vote_is_none() {
        let r = Matrix::new(2, 1, vec![1.0, -1.0]).unwrap();
        let q = Matrix::new(1, 1, vec![0.0]).unwrap();
        assert_eq!(knn_correct(&q, &r, &[0, 1], 2).unwrap(), vec![None]);
    }

    #[test]
    fn empty_reference_errors() {
        let r = Matrix::zeros(0, 2);
        let q = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(knn_correct(&q, &r, &[], 5), Err(Error::EmptyReference)));
    }

    #[test]
    fn relabel_branches() {
        let r = relabel(&[3, 3, 3], &[Some(3), Some(3), None], &[Some(3), Some(5), Some(3)], -1).unwrap();
        assert_eq!(r.y_new, vec![3, -1, -2]);
        assert_eq!(r.noise_count, 2);
        assert_eq!(r.next_noise_id, -3);
    }
}
