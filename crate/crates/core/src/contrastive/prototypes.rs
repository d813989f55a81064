//! Class prototypes: normalized per-class means of real embeddings.

use crate::error::{Error, Result};
use crate::tensor::{norm, Matrix};

/// Mean norms below this mark a class prototype as unusable.
pub const MIN_MEAN_NORM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// `n_classes x d`; invalid rows are zero.
    pub rows: Matrix,
    pub valid: Vec<bool>,
}

impl PrototypeSet {
    pub fn n_classes(&self) -> usize {
        self.valid.len()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Valid rows and their class labels, in class order.
    pub fn valid_rows(&self) -> (Matrix, Vec<i64>) {
        let idx: Vec<usize> = (0..self.valid.len()).filter(|&c| self.valid[c]).collect();
        let labels = idx.iter().map(|&c| c as i64).collect();
        (self.rows.select_rows(&idx), labels)
    }
}

pub fn compute_prototypes(z: &Matrix, y: &[usize], n_classes: usize) -> Result<PrototypeSet> {
    if y.len() != z.rows() {
        return Err(Error::ShapeMismatch {
            left: vec![z.rows()],
            right: vec![y.len()],
        });
    }
    let d = z.cols();
    let mut sums = Matrix::zeros(n_classes, d);
    let mut counts = vec![0usize; n_classes];
    for (row, &c) in z.iter_rows().zip(y) {
        if c >= n_classes {
            return Err(Error::LabelOutOfRange { label: c, n_classes });
        }
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut valid = vec![false; n_classes];
    for c in 0..n_classes {
        if counts[c] == 0 {
            continue;
        }
        let r = sums.row_mut(c);
        let inv = 1.0 / counts[c] as f64;
        r.iter_mut().for_each(|v| *v *= inv);
        let n = norm(r);
        if n < MIN_MEAN_NORM {
            r.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        r.iter_mut().for_each(|v| *v /= n);
        valid[c] = true;
    }
    Ok(PrototypeSet { rows: sums, valid })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_sample_per_class_is_identity() {
        let z = Matrix::new(2, 2, vec![0.6, 0.8, 0.0, -1.0]).unwrap();
        let p = compute_prototypes(&z, &[0, 1], 2).unwrap();
        assert_eq!(p.rows, z);
        assert_eq!(p.valid, vec![true, true]);
    }

    #[test]
    fn antipodal_pair_is_invalid() {
        let z = Matrix::new(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let p = compute_prototypes(&z, &[0, 0], 2).unwrap();
        assert_eq!(p.valid, vec![false, false]);
        assert_eq!(p.valid_rows().1, Vec::<i64>::new());
    }

    #[test]
    fn three_points_hand_mean() {
        // mean of e1, e2, e3 is (1,1,1)/3 -> normalized 1/sqrt(3) each
        let z = Matrix::identity(3);
        let p = compute_prototypes(&z, &[0, 0, 0], 1).unwrap();
        let s = 1.0 / 3f64.sqrt();
        for v in p.rows.row(0) {
            assert!((v - s).abs() < 1e-15);
        }
    }
}
