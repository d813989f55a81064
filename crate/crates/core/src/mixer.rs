//! MixUp, CutMix and the mixed cross-entropy.
//!
//! Soft labels are kept as `(y_i, y_j, lam)` triples: weight `lam` on `y_i`
//! and `1 - lam` on `y_j`.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

/// Draws a mixing ratio from `Beta(alpha, alpha)`.
pub fn sample_mix_ratio<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidConfig(format!("Beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftTarget {
    pub y_i: usize,
    pub y_j: usize,
    pub lam: f64,
}

impl SoftTarget {
    pub fn hard(y: usize) -> Self {
        Self {
            y_i: y,
            y_j: y,
            lam: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedExample {
    pub x_tilde: Tensor,
    pub y_i: usize,
    pub y_j: usize,
    pub lam_label: f64,
}

impl MixedExample {
    pub fn target(&self) -> SoftTarget {
        SoftTarget {
            y_i: self.y_i,
            y_j: self.y_j,
            lam: self.lam_label,
        }
    }
}

fn check_shapes(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mixup(x_i: &Tensor, y_i: usize, x_j: &Tensor, y_j: usize, lambda: f64) -> Result<MixedExample> {
    check_shapes(x_i, x_j)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("mix ratio {lambda} outside [0, 1]")));
    }
    let lam = lambda as f32;
    let data = x_i
        .data()
        .iter()
        .zip(x_j.data())
        .map(|(&a, &b)| lam * a + (1.0 - lam) * b)
        .collect();
    Ok(MixedExample {
        x_tilde: Tensor::new(x_i.shape().to_vec(), data)?,
        y_i,
        y_j,
        lam_label: lambda,
    })
}

/// A CutMix rectangle: the sampled centre and extent plus the pixel range
/// `[x0, x1) x [y0, y1)` left after clipping to the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutBox {
    pub r_x: f64,
    pub r_y: f64,
    pub r_w: f64,
    pub r_h: f64,
    pub width: usize,
    pub height: usize,
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl CutBox {
    /// Box of extent `(W sqrt(1-lam), H sqrt(1-lam))` centred at `(r_x, r_y)`.
    pub fn centered(width: usize, height: usize, lambda: f64, r_x: f64, r_y: f64) -> Self {
        let cut = (1.0 - lambda).max(0.0).sqrt();
        Self::from_extent(width, height, r_x, r_y, width as f64 * cut, height as f64 * cut)
    }

    fn from_extent(width: usize, height: usize, r_x: f64, r_y: f64, r_w: f64, r_h: f64) -> Self {
        let clip = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
        Self {
            r_x,
            r_y,
            r_w,
            r_h,
            width,
            height,
            x0: clip(r_x - r_w / 2.0, width),
            x1: clip(r_x + r_w / 2.0, width),
            y0: clip(r_y - r_h / 2.0, height),
            y1: clip(r_y + r_h / 2.0, height),
        }
    }

    /// Full-height band of width `W (1 - lam)` for flat vectors, where a
    /// `H = 1` rectangle would round away.
    pub fn span<R: Rng + ?Sized>(length: usize, lambda: f64, rng: &mut R) -> Self {
        let r_x = rng.random_range(0.0..length as f64);
        let r_w = length as f64 * (1.0 - lambda).max(0.0);
        let mut b = Self::from_extent(length, 1, r_x, 0.5, r_w, 1.0);
        b.y0 = 0;
        b.y1 = 1;
        b
    }

    pub fn clipped_area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// Fraction of the image covered after clipping.
    pub fn area_ratio(&self) -> f64 {
        self.clipped_area() as f64 / (self.width * self.height) as f64
    }

    /// Covered fraction before clipping.
    pub fn unclipped_area_ratio(&self) -> f64 {
        self.r_w * self.r_h / (self.width * self.height) as f64
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

/// Samples a box with uniform centre in the image.
pub fn cutmix_box<R: Rng + ?Sized>(width: usize, height: usize, lambda: f64, rng: &mut R) -> CutBox {
    let r_x = rng.random_range(0.0..width as f64);
    let r_y = rng.random_range(0.0..height as f64);
    CutBox::centered(width, height, lambda, r_x, r_y)
}

/// Spatial grid `(channels, height, width)` a box applies to.
fn grid(x: &Tensor) -> (usize, usize, usize) {
    x.image_dims().unwrap_or((1, 1, x.len()))
}

/// Pastes the box region of `x_j` into `x_i`. The label ratio is the
/// realised uncovered fraction, so it stays exact under clipping.
pub fn cutmix(x_i: &Tensor, y_i: usize, x_j: &Tensor, y_j: usize, cut: &CutBox) -> Result<MixedExample> {
    check_shapes(x_i, x_j)?;
    let (c, h, w) = grid(x_i);
    if (cut.width, cut.height) != (w, h) {
        return Err(Error::ShapeMismatch {
            left: vec![h, w],
            right: vec![cut.height, cut.width],
        });
    }
    let mut out = x_i.clone();
    let src = x_j.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in cut.y0..cut.y1 {
            let row = ch * h * w + y * w;
            dst[row + cut.x0..row + cut.x1].copy_from_slice(&src[row + cut.x0..row + cut.x1]);
        }
    }
    Ok(MixedExample {
        x_tilde: out,
        y_i,
        y_j,
        lam_label: {
            let total = cut.width * cut.height;
            (total - cut.clipped_area()) as f64 / total as f64
        },
    })
}

/// Draws the box appropriate for `x`: a rectangle for images, a band for
/// flat vectors.
pub fn sample_box_for<R: Rng + ?Sized>(x: &Tensor, lambda: f64, rng: &mut R) -> CutBox {
    match x.image_dims() {
        Some((_, h, w)) => cutmix_box(w, h, lambda, rng),
        None => CutBox::span(x.len(), lambda, rng),
    }
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `lam * CE(logits, y_i) + (1 - lam) * CE(logits, y_j)`.
pub fn mixed_ce_loss(logits: &[f64], target: SoftTarget) -> f64 {
    let lse = log_sum_exp(logits);
    let ce = |y: usize| lse - logits[y];
    let loss = target.lam * ce(target.y_i) + (1.0 - target.lam) * ce(target.y_j);
    loss.max(0.0)
}

/// Batch mean of [`mixed_ce_loss`] and its gradient with respect to the
/// logits: `(softmax - soft_target) / B` per row.
pub fn batch_mixed_ce(logits: &Matrix, targets: &[SoftTarget]) -> Result<(f64, Matrix)> {
    if logits.rows() != targets.len() || logits.rows() == 0 {
        return Err(Error::ShapeMismatch {
            left: vec![logits.rows(), logits.cols()],
            right: vec![targets.len()],
        });
    }
    let b = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, t) in targets.iter().enumerate() {
        let row = logits.row(r);
        if t.y_i >= row.len() || t.y_j >= row.len() {
            return Err(Error::LabelOutOfRange {
                label: t.y_i.max(t.y_j),
                n_classes: row.len(),
            });
        }
        total += mixed_ce_loss(row, *t);
        let lse = log_sum_exp(row);
        let g = grad.row_mut(r);
        for (gc, &l) in g.iter_mut().zip(row) {
            *gc = (l - lse).exp() / b;
        }
        g[t.y_i] -= t.lam / b;
        g[t.y_j] -= (1.0 - t.lam) / b;
    }
    Ok((total / b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn img(fill: impl Fn(usize) -> f32) -> Tensor {
        Tensor::new(vec![2, 4, 5], (0..40).map(fill).collect()).unwrap()
    }

    #[test]
    fn beta_one_is_uniform() {
        let mut rng = stream(0, Purpose::MixupRatio, 0, 0, 0);
        let draws: Vec<f64> = (0..10_000).map(|_| sample_mix_ratio(1.0, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        assert!((var - 1.0 / 12.0).abs() < 0.01, "var {var}");
        assert!(draws.iter().all(|d| (0.0..=1.0).contains(d)));
        assert!(sample_mix_ratio(0.0, &mut rng).is_err());
    }

    #[test]
    fn mixup_endpoints_and_convexity() {
        let a = img(|i| i as f32);
        let b = img(|i| -(i as f32));
        assert_eq!(mixup(&a, 0, &b, 1, 1.0).unwrap().x_tilde, a);
        let m0 = mixup(&a, 0, &b, 1, 0.0).unwrap();
        assert_eq!(m0.x_tilde, b);
        assert_eq!(m0.lam_label, 0.0);
        let same = mixup(&a, 0, &a, 0, 0.3).unwrap();
        for (x, y) in same.x_tilde.data().iter().zip(a.data()) {
            assert!((x - y).abs() <= 1e-5 * y.abs().max(1.0));
        }
        assert!(mixup(&a, 0, &Tensor::from_vec(vec![1.0]), 1, 0.5).is_err());
    }

    #[test]
    fn mixup_swap_symmetry() {
        let a = img(|i| (i as f32).sin());
        let b = img(|i| (i as f32).cos());
        let m = mixup(&a, 3, &b, 4, 0.25).unwrap();
        let s = mixup(&b, 4, &a, 3, 0.75).unwrap();
        for (x, y) in m.x_tilde.data().iter().zip(s.x_tilde.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!((m.y_i, m.y_j), (s.y_j, s.y_i));
        assert!((m.lam_label - (1.0 - s.lam_label)).abs() < 1e-12);
    }

    #[test]
    fn box_examples() {
        let mut rng = stream(1, Purpose::CutmixBox, 0, 0, 0);
        assert_eq!(cutmix_box(32, 32, 1.0, &mut rng).clipped_area(), 0);
        let full = CutBox::centered(32, 32, 0.0, 16.0, 16.0);
        assert_eq!(full.area_ratio(), 1.0);
        let quarter = CutBox::centered(32, 32, 0.75, 16.0, 16.0);
        assert_eq!((quarter.r_w, quarter.r_h), (16.0, 16.0));
        assert_eq!(quarter.unclipped_area_ratio(), 0.25);
        assert_eq!(quarter.area_ratio(), 0.25);
    }

    #[test]
    fn cutmix_endpoints() {
        let a = img(|i| i as f32);
        let b = img(|i| 100.0 + i as f32);
        let none = CutBox::centered(5, 4, 1.0, 2.0, 2.0);
        let m = cutmix(&a, 0, &b, 1, &none).unwrap();
        assert_eq!((m.x_tilde.clone(), m.lam_label), (a.clone(), 1.0));
        let all = CutBox::centered(5, 4, 0.0, 2.5, 2.0);
        let m = cutmix(&a, 0, &b, 1, &all).unwrap();
        assert_eq!((m.x_tilde, m.lam_label), (b, 0.0));
        let mut rng = stream(2, Purpose::CutmixBox, 0, 0, 0);
        let any = cutmix_box(5, 4, 0.4, &mut rng);
        assert_eq!(cutmix(&a, 0, &a, 0, &any).unwrap().x_tilde, a);
    }

    #[test]
    fn cutmix_region_comes_from_second_image() {
        let a = img(|_| 0.0);
        let b = img(|_| 1.0);
        let cut = CutBox::centered(5, 4, 0.5, 1.0, 1.0);
        let m = cutmix(&a, 0, &b, 1, &cut).unwrap();
        for ch in 0..2 {
            for y in 0..4 {
                for x in 0..5 {
                    let v = m.x_tilde.data()[ch * 20 + y * 5 + x];
                    assert_eq!(v == 1.0, cut.contains(x, y));
                }
            }
        }
        let ones = m.x_tilde.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!((40 - ones) as f64 / 40.0, m.lam_label);
    }

    #[test]
    fn flat_band_realises_ratio() {
        let a = Tensor::from_vec(vec![0.0; 16]);
        let b = Tensor::from_vec(vec![1.0; 16]);
        let mut rng = stream(4, Purpose::CutmixBox, 0, 0, 0);
        let cut = sample_box_for(&a, 0.5, &mut rng);
        let m = cutmix(&a, 0, &b, 1, &cut).unwrap();
        let ones = m.x_tilde.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!((16 - ones) as f64 / 16.0, m.lam_label);
    }

    #[test]
    fn mixed_ce_examples() {
        let logits = [0.3, -1.2, 2.0];
        let plain = mixed_ce_loss(&logits, SoftTarget::hard(2));
        let expected = log_sum_exp(&logits) - 2.0;
        assert!((plain - expected).abs() < 1e-12);
        for lam in [0.0, 0.3, 1.0] {
            let l = mixed_ce_loss(&[0.7; 4], SoftTarget { y_i: 0, y_j: 3, lam });
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
        // 0.5 ln(1 + e^-2) + 0.5 ln(1 + e^2)
        let l = mixed_ce_loss(&[2.0, 0.0], SoftTarget { y_i: 0, y_j: 1, lam: 0.5 });
        let hand = 0.5 * (1.0 + (-2f64).exp()).ln() + 0.5 * (1.0 + 2f64.exp()).ln();
        assert!((l - hand).abs() < 1e-12);
        assert!((l - 1.1269).abs() < 1e-4);
    }

    proptest::proptest! {
        #[test]
        fn cutmix_ratio_identity(seed in 0u64..500, lam in 0.0f64..=1.0, w in 1usize..40, h in 1usize..40) {
            let mut rng = stream(seed, Purpose::CutmixBox, 0, 0, 0);
            let cut = cutmix_box(w, h, lam, &mut rng);
            let a = Tensor::zeros(vec![1, h, w]);
            let b = Tensor::new(vec![1, h, w], vec![1.0; h * w]).unwrap();
            let m = cutmix(&a, 0, &b, 1, &cut).unwrap();
            let ones = m.x_tilde.data().iter().filter(|&&v| v == 1.0).count();
            proptest::prop_assert_eq!((w * h - ones) as f64 / (w * h) as f64, m.lam_label);
            proptest::prop_assert!((0.0..=1.0).contains(&m.lam_label));
        }

        #[test]
        fn mixed_ce_linear_in_lambda(l0 in -5.0f64..5.0, l1 in -5.0f64..5.0, l2 in -5.0f64..5.0, lam in 0.0f64..=1.0) {
            let logits = [l0, l1, l2];
            let at = |lam| mixed_ce_loss(&logits, SoftTarget { y_i: 0, y_j: 2, lam });
            let interp = lam * at(1.0) + (1.0 - lam) * at(0.0);
            proptest::prop_assert!((at(lam) - interp).abs() < 1e-9);
        }
    }
}
