//! Stochastic view generation.
//!
//! Image-shaped tensors `(C, H, W)` get spatial transforms. Flat feature
//! vectors have no spatial axes, so they get additive jitter, a contiguous
//! erase span and a global gain instead.

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Error;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Identity,
    /// Flip + pad-and-crop.
    Classification,
    /// Flip + pad-and-crop + cutout erase + per-channel jitter.
    Contrastive,
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Policy::Identity),
            "classification" => Ok(Policy::Classification),
            "contrastive" => Ok(Policy::Contrastive),
            other => Err(Error::UnknownPolicy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub flip_prob: f64,
    /// Pad width as a fraction of the image width (at least one pixel).
    pub pad_frac: f64,
    /// Cutout square side as a fraction of `min(H, W)`.
    pub cutout_frac: f64,
    pub gain_range: (f32, f32),
    pub shift_range: (f32, f32),
    /// Flat vectors only: std of additive Gaussian jitter.
    pub jitter_std: f32,
    /// Flat vectors only: erased span as a fraction of the length.
    pub erase_frac: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            pad_frac: 0.125,
            cutout_frac: 0.25,
            gain_range: (0.8, 1.2),
            shift_range: (-0.1, 0.1),
            jitter_std: 0.1,
            erase_frac: 0.0,
        }
    }
}

pub fn augment<R: Rng + ?Sized>(x: &Tensor, policy: Policy, rng: &mut R) -> Tensor {
    augment_with(x, policy, &AugmentParams::default(), rng)
}

pub fn augment_with<R: Rng + ?Sized>(
    x: &Tensor,
    policy: Policy,
    params: &AugmentParams,
    rng: &mut R,
) -> Tensor {
    if policy == Policy::Identity {
        return x.clone();
    }
    match x.image_dims() {
        Some(_) => augment_image(x, policy, params, rng),
        None => augment_flat(x, policy, params, rng),
    }
}

fn augment_image<R: Rng + ?Sized>(
    x: &Tensor,
    policy: Policy,
    params: &AugmentParams,
    rng: &mut R,
) -> Tensor {
    let (c, h, w) = x.image_dims().expect("image tensor");
    let mut out = if rng.random_bool(params.flip_prob) {
        hflip(x)
    } else {
        x.clone()
    };
    let pad = ((w as f64 * params.pad_frac).round() as i64).max(1);
    let dx = rng.random_range(-pad..=pad);
    let dy = rng.random_range(-pad..=pad);
    out = shift(&out, dx, dy);
    if policy == Policy::Contrastive {
        let side = ((h.min(w) as f64 * params.cutout_frac).round() as usize).max(1);
        let cy = rng.random_range(0..h);
        let cx = rng.random_range(0..w);
        cutout(&mut out, cy, cx, side);
        let data = out.data_mut();
        for ch in 0..c {
            let gain = rng.random_range(params.gain_range.0..=params.gain_range.1);
            let bias = rng.random_range(params.shift_range.0..=params.shift_range.1);
            for v in &mut data[ch * h * w..(ch + 1) * h * w] {
                *v = *v * gain + bias;
            }
        }
    }
    out
}

fn augment_flat<R: Rng + ?Sized>(
    x: &Tensor,
    policy: Policy,
    params: &AugmentParams,
    rng: &mut R,
) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        let n: f32 = StandardNormal.sample(rng);
        *v += params.jitter_std * n;
    }
    if policy == Policy::Contrastive && !out.is_empty() {
        let len = out.len();
        let span = ((len as f64 * params.erase_frac).round() as usize).min(len);
        if span > 0 {
            let start = rng.random_range(0..=len - span);
            out.data_mut()[start..start + span].fill(0.0);
        }
        let gain = rng.random_range(params.gain_range.0..=params.gain_range.1);
        for v in out.data_mut() {
            *v *= gain;
        }
    }
    out
}

/// Mirrors an image along its width axis. Flat tensors are reversed.
pub fn hflip(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    match x.image_dims() {
        Some((c, h, w)) => {
            for plane in 0..c * h {
                out.data_mut()[plane * w..(plane + 1) * w].reverse();
            }
        }
        None => out.data_mut().reverse(),
    }
    out
}

/// Zero-padded translation: equivalent to padding and cropping at an offset.
fn shift(x: &Tensor, dx: i64, dy: i64) -> Tensor {
    let (c, h, w) = x.image_dims().expect("image tensor");
    let mut out = Tensor::zeros(x.shape().to_vec());
    let src = x.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h as i64 {
            let sy = y - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for xx in 0..w as i64 {
                let sx = xx - dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                dst[ch * h * w + (y as usize) * w + xx as usize] =
                    src[ch * h * w + (sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

fn cutout(x: &mut Tensor, cy: usize, cx: usize, side: usize) {
    let (c, h, w) = x.image_dims().expect("image tensor");
    let half = side / 2;
    let (y0, y1) = (cy.saturating_sub(half), (cy + side - half).min(h));
    let (x0, x1) = (cx.saturating_sub(half), (cx + side - half).min(w));
    let data = x.data_mut();
    for ch in 0..c {
        for y in y0..y1 {
            data[ch * h * w + y * w + x0..ch * h * w + y * w + x1].fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn image() -> Tensor {
        let data = (0..2 * 4 * 6).map(|v| v as f32 * 0.1).collect();
        Tensor::new(vec![2, 4, 6], data).unwrap()
    }

    #[test]
    fn identity_policy_is_noop() {
        let x = image();
        let mut rng = stream(1, Purpose::ClassifyView, 0, 0, 0);
        assert_eq!(augment(&x, Policy::Identity, &mut rng), x);
    }

    #[test]
    fn flip_is_involution() {
        let x = image();
        assert_ne!(hflip(&x), x);
        assert_eq!(hflip(&hflip(&x)), x);
        let v = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(hflip(&hflip(&v)), v);
    }

    #[test]
    fn flip_mirrors_rows() {
        let x = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(hflip(&x).data(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn fixed_stream_is_bit_identical() {
        for x in [image(), Tensor::from_vec(vec![0.5; 16])] {
            for policy in [Policy::Classification, Policy::Contrastive] {
                let a = augment(&x, policy, &mut stream(5, Purpose::ContrastViewA, 1, 2, 3));
                let b = augment(&x, policy, &mut stream(5, Purpose::ContrastViewA, 1, 2, 3));
                assert_eq!(a.data(), b.data());
            }
        }
    }

    #[test]
    fn unknown_policy_rejected() {
        assert!(matches!(
            "autoaugment".parse::<Policy>(),
            Err(Error::UnknownPolicy(_))
        ));
        assert_eq!("contrastive".parse::<Policy>().unwrap(), Policy::Contrastive);
    }

    #[test]
    fn shift_moves_content() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(shift(&x, 1, 0).data(), &[0.0, 1.0, 0.0, 3.0]);
        assert_eq!(shift(&x, 0, -1).data(), &[3.0, 4.0, 0.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn shape_and_finiteness_preserved(seed in 0u64..1000, flat in proptest::bool::ANY) {
            let x = if flat { Tensor::from_vec(vec![0.3; 9]) } else { image() };
            for policy in [Policy::Classification, Policy::Contrastive] {
                let y = augment(&x, policy, &mut stream(seed, Purpose::ClassifyView, 0, 0, 0));
                proptest::prop_assert_eq!(y.shape(), x.shape());
                proptest::prop_assert!(y.is_finite());
            }
        }
    }
}
