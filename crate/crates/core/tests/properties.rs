//! Property tests for the invariants each module promises.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sau::contrastive::{self, knn, prototypes, Embeddings, LossVariant};
use sau::data::augment::{augment, Policy};
use sau::data::{self, LtSpec};
use sau::mixer::{self, SoftTarget};
use sau::model::{ArchConfig, ModelState};
use sau::rng::{self, Purpose};
use sau::syngen::{self, GenSpec, MeansSpec};
use sau::tensor::{Matrix, Tensor};

fn unit(rows: usize, cols: usize, raw: &[f64]) -> Matrix {
    let mut m = Matrix::new(rows, cols, raw[..rows * cols].to_vec()).unwrap();
    for r in 0..rows {
        let row = m.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    m
}

/// Two views of `labels.len()` samples; noise ids shared across views.
fn two_view(labels: &[i64]) -> Vec<i64> {
    labels.iter().chain(labels).copied().collect()
}

fn noise_marked(classes: &[u8], noisy: &[bool]) -> Vec<i64> {
    let mut next = -1;
    classes
        .iter()
        .zip(noisy)
        .map(|(&c, &n)| {
            if n {
                next -= 1;
                next + 1
            } else {
                c as i64
            }
        })
        .collect()
}

fn gen_spec(seed: u64, noise_rate: f64) -> GenSpec {
    GenSpec {
        n_classes: 4,
        means: MeansSpec::Sphere { dim: 6, radius: 2.0 },
        spread: 0.5,
        noise_rate,
        quality_threshold: 0.5,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lt_counts_decay_to_the_imbalance_factor(n in 2usize..40, n0 in 50usize..6000, imb in 1.0f64..200.0) {
        let counts = data::long_tailed_counts(&LtSpec { n_classes: n, n0, imbalance_factor: imb, seed: 0 });
        prop_assert_eq!(counts[0], n0);
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        let last = counts[n - 1] as f64;
        prop_assert!((last - n0 as f64 / imb).abs() <= 0.5);
    }

    #[test]
    fn complement_fills_to_target(real in prop::collection::vec(0usize..300, 1..20), extra in 0usize..100) {
        let target = real.iter().copied().max().unwrap() + extra;
        let add = data::complement_counts(&real, target).unwrap();
        prop_assert!(real.iter().zip(&add).all(|(a, b)| a + b == target));
    }

    #[test]
    fn augmentation_keeps_shape_and_finiteness(seed in any::<u64>(), image in any::<bool>(), policy in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = if image {
            Tensor::new(vec![3, 8, 8], (0..192).map(|i| (i as f32).sin()).collect()).unwrap()
        } else {
            Tensor::from_vec((0..16).map(|i| i as f32 * 0.1).collect())
        };
        let p = [Policy::Identity, Policy::Classification, Policy::Contrastive][policy];
        let y = augment(&x, p, &mut rng);
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.is_finite());
    }

    #[test]
    fn streams_are_keyed_not_sequential(seed in any::<u64>(), epoch in 0u64..100, step in 0u64..100, sample in 0u64..1000) {
        use rand::Rng;
        let a: u64 = rng::stream(seed, Purpose::PairView, epoch, step, sample).random();
        let b: u64 = rng::stream(seed, Purpose::PairView, epoch, step, sample).random();
        let c: u64 = rng::stream(seed, Purpose::PairView, epoch, step, sample + 1).random();
        prop_assert_eq!(a, b);
        prop_assert_ne!(a, c);
    }

    #[test]
    fn generation_is_reproducible_and_scored(seed in any::<u64>(), class in 0usize..4, noise in 0.0f64..=1.0) {
        let model = gen_spec(seed, noise).resolve().unwrap();
        let draw = || {
            let mut r = rng::stream(seed, Purpose::Synthetic, 0, 0, class as u64);
            syngen::generate_class_samples(&model, noise, class, 30, 0, &mut r)
        };
        let a = draw();
        prop_assert_eq!(&a, &draw());
        prop_assert!(a.iter().all(|s| (0.0..=1.0).contains(&s.quality) && s.features.is_finite()));
        let kept = syngen::filter_by_quality(a.clone(), 0.5);
        // subsequence: ids strictly increase in both and every kept id appears
        prop_assert!(kept.iter().all(|k| a.iter().any(|s| s == k)));
        prop_assert!(kept.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn mixing_labels_are_convex(lam in 0.0f64..=1.0, w in 1usize..10, h in 1usize..10, seed in any::<u64>()) {
        let a = Tensor::new(vec![1, h, w], vec![1.0; w * h]).unwrap();
        let b = Tensor::zeros(vec![1, h, w]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cut = mixer::cutmix_box(w, h, lam, &mut rng);
        prop_assert!(cut.x0 <= cut.x1 && cut.x1 <= w && cut.y0 <= cut.y1 && cut.y1 <= h);
        let c = mixer::cutmix(&a, 0, &b, 1, &cut).unwrap();
        prop_assert!((0.0..=1.0).contains(&c.lam_label));
        prop_assert_eq!(c.lam_label, (w * h - cut.clipped_area()) as f64 / (w * h) as f64);

        let m = mixer::mixup(&a, 0, &b, 1, lam).unwrap();
        let swapped = mixer::mixup(&b, 1, &a, 0, 1.0 - lam).unwrap();
        for (p, q) in m.x_tilde.data().iter().zip(swapped.x_tilde.data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn mixed_ce_is_linear_in_lambda(logits in prop::collection::vec(-5.0f64..5.0, 2..8), lam in 0.0f64..=1.0) {
        let n = logits.len();
        let t = |l| SoftTarget { y_i: 0, y_j: n - 1, lam: l };
        let got = mixer::mixed_ce_loss(&logits, t(lam));
        let want = lam * mixer::mixed_ce_loss(&logits, t(1.0)) + (1.0 - lam) * mixer::mixed_ce_loss(&logits, t(0.0));
        prop_assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn projections_are_unit_norm(seed in any::<u64>(), rows in 2usize..6) {
        let arch = ArchConfig::vector(5, 3);
        let state = ModelState::init(&arch, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::new(rows, 5, (0..rows * 5).map(|_| rand::Rng::random_range(&mut r, -2.0..2.0)).collect()).unwrap();
        let z = state.project(&state.encode(&x).unwrap()).unwrap();
        for row in z.iter_rows() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9 || n == 0.0);
        }
    }

    #[test]
    fn losses_ignore_noise_when_there_is_none(
        raw in prop::collection::vec(-1.0f64..1.0, 16 * 8),
        classes in prop::collection::vec(0u8..3, 2..6),
        tau in 0.05f64..1.0,
    ) {
        let labels = two_view(&classes.iter().map(|&c| c as i64).collect::<Vec<_>>());
        let z = unit(labels.len(), 8, &raw);
        let e = Embeddings::new(z, labels, tau).unwrap();
        let base = contrastive::supcon_loss(&e).unwrap();
        for v in LossVariant::ALL {
            prop_assert!((contrastive::variant_loss(v, &e).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn losses_are_positive_and_permutation_invariant(
        raw in prop::collection::vec(-1.0f64..1.0, 16 * 4),
        classes in prop::collection::vec(0u8..3, 2..8),
        noisy in prop::collection::vec(any::<bool>(), 8),
        tau in 0.05f64..1.0,
        shift in 1usize..16,
    ) {
        let labels = two_view(&noise_marked(&classes, &noisy));
        let n = labels.len();
        let z = unit(n, 4, &raw);
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let e = Embeddings::new(z.clone(), labels.clone(), tau).unwrap();
        let p = Embeddings::new(z.select_rows(&perm), perm.iter().map(|&i| labels[i]).collect(), tau).unwrap();
        for v in LossVariant::ALL {
            let a = contrastive::variant_loss(v, &e).unwrap();
            prop_assert!((a - contrastive::variant_loss(v, &p).unwrap()).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }
        // every anchor of l2 has the whole batch minus one as negatives-or-positives
        if n > 2 {
            prop_assert!(contrastive::loss_l2(&e).unwrap() > 0.0);
        }
    }

    #[test]
    fn relabel_ids_are_unique(
        y in prop::collection::vec(0i64..4, 0..40),
        a in prop::collection::vec(prop::option::of(0i64..4), 40),
        b in prop::collection::vec(prop::option::of(0i64..4), 40),
        start in -20i64..0,
    ) {
        let n = y.len();
        let r = knn::relabel(&y, &a[..n], &b[..n], start).unwrap();
        let noise: Vec<i64> = r.y_new.iter().copied().filter(|&l| l < 0).collect();
        let mut dedup = noise.clone();
        dedup.sort_unstable();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), noise.len());
        prop_assert_eq!(noise.len(), r.noise_count);
        for i in 0..n {
            let agreed = a[i] == Some(y[i]) && b[i] == Some(y[i]);
            prop_assert_eq!(agreed, r.y_new[i] == y[i]);
        }
    }

    #[test]
    fn exact_copies_of_reals_are_never_noise(
        raw in prop::collection::vec(-1.0f64..1.0, 12 * 4),
        reals in prop::collection::vec(0u8..3, 3..12),
        picks in prop::collection::vec(0usize..12, 1..10),
    ) {
        // reals spread far apart so each copy's nearest point is itself
        let n = reals.len();
        let mut z = unit(n, 4, &raw);
        for r in 0..n {
            z.row_mut(r).iter_mut().for_each(|v| *v += 10.0 * r as f64);
        }
        let y: Vec<i64> = reals.iter().map(|&c| c as i64).collect();
        let idx: Vec<usize> = picks.iter().map(|&p| p % n).collect();
        let syn = z.select_rows(&idx);
        let votes = knn::knn_correct(&syn, &z, &y, 1).unwrap();
        let y_org: Vec<i64> = idx.iter().map(|&i| y[i]).collect();
        let r = knn::relabel(&y_org, &votes, &votes, -1).unwrap();
        prop_assert_eq!(r.noise_count, 0);
    }

    #[test]
    fn valid_prototypes_are_unit_rows(raw in prop::collection::vec(-1.0f64..1.0, 10 * 3), ys in prop::collection::vec(0usize..4, 10)) {
        let z = Matrix::new(10, 3, raw).unwrap();
        let p = prototypes::compute_prototypes(&z, &ys, 4).unwrap();
        for c in 0..4 {
            let n = p.rows.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            if p.valid[c] {
                prop_assert!((n - 1.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(n, 0.0);
            }
        }
    }
}
