//! MixUp and CutMix on images and flat vectors, with the soft labels and the
//! mixed cross-entropy they produce.
//!
//! ```text
//! cargo run --example mixing
//! ```

use sau::mixer::{self, CutBox};
use sau::rng::{self, Purpose};
use sau::tensor::Tensor;

fn main() -> sau::Result<()> {
    let mut rng = rng::stream(7, Purpose::MixupRatio, 0, 0, 0);
    let lams: Vec<f64> = (0..5)
        .map(|_| mixer::sample_mix_ratio(1.0, &mut rng))
        .collect::<Result<_, _>>()?;
    println!("Beta(1,1) draws {lams:.3?}");

    let a = Tensor::new(vec![1, 6, 6], vec![1.0; 36])?;
    let b = Tensor::zeros(vec![1, 6, 6]);
    let m = mixer::mixup(&a, 2, &b, 5, 0.3)?;
    println!("mixup lam 0.3 -> pixel {:.2}, label {:?}", m.x_tilde.data()[0], m.target());

    let cut = CutBox::centered(6, 6, 0.5, 2.0, 2.0);
    let c = mixer::cutmix(&a, 2, &b, 5, &cut)?;
    println!("cutmix lam 0.5 box x[{}..{}) y[{}..{}) -> label weight {:.4}", cut.x0, cut.x1, cut.y0, cut.y1, c.lam_label);
    for row in c.x_tilde.data().chunks(6) {
        println!("  {}", row.iter().map(|v| if *v > 0.5 { '#' } else { '.' }).collect::<String>());
    }

    // flat vectors get a contiguous span instead of a rectangle
    let v = Tensor::from_vec((0..16).map(|i| i as f32).collect());
    let w = Tensor::from_vec(vec![-1.0; 16]);
    let mut rng = rng::stream(7, Purpose::CutmixBox, 0, 0, 0);
    let span = mixer::sample_box_for(&v, 0.75, &mut rng);
    let s = mixer::cutmix(&v, 0, &w, 1, &span)?;
    println!("span cutmix -> {:?} (weight {:.4})", s.x_tilde.data(), s.lam_label);

    let logits = [2.0, 0.5, -1.0, 0.0, 0.0, 1.5];
    println!("mixed CE of {:?}: {:.4}", m.target(), mixer::mixed_ce_loss(&logits, m.target()));
    Ok(())
}
