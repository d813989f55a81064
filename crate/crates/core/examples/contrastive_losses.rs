//! The supervised contrastive loss and its three noise-aware variants on a
//! small two-view batch where one sample is flagged as noise by KNN voting.
//!
//! ```text
//! cargo run --example contrastive_losses
//! ```

use sau::contrastive::{self, knn, prototypes, Embeddings, LossVariant};
use sau::tensor::{norm, Matrix};

fn unit_rows(points: &[[f64; 2]]) -> Matrix {
    let data = points
        .iter()
        .flat_map(|p| {
            let n = norm(p);
            [p[0] / n, p[1] / n]
        })
        .collect();
    Matrix::new(points.len(), 2, data).expect("2 columns")
}

fn main() -> sau::Result<()> {
    // two clusters; the last sample is labelled 1 but sits between them
    let view_a = unit_rows(&[[1.0, 0.1], [0.9, -0.1], [1.0, 0.0], [-1.0, 0.1], [-0.9, 0.0], [0.3, 1.0]]);
    let view_b = unit_rows(&[[1.0, 0.0], [0.9, 0.1], [1.0, -0.1], [-1.0, 0.0], [-0.9, 0.1], [1.0, 0.4]]);
    let y_org = [0i64, 0, 0, 1, 1, 1];

    let reference = view_a.select_rows(&[0, 1, 2, 3, 4]);
    let y_ref = &y_org[..5];
    let votes_a = knn::knn_correct(&view_a, &reference, y_ref, 3)?;
    let votes_b = knn::knn_correct(&view_b, &reference, y_ref, 3)?;
    println!("votes A {votes_a:?}\nvotes B {votes_b:?}");

    let fixed = knn::relabel(&y_org, &votes_a, &votes_b, -1)?;
    println!("relabelled {:?}, {} noise", fixed.y_new, fixed.noise_count);

    // rows: both views, each sample's two views share a label
    let z = Matrix::vstack(&[&view_a, &view_b])?;
    let labels: Vec<i64> = fixed.y_new.iter().chain(&fixed.y_new).copied().collect();
    let literal: Vec<i64> = y_org.iter().chain(&y_org).copied().collect();
    let tau = 0.5;

    println!("supcon, original labels {:.4}", contrastive::supcon_loss(&Embeddings::new(z.clone(), literal, tau)?)?);
    let emb = Embeddings::new(z.clone(), labels, tau)?;
    for v in LossVariant::ALL {
        println!("{v}, corrected labels   {:.4}", contrastive::variant_loss(v, &emb)?);
    }

    let classes: Vec<usize> = y_ref.iter().map(|&y| y as usize).collect();
    let protos = prototypes::compute_prototypes(&reference, &classes, 2)?;
    println!("prototypes {:.3?}", protos.rows.data());
    let with = emb.with_prototypes(&protos)?;
    println!("l2 with prototypes     {:.4}", contrastive::loss_l2(&with)?);
    Ok(())
}
