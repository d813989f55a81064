//! Trains the default toy configuration and the cross-entropy baseline on the
//! same long-tailed data, then compares balanced and per-group accuracy.
//!
//! ```text
//! cargo run --release --example train_toy -- [epochs]
//! ```

use std::time::Instant;

use sau::trainer::{self, EpochReport, TrainConfig};

fn show(name: &str, r: &EpochReport) {
    let g = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.3}", v));
    println!(
        "{name:>8} epoch {:>3}  lr {:.4}  top1 {:.3}  many {}  med {}  few {}  noise {}",
        r.epoch,
        r.lr,
        r.test_top1,
        g(r.many),
        g(r.medium),
        g(r.few),
        r.noise_count
    );
}

fn main() -> sau::Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(e) = std::env::args().nth(1).and_then(|a| a.parse().ok()) {
        cfg.epochs = e;
        cfg.optim.total_epochs = e;
    }
    let data = trainer::prepare_dataset(&cfg)?;
    println!(
        "real counts {:?}, {} synthetic, {} test",
        data.real_counts,
        data.synthetic.len(),
        data.test.len()
    );

    for (name, c) in [("baseline", cfg.baseline()), ("sau", cfg.clone())] {
        let t = Instant::now();
        let out = trainer::fit_on(&c, &data, |r| {
            if r.epoch % 10 == 9 {
                show(name, r)
            }
        })?;
        if let Some(last) = out.reports.last().filter(|r| r.epoch % 10 != 9) {
            show(name, last);
        }
        println!("{name:>8} took {:.1}s", t.elapsed().as_secs_f64());
    }
    Ok(())
}
