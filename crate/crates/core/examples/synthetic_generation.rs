//! Generate-and-filter complement of a long-tailed split: how many draws the
//! quality filter rejects and how the final class totals look.
//!
//! ```text
//! cargo run --example synthetic_generation -- [noise_rate] [threshold]
//! ```

use sau::rng::{self, Purpose};
use sau::syngen;
use sau::trainer::{self, TrainConfig};

fn main() -> sau::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<f64>());
    let mut cfg = TrainConfig::default();
    if let Some(Ok(r)) = args.next() {
        cfg.gen.noise_rate = r;
    }
    if let Some(Ok(t)) = args.next() {
        cfg.gen.quality_threshold = t;
    }
    let (model, real, _) = trainer::build_real(&cfg)?;
    println!("class separation ratio {:.2}", model.separation_ratio());

    // one unfiltered batch shows what the filter is up against
    let mut rng = rng::stream(cfg.gen.seed, Purpose::Synthetic, 0, 0, 0);
    let raw = syngen::generate_class_samples(&model, cfg.gen.noise_rate, 0, 1000, 0, &mut rng);
    let kept = syngen::filter_by_quality(raw, cfg.gen.quality_threshold).len();
    println!(
        "noise {} threshold {}: {kept}/1000 draws of class 0 pass",
        cfg.gen.noise_rate, cfg.gen.quality_threshold
    );

    let ds = trainer::Dataset::new(
        real,
        Vec::new(),
        Vec::new(),
        cfg.lt.n_classes,
    )?;
    let synthetic = trainer::build_synthetic(&cfg, &model, &ds.real_counts, trainer::synthetic_first_id(&cfg))?;
    let syn_counts = sau::data::class_counts(&synthetic, cfg.lt.n_classes)?;
    println!("{:>5} {:>6} {:>6} {:>6}", "class", "real", "synth", "total");
    for (c, (r, s)) in ds.real_counts.iter().zip(&syn_counts).enumerate() {
        println!("{c:>5} {r:>6} {s:>6} {:>6}", r + s);
    }
    let mean_q = synthetic.iter().map(|s| s.quality).sum::<f64>() / synthetic.len().max(1) as f64;
    println!("mean synthetic quality {mean_q:.3}");
    Ok(())
}
