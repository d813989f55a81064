//! Long-tailed class profiles for a few imbalance factors, and a concrete
//! split drawn from a balanced pool.
//!
//! ```text
//! cargo run --example long_tailed_split
//! ```

use sau::data::{self, LtSpec};
use sau::rng::Purpose;
use sau::trainer::TrainConfig;

fn main() -> sau::Result<()> {
    for imbalance_factor in [10.0, 50.0, 100.0, 200.0] {
        let spec = LtSpec {
            n_classes: 10,
            n0: 5000,
            imbalance_factor,
            seed: 0,
        };
        let counts = data::long_tailed_counts(&spec);
        println!("IF {imbalance_factor:>5}: {counts:?}");
    }

    let cfg = TrainConfig::default();
    let model = cfg.gen.resolve()?;
    let pool = model.real_samples(cfg.lt.n0, 0, cfg.gen.seed, Purpose::RealSamples);
    let counts = data::long_tailed_counts(&cfg.lt);
    let split = data::build_lt_split(&pool, &counts, cfg.lt.seed)?;
    println!(
        "pool {} -> split {} with counts {:?}",
        pool.len(),
        split.len(),
        data::class_counts(&split, cfg.lt.n_classes)?
    );
    println!("complement to {}: {:?}", cfg.lt.n0, data::complement_counts(&counts, cfg.lt.n0)?);
    Ok(())
}
