//! Finite-difference check of every analytic gradient: the mixed
//! cross-entropy, each contrastive form, and the full model objective.
//!
//! ```text
//! cargo run --example gradient_check -- [instances]
//! ```

use sau::gradcheck::{self, GradcheckConfig};

fn main() -> sau::Result<()> {
    let mut cfg = GradcheckConfig::default();
    if let Some(n) = std::env::args().nth(1).and_then(|a| a.parse().ok()) {
        cfg.instances = n;
    }
    println!("{} instances, step {:e}, tolerance {:e}", cfg.instances, cfg.step, cfg.tolerance);
    let reports = gradcheck::run_suite(&cfg)?;
    for r in &reports {
        println!(
            "{:<10} {:>6} coords  max rel err {:.2e}  {}",
            r.name,
            r.coordinates,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    if reports.iter().any(|r| !r.passed) {
        std::process::exit(1);
    }
    Ok(())
}
