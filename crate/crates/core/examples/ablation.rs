//! Loss-variant and loss-component ablation on one shared dataset, written to
//! `ablation.csv` in the output directory.
//!
//! ```text
//! cargo run --release --example ablation -- [epochs] [out_dir]
//! ```

use std::path::PathBuf;

use sau::cli::{self, RunConfig};

fn main() -> sau::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::default();
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    cfg.train.epochs = epochs;
    cfg.train.optim.total_epochs = epochs;
    cfg.paths.out_dir = args.next().map_or_else(|| PathBuf::from("out/ablation"), PathBuf::from);

    let rows = cli::cmd_ablate(&cfg, &mut std::io::stdout())?;
    let best = rows
        .iter()
        .max_by(|a, b| a.test_top1.total_cmp(&b.test_top1))
        .expect("non-empty plan");
    println!("best: {} {} ({:.4})", best.table, best.name, best.test_top1);
    println!("wrote {}", cfg.paths.out_dir.join(cli::ABLATION_FILE).display());
    Ok(())
}
