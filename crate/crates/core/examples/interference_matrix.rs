//! Interference matrices per FFN block on the conflicting and cooperative
//! suites, for a dense depth-4 model after a short warm-up.
//!
//! ```text
//! cargo run --release --example interference_matrix -- [warmup_steps] [batches]
//! ```

use condmoe::encoder::LayerPlacement;
use condmoe::harness::config::SuiteVariant;
use condmoe::harness::{run, Config, Trainer};

fn main() -> condmoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let warmup: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    let batches: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    for variant in [SuiteVariant::Conflicting, SuiteVariant::Cooperative] {
        let mut cfg = Config::default();
        cfg.model.depth = 4;
        cfg.model.width = 64;
        cfg.model.moe_placement = LayerPlacement::None;
        cfg.suite.variant = variant;
        cfg.interference.num_batches = batches;
        let mut t = Trainer::new(cfg.clone())?;
        for _ in 0..warmup {
            t.step()?;
        }
        let start = std::time::Instant::now();
        let (_, matrices) = run::interfere(&t.model, &t.suite, &cfg, 1)?;
        println!("{variant:?} ({:.1}s)", start.elapsed().as_secs_f64());
        for m in &matrices {
            println!("  {}", m.block_id);
            for row in &m.values {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:7.3}")).collect();
                println!("    {}", cells.join(" "));
            }
        }
    }
    Ok(())
}
