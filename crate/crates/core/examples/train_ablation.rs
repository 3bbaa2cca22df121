//! Routing-strategy ablation on the conflicting suite: a fully shared dense
//! baseline against attribute- and task-routed models with the same number
//! of active parameters per token.
//!
//! ```text
//! cargo run --release --example train_ablation -- [steps] [seeds]
//! ```

use condmoe::encoder::LayerPlacement;
use condmoe::harness::Config;
use condmoe::harness::Trainer;
use condmoe::routing::RoutingKind;

fn config(strategy: Option<RoutingKind>, seed: u64, steps: usize) -> Config {
    let mut cfg = Config::default();
    cfg.model.depth = 2;
    cfg.model.width = 32;
    cfg.model.heads = 4;
    cfg.train.steps = steps;
    cfg.train.seed = seed;
    cfg.moe.num_experts = 4;
    cfg.moe.top_k = 1;
    match strategy {
        None => cfg.model.moe_placement = LayerPlacement::None,
        Some(kind) => {
            cfg.model.moe_placement = LayerPlacement::AllLayers;
            cfg.moe.strategy = kind;
        }
    }
    cfg
}

fn main() -> condmoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1500);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    for seed in 0..seeds {
        for (name, strategy) in [
            ("dense", None),
            ("attribute", Some(RoutingKind::Attribute)),
            ("task", Some(RoutingKind::Task)),
        ] {
            let start = std::time::Instant::now();
            let mut t = Trainer::new(config(strategy, seed, steps))?;
            for _ in 0..steps {
                t.step()?;
            }
            let evals = t.evaluate()?;
            let losses: Vec<String> = evals.iter().map(|e| format!("{:.3}/{:.2}", e.loss, e.accuracy)).collect();
            let summed: f64 = evals.iter().map(|e| e.loss).sum();
            println!(
                "seed {seed} {name:9} active {:6} summed {summed:.4} [{}] {:.1}s",
                t.model.active_params(),
                losses.join(" "),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
