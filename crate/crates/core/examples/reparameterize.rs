//! Merging attribute-routed experts into one dense projection per routing
//! key, and timing MoE inference against the merged path.
//!
//! ```text
//! cargo run --release --example reparameterize -- [steps]
//! ```

use condmoe::encoder::LayerPlacement;
use condmoe::harness::run::compare_reparam_inference;
use condmoe::harness::{Config, Trainer};
use condmoe::routing::RoutingKind;

fn main() -> condmoe::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let mut cfg = Config::default();
    cfg.model.depth = 2;
    cfg.model.width = 32;
    cfg.model.moe_placement = LayerPlacement::AllLayers;
    cfg.moe.strategy = RoutingKind::Attribute;
    cfg.train.steps = steps;
    let mut t = Trainer::new(cfg)?;
    for _ in 0..steps {
        t.step()?;
    }
    let r = compare_reparam_inference(&t.model, &t.suite)?;
    println!("moe path    {:.2} ms", r.moe_ms);
    println!("merged path {:.2} ms", r.dense_ms);
    println!("max |diff|  {:.2e}", r.max_abs_diff);
    println!("multiplies  merged {} dense model {}", r.merged_mults, r.dense_model_mults);
    Ok(())
}
