//! Presenting a training task under an unseen task id: attribute and
//! modality routing still evaluate it, task routing cannot.
//!
//! ```text
//! cargo run --release --example zero_shot -- [steps]
//! ```

use condmoe::encoder::LayerPlacement;
use condmoe::harness::run::{eval_task, zero_shot_eval};
use condmoe::harness::{Config, Trainer};
use condmoe::routing::RoutingKind;

fn main() -> condmoe::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    for kind in [RoutingKind::Attribute, RoutingKind::Modality, RoutingKind::Task] {
        let mut cfg = Config::default();
        cfg.model.depth = 2;
        cfg.model.width = 32;
        cfg.model.moe_placement = LayerPlacement::AllLayers;
        cfg.moe.num_experts = 4;
        cfg.moe.top_k = 1;
        cfg.moe.strategy = kind;
        let mut t = Trainer::new(cfg)?;
        for _ in 0..steps {
            t.step()?;
        }
        for task in 0..t.suite.tasks().len() {
            let name = &t.suite.tasks()[task].name;
            let seen = eval_task(&t.model, &t.suite, task)?;
            let novel = match zero_shot_eval(&t.model, &t.suite, task) {
                Ok(r) => format!("{:.3}", r.accuracy),
                Err(e) => e.to_string(),
            };
            println!("{:9} {name:8} trained id {:.3}  unseen id {novel}", kind.name(), seen.accuracy);
        }
    }
    Ok(())
}
