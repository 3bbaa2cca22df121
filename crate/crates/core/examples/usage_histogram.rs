//! Expert usage per routing key after a short attribute-routed run,
//! written as CSV to stdout.

use condmoe::encoder::LayerPlacement;
use condmoe::harness::run::usage_histogram;
use condmoe::harness::{Config, Trainer};
use condmoe::routing::RoutingKind;

fn main() -> condmoe::Result<()> {
    let mut cfg = Config::default();
    cfg.model.depth = 2;
    cfg.model.width = 32;
    cfg.model.moe_placement = LayerPlacement::EveryOtherLayer;
    cfg.moe.strategy = RoutingKind::Attribute;
    let mut t = Trainer::new(cfg)?;
    for _ in 0..100 {
        t.step()?;
    }
    let hist = usage_histogram(&t.model, &t.suite)?;
    hist.write_csv(std::io::stdout())?;
    Ok(())
}
