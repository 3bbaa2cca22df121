//! A single top-2 MoE layer: gate decisions, the sparse mixture, compute
//! counters, and the balance loss.

use condmoe::moe::{balance_loss, MoEConfig, MoELayer};
use condmoe::params::{ParamStore, Session};
use condmoe::routing::RoutingKind;
use condmoe::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> condmoe::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = MoEConfig {
        num_experts: 8,
        top_k: 2,
        strategy: RoutingKind::Token,
        ..MoEConfig::default()
    };
    let mut store = ParamStore::new();
    let layer = MoELayer::new(cfg, &mut store, "moe", 16, 16, 1, &mut rng)?;

    let s = Session::frozen(&store, 0);
    let x = s.constant(Tensor::randn(vec![6, 16], 1.0, &mut rng));
    let gate = layer.gate(&s, x, false)?;
    for (t, d) in gate.decisions.iter().enumerate() {
        let w: Vec<String> = d.selected().iter().map(|&e| format!("{e}:{:.3}", d.weights()[e])).collect();
        println!("token {t} -> {}", w.join(" "));
    }
    let y = layer.forward(&s, x, &gate)?;
    let stats = s.stats();
    println!("output shape {:?}", s.tape.shape(y));
    println!(
        "gate calls {}, expert evaluations {} of {} possible",
        stats.gate_calls,
        stats.expert_evals,
        6 * 8
    );
    let bl = balance_loss(&s, &[&gate], layer.router.config().balance_coefficient)?;
    println!("balance loss {:.5} (minimum 0.01)", s.tape.value(bl).item());
    Ok(())
}
