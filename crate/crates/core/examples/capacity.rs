//! Expert capacity for data-dependent routing: tokens beyond an expert's
//! quota bypass the layer.

use condmoe::moe::{expert_capacity, MoEConfig, MoELayer};
use condmoe::params::{ParamStore, Session};
use condmoe::routing::RoutingKind;
use condmoe::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> condmoe::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = MoEConfig {
        num_experts: 4,
        top_k: 1,
        noise_std: 0.0,
        strategy: RoutingKind::Token,
        ..MoEConfig::default()
    };
    let mut store = ParamStore::new();
    let layer = MoELayer::new(cfg, &mut store, "moe", 8, 8, 1, &mut rng)?;
    let s = Session::frozen(&store, 0);
    // Inputs clustered around one direction so the router favours a few experts.
    let mut x = Tensor::randn(vec![16, 8], 0.3, &mut rng);
    for t in 0..16 {
        x.data_mut()[t * 8] += 0.6;
    }
    let xv = s.constant(x);
    let gate = layer.gate(&s, xv, false)?;
    let chosen: Vec<usize> = gate.decisions.iter().map(|d| d.selected()[0]).collect();
    println!("top-1 experts {chosen:?}");
    for factor in [0.5, 1.0, 2.0, 4.0] {
        let (_, adm) = layer.forward_batch_with_capacity(&s, xv, &gate, factor)?;
        let loads: Vec<usize> = adm.per_expert.iter().map(Vec::len).collect();
        println!(
            "factor {factor}: capacity {}, loads {loads:?}, dropped {:?}",
            expert_capacity(factor, 16, 1, 4),
            adm.dropped
        );
    }
    Ok(())
}
