//! The five routing strategies on the same tokens: which experts each
//! token reaches, and how the choice changes when only the task id does.

use condmoe::moe::{MoEConfig, MoELayer};
use condmoe::params::{ParamStore, Session};
use condmoe::routing::{Causation, Modality, ModalitySet, RoutingContext, RoutingKind, TokenSource};
use condmoe::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> condmoe::Result<()> {
    let both = ModalitySet::of(&[Modality::Image, Modality::Text]);
    let contexts = [
        RoutingContext::new(0, ModalitySet::of(&[Modality::Image]), Modality::Image, Causation::Bidirectional, TokenSource::InputSet)?,
        RoutingContext::new(1, ModalitySet::of(&[Modality::Text]), Modality::Text, Causation::Bidirectional, TokenSource::InputSet)?,
        RoutingContext::new(2, both, Modality::Image, Causation::Causal, TokenSource::InputSet)?,
        RoutingContext::new(2, both, Modality::Text, Causation::Causal, TokenSource::TargetSet)?,
    ];
    for c in &contexts {
        println!("task {} {:5} attributes {:?}", c.task_id(), c.token_modality().name(), c.attributes().bits());
    }
    let x = Tensor::randn(vec![4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    for kind in RoutingKind::ALL {
        let cfg = MoEConfig {
            num_experts: 4,
            top_k: 1,
            noise_std: 0.0,
            strategy: kind,
            ..MoEConfig::default()
        };
        let mut store = ParamStore::new();
        let layer = MoELayer::new(cfg, &mut store, "moe", 8, 8, 3, &mut ChaCha8Rng::seed_from_u64(2))?;
        let s = Session::frozen(&store, 0);
        let xv = s.constant(x.clone());
        let gate = layer.router.route(&s, xv, &contexts, 4, false)?;
        let experts: Vec<usize> = gate.decisions.iter().map(|d| d.selected()[0]).collect();
        let novel = if kind.is_data_independent() {
            match layer.router.decide_contexts(&store, &[contexts[3].with_task_id(7)]) {
                Ok(d) => format!("task 7 -> expert {}", d[0].selected()[0]),
                Err(e) => format!("task 7 -> {e}"),
            }
        } else {
            "depends on token values".to_string()
        };
        println!("{:9} experts {experts:?}; {novel}", kind.name());
    }
    Ok(())
}
