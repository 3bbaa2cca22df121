//! Finite-difference checks of whole-model losses: the full encoder under
//! every routing strategy, and the gate weights through softmax and top-k.

use crate::common::{mixed_contexts, param_gradcheck, probe, rng};
use condmoe::encoder::{Encoder, EncoderConfig, LayerPlacement};
use condmoe::moe::{MoEConfig, MoELayer};
use condmoe::params::ParamStore;
use condmoe::routing::RoutingKind;
use condmoe::tensor::Tensor;

const TOL: f64 = 1e-4;

pub fn encoder_loss_under_every_strategy() {
    for (i, (depth, width, heads, seq, batch)) in [(1, 4, 1, 3, 2), (2, 8, 2, 4, 2), (2, 6, 3, 2, 3)].into_iter().enumerate() {
        for kind in RoutingKind::ALL {
            let cfg = EncoderConfig {
                depth,
                width,
                heads,
                ffn_ratio: 2,
                moe_placement: LayerPlacement::AllLayers,
                // Large enough that the residual branches matter.
                layerscale_init: 0.5,
                ..EncoderConfig::default()
            };
            let moe = MoEConfig {
                num_experts: 3,
                top_k: 2,
                noise_std: 0.0,
                capacity_factor_train: 4.0,
                strategy: kind,
                ..MoEConfig::default()
            };
            let mut store = ParamStore::new();
            let enc = Encoder::new(cfg, moe, &mut store, "enc", 3, &mut rng(i as u64)).unwrap();
            let n = seq * batch;
            let x = Tensor::randn(vec![n, width], 1.0, &mut rng(100 + i as u64));
            let contexts = mixed_contexts(n);
            let err = param_gradcheck(&store, |s| {
                let xv = s.constant(x.clone());
                let out = enc.encode(s, xv, &contexts, seq, i % 2 == 1, true)?;
                probe(&s.tape, out.output, 7)
            });
            assert!(err < TOL, "{kind} shape {i}: relative error {err:e}");
        }
    }
}

pub fn gate_weights_through_softmax_and_top_k() {
    for (i, (d, e, k, n)) in [(4, 4, 2, 3), (6, 8, 2, 5), (3, 5, 1, 4)].into_iter().enumerate() {
        let moe = MoEConfig {
            num_experts: e,
            top_k: k,
            noise_std: 0.0,
            strategy: RoutingKind::Token,
            ..MoEConfig::default()
        };
        let mut store = ParamStore::new();
        let layer = MoELayer::new(moe, &mut store, "moe", d, d, 1, &mut rng(i as u64)).unwrap();
        let x = Tensor::randn(vec![n, d], 1.0, &mut rng(50 + i as u64));
        let err = param_gradcheck(&store, |s| {
            let xv = s.constant(x.clone());
            let gate = layer.gate(s, xv, true)?;
            let y = layer.forward(s, xv, &gate)?;
            probe(&s.tape, y, 3)
        });
        assert!(err < TOL, "gate shape {i}: relative error {err:e}");
    }
}

pub const ALL: &[(&str, fn())] = &[
    ("encoder_loss_under_every_strategy", encoder_loss_under_every_strategy),
    ("gate_weights_through_softmax_and_top_k", gate_weights_through_softmax_and_top_k),
];
