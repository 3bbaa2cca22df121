//! Acceptance run: one line per criterion, non-zero exit if any fails.
//!
//! ```text
//! cargo test --release --test acceptance
//! ```

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use common::{checks, mixed_contexts, rng};
use condmoe::encoder::{Encoder, EncoderConfig, LayerPlacement, Projection, ProjectionScope};
use condmoe::harness::config::SuiteVariant;
use condmoe::harness::run;
use condmoe::harness::{Config, Trainer};
use condmoe::interference::{interference_matrix, verify_first_order};
use condmoe::moe::{balance_loss, Gate, GateDecision, MoEConfig, MoELayer};
use condmoe::params::{ParamStore, Session};
use condmoe::routing::RoutingKind;
use condmoe::tensor::{top_k_indices, Tensor};
use condmoe::Error;
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn constant_gate(s: &Session, d: &GateDecision) -> Gate {
    let e = d.num_experts();
    let w = s.constant(Tensor::matrix(1, e, d.weights().to_vec()).unwrap());
    Gate {
        probs: w,
        weights: w,
        decisions: vec![d.clone()],
    }
}

fn gradient_correctness() -> Outcome {
    let mut n = 0;
    for (name, check) in checks::ops::ALL.iter().chain(checks::model::ALL) {
        catch_unwind(*check).map_err(|e| format!("{name}: {}", panic_message(&e)))?;
        n += 1;
    }
    Ok(format!("{n} op and model check groups, rel. err < 1e-4 at h = 1e-5"))
}

fn gate_contract() -> Outcome {
    let mut r = rng(2024);
    let mut calls = 0usize;
    let kinds = RoutingKind::ALL;
    while calls < 100_000 {
        let e = r.random_range(2..=8);
        let k = r.random_range(1..=e);
        let kind = kinds[r.random_range(0..kinds.len())];
        let cfg = MoEConfig {
            num_experts: e,
            top_k: k,
            noise_std: if r.random::<bool>() { 1.0 / e as f64 } else { 0.0 },
            strategy: kind,
            ..MoEConfig::default()
        };
        let mut store = ParamStore::new();
        let layer = MoELayer::new(cfg, &mut store, "m", 6, 6, 3, &mut rng(r.random())).unwrap();
        let s = Session::frozen(&store, r.random());
        let n = 50;
        let x = s.constant(Tensor::randn(vec![n, 6], 2.0, &mut r));
        let gate = layer.router.route(&s, x, &mixed_contexts(n), 5, r.random()).unwrap();
        for d in &gate.decisions {
            let nz: Vec<usize> = (0..e).filter(|&i| d.weights()[i] != 0.0).collect();
            ensure!(nz == d.selected(), "selected {:?} vs nonzeros {nz:?}", d.selected());
            ensure!(nz.len() <= k, "{} nonzeros for k = {k}", nz.len());
            ensure!(d.weights().iter().all(|&w| w == 0.0 || (w > 0.0 && w < 1.0)), "weight outside (0,1): {:?}", d.weights());
            ensure!(d.weights().iter().sum::<f64>() <= 1.0 + 1e-12, "weights sum above 1");
        }
        calls += n;
    }

    // Ties: W_g rows chosen so that several logits coincide.
    let mut ties = 0;
    for (rows, k, expect) in [
        (vec![0.5; 4], 2, vec![0, 1]),
        (vec![0.1, 0.9, 0.9, 0.3], 1, vec![1]),
        (vec![0.9, 0.2, 0.9, 0.9, 0.2], 2, vec![0, 2]),
        (vec![-1.0, 0.4, 0.4, 0.4, 0.4, 0.4], 4, vec![1, 2, 3, 4]),
    ] {
        let e = rows.len();
        let cfg = MoEConfig {
            num_experts: e,
            top_k: k,
            noise_std: 0.0,
            strategy: RoutingKind::Token,
            ..MoEConfig::default()
        };
        let mut store = ParamStore::new();
        let layer = MoELayer::new(cfg, &mut store, "m", 1, 1, 1, &mut rng(0)).unwrap();
        let wg = store.id("m.w_gate").unwrap();
        *store.get_mut(wg) = Tensor::matrix(e, 1, rows.clone()).unwrap();
        let s = Session::frozen(&store, 0);
        let x = s.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let d = layer.gate(&s, x, false).unwrap().decisions.remove(0);
        ensure!(d.selected() == expect.as_slice(), "tie {rows:?} k={k}: {:?}", d.selected());
        ensure!(top_k_indices(&rows, k) == expect, "top_k_indices tie order");
        ties += 1;
    }
    Ok(format!("{calls} randomized gate calls, {ties} tie cases"))
}

fn reparameterization() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut layers = 0;
    for kind in [RoutingKind::Attribute, RoutingKind::Task, RoutingKind::Modality] {
        let cfg = EncoderConfig {
            depth: 2,
            width: 8,
            heads: 2,
            ffn_ratio: 2,
            moe_placement: LayerPlacement::AllLayers,
            moe_scope: ProjectionScope::All,
            layerscale_init: 0.5,
            stochastic_depth_rate: 0.0,
        };
        let moe = MoEConfig {
            num_experts: 4,
            top_k: 2,
            strategy: kind,
            ..MoEConfig::default()
        };
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg.clone(), moe.clone(), &mut store, "enc", 3, &mut rng(5)).unwrap();
        let contexts = mixed_contexts(12);
        for l in 0..2 {
            let decisions = enc.router(l).unwrap().decide_contexts(&store, &contexts).unwrap();
            for p in Projection::ALL {
                let bank = enc.experts(l, p).unwrap();
                for d in &decisions {
                    let dense = bank.merge(&store, d).unwrap();
                    let mut r = rng(l as u64 * 31 + 7);
                    for _ in 0..100 {
                        let x = Tensor::randn(vec![1, bank.d_in()], 1.0, &mut r);
                        let s = Session::frozen(&store, 0);
                        let xv = s.constant(x.clone());
                        let (y, _) = bank.forward(&s, xv, &constant_gate(&s, d), None, 1).unwrap();
                        let merged = dense.apply(x.data()).unwrap();
                        for (a, b) in s.tape.value(y).data().iter().zip(&merged) {
                            worst = worst.max((a - b).abs());
                        }
                    }
                }
                layers += 1;
            }
        }
        ensure!(worst < 1e-10, "{kind}: max |diff| {worst:e}");

        let x = Tensor::randn(vec![12, 8], 1.0, &mut rng(8));
        let s = Session::frozen(&store, 0);
        let xv = s.constant(x.clone());
        enc.encode_merged(&s, xv, &contexts, 4, false).unwrap();
        let mut dense_cfg = cfg.clone();
        dense_cfg.moe_placement = LayerPlacement::None;
        let mut dstore = ParamStore::new();
        let dense = Encoder::new(dense_cfg, moe, &mut dstore, "enc", 3, &mut rng(5)).unwrap();
        let ds = Session::frozen(&dstore, 0);
        let dx = ds.constant(x);
        dense.encode(&ds, dx, &contexts, 4, false, false).unwrap();
        ensure!(
            s.stats().projection_mults == ds.stats().projection_mults,
            "{kind}: merged {} mults vs dense {}",
            s.stats().projection_mults,
            ds.stats().projection_mults
        );
    }
    Ok(format!("{layers} MoE projections x 100 inputs, max |diff| {worst:.1e}, multiply counts equal"))
}

fn interference_setup(variant: SuiteVariant) -> Result<(Config, Trainer), Error> {
    let mut cfg = Config::default();
    cfg.model.depth = 4;
    cfg.model.width = 64;
    cfg.model.moe_placement = LayerPlacement::None;
    cfg.suite.variant = variant;
    cfg.interference.num_batches = 100;
    let mut t = Trainer::new(cfg.clone())?;
    for _ in 0..200 {
        t.step()?;
    }
    Ok((cfg, t))
}

fn interference_metric() -> Outcome {
    let mut deep_negative = None;
    let mut shallow_positive = None;
    let mut lambda_gap: f64 = 0.0;
    let mut diagonals = 0;
    for variant in [SuiteVariant::Conflicting, SuiteVariant::Cooperative] {
        let (cfg, t) = interference_setup(variant).map_err(|e| e.to_string())?;
        let (records, matrices) = run::interfere(&t.model, &t.suite, &cfg, 1).map_err(|e| e.to_string())?;
        let coarse = interference_matrix(&records, 1e-3).map_err(|e| e.to_string())?;
        let fine = interference_matrix(&records, 1e-4).map_err(|e| e.to_string())?;
        for ((m, a), b) in matrices.iter().zip(&coarse).zip(&fine) {
            for i in 0..m.tasks.len() {
                ensure!(m.values[i][i] == 1.0, "{variant:?} {} diagonal {i} = {}", m.block_id, m.values[i][i]);
                diagonals += 1;
                for j in 0..m.tasks.len() {
                    ensure!(a.values[i][j].is_finite(), "{} ({i},{j}) not finite", a.block_id);
                    lambda_gap = lambda_gap.max((a.values[i][j] - b.values[i][j]).abs());
                }
            }
            let layer: usize = m.block_id.trim_start_matches("ffn.").parse().unwrap();
            let deep = layer >= cfg.model.depth / 2;
            for (i, j, v) in m.off_diagonal() {
                match variant {
                    SuiteVariant::Conflicting if deep && v < 0.0 => {
                        deep_negative.get_or_insert(format!("{} I({i},{j}) = {v:.3}", m.block_id));
                    }
                    SuiteVariant::Cooperative if !deep && v > 0.0 => {
                        shallow_positive.get_or_insert(format!("{} I({i},{j}) = {v:.3}", m.block_id));
                    }
                    _ => {}
                }
            }
        }
    }
    ensure!(lambda_gap <= 1e-12, "lambda dependence {lambda_gap:e}");

    let theta = [0.0, 4.0];
    let lambda = 1.0 / 1024.0;
    let loss = |t: &[f64]| Ok(0.5 * t.iter().map(|v| v * v).sum::<f64>());
    let check = verify_first_order(loss, &theta, &theta, &theta, lambda).map_err(|e| e.to_string())?;
    ensure!(check.gap() == lambda * lambda / 2.0, "quadratic gap {} vs {}", check.gap(), lambda * lambda / 2.0);

    let neg = deep_negative.ok_or("no negative deep-block off-diagonal on the conflicting suite")?;
    let pos = shallow_positive.ok_or("no positive shallow-block off-diagonal on the cooperative suite")?;
    Ok(format!(
        "{diagonals} diagonals exactly 1, lambda gap {lambda_gap:.1e}, quadratic gap exact; conflicting {neg}; cooperative {pos}"
    ))
}

fn ablation_config(strategy: Option<RoutingKind>, seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.model.depth = 2;
    cfg.model.width = 32;
    cfg.model.heads = 4;
    cfg.train.steps = 2000;
    cfg.train.seed = seed;
    cfg.moe.num_experts = 4;
    cfg.moe.top_k = 1;
    cfg.suite.variant = SuiteVariant::Conflicting;
    match strategy {
        None => cfg.model.moe_placement = LayerPlacement::None,
        Some(kind) => {
            cfg.model.moe_placement = LayerPlacement::AllLayers;
            cfg.moe.strategy = kind;
        }
    }
    cfg
}

fn summed_loss(cfg: Config) -> Result<(f64, usize), Error> {
    let steps = cfg.train.steps;
    let mut t = Trainer::new(cfg)?;
    for _ in 0..steps {
        t.step()?;
    }
    let loss = t.evaluate()?.iter().map(|r| r.loss).sum();
    Ok((loss, t.model.active_params()))
}

fn interference_mitigation() -> Outcome {
    let mut attr_wins = 0;
    let mut task_wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let (dense, dense_active) = summed_loss(ablation_config(None, seed)).map_err(|e| e.to_string())?;
        let (attr, attr_active) = summed_loss(ablation_config(Some(RoutingKind::Attribute), seed)).map_err(|e| e.to_string())?;
        let (task, task_active) = summed_loss(ablation_config(Some(RoutingKind::Task), seed)).map_err(|e| e.to_string())?;
        ensure!(
            dense_active == attr_active && dense_active == task_active,
            "active params differ: {dense_active} {attr_active} {task_active}"
        );
        attr_wins += usize::from(attr < dense);
        task_wins += usize::from(task < dense);
        rows.push(format!("{dense:.3}/{attr:.3}/{task:.3}"));
    }
    ensure!(attr_wins >= 4, "attribute beat dense in {attr_wins}/5 seeds: {}", rows.join(" "));
    ensure!(task_wins >= 4, "task beat dense in {task_wins}/5 seeds: {}", rows.join(" "));
    Ok(format!(
        "attribute {attr_wins}/5, task {task_wins}/5 seeds below dense; summed loss dense/attr/task {}",
        rows.join(" ")
    ))
}

fn generalization_bifurcation() -> Outcome {
    let mut lines = Vec::new();
    for kind in [RoutingKind::Attribute, RoutingKind::Modality, RoutingKind::Task] {
        let mut cfg = ablation_config(Some(kind), 0);
        cfg.train.steps = 50;
        let mut t = Trainer::new(cfg).map_err(|e| e.to_string())?;
        for _ in 0..50 {
            t.step().map_err(|e| e.to_string())?;
        }
        match (kind, run::zero_shot_eval(&t.model, &t.suite, 1)) {
            (RoutingKind::Task, Err(Error::UnknownTask { task_id, .. })) => lines.push(format!("task: unknown task {task_id}")),
            (RoutingKind::Task, other) => return Err(format!("task routing returned {other:?}")),
            (_, Ok(r)) => {
                ensure!(r.loss.is_finite() && (0.0..=1.0).contains(&r.accuracy), "{kind}: invalid score {r:?}");
                lines.push(format!("{kind}: accuracy {:.3}", r.accuracy));
            }
            (_, Err(e)) => return Err(format!("{kind}: {e}")),
        }
    }
    Ok(lines.join(", "))
}

fn balance() -> Outcome {
    let cfg = MoEConfig::default();
    let e = cfg.num_experts;
    ensure!(e == 8 && cfg.balance_coefficient == 0.01, "defaults changed");
    let store = ParamStore::new();
    let s = Session::frozen(&store, 0);
    let value = |rows: Vec<usize>| {
        let probs: Vec<Vec<f64>> = rows.iter().map(|&r| (0..e).map(|j| if j == r { 1.0 } else { 0.0 }).collect()).collect();
        let data: Vec<f64> = probs.iter().flatten().copied().collect();
        let p = s.constant(Tensor::matrix(rows.len(), e, data).unwrap());
        let decisions = rows.iter().zip(&probs).map(|(&r, w)| GateDecision::new(w.clone(), vec![r])).collect();
        let gate = Gate {
            probs: p,
            weights: p,
            decisions,
        };
        let l = balance_loss(&s, &[&gate], cfg.balance_coefficient).unwrap();
        let v = s.tape.value(l).item();
        v
    };
    let uniform = value((0..e).collect());
    let collapsed = value(vec![0; e]);
    ensure!(uniform == 0.01, "uniform batch gives {uniform}");
    ensure!(collapsed == 0.08, "one-hot batch gives {collapsed}");
    Ok(format!("uniform {uniform}, one-hot {collapsed}"))
}

fn capacity() -> Outcome {
    let cfg = MoEConfig {
        num_experts: 2,
        top_k: 1,
        noise_std: 0.0,
        strategy: RoutingKind::Token,
        ..MoEConfig::default()
    };
    let mut store = ParamStore::new();
    let layer = MoELayer::new(cfg, &mut store, "m", 3, 3, 1, &mut rng(3)).unwrap();
    let s = Session::frozen(&store, 0);
    let x = Tensor::randn(vec![4, 3], 1.0, &mut rng(4));
    let xv = s.constant(x.clone());
    let w = s.constant(Tensor::matrix(4, 2, vec![0.7, 0.0, 0.6, 0.0, 0.8, 0.0, 0.9, 0.0]).unwrap());
    let decisions = (0..4)
        .map(|t| GateDecision::new(s.tape.value(w).row(t).to_vec(), vec![0]))
        .collect();
    let gate = Gate {
        probs: w,
        weights: w,
        decisions,
    };
    let (y, adm) = layer.forward_batch_with_capacity(&s, xv, &gate, 1.0).unwrap();
    ensure!(adm.dropped == [2, 3], "factor 1.0 dropped {:?}", adm.dropped);
    let y = s.tape.value(y).clone();
    ensure!(y.row(2) == x.row(2) && y.row(3) == x.row(3), "dropped tokens are not identity");
    ensure!(y.row(0) != x.row(0) && y.row(1) != x.row(1), "admitted tokens were not projected");
    let (_, adm) = layer.forward_batch_with_capacity(&s, xv, &gate, 2.0).unwrap();
    ensure!(adm.dropped.is_empty(), "factor 2.0 dropped {:?}", adm.dropped);
    Ok("factor 1.0 drops tokens 3 and 4 to identity, factor 2.0 drops none".into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/attribute.toml");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_condmoe"))
            .arg("train")
            .arg(&config)
            .arg("--out-dir")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(status.status.success(), "train failed: {}", String::from_utf8_lossy(&status.stderr));
        outputs.push(std::fs::read(out.join("metrics.jsonl")).map_err(|e| e.to_string())?);
    }
    let lines = outputs[0].iter().filter(|&&b| b == b'\n').count();
    ensure!(lines > 0 && outputs[0] == outputs[1], "metrics.jsonl differs between runs");
    Ok(format!("{lines} metric lines, byte-identical"))
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient_correctness),
        ("gate contract", gate_contract),
        ("reparameterization equivalence", reparameterization),
        ("interference metric", interference_metric),
        ("interference mitigation", interference_mitigation),
        ("generalization bifurcation", generalization_bifurcation),
        ("balance loss", balance),
        ("capacity enforcement", capacity),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| Err(panic_message(&e)));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({secs:.1}s) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({secs:.1}s) {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
