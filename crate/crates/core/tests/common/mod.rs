//! Central finite-difference gradient oracle shared by integration tests.
#![allow(dead_code)]

pub mod checks;

use condmoe::tensor::{Tape, Tensor, Var};
use condmoe::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares reverse-mode gradients of `build` against central differences
/// for every input. `build` maps input handles to a scalar loss.
/// Returns the worst relative error over inputs.
pub fn gradcheck<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &vars).expect("forward");
    let grads = tape.backward(loss).expect("backward");

    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[which])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut f = |x: &[f64]| {
            let tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == which {
                        tape.constant(Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect();
            let loss = build(&tape, &vars).expect("forward");
            let v = tape.value(loss).item();
            v
        };
        let numeric = numeric_gradient(&mut f, input.data(), FD_STEP);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Fixed random projection turning any output into a scalar loss with
/// non-trivial gradients.
pub fn probe(tape: &Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y);
    let w = Tensor::randn(shape, 1.0, &mut rng(seed ^ 0x5eed));
    let c = tape.constant(w);
    let prod = tape.mul(y, c)?;
    Ok(tape.sum(prod))
}

/// Reverse-mode gradients of every parameter in `store` against central
/// differences of `loss`. Returns the relative error over all parameters.
pub fn param_gradcheck<F>(store: &condmoe::params::ParamStore, loss: F) -> f64
where
    F: Fn(&condmoe::params::Session) -> Result<Var>,
{
    use condmoe::params::Session;
    let s = Session::new(store, 0);
    let l = loss(&s).expect("forward");
    let g = s.tape.backward(l).expect("backward");
    let ids: Vec<_> = store.ids().collect();
    let analytic: Vec<f64> = s
        .param_grads(&g)
        .into_iter()
        .zip(&ids)
        .flat_map(|(g, id)| g.map(Tensor::into_data).unwrap_or_else(|| vec![0.0; store.get(*id).numel()]))
        .collect();
    let mut work = store.clone();
    let mut f = |x: &[f64]| {
        work.assign_flat(&ids, x).unwrap();
        let s = Session::frozen(&work, 0);
        let l = loss(&s).expect("forward");
        let v = s.tape.value(l).item();
        v
    };
    let numeric = numeric_gradient(&mut f, &store.flatten(&ids), FD_STEP);
    relative_error(&analytic, &numeric)
}

/// A context for task `task` with modalities {image, text}.
pub fn ctx(task: usize, token: condmoe::routing::Modality, causal: bool, target: bool) -> condmoe::routing::RoutingContext {
    use condmoe::routing::{Causation, Modality, ModalitySet, RoutingContext, TokenSource};
    RoutingContext::new(
        task,
        ModalitySet::of(&[Modality::Image, Modality::Text]),
        token,
        if causal { Causation::Causal } else { Causation::Bidirectional },
        if target { TokenSource::TargetSet } else { TokenSource::InputSet },
    )
    .unwrap()
}

/// Varied contexts over tasks 0..3, both modalities, both sources.
pub fn mixed_contexts(n: usize) -> Vec<condmoe::routing::RoutingContext> {
    use condmoe::routing::Modality;
    (0..n)
        .map(|t| {
            let m = if t % 2 == 0 { Modality::Image } else { Modality::Text };
            ctx(t % 3, m, false, t % 5 == 4)
        })
        .collect()
}
