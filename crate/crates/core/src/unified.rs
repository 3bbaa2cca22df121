//! Unified task formulation: every task scores (input, candidate target)
//! pairs by temperature-scaled cosine similarity and predicts the argmax.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::routing::{Causation, ModalitySet};
use crate::tensor::{Tensor, Var};

pub const TAU_MIN: f64 = 1e-2;
pub const TAU_MAX: f64 = 100.0;

/// Learnable temperature stored as `log τ`; the effective `τ` is clamped
/// to `[TAU_MIN, TAU_MAX]`.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityHead {
    log_tau: ParamId,
}

impl SimilarityHead {
    pub fn new(store: &mut ParamStore, name: &str, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::param(format!("temperature {tau} must be positive")));
        }
        let log_tau = store.add(name, Tensor::vector(vec![tau.ln()]))?;
        Ok(Self { log_tau })
    }

    pub fn param_id(&self) -> ParamId {
        self.log_tau
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau).data()[0].exp().clamp(TAU_MIN, TAU_MAX)
    }

    /// `1/τ` as a one-element variable.
    pub fn inverse_tau(&self, s: &Session) -> Var {
        let neg = s.tape.scale(s.param(self.log_tau), -1.0);
        s.tape.clamp(s.tape.exp(neg), 1.0 / TAU_MAX, 1.0 / TAU_MIN)
    }

    /// `cos(fx, fy) / τ` for two `[d]` representations.
    pub fn joint_logit(&self, s: &Session, fx: Var, fy: Var) -> Result<Var> {
        let cos = s.tape.cosine_similarity(fx, fy)?;
        s.tape.mul_scalar(cos, self.inverse_tau(s))
    }

    /// `[n × c]` logits between `n` inputs and `c` candidates.
    pub fn joint_logits(&self, s: &Session, fx: Var, fy: Var) -> Result<Var> {
        let xn = s.tape.l2_normalize_rows(fx)?;
        let yn = s.tape.l2_normalize_rows(fy)?;
        let cos = s.tape.linear(xn, yn, None)?;
        s.tape.mul_scalar(cos, self.inverse_tau(s))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> Result<usize> {
    if row.is_empty() {
        return Err(Error::param("argmax over an empty candidate set"));
    }
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    Ok(best)
}

fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::numeric("cosine similarity of a zero vector"));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

/// Maximum-likelihood candidate for `fx` under temperature `tau`.
pub fn predict(fx: &[f64], candidates: &[Vec<f64>], tau: f64) -> Result<usize> {
    let logits = candidates
        .iter()
        .map(|c| cosine(fx, c).map(|v| v / tau))
        .collect::<Result<Vec<_>>>()?;
    argmax(&logits)
}

/// Per-row argmax of a `[n × c]` logit tensor.
pub fn predict_rows(logits: &Tensor) -> Result<Vec<usize>> {
    (0..logits.rows()).map(|r| argmax(logits.row(r))).collect()
}

/// Label-smoothed cross entropy over joint logits.
pub fn task_loss(s: &Session, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let c = s.tape.value(logits).last_dim();
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::param(format!("true index {t} out of range for {c} candidates")));
    }
    s.tape.cross_entropy_smoothed(logits, targets, smoothing)
}

/// `Σ_i w_i · L_i` over per-task mean losses.
pub fn pretraining_loss(s: &Session, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(loss, w) in terms {
        let term = s.tape.scale(loss, w);
        acc = Some(match acc {
            None => term,
            Some(a) => s.tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::param("pretraining loss needs at least one task"))
}

/// Static description of one training task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDefinition {
    pub task_id: usize,
    pub name: String,
    pub task_modalities: ModalitySet,
    pub causation: Causation,
    pub dataset_size: usize,
    pub loss_weight: f64,
}

impl TaskDefinition {
    pub fn sampling_weight(&self) -> f64 {
        (self.dataset_size as f64).sqrt()
    }
}

/// Sampling probabilities proportional to the square root of dataset size.
pub fn sqrt_size_weights(sizes: &[usize]) -> Vec<f64> {
    let raw: Vec<f64> = sizes.iter().map(|&n| (n as f64).sqrt()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Categorical draw proportional to `weights`.
pub fn sample_task<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::param("task weights must be a non-empty list of non-negative values"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::param("task weights sum to zero"));
    }
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(weights.iter().rposition(|&w| w > 0.0).expect("positive total"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(tau: f64) -> (ParamStore, SimilarityHead) {
        let mut store = ParamStore::new();
        let h = SimilarityHead::new(&mut store, "log_tau", tau).unwrap();
        (store, h)
    }

    #[test]
    fn joint_logit_examples() {
        let (store, h) = head(1.0);
        let s = Session::frozen(&store, 0);
        let fx = s.constant(Tensor::vector(vec![1.0, 2.0, -1.0]));
        let same = h.joint_logit(&s, fx, fx).unwrap();
        assert!((s.tape.value(same).item() - 1.0).abs() < 1e-12);
        let perp = s.constant(Tensor::vector(vec![2.0, -1.0, 0.0]));
        let v = h.joint_logit(&s, fx, perp).unwrap();
        assert!(s.tape.value(v).item().abs() < 1e-12);
        let other = s.constant(Tensor::vector(vec![0.3, -0.2, 0.9]));
        let scaled = s.constant(Tensor::vector(vec![1.5, -1.0, 4.5]));
        let a = h.joint_logit(&s, fx, other).unwrap();
        let b = h.joint_logit(&s, fx, scaled).unwrap();
        assert!((s.tape.value(a).item() - s.tape.value(b).item()).abs() < 1e-12);
        let zero = s.constant(Tensor::zeros(vec![3]));
        assert!(matches!(h.joint_logit(&s, fx, zero), Err(Error::Numeric(_))));
    }

    #[test]
    fn temperature_is_clamped() {
        let (store, h) = head(1e-6);
        assert_eq!(h.tau(&store), TAU_MIN);
        let s = Session::frozen(&store, 0);
        assert!((s.tape.value(h.inverse_tau(&s)).item() - 100.0).abs() < 1e-9);
        assert!(SimilarityHead::new(&mut ParamStore::new(), "t", 0.0).is_err());
    }

    #[test]
    fn predict_examples() {
        let fx = vec![1.0, 0.0];
        assert_eq!(predict(&fx, &[fx.clone(), vec![0.0, 1.0]], 1.0).unwrap(), 0);
        assert_eq!(predict(&fx, &[vec![0.0, 1.0]], 1.0).unwrap(), 0);
        assert_eq!(predict(&fx, &[vec![0.0, 1.0], vec![1.0, 1.0]], 0.05).unwrap(), 1);
        assert_eq!(predict(&fx, &[vec![1.0, 1.0], vec![1.0, -1.0]], 1.0).unwrap(), 0);
        assert!(predict(&fx, &[], 1.0).is_err());
    }

    #[test]
    fn task_loss_examples() {
        let (store, _) = head(1.0);
        let s = Session::frozen(&store, 0);
        let one = s.constant(Tensor::vector(vec![0.7]));
        assert!(s.tape.value(task_loss(&s, one, &[0], 0.0).unwrap()).item().abs() < 1e-15);
        let uniform = s.constant(Tensor::vector(vec![0.2; 5]));
        let l = task_loss(&s, uniform, &[3], 0.0).unwrap();
        assert!((s.tape.value(l).item() - 5f64.ln()).abs() < 1e-12);
        let two = s.constant(Tensor::vector(vec![1.0, 0.0]));
        let l = task_loss(&s, two, &[0], 0.0).unwrap();
        assert!((s.tape.value(l).item() - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!(task_loss(&s, two, &[2], 0.0).is_err());
    }

    #[test]
    fn pretraining_loss_is_weighted_sum() {
        let store = ParamStore::new();
        let s = Session::frozen(&store, 0);
        let a = s.constant(Tensor::scalar(1.25));
        let b = s.constant(Tensor::scalar(0.5));
        let l = pretraining_loss(&s, &[(a, 1.0), (b, 1.0)]).unwrap();
        assert_eq!(s.tape.value(l).item(), 1.75);
        let l = pretraining_loss(&s, &[(a, 2.0), (b, 0.0)]).unwrap();
        assert_eq!(s.tape.value(l).item(), 2.5);
        assert!(pretraining_loss(&s, &[]).is_err());
    }

    #[test]
    fn task_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!((0..1000).all(|_| sample_task(&[1.0, 0.0], &mut rng).unwrap() == 0));
        let n = 10_000;
        let ones = (0..n).filter(|_| sample_task(&[1.0, 1.0], &mut rng).unwrap() == 1).count();
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((ones as f64 - n as f64 / 2.0).abs() < 3.0 * sigma);
        let w = sqrt_size_weights(&[100, 400]);
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(sample_task(&[], &mut rng).is_err());
        assert!(sample_task(&[0.0, 0.0], &mut rng).is_err());
    }
}
