//! The conditional mixture-of-experts linear layer.
//!
//! A [`Router`] turns routing features into sparse gate decisions
//! `G = top_k(softmax(W_g · R(x) + ε))`; an [`ExpertBank`] applies
//! `y = Σ_e G_e · (W_e x + b_e)` evaluating only the selected experts.
//! Data-independent routers can be folded into a single [`DenseLinear`].

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::routing::{RoutingContext, RoutingKind, RoutingStrategy};
use crate::tensor::{top_k_indices, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoEConfig {
    pub num_experts: usize,
    pub top_k: usize,
    /// Std of the Gaussian noise added to gate logits in training mode.
    pub noise_std: f64,
    pub capacity_factor_train: f64,
    pub capacity_factor_eval: f64,
    pub balance_coefficient: f64,
    pub strategy: RoutingKind,
    /// Rescale the kept top-k gate values to sum to one.
    pub renormalize: bool,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            num_experts: 8,
            top_k: 2,
            noise_std: 1.0 / 8.0,
            capacity_factor_train: 1.0,
            capacity_factor_eval: 2.0,
            balance_coefficient: 1e-2,
            strategy: RoutingKind::Attribute,
            renormalize: false,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::param(format!(
                "top_k = {} must lie in 1..={}",
                self.top_k, self.num_experts
            )));
        }
        if self.capacity_factor_train <= 0.0 || self.capacity_factor_eval <= 0.0 {
            return Err(Error::param("capacity factors must be positive"));
        }
        if self.balance_coefficient < 0.0 || self.noise_std < 0.0 {
            return Err(Error::param("balance coefficient and noise std must be non-negative"));
        }
        Ok(())
    }
}

/// One token's sparse mixture weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    weights: Vec<f64>,
    selected: Vec<usize>,
}

impl GateDecision {
    pub fn new(weights: Vec<f64>, selected: Vec<usize>) -> Self {
        Self { weights, selected }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Selected expert indices in ascending order.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn num_experts(&self) -> usize {
        self.weights.len()
    }

    /// Bit-exact identity used to group tokens sharing a decision.
    pub fn key(&self) -> Vec<u64> {
        self.weights.iter().map(|w| w.to_bits()).collect()
    }
}

/// Gate output for a batch of tokens.
pub struct Gate {
    /// Pre-top-k softmax probabilities, `[n × E]`.
    pub probs: Var,
    /// Sparse mixture weights, `[n × E]`.
    pub weights: Var,
    pub decisions: Vec<GateDecision>,
}

/// Number of tokens each expert accepts: `ceil(factor · tokens · k / E)`.
pub fn expert_capacity(factor: f64, tokens: usize, top_k: usize, num_experts: usize) -> usize {
    (factor * tokens as f64 * top_k as f64 / num_experts as f64).ceil() as usize
}

/// Which tokens each expert processes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Admission {
    /// Token indices routed to each expert, in sequence order.
    pub per_expert: Vec<Vec<usize>>,
    /// Tokens whose every selected expert was full.
    pub dropped: Vec<usize>,
}

impl Admission {
    /// Admits tokens to experts in sequence order until `capacity` is hit.
    /// Quotas reset every `group_len` tokens (one group per sequence).
    pub fn compute(decisions: &[GateDecision], num_experts: usize, capacity: Option<usize>, group_len: usize) -> Self {
        let mut per_expert = vec![Vec::new(); num_experts];
        let mut used = vec![0usize; num_experts];
        let mut dropped = Vec::new();
        for (t, d) in decisions.iter().enumerate() {
            if group_len > 0 && t % group_len == 0 {
                used.iter_mut().for_each(|u| *u = 0);
            }
            let mut admitted_any = false;
            for &e in d.selected() {
                if capacity.is_none_or(|c| used[e] < c) {
                    used[e] += 1;
                    per_expert[e].push(t);
                    admitted_any = true;
                }
            }
            if !admitted_any {
                dropped.push(t);
            }
        }
        Self { per_expert, dropped }
    }

    pub fn evaluations(&self) -> usize {
        self.per_expert.iter().map(Vec::len).sum()
    }
}

/// Gate parameters plus a routing strategy; one per MoE-bearing layer.
#[derive(Clone, Debug)]
pub struct Router {
    config: MoEConfig,
    strategy: RoutingStrategy,
    w_gate: ParamId,
}

impl Router {
    pub fn new<R: Rng + ?Sized>(
        config: MoEConfig,
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        num_tasks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let strategy = RoutingStrategy::new(config.strategy, store, &format!("{prefix}.route"), width, num_tasks, rng)?;
        let fw = strategy.feature_width();
        let w_gate = store.add(
            format!("{prefix}.w_gate"),
            Tensor::randn(vec![config.num_experts, fw], 1.0 / (fw as f64).sqrt(), rng),
        )?;
        Ok(Self {
            config,
            strategy,
            w_gate,
        })
    }

    pub fn config(&self) -> &MoEConfig {
        &self.config
    }

    pub fn strategy(&self) -> &RoutingStrategy {
        &self.strategy
    }

    pub fn kind(&self) -> RoutingKind {
        self.strategy.kind()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.strategy.param_ids();
        ids.push(self.w_gate);
        ids
    }

    /// Gate decisions for routing features `[n × d_r]`.
    pub fn gate(&self, s: &Session, features: Var, training: bool) -> Result<Gate> {
        let logits = s.tape.linear(features, s.param(self.w_gate), None)?;
        let logits = if training && self.config.noise_std > 0.0 {
            let shape = s.tape.shape(logits);
            let numel = shape.iter().product();
            let noise: Vec<f64> = {
                let mut rng = s.rng();
                (0..numel)
                    .map(|_| self.config.noise_std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            s.tape.add_const(logits, &Tensor::new(shape, noise)?)?
        } else {
            logits
        };
        let probs = s.tape.softmax(logits)?;
        let masked = s.tape.top_k_mask(probs, self.config.top_k)?;
        let weights = if self.config.renormalize {
            s.tape.row_normalize(masked)?
        } else {
            masked
        };
        let decisions = {
            let w = s.tape.value(weights);
            let p = s.tape.value(probs);
            (0..w.rows())
                .map(|r| GateDecision::new(w.row(r).to_vec(), top_k_indices(p.row(r), self.config.top_k)))
                .collect::<Vec<_>>()
        };
        s.bump(|st| st.gate_calls += decisions.len());
        Ok(Gate {
            probs,
            weights,
            decisions,
        })
    }

    /// Features and gate in one call.
    pub fn route(
        &self,
        s: &Session,
        tokens: Var,
        contexts: &[RoutingContext],
        seq_len: usize,
        training: bool,
    ) -> Result<Gate> {
        let features = self.strategy.features(s, tokens, contexts, seq_len)?;
        self.gate(s, features, training)
    }

    /// Noise-free decisions computed from metadata alone.
    pub fn decide_contexts(&self, store: &ParamStore, contexts: &[RoutingContext]) -> Result<Vec<GateDecision>> {
        if !self.kind().is_data_independent() {
            return Err(Error::Contract(format!(
                "{} routing depends on token values; decisions cannot be precomputed",
                self.kind()
            )));
        }
        let s = Session::frozen(store, 0);
        let features = match self.kind() {
            RoutingKind::Modality => self.strategy.route_modality(&s, contexts)?,
            RoutingKind::Task => self.strategy.route_task(&s, contexts)?,
            _ => self.strategy.route_attribute(&s, contexts)?,
        };
        Ok(self.gate(&s, features, false)?.decisions)
    }
}

/// Plain dense projection `y = W x + b` as values.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLinear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLinear {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.matvec(x)?;
        for (yi, bi) in y.iter_mut().zip(self.bias.data()) {
            *yi += bi;
        }
        Ok(y)
    }
}

/// `E` same-shaped linear experts.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    experts: Vec<(ParamId, ParamId)>,
    d_in: usize,
    d_out: usize,
}

impl ExpertBank {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        num_experts: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        let experts = (0..num_experts)
            .map(|e| {
                let w = store.add(format!("{prefix}.expert{e}.weight"), Tensor::randn(vec![d_out, d_in], std, rng))?;
                let b = store.add(format!("{prefix}.expert{e}.bias"), Tensor::zeros(vec![d_out]))?;
                Ok((w, b))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { experts, d_in, d_out })
    }

    /// Builds a bank from existing parameters.
    pub fn from_params(store: &ParamStore, experts: Vec<(ParamId, ParamId)>) -> Result<Self> {
        let first = experts.first().ok_or_else(|| Error::param("expert bank needs at least one expert"))?;
        let shape = store.get(first.0).shape().to_vec();
        let [d_out, d_in] = shape[..] else {
            return Err(Error::param("expert weights must be rank-2"));
        };
        for (w, b) in &experts {
            if store.get(*w).shape() != shape.as_slice() || store.get(*b).shape() != [d_out] {
                return Err(Error::param("experts must share one shape"));
            }
        }
        Ok(Self { experts, d_in, d_out })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn expert(&self, e: usize) -> (ParamId, ParamId) {
        self.experts[e]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.experts.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }

    /// Scalars in one expert (weight and bias).
    pub fn expert_size(&self) -> usize {
        self.d_out * self.d_in + self.d_out
    }

    /// Sparse mixture over the admitted (token, expert) pairs. Tokens dropped
    /// by capacity pass through unchanged when the projection is square and
    /// contribute zeros otherwise.
    pub fn forward(
        &self,
        s: &Session,
        x: Var,
        gate: &Gate,
        capacity: Option<usize>,
        group_len: usize,
    ) -> Result<(Var, Admission)> {
        let n = s.tape.value(x).rows();
        if gate.decisions.len() != n {
            return Err(Error::param(format!("{} gate decisions for {n} tokens", gate.decisions.len())));
        }
        let num_experts = self.experts.len();
        if gate.decisions.iter().any(|d| d.num_experts() != num_experts) {
            return Err(Error::param("gate width does not match the expert count"));
        }
        let admission = Admission::compute(&gate.decisions, num_experts, capacity, group_len);
        let mut parts = Vec::new();
        for (e, tokens) in admission.per_expert.iter().enumerate() {
            if tokens.is_empty() {
                continue;
            }
            let (w, b) = self.experts[e];
            let xe = s.tape.gather_rows(x, tokens)?;
            let ye = s.tape.linear(xe, s.param(w), Some(s.param(b)))?;
            let flat: Vec<usize> = tokens.iter().map(|&t| t * num_experts + e).collect();
            let ge = s.tape.gather_flat(gate.weights, &flat)?;
            parts.push((s.tape.scale_rows(ye, ge)?, tokens.clone()));
            s.bump(|st| {
                st.expert_evals += tokens.len();
                st.projection_mults += (tokens.len() * self.d_in * self.d_out) as u64;
            });
        }
        if !admission.dropped.is_empty() && self.d_in == self.d_out {
            parts.push((s.tape.gather_rows(x, &admission.dropped)?, admission.dropped.clone()));
        }
        let y = s.tape.scatter_add_rows(n, self.d_out, &parts)?;
        Ok((y, admission))
    }

    /// Dense weights `Σ_e G_e W_e` and bias `Σ_e G_e b_e` for one decision.
    pub fn merge(&self, store: &ParamStore, decision: &GateDecision) -> Result<DenseLinear> {
        if decision.num_experts() != self.experts.len() {
            return Err(Error::param("gate width does not match the expert count"));
        }
        let mut weight = Tensor::zeros(vec![self.d_out, self.d_in]);
        let mut bias = Tensor::zeros(vec![self.d_out]);
        for &e in decision.selected() {
            let g = decision.weights()[e];
            let (w, b) = self.experts[e];
            for (acc, v) in weight.data_mut().iter_mut().zip(store.get(w).data()) {
                *acc += g * v;
            }
            for (acc, v) in bias.data_mut().iter_mut().zip(store.get(b).data()) {
                *acc += g * v;
            }
        }
        Ok(DenseLinear { weight, bias })
    }
}

/// A standalone MoE linear layer: one router and one expert bank.
#[derive(Clone, Debug)]
pub struct MoELayer {
    pub router: Router,
    pub experts: ExpertBank,
}

impl MoELayer {
    pub fn new<R: Rng + ?Sized>(
        config: MoEConfig,
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        num_tasks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let num_experts = config.num_experts;
        let router = Router::new(config, store, prefix, d_in, num_tasks, rng)?;
        let experts = ExpertBank::new(store, prefix, num_experts, d_in, d_out, rng)?;
        Ok(Self { router, experts })
    }

    pub fn gate(&self, s: &Session, features: Var, training: bool) -> Result<Gate> {
        self.router.gate(s, features, training)
    }

    /// `y = Σ_{e ∈ selected} G_e (W_e x + b_e)`, no capacity limit.
    pub fn forward(&self, s: &Session, x: Var, gate: &Gate) -> Result<Var> {
        Ok(self.experts.forward(s, x, gate, None, 0)?.0)
    }

    /// Forward over one sequence of `L` tokens with per-expert capacity
    /// `ceil(factor · L · k / E)`.
    pub fn forward_batch_with_capacity(
        &self,
        s: &Session,
        x: Var,
        gate: &Gate,
        capacity_factor: f64,
    ) -> Result<(Var, Admission)> {
        let n = gate.decisions.len();
        self.forward_sequences_with_capacity(s, x, gate, capacity_factor, n)
    }

    /// As [`forward_batch_with_capacity`](Self::forward_batch_with_capacity)
    /// with a separate quota per sequence of `seq_len` rows. Capacity only
    /// applies to data-dependent routing.
    pub fn forward_sequences_with_capacity(
        &self,
        s: &Session,
        x: Var,
        gate: &Gate,
        capacity_factor: f64,
        seq_len: usize,
    ) -> Result<(Var, Admission)> {
        let capacity = (!self.router.kind().is_data_independent()).then(|| {
            expert_capacity(capacity_factor, seq_len, self.router.config().top_k, self.experts.num_experts())
        });
        self.experts.forward(s, x, gate, capacity, seq_len)
    }

    /// Folds the experts into one dense projection for a fixed decision.
    pub fn reparameterize(&self, store: &ParamStore, decision: &GateDecision) -> Result<DenseLinear> {
        if !self.router.kind().is_data_independent() {
            return Err(Error::Contract(format!(
                "{} routing is data-dependent and cannot be reparameterized",
                self.router.kind()
            )));
        }
        self.experts.merge(store, decision)
    }
}

/// `α · E · Σ_e f_e · P_e` where `f_e` is the fraction of tokens whose top-1
/// expert is `e` and `P_e` the mean pre-top-k probability of `e`.
pub fn balance_loss(s: &Session, gates: &[&Gate], alpha: f64) -> Result<Var> {
    let total: usize = gates.iter().map(|g| g.decisions.len()).sum();
    if total == 0 {
        return Err(Error::param("balance loss over an empty batch"));
    }
    let num_experts = s.tape.value(gates[0].probs).last_dim();
    let mut frac = vec![0.0; num_experts];
    let mut mean_probs: Option<Var> = None;
    for g in gates {
        let n = g.decisions.len();
        if n == 0 {
            continue;
        }
        {
            let p = s.tape.value(g.probs);
            for r in 0..n {
                frac[top_k_indices(p.row(r), 1)[0]] += 1.0 / total as f64;
            }
        }
        let part = s.tape.segment_mean(g.probs, n)?;
        let part = s.tape.scale(part, n as f64 / total as f64);
        mean_probs = Some(match mean_probs {
            None => part,
            Some(acc) => s.tape.add(acc, part)?,
        });
    }
    let mean_probs = mean_probs.expect("non-empty batch");
    let weighted = s.tape.mul_const(mean_probs, &Tensor::new(vec![1, num_experts], frac)?)?;
    let sum = s.tape.sum(weighted);
    Ok(s.tape.scale(sum, alpha * num_experts as f64))
}

/// Per-expert dispatch counts keyed by (layer, block kind, routing key).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UsageHistogram {
    counts: BTreeMap<(usize, String, String), Vec<u64>>,
}

impl UsageHistogram {
    pub fn record(&mut self, layer: usize, block_kind: &str, routing_key: &str, decision: &GateDecision) {
        let row = self
            .counts
            .entry((layer, block_kind.to_string(), routing_key.to_string()))
            .or_insert_with(|| vec![0; decision.num_experts()]);
        for &e in decision.selected() {
            row[e] += 1;
        }
    }

    /// Histogram of one layer's decisions keyed by `kind.routing_key(ctx)`.
    pub fn from_decisions(
        layer: usize,
        block_kind: &str,
        kind: RoutingKind,
        decisions: &[GateDecision],
        contexts: &[RoutingContext],
    ) -> Self {
        let mut h = Self::default();
        for (d, c) in decisions.iter().zip(contexts) {
            h.record(layer, block_kind, &kind.routing_key(c), d);
        }
        h
    }

    pub fn merge(&mut self, other: &UsageHistogram) {
        for (k, v) in &other.counts {
            let row = self.counts.entry(k.clone()).or_insert_with(|| vec![0; v.len()]);
            for (a, b) in row.iter_mut().zip(v) {
                *a += b;
            }
        }
    }

    pub fn get(&self, layer: usize, block_kind: &str, routing_key: &str) -> Option<&[u64]> {
        self.counts
            .get(&(layer, block_kind.to_string(), routing_key.to_string()))
            .map(Vec::as_slice)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().flatten().sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &str, &str, &[u64])> {
        self.counts
            .iter()
            .map(|((l, b, k), v)| (*l, b.as_str(), k.as_str(), v.as_slice()))
    }

    /// CSV with columns `layer,block_kind,routing_key,expert_id,count`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "block_kind", "routing_key", "expert_id", "count"])?;
        for (layer, kind, key, counts) in self.rows() {
            for (e, c) in counts.iter().enumerate() {
                w.write_record([layer.to_string(), kind.to_string(), key.to_string(), e.to_string(), c.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
