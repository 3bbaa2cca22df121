//! Pre-norm transformer encoder whose projections can be swapped for
//! MoE layers according to a placement policy.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{balance_loss, Admission, DenseLinear, ExpertBank, Gate, GateDecision, MoEConfig, Router};
use crate::params::{ParamId, ParamStore, Session};
use crate::routing::RoutingContext;
use crate::tensor::{Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Which layers carry MoE projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPlacement {
    None,
    AllLayers,
    /// 0-based layers 1, 3, 5, ...
    EveryOtherLayer,
}

/// Which projections inside a marked layer become MoE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionScope {
    All,
    FfnOnly,
    AttentionOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
}

impl Projection {
    pub const ALL: [Projection; 6] = [Self::Q, Self::K, Self::V, Self::O, Self::Fc1, Self::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            Self::Q => "q",
            Self::K => "k",
            Self::V => "v",
            Self::O => "o",
            Self::Fc1 => "fc1",
            Self::Fc2 => "fc2",
        }
    }

    pub fn is_ffn(self) -> bool {
        matches!(self, Self::Fc1 | Self::Fc2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub moe_placement: LayerPlacement,
    pub moe_scope: ProjectionScope,
    pub layerscale_init: f64,
    pub stochastic_depth_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            ffn_ratio: 4,
            moe_placement: LayerPlacement::EveryOtherLayer,
            moe_scope: ProjectionScope::All,
            layerscale_init: 1e-3,
            stochastic_depth_rate: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::param(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::param("ffn_ratio must be positive"));
        }
        if !(0.0..1.0).contains(&self.stochastic_depth_rate) {
            return Err(Error::param("stochastic_depth_rate must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn placement_plan(&self) -> PlacementPlan {
        let layers = (0..self.depth)
            .map(|l| {
                let marked = match self.moe_placement {
                    LayerPlacement::None => false,
                    LayerPlacement::AllLayers => true,
                    LayerPlacement::EveryOtherLayer => l % 2 == 1,
                };
                Projection::ALL.map(|p| {
                    marked
                        && match self.moe_scope {
                            ProjectionScope::All => true,
                            ProjectionScope::FfnOnly => p.is_ffn(),
                            ProjectionScope::AttentionOnly => !p.is_ffn(),
                        }
                })
            })
            .collect();
        PlacementPlan { layers }
    }
}

/// Per layer, per projection: `true` for MoE, `false` for dense.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacementPlan {
    pub layers: Vec<[bool; 6]>,
}

impl PlacementPlan {
    pub fn is_moe(&self, layer: usize, p: Projection) -> bool {
        self.layers[layer][p as usize]
    }

    pub fn layer_has_moe(&self, layer: usize) -> bool {
        self.layers[layer].iter().any(|&m| m)
    }

    pub fn moe_projections(&self) -> usize {
        self.layers.iter().flatten().filter(|&&m| m).count()
    }
}

impl fmt::Display for PlacementPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (l, row) in self.layers.iter().enumerate() {
            write!(f, "layer {l}:")?;
            for p in Projection::ALL {
                write!(f, " {}={}", p.name(), if row[p as usize] { "moe" } else { "dense" })?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Proj {
    Dense { weight: ParamId, bias: ParamId, d_in: usize, d_out: usize },
    Moe(ExpertBank),
}

impl Proj {
    fn d_in_out(&self) -> (usize, usize) {
        match self {
            Proj::Dense { d_in, d_out, .. } => (*d_in, *d_out),
            Proj::Moe(bank) => (bank.d_in(), bank.d_out()),
        }
    }

    fn dense_size(&self) -> usize {
        let (i, o) = self.d_in_out();
        i * o + o
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ls1: ParamId,
    ls2: ParamId,
    projs: Vec<Proj>,
    router: Option<Router>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    /// Scalars touched per token: dense projections once, MoE projections
    /// `k` times. Excludes router parameters.
    pub active_per_token: usize,
    /// Gate and routing-strategy parameters.
    pub router: usize,
}

/// Forward result: the encoded tokens plus each MoE layer's gate.
pub struct EncoderOutput {
    pub output: Var,
    /// One entry per MoE-bearing layer, in layer order.
    pub gates: Vec<(usize, Gate)>,
    pub admissions: Vec<(usize, Vec<Admission>)>,
}

impl EncoderOutput {
    /// Balance loss over every gate, or `None` without data-dependent routing.
    pub fn balance_loss(&self, encoder: &Encoder, s: &Session) -> Result<Option<Var>> {
        if encoder.moe.strategy.is_data_independent() || self.gates.is_empty() {
            return Ok(None);
        }
        let gates: Vec<&Gate> = self.gates.iter().map(|(_, g)| g).collect();
        balance_loss(s, &gates, encoder.moe.balance_coefficient).map(Some)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    moe: MoEConfig,
    plan: PlacementPlan,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        config: EncoderConfig,
        moe: MoEConfig,
        store: &mut ParamStore,
        prefix: &str,
        num_tasks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        moe.validate()?;
        let plan = config.placement_plan();
        let d = config.width;
        let hidden = d * config.ffn_ratio;
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = format!("{prefix}.layer{l}");
            let ln = |store: &mut ParamStore, name: &str| -> Result<(ParamId, ParamId)> {
                Ok((
                    store.add(format!("{p}.{name}.gain"), Tensor::full(vec![d], 1.0))?,
                    store.add(format!("{p}.{name}.bias"), Tensor::zeros(vec![d]))?,
                ))
            };
            let ln1 = ln(store, "ln1")?;
            let ln2 = ln(store, "ln2")?;
            let ls1 = store.add(format!("{p}.ls1"), Tensor::full(vec![d], config.layerscale_init))?;
            let ls2 = store.add(format!("{p}.ls2"), Tensor::full(vec![d], config.layerscale_init))?;
            let router = if plan.layer_has_moe(l) {
                Some(Router::new(moe.clone(), store, &format!("{p}.router"), d, num_tasks, rng)?)
            } else {
                None
            };
            let mut projs = Vec::with_capacity(6);
            for proj in Projection::ALL {
                let (d_in, d_out) = match proj {
                    Projection::Fc1 => (d, hidden),
                    Projection::Fc2 => (hidden, d),
                    _ => (d, d),
                };
                let name = format!("{p}.{}", proj.name());
                projs.push(if plan.is_moe(l, proj) {
                    Proj::Moe(ExpertBank::new(store, &name, moe.num_experts, d_in, d_out, rng)?)
                } else {
                    let weight = store.add(
                        format!("{name}.weight"),
                        Tensor::randn(vec![d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng),
                    )?;
                    let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out]))?;
                    Proj::Dense { weight, bias, d_in, d_out }
                });
            }
            blocks.push(Block {
                ln1,
                ln2,
                ls1,
                ls2,
                projs,
                router,
            });
        }
        Ok(Self {
            config,
            moe,
            plan,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn moe_config(&self) -> &MoEConfig {
        &self.moe
    }

    pub fn plan(&self) -> &PlacementPlan {
        &self.plan
    }

    pub fn router(&self, layer: usize) -> Option<&Router> {
        self.blocks[layer].router.as_ref()
    }

    /// Expert bank of one projection, if it is an MoE projection.
    pub fn experts(&self, layer: usize, p: Projection) -> Option<&ExpertBank> {
        match &self.blocks[layer].projs[p as usize] {
            Proj::Moe(bank) => Some(bank),
            Proj::Dense { .. } => None,
        }
    }

    /// Dense weight and bias of one projection, if it is dense.
    pub fn dense(&self, layer: usize, p: Projection) -> Option<(ParamId, ParamId)> {
        match &self.blocks[layer].projs[p as usize] {
            Proj::Dense { weight, bias, .. } => Some((*weight, *bias)),
            Proj::Moe(_) => None,
        }
    }

    /// Shared parameters of a block named `ffn.<layer>` or `attn.<layer>`.
    pub fn block_params(&self, block_id: &str) -> Result<Vec<ParamId>> {
        let bad = || Error::param(format!("unknown block id {block_id}"));
        let (kind, layer) = block_id.split_once('.').ok_or_else(bad)?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        let block = self.blocks.get(layer).ok_or_else(bad)?;
        let wanted: &[Projection] = match kind {
            "ffn" => &[Projection::Fc1, Projection::Fc2],
            "attn" => &[Projection::Q, Projection::K, Projection::V, Projection::O],
            _ => return Err(bad()),
        };
        Ok(wanted
            .iter()
            .flat_map(|&p| match &block.projs[p as usize] {
                Proj::Dense { weight, bias, .. } => vec![*weight, *bias],
                Proj::Moe(bank) => bank.param_ids(),
            })
            .collect())
    }

    pub fn parameter_count(&self, store: &ParamStore) -> ParameterCount {
        let mut count = ParameterCount {
            total: 0,
            active_per_token: 0,
            router: 0,
        };
        for b in &self.blocks {
            let norms = [b.ln1.0, b.ln1.1, b.ln2.0, b.ln2.1, b.ls1, b.ls2];
            let n: usize = norms.iter().map(|&id| store.get(id).numel()).sum();
            count.total += n;
            count.active_per_token += n;
            for p in &b.projs {
                match p {
                    Proj::Dense { .. } => {
                        count.total += p.dense_size();
                        count.active_per_token += p.dense_size();
                    }
                    Proj::Moe(bank) => {
                        count.total += bank.num_experts() * bank.expert_size();
                        count.active_per_token += self.moe.top_k * bank.expert_size();
                    }
                }
            }
            if let Some(r) = &b.router {
                let n: usize = r.param_ids().iter().map(|&id| store.get(id).numel()).sum();
                count.total += n;
                count.router += n;
            }
        }
        count
    }

    /// Encodes `tokens: [n × d]`, grouped into sequences of `seq_len`, with
    /// one routing context per token.
    pub fn encode(
        &self,
        s: &Session,
        tokens: Var,
        contexts: &[RoutingContext],
        seq_len: usize,
        causal: bool,
        training: bool,
    ) -> Result<EncoderOutput> {
        let n = check_inputs(s, tokens, contexts, seq_len, self.config.width)?;
        let capacity_factor = if training {
            self.moe.capacity_factor_train
        } else {
            self.moe.capacity_factor_eval
        };
        let mut x = tokens;
        let mut gates = Vec::new();
        let mut admissions = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            let h = s.tape.layernorm(x, s.param(b.ln1.0), s.param(b.ln1.1), LN_EPS)?;
            let gate = match &b.router {
                Some(r) => {
                    let g = r.route(s, h, contexts, seq_len, training)?;
                    if let Some(usage) = s.usage_mut().as_mut() {
                        for (d, c) in g.decisions.iter().zip(contexts) {
                            usage.record(l, self.block_kind(l), &r.kind().routing_key(c), d);
                        }
                    }
                    Some(g)
                }
                None => None,
            };
            let mut layer_adm = Vec::new();
            let mut project = |p: Projection, input: Var| -> Result<Var> {
                match &b.projs[p as usize] {
                    Proj::Dense { weight, bias, d_in, d_out } => {
                        s.bump(|st| st.projection_mults += (n * d_in * d_out) as u64);
                        s.tape.linear(input, s.param(*weight), Some(s.param(*bias)))
                    }
                    Proj::Moe(bank) => {
                        let gate = gate.as_ref().expect("moe projection in a routed layer");
                        let capacity = (!self.moe.strategy.is_data_independent()).then(|| {
                            crate::moe::expert_capacity(capacity_factor, seq_len, self.moe.top_k, bank.num_experts())
                        });
                        let (y, adm) = bank.forward(s, input, gate, capacity, seq_len)?;
                        layer_adm.push(adm);
                        Ok(y)
                    }
                }
            };
            let q = project(Projection::Q, h)?;
            let k = project(Projection::K, h)?;
            let v = project(Projection::V, h)?;
            let a = s.tape.attention(q, k, v, seq_len, self.config.heads, causal)?;
            let o = project(Projection::O, a)?;
            x = self.residual(s, x, o, b.ls1, n, seq_len, training)?;
            let h2 = s.tape.layernorm(x, s.param(b.ln2.0), s.param(b.ln2.1), LN_EPS)?;
            let f = project(Projection::Fc1, h2)?;
            let f = s.tape.gelu(f);
            let f = project(Projection::Fc2, f)?;
            x = self.residual(s, x, f, b.ls2, n, seq_len, training)?;
            if let Some(g) = gate {
                gates.push((l, g));
                admissions.push((l, layer_adm));
            }
        }
        Ok(EncoderOutput {
            output: x,
            gates,
            admissions,
        })
    }

    /// Evaluation-mode encode in which every MoE projection is replaced by
    /// per-routing-key merged dense weights. Only valid for data-independent
    /// routing.
    pub fn encode_merged(
        &self,
        s: &Session,
        tokens: Var,
        contexts: &[RoutingContext],
        seq_len: usize,
        causal: bool,
    ) -> Result<Var> {
        if self.plan.moe_projections() > 0 && !self.moe.strategy.is_data_independent() {
            return Err(Error::Contract(format!(
                "{} routing is data-dependent and cannot be reparameterized",
                self.moe.strategy
            )));
        }
        let n = check_inputs(s, tokens, contexts, seq_len, self.config.width)?;
        let store = s.store();
        let mut x = tokens;
        for (l, b) in self.blocks.iter().enumerate() {
            let merged = self.merged_layer(store, l, contexts)?;
            let project = |p: Projection, input: Var| -> Result<Var> {
                match &b.projs[p as usize] {
                    Proj::Dense { weight, bias, d_in, d_out } => {
                        s.bump(|st| st.projection_mults += (n * d_in * d_out) as u64);
                        s.tape.linear(input, s.param(*weight), Some(s.param(*bias)))
                    }
                    Proj::Moe(bank) => {
                        let (groups, dense) = merged.as_ref().expect("merged weights for a routed layer");
                        let mut parts = Vec::with_capacity(groups.len());
                        for (rows, per_proj) in groups.iter().zip(dense) {
                            let lin = &per_proj[p as usize];
                            let xg = s.tape.gather_rows(input, rows)?;
                            let w = s.constant(lin.as_ref().expect("merged projection").weight.clone());
                            let bb = s.constant(lin.as_ref().expect("merged projection").bias.clone());
                            parts.push((s.tape.linear(xg, w, Some(bb))?, rows.clone()));
                        }
                        s.bump(|st| st.projection_mults += (n * bank.d_in() * bank.d_out()) as u64);
                        s.tape.scatter_add_rows(n, bank.d_out(), &parts)
                    }
                }
            };
            let h = s.tape.layernorm(x, s.param(b.ln1.0), s.param(b.ln1.1), LN_EPS)?;
            let q = project(Projection::Q, h)?;
            let k = project(Projection::K, h)?;
            let v = project(Projection::V, h)?;
            let a = s.tape.attention(q, k, v, seq_len, self.config.heads, causal)?;
            let o = project(Projection::O, a)?;
            x = self.residual(s, x, o, b.ls1, n, seq_len, false)?;
            let h2 = s.tape.layernorm(x, s.param(b.ln2.0), s.param(b.ln2.1), LN_EPS)?;
            let f = project(Projection::Fc1, h2)?;
            let f = s.tape.gelu(f);
            let f = project(Projection::Fc2, f)?;
            x = self.residual(s, x, f, b.ls2, n, seq_len, false)?;
        }
        Ok(x)
    }

    /// Token groups sharing a gate decision and, per group, the merged
    /// projections of layer `l`.
    #[allow(clippy::type_complexity)]
    fn merged_layer(
        &self,
        store: &ParamStore,
        l: usize,
        contexts: &[RoutingContext],
    ) -> Result<Option<(Vec<Vec<usize>>, Vec<Vec<Option<DenseLinear>>>)>> {
        let b = &self.blocks[l];
        let Some(router) = &b.router else {
            return Ok(None);
        };
        let decisions = router.decide_contexts(store, contexts)?;
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut reps: Vec<&GateDecision> = Vec::new();
        for (t, d) in decisions.iter().enumerate() {
            let g = *index.entry(d.key()).or_insert_with(|| {
                groups.push(Vec::new());
                reps.push(d);
                groups.len() - 1
            });
            groups[g].push(t);
        }
        let dense = reps
            .iter()
            .map(|d| {
                b.projs
                    .iter()
                    .map(|p| match p {
                        Proj::Moe(bank) => bank.merge(store, d).map(Some),
                        Proj::Dense { .. } => Ok(None),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some((groups, dense)))
    }

    fn block_kind(&self, layer: usize) -> &'static str {
        let row = &self.plan.layers[layer];
        let ffn = row[Projection::Fc1 as usize] || row[Projection::Fc2 as usize];
        let attn = row[..4].iter().any(|&m| m);
        match (attn, ffn) {
            (true, true) => "block",
            (false, true) => "ffn",
            _ => "attn",
        }
    }

    /// `x + drop_path(ls ⊙ branch)`; stochastic depth drops whole sequences.
    #[allow(clippy::too_many_arguments)]
    fn residual(
        &self,
        s: &Session,
        x: Var,
        branch: Var,
        ls: ParamId,
        n: usize,
        seq_len: usize,
        training: bool,
    ) -> Result<Var> {
        let mut y = s.tape.mul_row(branch, s.param(ls))?;
        let rate = self.config.stochastic_depth_rate;
        if training && rate > 0.0 {
            let keep = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = {
                let mut rng = s.rng();
                let per_seq: Vec<f64> = (0..n / seq_len)
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                (0..n).map(|t| per_seq[t / seq_len]).collect()
            };
            y = s.tape.scale_rows(y, s.constant(Tensor::vector(mask)))?;
        }
        s.tape.add(x, y)
    }
}

fn check_inputs(s: &Session, tokens: Var, contexts: &[RoutingContext], seq_len: usize, width: usize) -> Result<usize> {
    let shape = s.tape.shape(tokens);
    if shape.len() != 2 || shape[1] != width {
        return Err(Error::param(format!("encoder expects [n x {width}] tokens, got {shape:?}")));
    }
    let n = shape[0];
    if contexts.len() != n {
        return Err(Error::param(format!("{} contexts for {n} tokens", contexts.len())));
    }
    if seq_len == 0 || n % seq_len != 0 {
        return Err(Error::param(format!("{n} tokens do not split into sequences of {seq_len}")));
    }
    Ok(n)
}
