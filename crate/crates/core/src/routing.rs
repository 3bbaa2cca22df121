//! Routing features `R(x)` for the five conditional routing strategies.
//!
//! Token- and context-level routing read token values and are therefore
//! data-dependent. Modality-, task- and attribute-level routing read only the
//! per-token [`RoutingContext`], so every token with the same metadata gets
//! the same feature (and later the same gate decision).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

/// Version tag of the attribute bit layout; stored in checkpoints.
pub const ATTR_LAYOUT_TAG: &str = "attr-v1";

/// Number of attribute bits.
pub const ATTR_BITS: usize = 8;

const ATTR_LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Text, Modality::Video];

    pub fn index(self) -> usize {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
            Modality::Video => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Video => "video",
        }
    }
}

/// Subset of {image, text, video}.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub fn of(modalities: &[Modality]) -> Self {
        let mut s = Self::default();
        for &m in modalities {
            s.0 |= 1 << m.index();
        }
        s
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<Modality>::deserialize(d)?;
        Ok(ModalitySet::of(&v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Causation {
    Bidirectional,
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    InputSet,
    TargetSet,
}

/// Per-token metadata consumed by the routing strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RoutingContext {
    task_id: usize,
    task_modalities: ModalitySet,
    token_modality: Modality,
    causation: Causation,
    token_source: TokenSource,
}

impl RoutingContext {
    pub fn new(
        task_id: usize,
        task_modalities: ModalitySet,
        token_modality: Modality,
        causation: Causation,
        token_source: TokenSource,
    ) -> Result<Self> {
        if !task_modalities.contains(token_modality) {
            return Err(Error::param(format!(
                "token modality {} is not one of the task's modalities",
                token_modality.name()
            )));
        }
        Ok(Self {
            task_id,
            task_modalities,
            token_modality,
            causation,
            token_source,
        })
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn task_modalities(&self) -> ModalitySet {
        self.task_modalities
    }

    pub fn token_modality(&self) -> Modality {
        self.token_modality
    }

    pub fn causation(&self) -> Causation {
        self.causation
    }

    pub fn token_source(&self) -> TokenSource {
        self.token_source
    }

    /// Same metadata under a different task id.
    pub fn with_task_id(mut self, task_id: usize) -> Self {
        self.task_id = task_id;
        self
    }

    pub fn attributes(&self) -> AttributeVector {
        AttributeVector::from_context(self)
    }
}

/// 8-bit token descriptor (layout `attr-v1`):
///
/// | bits | meaning |
/// |------|---------|
/// | 0–2  | task modalities, multi-hot (image, text, video) |
/// | 3–5  | token modality, one-hot (image, text, video) |
/// | 6    | causal attention |
/// | 7    | token comes from the target set |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeVector([u8; ATTR_BITS]);

impl AttributeVector {
    pub fn from_context(ctx: &RoutingContext) -> Self {
        let mut bits = [0u8; ATTR_BITS];
        for m in ctx.task_modalities.iter() {
            bits[m.index()] = 1;
        }
        bits[3 + ctx.token_modality.index()] = 1;
        bits[6] = u8::from(ctx.causation == Causation::Causal);
        bits[7] = u8::from(ctx.token_source == TokenSource::TargetSet);
        Self(bits)
    }

    pub fn bits(&self) -> [u8; ATTR_BITS] {
        self.0
    }

    pub fn as_f64(&self) -> [f64; ATTR_BITS] {
        self.0.map(f64::from)
    }
}

impl fmt::Display for AttributeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingKind {
    Token,
    Context,
    Modality,
    Task,
    Attribute,
}

impl RoutingKind {
    pub const ALL: [RoutingKind; 5] = [
        RoutingKind::Token,
        RoutingKind::Context,
        RoutingKind::Modality,
        RoutingKind::Task,
        RoutingKind::Attribute,
    ];

    /// True when the feature depends only on token metadata.
    pub fn is_data_independent(self) -> bool {
        matches!(self, RoutingKind::Modality | RoutingKind::Task | RoutingKind::Attribute)
    }

    pub fn name(self) -> &'static str {
        match self {
            RoutingKind::Token => "token",
            RoutingKind::Context => "context",
            RoutingKind::Modality => "modality",
            RoutingKind::Task => "task",
            RoutingKind::Attribute => "attribute",
        }
    }

    /// Histogram key for a token under this strategy.
    pub fn routing_key(self, ctx: &RoutingContext) -> String {
        match self {
            RoutingKind::Modality => format!("modality:{}", ctx.token_modality().name()),
            RoutingKind::Task => format!("task:{}", ctx.task_id()),
            _ => format!("attr:{}", ctx.attributes()),
        }
    }
}

impl FromStr for RoutingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RoutingKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::param(format!("unknown routing strategy {s:?}")))
    }
}

impl fmt::Display for RoutingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum StrategyParams {
    Token,
    Context { query: ParamId },
    Modality { table: ParamId },
    Task { table: ParamId, num_tasks: usize },
    Attribute { w_attr: ParamId, gain: ParamId, bias: ParamId },
}

/// A routing strategy instance together with its learnable parameters.
#[derive(Clone, Debug)]
pub struct RoutingStrategy {
    kind: RoutingKind,
    width: usize,
    params: StrategyParams,
}

impl RoutingStrategy {
    /// Registers the strategy's parameters under `prefix` in `store`.
    /// `width` is the model width; `num_tasks` sizes the task table.
    pub fn new<R: Rng + ?Sized>(
        kind: RoutingKind,
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        num_tasks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let params = match kind {
            RoutingKind::Token => StrategyParams::Token,
            RoutingKind::Context => StrategyParams::Context {
                query: store.add(
                    format!("{prefix}.pool_query"),
                    Tensor::randn(vec![width], 1.0 / (width as f64).sqrt(), rng),
                )?,
            },
            RoutingKind::Modality => StrategyParams::Modality {
                table: store.add(
                    format!("{prefix}.modality_embed"),
                    Tensor::randn(vec![Modality::ALL.len(), width], 1.0, rng),
                )?,
            },
            RoutingKind::Task => {
                if num_tasks == 0 {
                    return Err(Error::param("task routing needs at least one task"));
                }
                StrategyParams::Task {
                    table: store.add(
                        format!("{prefix}.task_embed"),
                        Tensor::randn(vec![num_tasks, width], 1.0, rng),
                    )?,
                    num_tasks,
                }
            }
            RoutingKind::Attribute => StrategyParams::Attribute {
                w_attr: store.add(
                    format!("{prefix}.w_attr"),
                    Tensor::randn(vec![width, ATTR_BITS], 1.0, rng),
                )?,
                gain: store.add(format!("{prefix}.attr_ln.gain"), Tensor::full(vec![width], 1.0))?,
                bias: store.add(format!("{prefix}.attr_ln.bias"), Tensor::zeros(vec![width]))?,
            },
        };
        Ok(Self { kind, width, params })
    }

    pub fn kind(&self) -> RoutingKind {
        self.kind
    }

    /// Width of the routing feature fed to the gate.
    pub fn feature_width(&self) -> usize {
        match self.kind {
            RoutingKind::Context => 2 * self.width,
            _ => self.width,
        }
    }

    /// Routing features for `tokens: [n × d]` with one context per row;
    /// rows are grouped into sequences of `seq_len`.
    pub fn features(&self, s: &Session, tokens: Var, contexts: &[RoutingContext], seq_len: usize) -> Result<Var> {
        let n = s.tape.value(tokens).rows();
        if contexts.len() != n {
            return Err(Error::param(format!("{} contexts for {n} tokens", contexts.len())));
        }
        match self.kind {
            RoutingKind::Token => Ok(self.route_token(tokens)),
            RoutingKind::Context => self.route_context(s, tokens, seq_len),
            RoutingKind::Modality => self.route_modality(s, contexts),
            RoutingKind::Task => self.route_task(s, contexts),
            RoutingKind::Attribute => self.route_attribute(s, contexts),
        }
    }

    /// Identity: the token representation is the routing feature.
    pub fn route_token(&self, tokens: Var) -> Var {
        tokens
    }

    /// `concat(x, attnpool(X))` per token, with `X` the token's sequence.
    pub fn route_context(&self, s: &Session, tokens: Var, seq_len: usize) -> Result<Var> {
        let StrategyParams::Context { query } = self.params else {
            return Err(self.wrong_kind(RoutingKind::Context));
        };
        let n = s.tape.value(tokens).rows();
        if n == 0 || seq_len == 0 {
            return Err(Error::param("context routing over an empty sequence"));
        }
        let pooled = s.tape.attention_pool(tokens, s.param(query), seq_len)?;
        let owner: Vec<usize> = (0..n).map(|t| t / seq_len).collect();
        let spread = s.tape.gather_rows(pooled, &owner)?;
        s.tape.concat(tokens, spread)
    }

    pub fn route_modality(&self, s: &Session, contexts: &[RoutingContext]) -> Result<Var> {
        let StrategyParams::Modality { table } = self.params else {
            return Err(self.wrong_kind(RoutingKind::Modality));
        };
        let ids: Vec<usize> = contexts.iter().map(|c| c.token_modality().index()).collect();
        s.tape.embedding_lookup(s.param(table), &ids)
    }

    /// Errors with [`Error::UnknownTask`] for ids outside the table.
    pub fn route_task(&self, s: &Session, contexts: &[RoutingContext]) -> Result<Var> {
        let StrategyParams::Task { table, num_tasks } = self.params else {
            return Err(self.wrong_kind(RoutingKind::Task));
        };
        let ids = contexts
            .iter()
            .map(|c| {
                if c.task_id() < num_tasks {
                    Ok(c.task_id())
                } else {
                    Err(Error::UnknownTask {
                        task_id: c.task_id(),
                        known: num_tasks,
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        s.tape.embedding_lookup(s.param(table), &ids)
    }

    /// `layernorm(W_attr · attr(x))`. Defined for any task id.
    pub fn route_attribute(&self, s: &Session, contexts: &[RoutingContext]) -> Result<Var> {
        let StrategyParams::Attribute { w_attr, gain, bias } = self.params else {
            return Err(self.wrong_kind(RoutingKind::Attribute));
        };
        let data: Vec<f64> = contexts.iter().flat_map(|c| c.attributes().as_f64()).collect();
        let attrs = s.constant(Tensor::new(vec![contexts.len(), ATTR_BITS], data)?);
        let projected = s.tape.linear(attrs, s.param(w_attr), None)?;
        s.tape.layernorm(projected, s.param(gain), s.param(bias), ATTR_LN_EPS)
    }

    fn wrong_kind(&self, wanted: RoutingKind) -> Error {
        Error::Contract(format!("{wanted} routing requested from a {} strategy", self.kind))
    }

    /// Parameter ids owned by this strategy.
    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.params {
            StrategyParams::Token => vec![],
            StrategyParams::Context { query } => vec![*query],
            StrategyParams::Modality { table } => vec![*table],
            StrategyParams::Task { table, .. } => vec![*table],
            StrategyParams::Attribute { w_attr, gain, bias } => vec![*w_attr, *gain, *bias],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx(task: usize, mods: &[Modality], tok: Modality, c: Causation, src: TokenSource) -> RoutingContext {
        RoutingContext::new(task, ModalitySet::of(mods), tok, c, src).unwrap()
    }

    #[test]
    fn attribute_layout_examples() {
        let cls = ctx(0, &[Modality::Image], Modality::Image, Causation::Bidirectional, TokenSource::InputSet);
        assert_eq!(cls.attributes().bits(), [1, 0, 0, 1, 0, 0, 0, 0]);
        let cap = ctx(
            2,
            &[Modality::Image, Modality::Text],
            Modality::Text,
            Causation::Causal,
            TokenSource::TargetSet,
        );
        assert_eq!(cap.attributes().bits(), [1, 1, 0, 0, 1, 0, 1, 1]);
        assert_eq!(cap.attributes().to_string(), "11001011");
    }

    #[test]
    fn token_modality_must_belong_to_task() {
        let r = RoutingContext::new(
            0,
            ModalitySet::of(&[Modality::Image]),
            Modality::Text,
            Causation::Bidirectional,
            TokenSource::InputSet,
        );
        assert!(r.is_err());
    }

    #[test]
    fn attribute_vector_is_injective() {
        use std::collections::HashSet;
        let mut seen = HashSet::new();
        let mut count = 0;
        for set_bits in 1u8..8 {
            let mods: Vec<Modality> = Modality::ALL.into_iter().filter(|m| set_bits & (1 << m.index()) != 0).collect();
            for &tok in &mods {
                for c in [Causation::Bidirectional, Causation::Causal] {
                    for src in [TokenSource::InputSet, TokenSource::TargetSet] {
                        let a = ctx(0, &mods, tok, c, src).attributes();
                        assert_eq!(a.bits()[3..6].iter().map(|&b| b as u32).sum::<u32>(), 1);
                        seen.insert(a);
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(seen.len(), count);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("attribute".parse::<RoutingKind>().unwrap(), RoutingKind::Attribute);
        assert!("bogus".parse::<RoutingKind>().is_err());
        assert!(RoutingKind::Task.is_data_independent());
        assert!(!RoutingKind::Context.is_data_independent());
    }

    #[test]
    fn task_routing_rejects_unseen_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let strat = RoutingStrategy::new(RoutingKind::Task, &mut store, "r", 4, 2, &mut rng).unwrap();
        let s = Session::new(&store, 0);
        let c = ctx(99, &[Modality::Text], Modality::Text, Causation::Causal, TokenSource::InputSet);
        assert!(matches!(
            strat.route_task(&s, &[c]),
            Err(Error::UnknownTask { task_id: 99, known: 2 })
        ));
    }

    #[test]
    fn wrong_kind_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let strat = RoutingStrategy::new(RoutingKind::Modality, &mut store, "r", 4, 2, &mut rng).unwrap();
        let s = Session::new(&store, 0);
        assert!(matches!(strat.route_attribute(&s, &[]), Err(Error::Contract(_))));
    }
}
