//! The full model: token embeddings, the encoder, and the similarity head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::data::Batch;
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::moe::{balance_loss, Gate};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};
use crate::unified::{predict_rows, task_loss, SimilarityHead};

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub embed: ParamId,
    pub encoder: Encoder,
    pub head: SimilarityHead,
    num_tasks: usize,
}

pub struct ForwardOutput {
    /// `[sequences × candidates]` joint logits.
    pub logits: Var,
    /// Smoothed cross entropy against the batch targets.
    pub task_loss: Var,
    /// Present only for data-dependent routing.
    pub balance_loss: Option<Var>,
    pub inputs: EncoderOutput,
    pub candidates: EncoderOutput,
}

/// Mean loss and accuracy over a set of batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
}

impl Model {
    pub fn new(cfg: &Config, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.model.width;
        let embed = store.add("embed", Tensor::randn(vec![vocab_size, d], 1.0, &mut rng))?;
        let num_tasks = cfg.num_tasks();
        let encoder = Encoder::new(cfg.model.clone(), cfg.moe.clone(), &mut store, "enc", num_tasks, &mut rng)?;
        let head = SimilarityHead::new(&mut store, "head.log_tau", cfg.train.temperature_init)?;
        Ok(Self {
            store,
            embed,
            encoder,
            head,
            num_tasks,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn width(&self) -> usize {
        self.encoder.config().width
    }

    /// Encoder scalars touched per token, router excluded.
    pub fn active_params(&self) -> usize {
        self.encoder.parameter_count(&self.store).active_per_token
    }

    fn embed_inputs(&self, s: &Session, batch: &Batch) -> Result<(Var, Var)> {
        let table = s.param(self.embed);
        let x = s.tape.embedding_lookup(table, &batch.token_ids)?;
        let x = s.tape.add_const(x, &batch.noise)?;
        let y = s.tape.embedding_lookup(table, &batch.candidate_ids)?;
        Ok((x, y))
    }

    pub fn forward(&self, s: &Session, batch: &Batch, training: bool, smoothing: f64) -> Result<ForwardOutput> {
        let (x, y) = self.embed_inputs(s, batch)?;
        let inputs = self
            .encoder
            .encode(s, x, &batch.contexts, batch.seq_len, batch.causal, training)?;
        let candidates = self
            .encoder
            .encode(s, y, &batch.candidate_contexts, 1, false, training)?;
        let fx = s.tape.segment_mean(inputs.output, batch.seq_len)?;
        let logits = self.head.joint_logits(s, fx, candidates.output)?;
        let loss = task_loss(s, logits, &batch.targets, smoothing)?;
        let moe = self.encoder.moe_config();
        let balance = if moe.strategy.is_data_independent() || inputs.gates.is_empty() {
            None
        } else {
            let gates: Vec<&Gate> = inputs.gates.iter().chain(&candidates.gates).map(|(_, g)| g).collect();
            Some(balance_loss(s, &gates, moe.balance_coefficient)?)
        };
        Ok(ForwardOutput {
            logits,
            task_loss: loss,
            balance_loss: balance,
            inputs,
            candidates,
        })
    }

    /// Logits through the merged dense path. Data-independent routing only.
    pub fn forward_merged(&self, s: &Session, batch: &Batch) -> Result<Var> {
        let (x, y) = self.embed_inputs(s, batch)?;
        let fx = self
            .encoder
            .encode_merged(s, x, &batch.contexts, batch.seq_len, batch.causal)?;
        let fy = self.encoder.encode_merged(s, y, &batch.candidate_contexts, 1, false)?;
        let fx = s.tape.segment_mean(fx, batch.seq_len)?;
        self.head.joint_logits(s, fx, fy)
    }

    /// Unsmoothed loss and accuracy in evaluation mode.
    pub fn evaluate(&self, batches: &[Batch]) -> Result<EvalReport> {
        if batches.is_empty() {
            return Err(Error::param("evaluation needs at least one batch"));
        }
        let (mut loss, mut correct, mut total) = (0.0, 0usize, 0usize);
        for b in batches {
            let s = Session::frozen(&self.store, 0);
            let out = self.forward(&s, b, false, 0.0)?;
            loss += s.tape.value(out.task_loss).item() * b.num_sequences() as f64;
            let preds = predict_rows(&s.tape.value(out.logits))?;
            correct += preds.iter().zip(&b.targets).filter(|(p, t)| p == t).count();
            total += b.num_sequences();
        }
        Ok(EvalReport {
            loss: loss / total as f64,
            accuracy: correct as f64 / total as f64,
        })
    }
}
