//! Training loop: one sampled task per update (or several, accumulated).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::data::{Batch, Suite};
use super::model::{EvalReport, Model};
use super::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::params::Session;
use crate::unified::sample_task;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub task_id: usize,
    pub loss: f64,
    pub balance_loss: f64,
    pub grad_norm: f64,
    pub active_params: usize,
}

pub struct Trainer {
    pub config: Config,
    pub suite: Suite,
    pub model: Model,
    opt: AdamW,
    rng: ChaCha8Rng,
    weights: Vec<f64>,
    step: usize,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let suite = Suite::new(&config.suite)?;
        let model = Model::new(&config, suite.vocab_size(), config.train.seed)?;
        Ok(Self::with_model(config, suite, model))
    }

    pub fn with_model(config: Config, suite: Suite, model: Model) -> Self {
        let t = &config.train;
        let opt = AdamW::new(
            AdamWConfig {
                lr: t.lr,
                weight_decay: t.weight_decay,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            &model.store,
        );
        let weights = if t.sampling_weights.is_empty() {
            suite.sampling_weights()
        } else {
            t.sampling_weights.clone()
        };
        let rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x5EED_0F_7A5C);
        Self {
            config,
            suite,
            model,
            opt,
            rng,
            weights,
            step: 0,
        }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn loss_weight(&self, task: usize) -> f64 {
        self.config.train.loss_weights.get(task).copied().unwrap_or(1.0)
    }

    /// Samples `tasks_per_step` tasks and applies one update.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let width = self.model.width();
        let mut batches = Vec::with_capacity(self.config.train.tasks_per_step);
        for _ in 0..self.config.train.tasks_per_step {
            let task = sample_task(&self.weights, &mut self.rng)?;
            batches.push(self.suite.sample_batch(task, &mut self.rng, width)?);
        }
        self.train_step(&batches)
    }

    /// One optimizer update on the averaged loss of `batches`.
    pub fn train_step(&mut self, batches: &[Batch]) -> Result<StepMetrics> {
        let first = batches.first().ok_or_else(|| Error::param("train_step needs a batch"))?;
        let session_seed = self.rng.random::<u64>();
        let smoothing = self.config.train.label_smoothing;
        let (mut grads, loss, balance) = {
            let s = Session::new(&self.model.store, session_seed);
            let mut total = None;
            let (mut task_sum, mut bal_sum) = (0.0, 0.0);
            for b in batches {
                let out = self.model.forward(&s, b, true, smoothing)?;
                let mut l = s.tape.scale(out.task_loss, self.loss_weight(b.task_id));
                task_sum += s.tape.value(l).item();
                if let Some(bl) = out.balance_loss {
                    bal_sum += s.tape.value(bl).item();
                    l = s.tape.add(l, bl)?;
                }
                total = Some(match total {
                    None => l,
                    Some(t) => s.tape.add(t, l)?,
                });
            }
            let n = batches.len() as f64;
            let total = s.tape.scale(total.expect("non-empty"), 1.0 / n);
            let value = s.tape.value(total).item();
            if !value.is_finite() {
                return Err(Error::numeric(format!(
                    "step {}: non-finite loss {value} on task {} (task part {}, balance part {})",
                    self.step,
                    first.task_id,
                    task_sum / n,
                    bal_sum / n
                )));
            }
            let g = s.tape.backward(total)?;
            (s.param_grads(&g), task_sum / n, bal_sum / n)
        };
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::numeric(format!("step {}: non-finite gradient", self.step)));
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.train.grad_clip_norm);
        self.opt.step(&mut self.model.store, &grads)?;
        let metrics = StepMetrics {
            step: self.step,
            task_id: first.task_id,
            loss,
            balance_loss: balance,
            grad_norm,
            active_params: self.model.active_params(),
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Per-task evaluation on the suite's held-out batches.
    pub fn evaluate(&self) -> Result<Vec<EvalReport>> {
        evaluate_all(&self.model, &self.suite)
    }
}

pub fn evaluate_all(model: &Model, suite: &Suite) -> Result<Vec<EvalReport>> {
    (0..suite.tasks().len())
        .map(|t| model.evaluate(&suite.eval_batches(t, model.width())?))
        .collect()
}
