//! Experiment entry points shared by the CLI, the examples, and the tests.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint;
use super::config::Config;
use super::data::{Batch, Suite};
use super::model::{EvalReport, Model};
use super::train::{evaluate_all, StepMetrics, Trainer};
use crate::error::{Error, Result};
use crate::interference::{interference_matrix, verify_first_order, FirstOrderCheck, GradientRecord, InterferenceMatrix};
use crate::moe::UsageHistogram;
use crate::params::{ParamId, Session};
use crate::routing::ATTR_LAYOUT_TAG;

#[derive(Clone, Debug, Serialize)]
pub struct TaskEval {
    pub task_id: usize,
    pub name: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub steps: usize,
    pub tasks: Vec<TaskEval>,
    pub summed_eval_loss: f64,
    pub active_params: usize,
    pub total_params: usize,
    pub router_params: usize,
}

fn task_evals(suite: &Suite, reports: &[EvalReport]) -> Vec<TaskEval> {
    suite
        .tasks()
        .iter()
        .zip(reports)
        .map(|(t, r)| TaskEval {
            task_id: t.task_id,
            name: t.name.clone(),
            loss: r.loss,
            accuracy: r.accuracy,
        })
        .collect()
}

/// Trains per `config` and writes the run directory: `config.toml`,
/// `plan.txt`, `metrics.jsonl`, `eval.json`, `usage.csv`, `model.ckpt`.
pub fn run_experiment(config: &Config, out_dir: &Path) -> Result<RunSummary> {
    run_experiment_with(config, out_dir, |_| {})
}

/// As [`run_experiment`], calling `on_step` after every update.
pub fn run_experiment_with(config: &Config, out_dir: &Path, mut on_step: impl FnMut(&StepMetrics)) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), config.to_toml())?;
    fs::write(
        out_dir.join("plan.txt"),
        format!("attr_layout {ATTR_LAYOUT_TAG}\n{}", config.model.placement_plan()),
    )?;
    let mut trainer = Trainer::new(config.clone())?;
    let mut metrics = BufWriter::new(File::create(out_dir.join("metrics.jsonl"))?);
    let mut last: Option<StepMetrics> = None;
    for _ in 0..config.train.steps {
        match trainer.step() {
            Ok(m) => {
                serde_json::to_writer(&mut metrics, &m)?;
                metrics.write_all(b"\n")?;
                on_step(&m);
                last = Some(m);
            }
            Err(e) => {
                metrics.flush()?;
                let dump = serde_json::json!({
                    "error": e.to_string(),
                    "last_metrics": last,
                    "steps_done": trainer.steps_done(),
                });
                fs::write(out_dir.join("diagnostic.json"), serde_json::to_string_pretty(&dump)?)?;
                return Err(e);
            }
        }
    }
    metrics.flush()?;
    let reports = trainer.evaluate()?;
    let tasks = task_evals(&trainer.suite, &reports);
    let count = trainer.model.encoder.parameter_count(&trainer.model.store);
    let summary = RunSummary {
        out_dir: out_dir.to_path_buf(),
        steps: config.train.steps,
        summed_eval_loss: tasks.iter().map(|t| t.loss).sum(),
        tasks,
        active_params: count.active_per_token,
        total_params: count.total,
        router_params: count.router,
    };
    fs::write(out_dir.join("eval.json"), serde_json::to_string_pretty(&summary)?)?;
    let usage = usage_histogram(&trainer.model, &trainer.suite)?;
    usage.write_csv(File::create(out_dir.join("usage.csv"))?)?;
    checkpoint::save(&trainer.model, config, &out_dir.join("model.ckpt"))?;
    Ok(summary)
}

/// Held-out evaluation of one training task.
pub fn eval_task(model: &Model, suite: &Suite, task: usize) -> Result<EvalReport> {
    model.evaluate(&suite.eval_batches(task, model.width())?)
}

/// Evaluates `source_task`'s held-out data presented under an unseen task
/// id. Task-level routing has no entry for the new id and fails with
/// [`Error::UnknownTask`].
pub fn zero_shot_eval(model: &Model, suite: &Suite, source_task: usize) -> Result<EvalReport> {
    let novel = model.num_tasks();
    let batches: Vec<Batch> = suite
        .eval_batches(source_task, model.width())?
        .into_iter()
        .map(|b| b.with_task_id(novel))
        .collect();
    model.evaluate(&batches)
}

#[derive(Clone, Debug, Serialize)]
pub struct ReparamReport {
    pub moe_ms: f64,
    pub dense_ms: f64,
    pub max_abs_diff: f64,
    /// Projection multiply-adds of the merged path.
    pub merged_mults: u64,
    /// Multiply-adds a plain dense model of the same shape spends.
    pub dense_model_mults: u64,
}

/// Scalar multiply-adds of all projections for `tokens` tokens in a model
/// without MoE.
pub fn dense_projection_mults(model: &Model, tokens: usize) -> u64 {
    let c = model.encoder.config();
    let d = c.width;
    let hidden = d * c.ffn_ratio;
    (tokens * c.depth * (4 * d * d + 2 * d * hidden)) as u64
}

/// Runs each task's first held-out batch through the MoE path and the merged
/// dense path and compares the logits.
pub fn compare_reparam_inference(model: &Model, suite: &Suite) -> Result<ReparamReport> {
    if !model.encoder.moe_config().strategy.is_data_independent() && model.encoder.plan().moe_projections() > 0 {
        return Err(Error::Contract(format!(
            "{} routing is data-dependent and cannot be reparameterized",
            model.encoder.moe_config().strategy
        )));
    }
    let batches: Vec<Batch> = (0..suite.tasks().len())
        .map(|t| suite.eval_batches(t, model.width()).map(|mut v| v.swap_remove(0)))
        .collect::<Result<_>>()?;
    let mut report = ReparamReport {
        moe_ms: 0.0,
        dense_ms: 0.0,
        max_abs_diff: 0.0,
        merged_mults: 0,
        dense_model_mults: 0,
    };
    for b in &batches {
        let t0 = Instant::now();
        let s = Session::frozen(&model.store, 0);
        let moe = model.forward(&s, b, false, 0.0)?;
        let moe_logits = s.tape.value(moe.logits).clone();
        report.moe_ms += t0.elapsed().as_secs_f64() * 1e3;

        let t1 = Instant::now();
        let sd = Session::frozen(&model.store, 0);
        let dense = model.forward_merged(&sd, b)?;
        let dense_logits = sd.tape.value(dense).clone();
        report.dense_ms += t1.elapsed().as_secs_f64() * 1e3;

        report.max_abs_diff = report.max_abs_diff.max(moe_logits.max_abs_diff(&dense_logits));
        report.merged_mults += sd.stats().projection_mults;
        report.dense_model_mults += dense_projection_mults(model, b.token_ids.len() + b.candidate_ids.len());
    }
    Ok(report)
}

/// Expert dispatch counts over every task's held-out batches.
pub fn usage_histogram(model: &Model, suite: &Suite) -> Result<UsageHistogram> {
    let mut hist = UsageHistogram::default();
    for t in 0..suite.tasks().len() {
        for b in suite.eval_batches(t, model.width())? {
            let s = Session::frozen(&model.store, 0);
            s.record_usage();
            model.forward(&s, &b, false, 0.0)?;
            if let Some(h) = s.take_usage() {
                hist.merge(&h);
            }
        }
    }
    Ok(hist)
}

/// Block ids to analyse: the configured list, or every FFN block.
pub fn interference_blocks(model: &Model, config: &Config) -> Vec<String> {
    if config.interference.blocks.is_empty() {
        (0..model.encoder.config().depth).map(|l| format!("ffn.{l}")).collect()
    } else {
        config.interference.blocks.clone()
    }
}

fn block_gradients(model: &Model, batch: &Batch, blocks: &[(String, Vec<ParamId>)], smoothing: f64) -> Result<Vec<Vec<f64>>> {
    let s = Session::new(&model.store, 0);
    let out = model.forward(&s, batch, false, smoothing)?;
    let g = s.tape.backward(out.task_loss)?;
    let grads = s.param_grads(&g);
    Ok(blocks
        .iter()
        .map(|(_, ids)| {
            ids.iter()
                .flat_map(|id| match &grads[id.index()] {
                    Some(t) => t.data().to_vec(),
                    None => vec![0.0; model.store.get(*id).numel()],
                })
                .collect()
        })
        .collect())
}

/// Per-batch block gradients of every task's training loss, evaluated with
/// gate noise and stochastic depth off.
pub fn collect_gradient_records(model: &Model, suite: &Suite, config: &Config, seed: u64) -> Result<Vec<GradientRecord>> {
    let blocks = interference_blocks(model, config)
        .into_iter()
        .map(|b| model.encoder.block_params(&b).map(|ids| (b, ids)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for task in 0..suite.tasks().len() {
        for _ in 0..config.interference.num_batches {
            let batch = suite.sample_batch(task, &mut rng, model.width())?;
            let grads = block_gradients(model, &batch, &blocks, config.train.label_smoothing)?;
            for ((block_id, _), grad) in blocks.iter().zip(grads) {
                out.push(GradientRecord {
                    task_id: task,
                    block_id: block_id.clone(),
                    grad,
                });
            }
        }
    }
    Ok(out)
}

pub fn interfere(model: &Model, suite: &Suite, config: &Config, seed: u64) -> Result<(Vec<GradientRecord>, Vec<InterferenceMatrix>)> {
    let records = collect_gradient_records(model, suite, config, seed)?;
    let matrices = interference_matrix(&records, config.interference.step_size)?;
    Ok((records, matrices))
}

/// First-order estimate against two real forward passes for one block:
/// the change in `batch_i`'s loss after a step of `λ` along `batch_j`'s
/// normalized block gradient.
pub fn model_first_order(
    model: &Model,
    batch_i: &Batch,
    batch_j: &Batch,
    block: &str,
    lambda: f64,
    smoothing: f64,
) -> Result<FirstOrderCheck> {
    let ids = model.encoder.block_params(block)?;
    let blocks = vec![(block.to_string(), ids.clone())];
    let g_i = block_gradients(model, batch_i, &blocks, smoothing)?.remove(0);
    let g_j = block_gradients(model, batch_j, &blocks, smoothing)?.remove(0);
    let theta = model.store.flatten(&ids);
    let loss = |flat: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        m.store.assign_flat(&ids, flat)?;
        let s = Session::frozen(&m.store, 0);
        let out = m.forward(&s, batch_i, false, smoothing)?;
        let v = s.tape.value(out.task_loss).item();
        Ok(v)
    };
    verify_first_order(loss, &theta, &g_i, &g_j, lambda)
}

pub fn load_checkpoint(path: &Path) -> Result<(Config, Suite, Model)> {
    let (config, model) = checkpoint::load(path)?;
    let suite = Suite::new(&config.suite)?;
    Ok((config, suite, model))
}

/// Per-task evaluation of a loaded model.
pub fn evaluate_tasks(model: &Model, suite: &Suite) -> Result<Vec<TaskEval>> {
    Ok(task_evals(suite, &evaluate_all(model, suite)?))
}
