//! Gradient-based task interference.
//!
//! A normalized step along task `j`'s gradient changes task `i`'s loss by
//! `Δ_j L_i ≈ λ · ĝ_j · g_i`. The interference metric divides that by the
//! change from task `i`'s own step; it is 1 on the diagonal and negative
//! when task `j`'s updates hurt task `i`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterferenceConfig {
    /// Gradient batches recorded per task.
    pub num_batches: usize,
    /// Step size `λ`.
    pub step_size: f64,
    /// Blocks to analyse, e.g. `"ffn.1"`. Empty means every FFN block.
    pub blocks: Vec<String>,
}

impl Default for InterferenceConfig {
    fn default() -> Self {
        Self {
            num_batches: 100,
            step_size: 1e-3,
            blocks: Vec::new(),
        }
    }
}

impl InterferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_batches == 0 {
            return Err(Error::param("num_batches must be at least 1"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::param("step_size must be positive"));
        }
        Ok(())
    }
}

/// One task's flattened gradient over one block's shared parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord {
    pub task_id: usize,
    pub block_id: String,
    pub grad: Vec<f64>,
}

impl GradientRecord {
    /// `task_id: u32`, `block_id` length `u32` and bytes, `len: u64`, then
    /// raw `f64` values, all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let task = u32::try_from(self.task_id).map_err(|_| Error::Format("task id exceeds u32".into()))?;
        w.write_all(&task.to_le_bytes())?;
        w.write_all(&(self.block_id.len() as u32).to_le_bytes())?;
        w.write_all(self.block_id.as_bytes())?;
        w.write_all(&(self.grad.len() as u64).to_le_bytes())?;
        for v in &self.grad {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one record, or `None` at a clean end of stream.
    pub fn read_from<R: Read>(mut r: R) -> Result<Option<Self>> {
        let mut b4 = [0u8; 4];
        match r.read_exact(&mut b4) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let task_id = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut name)?;
        let block_id = String::from_utf8(name).map_err(|_| Error::Format("block id is not UTF-8".into()))?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut grad = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut b8)?;
            grad.push(f64::from_le_bytes(b8));
        }
        Ok(Some(Self { task_id, block_id, grad }))
    }
}

pub fn write_records<W: Write>(records: &[GradientRecord], mut w: W) -> Result<()> {
    for r in records {
        r.write_to(&mut w)?;
    }
    Ok(())
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<GradientRecord>> {
    let mut out = Vec::new();
    while let Some(rec) = GradientRecord::read_from(&mut r)? {
        out.push(rec);
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// First-order loss change on task `i` from a step of size `λ` along the
/// normalized gradient of task `j`: `λ · (g_j / ‖g_j‖) · g_i`.
pub fn delta_estimate(g_i: &[f64], g_j: &[f64], lambda: f64) -> Result<f64> {
    if g_i.len() != g_j.len() {
        return Err(Error::param(format!(
            "gradient lengths differ: {} vs {}",
            g_i.len(),
            g_j.len()
        )));
    }
    let n = norm(g_j);
    if n == 0.0 {
        return Err(Error::numeric("step direction has zero gradient norm"));
    }
    Ok(lambda * dot(g_j, g_i) / n)
}

/// `I_{i,j}` for every task pair in one block.
#[derive(Clone, Debug, PartialEq)]
pub struct InterferenceMatrix {
    pub block_id: String,
    pub tasks: Vec<usize>,
    /// Row `i`, column `j`. `NaN` when every sample was excluded.
    pub values: Vec<Vec<f64>>,
    /// Entries where at least one sample had a vanishing self-change.
    pub flagged: Vec<Vec<bool>>,
}

impl InterferenceMatrix {
    pub fn get(&self, task_i: usize, task_j: usize) -> Option<f64> {
        let i = self.tasks.iter().position(|&t| t == task_i)?;
        let j = self.tasks.iter().position(|&t| t == task_j)?;
        Some(self.values[i][j])
    }

    pub fn off_diagonal(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.tasks.iter().enumerate().flat_map(move |(i, &ti)| {
            self.tasks
                .iter()
                .enumerate()
                .filter(move |&(j, _)| j != i)
                .map(move |(j, &tj)| (ti, tj, self.values[i][j]))
        })
    }
}

/// Computes one matrix per block from recorded per-batch gradients.
///
/// For task `i`'s batch `b`, the change caused by task `j` is averaged over
/// all of task `j`'s recorded batches; the entry is the mean over `b` of that
/// change divided by task `i`'s own averaged change. Samples whose self-change
/// vanishes are excluded and the entry is flagged.
pub fn interference_matrix(records: &[GradientRecord], lambda: f64) -> Result<Vec<InterferenceMatrix>> {
    if !(lambda > 0.0) {
        return Err(Error::param("step size must be positive"));
    }
    let mut by_block: BTreeMap<&str, BTreeMap<usize, Vec<&[f64]>>> = BTreeMap::new();
    for r in records {
        by_block
            .entry(r.block_id.as_str())
            .or_default()
            .entry(r.task_id)
            .or_default()
            .push(&r.grad);
    }
    let mut out = Vec::with_capacity(by_block.len());
    for (block_id, tasks) in by_block {
        let len = tasks.values().next().and_then(|v| v.first()).map_or(0, |g| g.len());
        if tasks.values().flatten().any(|g| g.len() != len) {
            return Err(Error::param(format!("block {block_id}: gradient lengths differ")));
        }
        let ids: Vec<usize> = tasks.keys().copied().collect();
        // Normalized step directions per task.
        let dirs: Vec<Vec<Vec<f64>>> = tasks
            .values()
            .map(|gs| {
                gs.iter()
                    .map(|g| {
                        let n = norm(g);
                        if n == 0.0 {
                            Err(Error::numeric(format!("block {block_id}: zero gradient record")))
                        } else {
                            Ok(g.iter().map(|v| v / n).collect())
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let grads: Vec<&Vec<&[f64]>> = tasks.values().collect();
        let n = ids.len();
        let mut values = vec![vec![f64::NAN; n]; n];
        let mut flagged = vec![vec![false; n]; n];
        for i in 0..n {
            // Averaged change on each of task i's batches from each task's step.
            let changes: Vec<Vec<f64>> = grads[i]
                .iter()
                .map(|g| {
                    dirs.iter()
                        .map(|dj| lambda * dj.iter().map(|d| dot(d, g)).sum::<f64>() / dj.len() as f64)
                        .collect()
                })
                .collect();
            for j in 0..n {
                let mut sum = 0.0;
                let mut kept = 0usize;
                for (b, c) in changes.iter().enumerate() {
                    let own = c[i];
                    let scale = lambda * norm(grads[i][b]);
                    if own.abs() <= f64::EPSILON * scale || own == 0.0 {
                        flagged[i][j] = true;
                        continue;
                    }
                    sum += c[j] / own;
                    kept += 1;
                }
                if kept > 0 {
                    values[i][j] = sum / kept as f64;
                }
            }
        }
        out.push(InterferenceMatrix {
            block_id: block_id.to_string(),
            tasks: ids,
            values,
            flagged,
        });
    }
    Ok(out)
}

/// CSV with columns `block_id,task_i,task_j,value,flagged`.
pub fn write_matrices_csv<W: Write>(matrices: &[InterferenceMatrix], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["block_id", "task_i", "task_j", "value", "flagged"])?;
    for m in matrices {
        for (i, &ti) in m.tasks.iter().enumerate() {
            for (j, &tj) in m.tasks.iter().enumerate() {
                w.write_record([
                    m.block_id.clone(),
                    ti.to_string(),
                    tj.to_string(),
                    m.values[i][j].to_string(),
                    m.flagged[i][j].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// First-order estimate next to the measured loss change.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FirstOrderCheck {
    pub estimate: f64,
    pub actual: f64,
}

impl FirstOrderCheck {
    /// `estimate − actual`; second order in `λ`.
    pub fn gap(&self) -> f64 {
        self.estimate - self.actual
    }
}

/// Compares `λ · ĝ_j · g_i` with `L_i(θ) − L_i(θ − λ ĝ_j)`, evaluating the
/// loss twice.
pub fn verify_first_order(
    loss_i: impl Fn(&[f64]) -> Result<f64>,
    theta: &[f64],
    g_i: &[f64],
    g_j: &[f64],
    lambda: f64,
) -> Result<FirstOrderCheck> {
    if theta.len() != g_j.len() {
        return Err(Error::param("parameter and gradient lengths differ"));
    }
    let estimate = delta_estimate(g_i, g_j, lambda)?;
    let n = norm(g_j);
    let stepped: Vec<f64> = theta.iter().zip(g_j).map(|(t, g)| t - lambda * g / n).collect();
    let actual = loss_i(theta)? - loss_i(&stepped)?;
    Ok(FirstOrderCheck { estimate, actual })
}
