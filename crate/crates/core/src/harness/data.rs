//! Synthetic three-task suite.
//!
//! Every pattern `p` owns a short code of token ids. Each input is the code
//! followed by a mask token; the candidates are `C` label tokens and the
//! target is a label index. Tasks see the same codes through a shared
//! embedding table:
//!
//! | task | modalities | causation | target |
//! |------|------------|-----------|--------|
//! | `img_cls` | image | bidirectional | `p` |
//! | `mlm` | text | bidirectional | `C − 1 − p` (conflicting) or `p` |
//! | `caption` | image, text | causal | `p` |
//!
//! Image tokens get Gaussian noise added to their embeddings.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{SuiteConfig, SuiteVariant};
use crate::error::{Error, Result};
use crate::routing::{Causation, Modality, ModalitySet, RoutingContext, TokenSource};
use crate::tensor::Tensor;
use crate::unified::{sqrt_size_weights, TaskDefinition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    ImgCls,
    Mlm,
    Caption,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [Self::ImgCls, Self::Mlm, Self::Caption];

    pub fn name(self) -> &'static str {
        match self {
            Self::ImgCls => "img_cls",
            Self::Mlm => "mlm",
            Self::Caption => "caption",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn modalities(self) -> ModalitySet {
        match self {
            Self::ImgCls => ModalitySet::of(&[Modality::Image]),
            Self::Mlm => ModalitySet::of(&[Modality::Text]),
            Self::Caption => ModalitySet::of(&[Modality::Image, Modality::Text]),
        }
    }

    /// Modality of the mask and label tokens.
    pub fn primary_modality(self) -> Modality {
        match self {
            Self::ImgCls => Modality::Image,
            Self::Mlm | Self::Caption => Modality::Text,
        }
    }

    pub fn causation(self) -> Causation {
        match self {
            Self::Caption => Causation::Causal,
            _ => Causation::Bidirectional,
        }
    }
}

/// One task's batch in model-ready form.
#[derive(Clone, Debug)]
pub struct Batch {
    pub task_id: usize,
    pub kind: TaskKind,
    pub seq_len: usize,
    pub token_ids: Vec<usize>,
    /// Additive embedding noise, `[n × d]`.
    pub noise: Tensor,
    pub contexts: Vec<RoutingContext>,
    pub causal: bool,
    /// Label index per sequence.
    pub targets: Vec<usize>,
    pub candidate_ids: Vec<usize>,
    pub candidate_contexts: Vec<RoutingContext>,
}

impl Batch {
    pub fn num_sequences(&self) -> usize {
        self.targets.len()
    }

    /// The same batch presented under another task id.
    pub fn with_task_id(mut self, task_id: usize) -> Self {
        self.task_id = task_id;
        for c in self.contexts.iter_mut().chain(self.candidate_contexts.iter_mut()) {
            *c = c.with_task_id(task_id);
        }
        self
    }
}

#[derive(Clone, Debug)]
pub struct Suite {
    config: SuiteConfig,
    codes: Vec<Vec<usize>>,
    tasks: Vec<TaskDefinition>,
}

impl Suite {
    pub fn new(config: &SuiteConfig) -> Result<Self> {
        if config.dataset_sizes.len() != TaskKind::ALL.len() {
            return Err(Error::param("the suite has exactly three tasks"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut codes: Vec<Vec<usize>> = Vec::with_capacity(config.num_patterns);
        let vocab: Vec<usize> = (0..config.vocab).collect();
        let mut attempts = 0;
        while codes.len() < config.num_patterns {
            let mut code: Vec<usize> = vocab.choose_multiple(&mut rng, config.code_len).copied().collect();
            let mut key = code.clone();
            key.sort_unstable();
            code.shuffle(&mut rng);
            if !codes.iter().any(|c| {
                let mut k = c.clone();
                k.sort_unstable();
                k == key
            }) {
                codes.push(code);
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::param("vocabulary too small for distinct pattern codes"));
            }
        }
        let tasks = TaskKind::ALL
            .iter()
            .enumerate()
            .map(|(i, k)| TaskDefinition {
                task_id: i,
                name: k.name().to_string(),
                task_modalities: k.modalities(),
                causation: k.causation(),
                dataset_size: config.dataset_sizes[i],
                loss_weight: 1.0,
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            codes,
            tasks,
        })
    }

    pub fn config(&self) -> &SuiteConfig {
        &self.config
    }

    pub fn tasks(&self) -> &[TaskDefinition] {
        &self.tasks
    }

    pub fn kind(&self, task: usize) -> TaskKind {
        TaskKind::ALL[task]
    }

    pub fn code(&self, pattern: usize) -> &[usize] {
        &self.codes[pattern]
    }

    pub fn num_labels(&self) -> usize {
        self.config.num_patterns
    }

    pub fn mask_token(&self) -> usize {
        self.config.vocab
    }

    pub fn label_token(&self, label: usize) -> usize {
        self.config.vocab + 1 + label
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab + 1 + self.config.num_patterns
    }

    pub fn seq_len(&self) -> usize {
        self.config.code_len + 1
    }

    pub fn sampling_weights(&self) -> Vec<f64> {
        sqrt_size_weights(&self.config.dataset_sizes)
    }

    pub fn target(&self, kind: TaskKind, pattern: usize) -> usize {
        match (kind, self.config.variant) {
            (TaskKind::Mlm, SuiteVariant::Conflicting) => self.config.num_patterns - 1 - pattern,
            _ => pattern,
        }
    }

    /// Builds the batch for explicit example indices of `task`. Example `k`
    /// has pattern `k mod C`; its noise is a pure function of the suite seed,
    /// the task, and `k`.
    pub fn batch(&self, task: usize, examples: &[usize], width: usize) -> Result<Batch> {
        if task >= self.tasks.len() {
            return Err(Error::UnknownTask {
                task_id: task,
                known: self.tasks.len(),
            });
        }
        let kind = self.kind(task);
        let c = self.config.num_patterns;
        let seq_len = self.seq_len();
        let n = examples.len() * seq_len;
        let mut token_ids = Vec::with_capacity(n);
        let mut contexts = Vec::with_capacity(n);
        let mut noise = vec![0.0; n * width];
        let mut targets = Vec::with_capacity(examples.len());
        let ctx = |m: Modality, source: TokenSource| {
            RoutingContext::new(task, kind.modalities(), m, kind.causation(), source)
        };
        for &k in examples {
            let p = k % c;
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.config.seed ^ (task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (k as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
            );
            for (pos, &tok) in self.codes[p].iter().enumerate() {
                let m = match kind {
                    TaskKind::ImgCls => Modality::Image,
                    TaskKind::Mlm => Modality::Text,
                    TaskKind::Caption if pos < self.config.code_len / 2 => Modality::Image,
                    TaskKind::Caption => Modality::Text,
                };
                if m == Modality::Image {
                    let row = token_ids.len();
                    for v in &mut noise[row * width..(row + 1) * width] {
                        *v = self.config.image_noise * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                token_ids.push(tok);
                contexts.push(ctx(m, TokenSource::InputSet)?);
            }
            token_ids.push(self.mask_token());
            contexts.push(ctx(kind.primary_modality(), TokenSource::InputSet)?);
            targets.push(self.target(kind, p));
        }
        let candidate_ids = (0..c).map(|l| self.label_token(l)).collect();
        let candidate_contexts = (0..c)
            .map(|_| ctx(kind.primary_modality(), TokenSource::TargetSet))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            task_id: task,
            kind,
            seq_len,
            token_ids,
            noise: Tensor::new(vec![n, width], noise)?,
            contexts,
            causal: kind.causation() == Causation::Causal,
            targets,
            candidate_ids,
            candidate_contexts,
        })
    }

    /// Random training batch drawn from the task's first `dataset_size` examples.
    pub fn sample_batch<R: Rng + ?Sized>(&self, task: usize, rng: &mut R, width: usize) -> Result<Batch> {
        let size = *self
            .config
            .dataset_sizes
            .get(task)
            .ok_or(Error::UnknownTask { task_id: task, known: self.tasks.len() })?;
        let examples: Vec<usize> = (0..self.config.batch_size).map(|_| rng.random_range(0..size)).collect();
        self.batch(task, &examples, width)
    }

    /// Fixed held-out batches, drawn from examples past the training range.
    pub fn eval_batches(&self, task: usize, width: usize) -> Result<Vec<Batch>> {
        let start = *self
            .config
            .dataset_sizes
            .get(task)
            .ok_or(Error::UnknownTask { task_id: task, known: self.tasks.len() })?;
        let b = self.config.batch_size;
        (0..self.config.eval_batches)
            .map(|i| {
                let examples: Vec<usize> = (0..b).map(|j| start + i * b + j).collect();
                self.batch(task, &examples, width)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite(variant: SuiteVariant) -> Suite {
        Suite::new(&SuiteConfig {
            variant,
            ..SuiteConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn codes_are_distinct() {
        let s = suite(SuiteVariant::Conflicting);
        for a in 0..s.num_labels() {
            for b in 0..a {
                let (mut x, mut y) = (s.code(a).to_vec(), s.code(b).to_vec());
                x.sort_unstable();
                y.sort_unstable();
                assert_ne!(x, y);
            }
        }
    }

    #[test]
    fn target_mappings() {
        let s = suite(SuiteVariant::Conflicting);
        assert_eq!(s.target(TaskKind::ImgCls, 2), 2);
        assert_eq!(s.target(TaskKind::Mlm, 2), 5);
        assert_eq!(s.target(TaskKind::Caption, 2), 2);
        let s = suite(SuiteVariant::Cooperative);
        assert_eq!(s.target(TaskKind::Mlm, 2), 2);
    }

    #[test]
    fn batch_layout() {
        let s = suite(SuiteVariant::Conflicting);
        let b = s.batch(2, &[3, 11], 4).unwrap();
        assert_eq!(b.token_ids.len(), 10);
        assert_eq!(b.targets, vec![3, 3]);
        assert!(b.causal);
        assert_eq!(b.token_ids[4], s.mask_token());
        assert_eq!(b.contexts[0].token_modality(), Modality::Image);
        assert_eq!(b.contexts[3].token_modality(), Modality::Text);
        // Noise only on image tokens.
        assert!(b.noise.row(0).iter().any(|&v| v != 0.0));
        assert!(b.noise.row(3).iter().all(|&v| v == 0.0));
        assert_eq!(b.candidate_contexts[0].token_source(), TokenSource::TargetSet);
        assert_eq!(s.batch(2, &[3, 11], 4).unwrap().noise, b.noise);
        let moved = b.with_task_id(9);
        assert!(moved.contexts.iter().all(|c| c.task_id() == 9));
        assert!(s.batch(3, &[0], 4).is_err());
    }

    #[test]
    fn eval_examples_are_held_out() {
        let s = suite(SuiteVariant::Conflicting);
        let e = s.eval_batches(0, 4).unwrap();
        assert_eq!(e.len(), 4);
        let first = s.batch(0, &[400], 4).unwrap();
        assert_eq!(e[0].noise.row(0), first.noise.row(0));
    }
}
