use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::task::{TaskGenerator, TaskKind, TokenSampling};
use super::{make_task, ToyModel, ToyModelConfig, POSITION_EMBEDDING};
use crate::error::{Error, Result};

/// Sub-stream labels for the run seed.
const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub eval_sequences: usize,
    /// Evaluation length; defaults to the training length.
    pub eval_len: Option<usize>,
    pub sampling: TokenSampling,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 0.1,
            clip_norm: 1.0,
            eval_sequences: 256,
            eval_len: None,
            sampling: TokenSampling::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub eval_accuracy: f64,
    pub eval_len: usize,
    pub positional_param_count: u64,
    /// Not serialized, so reports from identical runs are byte-identical.
    #[serde(skip)]
    pub wall_time_seconds: f64,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub report: TrainReport,
}

fn stream(
    kind: TaskKind,
    n: usize,
    vocab: usize,
    seed: u64,
    label: u64,
    sampling: TokenSampling,
) -> Result<TaskGenerator> {
    let mut s = crate::rng::SeededRng::derive(seed, label);
    Ok(make_task(kind, n, vocab, s.next_u64())?.with_sampling(sampling))
}

/// Plain gradient descent with global-norm clipping on freshly sampled
/// batches, then held-out accuracy on an independent stream.
pub fn train(config: ToyModelConfig, task: TaskKind, opts: &TrainOptions) -> Result<TrainOutcome> {
    if opts.steps == 0 || opts.batch_size == 0 {
        return Err(Error::domain("steps and batch size must be positive"));
    }
    let started = Instant::now();
    let mut model = ToyModel::init(config)?;
    let cfg = model.config.clone();
    let mut data = stream(task, cfg.n_max, cfg.vocab, cfg.seed, TRAIN_STREAM, opts.sampling)?;

    let frozen: Vec<bool> = model
        .params
        .iter()
        .map(|(name, _)| cfg.freeze_position_embeddings && name == POSITION_EMBEDDING)
        .collect();

    let mut history = Vec::with_capacity(opts.steps);
    let mut last_finite = f64::NAN;
    for step in 0..opts.steps {
        let batch = data.batch(opts.batch_size);
        let (loss, grads) = model.loss_and_gradients(&batch)?;
        let norm = grads
            .iter()
            .map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                last_finite_loss: last_finite,
            });
        }
        last_finite = loss;
        history.push(loss);

        let factor = if norm > opts.clip_norm {
            opts.learning_rate * opts.clip_norm / norm
        } else {
            opts.learning_rate
        };
        for (((_, param), grad), &skip) in model.params.iter_mut().zip(&grads).zip(&frozen) {
            if skip {
                continue;
            }
            for (p, g) in param.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *p -= factor * g;
            }
        }
    }

    let eval_len = opts.eval_len.unwrap_or(cfg.n_max);
    let accuracy = evaluate(&model, task, eval_len, opts.eval_sequences, cfg.seed, opts.sampling)?;
    let report = TrainReport {
        steps: opts.steps,
        final_loss: last_finite,
        eval_accuracy: accuracy,
        eval_len,
        positional_param_count: cfg.positional_param_count(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        loss_history: history,
    };
    Ok(TrainOutcome { model, report })
}

/// Argmax accuracy over targeted positions of `count` fresh sequences of
/// length `len`, drawn from the evaluation stream of `seed`.
pub fn evaluate(
    model: &ToyModel,
    task: TaskKind,
    len: usize,
    count: usize,
    seed: u64,
    sampling: TokenSampling,
) -> Result<f64> {
    let cfg = &model.config;
    let mut data = stream(task, cfg.n_max.max(len), cfg.vocab, seed, EVAL_STREAM, sampling)?;
    let mut correct = 0;
    let mut counted = 0;
    for _ in 0..count {
        let ex = data.sample_len(len);
        let (c, n) = model.score(&ex)?;
        correct += c;
        counted += n;
    }
    if counted == 0 {
        return Err(Error::domain("evaluation produced no targets"));
    }
    Ok(correct as f64 / counted as f64)
}
