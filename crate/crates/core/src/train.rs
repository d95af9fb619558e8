//! Full-model training on the answer-token objective: used to pretrain the
//! toy model and to skew it toward negative answers before probing.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{short_answer_prompt, QaRecord};
use crate::error::{input_err, Result};
use crate::model::{full_gradients, manifest, AnswerExample, ModelState, Params};
use crate::sample::{BinarySample, Label};
use crate::vocab::{self, TokenId};

/// Owned `(prompt, answer)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<TokenId>,
    pub answer: TokenId,
}

impl Example {
    pub fn borrow(&self) -> AnswerExample<'_> {
        AnswerExample {
            prompt: &self.prompt,
            answer: self.answer,
        }
    }
}

/// The candidate token matching each sample's label.
pub fn decision_examples(samples: &[BinarySample]) -> Vec<Example> {
    samples
        .iter()
        .map(|s| Example {
            prompt: s.tokens.clone(),
            answer: match s.label {
                Label::Positive => s.positive_token(),
                Label::Negative => s.negative_token(),
            },
        })
        .collect()
}

/// Short-answer prompts with the gold token as target.
pub fn short_answer_examples(records: &[QaRecord]) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            Ok(Example {
                prompt: short_answer_prompt(&r.question)?,
                answer: vocab::single(&r.gold)?,
            })
        })
        .collect()
}

/// Which parameters a training run may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    #[default]
    Full,
    /// Every attention projection (query, key, value, output).
    Attention,
    /// Query and key projections only.
    QueryKey,
}

impl TrainScope {
    pub fn includes(self, tensor_name: &str) -> bool {
        let leaf = tensor_name.rsplit('.').next().unwrap_or(tensor_name);
        match self {
            TrainScope::Full => true,
            TrainScope::Attention => tensor_name.contains(".heads.") && matches!(leaf, "wq" | "wk" | "wv" | "wo"),
            TrainScope::QueryKey => tensor_name.contains(".heads.") && matches!(leaf, "wq" | "wk"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Gradients with a larger global L2 norm are rescaled to this norm.
    pub clip_norm: f64,
    pub seed: u64,
    pub scope: TrainScope,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 3e-3,
            clip_norm: 1.0,
            seed: 0,
            scope: TrainScope::Full,
        }
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Params<f32>,
    v: Params<f32>,
    step: u32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Adam {
    pub fn new(model: &ModelState) -> Self {
        Self {
            m: Params::zeros(model.config()),
            v: Params::zeros(model.config()),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, params: &mut Params<f32>, grads: &Params<f32>, lr: f32) {
        self.step += 1;
        let bc1 = 1.0 - libm::powf(self.beta1, self.step as f32);
        let bc2 = 1.0 - libm::powf(self.beta2, self.step as f32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (libm::sqrtf(vhat) + eps);
            }
        }
    }
}

fn clip(grads: &mut Params<f32>, max_norm: f64) {
    let sq: f64 = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = libm::sqrt(sq);
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for t in grads.tensors_mut() {
            for g in t.iter_mut() {
                *g *= s;
            }
        }
    }
}

/// Trains every parameter with Adam over seeded shuffled mini-batches.
/// `after_epoch(epoch, model, mean_loss)` runs after each epoch; returning
/// `false` stops training. Returns the per-epoch mean losses.
pub fn train<F>(model: &mut ModelState, examples: &[Example], params: &TrainParams, mut after_epoch: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &ModelState, f64) -> bool,
{
    if examples.is_empty() {
        return Err(input_err!("no training examples"));
    }
    if params.batch_size == 0 || !(params.lr > 0.0) {
        return Err(input_err!("batch_size and lr must be positive"));
    }
    for ex in examples {
        model.check_tokens(&ex.prompt)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut adam = Adam::new(model);
    let mut grads = Params::zeros(model.config());
    let mut losses = Vec::with_capacity(params.epochs);
    let frozen: Vec<bool> = manifest(model.config())
        .iter()
        .map(|t| !params.scope.includes(&t.name))
        .collect();
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(params.batch_size) {
            let batch: Vec<AnswerExample<'_>> = chunk.iter().map(|&i| examples[i].borrow()).collect();
            let loss = full_gradients(model.params(), &batch, &mut grads);
            total += loss * batch.len() as f64;
            for (g, _) in grads.tensors_mut().into_iter().zip(&frozen).filter(|(_, f)| **f) {
                g.fill(0.0);
            }
            clip(&mut grads, params.clip_norm);
            adam.update(model.params_mut(), &grads, params.lr as f32);
        }
        let mean = total / examples.len() as f64;
        losses.push(mean);
        if !after_epoch(epoch, model, mean) {
            break;
        }
    }
    Ok(losses)
}
