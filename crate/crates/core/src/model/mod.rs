//! Minimal decoder-only causal transformer with per-head attention access and
//! a gradient path restricted to one head's query/key projections.

pub mod engine;
pub mod ops;
pub mod params;

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{input_err, Error, Result};
use crate::sample::{BinarySample, HeadId, Label};
use crate::scalar::clamped_ln;
use crate::vocab::TokenId;
use engine::GradSink;
pub use params::{manifest, HeadWeights, Params, TensorSpec};

/// Per-layer, per-head attention matrices from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub seq_len: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    data: Vec<f64>,
}

impl AttentionStack {
    /// Builds a stack from explicit matrices (layer-major, then head), each
    /// `seq_len × seq_len` row-major.
    pub fn from_matrices(
        seq_len: usize,
        num_layers: usize,
        num_heads: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != seq_len * seq_len * num_layers * num_heads {
            return Err(input_err!(
                "attention data length {} does not match {num_layers}x{num_heads} heads of {seq_len}x{seq_len}",
                data.len()
            ));
        }
        Ok(Self {
            seq_len,
            num_layers,
            num_heads,
            data,
        })
    }

    /// The `seq_len × seq_len` matrix of one head.
    pub fn head(&self, head: HeadId) -> &[f64] {
        let n2 = self.seq_len * self.seq_len;
        let idx = head.layer * self.num_heads + head.head;
        &self.data[idx * n2..(idx + 1) * n2]
    }

    pub fn heads(&self) -> impl Iterator<Item = (HeadId, &[f64])> {
        let n2 = self.seq_len * self.seq_len;
        let nh = self.num_heads;
        self.data
            .chunks_exact(n2.max(1))
            .enumerate()
            .map(move |(i, m)| (HeadId::new(i / nh, i % nh), m))
    }
}

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub attn: AttentionStack,
}

/// Next-token distribution after a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstToken {
    pub probs: Vec<f64>,
    /// Nats.
    pub entropy: f64,
}

/// Restricted-argmax answer to a binary sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub decision: Label,
    /// Full-vocabulary probability of the chosen candidate token.
    pub confidence: f64,
    pub entropy: f64,
    pub p_positive: f64,
    pub p_negative: f64,
}

/// One `(prompt, answer token)` pair of the answer-token objective.
#[derive(Debug, Clone, Copy)]
pub struct AnswerExample<'a> {
    pub prompt: &'a [TokenId],
    pub answer: TokenId,
}

/// A head's query and key projections (or gradients shaped like them).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub head: HeadId,
    pub query_proj: Vec<f32>,
    pub key_proj: Vec<f32>,
}

/// Shannon entropy in nats with the usual probability floor.
pub fn entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * clamped_ln(p))
        .sum();
    h.max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    params: Params<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checksum(pub u64);

impl ModelState {
    /// Seeded random initialization.
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            params: Params::init(&cfg),
        })
    }

    pub fn from_params(params: Params<f32>) -> Result<Self> {
        params.cfg.validate()?;
        let expected = manifest(&params.cfg);
        for (spec, t) in expected.iter().zip(params.tensors()) {
            if spec.numel() != t.len() {
                return Err(Error::Config(alloc::format!(
                    "tensor {} has {} values, expected {}",
                    spec.name,
                    t.len(),
                    spec.numel()
                )));
            }
        }
        Ok(Self { params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.cfg
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<f32> {
        &mut self.params
    }

    pub fn checksum(&self) -> Checksum {
        Checksum(self.params.checksum())
    }

    pub fn bit_equal(&self, other: &Self) -> bool {
        self.params.bit_equal(&other.params)
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        let cfg = self.config();
        if tokens.is_empty() || tokens.len() > cfg.max_seq_len {
            return Err(input_err!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                cfg.max_seq_len
            ));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(input_err!(
                "token id {t} is outside the vocabulary of {}",
                cfg.vocab_size
            ));
        }
        Ok(())
    }

    /// Logits for every position and the attention stack.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        let cache = engine::forward(&self.params, tokens);
        let vocab = self.config().vocab_size;
        let mut data = Vec::with_capacity(tokens.len() * vocab);
        for pos in 0..tokens.len() {
            data.extend(
                engine::logits_at(&self.params, &cache, pos)
                    .into_iter()
                    .map(f64::from),
            );
        }
        Ok(ForwardOutput {
            logits: Matrix {
                rows: tokens.len(),
                cols: vocab,
                data,
            },
            attn: self.stack_from(&cache),
        })
    }

    /// Attention stack only.
    pub fn attention(&self, tokens: &[TokenId]) -> Result<AttentionStack> {
        self.check_tokens(tokens)?;
        let cache = engine::forward(&self.params, tokens);
        Ok(self.stack_from(&cache))
    }

    fn stack_from(&self, cache: &engine::ForwardCache<f32>) -> AttentionStack {
        let cfg = self.config();
        let data = cache
            .layers
            .iter()
            .flat_map(|l| l.heads.iter())
            .flat_map(|h| h.attn.iter().map(|&a| a as f64))
            .collect();
        AttentionStack {
            seq_len: cache.n,
            num_layers: cfg.num_layers,
            num_heads: cfg.num_heads,
            data,
        }
    }

    /// Distribution over the token that would follow `prompt`.
    pub fn first_token_distribution(&self, prompt: &[TokenId]) -> Result<FirstToken> {
        self.check_tokens(prompt)?;
        let cache = engine::forward(&self.params, prompt);
        let logits = engine::logits_at(&self.params, &cache, prompt.len() - 1);
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut probs: Vec<f64> = logits
            .iter()
            .map(|&l| libm::exp(l as f64 - max))
            .collect();
        let sum: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= sum;
        }
        let entropy = entropy(&probs);
        Ok(FirstToken { probs, entropy })
    }

    /// Argmax restricted to the sample's two candidate tokens, ties to Positive.
    pub fn answer_decision(&self, sample: &BinarySample) -> Result<Decision> {
        let pos_tok = sample.positive_token();
        let neg_tok = sample.negative_token();
        let vocab = self.config().vocab_size;
        if pos_tok as usize >= vocab || neg_tok as usize >= vocab {
            return Err(Error::Config(alloc::format!(
                "candidate tokens {pos_tok}/{neg_tok} are outside the vocabulary of {vocab}"
            )));
        }
        let ft = self.first_token_distribution(&sample.tokens)?;
        Ok(decide(&ft, pos_tok, neg_tok))
    }

    /// Greedy next token after `prompt`.
    pub fn greedy_token(&self, prompt: &[TokenId]) -> Result<TokenId> {
        let ft = self.first_token_distribution(prompt)?;
        Ok(argmax(&ft.probs) as TokenId)
    }

    fn check_batch(&self, batch: &[AnswerExample<'_>]) -> Result<()> {
        if batch.is_empty() {
            return Err(input_err!("empty batch"));
        }
        for ex in batch {
            self.check_tokens(ex.prompt)?;
            if ex.answer as usize >= self.config().vocab_size {
                return Err(input_err!("answer token {} outside vocabulary", ex.answer));
            }
        }
        Ok(())
    }

    /// Mean negative log-likelihood of each answer token at the position right
    /// after its prompt. No other position contributes.
    pub fn loss_answer_token(&self, batch: &[AnswerExample<'_>]) -> Result<f64> {
        self.check_batch(batch)?;
        let total: f64 = batch
            .iter()
            .map(|ex| engine::answer_nll(&self.params, ex.prompt, ex.answer, None))
            .sum();
        Ok(total / batch.len() as f64)
    }

    /// Gradient of [`Self::loss_answer_token`] w.r.t. one head's query and key
    /// projections; everything else is held constant.
    pub fn head_gradients(&self, head: HeadId, batch: &[AnswerExample<'_>]) -> Result<HeadParams> {
        self.head_gradients_inner(head, batch, false)
    }

    fn head_gradients_inner(
        &self,
        head: HeadId,
        batch: &[AnswerExample<'_>],
        freeze_key: bool,
    ) -> Result<HeadParams> {
        head.validate(self.config())?;
        self.check_batch(batch)?;
        let (dwq, dwk) = head_qk_gradients(&self.params, head, batch, freeze_key);
        Ok(HeadParams {
            head,
            query_proj: dwq,
            key_proj: dwk,
        })
    }

    /// One plain gradient-descent step on the head's query/key projections.
    /// With `freeze_key` only the query projection moves.
    pub fn tune_step(
        &mut self,
        head: HeadId,
        batch: &[AnswerExample<'_>],
        lr: f32,
        freeze_key: bool,
    ) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(input_err!("learning rate must be finite and non-negative, got {lr}"));
        }
        let grads = self.head_gradients_inner(head, batch, freeze_key)?;
        if lr == 0.0 {
            return Ok(());
        }
        let hw = &mut self.params.layers[head.layer].heads[head.head];
        for (w, g) in hw.wq.iter_mut().zip(&grads.query_proj) {
            *w -= lr * g;
        }
        if !freeze_key {
            for (w, g) in hw.wk.iter_mut().zip(&grads.key_proj) {
                *w -= lr * g;
            }
        }
        Ok(())
    }

    pub fn snapshot_head(&self, head: HeadId) -> Result<HeadParams> {
        head.validate(self.config())?;
        let hw = &self.params.layers[head.layer].heads[head.head];
        Ok(HeadParams {
            head,
            query_proj: hw.wq.clone(),
            key_proj: hw.wk.clone(),
        })
    }

    pub fn restore_head(&mut self, head: HeadId, params: &HeadParams) -> Result<()> {
        head.validate(self.config())?;
        let cfg = self.config();
        let expected = cfg.model_dim * cfg.head_dim();
        if params.query_proj.len() != expected || params.key_proj.len() != expected {
            return Err(input_err!(
                "head params have {}/{} values, expected {expected} each",
                params.query_proj.len(),
                params.key_proj.len()
            ));
        }
        let hw = &mut self.params.layers[head.layer].heads[head.head];
        hw.wq.copy_from_slice(&params.query_proj);
        hw.wk.copy_from_slice(&params.key_proj);
        Ok(())
    }
}

/// Mean answer-token gradient w.r.t. one head's query/key projections, in
/// whatever precision `params` carries.
pub fn head_qk_gradients<T: crate::scalar::Real>(
    params: &Params<T>,
    head: HeadId,
    batch: &[AnswerExample<'_>],
    freeze_key: bool,
) -> (Vec<T>, Vec<T>) {
    let n = params.cfg.model_dim * params.cfg.head_dim();
    let mut dwq = vec![T::ZERO; n];
    let mut dwk = vec![T::ZERO; n];
    let weight = T::from_f64(1.0 / batch.len() as f64);
    {
        let mut sink = GradSink::HeadQk {
            head,
            dwq: &mut dwq,
            dwk: &mut dwk,
            freeze_key,
        };
        for ex in batch {
            engine::answer_nll(params, ex.prompt, ex.answer, Some((&mut sink, weight)));
        }
    }
    (dwq, dwk)
}

/// Mean answer-token loss and its gradient w.r.t. every parameter.
pub fn full_gradients<T: crate::scalar::Real>(
    params: &Params<T>,
    batch: &[AnswerExample<'_>],
    grads: &mut Params<T>,
) -> f64 {
    grads.fill_zero();
    let weight = T::from_f64(1.0 / batch.len() as f64);
    let mut sink = GradSink::Full(grads);
    let total: f64 = batch
        .iter()
        .map(|ex| engine::answer_nll(params, ex.prompt, ex.answer, Some((&mut sink, weight))))
        .sum();
    total / batch.len() as f64
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Restricted argmax over the two candidate tokens of a first-token distribution.
pub fn decide(ft: &FirstToken, positive: TokenId, negative: TokenId) -> Decision {
    let p_positive = ft.probs[positive as usize];
    let p_negative = ft.probs[negative as usize];
    let (decision, confidence) = if p_positive >= p_negative {
        (Label::Positive, p_positive)
    } else {
        (Label::Negative, p_negative)
    };
    Decision {
        decision,
        confidence,
        entropy: ft.entropy,
        p_positive,
        p_negative,
    }
}
