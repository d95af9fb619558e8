//! Head-wise incremental tuning of query/key projections.
//!
//! Heads are tuned one after another on positively-labelled samples the
//! model currently gets wrong. After each epoch the head's own NAS (α) and
//! the model NAS (β) are measured on a held-out split; a head stops when
//! either rises or α drops below `rho`, its update is reverted when either
//! ended above its starting value, and the whole run halts once β falls
//! below `tau`.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::config::ModelConfig;
use crate::error::{input_err, Error, Result};
use crate::model::{AnswerExample, ModelState};
use crate::nas::{self, NasMatrix};
use crate::sample::{BinarySample, HeadId, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    Nasa,
    /// Same head list as `Nasa`, key projections never move.
    FreezeKey,
    /// A seeded random head list of the same size.
    RandomHeads,
}

impl TuneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TuneMode::Nasa => "nasa",
            TuneMode::FreezeKey => "freeze-key",
            TuneMode::RandomHeads => "random-heads",
        }
    }
}

impl core::str::FromStr for TuneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nasa" => Ok(TuneMode::Nasa),
            "freeze-key" | "freeze_key" => Ok(TuneMode::FreezeKey),
            "random-heads" | "random_heads" => Ok(TuneMode::RandomHeads),
            _ => Err(Error::Config(alloc::format!(
                "unknown tuning mode {s:?} (expected nasa, freeze-key or random-heads)"
            ))),
        }
    }
}

/// Halting threshold: a fixed value, or the minimum per-sample model NAS
/// over the probing set's true positives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tau {
    Auto,
    Fixed(f64),
}

impl fmt::Display for Tau {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tau::Auto => f.write_str("auto"),
            Tau::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl core::str::FromStr for Tau {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Tau::Auto);
        }
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Tau::Fixed)
            .ok_or_else(|| Error::Config(alloc::format!("tau must be \"auto\" or a finite number, got {s:?}")))
    }
}

impl Serialize for Tau {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        match self {
            Tau::Auto => s.serialize_str("auto"),
            Tau::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Tau {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = Tau;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("\"auto\" or a number")
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> core::result::Result<Tau, E> {
                v.parse().map_err(E::custom)
            }
            fn visit_f64<E: serde::de::Error>(self, v: f64) -> core::result::Result<Tau, E> {
                Ok(Tau::Fixed(v))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> core::result::Result<Tau, E> {
                Ok(Tau::Fixed(v as f64))
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> core::result::Result<Tau, E> {
                Ok(Tau::Fixed(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneParams {
    pub rho: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub tau: Tau,
    pub mode: TuneMode,
    pub val_fraction: f64,
    /// Fraction of each head's scheduled steps spent on a linear lr ramp.
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl Default for TuneParams {
    fn default() -> Self {
        Self {
            rho: 0.5,
            lr: 1e-6,
            batch_size: 32,
            max_epochs: 30,
            tau: Tau::Auto,
            mode: TuneMode::Nasa,
            val_fraction: 0.2,
            warmup_ratio: 0.03,
            seed: 0,
        }
    }
}

impl TuneParams {
    pub fn validate(&self) -> Result<()> {
        if !self.rho.is_finite() {
            return Err(Error::Config(alloc::format!("rho must be finite, got {}", self.rho)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(alloc::format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(alloc::format!(
                "val_fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(alloc::format!(
                "warmup_ratio must be in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NasRiseSingle,
    NasBelowRho,
    NasRiseModel,
    MaxEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochVerdict {
    Continue,
    Stop(StopReason),
}

/// Early-stopping test after one epoch; the reason is the first disjunct
/// that holds, in the order single-head rise, below `rho`, model rise.
pub fn epoch_check(alpha: f64, alpha_prime: f64, beta: f64, beta_prime: f64, rho: f64) -> EpochVerdict {
    if alpha_prime > alpha {
        EpochVerdict::Stop(StopReason::NasRiseSingle)
    } else if alpha_prime < rho {
        EpochVerdict::Stop(StopReason::NasBelowRho)
    } else if beta_prime > beta {
        EpochVerdict::Stop(StopReason::NasRiseModel)
    } else {
        EpochVerdict::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cancellation {
    Keep,
    Revert,
}

/// Revert when either score ended strictly above its starting value.
pub fn cancellation_check(alpha_prime: f64, alpha_init: f64, beta_prime: f64, beta_init: f64) -> Cancellation {
    if alpha_prime > alpha_init || beta_prime > beta_init {
        Cancellation::Revert
    } else {
        Cancellation::Keep
    }
}

/// Heads to tune: the probed list for `Nasa`/`FreezeKey`, otherwise `n`
/// heads sampled uniformly without replacement.
pub fn choose_heads(mode: TuneMode, selected: &[HeadId], n: usize, cfg: &ModelConfig, seed: u64) -> Result<Vec<HeadId>> {
    let all = HeadId::all(cfg);
    if n > all.len() {
        return Err(input_err!("cannot choose {n} heads from a model with {}", all.len()));
    }
    for h in selected {
        h.validate(cfg)?;
    }
    Ok(match mode {
        TuneMode::Nasa | TuneMode::FreezeKey => selected.to_vec(),
        TuneMode::RandomHeads => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            all.choose_multiple(&mut rng, n).copied().collect()
        }
    })
}

/// Splits the tuning samples into (train, validation): the last
/// `val_fraction` of a seeded shuffle is held out, at least one sample on
/// each side.
pub fn split_train_val(samples: &[BinarySample], val_fraction: f64, seed: u64) -> Result<(Vec<BinarySample>, Vec<BinarySample>)> {
    if samples.len() < 2 {
        return Err(input_err!(
            "need at least 2 tuning samples to hold out a validation split, got {}",
            samples.len()
        ));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(input_err!("val_fraction must be in (0, 1), got {val_fraction}"));
    }
    let mut shuffled = samples.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (libm::round(samples.len() as f64 * val_fraction) as usize).clamp(1, samples.len() - 1);
    let val = shuffled.split_off(samples.len() - n_val);
    Ok((shuffled, val))
}

/// Minimum per-sample model NAS over the true positives.
pub fn halting_threshold_from(per_sample_model_nas: &[f64]) -> Result<f64> {
    per_sample_model_nas
        .iter()
        .copied()
        .reduce(f64::min)
        .ok_or_else(|| Error::Probing("no true positives in the probing set, cannot derive tau".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadLog {
    pub layer: usize,
    pub head: usize,
    pub epochs: usize,
    pub stop_reason: StopReason,
    pub cancelled: bool,
    pub alpha_init: f64,
    pub beta_init: f64,
    /// α' after every epoch, including the one that stopped the head.
    pub alpha_trace: Vec<f64>,
    pub beta_trace: Vec<f64>,
    /// Model NAS on the validation split once the head is kept or reverted;
    /// this is what the halting test compares with `tau`.
    pub beta_after: f64,
}

impl HeadLog {
    pub fn head_id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneLog {
    pub tau: f64,
    pub params: TuneParams,
    pub heads: Vec<HeadLog>,
    /// Index into `heads` of the head after which the run halted.
    pub halted_at: Option<usize>,
    pub initial_val_nas: Option<f64>,
    pub final_val_nas: Option<f64>,
    pub train_size: usize,
    pub val_size: usize,
}

/// Algorithm bookkeeping for the head currently being tuned.
#[derive(Debug, Clone)]
pub struct TunerState {
    pub head: HeadId,
    pub epoch: usize,
    pub alpha_init: f64,
    pub beta_init: f64,
    pub alpha: f64,
    pub beta: f64,
    pub alpha_prime: f64,
    pub beta_prime: f64,
}

impl TunerState {
    fn start(head: HeadId, alpha_init: f64, beta_init: f64) -> Self {
        Self {
            head,
            epoch: 0,
            alpha_init,
            beta_init,
            alpha: f64::INFINITY,
            beta: f64::INFINITY,
            alpha_prime: alpha_init,
            beta_prime: beta_init,
        }
    }
}

fn measure(model: &ModelState, val: &[BinarySample], head: HeadId) -> Result<(f64, f64)> {
    let means = NasMatrix::compute(model, val)?.head_means()?;
    let alpha = means[head.flat_index(model.config())];
    Ok((alpha, means.iter().sum()))
}

/// Per-step learning rates for one head: a linear ramp from zero over the
/// first `ceil(warmup_ratio · steps)` steps, skipped when that is under one step.
pub fn lr_schedule(lr: f64, warmup_ratio: f64, total_steps: usize) -> impl Fn(usize) -> f64 {
    let exact = warmup_ratio * total_steps as f64;
    let warmup = if exact < 1.0 { 0 } else { libm::ceil(exact) as usize };
    move |step| {
        if step < warmup {
            lr * step as f64 / warmup as f64
        } else {
            lr
        }
    }
}

/// Runs the tuning loop over `heads` in order. `train` and `val` must be
/// positively-labelled; the answer-token loss targets each sample's
/// positive candidate.
pub fn run_nasa(
    model: &mut ModelState,
    heads: &[HeadId],
    train: &[BinarySample],
    val: &[BinarySample],
    tau: f64,
    params: &TuneParams,
) -> Result<TuneLog> {
    params.validate()?;
    let mut log = TuneLog {
        tau,
        params: params.clone(),
        heads: Vec::new(),
        halted_at: None,
        initial_val_nas: None,
        final_val_nas: None,
        train_size: train.len(),
        val_size: val.len(),
    };
    if heads.is_empty() {
        return Ok(log);
    }
    if train.is_empty() || val.is_empty() {
        return Err(input_err!("tuning needs non-empty train and validation splits"));
    }
    for s in train.iter().chain(val) {
        if s.label != Label::Positive {
            return Err(input_err!("tuning sample {} is not positively labelled", s.id));
        }
        model.check_tokens(&s.tokens)?;
    }
    for h in heads {
        h.validate(model.config())?;
    }
    let freeze_key = params.mode == TuneMode::FreezeKey;
    let examples: Vec<AnswerExample<'_>> = train
        .iter()
        .map(|s| AnswerExample {
            prompt: &s.tokens,
            answer: s.positive_token(),
        })
        .collect();
    let batches_per_epoch = examples.len().div_ceil(params.batch_size);
    let lr_at = lr_schedule(params.lr, params.warmup_ratio, batches_per_epoch * params.max_epochs);

    log.initial_val_nas = Some(nas::model_nas(val, model)?);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut batch = Vec::with_capacity(params.batch_size);
    for (idx, &head) in heads.iter().enumerate() {
        let snapshot = model.snapshot_head(head)?;
        let (alpha_init, beta_init) = measure(model, val, head)?;
        let mut st = TunerState::start(head, alpha_init, beta_init);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(idx as u64);
        let mut alpha_trace = Vec::new();
        let mut beta_trace = Vec::new();
        let mut reason = StopReason::MaxEpochs;
        let mut step = 0;
        for epoch in 1..=params.max_epochs {
            st.epoch = epoch;
            order.shuffle(&mut rng);
            for chunk in order.chunks(params.batch_size) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| examples[i]));
                model.tune_step(head, &batch, lr_at(step) as f32, freeze_key)?;
                step += 1;
            }
            let (a, b) = measure(model, val, head)?;
            st.alpha_prime = a;
            st.beta_prime = b;
            alpha_trace.push(a);
            beta_trace.push(b);
            if let EpochVerdict::Stop(r) = epoch_check(st.alpha, a, st.beta, b, params.rho) {
                reason = r;
                break;
            }
            st.alpha = a;
            st.beta = b;
        }
        let cancelled = cancellation_check(st.alpha_prime, st.alpha_init, st.beta_prime, st.beta_init) == Cancellation::Revert;
        let beta_after = if cancelled {
            model.restore_head(head, &snapshot)?;
            nas::model_nas(val, model)?
        } else {
            st.beta_prime
        };
        log.heads.push(HeadLog {
            layer: head.layer,
            head: head.head,
            epochs: st.epoch,
            stop_reason: reason,
            cancelled,
            alpha_init,
            beta_init,
            alpha_trace,
            beta_trace,
            beta_after,
        });
        if beta_after < tau {
            log.halted_at = Some(idx);
            break;
        }
    }
    log.final_val_nas = Some(nas::model_nas(val, model)?);
    Ok(log)
}

/// Short human-readable summary, one line per head.
pub fn summarize(log: &TuneLog) -> String {
    use core::fmt::Write;
    let mut out = String::new();
    for (i, h) in log.heads.iter().enumerate() {
        let _ = writeln!(
            out,
            "{} epochs={} stop={:?} cancelled={} beta {:.4} -> {:.4}{}",
            h.head_id(),
            h.epochs,
            h.stop_reason,
            h.cancelled,
            h.beta_init,
            h.beta_after,
            if log.halted_at == Some(i) { " (halted)" } else { "" }
        );
    }
    out
}
