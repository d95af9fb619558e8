//! The experiment stages as library calls: pretraining, bias injection,
//! probing, tuning and evaluation. The command line wraps these with file IO.

use std::collections::{BTreeMap, BTreeSet};

use ablb_core::dataset::{gen_synthetic, select_parametric, ExactMatch, QaRecord};
use ablb_core::eval::{confusion, evaluate, prf1, ConfusionCounts, EvalRecord, MetricsReport};
use ablb_core::nas::{model_nas, NasMatrix};
use ablb_core::probing::{partition_tp_fn, select_from_matrix, ProbeResult};
use ablb_core::train::{decision_examples, short_answer_examples, train, TrainParams, TrainScope};
use ablb_core::tuner::{choose_heads, run_nasa, split_train_val, Tau, TuneLog, TuneMode, TuneParams};
use ablb_core::{BinarySample, Error, HeadId, HeadScore, Label, ModelConfig, ModelState};
use serde::{Deserialize, Serialize};

use crate::config::{ProbeConfig, RunConfig};
use crate::error::AppResult;

/// Offset from the run seed for the bias-injection data and batch order.
pub const BIAS_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStat>,
    pub reached_target: bool,
}

/// Mean of the per-class recalls; classes with no samples are left out.
pub fn balanced_accuracy(c: &ConfusionCounts) -> f64 {
    let mut parts = Vec::new();
    if c.tp + c.fn_ > 0 {
        parts.push(c.tp as f64 / (c.tp + c.fn_) as f64);
    }
    if c.tn + c.fp > 0 {
        parts.push(c.tn as f64 / (c.tn + c.fp) as f64);
    }
    if parts.is_empty() {
        0.0
    } else {
        parts.iter().sum::<f64>() / parts.len() as f64
    }
}

fn decision_counts(model: &ModelState, samples: &[BinarySample]) -> AppResult<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for s in samples {
        match (s.label, model.answer_decision(s)?.decision) {
            (Label::Positive, Label::Positive) => c.tp += 1,
            (Label::Negative, Label::Positive) => c.fp += 1,
            (Label::Negative, Label::Negative) => c.tn += 1,
            (Label::Positive, Label::Negative) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn epoch_stat(epoch: usize, loss: f64, model: &ModelState, dev: &[BinarySample]) -> AppResult<EpochStat> {
    let c = decision_counts(model, dev)?;
    let m = prf1(&c);
    Ok(EpochStat {
        epoch,
        loss,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        balanced_accuracy: balanced_accuracy(&c),
    })
}

/// Distinct questions of a sample set, sorted by question text.
pub fn qa_from_samples(samples: &[BinarySample]) -> Vec<QaRecord> {
    let unique: BTreeMap<&str, &str> = samples.iter().map(|s| (s.question.as_str(), s.gold.as_str())).collect();
    unique
        .into_iter()
        .map(|(q, gold)| QaRecord {
            id: q.to_string(),
            question: q.to_string(),
            gold: gold.to_string(),
            wrong: None,
            task_tag: String::new(),
        })
        .collect()
}

/// Trains `model` with an evaluation on `dev` after every epoch, stopping
/// once `stop` accepts the epoch's statistics.
fn train_until(
    model: &mut ModelState,
    examples: &[ablb_core::train::Example],
    params: &TrainParams,
    dev: &[BinarySample],
    stop: impl Fn(&EpochStat) -> bool,
) -> AppResult<TrainLog> {
    let mut epochs = Vec::new();
    let mut failure = None;
    let mut reached = false;
    train(model, examples, params, |epoch, m, loss| match epoch_stat(epoch + 1, loss, m, dev) {
        Ok(stat) => {
            reached = stop(&stat);
            epochs.push(stat);
            !reached
        }
        Err(e) => {
            failure = Some(e);
            false
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(TrainLog {
        epochs,
        reached_target: reached,
    })
}

/// Trains a fresh model on the decision samples plus short-answer prompts
/// for their questions until dev balanced accuracy reaches the target.
pub fn pretrain(cfg: &RunConfig, train_set: &[BinarySample], dev: &[BinarySample]) -> AppResult<(ModelState, TrainLog)> {
    let mut model = ModelState::build(ModelConfig { seed: cfg.seed, ..cfg.model })?;
    let mut examples = decision_examples(train_set);
    let qa = short_answer_examples(&qa_from_samples(train_set))?;
    for _ in 0..cfg.pretrain.short_answer_repeats {
        examples.extend(qa.iter().cloned());
    }
    let p = &cfg.pretrain;
    let params = TrainParams {
        epochs: p.max_epochs,
        batch_size: p.batch_size,
        lr: p.lr,
        clip_norm: p.clip_norm,
        seed: cfg.seed,
        scope: TrainScope::Full,
    };
    let target = p.target_balanced_accuracy;
    let log = train_until(&mut model, &examples, &params, dev, |s| s.balanced_accuracy >= target)?;
    Ok((model, log))
}

/// Continues training on a `yes_ratio`-skewed set until dev
/// precision − recall reaches the target gap.
pub fn bias_inject(model: &mut ModelState, cfg: &RunConfig, dev: &[BinarySample]) -> AppResult<TrainLog> {
    let b = &cfg.bias;
    let stream = cfg.seed.wrapping_add(BIAS_STREAM);
    let data = gen_synthetic(&cfg.task.spec()?, b.n, b.yes_ratio, stream)?;
    let params = TrainParams {
        epochs: b.max_epochs,
        batch_size: b.batch_size,
        lr: b.lr,
        clip_norm: b.clip_norm,
        seed: stream,
        scope: b.scope,
    };
    let target = b.target_gap;
    train_until(model, &decision_examples(&data.samples), &params, dev, |s| {
        s.precision - s.recall >= target
    })
}

/// Contents of `heads.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsFile {
    #[serde(flatten)]
    pub probe: ProbeResult,
    /// Minimum per-sample model NAS over the true positives.
    pub tau: Option<f64>,
    /// Samples left after the parametric filter.
    pub probe_size: usize,
    pub dropped_non_parametric: usize,
    /// Single-head NAS of every head on the probing set, layer-major.
    pub nas_table: Vec<HeadScore>,
    pub tp: Vec<String>,
    #[serde(rename = "fn")]
    pub fn_: Vec<String>,
}

/// Result of [`probe`]: the heads file and the false-negative samples used for tuning.
pub struct ProbeOutput {
    pub heads: HeadsFile,
    pub fn_samples: Vec<BinarySample>,
}

/// Probes a positive-only sample set. `k` and `n` are clipped to the head count.
pub fn probe(model: &ModelState, samples: &[BinarySample], cfg: &ProbeConfig) -> AppResult<ProbeOutput> {
    if let Some(s) = samples.iter().find(|s| s.label != Label::Positive) {
        return Err(Error::Input(format!("probing sample {} is negatively labelled", s.id)).into());
    }
    let kept: Vec<BinarySample> = if cfg.parametric_filter {
        let known: BTreeSet<String> = select_parametric(model, &qa_from_samples(samples), &ExactMatch)?
            .into_iter()
            .map(|r| r.question)
            .collect();
        samples.iter().filter(|s| known.contains(&s.question)).cloned().collect()
    } else {
        samples.to_vec()
    };
    if kept.is_empty() {
        return Err(Error::Probing("no probing samples left after the parametric filter".into()).into());
    }
    let total = model.config().total_heads();
    let m = NasMatrix::compute(model, &kept)?;
    let result = select_from_matrix(&m, cfg.k.min(total), cfg.top_n.min(total), cfg.consistency)?;
    let part = partition_tp_fn(model, &kept)?;
    let tau = if part.tp.is_empty() {
        None
    } else {
        let tp_idx: BTreeSet<&str> = part.tp.iter().map(|s| s.id.as_str()).collect();
        let per_sample = m.per_sample_model();
        kept.iter()
            .zip(per_sample)
            .filter(|(s, _)| tp_idx.contains(s.id.as_str()))
            .map(|(_, v)| v)
            .reduce(f64::min)
    };
    Ok(ProbeOutput {
        heads: HeadsFile {
            probe: result,
            tau,
            probe_size: kept.len(),
            dropped_non_parametric: samples.len() - kept.len(),
            nas_table: m.table()?,
            tp: part.tp.iter().map(|s| s.id.clone()).collect(),
            fn_: part.fn_.iter().map(|s| s.id.clone()).collect(),
        },
        fn_samples: part.fn_,
    })
}

/// Splits `fn_samples` into tuning and validation sets (seeded by
/// `params.seed`), resolves τ and runs the tuner over the heads picked by
/// `params.mode`. Random-heads mode draws `budget` heads (default: as many as
/// were selected) with `head_seed`.
pub fn tune(
    model: &mut ModelState,
    heads: &HeadsFile,
    fn_samples: &[BinarySample],
    params: &TuneParams,
    budget: Option<usize>,
    head_seed: u64,
) -> AppResult<TuneLog> {
    let tau = match params.tau {
        Tau::Fixed(t) => t,
        Tau::Auto => heads
            .tau
            .ok_or_else(|| Error::Probing("heads file has no tau (no true positives); pass --tau".into()))?,
    };
    let selected: Vec<HeadId> = heads.probe.selected_heads();
    let n = match params.mode {
        TuneMode::RandomHeads => budget.unwrap_or(selected.len()),
        _ => selected.len(),
    };
    let order = choose_heads(params.mode, &selected, n, model.config(), head_seed)?;
    let (train_set, val) = split_train_val(fn_samples, params.val_fraction, params.seed)?;
    Ok(run_nasa(model, &order, &train_set, &val, tau, params)?)
}

/// Metrics over `samples` plus the per-sample records.
pub fn eval(model: &ModelState, samples: &[BinarySample]) -> AppResult<(MetricsReport, Vec<EvalRecord>)> {
    let records = evaluate(model, samples)?;
    confusion(&records)?;
    let nas = model_nas(samples, model)?;
    Ok((MetricsReport::from_records(&records, Some(nas))?, records))
}
