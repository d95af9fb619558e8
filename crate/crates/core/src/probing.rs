//! Negative-head probing: per-sample top-k heads by NAS, heads that show up
//! consistently across samples, and the top-N of those by mean NAS.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::model::ModelState;
use crate::nas::NasMatrix;
use crate::sample::{BinarySample, HeadId, HeadScore, Label};
use crate::tuner::halting_threshold_from;

pub const DEFAULT_CONSISTENCY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub k: usize,
    pub n: usize,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_sample_topk: Vec<Vec<HeadId>>,
    /// Layer-major.
    pub consistent: Vec<HeadId>,
    /// Descending single-head NAS.
    pub selected: Vec<HeadScore>,
    /// `consistent` had fewer than `n` heads.
    pub shortfall: bool,
}

impl ProbeResult {
    pub fn selected_heads(&self) -> Vec<HeadId> {
        self.selected.iter().map(|s| s.head).collect()
    }
}

/// Descending by score, ties to the lower (layer, head).
fn rank(a: &HeadScore, b: &HeadScore) -> Ordering {
    b.nas.total_cmp(&a.nas).then(a.head.cmp(&b.head))
}

/// The `k` best heads of one score vector (aligned with `heads`).
pub fn topk_from_scores(heads: &[HeadId], scores: &[f64], k: usize) -> Result<Vec<HeadId>> {
    if heads.len() != scores.len() {
        return Err(input_err!("{} heads but {} scores", heads.len(), scores.len()));
    }
    if k == 0 || k > heads.len() {
        return Err(input_err!("k must be in 1..={}, got {k}", heads.len()));
    }
    let mut ranked: Vec<HeadScore> = heads
        .iter()
        .zip(scores)
        .map(|(&head, &nas)| HeadScore { head, nas })
        .collect();
    ranked.sort_by(rank);
    Ok(ranked.into_iter().take(k).map(|s| s.head).collect())
}

pub fn topk_per_sample(model: &ModelState, sample: &BinarySample, k: usize) -> Result<Vec<HeadId>> {
    let m = NasMatrix::compute(model, core::slice::from_ref(sample))?;
    topk_from_scores(&m.heads, &m.rows[0], k)
}

/// Number of lists a head must appear in: `ceil(threshold · lists)`.
pub fn required_count(threshold: f64, lists: usize) -> usize {
    // the small slack keeps products like 0.9 · 20 from rounding up past an integer
    libm::ceil(threshold * lists as f64 - 1e-9) as usize
}

/// Heads present in at least `ceil(threshold · |lists|)` of the lists.
pub fn consistent_heads(lists: &[Vec<HeadId>], threshold: f64) -> Result<Vec<HeadId>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(input_err!("consistency threshold must be in (0, 1], got {threshold}"));
    }
    if lists.is_empty() {
        return Err(input_err!("no per-sample head lists"));
    }
    let need = required_count(threshold, lists.len());
    let mut counts = alloc::collections::BTreeMap::<HeadId, usize>::new();
    for list in lists {
        let unique: BTreeSet<HeadId> = list.iter().copied().collect();
        for h in unique {
            *counts.entry(h).or_default() += 1;
        }
    }
    Ok(counts.into_iter().filter(|&(_, c)| c >= need).map(|(h, _)| h).collect())
}

/// Probing on precomputed per-sample scores.
pub fn select_from_matrix(m: &NasMatrix, k: usize, n: usize, threshold: f64) -> Result<ProbeResult> {
    if n == 0 || n > m.heads.len() {
        return Err(input_err!("n must be in 1..={}, got {n}", m.heads.len()));
    }
    let per_sample_topk = m
        .rows
        .iter()
        .map(|r| topk_from_scores(&m.heads, r, k))
        .collect::<Result<Vec<_>>>()?;
    let consistent = consistent_heads(&per_sample_topk, threshold)?;
    let means = m.head_means()?;
    let mut scored: Vec<HeadScore> = consistent
        .iter()
        .map(|&h| {
            let i = m.heads.iter().position(|x| *x == h).expect("head from the matrix");
            HeadScore { head: h, nas: means[i] }
        })
        .collect();
    scored.sort_by(rank);
    let shortfall = scored.len() < n;
    scored.truncate(n);
    Ok(ProbeResult {
        k,
        n,
        threshold,
        per_sample_topk,
        consistent,
        selected: scored,
        shortfall,
    })
}

pub fn select_negative_heads(model: &ModelState, samples: &[BinarySample], k: usize, n: usize) -> Result<ProbeResult> {
    if samples.is_empty() {
        return Err(input_err!("probing needs at least one sample"));
    }
    let m = NasMatrix::compute(model, samples)?;
    select_from_matrix(&m, k, n, DEFAULT_CONSISTENCY)
}

/// `|a ∩ b| / max(|a|, |b|)` over the lists viewed as sets.
pub fn overlap_rate(a: &[HeadId], b: &[HeadId]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(input_err!("overlap of an empty head list"));
    }
    let sa: BTreeSet<_> = a.iter().collect();
    let sb: BTreeSet<_> = b.iter().collect();
    Ok(sa.intersection(&sb).count() as f64 / sa.len().max(sb.len()) as f64)
}

/// Overlap of two head lists with the counts behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub rate: f64,
    pub intersection: usize,
    pub size_a: usize,
    pub size_b: usize,
    /// How the rate was normalized; always `"max"` (the larger list).
    pub denominator: alloc::string::String,
}

pub fn overlap(a: &[HeadId], b: &[HeadId]) -> Result<Overlap> {
    let rate = overlap_rate(a, b)?;
    let sa: BTreeSet<_> = a.iter().collect();
    let sb: BTreeSet<_> = b.iter().collect();
    Ok(Overlap {
        rate,
        intersection: sa.intersection(&sb).count(),
        size_a: sa.len(),
        size_b: sb.len(),
        denominator: "max".into(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbePartition {
    /// Answered Positive.
    pub tp: Vec<BinarySample>,
    /// Answered Negative.
    pub fn_: Vec<BinarySample>,
    /// Set by [`halting_threshold`] when `tp` is non-empty.
    pub tau: Option<f64>,
}

/// Splits an all-positive probing set by the model's decision.
pub fn partition_tp_fn(model: &ModelState, probe_set: &[BinarySample]) -> Result<ProbePartition> {
    let mut tp = Vec::new();
    let mut fn_ = Vec::new();
    for s in probe_set {
        if s.label != Label::Positive {
            return Err(input_err!("probing sample {} is negatively labelled", s.id));
        }
        if model.answer_decision(s)?.decision == Label::Positive {
            tp.push(s.clone());
        } else {
            fn_.push(s.clone());
        }
    }
    Ok(ProbePartition { tp, fn_, tau: None })
}

/// Minimum per-sample model NAS over `tp`.
pub fn halting_threshold(model: &ModelState, tp: &[BinarySample]) -> Result<f64> {
    if tp.is_empty() {
        return Err(Error::Probing("no true positives in the probing set, cannot derive tau".into()));
    }
    halting_threshold_from(&NasMatrix::compute(model, tp)?.per_sample_model())
}
