//! Evaluation metrics: confusion counts, precision/recall/F1, calibration,
//! correlations, two-covariate least squares, the short-answer response
//! taxonomy, decision-shift tables and confidence histograms.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{self, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::{short_answer, ExactMatch, QaRecord, ShortAnswerOutcome};
use crate::error::{input_err, Error, Result};
use crate::model::ModelState;
use crate::sample::{BinarySample, Label};

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub label: Label,
    pub decision: Label,
    /// Probability of the chosen candidate.
    pub confidence: f64,
    /// First-token entropy of the short-answer response.
    pub entropy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short_answer: Option<ShortAnswerOutcome>,
}

impl EvalRecord {
    pub fn correct(&self) -> bool {
        self.label == self.decision
    }

    pub fn class(&self) -> Cell {
        match (self.label, self.decision) {
            (Label::Positive, Label::Positive) => Cell::Tp,
            (Label::Negative, Label::Positive) => Cell::Fp,
            (Label::Negative, Label::Negative) => Cell::Tn,
            (Label::Positive, Label::Negative) => Cell::Fn,
        }
    }
}

/// Decides every sample and judges the short answer to its question.
pub fn evaluate(model: &ModelState, samples: &[BinarySample]) -> Result<Vec<EvalRecord>> {
    samples
        .iter()
        .map(|s| {
            let d = model.answer_decision(s)?;
            let record = QaRecord {
                id: s.id.clone(),
                question: s.question.clone(),
                gold: s.gold.clone(),
                wrong: None,
                task_tag: String::new(),
            };
            let (_, entropy, outcome) = short_answer(model, &record, &ExactMatch)?;
            Ok(EvalRecord {
                id: s.id.clone(),
                label: s.label,
                decision: d.decision,
                confidence: d.confidence,
                entropy,
                short_answer: Some(outcome),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Tp,
    Fp,
    Tn,
    Fn,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn add(&mut self, cell: Cell) {
        match cell {
            Cell::Tp => self.tp += 1,
            Cell::Fp => self.fp += 1,
            Cell::Tn => self.tn += 1,
            Cell::Fn => self.fn_ += 1,
        }
    }
}

pub fn confusion(records: &[EvalRecord]) -> Result<ConfusionCounts> {
    if records.is_empty() {
        return Err(input_err!("confusion counts of an empty record set"));
    }
    let mut c = ConfusionCounts::default();
    for r in records {
        c.add(r.class());
    }
    Ok(c)
}

/// Metric computed over a zero denominator and reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    AccuracyUndefined,
    PrecisionUndefined,
    RecallUndefined,
    F1Undefined,
    ConstantTarget,
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flag::AccuracyUndefined => "accuracy_undefined",
            Flag::PrecisionUndefined => "precision_undefined",
            Flag::RecallUndefined => "recall_undefined",
            Flag::F1Undefined => "f1_undefined",
            Flag::ConstantTarget => "constant_target",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub flags: Vec<Flag>,
}

fn ratio(num: f64, den: f64, flag: Flag, flags: &mut Vec<Flag>) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        flags.push(flag);
        0.0
    }
}

/// F1 from precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    let s = precision + recall;
    (s > 0.0).then(|| 2.0 * precision * recall / s)
}

pub fn prf1(c: &ConfusionCounts) -> Prf1 {
    let mut flags = Vec::new();
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let accuracy = ratio(tp + tn, c.total() as f64, Flag::AccuracyUndefined, &mut flags);
    let precision = ratio(tp, tp + fp, Flag::PrecisionUndefined, &mut flags);
    let recall = ratio(tp, tp + fn_, Flag::RecallUndefined, &mut flags);
    let f1 = f1_score(precision, recall).unwrap_or_else(|| {
        flags.push(Flag::F1Undefined);
        0.0
    });
    Prf1 {
        accuracy,
        precision,
        recall,
        f1,
        flags,
    }
}

/// Bin of a confidence in `[0, 1]` among `bins` equal-width bins, right-closed
/// (`(lo, hi]`), with 0 in the first bin and 1 in the last.
pub fn confidence_bin(confidence: f64, bins: usize) -> usize {
    let b = libm::ceil(confidence * bins as f64) as usize;
    b.clamp(1, bins) - 1
}

fn check_confidence(r: &EvalRecord) -> Result<()> {
    if !(0.0..=1.0).contains(&r.confidence) {
        return Err(input_err!("record {}: confidence {} outside [0, 1]", r.id, r.confidence));
    }
    Ok(())
}

/// Expected calibration error over equal-width bins.
pub fn ece(records: &[EvalRecord], bins: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(input_err!("calibration error of an empty record set"));
    }
    if bins == 0 {
        return Err(input_err!("ece needs at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    for r in records {
        check_confidence(r)?;
        let b = confidence_bin(r.confidence, bins);
        count[b] += 1;
        hits[b] += usize::from(r.correct());
        conf[b] += r.confidence;
    }
    let n = records.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] as f64 / nb - conf[b] / nb).abs()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their ranks.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn correlations(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(input_err!("correlation of sequences of length {} and {}", x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(input_err!("correlation needs at least 3 points, got {}", x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(input_err!("correlation inputs must be finite"));
    }
    Ok(Correlation {
        pearson: pearson(x, y)?,
        spearman: pearson(&average_ranks(x), &average_ranks(y))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ols2 {
    pub coef1: f64,
    pub coef2: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub flags: Vec<Flag>,
}

/// Least squares of `y` on `x1`, `x2` and an intercept.
pub fn ols2(y: &[f64], x1: &[f64], x2: &[f64]) -> Result<Ols2> {
    let n = y.len();
    if x1.len() != n || x2.len() != n {
        return Err(input_err!("regression columns differ in length"));
    }
    if n < 4 {
        return Err(input_err!("regression needs at least 4 points, got {n}"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (my, m1, m2) = (mean(y), mean(x1), mean(x2));
    let (mut s11, mut s12, mut s22, mut s1y, mut s2y, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b, c) = (x1[i] - m1, x2[i] - m2, y[i] - my);
        s11 += a * a;
        s12 += a * b;
        s22 += b * b;
        s1y += a * c;
        s2y += b * c;
        syy += c * c;
    }
    let det = s11 * s22 - s12 * s12;
    if !(det > 1e-12 * s11 * s22) || s11 == 0.0 || s22 == 0.0 {
        return Err(Error::SingularDesign);
    }
    if syy == 0.0 {
        return Ok(Ols2 {
            coef1: 0.0,
            coef2: 0.0,
            intercept: my,
            r_squared: 0.0,
            flags: vec![Flag::ConstantTarget],
        });
    }
    let coef1 = (s22 * s1y - s12 * s2y) / det;
    let coef2 = (s11 * s2y - s12 * s1y) / det;
    let intercept = my - coef1 * m1 - coef2 * m2;
    let sse: f64 = (0..n)
        .map(|i| {
            let e = y[i] - (coef1 * x1[i] + coef2 * x2[i] + intercept);
            e * e
        })
        .sum();
    Ok(Ols2 {
        coef1,
        coef2,
        intercept,
        r_squared: 1.0 - sse / syy,
        flags: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResponseKind {
    #[serde(rename = "Det-T")]
    DetT,
    #[serde(rename = "Det-F")]
    DetF,
    #[serde(rename = "Non-Det")]
    NonDet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceLevel {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Category {
    pub kind: ResponseKind,
    pub level: ConfidenceLevel,
}

impl Category {
    pub const ALL: [Category; 6] = {
        use ConfidenceLevel::*;
        use ResponseKind::*;
        [
            Category { kind: DetT, level: High },
            Category { kind: DetT, level: Low },
            Category { kind: DetF, level: High },
            Category { kind: DetF, level: Low },
            Category { kind: NonDet, level: High },
            Category { kind: NonDet, level: Low },
        ]
    };
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ResponseKind::DetT => "Det-T",
            ResponseKind::DetF => "Det-F",
            ResponseKind::NonDet => "Non-Det",
        };
        let level = match self.level {
            ConfidenceLevel::High => "high",
            ConfidenceLevel::Low => "low",
        };
        write!(f, "{kind}/{level}")
    }
}

/// Median of the record entropies (mean of the two middle values for even counts).
pub fn median_entropy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(input_err!("median entropy of an empty record set"));
    }
    let mut e: Vec<f64> = records.iter().map(|r| r.entropy).collect();
    e.sort_by(f64::total_cmp);
    let m = e.len() / 2;
    Ok(if e.len() % 2 == 1 { e[m] } else { (e[m - 1] + e[m]) / 2.0 })
}

/// Entropy at or below the median counts as high confidence.
pub fn classify_response(record: &EvalRecord, median_entropy: f64) -> Result<Category> {
    let kind = match record.short_answer {
        Some(ShortAnswerOutcome::Correct) => ResponseKind::DetT,
        Some(ShortAnswerOutcome::Incorrect) => ResponseKind::DetF,
        Some(ShortAnswerOutcome::Abstain) => ResponseKind::NonDet,
        None => return Err(input_err!("record {} has no short-answer outcome", record.id)),
    };
    let level = if record.entropy <= median_entropy {
        ConfidenceLevel::High
    } else {
        ConfidenceLevel::Low
    };
    Ok(Category { kind, level })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub fn_total: u64,
    pub fn_to_tp: u64,
    pub tn_total: u64,
    pub tn_to_fp: u64,
}

impl ShiftRow {
    /// `None` when the category had no false negatives.
    pub fn fn_to_tp_ratio(&self) -> Option<f64> {
        (self.fn_total > 0).then(|| self.fn_to_tp as f64 / self.fn_total as f64)
    }

    pub fn tn_to_fp_ratio(&self) -> Option<f64> {
        (self.tn_total > 0).then(|| self.tn_to_fp as f64 / self.tn_total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftTable {
    pub rows: Vec<(Category, ShiftRow)>,
}

fn fmt_ratio(r: Option<f64>) -> String {
    r.map_or_else(|| "N/A".to_string(), |v| alloc::format!("{v}"))
}

impl ShiftTable {
    pub fn get(&self, c: Category) -> Option<&ShiftRow> {
        self.rows.iter().find(|(k, _)| *k == c).map(|(_, r)| r)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,fn_total,fn_to_tp,fn_to_tp_ratio,tn_total,tn_to_fp,tn_to_fp_ratio\n");
        for (c, r) in &self.rows {
            let _ = writeln!(
                s,
                "{c},{},{},{},{},{},{}",
                r.fn_total,
                r.fn_to_tp,
                fmt_ratio(r.fn_to_tp_ratio()),
                r.tn_total,
                r.tn_to_fp,
                fmt_ratio(r.tn_to_fp_ratio())
            );
        }
        s
    }
}

/// FN→TP and TN→FP shifts per response category. Categories and the entropy
/// median come from `before`; `after` must cover exactly the same ids.
pub fn shift_ratios(before: &[EvalRecord], after: &[EvalRecord]) -> Result<ShiftTable> {
    let median = median_entropy(before)?;
    let mut later: BTreeMap<&str, &EvalRecord> = BTreeMap::new();
    for r in after {
        if later.insert(&r.id, r).is_some() {
            return Err(input_err!("duplicate id {} in the later records", r.id));
        }
    }
    if later.len() != before.len() {
        return Err(input_err!("record sets differ: {} before, {} after", before.len(), later.len()));
    }
    let mut rows: BTreeMap<Category, ShiftRow> = Category::ALL.iter().map(|&c| (c, ShiftRow::default())).collect();
    for b in before {
        let a = later
            .get(b.id.as_str())
            .ok_or_else(|| input_err!("id {} missing from the later records", b.id))?;
        if a.label != b.label {
            return Err(input_err!("id {} changes label between record sets", b.id));
        }
        let row = rows.get_mut(&classify_response(b, median)?).expect("all categories present");
        match (b.class(), a.class()) {
            (Cell::Fn, next) => {
                row.fn_total += 1;
                row.fn_to_tp += u64::from(next == Cell::Tp);
            }
            (Cell::Tn, next) => {
                row.tn_total += 1;
                row.tn_to_fp += u64::from(next == Cell::Fp);
            }
            _ => {}
        }
    }
    Ok(ShiftTable {
        rows: rows.into_iter().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
}

impl Histogram {
    pub fn totals(&self) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        for b in &self.bins {
            c.tp += b.tp;
            c.fp += b.fp;
            c.tn += b.tn;
            c.fn_ += b.fn_;
        }
        c
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,tp,fp,tn,fn\n");
        for b in &self.bins {
            let _ = writeln!(s, "{},{},{},{},{},{}", b.bin_lo, b.bin_hi, b.tp, b.fp, b.tn, b.fn_);
        }
        s
    }
}

/// Confidence histogram split by confusion cell, using the ECE binning.
pub fn histogram(records: &[EvalRecord], bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(input_err!("histogram needs at least 2 bins, got {bins}"));
    }
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            bin_lo: b as f64 / bins as f64,
            bin_hi: (b + 1) as f64 / bins as f64,
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
        })
        .collect();
    for r in records {
        check_confidence(r)?;
        let bin = &mut out[confidence_bin(r.confidence, bins)];
        match r.class() {
            Cell::Tp => bin.tp += 1,
            Cell::Fp => bin.fp += 1,
            Cell::Tn => bin.tn += 1,
            Cell::Fn => bin.fn_ += 1,
        }
    }
    Ok(Histogram { bins: out })
}

pub const ECE_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub model_nas: Option<f64>,
    pub ece: f64,
    pub counts: ConfusionCounts,
    pub flags: Vec<Flag>,
}

impl MetricsReport {
    pub fn from_records(records: &[EvalRecord], model_nas: Option<f64>) -> Result<Self> {
        let counts = confusion(records)?;
        let m = prf1(&counts);
        Ok(Self {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            model_nas,
            ece: ece(records, ECE_BINS)?,
            counts,
            flags: m.flags,
        })
    }

    /// `precision − recall`; positive when the model leans negative.
    pub fn gap(&self) -> f64 {
        self.precision - self.recall
    }

    pub fn to_csv(&self) -> String {
        let nas = self.model_nas.map_or_else(String::new, |v| alloc::format!("{v}"));
        let flags: Vec<String> = self.flags.iter().map(|f| f.to_string()).collect();
        alloc::format!(
            "accuracy,precision,recall,f1,model_nas,ece,tp,fp,tn,fn,flags\n{},{},{},{},{},{},{},{},{},{},{}\n",
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            nas,
            self.ece,
            self.counts.tp,
            self.counts.fp,
            self.counts.tn,
            self.counts.fn_,
            flags.join(";")
        )
    }
}

/// Mean confidence of the records decided Negative, if any.
pub fn negative_confidence(records: &[EvalRecord]) -> Option<f64> {
    let neg: Vec<f64> = records
        .iter()
        .filter(|r| r.decision == Label::Negative)
        .map(|r| r.confidence)
        .collect();
    (!neg.is_empty()).then(|| neg.iter().sum::<f64>() / neg.len() as f64)
}

/// Model NAS against negative-decision confidence, paired per sample and
/// per subset (samples sharing an instruction prefix).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NasConfidence {
    pub samples: usize,
    pub subsets: usize,
    /// `None` when fewer than 3 points or a constant column.
    pub per_sample: Option<Correlation>,
    pub per_subset: Option<Correlation>,
}

/// Uses only samples the model answers Negative. Per subset, the subset's
/// mean model NAS is paired with its mean negative confidence.
pub fn nas_confidence(model: &ModelState, samples: &[BinarySample]) -> Result<NasConfidence> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut groups: BTreeMap<Vec<crate::vocab::TokenId>, (f64, f64, usize)> = BTreeMap::new();
    for s in samples {
        let d = model.answer_decision(s)?;
        if d.decision != Label::Negative {
            continue;
        }
        let nas = crate::nas::NasMatrix::compute(model, core::slice::from_ref(s))?.model()?;
        xs.push(nas);
        ys.push(d.confidence);
        let g = groups.entry(s.tokens[..s.instr_len].to_vec()).or_default();
        g.0 += nas;
        g.1 += d.confidence;
        g.2 += 1;
    }
    let gx: Vec<f64> = groups.values().map(|g| g.0 / g.2 as f64).collect();
    let gy: Vec<f64> = groups.values().map(|g| g.1 / g.2 as f64).collect();
    Ok(NasConfidence {
        samples: xs.len(),
        subsets: gx.len(),
        per_sample: correlations(&xs, &ys).ok(),
        per_subset: correlations(&gx, &gy).ok(),
    })
}
